#include "msflow/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <json.hpp>

#include "msflow/common.hpp"
#include "msflow/image.hpp"

namespace msf::data {

using nlohmann::json;

namespace {

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  MSF_CHECK(in.good(), "cannot open " << path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    MSF_CHECK(false, path.string() << ": " << e.what());
  }
  return j;
}

PairRecord pair_from_json(const json& j, const std::string& where) {
  MSF_CHECK(j.is_object() && j.contains("a") && j.contains("b"),
            where << ": pair record needs string fields 'a' and 'b'");
  PairRecord rec;
  rec.a = j.at("a").get<std::string>();
  rec.b = j.at("b").get<std::string>();
  if (j.contains("corrs")) {
    for (const auto& q : j.at("corrs")) {
      MSF_CHECK(q.is_array() && q.size() == 4,
                where << ": corrs entries must be [xs,ys,xt,yt]");
      rec.corrs.push_back({q[0].get<double>(), q[1].get<double>(),
                           q[2].get<double>(), q[3].get<double>()});
    }
  }
  auto read_points = [&](const char* key, std::vector<std::pair<double, double>>& out) {
    if (!j.contains(key)) return;
    for (const auto& p : j.at(key)) {
      MSF_CHECK(p.is_array() && p.size() == 2, where << ": " << key
                                                     << " entries must be [x,y]");
      out.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
  };
  read_points("kps_a", rec.kps_a);
  read_points("kps_b", rec.kps_b);
  if (j.contains("bbox_b")) {
    const auto& b = j.at("bbox_b");
    MSF_CHECK(b.is_array() && b.size() == 4, where << ": bbox_b must be [x0,y0,x1,y1]");
    rec.bbox_b = Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                     b[3].get<double>()};
  }
  return rec;
}

json pair_to_json(const PairRecord& rec) {
  json j;
  j["a"] = rec.a;
  j["b"] = rec.b;
  json corrs = json::array();
  for (const auto& q : rec.corrs) corrs.push_back({q.xs, q.ys, q.xt, q.yt});
  j["corrs"] = std::move(corrs);
  if (!rec.kps_a.empty()) {
    json ka = json::array(), kb = json::array();
    for (const auto& [x, y] : rec.kps_a) ka.push_back({x, y});
    for (const auto& [x, y] : rec.kps_b) kb.push_back({x, y});
    j["kps_a"] = std::move(ka);
    j["kps_b"] = std::move(kb);
  }
  if (rec.bbox_b) {
    j["bbox_b"] = {rec.bbox_b->x0, rec.bbox_b->y0, rec.bbox_b->x1, rec.bbox_b->y1};
  }
  return j;
}

}  // namespace

Tensor Dataset::load(const std::string& id) const {
  auto it = files.find(id);
  MSF_CHECK(it != files.end(), "dataset: unknown image id '" << id << "'");
  return img::load_image(it->second);
}

Dataset load_dataset(const std::filesystem::path& root) {
  MSF_CHECK(std::filesystem::is_directory(root),
            "dataset: " << root.string() << " is not a directory");
  Dataset ds;
  ds.root = root;

  const auto images_dir = root / "images";
  MSF_CHECK(std::filesystem::is_directory(images_dir),
            "dataset: missing images/ under " << root.string());
  for (const auto& entry : std::filesystem::directory_iterator(images_dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext != ".png" && ext != ".jpg" && ext != ".jpeg") continue;
    const auto id = entry.path().stem().string();
    MSF_CHECK(!ds.files.count(id), "dataset: duplicate image id '" << id << "'");
    ds.files[id] = entry.path();
    ds.image_ids.push_back(id);
  }
  std::sort(ds.image_ids.begin(), ds.image_ids.end());

  const json classes = read_json_file(root / "classes.json");
  MSF_CHECK(classes.is_object(), "classes.json: expected an object of id -> label");
  for (const auto& [id, label] : classes.items()) {
    MSF_CHECK(ds.files.count(id),
              "classes.json: id '" << id << "' has no file under images/");
    ds.classes[id] = label.get<std::string>();
  }

  const auto pairs_path = root / "pairs.jsonl";
  if (std::filesystem::exists(pairs_path)) ds.pairs = load_pairs(pairs_path);
  return ds;
}

void save_pairs(const std::filesystem::path& path, const std::vector<PairRecord>& pairs) {
  std::ofstream out(path);
  MSF_CHECK(out.good(), "cannot write " << path.string());
  for (const auto& rec : pairs) out << pair_to_json(rec).dump() << "\n";
}

std::vector<PairRecord> load_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  MSF_CHECK(in.good(), "cannot open " << path.string());
  std::vector<PairRecord> pairs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      MSF_CHECK(false, path.string() << ":" << lineno << ": " << e.what());
    }
    pairs.push_back(pair_from_json(j, path.string() + ":" + std::to_string(lineno)));
  }
  return pairs;
}

void save_classes(const std::filesystem::path& path,
                  const std::map<std::string, std::string>& classes) {
  json j = json::object();
  for (const auto& [id, label] : classes) j[id] = label;
  std::ofstream out(path);
  MSF_CHECK(out.good(), "cannot write " << path.string());
  out << j.dump(2) << "\n";
}

}  // namespace msf::data
