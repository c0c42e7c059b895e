#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msflow/tensor.hpp"

// Dataset directory layout:
//   images/<id>.png|jpg      one file per image id
//   classes.json             {"<id>": "<class label>", ...}
//   pairs.jsonl              one JSON object per line, see PairRecord
namespace msf::data {

// One point match between the two images of a pair, pixel units.
struct Quad {
  double xs = 0, ys = 0, xt = 0, yt = 0;
};

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

// pairs.jsonl line:
// {"a": "...", "b": "...", "corrs": [[xs,ys,xt,yt], ...],
//  "kps_a": [[x,y],...], "kps_b": [[x,y],...], "bbox_b": [x0,y0,x1,y1]}
// kps_*/bbox_b are optional keypoint-evaluation annotations.
struct PairRecord {
  std::string a;
  std::string b;
  std::vector<Quad> corrs;
  std::vector<std::pair<double, double>> kps_a;
  std::vector<std::pair<double, double>> kps_b;
  std::optional<Box> bbox_b;
};

struct Dataset {
  std::filesystem::path root;
  std::vector<std::string> image_ids;               // sorted
  std::map<std::string, std::string> classes;       // id -> label
  std::map<std::string, std::filesystem::path> files;  // id -> image path
  std::vector<PairRecord> pairs;                    // empty if no pairs.jsonl

  bool has_image(const std::string& id) const { return files.count(id) != 0; }
  Tensor load(const std::string& id) const;  // [3,H,W] in [0,1]
};

// Reads classes.json (required) and pairs.jsonl (optional). Image ids are
// the file stems under images/; every id in classes.json must have a file.
Dataset load_dataset(const std::filesystem::path& root);

void save_pairs(const std::filesystem::path& path, const std::vector<PairRecord>& pairs);
std::vector<PairRecord> load_pairs(const std::filesystem::path& path);
void save_classes(const std::filesystem::path& path,
                  const std::map<std::string, std::string>& classes);

}  // namespace msf::data
