#include "msflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "msflow/common.hpp"

namespace msf {

namespace {

constexpr char kMagic[7] = {'M', 'S', 'F', 'L', 'O', 'W', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is, const std::filesystem::path& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  MSF_CHECK(is.good(), "load_tensor: " << path << " is truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  MSF_CHECK(t.defined(), "save_tensor: undefined tensor");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  MSF_CHECK(os.good(), "save_tensor: cannot open " << path << " for writing");
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  for (float v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(v));
  os.flush();
  MSF_CHECK(os.good(), "save_tensor: write to " << path << " failed");
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  MSF_CHECK(is.good(), "load_tensor: cannot open " << path);
  char magic[7];
  is.read(magic, sizeof(magic));
  MSF_CHECK(is.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
            "load_tensor: " << path << " does not start with the MSFLOW1 magic");
  const std::uint32_t rank = get_u32(is, path);
  MSF_CHECK(rank <= 8, "load_tensor: " << path << " declares rank " << rank);
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i)
    shape[i] = static_cast<int>(get_u32(is, path));
  const std::size_t n = shape_numel(shape);
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i)
    data[i] = std::bit_cast<float>(get_u32(is, path));
  is.peek();
  MSF_CHECK(is.eof(), "load_tensor: " << path << " has trailing bytes");
  return Tensor::from_data(std::move(shape), std::move(data));
}

void save_named_tensors(const std::filesystem::path& dir,
                        const std::vector<std::pair<std::string, Tensor>>& entries) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    char file[32];
    std::snprintf(file, sizeof(file), "t%04zu.msf", i);
    save_tensor(dir / file, entries[i].second);
    manifest.push_back({{"name", entries[i].first}, {"file", file}});
  }
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  MSF_CHECK(os.good(), "save_named_tensors: cannot write manifest in " << dir);
  os << manifest.dump(2) << "\n";
}

std::vector<std::pair<std::string, Tensor>> load_named_tensors(
    const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  MSF_CHECK(is.good(), "load_named_tensors: no manifest.json in " << dir);
  nlohmann::json manifest = nlohmann::json::parse(is);
  MSF_CHECK(manifest.is_array(), "load_named_tensors: manifest in " << dir
                                     << " is not an array");
  std::vector<std::pair<std::string, Tensor>> entries;
  entries.reserve(manifest.size());
  for (const auto& e : manifest) {
    MSF_CHECK(e.contains("name") && e.contains("file"),
              "load_named_tensors: manifest entry missing name or file in " << dir);
    entries.emplace_back(e["name"].get<std::string>(),
                         load_tensor(dir / e["file"].get<std::string>()));
  }
  return entries;
}

}  // namespace msf
