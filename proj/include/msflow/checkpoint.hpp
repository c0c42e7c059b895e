#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "msflow/tensor.hpp"

namespace msf {

// One tensor per file. Layout: 7-byte magic "MSFLOW1", then rank as u32,
// then the extents as u32 each, then the elements as f32, everything
// little endian.
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// A model checkpoint is a directory of .msf tensor files plus a
// manifest.json listing the entries in order.
void save_named_tensors(const std::filesystem::path& dir,
                        const std::vector<std::pair<std::string, Tensor>>& entries);
std::vector<std::pair<std::string, Tensor>> load_named_tensors(
    const std::filesystem::path& dir);

}  // namespace msf
