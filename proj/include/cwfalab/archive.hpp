#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cwfalab/tensor.hpp"

namespace cwfalab {

// Flat tensor archive, little-endian:
//   "CWFT" | version u32 | count u32
//   then per entry: name_len u32 | name bytes | rank u32 | dims u32... | f32 payload
inline constexpr std::uint32_t kArchiveVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_archive(const std::string& path, const NamedTensors& entries);

// Preserves entry order. Throws FormatError on bad magic, truncation,
// unsupported version, or duplicate names.
NamedTensors load_archive(const std::string& path);

const Tensor* find_entry(const NamedTensors& entries, const std::string& name);

}  // namespace cwfalab
