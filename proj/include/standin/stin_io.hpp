#pragma once

// STIN tensor files.
//
// Single tensor:
//   "STIN" | u32 version (=1) | u32 ndim | ndim x u64 dims | u32 dtype (0 = float32)
//   | little-endian float32 payload
//
// Named archive (checkpoints):
//   "STINARCH" | u32 version (=1) | u32 header_len | header bytes (text)
//   | u32 count | count x (u32 name_len | name bytes | single-tensor record)
//
// All integers are little-endian regardless of host byte order.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "standin/tensor.hpp"

namespace standin {

inline constexpr std::uint32_t kStinVersion = 1;
inline constexpr std::uint32_t kDtypeFloat32 = 0;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

struct NamedTensors {
    std::string header;
    std::vector<std::pair<std::string, Tensor>> entries;

    const Tensor* find(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const NamedTensors& archive);
NamedTensors load_archive(const std::filesystem::path& path);

}  // namespace standin
