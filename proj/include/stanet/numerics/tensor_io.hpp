#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stanet/numerics/tensor.hpp"

// "STAN1" container: a flags word, a free-form metadata text and a list of
// named tensors. Layout, all little endian:
//
//   magic "STAN1" (5 bytes) | u32 version | u32 flags
//   u32 metadata length | metadata bytes
//   u64 tensor count
//   per tensor: u32 name length | name | u32 rank | u64 extents[rank]
//               | f64 values, row-major
namespace stanet {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint32_t kTensorFileVersion = 1;

struct TensorFile {
  std::uint32_t flags = 0;
  std::string metadata;
  NamedTensors tensors;

  // nullptr when absent.
  const Tensor* find(const std::string& name) const;
  // Throws LoadError naming the tensor when absent or of the wrong shape.
  const Tensor& get(const std::string& name, const Shape& expected) const;
};

std::string encode_tensor_file(const TensorFile& file);
TensorFile decode_tensor_file(const std::string& bytes);

// Throw LoadError on I/O failure or a malformed file.
void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

// FNV-1a over names, shapes and value bits.
std::uint64_t hash_tensors(const NamedTensors& tensors);

}  // namespace stanet
