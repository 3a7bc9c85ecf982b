#pragma once

// CMDT binary container of named arrays.
//
//   "CMDT" | version u16 | count u32 | count x entry
//   entry: name_len u16 | name | dtype u8 | rank u8 | dims u64[rank] | payload
//
// All integers and payload elements are little-endian.

#include "cmdm/nn/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cmdm::io {

inline constexpr std::uint16_t kTensorVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i64 = 2 };

std::size_t dtype_size(DType t);

struct Tensor {
  DType dtype = DType::f64;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> bytes;  // little-endian payload

  std::uint64_t numel() const;

  static Tensor from_mat(const nn::Mat& m);  // f64, rank 2
  static Tensor from_f32(const nn::Mat& m);  // rounded to float, rank 2
  static Tensor from_i64(const std::vector<std::int64_t>& v, std::vector<std::uint64_t> dims = {});
  static Tensor scalar_f64(double v);

  /// Rank-2 (or rank-1 as a row) view as doubles; f32 and i64 are widened.
  nn::Mat to_mat() const;
  std::vector<std::int64_t> to_i64() const;
  double to_scalar() const;

  bool operator==(const Tensor&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;

  bool operator==(const NamedTensor&) const = default;
};

using TensorList = std::vector<NamedTensor>;

std::vector<std::uint8_t> serialize(const TensorList& entries);
/// Throws ParseError with the byte offset on bad magic, version or truncation.
TensorList deserialize(const std::vector<std::uint8_t>& bytes);

void write_tensors(const std::filesystem::path& path, const TensorList& entries);
TensorList read_tensors(const std::filesystem::path& path);

const Tensor& find_tensor(const TensorList& entries, const std::string& name);

TensorList to_tensors(const nn::ParamTree& tree, const std::string& prefix = "");
/// Entries whose names start with prefix, prefix stripped; everything else is ignored.
nn::ParamTree to_param_tree(const TensorList& entries, const std::string& prefix = "");

}  // namespace cmdm::io
