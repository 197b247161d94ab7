#ifndef SPINELAB_TENSOR_FILE_HPP_
#define SPINELAB_TENSOR_FILE_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "spinelab/tensor.hpp"

namespace spinelab {

// Binary tensor container.
//
// Layout (all integers little-endian):
//   bytes 0..7   magic "SPLTENSR"
//   bytes 8..11  dtype code (uint32): 1 = float32, 2 = float64, 3 = int32
//   bytes 12..15 rank (uint32)
//   then rank x uint64 extents, row-major payload.
//
// Round-trips are bit-exact for the supported dtypes.

enum class TensorDType : uint32_t { kFloat32 = 1, kFloat64 = 2, kInt32 = 3 };

struct TensorFileInfo {
  TensorDType dtype;
  std::vector<int64_t> shape;
};

/// Reads header only (magic + dtype + shape). Throws FormatError on a bad
/// magic or dtype, CorruptionError on a short header.
TensorFileInfo tensor_probe(const std::string& path);

void tensor_write(const std::string& path, const Tensor<float>& t);
void tensor_write(const std::string& path, const Tensor<double>& t);
void tensor_write(const std::string& path, const Tensor<int32_t>& t);

/// Typed read; dtype on disk must match T exactly.
template <typename T>
Tensor<T> tensor_read(const std::string& path);

/// Read with conversion from any supported dtype to T.
template <typename T>
Tensor<T> tensor_read_as(const std::string& path);

}  // namespace spinelab

#endif  // SPINELAB_TENSOR_FILE_HPP_
