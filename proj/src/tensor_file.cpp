#include "spinelab/tensor_file.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <type_traits>

#include "spinelab/error.hpp"

namespace spinelab {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'L', 'T', 'E', 'N', 'S', 'R'};

template <typename T>
constexpr TensorDType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return TensorDType::kFloat32;
  if constexpr (std::is_same_v<T, double>) return TensorDType::kFloat64;
  if constexpr (std::is_same_v<T, int32_t>) return TensorDType::kInt32;
}

size_t dtype_size(TensorDType d) {
  switch (d) {
    case TensorDType::kFloat32: return 4;
    case TensorDType::kFloat64: return 8;
    case TensorDType::kInt32: return 4;
  }
  throw FormatError("unknown dtype code");
}

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

bool get_u32(std::istream& is, uint32_t* v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  *v = 0;
  for (int i = 0; i < 4; ++i) *v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return true;
}

bool get_u64(std::istream& is, uint64_t* v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  *v = 0;
  for (int i = 0; i < 8; ++i) *v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return true;
}

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& path) {
  if constexpr (std::is_floating_point_v<T>) {
    for (int64_t i = 0; i < t.numel(); ++i) {
      if (!std::isfinite(t[i]))
        throw Error("refusing to write non-finite value to " + path);
    }
  }
}

template <typename T>
void write_impl(const std::string& path, const Tensor<T>& t) {
  check_finite(t, path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path);
  os.write(kMagic, 8);
  put_u32(os, static_cast<uint32_t>(dtype_of<T>()));
  put_u32(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape()) put_u64(os, static_cast<uint64_t>(d));
  // Payload is raw little-endian; spinelab targets LE hosts.
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw Error("short write: " + path);
}

TensorFileInfo read_header(std::istream& is, const std::string& path) {
  char magic[8];
  if (!is.read(magic, 8)) throw CorruptionError("truncated header: " + path);
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError("bad magic in " + path);
  uint32_t dtype_code = 0, rank = 0;
  if (!get_u32(is, &dtype_code) || !get_u32(is, &rank))
    throw CorruptionError("truncated header: " + path);
  if (dtype_code < 1 || dtype_code > 3)
    throw FormatError("unknown dtype code " + std::to_string(dtype_code) +
                      " in " + path);
  if (rank > 16) throw FormatError("implausible rank in " + path);
  TensorFileInfo info;
  info.dtype = static_cast<TensorDType>(dtype_code);
  info.shape.resize(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    uint64_t d = 0;
    if (!get_u64(is, &d)) throw CorruptionError("truncated shape: " + path);
    info.shape[i] = static_cast<int64_t>(d);
  }
  return info;
}

template <typename T>
Tensor<T> read_payload(std::istream& is, const TensorFileInfo& info,
                       const std::string& path) {
  Tensor<T> t(info.shape);
  const std::streamsize bytes =
      static_cast<std::streamsize>(t.numel() * sizeof(T));
  if (!is.read(reinterpret_cast<char*>(t.data()), bytes))
    throw CorruptionError("truncated payload: " + path);
  // A trailing byte means the writer and header disagree.
  char extra;
  if (is.read(&extra, 1))
    throw CorruptionError("payload longer than header claims: " + path);
  return t;
}

}  // namespace

TensorFileInfo tensor_probe(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open: " + path);
  return read_header(is, path);
}

void tensor_write(const std::string& path, const Tensor<float>& t) {
  write_impl(path, t);
}
void tensor_write(const std::string& path, const Tensor<double>& t) {
  write_impl(path, t);
}
void tensor_write(const std::string& path, const Tensor<int32_t>& t) {
  write_impl(path, t);
}

template <typename T>
Tensor<T> tensor_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open: " + path);
  const TensorFileInfo info = read_header(is, path);
  if (info.dtype != dtype_of<T>())
    throw FormatError("dtype mismatch reading " + path);
  return read_payload<T>(is, info, path);
}

template <typename T>
Tensor<T> tensor_read_as(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open: " + path);
  const TensorFileInfo info = read_header(is, path);
  switch (info.dtype) {
    case TensorDType::kFloat32:
      return read_payload<float>(is, info, path).template cast<T>();
    case TensorDType::kFloat64:
      return read_payload<double>(is, info, path).template cast<T>();
    case TensorDType::kInt32:
      return read_payload<int32_t>(is, info, path).template cast<T>();
  }
  throw FormatError("unknown dtype reading " + path);
}

template Tensor<float> tensor_read<float>(const std::string&);
template Tensor<double> tensor_read<double>(const std::string&);
template Tensor<int32_t> tensor_read<int32_t>(const std::string&);
template Tensor<float> tensor_read_as<float>(const std::string&);
template Tensor<double> tensor_read_as<double>(const std::string&);

}  // namespace spinelab
