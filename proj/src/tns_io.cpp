#include "maskattn/tns_io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace maskattn::tns {

namespace {
static_assert(sizeof(float) == 4 && sizeof(double) == 8);

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}
}  // namespace

size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::u16: return 2;
    case Dtype::u8: return 1;
    case Dtype::f64: return 8;
  }
  throw std::runtime_error("bad dtype");
}

const float* TnsData::as_f32() const {
  if (dtype != Dtype::f32) throw std::runtime_error("tns: dtype is not f32");
  return reinterpret_cast<const float*>(payload.data());
}
const double* TnsData::as_f64() const {
  if (dtype != Dtype::f64) throw std::runtime_error("tns: dtype is not f64");
  return reinterpret_cast<const double*>(payload.data());
}
const uint16_t* TnsData::as_u16() const {
  if (dtype != Dtype::u16) throw std::runtime_error("tns: dtype is not u16");
  return reinterpret_cast<const uint16_t*>(payload.data());
}
const uint8_t* TnsData::as_u8() const {
  if (dtype != Dtype::u8) throw std::runtime_error("tns: dtype is not u8");
  return payload.data();
}

void write(const std::string& path, const TnsData& t) {
  if (t.dims.size() > 255) throw std::runtime_error("tns: rank > 255");
  if (t.payload.size() != size_t(t.count()) * dtype_size(t.dtype))
    throw std::runtime_error("tns: payload size does not match dims");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(path, "cannot open for writing");
  const uint8_t header[8] = {'T', 'N', 'S', 'R', 1, uint8_t(t.dtype),
                             uint8_t(t.dims.size()), 0};
  f.write(reinterpret_cast<const char*>(header), 8);
  for (uint32_t d : t.dims) {
    uint8_t le[4] = {uint8_t(d), uint8_t(d >> 8), uint8_t(d >> 16), uint8_t(d >> 24)};
    f.write(reinterpret_cast<const char*>(le), 4);
  }
  // host is little-endian (asserted below); payload written verbatim
  f.write(reinterpret_cast<const char*>(t.payload.data()), std::streamsize(t.payload.size()));
  if (!f) fail(path, "write failed");
}

TnsData read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open");
  uint8_t header[8];
  f.read(reinterpret_cast<char*>(header), 8);
  if (!f) fail(path, "truncated header");
  if (std::memcmp(header, "TNSR", 4) != 0) fail(path, "bad magic bytes");
  if (header[4] != 1) fail(path, "unsupported version");
  if (header[5] > 3) fail(path, "unknown dtype");
  TnsData t;
  t.dtype = Dtype(header[5]);
  const int rank = header[6];
  t.dims.resize(rank);
  for (int i = 0; i < rank; ++i) {
    uint8_t le[4];
    f.read(reinterpret_cast<char*>(le), 4);
    if (!f) fail(path, "truncated dims");
    t.dims[i] = uint32_t(le[0]) | uint32_t(le[1]) << 8 | uint32_t(le[2]) << 16 |
                uint32_t(le[3]) << 24;
  }
  const size_t bytes = size_t(t.count()) * dtype_size(t.dtype);
  t.payload.resize(bytes);
  f.read(reinterpret_cast<char*>(t.payload.data()), std::streamsize(bytes));
  if (!f) fail(path, "truncated payload");
  if (f.peek() != std::ifstream::traits_type::eof()) fail(path, "trailing bytes");
  return t;
}

namespace {
template <class T>
TnsData from_raw(Dtype dt, const std::vector<uint32_t>& dims, const T* data) {
  TnsData t;
  t.dtype = dt;
  t.dims = dims;
  t.payload.resize(size_t(t.count()) * sizeof(T));
  std::memcpy(t.payload.data(), data, t.payload.size());
  return t;
}

const int endian_probe = 1;
const bool is_little = *reinterpret_cast<const char*>(&endian_probe) == 1;
struct EndianCheck {
  EndianCheck() {
    if (!is_little) throw std::runtime_error("big-endian hosts are unsupported");
  }
} endian_check;
}  // namespace

TnsData from_f32(const std::vector<uint32_t>& dims, const float* d) { return from_raw(Dtype::f32, dims, d); }
TnsData from_f64(const std::vector<uint32_t>& dims, const double* d) { return from_raw(Dtype::f64, dims, d); }
TnsData from_u16(const std::vector<uint32_t>& dims, const uint16_t* d) { return from_raw(Dtype::u16, dims, d); }
TnsData from_u8(const std::vector<uint32_t>& dims, const uint8_t* d) { return from_raw(Dtype::u8, dims, d); }

}  // namespace maskattn::tns
