#pragma once

// .tns tensor container: magic "TNSR", u8 version=1, u8 dtype
// (0=f32, 1=u16, 2=u8, 3=f64), u8 rank, u8 reserved=0, rank u32 LE dims,
// row-major little-endian payload. All modules exchange tensors this way.

#include <cstdint>
#include <string>
#include <vector>

namespace maskattn::tns {

enum class Dtype : uint8_t { f32 = 0, u16 = 1, u8 = 2, f64 = 3 };

size_t dtype_size(Dtype d);

struct TnsData {
  Dtype dtype = Dtype::f32;
  std::vector<uint32_t> dims;
  std::vector<uint8_t> payload;  // raw little-endian bytes

  int64_t count() const {
    int64_t n = 1;
    for (uint32_t d : dims) n *= d;
    return n;
  }
  const float* as_f32() const;
  const double* as_f64() const;
  const uint16_t* as_u16() const;
  const uint8_t* as_u8() const;
};

void write(const std::string& path, const TnsData& t);
TnsData read(const std::string& path);  // throws std::runtime_error naming the file

TnsData from_f32(const std::vector<uint32_t>& dims, const float* data);
TnsData from_f64(const std::vector<uint32_t>& dims, const double* data);
TnsData from_u16(const std::vector<uint32_t>& dims, const uint16_t* data);
TnsData from_u8(const std::vector<uint32_t>& dims, const uint8_t* data);

}  // namespace maskattn::tns
