#include "maskattn/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace maskattn::img {

namespace {

void put_u32be(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(uint8_t(x >> 24));
  v.push_back(uint8_t(x >> 16));
  v.push_back(uint8_t(x >> 8));
  v.push_back(uint8_t(x));
}

void write_chunk(std::ofstream& f, const char type[4], const std::vector<uint8_t>& data) {
  std::vector<uint8_t> head;
  put_u32be(head, uint32_t(data.size()));
  f.write(reinterpret_cast<const char*>(head.data()), 4);
  f.write(type, 4);
  if (!data.empty()) f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), uInt(data.size()));
  std::vector<uint8_t> tail;
  put_u32be(tail, crc);
  f.write(reinterpret_cast<const char*>(tail.data()), 4);
}

}  // namespace

void write_png_rgb8(const std::string& path, int64_t width, int64_t height,
                    const std::vector<uint8_t>& rgb) {
  if (int64_t(rgb.size()) != 3 * width * height)
    throw std::runtime_error(path + ": pixel buffer size does not match dimensions");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  f.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<uint8_t> ihdr;
  put_u32be(ihdr, uint32_t(width));
  put_u32be(ihdr, uint32_t(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(f, "IHDR", ihdr);

  // filter byte 0 per scanline
  std::vector<uint8_t> raw(size_t(height) * (size_t(width) * 3 + 1));
  for (int64_t y = 0; y < height; ++y) {
    uint8_t* row = raw.data() + y * (width * 3 + 1);
    row[0] = 0;
    std::memcpy(row + 1, rgb.data() + y * width * 3, size_t(width) * 3);
  }
  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<uint8_t> idat(bound);
  if (compress2(idat.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw std::runtime_error(path + ": zlib compression failed");
  idat.resize(bound);
  write_chunk(f, "IDAT", idat);
  write_chunk(f, "IEND", {});
  if (!f) throw std::runtime_error(path + ": write failed");
}

std::array<uint8_t, 3> palette_color(uint16_t id) {
  if (id == 0) return {40, 40, 40};
  uint64_t z = uint64_t(id) + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  // keep colors bright enough to distinguish from the background
  return {uint8_t(64 + (z & 0xbf)), uint8_t(64 + ((z >> 8) & 0xbf)),
          uint8_t(64 + ((z >> 16) & 0xbf))};
}

std::vector<uint8_t> colorize_labels(const std::vector<uint16_t>& labels) {
  std::vector<uint8_t> out(labels.size() * 3);
  for (size_t i = 0; i < labels.size(); ++i) {
    const auto c = palette_color(labels[i]);
    out[3 * i] = c[0];
    out[3 * i + 1] = c[1];
    out[3 * i + 2] = c[2];
  }
  return out;
}

std::vector<uint8_t> planar_to_rgb8(const float* image, int64_t h, int64_t w) {
  std::vector<uint8_t> out(size_t(3 * h * w));
  for (int64_t p = 0; p < h * w; ++p)
    for (int64_t c = 0; c < 3; ++c)
      out[size_t(3 * p + c)] =
          uint8_t(std::clamp(std::lround(double(image[c * h * w + p]) * 255.0), 0L, 255L));
  return out;
}

}  // namespace maskattn::img
