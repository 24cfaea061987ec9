#pragma once

// Minimal RGB8 PNG writer (zlib-backed) and the fixed label color palette.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace maskattn::img {

// rgb: interleaved 8-bit, row-major, 3 bytes per pixel.
void write_png_rgb8(const std::string& path, int64_t width, int64_t height,
                    const std::vector<uint8_t>& rgb);

// Deterministic palette: hash of the label id to RGB; id 0 maps to dark gray.
std::array<uint8_t, 3> palette_color(uint16_t id);

// Color-mapped preview of a label map.
std::vector<uint8_t> colorize_labels(const std::vector<uint16_t>& labels);

// [3,H,W] float image in [0,1] to interleaved RGB8.
std::vector<uint8_t> planar_to_rgb8(const float* image, int64_t h, int64_t w);

}  // namespace maskattn::img
