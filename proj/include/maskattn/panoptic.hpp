#pragma once

// Panoptic label map shared by the decode and metrics layers.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskattn {

struct SegmentEntry {
  uint16_t id = 0;       // instance segment id, contiguous from 1
  uint16_t cls = 0;      // thing class
  int64_t pixels = 0;
};

struct PanopticMap {
  int64_t h = 0, w = 0;
  std::vector<uint16_t> semantic;   // [H,W]
  std::vector<uint16_t> instance;   // [H,W], 0 = stuff/background
  std::vector<SegmentEntry> segments;

  void validate(const std::vector<bool>& is_thing) const {
    const int64_t n = h * w;
    if (int64_t(semantic.size()) != n || int64_t(instance.size()) != n)
      throw std::runtime_error("PanopticMap: field sizes disagree");
    std::vector<int64_t> counts(segments.size() + 1, 0);
    for (int64_t i = 0; i < n; ++i) {
      const uint16_t id = instance[size_t(i)];
      if (id != 0) {
        if (id > segments.size())
          throw std::runtime_error("PanopticMap: instance id without segment entry");
        if (semantic[size_t(i)] >= is_thing.size() || !is_thing[semantic[size_t(i)]])
          throw std::runtime_error("PanopticMap: instance pixel with stuff class");
        counts[id] += 1;
      }
    }
    for (const SegmentEntry& s : segments) {
      if (s.id == 0 || s.id > segments.size() || segments[size_t(s.id - 1)].id != s.id)
        throw std::runtime_error("PanopticMap: segment ids not contiguous from 1");
      if (counts[s.id] != s.pixels)
        throw std::runtime_error("PanopticMap: segment pixel count mismatch");
    }
  }
};

}  // namespace maskattn
