#pragma once

// Deterministic synthetic-shapes dataset: generation, directory I/O
// (meta.json + per-sample .tns files), resizing, and train-time augmentation.

#include <cstdint>
#include <string>
#include <vector>

#include "maskattn/rng.hpp"

namespace maskattn::data {

// class 0 = background (stuff); 1 circle, 2 rectangle, 3 triangle (things)
inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names = {"background", "circle", "rectangle", "triangle"};
  return names;
}
inline constexpr int64_t kNumClasses = 4;

struct SegSample {
  int64_t h = 0, w = 0;
  std::vector<float> image;        // [3,H,W] in [0,1]
  std::vector<uint16_t> semantic;  // [H,W]
  std::vector<uint16_t> instance;  // [H,W], 0 = none
};

// Throws if the sample violates its invariants (shape agreement, labels in
// range, each instance id covering exactly one thing class).
void validate_sample(const SegSample& s, const std::string& context);

struct GenConfig {
  int64_t n_images = 2200;
  int64_t size = 64;
  int64_t max_shapes = 5;
  double noise = 0.03;
  double val_fraction = 0.1;
};

struct DatasetMeta {
  std::vector<std::string> classes;
  std::vector<bool> is_thing;
  std::vector<int64_t> train_ids, val_ids;
  uint64_t seed = 0;
  GenConfig cfg;
};

SegSample generate_sample(const GenConfig& cfg, Rng& rng, int64_t forced_class);

// Writes meta.json plus images/, semantic/, instance/ under dir.
void generate_shapes_dataset(const std::string& dir, const GenConfig& cfg, uint64_t seed);

DatasetMeta load_meta(const std::string& dir);
void save_sample(const std::string& dir, int64_t id, const SegSample& s);
SegSample load_sample(const std::string& dir, int64_t id);

// Bilinear for the image, nearest-neighbor for both label maps.
SegSample resize_sample(const SegSample& s, int64_t th, int64_t tw);

// p=0.5 horizontal flip; scale jitter u in [0.8, 1.25] with center crop/pad
// back to the original size. Instance ids preserved.
SegSample augment(const SegSample& s, Rng& rng);

}  // namespace maskattn::data
