#pragma once

// Decode layer: argmax semantic prediction, greedy density-seeded embedding
// clustering for instances, and panoptic fusion.

#include <cstdint>
#include <vector>

#include "maskattn/panoptic.hpp"

namespace maskattn::infer {

// Per-pixel argmax over planar logits [C,H,W]; ties break toward the lower
// class index.
std::vector<uint16_t> semantic_predict(const float* logits, int64_t classes, int64_t hw);

// Per-pixel softmax probability of the predicted class (planar logits).
std::vector<float> semantic_confidence(const float* logits, int64_t classes, int64_t hw,
                                       const std::vector<uint16_t>& pred);

struct ClusterConfig {
  double theta = 0.7;     // cosine similarity threshold
  int64_t min_size = 16;  // smaller clusters merge or drop
};

// Greedy seeded clustering over L2-normalized embeddings [d,H,W]: repeatedly
// seed at the unassigned thing pixel with the most unassigned neighbors at
// similarity >= theta, then claim all such pixels. Clusters below min_size
// merge into the most seed-similar surviving cluster when that similarity
// clears theta, otherwise drop to background. Ids contiguous from 1.
std::vector<uint16_t> cluster_instances(const float* emb, int64_t dim, int64_t hw,
                                        const std::vector<bool>& thing_mask,
                                        const ClusterConfig& cfg);

// Majority semantic class per cluster (ties toward the lower class); clusters
// whose majority class is stuff dissolve back to the semantic map.
PanopticMap panoptic_fuse(const std::vector<uint16_t>& semantic,
                          const std::vector<uint16_t>& instance, int64_t h, int64_t w,
                          const std::vector<bool>& is_thing);

// Builds a PanopticMap from already-consistent label maps (e.g. ground
// truth): instance ids renumbered contiguously, classes taken per segment.
PanopticMap panoptic_from_labels(const std::vector<uint16_t>& semantic,
                                 const std::vector<uint16_t>& instance, int64_t h, int64_t w);

// Mean semantic confidence per instance segment, ordered by ascending id.
std::vector<double> segment_scores(const std::vector<uint16_t>& instance,
                                   const std::vector<float>& confidence);

}  // namespace maskattn::infer
