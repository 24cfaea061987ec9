#pragma once

// Evaluation metrics: mIoU, instance AP at configurable IoU thresholds
// (101-point interpolation), and Panoptic Quality with SQ/RQ decomposition.

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "maskattn/panoptic.hpp"

namespace maskattn::metrics {

inline constexpr uint16_t kIgnore = 65535;

struct MiouResult {
  double miou = 0;
  std::vector<double> per_class;  // NaN for classes with zero union
};

// IoU per class over non-ignored pixels, averaged over classes with nonzero
// union. Throws if no class has nonzero union.
MiouResult miou(const std::vector<uint16_t>& pred, const std::vector<uint16_t>& gt, int64_t classes);

// Segments of an instance map: id > 0, sorted ascending by id.
struct InstanceSegment {
  uint16_t id = 0;
  std::vector<int64_t> pixels;
};
std::vector<InstanceSegment> extract_instances(const std::vector<uint16_t>& map);

// IoU over pixel masks for every (pred segment, gt segment) pair.
std::vector<std::vector<double>> instance_iou_matrix(const std::vector<uint16_t>& pred,
                                                     const std::vector<uint16_t>& gt);

// One image's predictions for AP: the instance map plus a confidence score
// per segment (aligned with extract_instances order).
struct ScoredInstances {
  std::vector<uint16_t> map;
  std::vector<double> scores;
};

// COCO-style AP: score-sorted greedy matching at IoU >= t, 101-point
// interpolated precision-recall area. No ground-truth instances -> nullopt.
std::optional<double> average_precision(const std::vector<ScoredInstances>& pred,
                                        const std::vector<std::vector<uint16_t>>& gt,
                                        double iou_threshold);

struct PqResult {
  double pq = 0, sq = 0, rq = 0;
  struct PerClass {
    int64_t tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;
    double pq = 0, sq = 0, rq = 0;
  };
  std::map<uint16_t, PerClass> per_class;
};

// Segments match iff same class and IoU > 0.5 (at most one match can exist,
// asserted). Averaged over classes present in either map; nullopt when both
// maps contain no segments.
std::optional<PqResult> panoptic_quality(const PanopticMap& pred, const PanopticMap& gt,
                                         const std::vector<bool>& is_thing);

}  // namespace maskattn::metrics
