#include "maskattn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace maskattn::metrics {

MiouResult miou(const std::vector<uint16_t>& pred, const std::vector<uint16_t>& gt,
                int64_t classes) {
  if (pred.size() != gt.size()) throw std::runtime_error("miou: map sizes disagree");
  std::vector<int64_t> inter(size_t(classes), 0), uni(size_t(classes), 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    const uint16_t p = pred[i], g = gt[i];
    if (g == kIgnore || p == kIgnore) continue;
    if (p >= classes || g >= classes) throw std::runtime_error("miou: label out of range");
    if (p == g) {
      inter[p] += 1;
      uni[p] += 1;
    } else {
      uni[p] += 1;
      uni[g] += 1;
    }
  }
  MiouResult r;
  r.per_class.assign(size_t(classes), std::nan(""));
  double sum = 0;
  int64_t counted = 0;
  for (int64_t c = 0; c < classes; ++c)
    if (uni[size_t(c)] > 0) {
      r.per_class[size_t(c)] = double(inter[size_t(c)]) / double(uni[size_t(c)]);
      sum += r.per_class[size_t(c)];
      ++counted;
    }
  if (counted == 0) throw std::runtime_error("miou: no class has nonzero union");
  r.miou = sum / double(counted);
  return r;
}

std::vector<InstanceSegment> extract_instances(const std::vector<uint16_t>& map) {
  std::map<uint16_t, std::vector<int64_t>> by_id;
  for (size_t i = 0; i < map.size(); ++i)
    if (map[i] != 0) by_id[map[i]].push_back(int64_t(i));
  std::vector<InstanceSegment> out;
  for (auto& [id, px] : by_id) out.push_back({id, std::move(px)});
  return out;
}

namespace {

double mask_iou(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
  // both pixel lists are sorted ascending
  size_t i = 0, j = 0;
  int64_t inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) { ++inter; ++i; ++j; }
    else if (a[i] < b[j]) ++i;
    else ++j;
  }
  const int64_t uni = int64_t(a.size() + b.size()) - inter;
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

}  // namespace

std::vector<std::vector<double>> instance_iou_matrix(const std::vector<uint16_t>& pred,
                                                     const std::vector<uint16_t>& gt) {
  if (pred.size() != gt.size()) throw std::runtime_error("instance_iou_matrix: sizes disagree");
  auto ps = extract_instances(pred), gs = extract_instances(gt);
  std::vector<std::vector<double>> m(ps.size(), std::vector<double>(gs.size(), 0.0));
  for (size_t i = 0; i < ps.size(); ++i)
    for (size_t j = 0; j < gs.size(); ++j) m[i][j] = mask_iou(ps[i].pixels, gs[j].pixels);
  return m;
}

std::optional<double> average_precision(const std::vector<ScoredInstances>& pred,
                                        const std::vector<std::vector<uint16_t>>& gt,
                                        double iou_threshold) {
  if (iou_threshold <= 0 || iou_threshold > 1)
    throw std::runtime_error("average_precision: threshold must be in (0, 1]");
  if (pred.size() != gt.size()) throw std::runtime_error("average_precision: image counts disagree");

  struct Det {
    double score;
    size_t image;
    size_t seg;  // index into per-image segments
  };
  std::vector<Det> dets;
  std::vector<std::vector<InstanceSegment>> psegs(pred.size()), gsegs(gt.size());
  int64_t total_gt = 0;
  for (size_t im = 0; im < pred.size(); ++im) {
    psegs[im] = extract_instances(pred[im].map);
    gsegs[im] = extract_instances(gt[im]);
    total_gt += int64_t(gsegs[im].size());
    if (pred[im].scores.size() != psegs[im].size())
      throw std::runtime_error("average_precision: score count does not match segments");
    for (size_t s = 0; s < psegs[im].size(); ++s) dets.push_back({pred[im].scores[s], im, s});
  }
  if (total_gt == 0) return std::nullopt;

  std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
    return a.score > b.score;
  });

  std::vector<std::set<size_t>> used(gt.size());
  std::vector<int> is_tp;
  for (const Det& d : dets) {
    const auto& pm = psegs[d.image][d.seg].pixels;
    double best = -1;
    size_t best_j = 0;
    for (size_t j = 0; j < gsegs[d.image].size(); ++j) {
      if (used[d.image].count(j)) continue;
      double iou;
      if (iou_threshold >= 1.0) {
        // exact-match fast path
        iou = pm == gsegs[d.image][j].pixels ? 1.0 : 0.0;
      } else {
        iou = mask_iou(pm, gsegs[d.image][j].pixels);
      }
      if (iou >= iou_threshold && iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best >= 0) {
      used[d.image].insert(best_j);
      is_tp.push_back(1);
    } else {
      is_tp.push_back(0);
    }
  }

  // 101-point interpolated area under the precision-recall curve
  std::vector<double> prec, rec;
  int64_t tp = 0, fp = 0;
  for (int v : is_tp) {
    (v ? tp : fp) += 1;
    prec.push_back(double(tp) / double(tp + fp));
    rec.push_back(double(tp) / double(total_gt));
  }
  // suffix max of precision: interpolated precision at each detection point
  std::vector<double> interp(prec.size());
  double running = 0;
  for (size_t i = prec.size(); i-- > 0;) interp[i] = running = std::max(running, prec[i]);
  double ap = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = double(k) / 100.0;
    const auto it = std::lower_bound(rec.begin(), rec.end(), r);
    if (it != rec.end()) ap += interp[size_t(it - rec.begin())];
  }
  return ap / 101.0;
}

namespace {

struct PanSegment {
  uint16_t cls;
  std::vector<int64_t> pixels;
};

std::vector<PanSegment> pan_segments(const PanopticMap& m, const std::vector<bool>& is_thing) {
  std::vector<PanSegment> out;
  std::map<uint16_t, std::vector<int64_t>> things, stuff;
  const int64_t n = m.h * m.w;
  for (int64_t i = 0; i < n; ++i) {
    if (m.instance[size_t(i)] != 0)
      things[m.instance[size_t(i)]].push_back(i);
    else if (m.semantic[size_t(i)] < is_thing.size() && !is_thing[m.semantic[size_t(i)]])
      stuff[m.semantic[size_t(i)]].push_back(i);
  }
  for (auto& [id, px] : things) {
    uint16_t cls = 0;
    if (id <= m.segments.size() && m.segments[size_t(id - 1)].id == id)
      cls = m.segments[size_t(id - 1)].cls;
    else
      cls = m.semantic[size_t(px[0])];
    out.push_back({cls, std::move(px)});
  }
  for (auto& [cls, px] : stuff) out.push_back({cls, std::move(px)});
  return out;
}

}  // namespace

std::optional<PqResult> panoptic_quality(const PanopticMap& pred, const PanopticMap& gt,
                                         const std::vector<bool>& is_thing) {
  if (pred.h != gt.h || pred.w != gt.w) throw std::runtime_error("panoptic_quality: shapes disagree");
  auto ps = pan_segments(pred, is_thing), gs = pan_segments(gt, is_thing);
  if (ps.empty() && gs.empty()) return std::nullopt;

  PqResult r;
  std::set<uint16_t> classes;
  for (const auto& s : ps) classes.insert(s.cls);
  for (const auto& s : gs) classes.insert(s.cls);

  std::vector<bool> pmatched(ps.size(), false), gmatched(gs.size(), false);
  for (size_t i = 0; i < ps.size(); ++i) {
    int matches = 0;
    for (size_t j = 0; j < gs.size(); ++j) {
      if (ps[i].cls != gs[j].cls) continue;
      const double iou = mask_iou(ps[i].pixels, gs[j].pixels);
      if (iou > 0.5) {
        ++matches;
        if (gmatched[j]) throw std::runtime_error("panoptic_quality: duplicate match at IoU > 0.5");
        pmatched[i] = gmatched[j] = true;
        auto& pc = r.per_class[ps[i].cls];
        pc.tp += 1;
        pc.iou_sum += iou;
      }
    }
    if (matches > 1) throw std::runtime_error("panoptic_quality: duplicate match at IoU > 0.5");
  }
  for (size_t i = 0; i < ps.size(); ++i)
    if (!pmatched[i]) r.per_class[ps[i].cls].fp += 1;
  for (size_t j = 0; j < gs.size(); ++j)
    if (!gmatched[j]) r.per_class[gs[j].cls].fn += 1;

  double pq_sum = 0, sq_sum = 0, rq_sum = 0;
  for (uint16_t c : classes) {
    auto& pc = r.per_class[c];
    const double denom = double(pc.tp) + 0.5 * double(pc.fp) + 0.5 * double(pc.fn);
    pc.pq = denom > 0 ? pc.iou_sum / denom : 0.0;
    pc.sq = pc.tp > 0 ? pc.iou_sum / double(pc.tp) : 0.0;
    pc.rq = denom > 0 ? double(pc.tp) / denom : 0.0;
    pq_sum += pc.pq;
    sq_sum += pc.sq;
    rq_sum += pc.rq;
  }
  r.pq = pq_sum / double(classes.size());
  r.sq = sq_sum / double(classes.size());
  r.rq = rq_sum / double(classes.size());
  return r;
}

}  // namespace maskattn::metrics
