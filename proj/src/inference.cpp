#include "maskattn/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "maskattn/kernels.hpp"

namespace maskattn::infer {

std::vector<uint16_t> semantic_predict(const float* logits, int64_t classes, int64_t hw) {
  std::vector<uint16_t> out(size_t(hw), 0);
  for (int64_t p = 0; p < hw; ++p) {
    int64_t best = 0;
    for (int64_t c = 1; c < classes; ++c)
      if (logits[c * hw + p] > logits[best * hw + p]) best = c;
    out[size_t(p)] = uint16_t(best);
  }
  return out;
}

std::vector<float> semantic_confidence(const float* logits, int64_t classes, int64_t hw,
                                       const std::vector<uint16_t>& pred) {
  std::vector<float> out(size_t(hw), 0.f);
  for (int64_t p = 0; p < hw; ++p) {
    double mx = logits[p];
    for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, double(logits[c * hw + p]));
    double denom = 0;
    for (int64_t c = 0; c < classes; ++c) denom += std::exp(double(logits[c * hw + p]) - mx);
    out[size_t(p)] = float(std::exp(double(logits[pred[size_t(p)] * hw + p]) - mx) / denom);
  }
  return out;
}

std::vector<uint16_t> cluster_instances(const float* emb, int64_t dim, int64_t hw,
                                        const std::vector<bool>& thing_mask,
                                        const ClusterConfig& cfg) {
  if (cfg.theta <= 0 || cfg.theta >= 1)
    throw std::runtime_error("cluster_instances: theta must be in (0,1)");
  std::vector<int64_t> thing;
  for (int64_t p = 0; p < hw; ++p)
    if (thing_mask[size_t(p)]) thing.push_back(p);
  std::vector<uint16_t> out(size_t(hw), 0);
  const int64_t T = int64_t(thing.size());
  if (T == 0) return out;

  // similarity matrix over thing pixels (embeddings are unit-norm)
  std::vector<float> gathered(size_t(T) * size_t(dim));
  for (int64_t i = 0; i < T; ++i)
    for (int64_t c = 0; c < dim; ++c)
      gathered[size_t(i * dim + c)] = emb[c * hw + thing[size_t(i)]];
  std::vector<float> sim(size_t(T) * size_t(T));
  kernels::f32().gemm(gathered.data(), gathered.data(), sim.data(), T, T, dim, false, true, 0.f);

  std::vector<int32_t> assign(size_t(T), -1);
  std::vector<int64_t> seeds;
  int32_t next = 0;
  int64_t unassigned = T;
  while (unassigned > 0) {
    // seed = unassigned pixel with the most unassigned neighbors at sim>=theta
    int64_t best = -1, best_count = -1;
    for (int64_t i = 0; i < T; ++i) {
      if (assign[size_t(i)] >= 0) continue;
      int64_t count = 0;
      for (int64_t j = 0; j < T; ++j)
        if (assign[size_t(j)] < 0 && sim[size_t(i * T + j)] >= float(cfg.theta)) ++count;
      if (count > best_count) {
        best_count = count;
        best = i;
      }
    }
    seeds.push_back(best);
    for (int64_t j = 0; j < T; ++j)
      if (assign[size_t(j)] < 0 && sim[size_t(best * T + j)] >= float(cfg.theta)) {
        assign[size_t(j)] = next;
        --unassigned;
      }
    ++next;
  }

  // merge or drop clusters below min_size
  std::vector<int64_t> csize(size_t(next), 0);
  for (int32_t a : assign) csize[size_t(a)] += 1;
  std::vector<int32_t> target(static_cast<size_t>(next));
  for (int32_t c = 0; c < next; ++c) target[size_t(c)] = c;
  for (int32_t c = 0; c < next; ++c) {
    if (csize[size_t(c)] >= cfg.min_size) continue;
    int32_t best = -1;
    double best_sim = -2;
    for (int32_t d = 0; d < next; ++d) {
      if (d == c || csize[size_t(d)] < cfg.min_size) continue;
      const double s = double(sim[size_t(seeds[size_t(c)] * T + seeds[size_t(d)])]);
      if (s > best_sim) {
        best_sim = s;
        best = d;
      }
    }
    target[size_t(c)] = (best >= 0 && best_sim >= cfg.theta) ? best : -1;
  }

  // contiguous ids for surviving clusters, in first-seeded order
  std::vector<uint16_t> id_of(size_t(next), 0);
  uint16_t next_id = 1;
  for (int32_t c = 0; c < next; ++c)
    if (target[size_t(c)] == c) id_of[size_t(c)] = next_id++;
  for (int64_t i = 0; i < T; ++i) {
    const int32_t t = target[size_t(assign[size_t(i)])];
    out[size_t(thing[size_t(i)])] = t < 0 ? 0 : id_of[size_t(t)];
  }
  return out;
}

PanopticMap panoptic_fuse(const std::vector<uint16_t>& semantic,
                          const std::vector<uint16_t>& instance, int64_t h, int64_t w,
                          const std::vector<bool>& is_thing) {
  const int64_t n = h * w;
  if (int64_t(semantic.size()) != n || int64_t(instance.size()) != n)
    throw std::runtime_error("panoptic_fuse: map sizes disagree");
  PanopticMap out;
  out.h = h;
  out.w = w;
  out.semantic = semantic;
  out.instance.assign(size_t(n), 0);

  std::map<uint16_t, std::map<uint16_t, int64_t>> votes;  // id -> class -> count
  for (int64_t i = 0; i < n; ++i)
    if (instance[size_t(i)] != 0) votes[instance[size_t(i)]][semantic[size_t(i)]] += 1;

  std::map<uint16_t, std::pair<uint16_t, uint16_t>> decided;  // old id -> (new id, class)
  uint16_t next_id = 1;
  for (const auto& [id, counts] : votes) {
    uint16_t best_cls = 0;
    int64_t best_count = -1;
    for (const auto& [cls, cnt] : counts)
      if (cnt > best_count) {  // map iteration is ascending: ties keep lower class
        best_count = cnt;
        best_cls = cls;
      }
    if (best_cls < is_thing.size() && is_thing[best_cls]) {
      decided[id] = {next_id, best_cls};
      out.segments.push_back({next_id, best_cls, 0});
      ++next_id;
    }
    // stuff-majority clusters dissolve: pixels keep semantic labels
  }

  for (int64_t i = 0; i < n; ++i) {
    const uint16_t id = instance[size_t(i)];
    if (id == 0) continue;
    auto it = decided.find(id);
    if (it == decided.end()) continue;
    out.instance[size_t(i)] = it->second.first;
    out.semantic[size_t(i)] = it->second.second;
    out.segments[size_t(it->second.first - 1)].pixels += 1;
  }
  out.validate(is_thing);
  return out;
}

PanopticMap panoptic_from_labels(const std::vector<uint16_t>& semantic,
                                 const std::vector<uint16_t>& instance, int64_t h, int64_t w) {
  PanopticMap out;
  out.h = h;
  out.w = w;
  out.semantic = semantic;
  out.instance.assign(size_t(h * w), 0);
  std::map<uint16_t, uint16_t> renumber;
  for (int64_t i = 0; i < h * w; ++i) {
    const uint16_t id = instance[size_t(i)];
    if (id == 0) continue;
    auto [it, fresh] = renumber.emplace(id, uint16_t(renumber.size() + 1));
    if (fresh) out.segments.push_back({it->second, semantic[size_t(i)], 0});
    out.instance[size_t(i)] = it->second;
    out.segments[size_t(it->second - 1)].pixels += 1;
  }
  return out;
}

std::vector<double> segment_scores(const std::vector<uint16_t>& instance,
                                   const std::vector<float>& confidence) {
  std::map<uint16_t, std::pair<double, int64_t>> acc;
  for (size_t i = 0; i < instance.size(); ++i)
    if (instance[i] != 0) {
      auto& [sum, cnt] = acc[instance[i]];
      sum += confidence[i];
      cnt += 1;
    }
  std::vector<double> out;
  for (const auto& [id, sc] : acc) out.push_back(sc.first / double(sc.second));
  return out;
}

}  // namespace maskattn::infer
