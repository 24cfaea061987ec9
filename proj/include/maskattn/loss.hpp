#pragma once

// Training objective: per-pixel cross-entropy over semantic logits, an
// instance contrastive loss over sampled pixel pairs, and their weighted sum
// L_seg = L_CE + lambda * L_IC.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <vector>

#include "maskattn/ops.hpp"
#include "maskattn/rng.hpp"

namespace maskattn::loss {

inline constexpr uint16_t kIgnore = 65535;

struct LossConfig {
  double lambda = 0.5;
  double tau = 0.1;
  int64_t anchors_per_image = 256;
  int64_t positives_per_anchor = 8;
  int64_t negatives_per_anchor = 32;

  void validate() const {
    if (lambda < 0) throw std::runtime_error("LossConfig: lambda must be >= 0");
    if (tau <= 0) throw std::runtime_error("LossConfig: tau must be > 0");
  }
};

// Mean over non-ignored pixels of -log softmax(logits)[label], fused
// log-sum-exp forward and (softmax - onehot)/count backward.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<uint16_t>& labels) {
  if (logits.rank() != 4) throw DimensionError("cross_entropy: logits must be [B,C,H,W]");
  const int64_t B = logits.dim(0), C = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (int64_t(labels.size()) != B * hw)
    throw DimensionError("cross_entropy: label count does not match logits");

  auto soft = std::make_shared<std::vector<T>>(size_t(logits.size()));
  double total = 0;
  int64_t count = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < hw; ++p) {
      const uint16_t y = labels[size_t(b * hw + p)];
      if (y == kIgnore) continue;
      if (y >= C)
        throw std::runtime_error("cross_entropy: label " + std::to_string(y) +
                                 " >= num_classes " + std::to_string(C));
      const T* v = logits.data() + b * C * hw + p;
      double mx = double(v[0]);
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, double(v[c * hw]));
      double denom = 0;
      for (int64_t c = 0; c < C; ++c) denom += std::exp(double(v[c * hw]) - mx);
      const double lse = mx + std::log(denom);
      for (int64_t c = 0; c < C; ++c)
        (*soft)[size_t(b * C * hw + c * hw + p)] = T(std::exp(double(v[c * hw]) - lse));
      total += lse - double(v[y * hw]);
      ++count;
    }
  if (count == 0) throw std::runtime_error("cross_entropy: all pixels ignored");

  Tensor<T> out(Shape{1});
  out.mutable_data()[0] = T(total / double(count));
  Tape<T>* tape = result_tape<T>({&logits});
  if (!tape) return out;
  const int ln = logits.node();
  auto lab = std::make_shared<std::vector<uint16_t>>(labels);
  return tape->attach(std::move(out), [=](Tape<T>& tp, const std::vector<T>& g) {
    if (ln < 0) return;
    auto& gl = tp.grad_buf(ln);
    const T w = g[0] / T(count);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t p = 0; p < hw; ++p) {
        const uint16_t y = (*lab)[size_t(b * hw + p)];
        if (y == kIgnore) continue;
        for (int64_t c = 0; c < C; ++c) {
          const int64_t i = b * C * hw + c * hw + p;
          gl[size_t(i)] += w * ((*soft)[size_t(i)] - T(c == y ? 1 : 0));
        }
      }
  });
}

struct Anchor {
  int64_t batch = 0;
  int64_t pixel = 0;                 // flattened h*W + w
  std::vector<int64_t> positives;    // same layout, same batch item
  std::vector<int64_t> negatives;
};

struct PairSets {
  std::vector<Anchor> anchors;
  int64_t count() const { return int64_t(anchors.size()); }
  bool empty() const { return anchors.empty(); }
};

namespace detail {

// Draws k distinct entries from pool via a partial Fisher-Yates shuffle.
inline std::vector<int64_t> draw(std::vector<int64_t>& pool, int64_t k, Rng& rng) {
  k = std::min<int64_t>(k, int64_t(pool.size()));
  for (int64_t i = 0; i < k; ++i)
    std::swap(pool[size_t(i)], pool[size_t(i + int64_t(rng.uniform_index(uint64_t(pool.size() - i))))]);
  return std::vector<int64_t>(pool.begin(), pool.begin() + k);
}

}  // namespace detail

// Samples anchors among instance (id > 0) pixels of one image; positives from
// the anchor's instance (anchor excluded), negatives from everything else.
// Size-1 instances yield no usable anchor and are skipped.
inline PairSets sample_pairs(const std::vector<uint16_t>& instance_map, int64_t batch_index,
                             const LossConfig& cfg, Rng& rng) {
  cfg.validate();
  const int64_t n = int64_t(instance_map.size());
  std::vector<int64_t> thing;
  for (int64_t i = 0; i < n; ++i)
    if (instance_map[size_t(i)] != 0) thing.push_back(i);
  PairSets out;
  if (thing.empty()) return out;

  std::vector<int64_t> pool = thing;
  std::vector<int64_t> chosen = detail::draw(pool, cfg.anchors_per_image, rng);
  std::vector<int64_t> same, diff;
  for (int64_t a : chosen) {
    const uint16_t id = instance_map[size_t(a)];
    same.clear();
    diff.clear();
    for (int64_t i = 0; i < n; ++i) {
      if (i == a) continue;
      (instance_map[size_t(i)] == id ? same : diff).push_back(i);
    }
    if (same.empty()) continue;  // size-1 instance: no positives available
    Anchor anc;
    anc.batch = batch_index;
    anc.pixel = a;
    anc.positives = detail::draw(same, cfg.positives_per_anchor, rng);
    anc.negatives = detail::draw(diff, cfg.negatives_per_anchor, rng);
    out.anchors.push_back(std::move(anc));
  }
  return out;
}

// Eqs. over the sampled sets: per anchor a, D_a = sum over P u N of
// exp(e_a.e_x / tau); l_p = -log(exp(e_a.e_p/tau) / D_a); mean over positives,
// then over anchors. Log-sum-exp stabilized; analytic gradient.
template <class T>
Tensor<T> instance_contrastive(const Tensor<T>& emb, const PairSets& pairs, double tau) {
  if (tau <= 0) throw std::runtime_error("instance_contrastive: tau must be > 0");
  if (emb.rank() != 4) throw DimensionError("instance_contrastive: embeddings must be [B,d,H,W]");
  const int64_t de = emb.dim(1), hw = emb.dim(2) * emb.dim(3);
  Tensor<T> out(Shape{1});
  if (pairs.empty()) return out;

  auto dot = [&](int64_t b, int64_t p, int64_t q) {
    const T* u = emb.data() + b * de * hw + p;
    const T* v = emb.data() + b * de * hw + q;
    double s = 0;
    for (int64_t c = 0; c < de; ++c) s += double(u[c * hw]) * double(v[c * hw]);
    return s;
  };

  const int64_t na = pairs.count();
  double total = 0;
  std::vector<double> sims;
  for (const Anchor& a : pairs.anchors) {
    sims.clear();
    for (int64_t p : a.positives) sims.push_back(dot(a.batch, a.pixel, p) / tau);
    for (int64_t q : a.negatives) sims.push_back(dot(a.batch, a.pixel, q) / tau);
    const double mx = *std::max_element(sims.begin(), sims.end());
    double denom = 0;
    for (double s : sims) denom += std::exp(s - mx);
    const double lse = mx + std::log(denom);
    double pos_mean = 0;
    for (size_t i = 0; i < a.positives.size(); ++i) pos_mean += sims[i];
    pos_mean /= double(a.positives.size());
    total += lse - pos_mean;
  }
  out.mutable_data()[0] = T(total / double(na));

  Tape<T>* tape = result_tape<T>({&emb});
  if (!tape) return out;
  const int en = emb.node();
  auto ed = emb.storage();
  auto pr = std::make_shared<PairSets>(pairs);
  return tape->attach(std::move(out), [en, ed, pr, tau, de, hw, na](Tape<T>& tp,
                                                                    const std::vector<T>& g) {
    if (en < 0) return;
    auto& ge = tp.grad_buf(en);
    const double base = double(g[0]) / (double(na) * tau);
    std::vector<double> sims, w;
    std::vector<int64_t> others;
    for (const Anchor& a : pr->anchors) {
      others.clear();
      others.insert(others.end(), a.positives.begin(), a.positives.end());
      others.insert(others.end(), a.negatives.begin(), a.negatives.end());
      sims.clear();
      const T* eb = ed->data() + a.batch * de * hw;
      auto dotp = [&](int64_t p, int64_t q) {
        double s = 0;
        for (int64_t c = 0; c < de; ++c) s += double(eb[c * hw + p]) * double(eb[c * hw + q]);
        return s;
      };
      for (int64_t x : others) sims.push_back(dotp(a.pixel, x) / tau);
      const double mx = *std::max_element(sims.begin(), sims.end());
      double denom = 0;
      w.assign(sims.size(), 0);
      for (size_t i = 0; i < sims.size(); ++i) denom += w[i] = std::exp(sims[i] - mx);
      for (double& wi : w) wi /= denom;
      const double inv_pos = 1.0 / double(a.positives.size());
      T* gb = ge.data() + a.batch * de * hw;
      for (size_t i = 0; i < others.size(); ++i) {
        // d(anchor loss)/d s_x = softmax weight minus 1/|P| for positives
        const double coef = base * (w[i] - (i < a.positives.size() ? inv_pos : 0.0));
        const int64_t x = others[size_t(i)];
        for (int64_t c = 0; c < de; ++c) {
          gb[c * hw + a.pixel] += T(coef * double(eb[c * hw + x]));
          gb[c * hw + x] += T(coef * double(eb[c * hw + a.pixel]));
        }
      }
    }
  });
}

// L_seg = L_CE + lambda * L_IC
template <class T>
Tensor<T> combined_loss(const Tensor<T>& l_ce, const Tensor<T>& l_ic, double lambda) {
  if (l_ce.size() != 1 || l_ic.size() != 1)
    throw DimensionError("combined_loss: inputs must be scalar");
  return ops::add(l_ce, ops::scale(l_ic, T(lambda)));
}

}  // namespace maskattn::loss
