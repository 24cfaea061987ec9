#pragma once

// Mask attention module: multi-head masked scaled-dot-product attention with
// a key-wise gate, merged heads + output projection, residual, then a
// two-layer GELU FFN with its own residual.

#include <functional>
#include <string>

#include "maskattn/ops.hpp"
#include "maskattn/rng.hpp"

namespace maskattn::attn {

enum class MaskMode { dynamic_key_gate, none, hard_topk };

struct AttnConfig {
  int64_t channels = 0;
  int64_t heads = 4;
  MaskMode mask_mode = MaskMode::dynamic_key_gate;
  double epsilon_mask = 1e-6;
  int64_t max_attention_tokens = 4096;
  double topk_fraction = 0.5;  // hard_topk: fraction of keys kept

  int64_t d_k() const { return channels / heads; }
  void validate() const {
    if (channels <= 0 || heads <= 0 || channels % heads != 0)
      throw DimensionError("AttnConfig: channels must be divisible by heads");
    if (d_k() < 1) throw DimensionError("AttnConfig: d_k < 1");
  }
};

template <class T>
struct MaskAttnWeights {
  Tensor<T> wq, wk, wv, wo;  // [C, C]
  Tensor<T> wg, bg;          // [C, heads], [heads]
  Tensor<T> w1, b1, w2, b2;  // [C, 4C], [4C], [4C, C], [C]

  template <class Fn>
  void for_each(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".wq", wq);
    fn(prefix + ".wk", wk);
    fn(prefix + ".wv", wv);
    fn(prefix + ".wo", wo);
    fn(prefix + ".wg", wg);
    fn(prefix + ".bg", bg);
    fn(prefix + ".ffn.w1", w1);
    fn(prefix + ".ffn.b1", b1);
    fn(prefix + ".ffn.w2", w2);
    fn(prefix + ".ffn.b2", b2);
  }
};

template <class T>
Tensor<T> uniform_init(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
  for (int64_t i = 0; i < t.size(); ++i)
    t.mutable_data()[i] = T(rng.uniform(-bound, bound));
  return t;
}

// Uniform +-sqrt(6/(fan_in+fan_out)) projections, zero biases, gate bias +2
// so gates start nearly open.
template <class T>
MaskAttnWeights<T> init_mask_attn(const AttnConfig& cfg, Rng& rng) {
  cfg.validate();
  const int64_t c = cfg.channels, hidden = 4 * c;
  MaskAttnWeights<T> w;
  w.wq = uniform_init<T>({c, c}, c, c, rng);
  w.wk = uniform_init<T>({c, c}, c, c, rng);
  w.wv = uniform_init<T>({c, c}, c, c, rng);
  w.wo = uniform_init<T>({c, c}, c, c, rng);
  w.wg = uniform_init<T>({c, cfg.heads}, c, cfg.heads, rng);
  w.bg = Tensor<T>::full({cfg.heads}, T(2));
  w.w1 = uniform_init<T>({c, hidden}, c, hidden, rng);
  w.b1 = Tensor<T>(Shape{hidden});
  w.w2 = uniform_init<T>({hidden, c}, hidden, c, rng);
  w.b2 = Tensor<T>(Shape{c});
  return w;
}

// Straight-through: forward takes the hard values, gradient flows to `soft`.
template <class T>
Tensor<T> ste_replace(const Tensor<T>& soft, Tensor<T> hard) {
  if (soft.shape() != hard.shape()) throw DimensionError("ste_replace: shape mismatch");
  Tape<T>* tape = result_tape<T>({&soft});
  if (!tape) return hard;
  const int sn = soft.node();
  const int64_t n = soft.size();
  return tape->attach(std::move(hard), [sn, n](Tape<T>& tp, const std::vector<T>& g) {
    if (sn >= 0) ops::detail::vaxpy(T(1), g.data(), tp.grad_buf(sn).data(), n);
  });
}

// Key-wise mask logits in broadcast form [B, heads, 1, T]; values in
// (log eps, log(1+eps)], differentiable everywhere.
template <class T>
Tensor<T> compute_mask_logits(const Tensor<T>& x_tokens, const MaskAttnWeights<T>& w,
                              const AttnConfig& cfg) {
  const int64_t B = x_tokens.dim(0), tokens = x_tokens.dim(1);
  Tensor<T> g = ops::linear(x_tokens, w.wg, w.bg);        // [B, T, heads]
  Tensor<T> soft = ops::log_sigmoid_eps(g, T(cfg.epsilon_mask));
  soft = ops::transpose_last2(soft);                      // [B, heads, T]
  soft = soft.reshape({B, cfg.heads, 1, tokens});
  if (cfg.mask_mode != MaskMode::hard_topk) return soft;

  // hard-topk: keep the top-k gated keys per (batch, head), straight-through
  const int64_t keep = std::max<int64_t>(1, int64_t(std::ceil(cfg.topk_fraction * double(tokens))));
  Tensor<T> hard(soft.shape());
  const T low = T(std::log(cfg.epsilon_mask));
  std::vector<int64_t> order(static_cast<size_t>(tokens));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < cfg.heads; ++h) {
      const T* row = soft.data() + (b * cfg.heads + h) * tokens;
      for (int64_t i = 0; i < tokens; ++i) order[size_t(i)] = i;
      std::stable_sort(order.begin(), order.end(),
                       [&](int64_t i, int64_t j) { return row[i] > row[j]; });
      T* out = hard.mutable_data() + (b * cfg.heads + h) * tokens;
      for (int64_t i = 0; i < tokens; ++i) out[i] = low;
      for (int64_t i = 0; i < keep; ++i) out[order[size_t(i)]] = T(0);
    }
  return ste_replace(soft, std::move(hard));
}

// Eq-style FFN with residual: GELU(A*W1 + b1)*W2 + b2 + A
template <class T>
Tensor<T> ffn_residual(const Tensor<T>& a, const MaskAttnWeights<T>& w) {
  Tensor<T> h = ops::gelu(ops::linear(a, w.w1, w.b1));
  Tensor<T> out = ops::linear(h, w.w2, w.b2);
  return ops::add(out, a);
}

// Core on token layout [B, T, C].
template <class T>
Tensor<T> mask_attention_tokens(const Tensor<T>& x_tokens, const MaskAttnWeights<T>& w,
                                const AttnConfig& cfg) {
  cfg.validate();
  const int64_t B = x_tokens.dim(0), tokens = x_tokens.dim(1), c = x_tokens.dim(2);
  if (c != cfg.channels) throw DimensionError("mask_attention: channel mismatch");
  if (tokens > cfg.max_attention_tokens)
    throw std::runtime_error("mask_attention: token count " + std::to_string(tokens) +
                             " exceeds max_attention_tokens");
  const int64_t dk = cfg.d_k();

  auto heads_of = [&](const Tensor<T>& t) {
    return ops::transpose_12(t.reshape({B, tokens, cfg.heads, dk}));  // [B,h,T,dk]
  };
  Tensor<T> q = heads_of(ops::linear(x_tokens, w.wq, Tensor<T>{}));
  Tensor<T> k = heads_of(ops::linear(x_tokens, w.wk, Tensor<T>{}));
  Tensor<T> v = heads_of(ops::linear(x_tokens, w.wv, Tensor<T>{}));

  Tensor<T> scores = ops::matmul(q, ops::transpose_last2(k));  // [B,h,T,T]
  Tensor<T> m = cfg.mask_mode != MaskMode::none ? compute_mask_logits(x_tokens, w, cfg)
                                                : Tensor<T>{};
  Tensor<T> weights = ops::masked_softmax_lastdim(scores, m, T(1.0 / std::sqrt(double(dk))));
  Tensor<T> ctx = ops::matmul(weights, v);                      // [B,h,T,dk]
  Tensor<T> merged = ops::transpose_12(ctx).reshape({B, tokens, c});
  Tensor<T> a = ops::add(ops::linear(merged, w.wo, Tensor<T>{}), x_tokens);
  return ffn_residual(a, w);
}

// Spatial wrapper: [B,C,H,W] -> tokens -> attention -> [B,C,H,W].
template <class T>
Tensor<T> mask_attention(const Tensor<T>& x, const MaskAttnWeights<T>& w,
                         const AttnConfig& cfg) {
  if (x.rank() != 4) throw DimensionError("mask_attention: rank must be 4");
  const int64_t B = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  Tensor<T> tokens = ops::transpose_last2(x.reshape({B, c, h * wd}));  // [B,T,C]
  Tensor<T> out = mask_attention_tokens(tokens, w, cfg);
  return ops::transpose_last2(out).reshape({B, c, h, wd});
}

}  // namespace maskattn::attn
