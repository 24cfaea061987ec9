#pragma once

// MaskAttn-UNet: four-stage encoder, attention after each of the first three
// pools (att1..att3), attended bottleneck (att7), four-stage decoder with
// skip concatenation and attention at H/8, H/4, H/2 (att4..att6), plus
// semantic-logit and L2-normalized embedding heads.

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maskattn/attention.hpp"
#include "maskattn/ops.hpp"
#include "maskattn/rng.hpp"

namespace maskattn::model {

enum class AttentionPlacement { all, encoder_only, decoder_only, none };

inline const char* placement_name(AttentionPlacement p) {
  switch (p) {
    case AttentionPlacement::all: return "all";
    case AttentionPlacement::encoder_only: return "encoder";
    case AttentionPlacement::decoder_only: return "decoder";
    case AttentionPlacement::none: return "none";
  }
  return "?";
}

inline AttentionPlacement placement_from_name(const std::string& s) {
  if (s == "all") return AttentionPlacement::all;
  if (s == "encoder") return AttentionPlacement::encoder_only;
  if (s == "decoder") return AttentionPlacement::decoder_only;
  if (s == "none") return AttentionPlacement::none;
  throw std::runtime_error("unknown attention placement: " + s);
}

struct ModelConfig {
  int64_t in_channels = 3;
  int64_t num_classes = 4;
  int64_t embed_dim = 32;
  std::array<int64_t, 4> stage_channels = {64, 128, 256, 256};
  int64_t heads = 4;
  int64_t input_size = 128;
  int64_t max_attention_tokens = 4096;
  AttentionPlacement placement = AttentionPlacement::all;
  attn::MaskMode mask_mode = attn::MaskMode::dynamic_key_gate;
  double epsilon_mask = 1e-6;

  void validate() const {
    if (input_size % 16 != 0) throw DimensionError("input_size must be divisible by 16");
    for (int64_t c : stage_channels)
      if (c <= 0 || c % heads != 0)
        throw DimensionError("stage channels must be positive and divisible by heads");
    if (num_classes < 2) throw DimensionError("num_classes must be >= 2");
  }

  // 128x128 full-size preset
  static ModelConfig full_preset(int64_t classes) {
    ModelConfig c;
    c.num_classes = classes;
    return c;
  }
  // small preset used for tests and the synthetic-shapes runs
  static ModelConfig desk_preset(int64_t classes) {
    ModelConfig c;
    c.num_classes = classes;
    c.stage_channels = {16, 32, 64, 64};
    c.input_size = 64;
    return c;
  }

  attn::AttnConfig attn_config(int64_t channels) const {
    attn::AttnConfig a;
    a.channels = channels;
    a.heads = heads;
    a.mask_mode = mask_mode;
    a.epsilon_mask = epsilon_mask;
    a.max_attention_tokens = max_attention_tokens;
    return a;
  }

  bool encoder_attention() const {
    return placement == AttentionPlacement::all || placement == AttentionPlacement::encoder_only;
  }
  bool decoder_attention() const {
    return placement == AttentionPlacement::all || placement == AttentionPlacement::decoder_only;
  }
  bool bottleneck_attention() const { return placement == AttentionPlacement::all; }
};

// two (3x3 conv -> group norm -> GELU) layers
template <class T>
struct ConvBlock {
  Tensor<T> w1, b1, g1, be1;
  Tensor<T> w2, b2, g2, be2;
  int64_t groups = 8;

  template <class Fn>
  void for_each(const std::string& p, Fn&& fn) {
    fn(p + ".conv1.w", w1);
    fn(p + ".conv1.b", b1);
    fn(p + ".gn1.gamma", g1);
    fn(p + ".gn1.beta", be1);
    fn(p + ".conv2.w", w2);
    fn(p + ".conv2.b", b2);
    fn(p + ".gn2.gamma", g2);
    fn(p + ".gn2.beta", be2);
  }
};

inline int64_t norm_groups(int64_t channels) {
  if (channels % 8 == 0) return 8;
  if (channels % 4 == 0) return 4;
  if (channels % 2 == 0) return 2;
  return 1;
}

template <class T>
ConvBlock<T> init_conv_block(int64_t cin, int64_t cout, Rng& rng) {
  ConvBlock<T> b;
  b.groups = norm_groups(cout);
  b.w1 = attn::uniform_init<T>({cout, cin, 3, 3}, cin * 9, cout * 9, rng);
  b.b1 = Tensor<T>(Shape{cout});
  b.g1 = Tensor<T>::full({cout}, T(1));
  b.be1 = Tensor<T>(Shape{cout});
  b.w2 = attn::uniform_init<T>({cout, cout, 3, 3}, cout * 9, cout * 9, rng);
  b.b2 = Tensor<T>(Shape{cout});
  b.g2 = Tensor<T>::full({cout}, T(1));
  b.be2 = Tensor<T>(Shape{cout});
  return b;
}

template <class T>
Tensor<T> conv_block_forward(const ConvBlock<T>& blk, const Tensor<T>& x) {
  Tensor<T> h = ops::conv2d(x, blk.w1, blk.b1, 1, 1);
  h = ops::gelu(ops::group_norm(h, blk.g1, blk.be1, blk.groups));
  h = ops::conv2d(h, blk.w2, blk.b2, 1, 1);
  return ops::gelu(ops::group_norm(h, blk.g2, blk.be2, blk.groups));
}

template <class T>
struct ModelWeights {
  ModelConfig cfg;
  std::array<ConvBlock<T>, 4> enc;
  ConvBlock<T> bottleneck;
  std::array<ConvBlock<T>, 4> dec;  // dec[0]=deepest (H/8) ... dec[3]=top (H)
  // att[0..2] encoder (H/2,H/4,H/8), att[3..5] decoder (H/8,H/4,H/2), att[6] bottleneck
  std::array<std::optional<attn::MaskAttnWeights<T>>, 7> att;

  template <class Fn>
  void for_each_param(Fn&& fn) {
    for (int i = 0; i < 4; ++i) enc[size_t(i)].for_each("enc" + std::to_string(i + 1), fn);
    bottleneck.for_each("bottleneck", fn);
    for (int i = 0; i < 4; ++i) dec[size_t(i)].for_each("dec" + std::to_string(i + 1), fn);
    for (int i = 0; i < 7; ++i)
      if (att[size_t(i)]) att[size_t(i)]->for_each("att" + std::to_string(i + 1), fn);
    fn(std::string("sem_head.w"), sem_w);
    fn(std::string("sem_head.b"), sem_b);
    fn(std::string("emb_head.w"), emb_w);
    fn(std::string("emb_head.b"), emb_b);
  }

  std::vector<std::pair<std::string, Shape>> manifest() {
    std::vector<std::pair<std::string, Shape>> m;
    for_each_param([&](const std::string& name, Tensor<T>& t) { m.emplace_back(name, t.shape()); });
    return m;
  }

  int64_t parameter_count() {
    int64_t n = 0;
    for_each_param([&](const std::string&, Tensor<T>& t) { n += t.size(); });
    return n;
  }

  Tensor<T> sem_w, sem_b;  // 1x1 conv -> num_classes
  Tensor<T> emb_w, emb_b;  // 1x1 conv -> embed_dim
};

// channel width feeding each attention slot (see layout comment above)
inline int64_t attention_channels(const ModelConfig& cfg, int slot) {
  const auto& sc = cfg.stage_channels;
  switch (slot) {
    case 0: return sc[0];  // att1, H/2
    case 1: return sc[1];  // att2, H/4
    case 2: return sc[2];  // att3, H/8
    case 3: return sc[2];  // att4, H/8 (deepest decoder)
    case 4: return sc[1];  // att5, H/4
    case 5: return sc[0];  // att6, H/2
    case 6: return sc[3];  // att7, bottleneck H/16
  }
  throw std::runtime_error("bad attention slot");
}

inline bool attention_present(const ModelConfig& cfg, int slot) {
  if (slot <= 2) return cfg.encoder_attention();
  if (slot <= 5) return cfg.decoder_attention();
  return cfg.bottleneck_attention();
}

template <class T>
ModelWeights<T> build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelWeights<T> m;
  m.cfg = cfg;
  const auto& sc = cfg.stage_channels;
  m.enc[0] = init_conv_block<T>(cfg.in_channels, sc[0], rng);
  m.enc[1] = init_conv_block<T>(sc[0], sc[1], rng);
  m.enc[2] = init_conv_block<T>(sc[1], sc[2], rng);
  m.enc[3] = init_conv_block<T>(sc[2], sc[3], rng);
  m.bottleneck = init_conv_block<T>(sc[3], sc[3], rng);
  m.dec[0] = init_conv_block<T>(2 * sc[3], sc[2], rng);
  m.dec[1] = init_conv_block<T>(2 * sc[2], sc[1], rng);
  m.dec[2] = init_conv_block<T>(2 * sc[1], sc[0], rng);
  m.dec[3] = init_conv_block<T>(2 * sc[0], sc[0], rng);
  for (int slot = 0; slot < 7; ++slot)
    if (attention_present(cfg, slot)) {
      auto acfg = cfg.attn_config(attention_channels(cfg, slot));
      m.att[size_t(slot)] = attn::init_mask_attn<T>(acfg, rng);
    }
  m.sem_w = attn::uniform_init<T>({cfg.num_classes, sc[0], 1, 1}, sc[0], cfg.num_classes, rng);
  m.sem_b = Tensor<T>(Shape{cfg.num_classes});
  m.emb_w = attn::uniform_init<T>({cfg.embed_dim, sc[0], 1, 1}, sc[0], cfg.embed_dim, rng);
  m.emb_b = Tensor<T>(Shape{cfg.embed_dim});
  return m;
}

template <class T>
struct ForwardOutput {
  Tensor<T> sem_logits;   // [B, num_classes, H, W]
  Tensor<T> embeddings;   // [B, embed_dim, H, W], unit L2 norm per pixel
};

struct ForwardOptions {
  bool zero_skips = false;  // skip-connection ablation probe
  // hook name ("att1".."att7") -> captured output, filled when non-null
  std::map<std::string, std::vector<float>>* capture = nullptr;
  std::map<std::string, Shape>* capture_shapes = nullptr;
};

template <class T>
Tensor<T> apply_attention(const ModelWeights<T>& m, int slot, const Tensor<T>& x,
                          const ForwardOptions& opt) {
  Tensor<T> out = x;
  if (m.att[size_t(slot)]) {
    auto acfg = m.cfg.attn_config(attention_channels(m.cfg, slot));
    out = attn::mask_attention(x, *m.att[size_t(slot)], acfg);
  }
  const std::string name = "att" + std::to_string(slot + 1);
  if (opt.capture) {
    std::vector<float>& dst = (*opt.capture)[name];
    dst.resize(size_t(out.size()));
    for (int64_t i = 0; i < out.size(); ++i) dst[size_t(i)] = float(out.at(i));
    if (opt.capture_shapes) (*opt.capture_shapes)[name] = out.shape();
  }
  return out;
}

template <class T>
ForwardOutput<T> forward(const ModelWeights<T>& m, const Tensor<T>& images,
                         const ForwardOptions& opt = {}) {
  const ModelConfig& cfg = m.cfg;
  if (images.rank() != 4 || images.dim(1) != cfg.in_channels ||
      images.dim(2) != cfg.input_size || images.dim(3) != cfg.input_size)
    throw DimensionError("forward: input must be [B," + std::to_string(cfg.in_channels) +
                         "," + std::to_string(cfg.input_size) + "," +
                         std::to_string(cfg.input_size) + "], got " + shape_str(images.shape()));

  auto skip = [&](const Tensor<T>& s) {
    return opt.zero_skips ? Tensor<T>(s.shape()) : s;
  };

  Tensor<T> s1 = conv_block_forward(m.enc[0], images);                 // H,   c0
  Tensor<T> a1 = apply_attention(m, 0, ops::maxpool2d(s1), opt);       // H/2, c0
  Tensor<T> s2 = conv_block_forward(m.enc[1], a1);                     // H/2, c1
  Tensor<T> a2 = apply_attention(m, 1, ops::maxpool2d(s2), opt);       // H/4, c1
  Tensor<T> s3 = conv_block_forward(m.enc[2], a2);                     // H/4, c2
  Tensor<T> a3 = apply_attention(m, 2, ops::maxpool2d(s3), opt);       // H/8, c2
  Tensor<T> s4 = conv_block_forward(m.enc[3], a3);                     // H/8, c3
  Tensor<T> e4 = ops::maxpool2d(s4);                                   // H/16, c3

  Tensor<T> bott = apply_attention(m, 6, conv_block_forward(m.bottleneck, e4), opt);

  Tensor<T> d4 = conv_block_forward(
      m.dec[0], ops::concat_channels(ops::upsample_bilinear2x(bott), skip(s4)));  // H/8, c2
  Tensor<T> ad4 = apply_attention(m, 3, d4, opt);
  Tensor<T> d3 = conv_block_forward(
      m.dec[1], ops::concat_channels(ops::upsample_bilinear2x(ad4), skip(s3)));   // H/4, c1
  Tensor<T> ad3 = apply_attention(m, 4, d3, opt);
  Tensor<T> d2 = conv_block_forward(
      m.dec[2], ops::concat_channels(ops::upsample_bilinear2x(ad3), skip(s2)));   // H/2, c0
  Tensor<T> ad2 = apply_attention(m, 5, d2, opt);
  Tensor<T> d1 = conv_block_forward(
      m.dec[3], ops::concat_channels(ops::upsample_bilinear2x(ad2), skip(s1)));   // H,   c0

  ForwardOutput<T> out;
  out.sem_logits = ops::conv2d(d1, m.sem_w, m.sem_b, 1, 0);
  out.embeddings = ops::l2_normalize_channel(ops::conv2d(d1, m.emb_w, m.emb_b, 1, 0));
  return out;
}

// Runs a forward pass collecting the requested attention feature maps.
template <class T>
std::map<std::string, std::pair<Shape, std::vector<float>>> capture_features(
    const ModelWeights<T>& m, const Tensor<T>& images,
    const std::vector<std::string>& hooks) {
  for (const auto& h : hooks) {
    if (h.size() != 4 || h.substr(0, 3) != "att" || h[3] < '1' || h[3] > '8')
      throw std::runtime_error("unknown hook name: " + h);
  }
  std::map<std::string, std::vector<float>> cap;
  std::map<std::string, Shape> shapes;
  ForwardOptions opt;
  opt.capture = &cap;
  opt.capture_shapes = &shapes;
  forward(m, images, opt);
  std::map<std::string, std::pair<Shape, std::vector<float>>> out;
  for (const auto& h : hooks) {
    auto it = cap.find(h);
    if (it == cap.end()) throw std::runtime_error("hook has no module in this config: " + h);
    out[h] = {shapes[h], std::move(it->second)};
  }
  return out;
}

}  // namespace maskattn::model
