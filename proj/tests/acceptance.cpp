// Acceptance suite: one pass/fail line per numbered criterion.
//
//   acceptance           run everything (criteria 1-10)
//   acceptance --fast    criteria 1-5 and 8-10 (minutes)
//   acceptance --training  criteria 6-7 (full training runs; hours on few cores)
//
// Exit code 0 iff every executed criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "maskattn/attention.hpp"
#include "maskattn/dataset.hpp"
#include "maskattn/longrange.hpp"
#include "maskattn/loss.hpp"
#include "maskattn/metrics.hpp"
#include "maskattn/model.hpp"
#include "maskattn/ops.hpp"
#include "maskattn/rng.hpp"
#include "maskattn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace maskattn;
using TD = Tensor<double>;

namespace {

// ---------------------------------------------------------------------------
// harness

struct Criterion {
  std::vector<std::string> failures;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void expect_le(double value, double bound, const std::string& what) {
    if (!(value <= bound)) {
      std::ostringstream os;
      os << what << " (got " << value << ", bound " << bound << ")";
      failures.push_back(os.str());
    }
  }
};

bool report(int id, const std::string& title, Criterion& c) {
  if (c.failures.empty()) {
    std::cout << "criterion " << id << ": PASS - " << title << "\n";
    return true;
  }
  std::cout << "criterion " << id << ": FAIL - " << title << "\n";
  for (const auto& f : c.failures) std::cout << "    " << f << "\n";
  return false;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d.string();
}

int run_cli(const std::string& args, std::string* out = nullptr) {
  static int n = 0;
  const auto capture = fs::temp_directory_path() / ("accept_out_" + std::to_string(n++));
  const std::string cmd =
      std::string(MASKATTN_CLI_PATH) + " " + args + " > " + capture.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (out) {
    std::ifstream in(capture);
    out->assign(std::istreambuf_iterator<char>(in), {});
  }
  fs::remove(capture);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

TD randn(Shape s, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  TD t(std::move(s));
  for (int64_t i = 0; i < t.size(); ++i) t.mutable_data()[i] = scale * rng.normal();
  return t;
}

TD weighted(const TD& y, uint64_t seed = 99) {
  return ops::sum(ops::mul(y, randn(y.shape(), seed).detached()));
}

// ---------------------------------------------------------------------------
// criterion 1: gradient correctness over every op and the full model

bool criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  Criterion c;
  auto check = [&](const char* name, const std::function<TD(const TD&)>& f, const TD& x,
                   double eps = 1e-5) {
    c.expect_le(ops::grad_check<double>(f, x, eps), 1e-6, std::string("op grad: ") + name);
  };

  TD x = randn({2, 3, 4}, 1);
  TD b = randn({2, 3, 4}, 2);
  check("add", [&](const TD& t) { return weighted(ops::add(t, b)); }, x);
  check("sub", [&](const TD& t) { return weighted(ops::sub(b, t)); }, x);
  check("mul", [&](const TD& t) { return weighted(ops::mul(t, t)); }, x);
  check("scale", [&](const TD& t) { return weighted(ops::scale(t, -1.7)); }, x);
  TD bias = randn({4}, 3);
  check("add_rowvec/x", [&](const TD& t) { return weighted(ops::add_rowvec(t, bias)); }, x);
  check("add_rowvec/b", [&](const TD& t) { return weighted(ops::add_rowvec(x, t)); }, bias);

  TD a4 = randn({2, 3, 4, 5}, 4);
  TD b4 = randn({2, 3, 5, 6}, 5);
  TD shared = randn({5, 6}, 6);
  check("matmul/a", [&](const TD& t) { return weighted(ops::matmul(t, b4)); }, a4);
  check("matmul/b", [&](const TD& t) { return weighted(ops::matmul(a4, t)); }, b4);
  check("matmul/shared", [&](const TD& t) { return weighted(ops::matmul(a4, t)); }, shared);
  TD w = randn({5, 3}, 7), lb = randn({3}, 8);
  check("linear/x", [&](const TD& t) { return weighted(ops::linear(t, w, lb)); }, a4);
  check("linear/w", [&](const TD& t) { return weighted(ops::linear(a4, t, lb)); }, w);
  check("linear/b", [&](const TD& t) { return weighted(ops::linear(a4, w, t)); }, lb);

  check("transpose_last2", [&](const TD& t) { return weighted(ops::transpose_last2(t)); }, a4);
  check("transpose_12", [&](const TD& t) { return weighted(ops::transpose_12(t)); }, a4);
  TD cc = randn({2, 2, 4, 5}, 10);
  check("concat_channels", [&](const TD& t) { return weighted(ops::concat_channels(t, cc)); },
        randn({2, 3, 4, 5}, 9));
  check("reshape+sum", [&](const TD& t) { return weighted(ops::sum(t.reshape({6, 20})).reshape({1})); },
        a4);

  TD xi = randn({2, 3, 6, 5}, 11);
  TD cw = randn({4, 3, 3, 3}, 12);
  TD cb = randn({4}, 13);
  check("conv2d/x", [&](const TD& t) { return weighted(ops::conv2d(t, cw, cb, 1, 1)); }, xi);
  check("conv2d/w", [&](const TD& t) { return weighted(ops::conv2d(xi, t, cb, 1, 1)); }, cw);
  check("conv2d/b", [&](const TD& t) { return weighted(ops::conv2d(xi, cw, t, 1, 1)); }, cb);

  TD mp(Shape{1, 2, 4, 4});
  for (int64_t i = 0; i < mp.size(); ++i) mp.mutable_data()[i] = double(i % 13) + 0.01 * double(i);
  check("maxpool2d", [&](const TD& t) { return weighted(ops::maxpool2d(t)); }, mp);
  check("upsample", [&](const TD& t) { return weighted(ops::upsample_bilinear2x(t)); },
        randn({2, 3, 3, 4}, 15));

  TD nx = randn({2, 2, 3, 5}, 16);
  check("softmax", [&](const TD& t) { return weighted(ops::softmax_lastdim(t)); }, nx);
  check("gelu", [&](const TD& t) { return weighted(ops::gelu(t)); }, nx);
  check("log_sigmoid_eps", [&](const TD& t) { return weighted(ops::log_sigmoid_eps(t, 1e-6)); },
        nx);
  TD gamma = randn({2}, 17), beta = randn({2}, 18);
  check("group_norm/x", [&](const TD& t) { return weighted(ops::group_norm(t, gamma, beta, 2)); },
        nx, 1e-4);
  check("group_norm/gamma", [&](const TD& t) { return weighted(ops::group_norm(nx, t, beta, 1)); },
        gamma);
  check("group_norm/beta", [&](const TD& t) { return weighted(ops::group_norm(nx, gamma, t, 1)); },
        beta);
  check("l2_normalize", [&](const TD& t) { return weighted(ops::l2_normalize_channel(t)); }, nx);
  check("mean", [&](const TD& t) { return ops::mean(t); }, nx);

  TD scores = randn({2, 2, 3, 4}, 19);
  TD m = randn({2, 2, 1, 4}, 20);
  check("add_key_bias/s", [&](const TD& t) { return weighted(ops::add_key_bias(t, m)); }, scores);
  check("add_key_bias/m", [&](const TD& t) { return weighted(ops::add_key_bias(scores, t)); }, m);
  const double alpha = 1.0 / std::sqrt(8.0);
  check("masked_softmax/s",
        [&](const TD& t) { return weighted(ops::masked_softmax_lastdim(t, m, alpha)); }, scores);
  check("masked_softmax/m",
        [&](const TD& t) { return weighted(ops::masked_softmax_lastdim(scores, t, alpha)); }, m);

  // full model, f64 reduced config
  model::ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.embed_dim = 4;
  cfg.stage_channels = {8, 8, 8, 8};
  cfg.heads = 2;
  cfg.input_size = 16;
  auto m64 = model::build_model<double>(cfg, 8);
  Rng ir(9);
  TD x64(Shape{1, 3, 16, 16});
  for (int64_t i = 0; i < x64.size(); ++i) x64.mutable_data()[i] = ir.uniform(0, 1);
  TD wsem = randn({1, 3, 16, 16}, 10);
  c.expect_le(ops::grad_check<double>(
                  [&](const TD& t) {
                    auto out = model::forward(m64, t);
                    return ops::sum(ops::mul(out.sem_logits, wsem.detached()));
                  },
                  x64, 1e-5),
              1e-6, "full model f64 gradient");

  // f32 full model: analytic gradient against the f64 analytic gradient
  // (finite differences in f32 drown in rounding at this depth)
  auto m32 = model::build_model<float>(cfg, 8);
  Tensor<float> x32(Shape{1, 3, 16, 16});
  for (int64_t i = 0; i < x32.size(); ++i) x32.mutable_data()[i] = float(x64.at(i));
  Tensor<float> wsem32(Shape{1, 3, 16, 16});
  for (int64_t i = 0; i < wsem32.size(); ++i) wsem32.mutable_data()[i] = float(wsem.at(i));
  Tape<float> t32;
  auto xw32 = t32.watch(x32);
  auto out32 = model::forward(m32, xw32);
  t32.backward(ops::sum(ops::mul(out32.sem_logits, wsem32.detached())));
  const auto& g32 = t32.grad(xw32);
  Tape<double> t64;
  auto xw64 = t64.watch(x64);
  auto out64 = model::forward(m64, xw64);
  t64.backward(ops::sum(ops::mul(out64.sem_logits, wsem.detached())));
  const auto& g64 = t64.grad(xw64);
  double gmax = 0;
  for (double g : g64) gmax = std::max(gmax, std::fabs(g));
  double err32 = 0;
  for (size_t i = 0; i < g32.size(); ++i)
    err32 = std::max(err32, std::fabs(double(g32[i]) - g64[i]) / gmax);
  c.expect_le(err32, 1e-3, "full model f32 gradient vs f64");

  const double elapsed = seconds_since(t0);
  c.expect_le(elapsed, 120.0, "criterion 1 runtime (s)");
  return report(1, "gradient correctness: every op and the full model", c);
}

// ---------------------------------------------------------------------------
// criterion 2: attention core vs loop oracle; fully-masked-except-one-key

TD zeros(Shape s) { return TD(std::move(s)); }

void zero_ffn(attn::MaskAttnWeights<double>& w, int64_t c) {
  w.w1 = zeros({c, 4 * c});
  w.b1 = zeros({4 * c});
  w.w2 = zeros({4 * c, c});
  w.b2 = zeros({c});
}

// loop-based attention oracle on [B,T,C] tokens, no FFN
std::vector<double> oracle_attention(const TD& x, const attn::MaskAttnWeights<double>& w,
                                     const attn::AttnConfig& cfg) {
  const int64_t B = x.dim(0), T = x.dim(1), ch = cfg.channels, H = cfg.heads, dk = cfg.d_k();
  auto proj = [&](const TD& wm, int64_t b, int64_t t, int64_t j) {
    double acc = 0;
    for (int64_t i = 0; i < ch; ++i) acc += x.at((b * T + t) * ch + i) * wm.at(i * ch + j);
    return acc;
  };
  std::vector<double> merged(size_t(B * T * ch), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t tq = 0; tq < T; ++tq) {
        std::vector<double> scores(static_cast<size_t>(T));
        for (int64_t tk = 0; tk < T; ++tk) {
          double s = 0;
          for (int64_t d = 0; d < dk; ++d)
            s += proj(w.wq, b, tq, h * dk + d) * proj(w.wk, b, tk, h * dk + d);
          scores[size_t(tk)] = s / std::sqrt(double(dk));
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double z = 0;
        for (double& s : scores) z += s = std::exp(s - mx);
        for (int64_t d = 0; d < dk; ++d) {
          double ctx = 0;
          for (int64_t tk = 0; tk < T; ++tk)
            ctx += scores[size_t(tk)] / z * proj(w.wv, b, tk, h * dk + d);
          merged[size_t((b * T + tq) * ch + h * dk + d)] = ctx;
        }
      }
  std::vector<double> res(size_t(B * T * ch));
  for (int64_t bt = 0; bt < B * T; ++bt)
    for (int64_t j = 0; j < ch; ++j) {
      double acc = x.at(bt * ch + j);
      for (int64_t i = 0; i < ch; ++i) acc += merged[size_t(bt * ch + i)] * w.wo.at(i * ch + j);
      res[size_t(bt * ch + j)] = acc;
    }
  return res;
}

bool criterion2() {
  Criterion c;
  attn::AttnConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.mask_mode = attn::MaskMode::none;  // M == 0
  Rng rng(7);
  auto w = attn::init_mask_attn<double>(cfg, rng);
  zero_ffn(w, cfg.channels);
  TD x = randn({2, 6, 8}, 11, 0.7);
  TD got = attn::mask_attention_tokens(x, w, cfg);
  auto want = oracle_attention(x, w, cfg);
  double worst = 0;
  for (int64_t i = 0; i < got.size(); ++i)
    worst = std::max(worst, std::fabs(got.at(i) - want[size_t(i)]));
  c.expect_le(worst, 1e-5, "M == 0 vs loop oracle");

  // masked except one key: output row collapses to that key's value row
  const int64_t ch = 8, T = 6, j0 = 2;
  attn::AttnConfig mcfg;
  mcfg.channels = ch;
  mcfg.heads = 2;
  Rng mrng(9);
  auto mw = attn::init_mask_attn<double>(mcfg, mrng);
  zero_ffn(mw, ch);
  mw.wq = zeros({ch, ch});
  mw.wk = zeros({ch, ch});
  mw.wo = TD(Shape{ch, ch});
  for (int64_t i = 0; i < ch; ++i) mw.wo.mutable_data()[i * ch + i] = 1.0;
  mw.wg = zeros({ch, mcfg.heads});
  for (int64_t h = 0; h < mcfg.heads; ++h) mw.wg.mutable_data()[h] = 50.0;
  mw.bg = zeros({mcfg.heads});
  TD mx = randn({1, T, ch}, 13, 0.3);
  for (int64_t t = 0; t < T; ++t) mx.mutable_data()[t * ch + 0] = (t == j0) ? 1.0 : -1.0;
  TD out = attn::mask_attention_tokens(mx, mw, mcfg);
  std::vector<double> vj0(size_t(ch), 0.0);
  for (int64_t j = 0; j < ch; ++j)
    for (int64_t i = 0; i < ch; ++i) vj0[size_t(j)] += mx.at(j0 * ch + i) * mw.wv.at(i * ch + j);
  worst = 0;
  for (int64_t t = 0; t < T; ++t)
    for (int64_t j = 0; j < ch; ++j)
      worst = std::max(worst, std::fabs(out.at(t * ch + j) - mx.at(t * ch + j) - vj0[size_t(j)]));
  c.expect_le(worst, 1e-3, "one-key case returns V_j0");
  return report(2, "attention fidelity: loop oracle and single-key mask", c);
}

// ---------------------------------------------------------------------------
// criterion 3: residual identity and GELU hand case

bool criterion3() {
  Criterion c;
  attn::AttnConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  Rng rng(10);
  auto w = attn::init_mask_attn<double>(cfg, rng);
  zero_ffn(w, cfg.channels);
  TD a = randn({2, 4, 8}, 14);
  TD out = attn::ffn_residual(a, w);
  bool exact = true;
  for (int64_t i = 0; i < a.size(); ++i) exact &= out.at(i) == a.at(i);
  c.expect(exact, "zero-FFN residual identity not bit-exact");

  const double cases[] = {-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0};
  TD x(Shape{8});
  for (int i = 0; i < 8; ++i) x.mutable_data()[i] = cases[i];
  TD y = ops::gelu(x);
  double worst = 0;
  for (int i = 0; i < 8; ++i) {
    const double want = cases[i] * 0.5 * (1.0 + std::erf(cases[i] / std::sqrt(2.0)));
    worst = std::max(worst, std::fabs(y.at(i) - want));
  }
  c.expect_le(worst, 1e-6, "GELU vs erf oracle");
  c.expect_le(std::fabs(y.at(5) - 0.8413447460685429), 1e-9, "GELU(1) hand value");
  return report(3, "FFN residual identity and GELU erf hand case", c);
}

// ---------------------------------------------------------------------------
// criterion 4: loss oracles

double ce_oracle(const TD& logits, const std::vector<uint16_t>& labels) {
  const int64_t B = logits.dim(0), C = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  double total = 0;
  int64_t count = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < hw; ++p) {
      const uint16_t y = labels[size_t(b * hw + p)];
      if (y == loss::kIgnore) continue;
      double z = 0;
      for (int64_t cl = 0; cl < C; ++cl) z += std::exp(logits.at(b * C * hw + cl * hw + p));
      total += -std::log(std::exp(logits.at(b * C * hw + y * hw + p)) / z);
      ++count;
    }
  return total / double(count);
}

double ic_oracle(const TD& emb, const loss::PairSets& pairs, double tau) {
  const int64_t de = emb.dim(1), hw = emb.dim(2) * emb.dim(3);
  auto dot = [&](int64_t b, int64_t p, int64_t q) {
    double s = 0;
    for (int64_t ch = 0; ch < de; ++ch)
      s += emb.at(b * de * hw + ch * hw + p) * emb.at(b * de * hw + ch * hw + q);
    return s;
  };
  double total = 0;
  for (const auto& a : pairs.anchors) {
    double denom = 0;
    for (int64_t p : a.positives) denom += std::exp(dot(a.batch, a.pixel, p) / tau);
    for (int64_t q : a.negatives) denom += std::exp(dot(a.batch, a.pixel, q) / tau);
    double acc = 0;
    for (int64_t p : a.positives) acc += -std::log(std::exp(dot(a.batch, a.pixel, p) / tau) / denom);
    total += acc / double(a.positives.size());
  }
  return total / double(pairs.count());
}

bool criterion4() {
  Criterion c;
  double worst_ce = 0, worst_ic = 0;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    const int64_t B = 2, C = 4, H = 3, W = 3;  // 9 pixels per instance map
    TD logits = randn({B, C, H, W}, 100 + seed, 2.0);
    Rng lr(200 + seed);
    std::vector<uint16_t> labels(size_t(B * H * W));
    for (auto& y : labels)
      y = (seed % 3 == 0 && lr.bernoulli(0.3)) ? loss::kIgnore
                                               : uint16_t(lr.uniform_index(uint64_t(C)));
    if (std::all_of(labels.begin(), labels.end(),
                    [](uint16_t y) { return y == loss::kIgnore; }))
      labels[0] = 0;
    worst_ce = std::max(worst_ce,
                        std::fabs(loss::cross_entropy(logits, labels).value() -
                                  ce_oracle(logits, labels)));

    TD emb = randn({B, 3, 4, 4}, 300 + seed);
    Rng pr(400 + seed);
    loss::PairSets ps;
    const int64_t na = 1 + int64_t(pr.uniform_index(5));
    for (int64_t i = 0; i < na; ++i) {
      loss::Anchor a;
      a.batch = int64_t(pr.uniform_index(uint64_t(B)));
      a.pixel = int64_t(pr.uniform_index(16));
      const int64_t np = 1 + int64_t(pr.uniform_index(3));
      const int64_t nn = 1 + int64_t(pr.uniform_index(4));
      for (int64_t p = 0; p < np; ++p) a.positives.push_back(int64_t(pr.uniform_index(16)));
      for (int64_t q = 0; q < nn; ++q) a.negatives.push_back(int64_t(pr.uniform_index(16)));
      ps.anchors.push_back(std::move(a));
    }
    const double tau = 0.05 + 0.1 * double(seed % 5);
    worst_ic = std::max(worst_ic, std::fabs(loss::instance_contrastive(emb, ps, tau).value() -
                                            ic_oracle(emb, ps, tau)));
  }
  c.expect_le(worst_ce, 1e-6, "L_CE vs naive oracle over 50 seeds");
  c.expect_le(worst_ic, 1e-6, "L_IC vs brute-force oracle over 50 seeds");

  // degenerate analytic values
  TD uniform(Shape{1, 4, 2, 2});
  std::vector<uint16_t> lab{0, 1, 2, 3};
  c.expect_le(std::fabs(loss::cross_entropy(uniform, lab).value() - std::log(4.0)), 1e-6,
              "uniform logits give ln C");
  TD same = TD::full({1, 2, 1, 3}, 0.5);
  loss::Anchor a;
  a.pixel = 0;
  a.positives = {1};
  a.negatives = {2};
  loss::PairSets ps;
  ps.anchors.push_back(a);
  c.expect_le(std::fabs(loss::instance_contrastive(same, ps, 0.1).value() - std::log(2.0)), 1e-6,
              "identical embeddings give log 2");
  return report(4, "loss oracle equivalence and degenerate analytic values", c);
}

// ---------------------------------------------------------------------------
// criterion 5: metric oracles

double pixel_iou(const std::vector<bool>& a, const std::vector<bool>& b) {
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] && b[i]) ++inter;
    if (a[i] || b[i]) ++uni;
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

double miou_oracle(const std::vector<uint16_t>& pred, const std::vector<uint16_t>& gt,
                   int64_t classes) {
  double sum = 0;
  int64_t counted = 0;
  for (int64_t cl = 0; cl < classes; ++cl) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] == cl, g = gt[i] == cl;
      if (p && g) ++inter;
      if (p || g) ++uni;
    }
    if (uni > 0) {
      sum += double(inter) / double(uni);
      ++counted;
    }
  }
  return sum / double(counted);
}

std::vector<std::pair<uint16_t, std::vector<bool>>> masks_of(const std::vector<uint16_t>& map) {
  std::set<uint16_t> ids(map.begin(), map.end());
  ids.erase(0);
  std::vector<std::pair<uint16_t, std::vector<bool>>> out;
  for (uint16_t id : ids) {
    std::vector<bool> m(map.size(), false);
    for (size_t i = 0; i < map.size(); ++i) m[i] = map[i] == id;
    out.emplace_back(id, std::move(m));
  }
  return out;
}

double ap_oracle(const std::vector<metrics::ScoredInstances>& pred,
                 const std::vector<std::vector<uint16_t>>& gt, double t) {
  struct Det {
    double score;
    size_t image;
    std::vector<bool> mask;
  };
  std::vector<Det> dets;
  std::vector<std::vector<std::vector<bool>>> gmasks(gt.size());
  int64_t total_gt = 0;
  for (size_t im = 0; im < gt.size(); ++im) {
    auto pm = masks_of(pred[im].map);
    for (size_t s = 0; s < pm.size(); ++s)
      dets.push_back({pred[im].scores[s], im, std::move(pm[s].second)});
    for (auto& [id, mm] : masks_of(gt[im])) gmasks[im].push_back(std::move(mm));
    total_gt += int64_t(gmasks[im].size());
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Det& a, const Det& b) { return a.score > b.score; });
  std::vector<std::set<size_t>> used(gt.size());
  std::vector<double> prec, rec;
  int64_t tp = 0, fp = 0;
  for (const Det& d : dets) {
    double best = -1;
    size_t best_j = 0;
    for (size_t j = 0; j < gmasks[d.image].size(); ++j) {
      if (used[d.image].count(j)) continue;
      const double iou = pixel_iou(d.mask, gmasks[d.image][j]);
      if (iou >= t && iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best >= 0) {
      used[d.image].insert(best_j);
      ++tp;
    } else {
      ++fp;
    }
    prec.push_back(double(tp) / double(tp + fp));
    rec.push_back(double(tp) / double(total_gt));
  }
  double ap = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = double(k) / 100.0;
    double best = 0;
    for (size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= r) best = std::max(best, prec[i]);
    ap += best;
  }
  return ap / 101.0;
}

struct PqOracle {
  double pq = 0, sq = 0, rq = 0;
};

PqOracle pq_oracle(const PanopticMap& pred, const PanopticMap& gt,
                   const std::vector<bool>& is_thing) {
  auto segments = [&](const PanopticMap& m) {
    std::vector<std::pair<uint16_t, std::vector<bool>>> out;
    std::set<uint16_t> ids(m.instance.begin(), m.instance.end());
    ids.erase(0);
    for (uint16_t id : ids) {
      std::vector<bool> mask(m.instance.size(), false);
      uint16_t cls = 0;
      for (size_t i = 0; i < m.instance.size(); ++i)
        if (m.instance[i] == id) {
          mask[i] = true;
          cls = m.semantic[i];
        }
      out.emplace_back(cls, std::move(mask));
    }
    for (uint16_t cl = 0; cl < is_thing.size(); ++cl) {
      if (is_thing[cl]) continue;
      std::vector<bool> mask(m.instance.size(), false);
      bool any = false;
      for (size_t i = 0; i < m.instance.size(); ++i)
        if (m.instance[i] == 0 && m.semantic[i] == cl) mask[i] = any = true;
      if (any) out.emplace_back(cl, std::move(mask));
    }
    return out;
  };
  auto ps = segments(pred), gs = segments(gt);
  std::set<uint16_t> classes;
  for (auto& [cl, mm] : ps) classes.insert(cl);
  for (auto& [cl, mm] : gs) classes.insert(cl);
  PqOracle r;
  for (uint16_t cl : classes) {
    int64_t tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;
    std::set<size_t> gmatched;
    for (auto& [pc, pm] : ps) {
      if (pc != cl) continue;
      bool matched = false;
      for (size_t j = 0; j < gs.size(); ++j) {
        if (gs[j].first != cl || gmatched.count(j)) continue;
        const double iou = pixel_iou(pm, gs[j].second);
        if (iou > 0.5) {
          gmatched.insert(j);
          matched = true;
          ++tp;
          iou_sum += iou;
          break;
        }
      }
      if (!matched) ++fp;
    }
    for (size_t j = 0; j < gs.size(); ++j)
      if (gs[j].first == cl && !gmatched.count(j)) ++fn;
    const double denom = double(tp) + 0.5 * double(fp) + 0.5 * double(fn);
    r.pq += denom > 0 ? iou_sum / denom : 0.0;
    r.sq += tp > 0 ? iou_sum / double(tp) : 0.0;
    r.rq += denom > 0 ? double(tp) / denom : 0.0;
  }
  r.pq /= double(classes.size());
  r.sq /= double(classes.size());
  r.rq /= double(classes.size());
  return r;
}

PanopticMap random_pan(Rng& rng, int64_t h, int64_t w, const std::vector<bool>& is_thing) {
  PanopticMap m;
  m.h = h;
  m.w = w;
  m.semantic.assign(size_t(h * w), 0);
  m.instance.assign(size_t(h * w), 0);
  const int64_t shapes = int64_t(rng.uniform_index(4));
  std::vector<uint16_t> cls_of;
  for (int64_t s = 0; s < shapes; ++s) {
    const uint16_t cls = uint16_t(1 + rng.uniform_index(is_thing.size() - 1));
    const int64_t y0 = int64_t(rng.uniform_index(uint64_t(h)));
    const int64_t x0 = int64_t(rng.uniform_index(uint64_t(w)));
    const int64_t y1 = y0 + 1 + int64_t(rng.uniform_index(uint64_t(h)));
    const int64_t x1 = x0 + 1 + int64_t(rng.uniform_index(uint64_t(w)));
    cls_of.push_back(cls);
    for (int64_t y = y0; y < std::min(y1, h); ++y)
      for (int64_t x = x0; x < std::min(x1, w); ++x) {
        m.semantic[size_t(y * w + x)] = cls;
        m.instance[size_t(y * w + x)] = uint16_t(s + 1);
      }
  }
  std::map<uint16_t, int64_t> count;
  for (uint16_t id : m.instance)
    if (id) count[id]++;
  std::map<uint16_t, uint16_t> remap;
  for (auto& [id, n] : count) {
    const uint16_t fresh = uint16_t(remap.size() + 1);
    remap[id] = fresh;
    m.segments.push_back({fresh, cls_of[size_t(id - 1)], n});
  }
  for (auto& id : m.instance)
    if (id) id = remap[id];
  return m;
}

bool criterion5() {
  Criterion c;
  const std::vector<bool> is_thing{false, true, true, true};
  double worst_miou = 0, worst_ap = 0, worst_pq = 0, worst_identity = 0;
  Rng rng(404);
  for (int seed = 0; seed < 50; ++seed) {
    Rng sub = rng.substream(uint64_t(seed));
    const int64_t h = 2 + int64_t(sub.uniform_index(15));
    const int64_t w = 2 + int64_t(sub.uniform_index(15));

    std::vector<uint16_t> sp(size_t(h * w)), sg(size_t(h * w));
    for (auto& v : sp) v = uint16_t(sub.uniform_index(4));
    for (auto& v : sg) v = uint16_t(sub.uniform_index(4));
    worst_miou = std::max(worst_miou,
                          std::fabs(metrics::miou(sp, sg, 4).miou - miou_oracle(sp, sg, 4)));

    std::vector<metrics::ScoredInstances> pred(2);
    std::vector<std::vector<uint16_t>> gt(2);
    int64_t total_gt = 0;
    for (size_t im = 0; im < 2; ++im) {
      pred[im].map.resize(size_t(h * w));
      gt[im].resize(size_t(h * w));
      for (auto& v : pred[im].map) v = uint16_t(sub.uniform_index(4));
      for (auto& v : gt[im]) v = uint16_t(sub.uniform_index(4));
      total_gt += int64_t(metrics::extract_instances(gt[im]).size());
      pred[im].scores.assign(metrics::extract_instances(pred[im].map).size(), 0.0);
      for (auto& s : pred[im].scores) s = sub.uniform();
    }
    if (total_gt > 0)
      for (double t : {0.25, 0.5, 0.75})
        worst_ap = std::max(worst_ap, std::fabs(*metrics::average_precision(pred, gt, t) -
                                                ap_oracle(pred, gt, t)));

    auto pp = random_pan(sub, h, w, is_thing);
    auto pg = random_pan(sub, h, w, is_thing);
    auto r = metrics::panoptic_quality(pp, pg, is_thing);
    auto o = pq_oracle(pp, pg, is_thing);
    worst_pq = std::max({worst_pq, std::fabs(r->pq - o.pq), std::fabs(r->sq - o.sq),
                         std::fabs(r->rq - o.rq)});
    for (const auto& [cl, pc] : r->per_class)
      worst_identity = std::max(worst_identity, std::fabs(pc.pq - pc.sq * pc.rq));
  }
  c.expect_le(worst_miou, 1e-9, "mIoU vs exhaustive oracle over 50 seeds");
  c.expect_le(worst_ap, 1e-9, "AP vs exhaustive oracle over 50 seeds");
  c.expect_le(worst_pq, 1e-9, "PQ/SQ/RQ vs exhaustive oracle over 50 seeds");
  c.expect_le(worst_identity, 1e-9, "per-class PQ == SQ * RQ");

  // hand case: one matched segment at IoU 0.6, one missed
  const std::vector<bool> thing2{false, true};
  PanopticMap hg, hp;
  hg.h = hp.h = 1;
  hg.w = hp.w = 10;
  hg.semantic.assign(10, 0);
  hg.instance.assign(10, 0);
  hp.semantic.assign(10, 0);
  hp.instance.assign(10, 0);
  for (int i : {0, 1, 2, 3}) { hg.semantic[size_t(i)] = 1; hg.instance[size_t(i)] = 1; }
  for (int i : {5, 6, 7, 8}) { hg.semantic[size_t(i)] = 1; hg.instance[size_t(i)] = 2; }
  hg.segments = {{1, 1, 4}, {2, 1, 4}};
  for (int i : {0, 1, 2, 4}) { hp.semantic[size_t(i)] = 1; hp.instance[size_t(i)] = 1; }
  hp.segments = {{1, 1, 4}};
  auto hand = metrics::panoptic_quality(hp, hg, thing2);
  const auto& c1 = hand->per_class.at(1);
  c.expect_le(std::fabs(c1.pq - 0.4), 1e-12, "hand case PQ = 0.4");
  c.expect_le(std::fabs(c1.sq - 0.6), 1e-12, "hand case SQ = 0.6");
  c.expect_le(std::fabs(c1.rq - 2.0 / 3.0), 1e-12, "hand case RQ = 2/3");
  return report(5, "metric oracle equivalence and PQ decomposition", c);
}

// ---------------------------------------------------------------------------
// criteria 6-7: end-to-end training, evaluation thresholds, ablation ordering

int64_t effective_cores() {
  const int64_t hc = int64_t(std::thread::hardware_concurrency());
  return std::max<int64_t>(1, hc);
}

bool criterion6(const std::string& data_dir) {
  Criterion c;
  const std::string run = fresh_dir("accept_c6_run");

  const auto t0 = std::chrono::steady_clock::now();
  std::string out;
  const int rc = run_cli("train --data " + data_dir + " --out " + run +
                             " --epochs 40 --batch-size 8 --seed 1",
                         &out);
  const double train_s = seconds_since(t0);
  c.expect(rc == 0, "train exited with code " + std::to_string(rc) + "\n" + out);

  // reference budget: 45 min on 8 cores, scaled by the cores actually present
  const double budget_s = 45.0 * 60.0 * 8.0 / double(std::min<int64_t>(8, effective_cores()));
  c.expect_le(train_s, budget_s, "training wall time (s)");

  std::string eval_out;
  const int erc = run_cli("eval --checkpoint " + run + " --data " + data_dir +
                              " --split val --out " + run + "/eval",
                          &eval_out);
  c.expect(erc == 0, "eval exited with code " + std::to_string(erc) + "\n" + eval_out);
  double miou = 0, pq = -1;
  if (erc == 0) {
    json rep = json::parse(eval_out);
    miou = rep.at("mIoU").get<double>();
    if (!rep.at("PQ").is_null()) pq = rep.at("PQ").get<double>();
  }
  std::cout << "    [criterion 6] mIoU=" << miou << " PQ=" << pq << " train=" << train_s
            << "s (budget " << budget_s << "s on " << effective_cores() << " cores)\n";
  c.expect(miou >= 0.85, "val mIoU >= 0.85 (got " + std::to_string(miou) + ")");
  c.expect(pq >= 0.55, "val PQ >= 0.55 (got " + std::to_string(pq) + ")");
  return report(6, "end-to-end learning on the synthetic shapes dataset", c);
}

bool criterion7(const std::string& data_dir) {
  Criterion c;
  const std::string out = fresh_dir("accept_c7_ablation");
  // reduced budget relative to the headline run: shared seeds and data subset
  // across placements keep the comparison paired
  std::string text;
  const int rc = run_cli("ablate --data " + data_dir + " --out " + out +
                             " --epochs 12 --batch-size 8 --seed 1 --data-fraction 0.25"
                             " --placements all,encoder,none",
                         &text);
  c.expect(rc == 0, "ablate exited with code " + std::to_string(rc) + "\n" + text);

  std::map<std::string, double> miou;
  std::ifstream csv(out + "/ablation.csv");
  std::string line;
  std::getline(csv, line);  // header
  while (std::getline(csv, line)) {
    std::istringstream is(line);
    std::string name, val;
    std::getline(is, name, ',');
    std::getline(is, val, ',');
    if (!name.empty()) miou[name] = std::stod(val);
  }
  std::cout << "    [criterion 7] ablation table:\n";
  std::ifstream full(out + "/ablation.csv");
  while (std::getline(full, line)) std::cout << "      " << line << "\n";

  c.expect(miou.count("all") && miou.count("encoder") && miou.count("none"),
           "ablation table missing placements");
  if (miou.count("all") && miou.count("encoder") && miou.count("none")) {
    c.expect(miou["all"] >= miou["encoder"] - 0.01,
             "mIoU(all) >= mIoU(encoder) - 0.01 violated");
    c.expect(miou["all"] >= miou["none"] + 0.02, "mIoU(all) >= mIoU(none) + 0.02 violated");
  }
  return report(7, "attention placement ablation ordering", c);
}

// ---------------------------------------------------------------------------
// criterion 8: lambda sweep harness

bool criterion8() {
  Criterion c;
  const std::string data = fresh_dir("accept_c8_data");
  data::GenConfig gcfg;
  gcfg.n_images = 10;
  gcfg.size = 32;
  gcfg.val_fraction = 0.2;
  data::generate_shapes_dataset(data, gcfg, 7);

  model::ModelConfig mc;
  mc.num_classes = 4;
  mc.embed_dim = 4;
  mc.stage_channels = {8, 8, 8, 8};
  mc.heads = 2;
  mc.input_size = 32;
  train::TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.seed = 1;

  std::vector<double> grid{0.0};
  for (double lam = 0.1; lam <= 2.1 + 1e-9; lam += 0.2) grid.push_back(lam);
  const std::string out = fresh_dir("accept_c8_sweep");
  auto rows = train::sweep_lambda(mc, tc, {}, grid, data, out);
  c.expect(rows.size() == grid.size(), "one row per lambda");
  std::cout << "    [criterion 8] lambda sweep table:\n      lambda,L_CE,L_IC,L_seg\n";
  for (const auto& r : rows)
    std::cout << "      " << r.lambda << "," << r.l_ce << "," << r.l_ic << "," << r.l_seg << "\n";
  c.expect(!rows.empty() && rows[0].lambda == 0.0 && rows[0].l_seg == rows[0].l_ce,
           "lambda = 0 row must satisfy L_seg == L_CE exactly");
  c.expect(fs::exists(out + "/sweep.csv"), "sweep.csv emitted");
  fs::remove_all(data);
  fs::remove_all(out);
  return report(8, "lambda sweep harness with exact lambda = 0 reduction", c);
}

// ---------------------------------------------------------------------------
// criterion 9: long-range estimator calibration

bool criterion9() {
  const auto t0 = std::chrono::steady_clock::now();
  Criterion c;
  for (uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    std::vector<double> wn(8192);
    for (auto& v : wn) v = rng.normal();
    const auto w = lr::default_windows(int64_t(wn.size()));
    c.expect_le(std::fabs(lr::hurst_rs(wn, w).value - 0.5), 0.1, "white noise H = 0.5 +- 0.1");
    c.expect_le(std::fabs(lr::dfa(wn, w).value - 0.5), 0.1, "white noise alpha = 0.5 +- 0.1");
    c.expect_le(std::fabs(lr::psd_beta(wn).beta.value), 0.2, "white noise beta = 0 +- 0.2");

    std::vector<double> walk = wn;
    for (size_t i = 1; i < walk.size(); ++i) walk[i] += walk[i - 1];
    c.expect_le(std::fabs(lr::dfa(walk, w).value - 1.5), 0.15, "random walk alpha = 1.5 +- 0.15");
    c.expect_le(std::fabs(lr::psd_beta(walk).beta.value - 2.0), 0.3, "random walk beta = 2 +- 0.3");

    c.expect(lr::autocorrelation(wn, 16)[0] == 1.0, "ACF lag 0 exactly 1");

    std::vector<std::complex<double>> a(wn.begin(), wn.begin() + 1024);
    lr::fft(a, false);
    double te = 0, fe = 0;
    for (size_t i = 0; i < 1024; ++i) te += wn[i] * wn[i];
    for (const auto& z : a) fe += std::norm(z);
    c.expect_le(std::fabs(te - fe / 1024.0) / te, 1e-6, "Parseval identity");
  }
  c.expect_le(seconds_since(t0), 60.0, "criterion 9 runtime (s)");
  return report(9, "long-range estimator calibration", c);
}

// ---------------------------------------------------------------------------
// criterion 10: byte-identical determinism of the CLI pipeline

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

bool dirs_identical(const fs::path& a, const fs::path& b, std::string* diff) {
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    if (rel.filename() == "run_manifest.json") continue;  // carries timestamps
    if (slurp(e.path()) != slurp(b / rel)) {
      *diff = rel.string();
      return false;
    }
  }
  return true;
}

bool criterion10() {
  Criterion c;
  std::string diff;
  auto check_pair = [&](const std::string& what, const std::string& a, const std::string& b) {
    if (!dirs_identical(a, b, &diff)) c.expect(false, what + " differs at " + diff);
  };

  const std::string d1 = fresh_dir("accept_c10_d1"), d2 = fresh_dir("accept_c10_d2");
  // 64px keeps the captured attention maps long enough for analyze
  c.expect(run_cli("gen-data --n 8 --size 64 --seed 7 --out " + d1) == 0, "gen-data run 1");
  c.expect(run_cli("gen-data --n 8 --size 64 --seed 7 --out " + d2) == 0, "gen-data run 2");
  check_pair("gen-data", d1, d2);

  const std::string r1 = fresh_dir("accept_c10_r1"), r2 = fresh_dir("accept_c10_r2");
  const std::string targs = " --epochs 2 --batch-size 2 --seed 5 --capture-features";
  c.expect(run_cli("train --data " + d1 + " --out " + r1 + targs) == 0, "train run 1");
  c.expect(run_cli("train --data " + d1 + " --out " + r2 + targs) == 0, "train run 2");
  check_pair("train", r1, r2);

  const std::string e1 = fresh_dir("accept_c10_e1"), e2 = fresh_dir("accept_c10_e2");
  std::string o1, o2;
  c.expect(run_cli("eval --checkpoint " + r1 + " --data " + d1 + " --out " + e1, &o1) == 0,
           "eval run 1");
  c.expect(run_cli("eval --checkpoint " + r1 + " --data " + d1 + " --out " + e2, &o2) == 0,
           "eval run 2");
  c.expect(o1 == o2, "eval stdout differs");
  check_pair("eval", e1, e2);

  const std::string a1 = fresh_dir("accept_c10_a1"), a2 = fresh_dir("accept_c10_a2");
  c.expect(run_cli("analyze --dir " + r1 + "/features --out " + a1) == 0, "analyze run 1");
  c.expect(run_cli("analyze --dir " + r1 + "/features --out " + a2) == 0, "analyze run 2");
  check_pair("analyze", a1, a2);

  for (const auto& d : {d1, d2, r1, r2, e1, e2, a1, a2}) fs::remove_all(d);
  return report(10, "byte-identical determinism of gen-data/train/eval/analyze", c);
}

}  // namespace

int main(int argc, char** argv) {
  bool fast = false, training = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--fast") fast = true;
    else if (a == "--training") training = true;
    else {
      std::cerr << "usage: acceptance [--fast] [--training]\n";
      return 1;
    }
  }
  if (!fast && !training) fast = training = true;

  bool ok = true;
  if (fast) {
    ok &= criterion1();
    ok &= criterion2();
    ok &= criterion3();
    ok &= criterion4();
    ok &= criterion5();
    ok &= criterion8();
    ok &= criterion9();
    ok &= criterion10();
  }
  if (training) {
    // one shared full-scale dataset for criteria 6 and 7
    const std::string data = fresh_dir("accept_full_data");
    std::string out;
    if (run_cli("gen-data --n 2200 --size 64 --seed 1 --out " + data, &out) != 0) {
      std::cout << "criterion 6: FAIL - dataset generation failed\n" << out;
      std::cout << "criterion 7: FAIL - dataset generation failed\n";
      ok = false;
    } else {
      ok &= criterion6(data);
      ok &= criterion7(data);
    }
    fs::remove_all(data);
    fs::remove_all(fresh_dir("accept_c6_run"));
    fs::remove_all(fresh_dir("accept_c7_ablation"));
  }
  std::cout << (ok ? "acceptance: ALL PASS\n" : "acceptance: FAILURES\n");
  return ok ? 0 : 1;
}
