#include "maskattn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "maskattn/checkpoint.hpp"
#include "maskattn/metrics.hpp"
#include "maskattn/tns_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace maskattn {

namespace ckpt {

namespace {

json config_to_json(const model::ModelConfig& c) {
  return json{{"in_channels", c.in_channels},
              {"num_classes", c.num_classes},
              {"embed_dim", c.embed_dim},
              {"stage_channels", c.stage_channels},
              {"heads", c.heads},
              {"input_size", c.input_size},
              {"max_attention_tokens", c.max_attention_tokens},
              {"placement", model::placement_name(c.placement)},
              {"mask_mode", c.mask_mode == attn::MaskMode::dynamic_key_gate ? "dynamic-key-gate"
                            : c.mask_mode == attn::MaskMode::none           ? "none"
                                                                            : "hard-topk"},
              {"epsilon_mask", c.epsilon_mask}};
}

model::ModelConfig config_from_json(const json& j) {
  model::ModelConfig c;
  c.in_channels = j.at("in_channels").get<int64_t>();
  c.num_classes = j.at("num_classes").get<int64_t>();
  c.embed_dim = j.at("embed_dim").get<int64_t>();
  const auto sc = j.at("stage_channels").get<std::vector<int64_t>>();
  std::copy(sc.begin(), sc.end(), c.stage_channels.begin());
  c.heads = j.at("heads").get<int64_t>();
  c.input_size = j.at("input_size").get<int64_t>();
  c.max_attention_tokens = j.at("max_attention_tokens").get<int64_t>();
  c.placement = model::placement_from_name(j.at("placement").get<std::string>());
  const std::string mm = j.at("mask_mode").get<std::string>();
  c.mask_mode = mm == "none"      ? attn::MaskMode::none
                : mm == "hard-topk" ? attn::MaskMode::hard_topk
                                    : attn::MaskMode::dynamic_key_gate;
  c.epsilon_mask = j.at("epsilon_mask").get<double>();
  return c;
}

std::string safe_name(const std::string& name) {
  std::string s = name;
  std::replace(s.begin(), s.end(), '.', '_');
  return s;
}

void write_param(const std::string& path, const Tensor<float>& t) {
  std::vector<uint32_t> dims(t.shape().begin(), t.shape().end());
  tns::write(path, tns::from_f32(dims, t.data()));
}

void write_vec(const std::string& path, const std::vector<float>& v) {
  tns::write(path, tns::from_f32({uint32_t(v.size())}, v.data()));
}

}  // namespace

void save(const std::string& dir, model::ModelWeights<float>& weights,
          const opt::OptimizerState<float>* state, int64_t epoch, uint64_t seed) {
  fs::create_directories(dir + "/params");
  if (state) fs::create_directories(dir + "/optimizer");
  json manifest;
  manifest["model"] = config_to_json(weights.cfg);
  manifest["epoch"] = epoch;
  manifest["seed"] = seed;
  manifest["optimizer_step"] = state ? state->t : 0;
  manifest["has_optimizer"] = state != nullptr;
  json params = json::array();
  size_t idx = 0;
  weights.for_each_param([&](const std::string& name, Tensor<float>& t) {
    params.push_back({{"name", name}, {"shape", t.shape()}});
    write_param(dir + "/params/" + safe_name(name) + ".tns", t);
    if (state) {
      write_vec(dir + "/optimizer/" + safe_name(name) + ".m.tns", state->per_param[idx].m);
      write_vec(dir + "/optimizer/" + safe_name(name) + ".v.tns", state->per_param[idx].v);
    }
    ++idx;
  });
  manifest["params"] = params;
  std::ofstream f(dir + "/manifest.json");
  f << manifest.dump(2) << "\n";
  if (!f) throw std::runtime_error(dir + "/manifest.json: write failed");
}

Loaded load(const std::string& dir) {
  std::ifstream f(dir + "/manifest.json");
  if (!f) throw std::runtime_error(dir + "/manifest.json: cannot open");
  json manifest = json::parse(f);
  Loaded out;
  const model::ModelConfig cfg = config_from_json(manifest.at("model"));
  out.weights = model::build_model<float>(cfg, 0);
  out.epoch = manifest.at("epoch").get<int64_t>();
  out.seed = manifest.at("seed").get<uint64_t>();
  out.has_optimizer = manifest.at("has_optimizer").get<bool>();
  out.state.t = manifest.at("optimizer_step").get<int64_t>();
  out.weights.for_each_param([&](const std::string& name, Tensor<float>& t) {
    tns::TnsData d = tns::read(dir + "/params/" + safe_name(name) + ".tns");
    if (int64_t(d.count()) != t.size())
      throw std::runtime_error(dir + ": parameter " + name + " has unexpected size");
    std::copy(d.as_f32(), d.as_f32() + d.count(), t.mutable_data());
    if (out.has_optimizer) {
      tns::TnsData m = tns::read(dir + "/optimizer/" + safe_name(name) + ".m.tns");
      tns::TnsData v = tns::read(dir + "/optimizer/" + safe_name(name) + ".v.tns");
      opt::ParamState<float> st;
      st.m.assign(m.as_f32(), m.as_f32() + m.count());
      st.v.assign(v.as_f32(), v.as_f32() + v.count());
      out.state.per_param.push_back(std::move(st));
    }
  });
  return out;
}

}  // namespace ckpt

namespace train {

namespace {

struct ParamRefs {
  std::vector<std::string> names;
  std::vector<Tensor<float>*> params;
};

ParamRefs collect(model::ModelWeights<float>& w) {
  ParamRefs r;
  w.for_each_param([&](const std::string& name, Tensor<float>& t) {
    r.names.push_back(name);
    r.params.push_back(&t);
  });
  return r;
}

std::vector<int64_t> select_subset(const std::vector<int64_t>& ids, double fraction, uint64_t seed) {
  std::vector<int64_t> v = ids;
  Rng rng = Rng(seed).substream(0xF00D);
  for (size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[size_t(rng.uniform_index(uint64_t(i)))]);
  const int64_t k = std::max<int64_t>(1, int64_t(std::ceil(fraction * double(v.size()))));
  v.resize(size_t(k));
  return v;
}

}  // namespace

TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const loss::LossConfig& lcfg, const std::string& data_dir,
                  const std::string& out_dir, bool resume) {
  mcfg.validate();
  tcfg.validate();
  lcfg.validate();
  fs::create_directories(out_dir);

  const data::DatasetMeta meta = data::load_meta(data_dir);
  std::vector<int64_t> subset = select_subset(meta.train_ids, tcfg.data_fraction, tcfg.seed);
  if (subset.empty()) throw std::runtime_error("train: dataset empty after subsetting");

  // load (and if needed resize) the training subset once
  std::vector<data::SegSample> cache;
  cache.reserve(subset.size());
  for (int64_t id : subset) {
    data::SegSample s = data::load_sample(data_dir, id);
    if (s.h != mcfg.input_size || s.w != mcfg.input_size)
      s = data::resize_sample(s, mcfg.input_size, mcfg.input_size);
    cache.push_back(std::move(s));
  }

  model::ModelWeights<float> weights;
  opt::OptimizerState<float> state;
  int64_t start_epoch = 0;
  const std::string ckpt_dir = out_dir + "/checkpoint";
  if (resume && fs::exists(ckpt_dir + "/manifest.json")) {
    ckpt::Loaded loaded = ckpt::load(ckpt_dir);
    weights = std::move(loaded.weights);
    state = std::move(loaded.state);
    start_epoch = loaded.epoch;
  } else {
    weights = model::build_model<float>(mcfg, tcfg.seed);
  }
  ParamRefs refs = collect(weights);

  std::ofstream log(out_dir + "/train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error(out_dir + "/train_log.jsonl: cannot open");

  const int64_t n = int64_t(cache.size());
  const int64_t hw = mcfg.input_size * mcfg.input_size;
  Rng base(tcfg.seed);
  TrainResult result;
  result.steps = state.t;

  for (int64_t epoch = start_epoch; epoch < tcfg.epochs; ++epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = base.substream(0xE0000 + uint64_t(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(shuffle_rng.uniform_index(uint64_t(i)))]);

    double epoch_seg = 0;
    int64_t epoch_batches = 0;
    for (int64_t start = 0; start < n; start += tcfg.batch_size) {
      const int64_t bs = std::min(tcfg.batch_size, n - start);
      Tensor<float> images(Shape{bs, 3, mcfg.input_size, mcfg.input_size});
      std::vector<uint16_t> labels(size_t(bs * hw));
      loss::PairSets pairs;
      for (int64_t b = 0; b < bs; ++b) {
        const int64_t idx = order[size_t(start + b)];
        Rng srng = base.substream(uint64_t(epoch) * 0x100000ULL + uint64_t(subset[size_t(idx)]));
        data::SegSample s = tcfg.augment ? data::augment(cache[size_t(idx)], srng)
                                         : cache[size_t(idx)];
        std::copy(s.image.begin(), s.image.end(), images.mutable_data() + b * 3 * hw);
        std::copy(s.semantic.begin(), s.semantic.end(), labels.begin() + b * hw);
        loss::PairSets p = loss::sample_pairs(s.instance, b, lcfg, srng);
        pairs.anchors.insert(pairs.anchors.end(), p.anchors.begin(), p.anchors.end());
      }

      Tape<float> tape;
      model::ModelWeights<float> w = weights;  // cheap copy; storage shared
      std::vector<int> nodes;
      w.for_each_param([&](const std::string&, Tensor<float>& t) {
        t = tape.watch(t);
        nodes.push_back(t.node());
      });
      model::ForwardOutput<float> out = model::forward(w, images);
      Tensor<float> l_ce = loss::cross_entropy(out.sem_logits, labels);
      Tensor<float> l_ic = loss::instance_contrastive(out.embeddings, pairs, lcfg.tau);
      Tensor<float> l_seg = loss::combined_loss(l_ce, l_ic, lcfg.lambda);
      tape.backward(l_seg);

      // global-norm gradient clipping
      double sq = 0;
      std::vector<std::vector<float>*> grads;
      for (int nd : nodes) {
        grads.push_back(&tape.grad_buf(nd));
        for (float g : *grads.back()) sq += double(g) * double(g);
      }
      const double norm = std::sqrt(sq);
      if (norm > tcfg.grad_clip) {
        const float s = float(tcfg.grad_clip / norm);
        for (auto* g : grads)
          for (float& v : *g) v *= s;
      }
      std::vector<const std::vector<float>*> cgrads(grads.begin(), grads.end());
      opt::adamw_step(refs.names, refs.params, cgrads, state, tcfg.optim);

      result.final_ce = double(l_ce.value());
      result.final_ic = double(l_ic.value());
      result.final_seg = double(l_seg.value());
      result.steps = state.t;
      epoch_seg += result.final_seg;
      ++epoch_batches;
      log << json{{"step", state.t},
                  {"L_CE", result.final_ce},
                  {"L_IC", result.final_ic},
                  {"L_seg", result.final_seg},
                  {"lambda", lcfg.lambda},
                  {"tau", lcfg.tau},
                  {"anchors_used", pairs.count()}}
              .dump()
          << "\n";
    }
    result.epoch_seg.push_back(epoch_seg / double(std::max<int64_t>(1, epoch_batches)));
    if ((epoch + 1) % tcfg.checkpoint_every == 0 || epoch + 1 == tcfg.epochs)
      ckpt::save(ckpt_dir, weights, &state, epoch + 1, tcfg.seed);
  }
  log.flush();
  if (start_epoch >= tcfg.epochs)  // resumed past the end: still have a checkpoint
    ckpt::save(ckpt_dir, weights, &state, start_epoch, tcfg.seed);
  return result;
}

EvalReport evaluate(const model::ModelWeights<float>& weights, const std::string& data_dir,
                    const std::vector<int64_t>& ids, const infer::ClusterConfig& ccfg) {
  const model::ModelConfig& cfg = weights.cfg;
  const data::DatasetMeta meta = data::load_meta(data_dir);
  const int64_t hw = cfg.input_size * cfg.input_size;

  std::vector<uint16_t> all_pred, all_gt;
  std::vector<metrics::ScoredInstances> ap_pred;
  std::vector<std::vector<uint16_t>> ap_gt;
  std::map<uint16_t, metrics::PqResult::PerClass> pq_acc;
  bool any_pq = false;

  for (int64_t id : ids) {
    data::SegSample s = data::load_sample(data_dir, id);
    if (s.h != cfg.input_size || s.w != cfg.input_size)
      s = data::resize_sample(s, cfg.input_size, cfg.input_size);
    Tensor<float> image(Shape{1, 3, cfg.input_size, cfg.input_size},
                        std::vector<float>(s.image.begin(), s.image.end()));
    model::ForwardOutput<float> out = model::forward(weights, image);

    const std::vector<uint16_t> sem =
        infer::semantic_predict(out.sem_logits.data(), cfg.num_classes, hw);
    const std::vector<float> conf =
        infer::semantic_confidence(out.sem_logits.data(), cfg.num_classes, hw, sem);
    std::vector<bool> thing_mask(size_t(hw), false);
    for (int64_t p = 0; p < hw; ++p)
      thing_mask[size_t(p)] = sem[size_t(p)] < meta.is_thing.size() && meta.is_thing[sem[size_t(p)]];
    const std::vector<uint16_t> inst =
        infer::cluster_instances(out.embeddings.data(), cfg.embed_dim, hw, thing_mask, ccfg);
    const PanopticMap pred =
        infer::panoptic_fuse(sem, inst, cfg.input_size, cfg.input_size, meta.is_thing);
    const PanopticMap gt =
        infer::panoptic_from_labels(s.semantic, s.instance, cfg.input_size, cfg.input_size);

    all_pred.insert(all_pred.end(), pred.semantic.begin(), pred.semantic.end());
    all_gt.insert(all_gt.end(), s.semantic.begin(), s.semantic.end());
    ap_pred.push_back({pred.instance, infer::segment_scores(pred.instance, conf)});
    ap_gt.push_back(gt.instance);

    auto pq = metrics::panoptic_quality(pred, gt, meta.is_thing);
    if (pq) {
      any_pq = true;
      for (const auto& [cls, pc] : pq->per_class) {
        auto& acc = pq_acc[cls];
        acc.tp += pc.tp;
        acc.fp += pc.fp;
        acc.fn += pc.fn;
        acc.iou_sum += pc.iou_sum;
      }
    }
  }

  EvalReport rep;
  const metrics::MiouResult mi = metrics::miou(all_pred, all_gt, cfg.num_classes);
  rep.miou = mi.miou;
  rep.per_class_iou = mi.per_class;
  for (double t : {0.5, 0.75}) rep.ap[t] = metrics::average_precision(ap_pred, ap_gt, t);
  if (any_pq) {
    double pq_sum = 0, sq_sum = 0, rq_sum = 0;
    for (auto& [cls, pc] : pq_acc) {
      const double denom = double(pc.tp) + 0.5 * double(pc.fp) + 0.5 * double(pc.fn);
      pq_sum += denom > 0 ? pc.iou_sum / denom : 0.0;
      sq_sum += pc.tp > 0 ? pc.iou_sum / double(pc.tp) : 0.0;
      rq_sum += denom > 0 ? double(pc.tp) / denom : 0.0;
    }
    const double nc = double(pq_acc.size());
    rep.pq = pq_sum / nc;
    rep.sq = sq_sum / nc;
    rep.rq = rq_sum / nc;
  }
  return rep;
}

std::vector<SweepRow> sweep_lambda(const model::ModelConfig& mcfg, TrainConfig tcfg,
                                   loss::LossConfig lcfg, const std::vector<double>& grid,
                                   const std::string& data_dir, const std::string& out_dir) {
  if (grid.empty()) throw std::runtime_error("sweep_lambda: empty grid");
  fs::create_directories(out_dir);
  std::vector<SweepRow> rows;
  for (double lam : grid) {
    loss::LossConfig lc = lcfg;
    lc.lambda = lam;
    std::ostringstream dir;
    dir << out_dir << "/lambda_" << lam;
    const TrainResult r = train(mcfg, tcfg, lc, data_dir, dir.str());
    rows.push_back({lam, r.final_ce, r.final_ic, r.final_seg});
  }
  std::ofstream csv(out_dir + "/sweep.csv");
  csv << "lambda,L_CE,L_IC,L_seg\n";
  for (const SweepRow& r : rows)
    csv << r.lambda << "," << r.l_ce << "," << r.l_ic << "," << r.l_seg << "\n";
  if (!csv) throw std::runtime_error(out_dir + "/sweep.csv: write failed");
  return rows;
}

std::vector<AblationRow> run_ablation(const model::ModelConfig& base, const TrainConfig& tcfg,
                                      const loss::LossConfig& lcfg,
                                      const std::vector<model::AttentionPlacement>& placements,
                                      const std::string& data_dir, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const data::DatasetMeta meta = data::load_meta(data_dir);
  std::vector<AblationRow> rows;
  for (model::AttentionPlacement p : placements) {
    model::ModelConfig mc = base;
    mc.placement = p;
    const std::string name = model::placement_name(p);
    const std::string run_dir = out_dir + "/" + name;
    train(mc, tcfg, lcfg, data_dir, run_dir);
    ckpt::Loaded loaded = ckpt::load(run_dir + "/checkpoint");
    const EvalReport rep = evaluate(loaded.weights, data_dir, meta.val_ids, {});
    AblationRow row;
    row.placement = name;
    row.miou = rep.miou;
    row.ap50 = rep.ap.count(0.5) ? rep.ap.at(0.5) : std::nullopt;
    row.pq = rep.pq;
    loaded.weights.for_each_param([&](const std::string& pname, Tensor<float>& t) {
      if (pname.rfind("att", 0) == 0) row.attention_params += t.size();
    });
    rows.push_back(std::move(row));
  }
  std::ofstream csv(out_dir + "/ablation.csv");
  csv << "placement,miou,ap50,pq,attention_params\n";
  for (const AblationRow& r : rows) {
    csv << r.placement << "," << r.miou << ",";
    if (r.ap50) csv << *r.ap50;
    csv << ",";
    if (r.pq) csv << *r.pq;
    csv << "," << r.attention_params << "\n";
  }
  if (!csv) throw std::runtime_error(out_dir + "/ablation.csv: write failed");
  return rows;
}

}  // namespace train
}  // namespace maskattn
