// maskattn: one CLI for dataset generation, training, evaluation, inference,
// long-range analysis, and the lambda-sweep / attention-placement harnesses.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "maskattn/checkpoint.hpp"
#include "maskattn/dataset.hpp"
#include "maskattn/image_io.hpp"
#include "maskattn/kernels.hpp"
#include "maskattn/longrange.hpp"
#include "maskattn/tns_io.hpp"
#include "maskattn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace maskattn;

namespace {

std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Written into every output directory before work starts.
void write_manifest(const std::string& dir, const std::string& command, const json& config,
                    uint64_t seed) {
  fs::create_directories(dir);
  json m;
  m["command"] = command;
  m["config"] = config;
  m["seed"] = seed;
  m["backend"] = kernels::backend_name();
  m["start_time"] = iso_now();
  std::ofstream f(dir + "/run_manifest.json");
  f << m.dump(2) << "\n";
  if (!f) throw std::runtime_error(dir + "/run_manifest.json: write failed");
}

void finish_manifest(const std::string& dir) {
  std::ifstream in(dir + "/run_manifest.json");
  json m = json::parse(in);
  in.close();
  m["end_time"] = iso_now();
  std::ofstream f(dir + "/run_manifest.json");
  f << m.dump(2) << "\n";
}

std::vector<double> parse_grid(const std::string& spec) {
  // "lo:hi:step" inclusive grid, or a comma-separated list
  std::vector<double> grid;
  if (spec.find(':') != std::string::npos) {
    double lo, hi, step;
    char c1, c2;
    std::istringstream is(spec);
    if (!(is >> lo >> c1 >> hi >> c2 >> step) || c1 != ':' || c2 != ':' || step <= 0)
      throw CLI::ValidationError("--grid", "expected lo:hi:step");
    for (double v = lo; v <= hi + 1e-9; v += step) grid.push_back(v);
  } else {
    std::istringstream is(spec);
    std::string tok;
    while (std::getline(is, tok, ',')) grid.push_back(std::stod(tok));
  }
  if (grid.empty()) throw CLI::ValidationError("--grid", "empty grid");
  return grid;
}

struct TrainFlags {
  std::string data, out, config_file;
  std::string preset = "desk";
  std::string attention = "all";
  train::TrainConfig tcfg;
  loss::LossConfig lcfg;
  bool resume = false;
  bool capture_features = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--data", f.data, "dataset directory")->required();
  cmd->add_option("--out", f.out, "output directory")->required();
  cmd->add_option("--config", f.config_file, "JSON config file (flags override it)");
  cmd->add_option("--epochs", f.tcfg.epochs, "training epochs")->check(CLI::PositiveNumber);
  cmd->add_option("--batch-size", f.tcfg.batch_size, "minibatch size")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", f.tcfg.seed, "RNG seed");
  cmd->add_option("--lr", f.tcfg.optim.lr, "learning rate")->check(CLI::PositiveNumber);
  cmd->add_option("--weight-decay", f.tcfg.optim.weight_decay, "decoupled weight decay");
  cmd->add_option("--lambda", f.lcfg.lambda, "contrastive loss weight");
  cmd->add_option("--tau", f.lcfg.tau, "contrastive temperature")->check(CLI::PositiveNumber);
  cmd->add_option("--data-fraction", f.tcfg.data_fraction, "fraction of the train split to use")
      ->check(CLI::Range(1e-9, 1.0));
  cmd->add_option("--attention", f.attention, "attention placement")
      ->check(CLI::IsMember({"all", "encoder", "decoder", "none"}));
  cmd->add_option("--preset", f.preset, "model size preset")
      ->check(CLI::IsMember({"desk", "full"}));
  cmd->add_flag("--no-augment", "disable augmentation");
  cmd->add_flag("--resume", f.resume, "resume from the checkpoint in --out");
  cmd->add_flag("--capture-features", f.capture_features,
                "dump attention feature maps after training");
}

// JSON config file values apply only where the flag was not given.
void apply_config_file(const CLI::App* cmd, TrainFlags& f) {
  if (f.config_file.empty()) return;
  std::ifstream in(f.config_file);
  if (!in) throw std::runtime_error(f.config_file + ": cannot open");
  json j = json::parse(in);
  auto missing = [&](const char* flag) { return cmd->count(flag) == 0; };
  if (j.contains("epochs") && missing("--epochs")) f.tcfg.epochs = j["epochs"].get<int64_t>();
  if (j.contains("batch_size") && missing("--batch-size")) f.tcfg.batch_size = j["batch_size"].get<int64_t>();
  if (j.contains("seed") && missing("--seed")) f.tcfg.seed = j["seed"].get<uint64_t>();
  if (j.contains("lr") && missing("--lr")) f.tcfg.optim.lr = j["lr"].get<double>();
  if (j.contains("weight_decay") && missing("--weight-decay")) f.tcfg.optim.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("lambda") && missing("--lambda")) f.lcfg.lambda = j["lambda"].get<double>();
  if (j.contains("tau") && missing("--tau")) f.lcfg.tau = j["tau"].get<double>();
  if (j.contains("data_fraction") && missing("--data-fraction")) f.tcfg.data_fraction = j["data_fraction"].get<double>();
  if (j.contains("attention") && missing("--attention")) f.attention = j["attention"].get<std::string>();
  if (j.contains("preset") && missing("--preset")) f.preset = j["preset"].get<std::string>();
}

model::ModelConfig resolve_model(const TrainFlags& f, const std::string& data_dir) {
  const data::DatasetMeta meta = data::load_meta(data_dir);
  model::ModelConfig mc = f.preset == "full"
                              ? model::ModelConfig::full_preset(int64_t(meta.classes.size()))
                              : model::ModelConfig::desk_preset(int64_t(meta.classes.size()));
  mc.input_size = meta.cfg.size;
  mc.placement = model::placement_from_name(f.attention);
  return mc;
}

json train_config_json(const TrainFlags& f) {
  return json{{"data", f.data},          {"epochs", f.tcfg.epochs},
              {"batch_size", f.tcfg.batch_size}, {"lr", f.tcfg.optim.lr},
              {"weight_decay", f.tcfg.optim.weight_decay}, {"lambda", f.lcfg.lambda},
              {"tau", f.lcfg.tau},       {"data_fraction", f.tcfg.data_fraction},
              {"attention", f.attention}, {"preset", f.preset},
              {"augment", f.tcfg.augment}};
}

void dump_features(const model::ModelWeights<float>& weights, const std::string& data_dir,
                   const std::string& out_dir, int64_t max_images) {
  const data::DatasetMeta meta = data::load_meta(data_dir);
  fs::create_directories(out_dir);
  std::vector<std::string> hooks;
  for (int slot = 0; slot < 7; ++slot)
    if (model::attention_present(weights.cfg, slot)) hooks.push_back("att" + std::to_string(slot + 1));
  if (hooks.empty()) throw std::runtime_error("capture-features: this model has no attention modules");
  const int64_t n = std::min<int64_t>(max_images, int64_t(meta.val_ids.size()));
  for (int64_t i = 0; i < n; ++i) {
    const int64_t id = meta.val_ids[size_t(i)];
    data::SegSample s = data::load_sample(data_dir, id);
    if (s.h != weights.cfg.input_size || s.w != weights.cfg.input_size)
      s = data::resize_sample(s, weights.cfg.input_size, weights.cfg.input_size);
    Tensor<float> image(Shape{1, 3, weights.cfg.input_size, weights.cfg.input_size},
                        std::vector<float>(s.image.begin(), s.image.end()));
    auto caps = model::capture_features(weights, image, hooks);
    for (auto& [hook, cap] : caps) {
      const Shape& sh = cap.first;  // [1,C,H,W]
      tns::write(out_dir + "/" + hook + "_" + std::to_string(id) + ".tns",
                 tns::from_f32({uint32_t(sh[1]), uint32_t(sh[2]), uint32_t(sh[3])},
                               cap.second.data()));
    }
  }
}

json eval_to_json(const train::EvalReport& rep) {
  json out;
  out["mIoU"] = rep.miou;
  out["per_class_iou"] = json::array();
  for (double v : rep.per_class_iou)
    out["per_class_iou"].push_back(std::isnan(v) ? json(nullptr) : json(v));
  out["AP"] = json::object();
  for (const auto& [t, ap] : rep.ap) {
    std::ostringstream k;
    k << t;
    out["AP"][k.str()] = ap ? json(*ap) : json(nullptr);
  }
  out["PQ"] = rep.pq ? json(*rep.pq) : json(nullptr);
  out["SQ"] = rep.sq ? json(*rep.sq) : json(nullptr);
  out["RQ"] = rep.rq ? json(*rep.rq) : json(nullptr);
  return out;
}

std::string checkpoint_dir(const std::string& path) {
  // accept either a run directory or the checkpoint directory itself
  if (fs::exists(path + "/manifest.json")) return path;
  if (fs::exists(path + "/checkpoint/manifest.json")) return path + "/checkpoint";
  throw std::runtime_error(path + ": no checkpoint manifest found");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MaskAttn-UNet segmentation toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
  data::GenConfig gcfg;
  uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--n", gcfg.n_images, "number of images")->check(CLI::Range(int64_t(2), int64_t(1) << 40));
  gen->add_option("--size", gcfg.size, "image side length (divisible by 16)")->check(CLI::PositiveNumber);
  gen->add_option("--max-shapes", gcfg.max_shapes, "max shapes per image")->check(CLI::PositiveNumber);
  gen->add_option("--noise", gcfg.noise, "Gaussian pixel noise sigma");
  gen->add_option("--val-fraction", gcfg.val_fraction, "validation split fraction");
  gen->add_option("--seed", gen_seed, "RNG seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  TrainFlags tf;
  add_train_flags(tr, tf);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_split = "val", ev_out;
  double ev_theta = 0.7;
  int64_t ev_min_size = 16;
  ev->add_option("--checkpoint", ev_ckpt, "run or checkpoint directory")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "dataset split")->check(CLI::IsMember({"train", "val"}));
  ev->add_option("--out", ev_out, "report output directory");
  ev->add_option("--theta", ev_theta, "instance clustering similarity threshold");
  ev->add_option("--min-size", ev_min_size, "minimum instance size in pixels");

  // infer
  auto* in = app.add_subcommand("infer", "run inference and write label maps + previews");
  std::string in_ckpt, in_data, in_out;
  std::vector<int64_t> in_ids;
  double in_theta = 0.7;
  int64_t in_min_size = 16;
  in->add_option("--checkpoint", in_ckpt, "run or checkpoint directory")->required();
  in->add_option("--data", in_data, "dataset directory")->required();
  in->add_option("--ids", in_ids, "sample ids (default: full val split)");
  in->add_option("--out", in_out, "output directory")->required();
  in->add_option("--theta", in_theta, "instance clustering similarity threshold");
  in->add_option("--min-size", in_min_size, "minimum instance size in pixels");

  // analyze
  auto* an = app.add_subcommand("analyze", "long-range analysis of feature dumps");
  std::string an_dir, an_out, an_mode = "raster-per-channel";
  int64_t an_max_lag = 100;
  an->add_option("--dir", an_dir, "directory of .tns feature dumps")->required();
  an->add_option("--out", an_out, "output directory")->required();
  an->add_option("--mode", an_mode, "series extraction mode")
      ->check(CLI::IsMember({"raster-per-channel", "channel-mean-raster"}));
  an->add_option("--max-lag", an_max_lag, "autocorrelation max lag")->check(CLI::PositiveNumber);

  // sweep-lambda
  auto* sw = app.add_subcommand("sweep-lambda", "short training run per lambda");
  TrainFlags sf;
  sf.tcfg.epochs = 2;
  std::string sw_grid = "0.1:2.1:0.2";
  add_train_flags(sw, sf);
  sw->add_option("--grid", sw_grid, "lambda grid lo:hi:step or comma list");

  // ablate
  auto* ab = app.add_subcommand("ablate", "attention placement ablation");
  TrainFlags af;
  std::string ab_placements = "all,encoder,decoder,none";
  add_train_flags(ab, af);
  ab->add_option("--placements", ab_placements, "comma-separated placements");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) {
      write_manifest(gen_out, "gen-data",
                     json{{"n", gcfg.n_images}, {"size", gcfg.size},
                          {"max_shapes", gcfg.max_shapes}, {"noise", gcfg.noise},
                          {"val_fraction", gcfg.val_fraction}},
                     gen_seed);
      data::generate_shapes_dataset(gen_out, gcfg, gen_seed);
      finish_manifest(gen_out);
      std::cout << "wrote " << gcfg.n_images << " samples to " << gen_out << "\n";
    } else if (*tr) {
      apply_config_file(tr, tf);
      tf.tcfg.augment = tr->count("--no-augment") == 0;
      write_manifest(tf.out, "train", train_config_json(tf), tf.tcfg.seed);
      const model::ModelConfig mc = resolve_model(tf, tf.data);
      const train::TrainResult r = train::train(mc, tf.tcfg, tf.lcfg, tf.data, tf.out, tf.resume);
      if (tf.capture_features) {
        ckpt::Loaded loaded = ckpt::load(tf.out + "/checkpoint");
        dump_features(loaded.weights, tf.data, tf.out + "/features", 4);
      }
      finish_manifest(tf.out);
      std::cout << json{{"steps", r.steps}, {"final_L_seg", r.final_seg},
                        {"final_L_CE", r.final_ce}, {"final_L_IC", r.final_ic}}
                       .dump()
                << "\n";
    } else if (*ev) {
      ckpt::Loaded loaded = ckpt::load(checkpoint_dir(ev_ckpt));
      const data::DatasetMeta meta = data::load_meta(ev_data);
      const auto& ids = ev_split == "train" ? meta.train_ids : meta.val_ids;
      const train::EvalReport rep =
          train::evaluate(loaded.weights, ev_data, ids, {ev_theta, ev_min_size});
      const json out = eval_to_json(rep);
      if (!ev_out.empty()) {
        write_manifest(ev_out, "eval",
                       json{{"checkpoint", ev_ckpt}, {"data", ev_data}, {"split", ev_split}},
                       loaded.seed);
        std::ofstream f(ev_out + "/report.json");
        f << out.dump(2) << "\n";
        std::ofstream csv(ev_out + "/report.csv");
        csv << "miou,ap50,ap75,pq,sq,rq\n" << rep.miou << ",";
        if (rep.ap.count(0.5) && rep.ap.at(0.5)) csv << *rep.ap.at(0.5);
        csv << ",";
        if (rep.ap.count(0.75) && rep.ap.at(0.75)) csv << *rep.ap.at(0.75);
        csv << ",";
        if (rep.pq) csv << *rep.pq;
        csv << ",";
        if (rep.sq) csv << *rep.sq;
        csv << ",";
        if (rep.rq) csv << *rep.rq;
        csv << "\n";
        finish_manifest(ev_out);
      }
      std::cout << out.dump(2) << "\n";
    } else if (*in) {
      ckpt::Loaded loaded = ckpt::load(checkpoint_dir(in_ckpt));
      const data::DatasetMeta meta = data::load_meta(in_data);
      if (in_ids.empty()) in_ids = meta.val_ids;
      write_manifest(in_out, "infer",
                     json{{"checkpoint", in_ckpt}, {"data", in_data}, {"ids", in_ids}},
                     loaded.seed);
      const model::ModelConfig& mc = loaded.weights.cfg;
      const int64_t hw = mc.input_size * mc.input_size;
      for (int64_t id : in_ids) {
        data::SegSample s = data::load_sample(in_data, id);
        if (s.h != mc.input_size || s.w != mc.input_size)
          s = data::resize_sample(s, mc.input_size, mc.input_size);
        Tensor<float> image(Shape{1, 3, mc.input_size, mc.input_size},
                            std::vector<float>(s.image.begin(), s.image.end()));
        model::ForwardOutput<float> out = model::forward(loaded.weights, image);
        const auto sem = infer::semantic_predict(out.sem_logits.data(), mc.num_classes, hw);
        std::vector<bool> thing(size_t(hw), false);
        for (int64_t p = 0; p < hw; ++p)
          thing[size_t(p)] = sem[size_t(p)] < meta.is_thing.size() && meta.is_thing[sem[size_t(p)]];
        const auto inst = infer::cluster_instances(out.embeddings.data(), mc.embed_dim, hw, thing,
                                                   {in_theta, in_min_size});
        const PanopticMap pan =
            infer::panoptic_fuse(sem, inst, mc.input_size, mc.input_size, meta.is_thing);
        const std::string base = in_out + "/" + std::to_string(id);
        tns::write(base + "_semantic.tns",
                   tns::from_u16({uint32_t(mc.input_size), uint32_t(mc.input_size)},
                                 pan.semantic.data()));
        tns::write(base + "_instance.tns",
                   tns::from_u16({uint32_t(mc.input_size), uint32_t(mc.input_size)},
                                 pan.instance.data()));
        json segs = json::array();
        for (const SegmentEntry& e : pan.segments)
          segs.push_back({{"id", e.id}, {"class", e.cls}, {"pixels", e.pixels}});
        std::ofstream jf(base + "_segments.json");
        jf << segs.dump(2) << "\n";
        img::write_png_rgb8(base + "_image.png", mc.input_size, mc.input_size,
                            img::planar_to_rgb8(image.data(), mc.input_size, mc.input_size));
        img::write_png_rgb8(base + "_semantic.png", mc.input_size, mc.input_size,
                            img::colorize_labels(pan.semantic));
        img::write_png_rgb8(base + "_instance.png", mc.input_size, mc.input_size,
                            img::colorize_labels(pan.instance));
      }
      finish_manifest(in_out);
      std::cout << "wrote " << in_ids.size() << " predictions to " << in_out << "\n";
    } else if (*an) {
      write_manifest(an_out, "analyze",
                     json{{"dir", an_dir}, {"mode", an_mode}, {"max_lag", an_max_lag}}, 0);
      const auto rows = lr::analyze_dump_dir(
          an_dir, an_out,
          an_mode == "channel-mean-raster" ? lr::SeriesMode::channel_mean_raster
                                           : lr::SeriesMode::raster_per_channel,
          an_max_lag);
      finish_manifest(an_out);
      for (const auto& r : rows)
        std::cout << r.module << " hurst=" << r.hurst_mean << " dfa=" << r.dfa_mean
                  << " beta=" << r.beta_mean << " n=" << r.n_series << "\n";
    } else if (*sw) {
      apply_config_file(sw, sf);
      sf.tcfg.augment = sw->count("--no-augment") == 0;
      write_manifest(sf.out, "sweep-lambda", train_config_json(sf), sf.tcfg.seed);
      const model::ModelConfig mc = resolve_model(sf, sf.data);
      const auto rows =
          train::sweep_lambda(mc, sf.tcfg, sf.lcfg, parse_grid(sw_grid), sf.data, sf.out);
      finish_manifest(sf.out);
      for (const auto& r : rows)
        std::cout << "lambda=" << r.lambda << " L_seg=" << r.l_seg << " L_CE=" << r.l_ce
                  << " L_IC=" << r.l_ic << "\n";
    } else if (*ab) {
      apply_config_file(ab, af);
      af.tcfg.augment = ab->count("--no-augment") == 0;
      write_manifest(af.out, "ablate", train_config_json(af), af.tcfg.seed);
      std::vector<model::AttentionPlacement> placements;
      std::istringstream is(ab_placements);
      std::string tok;
      while (std::getline(is, tok, ',')) placements.push_back(model::placement_from_name(tok));
      const model::ModelConfig mc = resolve_model(af, af.data);
      const auto rows = train::run_ablation(mc, af.tcfg, af.lcfg, placements, af.data, af.out);
      finish_manifest(af.out);
      for (const auto& r : rows) {
        std::cout << r.placement << " miou=" << r.miou;
        if (r.pq) std::cout << " pq=" << *r.pq;
        std::cout << " attention_params=" << r.attention_params << "\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
