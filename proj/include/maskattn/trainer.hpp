#pragma once

// Training loop (AdamW, seeded shuffling, augmentation, JSON-lines logging,
// checkpointing), held-out evaluation, and the lambda-sweep / attention-
// placement ablation harnesses.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maskattn/dataset.hpp"
#include "maskattn/inference.hpp"
#include "maskattn/loss.hpp"
#include "maskattn/model.hpp"
#include "maskattn/optimizer.hpp"

namespace maskattn::train {

struct TrainConfig {
  opt::AdamWConfig optim;
  double grad_clip = 10.0;     // global-norm safety net
  int64_t epochs = 40;
  int64_t batch_size = 8;
  uint64_t seed = 0;
  double data_fraction = 1.0;
  int64_t checkpoint_every = 10;
  bool augment = true;

  void validate() const {
    optim.validate();
    if (epochs < 1) throw std::runtime_error("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::runtime_error("TrainConfig: batch_size must be >= 1");
    if (!(data_fraction > 0 && data_fraction <= 1))
      throw std::runtime_error("TrainConfig: data_fraction must be in (0, 1]");
  }
};

struct TrainResult {
  double final_ce = 0, final_ic = 0, final_seg = 0;
  int64_t steps = 0;
  std::vector<double> epoch_seg;  // mean L_seg per epoch
};

// Trains on data_dir's train split, writing train_log.jsonl and
// checkpoint/ under out_dir. Resumes from out_dir/checkpoint if resume=true.
TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const loss::LossConfig& lcfg, const std::string& data_dir,
                  const std::string& out_dir, bool resume = false);

struct EvalReport {
  double miou = 0;
  std::vector<double> per_class_iou;
  std::map<double, std::optional<double>> ap;  // IoU threshold -> AP
  std::optional<double> pq, sq, rq;
};

EvalReport evaluate(const model::ModelWeights<float>& weights, const std::string& data_dir,
                    const std::vector<int64_t>& ids, const infer::ClusterConfig& ccfg);

struct SweepRow {
  double lambda = 0;
  double l_ce = 0, l_ic = 0, l_seg = 0;
};

// One short run per lambda from identical seeds; emits sweep.csv in out_dir.
std::vector<SweepRow> sweep_lambda(const model::ModelConfig& mcfg, TrainConfig tcfg,
                                   loss::LossConfig lcfg, const std::vector<double>& grid,
                                   const std::string& data_dir, const std::string& out_dir);

struct AblationRow {
  std::string placement;
  double miou = 0;
  std::optional<double> ap50, pq;
  int64_t attention_params = 0;
};

// Trains each placement with identical seeds/data; emits ablation.csv.
std::vector<AblationRow> run_ablation(const model::ModelConfig& base, const TrainConfig& tcfg,
                                      const loss::LossConfig& lcfg,
                                      const std::vector<model::AttentionPlacement>& placements,
                                      const std::string& data_dir, const std::string& out_dir);

}  // namespace maskattn::train
