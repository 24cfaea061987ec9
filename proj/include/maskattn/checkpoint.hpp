#pragma once

// Checkpoint directory format: manifest.json (configs, epoch, optimizer step)
// plus one .tns file per parameter and per optimizer moment.

#include <string>

#include "maskattn/model.hpp"
#include "maskattn/optimizer.hpp"

namespace maskattn::ckpt {

void save(const std::string& dir, model::ModelWeights<float>& weights,
          const opt::OptimizerState<float>* state, int64_t epoch, uint64_t seed);

struct Loaded {
  model::ModelWeights<float> weights;
  opt::OptimizerState<float> state;  // empty when the checkpoint has no optimizer
  bool has_optimizer = false;
  int64_t epoch = 0;
  uint64_t seed = 0;
};

Loaded load(const std::string& dir);

}  // namespace maskattn::ckpt
