#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

namespace mpbm {

// Full run configuration: training hyper-parameters plus experiment plumbing.
// outer_iters < 0 resolves to epochs; finetune_iters == 0 resolves to one pass
// over the training set.
struct RunConfig {
  // mixup / adversarial weights
  double lambda_adv = 0.5;
  double lambda_mix = 0.5;
  // generator batch and query chain
  size_t n_b = 5;
  int t_sgld = 5;
  double sgld_eta = 0.01;
  // loop bounds
  int outer_iters = -1;
  int generator_iters = 20;
  int finetune_iters = 0;
  size_t queries_per_outer = 32;
  // supervised optimization
  size_t batch_size = 32;
  int epochs = 50;
  double lr = 1e-4;
  double lr_decay_factor = 0.1;
  double gen_lr = 1e-3;
  double disc_lr = 1e-3;
  uint64_t seed = 1;
  bool label_softmax = true;
  // models
  std::string arch = "lenet-small";
  size_t feature_dim = 84;
  size_t hidden = 32;
  // experiment plumbing
  std::string manifest;
  std::string out_dir;
  std::string variant = "full";  // full|no_mix_tr|no_adv|no_mix_gen|no_sgld|erm
  std::string pretrain_checkpoint;
  int eval_every = 1;
  int checkpoint_every = 0;  // 0: only final
};

// Parse a config JSON file. Unknown keys are an error; missing required keys
// ("manifest") are reported by name.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

// Apply one "key=value" override; unknown key or bad value throws.
void apply_override(RunConfig& cfg, const std::string& kv);

// Normalize variant shorthands (no_adv -> lambda_adv 0, no_mix_tr ->
// lambda_mix 0) and check invariants; throws on invalid settings.
void resolve_config(RunConfig& cfg);

// The exact configuration as JSON (stable key order).
nlohmann::ordered_json config_to_json(const RunConfig& cfg);

}  // namespace mpbm
