#pragma once

#include <optional>
#include <vector>

#include "mpbm/models.hpp"
#include "mpbm/rng.hpp"
#include "mpbm/tensor.hpp"

namespace mpbm {

// Stochastic gradient Langevin dynamics settings for adversarial queries.
struct SgldConfig {
  int steps = 5;       // T
  double eta = 0.01;   // constant step size
  std::optional<double> noise_scale_override;  // default sqrt(2*eta)
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;
};

// Ascend the model's cross-entropy from a seed input for cfg.steps steps,
// adding Gaussian noise of scale sqrt(2*eta) and clamping to the valid input
// range after each step. The model is never mutated. A non-finite gradient
// aborts the chain: the last finite iterate is returned and *aborted is set.
Tensor sgld_query(const Tensor& x_seed, const Tensor& y_onehot, const FeatureExtractor& f,
                  const Classifier& h, const SgldConfig& cfg, Rng& rng, bool* aborted = nullptr);

// All m chains advanced together (one batched gradient per step); chain i
// draws its noise from chain_rngs[i], so results match m independent chains.
Tensor sgld_query_batch(const Tensor& x_seeds, const Tensor& y_onehots,
                        const FeatureExtractor& f, const Classifier& h, const SgldConfig& cfg,
                        std::vector<Rng>& chain_rngs, bool* aborted = nullptr);

}  // namespace mpbm
