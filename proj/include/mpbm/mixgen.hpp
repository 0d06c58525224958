#pragma once

#include "mpbm/autodiff.hpp"
#include "mpbm/correlation.hpp"
#include "mpbm/data.hpp"
#include "mpbm/models.hpp"
#include "mpbm/rng.hpp"
#include "mpbm/tensor.hpp"

namespace mpbm {

// One synthesized feature-space sample.
struct MixupSample {
  Tensor z_mix;  // 1 x d
  Tensor y_mix;  // 1 x K, on the simplex
};

// g_phi: per-feature attention over a base batch, steered by a query instance.
// Parameters are the three d x d projections W^Q, W^K, W^V.
class MixupGenerator {
 public:
  MixupGenerator(size_t d, Rng& init);

  struct Bound {
    Var wq, wk, wv;
  };
  Bound bind(Tape& tape, bool trainable) const;

  struct Mix {
    Var z_mix;   // 1 x d
    Var y_mix;   // 1 x K
    Var scores;  // d x N_b attention rows
  };

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  size_t dim() const { return d_; }

 private:
  size_t d_;
  ParamSet params_;
};

// Row j = softmax(q_j K_j^T / sqrt(d)) with q_j, K_j built from the
// correlation-scaled query/keys. zq: 1 x d, zb: N_b x d, c: d x d constant.
Var attention(Tape& tape, Var zq, Var zb, Var c, const MixupGenerator::Bound& p);

// Full synthesis: z_mix[j] = a_j . v_j with V = Z_b W^V, and
// y_mix = softmax(mean_j a_j) Y_b (the outer softmax togglable).
MixupGenerator::Mix synthesize(Tape& tape, Var zq, Var zb, Var yb, Var c,
                               const MixupGenerator::Bound& p, bool label_softmax = true);

// Extract query and base features under the stop-gradient extractor, then
// synthesize. x_q: 1 x (input shape); batch: N_b inputs with one-hot labels.
MixupGenerator::Mix generate_vars(Tape& tape, const Tensor& x_q, const LabeledBatch& batch,
                                  const FeatureExtractor& f, const CorrelationMatrix& c,
                                  const MixupGenerator::Bound& p, bool label_softmax = true);

// Value-only variant of generate_vars.
MixupSample generate(const Tensor& x_q, const LabeledBatch& batch, const FeatureExtractor& f,
                     const CorrelationMatrix& c, const MixupGenerator& g,
                     bool label_softmax = true);

}  // namespace mpbm
