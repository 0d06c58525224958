#pragma once

#include <map>
#include <string>
#include <vector>

#include "mpbm/autodiff.hpp"
#include "mpbm/rng.hpp"
#include "mpbm/tensor.hpp"

namespace mpbm {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Ordered, named parameter collection owned by a model.
struct ParamSet {
  std::vector<NamedTensor> items;
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  size_t count() const;  // total scalar parameters
};

// Tape leaves aligned one-to-one with a ParamSet.
struct BoundParams {
  std::vector<Var> vars;
};

BoundParams bind_params(Tape& tape, const ParamSet& params, bool trainable);

// Architecture descriptor; serialized into checkpoints and configs.
struct ModelSpec {
  std::string arch = "mlp";         // "lenet-small" | "mlp"
  std::vector<size_t> input_shape;  // {C,H,W} for lenet-small, {in_dim} for mlp
  size_t feature_dim = 84;          // d
  size_t hidden = 32;               // mlp hidden width
  size_t num_classes = 10;          // K

  bool operator==(const ModelSpec&) const = default;
  std::string describe() const;
};

// f_theta: inputs -> N x d features
class FeatureExtractor {
 public:
  FeatureExtractor(const ModelSpec& spec, Rng& init);

  BoundParams bind(Tape& tape, bool trainable) const;
  Var forward(Tape& tape, const BoundParams& bp, Var x) const;
  // value-only convenience (no gradient bookkeeping)
  Tensor features(const Tensor& x) const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const ModelSpec& spec() const { return spec_; }
  size_t feature_dim() const { return spec_.feature_dim; }

 private:
  ModelSpec spec_;
  ParamSet params_;
};

// h_psi: N x d features -> N x K logits (single affine head)
class Classifier {
 public:
  Classifier(size_t feature_dim, size_t num_classes, Rng& init);

  BoundParams bind(Tape& tape, bool trainable) const;
  Var forward(Tape& tape, const BoundParams& bp, Var z) const;
  Tensor logits(const Tensor& z) const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  size_t num_classes() const { return num_classes_; }

 private:
  size_t feature_dim_, num_classes_;
  ParamSet params_;
};

// D_omega: N x d features -> N x 1 scores in (0,1), two tanh hidden layers
class Discriminator {
 public:
  Discriminator(size_t feature_dim, Rng& init);

  BoundParams bind(Tape& tape, bool trainable) const;
  Var forward(Tape& tape, const BoundParams& bp, Var z) const;
  Tensor scores(const Tensor& z) const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  size_t feature_dim_;
  ParamSet params_;
};

// convenience wrappers with stop-gradient semantics
Var extract(Tape& tape, const FeatureExtractor& f, Var x, bool stop_grad);
Var classify(Tape& tape, const Classifier& h, Var z, bool stop_grad);
Var discriminate(Tape& tape, const Discriminator& d, Var z, bool stop_grad);

// d(cross-entropy)/d(input) with all model parameters held fixed; row i of the
// result is the gradient for sample i alone.
Tensor input_gradient(const FeatureExtractor& f, const Classifier& h, const Tensor& x,
                      const Tensor& y_onehot);

// Momentum-free adaptive first-order optimizer (squared-gradient accumulator,
// state keyed by parameter name so it survives rebinding).
class AdaptiveSgd {
 public:
  explicit AdaptiveSgd(double lr, double rho = 0.9, double eps = 1e-8)
      : lr_(lr), rho_(rho), eps_(eps) {}

  // grads aligned with params.items; lr_scale multiplies the base rate
  void step(ParamSet& params, const std::vector<Tensor>& grads, double lr_scale = 1.0);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_, rho_, eps_;
  std::map<std::string, Tensor> accum_;
};

// collect grads aligned with a ParamSet from its bound vars
std::vector<Tensor> collect_grads(const BoundParams& bp);

}  // namespace mpbm
