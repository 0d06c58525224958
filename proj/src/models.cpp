#include "mpbm/models.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mpbm {

Tensor* ParamSet::find(const std::string& name) {
  for (auto& it : items)
    if (it.name == name) return &it.value;
  return nullptr;
}

const Tensor* ParamSet::find(const std::string& name) const {
  for (const auto& it : items)
    if (it.name == name) return &it.value;
  return nullptr;
}

size_t ParamSet::count() const {
  size_t n = 0;
  for (const auto& it : items) n += it.value.size();
  return n;
}

BoundParams bind_params(Tape& tape, const ParamSet& params, bool trainable) {
  BoundParams bp;
  bp.vars.reserve(params.items.size());
  for (const auto& it : params.items) bp.vars.push_back(tape.leaf(it.value, trainable));
  return bp;
}

std::vector<Tensor> collect_grads(const BoundParams& bp) {
  std::vector<Tensor> g;
  g.reserve(bp.vars.size());
  for (const Var& v : bp.vars) g.push_back(v.grad());
  return g;
}

std::string ModelSpec::describe() const {
  std::ostringstream os;
  os << arch << " in=" << shape_to_string(input_shape) << " d=" << feature_dim
     << " hidden=" << hidden << " K=" << num_classes;
  return os.str();
}

namespace {

Tensor gaussian_init(std::vector<size_t> shape, size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (size_t i = 0; i < t.size(); ++i) t[i] = s * rng.normal();
  return t;
}

void push(ParamSet& ps, std::string name, Tensor t) {
  ps.items.push_back({std::move(name), std::move(t)});
}

size_t conv_out(size_t in, size_t k) { return in - k + 1; }

}  // namespace

FeatureExtractor::FeatureExtractor(const ModelSpec& spec, Rng& init) : spec_(spec) {
  if (spec_.arch == "lenet-small") {
    if (spec_.input_shape.size() != 3)
      throw std::runtime_error("lenet-small: input shape must be {C,H,W}, got " +
                               shape_to_string(spec_.input_shape));
    size_t C = spec_.input_shape[0], H = spec_.input_shape[1], W = spec_.input_shape[2];
    size_t h1 = H < 5 ? 0 : conv_out(H, 5) / 2, w1 = W < 5 ? 0 : conv_out(W, 5) / 2;
    size_t h2 = h1 < 5 ? 0 : conv_out(h1, 5) / 2, w2 = w1 < 5 ? 0 : conv_out(w1, 5) / 2;
    if (h2 == 0 || w2 == 0)
      throw std::runtime_error("lenet-small: input " + shape_to_string(spec_.input_shape) +
                               " too small for two 5x5 conv + pool blocks");
    size_t flat = 16 * h2 * w2;
    push(params_, "conv1/w", gaussian_init({6, C, 5, 5}, C * 25, init));
    push(params_, "conv1/b", Tensor({1, 6}));
    push(params_, "conv2/w", gaussian_init({16, 6, 5, 5}, 6 * 25, init));
    push(params_, "conv2/b", Tensor({1, 16}));
    push(params_, "fc/w", gaussian_init({flat, spec_.feature_dim}, flat, init));
    push(params_, "fc/b", Tensor({1, spec_.feature_dim}));
  } else if (spec_.arch == "mlp") {
    if (spec_.input_shape.size() != 1)
      throw std::runtime_error("mlp: input shape must be {in_dim}, got " +
                               shape_to_string(spec_.input_shape));
    size_t in = spec_.input_shape[0];
    push(params_, "fc1/w", gaussian_init({in, spec_.hidden}, in, init));
    push(params_, "fc1/b", Tensor({1, spec_.hidden}));
    push(params_, "fc2/w", gaussian_init({spec_.hidden, spec_.feature_dim}, spec_.hidden, init));
    push(params_, "fc2/b", Tensor({1, spec_.feature_dim}));
  } else {
    throw std::runtime_error("unknown extractor architecture '" + spec_.arch + "'");
  }
}

BoundParams FeatureExtractor::bind(Tape& tape, bool trainable) const {
  return bind_params(tape, params_, trainable);
}

Var FeatureExtractor::forward(Tape& t, const BoundParams& bp, Var x) const {
  if (spec_.arch == "lenet-small") {
    if (x.value().ndim() != 4)
      throw std::runtime_error("lenet-small: expected N x C x H x W input, got " +
                               x.value().shape_str());
    Var h = t.conv2d(x, bp.vars[0], bp.vars[1]);
    h = t.relu(h);
    h = t.maxpool2(h);
    h = t.conv2d(h, bp.vars[2], bp.vars[3]);
    h = t.relu(h);
    h = t.maxpool2(h);
    size_t N = h.value().extent(0);
    size_t flat = h.value().size() / N;
    h = t.reshape(h, {N, flat});
    h = t.add_rowvec(t.matmul(h, bp.vars[4]), bp.vars[5]);
    return t.relu(h);
  }
  Var h = t.add_rowvec(t.matmul(x, bp.vars[0]), bp.vars[1]);
  h = t.relu(h);
  h = t.add_rowvec(t.matmul(h, bp.vars[2]), bp.vars[3]);
  return t.relu(h);
}

Tensor FeatureExtractor::features(const Tensor& x) const {
  Tape t;
  Var xv = t.constant(x);
  return forward(t, bind(t, false), xv).value();
}

Classifier::Classifier(size_t feature_dim, size_t num_classes, Rng& init)
    : feature_dim_(feature_dim), num_classes_(num_classes) {
  push(params_, "out/w", gaussian_init({feature_dim, num_classes}, feature_dim, init));
  push(params_, "out/b", Tensor({1, num_classes}));
}

BoundParams Classifier::bind(Tape& tape, bool trainable) const {
  return bind_params(tape, params_, trainable);
}

Var Classifier::forward(Tape& t, const BoundParams& bp, Var z) const {
  if (z.value().ndim() != 2 || z.value().cols() != feature_dim_)
    throw std::runtime_error("classifier: expected N x " + std::to_string(feature_dim_) +
                             " features, got " + z.value().shape_str());
  return t.add_rowvec(t.matmul(z, bp.vars[0]), bp.vars[1]);
}

Tensor Classifier::logits(const Tensor& z) const {
  Tape t;
  Var zv = t.constant(z);
  return forward(t, bind(t, false), zv).value();
}

Discriminator::Discriminator(size_t feature_dim, Rng& init) : feature_dim_(feature_dim) {
  push(params_, "d1/w", gaussian_init({feature_dim, feature_dim}, feature_dim, init));
  push(params_, "d1/b", Tensor({1, feature_dim}));
  push(params_, "d2/w", gaussian_init({feature_dim, feature_dim}, feature_dim, init));
  push(params_, "d2/b", Tensor({1, feature_dim}));
  push(params_, "d3/w", gaussian_init({feature_dim, 1}, feature_dim, init));
  push(params_, "d3/b", Tensor({1, 1}));
}

BoundParams Discriminator::bind(Tape& tape, bool trainable) const {
  return bind_params(tape, params_, trainable);
}

Var Discriminator::forward(Tape& t, const BoundParams& bp, Var z) const {
  if (z.value().ndim() != 2 || z.value().cols() != feature_dim_)
    throw std::runtime_error("discriminator: expected N x " + std::to_string(feature_dim_) +
                             " features, got " + z.value().shape_str());
  Var h = t.tanh(t.add_rowvec(t.matmul(z, bp.vars[0]), bp.vars[1]));
  h = t.tanh(t.add_rowvec(t.matmul(h, bp.vars[2]), bp.vars[3]));
  h = t.sigmoid(t.add_rowvec(t.matmul(h, bp.vars[4]), bp.vars[5]));
  return t.clamp(h, 1e-7, 1.0 - 1e-7);
}

Tensor Discriminator::scores(const Tensor& z) const {
  Tape t;
  Var zv = t.constant(z);
  return forward(t, bind(t, false), zv).value();
}

Var extract(Tape& tape, const FeatureExtractor& f, Var x, bool stop_grad) {
  return f.forward(tape, f.bind(tape, !stop_grad), x);
}

Var classify(Tape& tape, const Classifier& h, Var z, bool stop_grad) {
  return h.forward(tape, h.bind(tape, !stop_grad), z);
}

Var discriminate(Tape& tape, const Discriminator& d, Var z, bool stop_grad) {
  return d.forward(tape, d.bind(tape, !stop_grad), z);
}

Tensor input_gradient(const FeatureExtractor& f, const Classifier& h, const Tensor& x,
                      const Tensor& y_onehot) {
  Tape t;
  Var xv = t.leaf(x, true);
  Var z = extract(t, f, xv, true);
  Var logits = classify(t, h, z, true);
  Var loss = t.cross_entropy(logits, t.constant(y_onehot), Reduction::Sum);
  t.backward(loss);
  return xv.grad();
}

void AdaptiveSgd::step(ParamSet& params, const std::vector<Tensor>& grads, double lr_scale) {
  if (grads.size() != params.items.size())
    throw std::runtime_error("optimizer: " + std::to_string(grads.size()) + " gradients for " +
                             std::to_string(params.items.size()) + " parameters");
  double rate = lr_ * lr_scale;
  for (size_t i = 0; i < params.items.size(); ++i) {
    Tensor& p = params.items[i].value;
    const Tensor& g = grads[i];
    if (!p.same_shape(g))
      throw std::runtime_error("optimizer: gradient shape " + g.shape_str() +
                               " mismatches parameter " + params.items[i].name);
    auto [it, fresh] = accum_.try_emplace(params.items[i].name, Tensor(p.shape()));
    Tensor& v = it->second;
    for (size_t k = 0; k < p.size(); ++k) {
      v[k] = rho_ * v[k] + (1.0 - rho_) * g[k] * g[k];
      p[k] -= rate * g[k] / (std::sqrt(v[k]) + eps_);
    }
  }
}

}  // namespace mpbm
