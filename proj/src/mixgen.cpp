#include "mpbm/mixgen.hpp"

#include <cmath>
#include <stdexcept>

namespace mpbm {

namespace {

Tensor gaussian_square(size_t d, Rng& rng) {
  Tensor t({d, d});
  double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (size_t i = 0; i < t.size(); ++i) t[i] = s * rng.normal();
  return t;
}

// identity plus a small perturbation: the untrained generator then emits
// attention-weighted base means, and training bends the map from there
Tensor identity_anchored(size_t d, Rng& rng) {
  Tensor t = gaussian_square(d, rng);
  for (size_t i = 0; i < t.size(); ++i) t[i] *= 0.1;
  for (size_t i = 0; i < d; ++i) t.at(i, i) += 1.0;
  return t;
}

}  // namespace

MixupGenerator::MixupGenerator(size_t d, Rng& init) : d_(d) {
  params_.items.push_back({"gen/wq", gaussian_square(d, init)});
  params_.items.push_back({"gen/wk", gaussian_square(d, init)});
  params_.items.push_back({"gen/wv", identity_anchored(d, init)});
}

MixupGenerator::Bound MixupGenerator::bind(Tape& tape, bool trainable) const {
  return Bound{tape.leaf(params_.items[0].value, trainable),
               tape.leaf(params_.items[1].value, trainable),
               tape.leaf(params_.items[2].value, trainable)};
}

Var attention(Tape& t, Var zq, Var zb, Var c, const MixupGenerator::Bound& p) {
  size_t d = c.value().rows();
  if (zq.value().ndim() != 2 || zq.value().rows() != 1 || zq.value().cols() != d)
    throw std::runtime_error("attention: query must be 1x" + std::to_string(d) + ", got " +
                             zq.value().shape_str());
  if (zb.value().ndim() != 2 || zb.value().cols() != d)
    throw std::runtime_error("attention: base batch must be N_bx" + std::to_string(d) + ", got " +
                             zb.value().shape_str());
  if (zb.value().rows() < 1) throw std::runtime_error("attention: empty base batch");
  // row j of u is the query scaled by correlation row j
  Var u = t.mul_rowvec(c, zq);                    // d x d
  Var q = t.matmul(u, p.wq);                      // d x d, row j = q_j
  Var tk = t.mul(t.matmul_nt(q, p.wk), c);        // d x d, row j = q_j W^K^T diag(c_j)
  Var s = t.matmul_nt(tk, zb);                    // d x N_b
  s = t.scale(s, 1.0 / std::sqrt(static_cast<double>(d)));
  return t.softmax_rows(s);
}

MixupGenerator::Mix synthesize(Tape& t, Var zq, Var zb, Var yb, Var c,
                               const MixupGenerator::Bound& p, bool label_softmax) {
  size_t nb = zb.value().rows();
  if (yb.value().ndim() != 2 || yb.value().rows() != nb)
    throw std::runtime_error("synthesize: labels " + yb.value().shape_str() +
                             " do not pair with base batch " + zb.value().shape_str());
  MixupGenerator::Mix mix;
  mix.scores = attention(t, zq, zb, c, p);          // d x N_b
  Var v = t.matmul(zb, p.wv);                       // N_b x d
  Var zm = t.row_sum(t.mul(mix.scores, t.transpose(v)));  // d x 1
  mix.z_mix = t.reshape(zm, {1, zb.value().cols()});
  Var w = t.col_mean(mix.scores);                   // 1 x N_b
  if (label_softmax) w = t.softmax_rows(w);
  mix.y_mix = t.matmul(w, yb);                      // 1 x K
  return mix;
}

MixupGenerator::Mix generate_vars(Tape& t, const Tensor& x_q, const LabeledBatch& batch,
                                  const FeatureExtractor& f, const CorrelationMatrix& c,
                                  const MixupGenerator::Bound& p, bool label_softmax) {
  Var zq = extract(t, f, t.constant(x_q), true);
  Var zb = extract(t, f, t.constant(batch.inputs), true);
  return synthesize(t, zq, zb, t.constant(batch.labels), t.constant(c.c), p, label_softmax);
}

MixupSample generate(const Tensor& x_q, const LabeledBatch& batch, const FeatureExtractor& f,
                     const CorrelationMatrix& c, const MixupGenerator& g, bool label_softmax) {
  Tape t;
  auto mix = generate_vars(t, x_q, batch, f, c, g.bind(t, false), label_softmax);
  return MixupSample{mix.z_mix.value(), mix.y_mix.value()};
}

}  // namespace mpbm
