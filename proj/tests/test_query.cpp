#include <doctest.h>

#include <cmath>
#include <vector>

#include "mpbm/models.hpp"
#include "mpbm/query.hpp"
#include "mpbm/rng.hpp"
#include "mpbm/tensor.hpp"
#include "oracles.hpp"

using mpbm::Classifier;
using mpbm::FeatureExtractor;
using mpbm::ModelSpec;
using mpbm::Rng;
using mpbm::SgldConfig;
using mpbm::Tensor;

namespace {

ModelSpec mlp_spec(size_t in, size_t hidden, size_t d) {
  ModelSpec s;
  s.arch = "mlp";
  s.input_shape = {in};
  s.hidden = hidden;
  s.feature_dim = d;
  return s;
}

void set_param(mpbm::ParamSet& ps, const std::string& name, const Tensor& v) {
  Tensor* p = ps.find(name);
  REQUIRE(p != nullptr);
  *p = v;
}

// relu(relu(x I) I) = x on the positive orthant
void make_identity_mlp(FeatureExtractor& f, size_t d) {
  Tensor eye({d, d});
  for (size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  set_param(f.params(), "fc1/w", eye);
  set_param(f.params(), "fc1/b", Tensor({1, d}));
  set_param(f.params(), "fc2/w", eye);
  set_param(f.params(), "fc2/b", Tensor({1, d}));
}

double ce_loss(const FeatureExtractor& f, const Classifier& h, const Tensor& x,
               const Tensor& y) {
  mpbm::Tape t;
  mpbm::Var z = f.forward(t, f.bind(t, false), t.constant(x));
  return t.cross_entropy(h.forward(t, h.bind(t, false), z), t.constant(y)).value()[0];
}

Tensor rand_mat(Rng& rng, size_t r, size_t c, double lo, double hi) {
  Tensor t({r, c});
  for (size_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

Tensor onehot_rows(Rng& rng, size_t n, size_t k) {
  Tensor y({n, k});
  for (size_t i = 0; i < n; ++i) y[i * k + rng.index(k)] = 1.0;
  return y;
}

}  // namespace

TEST_CASE("one noiseless step is exactly the clamped gradient update") {
  Rng rng(81);
  FeatureExtractor f(mlp_spec(4, 5, 3), rng);
  Classifier h(3, 2, rng);
  Tensor x = rand_mat(rng, 1, 4, 0.2, 0.8);
  Tensor y = Tensor::matrix(1, 2, {0, 1});
  SgldConfig cfg;
  cfg.steps = 1;
  cfg.eta = 0.05;
  cfg.noise_scale_override = 0.0;
  Rng chain(1);
  Tensor got = mpbm::sgld_query(x, y, f, h, cfg, chain);
  Tensor g = mpbm::input_gradient(f, h, x, y);
  for (size_t k = 0; k < 4; ++k) {
    double want = std::min(1.0, std::max(0.0, x[k] + cfg.eta * g[k]));
    CHECK(got[k] == want);
  }
}

TEST_CASE("vanishing step size keeps the seed") {
  Rng rng(82);
  FeatureExtractor f(mlp_spec(3, 4, 2), rng);
  Classifier h(2, 2, rng);
  Tensor x = rand_mat(rng, 1, 3, 0.3, 0.7);
  Tensor y = Tensor::matrix(1, 2, {1, 0});
  SgldConfig cfg;
  cfg.steps = 3;
  cfg.eta = 1e-13;
  cfg.noise_scale_override = 0.0;
  Rng chain(1);
  Tensor got = mpbm::sgld_query(x, y, f, h, cfg, chain);
  for (size_t k = 0; k < 3; ++k) CHECK(std::abs(got[k] - x[k]) <= 1e-10);
}

TEST_CASE("noiseless ascent through an identity extractor follows the affine closed form") {
  Rng rng(83);
  size_t d = 3, K = 4;
  FeatureExtractor f(mlp_spec(d, d, d), rng);
  make_identity_mlp(f, d);
  Classifier h(d, K, rng);
  Tensor x0 = rand_mat(rng, 1, d, 0.4, 0.6);
  Tensor y({1, K});
  y[2] = 1.0;

  SgldConfig cfg;
  cfg.eta = 0.01;
  cfg.noise_scale_override = 0.0;
  cfg.clamp_lo = 0.05;
  cfg.clamp_hi = 0.95;

  const Tensor& w = *h.params().find("out/w");
  const Tensor& b = *h.params().find("out/b");
  std::vector<std::vector<double>> wrows(d, std::vector<double>(K));
  for (size_t i = 0; i < d; ++i)
    for (size_t k = 0; k < K; ++k) wrows[i][k] = w.at(i, k);
  std::vector<double> brow(K), yrow(K, 0.0), x0row(d);
  for (size_t k = 0; k < K; ++k) brow[k] = b[k];
  yrow[2] = 1.0;
  for (size_t i = 0; i < d; ++i) x0row[i] = x0[i];
  auto trace = oracle::linear_ascent_trace(x0row, yrow, wrows, brow, cfg.eta, 5,
                                           cfg.clamp_lo, cfg.clamp_hi);

  for (int steps = 1; steps <= 5; ++steps) {
    cfg.steps = steps;
    Rng chain(1);
    Tensor got = mpbm::sgld_query(x0, y, f, h, cfg, chain);
    for (size_t i = 0; i < d; ++i)
      CHECK(std::abs(got[i] - trace[steps - 1][i]) <= 1e-10);
  }
}

TEST_CASE("queries are seed-deterministic") {
  Rng rng(84);
  FeatureExtractor f(mlp_spec(4, 5, 3), rng);
  Classifier h(3, 2, rng);
  Tensor x = rand_mat(rng, 1, 4, 0.2, 0.8);
  Tensor y = Tensor::matrix(1, 2, {0, 1});
  SgldConfig cfg;
  cfg.steps = 4;
  cfg.eta = 0.02;
  Rng a(5), b(5), c(6);
  Tensor ra = mpbm::sgld_query(x, y, f, h, cfg, a);
  Tensor rb = mpbm::sgld_query(x, y, f, h, cfg, b);
  Tensor rc = mpbm::sgld_query(x, y, f, h, cfg, c);
  bool same = true, diff = false;
  for (size_t k = 0; k < 4; ++k) {
    same = same && ra[k] == rb[k];
    diff = diff || ra[k] != rc[k];
  }
  CHECK(same);
  CHECK(diff);
}

TEST_CASE("a non-finite gradient aborts the chain and keeps the last finite iterate") {
  Rng rng(85);
  size_t d = 2;
  FeatureExtractor f(mlp_spec(d, d, d), rng);
  make_identity_mlp(f, d);
  Classifier h(d, 2, rng);
  // finite weights whose backward pass overflows: the loss stays finite while
  // the input gradient is +-inf
  Tensor w({d, 2});
  w.at(0, 0) = 1e308;
  w.at(1, 0) = 1e308;
  w.at(0, 1) = -1e308;
  w.at(1, 1) = -1e308;
  set_param(h.params(), "out/w", w);
  set_param(h.params(), "out/b", Tensor({1, 2}));

  Tensor x = Tensor::matrix(1, 2, {0.2, 0.15});
  Tensor y = Tensor::matrix(1, 2, {0, 1});
  SgldConfig cfg;
  cfg.steps = 3;
  cfg.eta = 0.01;
  bool aborted = false;
  Rng chain(1);
  Tensor got = mpbm::sgld_query(x, y, f, h, cfg, chain, &aborted);
  CHECK(aborted);
  for (size_t k = 0; k < d; ++k) CHECK(got[k] == x[k]);
}

TEST_CASE("the model is never mutated by a query") {
  Rng rng(86);
  FeatureExtractor f(mlp_spec(3, 4, 2), rng);
  Classifier h(2, 2, rng);
  std::vector<Tensor> before;
  for (const auto& it : f.params().items) before.push_back(it.value);
  for (const auto& it : h.params().items) before.push_back(it.value);
  Tensor x = rand_mat(rng, 1, 3, 0.2, 0.8);
  Tensor y = Tensor::matrix(1, 2, {1, 0});
  SgldConfig cfg;
  Rng chain(2);
  mpbm::sgld_query(x, y, f, h, cfg, chain);
  size_t at = 0;
  for (const auto& it : f.params().items) {
    for (size_t k = 0; k < it.value.size(); ++k) CHECK(it.value[k] == before[at][k]);
    ++at;
  }
  for (const auto& it : h.params().items) {
    for (size_t k = 0; k < it.value.size(); ++k) CHECK(it.value[k] == before[at][k]);
    ++at;
  }
}

TEST_CASE("a batched run reproduces independent single chains") {
  Rng rng(87);
  size_t in = 4, m = 3, K = 2;
  FeatureExtractor f(mlp_spec(in, 5, 3), rng);
  Classifier h(3, K, rng);
  Tensor xs = rand_mat(rng, m, in, 0.2, 0.8);
  Tensor ys = onehot_rows(rng, m, K);
  SgldConfig cfg;
  cfg.steps = 4;
  cfg.eta = 0.02;

  std::vector<Rng> chains = {Rng(100), Rng(101), Rng(102)};
  Tensor batch = mpbm::sgld_query_batch(xs, ys, f, h, cfg, chains);

  for (size_t i = 0; i < m; ++i) {
    Tensor xi({1, in});
    for (size_t k = 0; k < in; ++k) xi[k] = xs.at(i, k);
    Tensor yi({1, K});
    for (size_t k = 0; k < K; ++k) yi[k] = ys.at(i, k);
    Rng chain(100 + i);
    Tensor single = mpbm::sgld_query(xi, yi, f, h, cfg, chain);
    for (size_t k = 0; k < in; ++k) CHECK(std::abs(batch.at(i, k) - single[k]) <= 1e-12);
  }
}

TEST_CASE("noiseless queries do not decrease the loss for most seeds") {
  int ok = 0;
  const int trials = 100;
  for (int s = 0; s < trials; ++s) {
    Rng rng(9000 + s);
    FeatureExtractor f(mlp_spec(4, 6, 3), rng);
    Classifier h(3, 3, rng);
    Tensor x = rand_mat(rng, 1, 4, 0.1, 0.9);
    Tensor y({1, 3});
    y[rng.index(3)] = 1.0;
    SgldConfig cfg;
    cfg.steps = 5;
    cfg.eta = 0.005;
    cfg.noise_scale_override = 0.0;
    Rng chain(s);
    Tensor adv = mpbm::sgld_query(x, y, f, h, cfg, chain);
    if (ce_loss(f, h, adv, y) >= ce_loss(f, h, x, y) - 1e-12) ++ok;
  }
  CHECK(ok >= 95);
}

TEST_CASE("injected noise has the configured scale") {
  Rng rng(88);
  size_t in = 20, m = 10;
  FeatureExtractor f(mlp_spec(in, 4, 2), rng);
  Classifier h(2, 2, rng);
  // zero classifier => zero gradient => the update is pure noise
  set_param(h.params(), "out/w", Tensor({2, 2}));
  set_param(h.params(), "out/b", Tensor({1, 2}));

  SgldConfig cfg;
  cfg.steps = 50;
  cfg.eta = 0.01;
  cfg.clamp_lo = -1e9;
  cfg.clamp_hi = 1e9;
  double scale = std::sqrt(2.0 * cfg.eta);

  Tensor xs({m, in});
  Tensor ys({m, 2});
  for (size_t i = 0; i < m; ++i) ys.at(i, 0) = 1.0;
  std::vector<Rng> chains;
  for (size_t i = 0; i < m; ++i) chains.emplace_back(300 + i);

  // accumulate per-step increments by re-running with growing step counts
  std::vector<double> draws;
  Tensor prev = xs;
  for (int steps = 1; steps <= cfg.steps; ++steps) {
    SgldConfig c1 = cfg;
    c1.steps = steps;
    std::vector<Rng> cr;
    for (size_t i = 0; i < m; ++i) cr.emplace_back(300 + i);
    Tensor cur = mpbm::sgld_query_batch(xs, ys, f, h, c1, cr);
    for (size_t k = 0; k < cur.size(); ++k) draws.push_back(cur[k] - prev[k]);
    prev = cur;
  }
  REQUIRE(draws.size() == static_cast<size_t>(cfg.steps) * m * in);
  double mean = 0.0;
  for (double v : draws) mean += v;
  mean /= static_cast<double>(draws.size());
  double var = 0.0;
  for (double v : draws) var += (v - mean) * (v - mean);
  var /= static_cast<double>(draws.size());
  CHECK(std::abs(mean) <= 0.05 * scale);
  CHECK(std::abs(var - 2.0 * cfg.eta) <= 0.05 * 2.0 * cfg.eta);
}

TEST_CASE("query configuration validation") {
  Rng rng(89);
  FeatureExtractor f(mlp_spec(3, 4, 2), rng);
  Classifier h(2, 2, rng);
  Tensor x = rand_mat(rng, 1, 3, 0.2, 0.8);
  Tensor y = Tensor::matrix(1, 2, {1, 0});
  Rng chain(1);
  SgldConfig bad;
  bad.steps = 0;
  CHECK_THROWS(mpbm::sgld_query(x, y, f, h, bad, chain));
  bad.steps = 1;
  bad.eta = 0.0;
  CHECK_THROWS(mpbm::sgld_query(x, y, f, h, bad, chain));

  SgldConfig ok;
  std::vector<Rng> chains = {Rng(1)};
  CHECK_THROWS(mpbm::sgld_query_batch(rand_mat(rng, 2, 3, 0, 1), y, f, h, ok, chains));
  std::vector<Rng> two = {Rng(1), Rng(2)};
  CHECK_THROWS(mpbm::sgld_query_batch(x, y, f, h, ok, two));
}
