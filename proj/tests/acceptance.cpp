// Shipping gate: every release criterion exercised end to end, one PASS/FAIL
// line per criterion. --only N restricts the run to a single criterion.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mpbm/autodiff.hpp"
#include "mpbm/config.hpp"
#include "mpbm/correlation.hpp"
#include "mpbm/data.hpp"
#include "mpbm/mixgen.hpp"
#include "mpbm/models.hpp"
#include "mpbm/query.hpp"
#include "mpbm/rng.hpp"
#include "mpbm/tensor.hpp"
#include "mpbm/trainer.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace mpbm;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

// collects expectations; remembers the first failure message
struct Checker {
  bool ok = true;
  std::string why;
  void expect(bool cond, const std::string& msg) {
    if (!cond && ok) {
      ok = false;
      why = msg;
    }
  }
};

double elapsed_s(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, const char* spec = "%.3g") {
  char b[64];
  std::snprintf(b, sizeof b, spec, v);
  return b;
}

std::string pct(double v) { return fmt(100.0 * v, "%.1f"); }

std::string out_root() {
  const char* env = std::getenv("MPBM_OUT_DIR");
  std::string root = env != nullptr ? env : "acceptance-out";
  fs::create_directories(root);
  return root;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cmd(const std::string& cmd, const std::string& log) {
  int st = std::system((cmd + " > " + log + " 2>&1").c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

Tensor rand_mat(std::vector<size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor m(std::move(shape));
  for (size_t i = 0; i < m.size(); ++i) m[i] = scale * rng.normal();
  return m;
}

Tensor rand_box(std::vector<size_t> shape, Rng& rng, double lo, double hi) {
  Tensor m(std::move(shape));
  for (size_t i = 0; i < m.size(); ++i) m[i] = lo + (hi - lo) * rng.uniform();
  return m;
}

Tensor onehot_rows(size_t n, size_t k, Rng& rng) {
  Tensor y({n, k});
  for (size_t i = 0; i < n; ++i) y.at(i, rng.index(k)) = 1.0;
  return y;
}

CorrelationMatrix random_correlation(size_t d, Rng& rng) {
  return normalize_rows(pearson_matrix(rand_mat({d + 16, d}, rng)));
}

std::vector<double> to_vec(const Tensor& t) {
  std::vector<double> v(t.size());
  for (size_t i = 0; i < t.size(); ++i) v[i] = t[i];
  return v;
}

std::vector<std::vector<double>> to_rows(const Tensor& m) {
  std::vector<std::vector<double>> rows(m.rows(), std::vector<double>(m.cols()));
  for (size_t i = 0; i < m.rows(); ++i)
    for (size_t j = 0; j < m.cols(); ++j) rows[i][j] = m.at(i, j);
  return rows;
}

ModelSpec mlp_spec(size_t in, size_t d, size_t hidden, size_t k) {
  ModelSpec ms;
  ms.arch = "mlp";
  ms.input_shape = {in};
  ms.feature_dim = d;
  ms.hidden = hidden;
  ms.num_classes = k;
  return ms;
}

// ---------------------------------------------------------------- criterion 1

Outcome criterion1() {
  auto t0 = Clock::now();
  Checker c;
  Rng rng(101);

  // attention rows and mixed labels live on the simplex
  double worst_row = 0.0, worst_label = 0.0;
  for (int inst = 0; inst < 60; ++inst) {
    size_t d = 2 + rng.index(7), nb = 1 + rng.index(6), k = 2 + rng.index(4);
    Rng ginit = rng.child(1000 + inst);
    MixupGenerator g(d, ginit);
    CorrelationMatrix cm = random_correlation(d, rng);
    Tape t;
    auto mix = synthesize(t, t.constant(rand_mat({1, d}, rng)), t.constant(rand_mat({nb, d}, rng)),
                          t.constant(onehot_rows(nb, k, rng)), t.constant(cm.c), g.bind(t, false),
                          inst % 2 == 0);
    const Tensor& s = mix.scores.value();
    for (size_t j = 0; j < d; ++j) {
      double sum = 0.0;
      for (size_t i = 0; i < nb; ++i) {
        c.expect(s.at(j, i) >= 0.0, "negative attention weight");
        sum += s.at(j, i);
      }
      worst_row = std::max(worst_row, std::abs(sum - 1.0));
    }
    const Tensor& y = mix.y_mix.value();
    double ysum = 0.0;
    for (size_t i = 0; i < k; ++i) {
      c.expect(y[i] >= 0.0, "negative mixed label");
      ysum += y[i];
    }
    worst_label = std::max(worst_label, std::abs(ysum - 1.0));
  }
  c.expect(worst_row <= 1e-9, "attention row sum off the simplex by " + fmt(worst_row));
  c.expect(worst_label <= 1e-9, "mixed label sum off the simplex by " + fmt(worst_label));

  // permuting the base batch leaves the synthesis unchanged (exhaustive)
  double worst_perm = 0.0;
  for (size_t nb = 1; nb <= 5; ++nb) {
    size_t d = 3, k = 3;
    Rng ginit = rng.child(2000 + nb);
    MixupGenerator g(d, ginit);
    CorrelationMatrix cm = random_correlation(d, rng);
    Tensor zq = rand_mat({1, d}, rng), zb = rand_mat({nb, d}, rng);
    Tensor yb = onehot_rows(nb, k, rng);
    Tensor z_ref, y_ref;
    {
      Tape t;
      auto mix = synthesize(t, t.constant(zq), t.constant(zb), t.constant(yb), t.constant(cm.c),
                            g.bind(t, false));
      z_ref = mix.z_mix.value();
      y_ref = mix.y_mix.value();
    }
    std::vector<size_t> perm(nb);
    std::iota(perm.begin(), perm.end(), size_t{0});
    do {
      Tensor pz({nb, d}), py({nb, k});
      for (size_t i = 0; i < nb; ++i) {
        for (size_t j = 0; j < d; ++j) pz.at(i, j) = zb.at(perm[i], j);
        for (size_t j = 0; j < k; ++j) py.at(i, j) = yb.at(perm[i], j);
      }
      Tape t;
      auto mix = synthesize(t, t.constant(zq), t.constant(pz), t.constant(py), t.constant(cm.c),
                            g.bind(t, false));
      for (size_t j = 0; j < d; ++j)
        worst_perm = std::max(worst_perm, std::abs(mix.z_mix.value()[j] - z_ref[j]));
      for (size_t j = 0; j < k; ++j)
        worst_perm = std::max(worst_perm, std::abs(mix.y_mix.value()[j] - y_ref[j]));
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  c.expect(worst_perm <= 1e-9, "base permutation moved the mix by " + fmt(worst_perm));

  // a single base instance collapses to its value projection
  double worst_single = 0.0;
  for (int inst = 0; inst < 8; ++inst) {
    size_t d = 2 + rng.index(5), k = 2 + rng.index(3);
    Rng ginit = rng.child(3000 + inst);
    MixupGenerator g(d, ginit);
    CorrelationMatrix cm = random_correlation(d, rng);
    Tensor zb = rand_mat({1, d}, rng);
    Tensor yb = onehot_rows(1, k, rng);
    Tape t;
    auto mix = synthesize(t, t.constant(rand_mat({1, d}, rng)), t.constant(zb), t.constant(yb),
                          t.constant(cm.c), g.bind(t, false), inst % 2 == 0);
    const Tensor& wv = *g.params().find("gen/wv");
    for (size_t j = 0; j < d; ++j) {
      double vj = 0.0;
      for (size_t i = 0; i < d; ++i) vj += zb[i] * wv.at(i, j);
      worst_single = std::max(worst_single, std::abs(mix.z_mix.value()[j] - vj));
      worst_single = std::max(worst_single, std::abs(mix.scores.value()[j] - 1.0));
    }
    for (size_t i = 0; i < k; ++i)
      worst_single = std::max(worst_single, std::abs(mix.y_mix.value()[i] - yb[i]));
  }
  c.expect(worst_single <= 1e-12, "single-base reduction off by " + fmt(worst_single));

  // raw correlations are symmetric with unit diagonal; normalized rows sum to 1
  double worst_sym = 0.0, worst_rowsum = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    size_t n = 8 + rng.index(40), d = 2 + rng.index(8);
    Tensor feats = rand_mat({n, d}, rng);
    if (inst % 4 == 0)
      for (size_t i = 0; i < n; ++i) feats.at(i, 0) = 2.5;
    Tensor raw = pearson_matrix(feats);
    for (size_t i = 0; i < d; ++i) {
      worst_sym = std::max(worst_sym, std::abs(raw.at(i, i) - 1.0));
      for (size_t j = 0; j < d; ++j)
        worst_sym = std::max(worst_sym, std::abs(raw.at(i, j) - raw.at(j, i)));
    }
    CorrelationMatrix cm = normalize_rows(raw);
    for (size_t i = 0; i < d; ++i) {
      double sum = 0.0;
      for (size_t j = 0; j < d; ++j) {
        c.expect(cm.c.at(i, j) >= 0.0, "negative normalized correlation");
        sum += cm.c.at(i, j);
      }
      worst_rowsum = std::max(worst_rowsum, std::abs(sum - 1.0));
    }
  }
  c.expect(worst_sym <= 1e-12, "correlation symmetry off by " + fmt(worst_sym));
  c.expect(worst_rowsum <= 1e-9, "correlation row sum off by " + fmt(worst_rowsum));

  // idx files survive a read/write round trip byte for byte
  {
    std::string src = "data/digits/mnist-test2k-labels-idx1-ubyte";
    std::string dst = out_root() + "/idx-roundtrip.bin";
    write_idx(dst, read_idx(src));
    std::string a = slurp(src), b = slurp(dst);
    c.expect(!a.empty() && a == b, "idx round trip is not byte-identical");
  }

  double secs = elapsed_s(t0);
  c.expect(secs < 120.0, "property battery too slow: " + fmt(secs) + "s");
  if (!c.ok) return {false, "properties: " + c.why};
  return {true, "properties: simplex within " + fmt(std::max(worst_row, worst_label)) +
                    ", permutation drift " + fmt(worst_perm) + ", idx round trip ok, " +
                    fmt(secs, "%.1f") + "s"};
}

// ---------------------------------------------------------------- criterion 2

Outcome criterion2() {
  auto t0 = Clock::now();
  Checker c;
  Rng rng(202);
  int instances = 0;
  double worst = 0.0;
  auto note = [&](double rel, const char* what) {
    ++instances;
    worst = std::max(worst, rel);
    c.expect(rel <= 1e-4, std::string(what) + " gradient off by " + fmt(rel));
  };
  // a relu kink inside the probe interval spoils the measurement, not the
  // gradient; a smaller step isolates genuine disagreements
  auto graded = [](const std::function<double()>& value, const std::vector<Tensor*>& ps,
                   const std::vector<Tensor>& analytic) {
    double rel = oracle::fd_rel_error(value, ps, analytic, 1e-5);
    if (rel > 1e-4) rel = oracle::fd_rel_error(value, ps, analytic, 1e-7);
    return rel;
  };
  // zero-initialized biases can park a relu preactivation exactly on its kink
  // (a fully dead hidden row feeds the next layer its bare bias); offsetting
  // every parameter keeps the finite-difference probe point generic
  auto jitter = [&rng](ParamSet& p) {
    for (auto& item : p.items)
      for (size_t i = 0; i < item.value.size(); ++i) item.value[i] += 0.3 * rng.uniform() - 0.15;
  };

  // attention projections, differentiated through synthesis from raw inputs
  for (int inst = 0; inst < 30; ++inst) {
    size_t d = 2 + rng.index(3), nb = 2 + rng.index(2), k = 2 + rng.index(2), in = d + 1;
    Rng fi = rng.child(4000 + inst);
    FeatureExtractor f(mlp_spec(in, d, 4, k), fi);
    Rng gi = rng.child(5000 + inst);
    MixupGenerator g(d, gi);
    CorrelationMatrix cm = random_correlation(d, rng);
    Tensor xq = rand_box({1, in}, rng, 0.0, 1.0);
    LabeledBatch batch{rand_box({nb, in}, rng, 0.0, 1.0), onehot_rows(nb, k, rng)};
    Tensor r1 = rand_mat({1, d}, rng), r2 = rand_mat({1, k}, rng);
    auto probe = [&](Tape& t, const MixupGenerator::Bound& b) {
      auto mix = generate_vars(t, xq, batch, f, cm, b, true);
      return t.add(t.sum(t.mul(mix.z_mix, t.constant(r1))),
                   t.sum(t.mul(mix.y_mix, t.constant(r2))));
    };
    Tape t;
    MixupGenerator::Bound b = g.bind(t, true);
    Var loss = probe(t, b);
    t.backward(loss);
    std::vector<Tensor> analytic{b.wq.grad(), b.wk.grad(), b.wv.grad()};
    std::vector<Tensor*> ps{g.params().find("gen/wq"), g.params().find("gen/wk"),
                            g.params().find("gen/wv")};
    note(graded(
             [&] {
               Tape ft;
               return probe(ft, g.bind(ft, false)).value()[0];
             },
             ps, analytic),
         "attention projection");
  }

  // extractor and classifier parameters under the supervised loss
  for (int inst = 0; inst < 30; ++inst) {
    size_t in = 3 + rng.index(3), d = 2 + rng.index(3), k = 2 + rng.index(3);
    Rng fi = rng.child(6000 + inst);
    FeatureExtractor f(mlp_spec(in, d, 3 + rng.index(4), k), fi);
    Rng hi = rng.child(6500 + inst);
    Classifier h(d, k, hi);
    jitter(f.params());
    jitter(h.params());
    Tensor x = rand_mat({3, in}, rng);
    Tensor y = onehot_rows(3, k, rng);
    auto value = [&] {
      Tape t;
      Var z = f.forward(t, f.bind(t, false), t.constant(x));
      return t.cross_entropy(h.forward(t, h.bind(t, false), z), t.constant(y)).value()[0];
    };
    Tape t;
    BoundParams bf = f.bind(t, true), bh = h.bind(t, true);
    Var z = f.forward(t, bf, t.constant(x));
    t.backward(t.cross_entropy(h.forward(t, bh, z), t.constant(y)));
    std::vector<Tensor> analytic;
    std::vector<Tensor*> ps;
    for (const Var& v : bf.vars) analytic.push_back(v.grad());
    for (const Var& v : bh.vars) analytic.push_back(v.grad());
    for (auto& item : f.params().items) ps.push_back(&item.value);
    for (auto& item : h.params().items) ps.push_back(&item.value);
    note(graded(value, ps, analytic), "model parameter");
  }

  // discriminator parameters under the alignment objective
  for (int inst = 0; inst < 25; ++inst) {
    size_t d = 2 + rng.index(4);
    Rng di = rng.child(7000 + inst);
    Discriminator disc(d, di);
    jitter(disc.params());
    Tensor real = rand_mat({3, d}, rng), mixed = rand_mat({3, d}, rng);
    auto value = [&] {
      Tape t;
      return Trainer::adversarial_loss(t, disc, disc.bind(t, false), t.constant(real),
                                       t.constant(mixed))
          .value()[0];
    };
    Tape t;
    BoundParams bd = disc.bind(t, true);
    t.backward(Trainer::adversarial_loss(t, disc, bd, t.constant(real), t.constant(mixed)));
    std::vector<Tensor> analytic;
    std::vector<Tensor*> ps;
    for (const Var& v : bd.vars) analytic.push_back(v.grad());
    for (auto& item : disc.params().items) ps.push_back(&item.value);
    note(graded(value, ps, analytic), "discriminator parameter");
  }

  // query-side input gradients that drive the langevin ascent
  for (int inst = 0; inst < 25; ++inst) {
    size_t in = 3 + rng.index(4), d = 2 + rng.index(3), k = 2 + rng.index(2);
    Rng fi = rng.child(8000 + inst);
    FeatureExtractor f(mlp_spec(in, d, 4, k), fi);
    Rng hi = rng.child(8500 + inst);
    Classifier h(d, k, hi);
    jitter(f.params());
    jitter(h.params());
    Tensor x = rand_box({1, in}, rng, 0.05, 0.95);
    Tensor y = onehot_rows(1, k, rng);
    Tensor analytic = input_gradient(f, h, x, y);
    auto value = [&] {
      Tape t;
      Var z = f.forward(t, f.bind(t, false), t.constant(x));
      return t.cross_entropy(h.forward(t, h.bind(t, false), z), t.constant(y)).value()[0];
    };
    note(graded(value, {&x}, {analytic}), "query input");
  }

  c.expect(instances >= 100, "only " + std::to_string(instances) + " gradient instances");
  if (!c.ok) return {false, "gradients: " + c.why};
  return {true, "gradients: " + std::to_string(instances) + " instances, worst rel err " +
                    fmt(worst) + ", " + fmt(elapsed_s(t0), "%.1f") + "s"};
}

// ---------------------------------------------------------------- criterion 3

Outcome criterion3() {
  auto t0 = Clock::now();
  Checker c;
  Rng rng(303);
  double worst = 0.0;
  int cases = 0;
  for (size_t d = 1; d <= 4; ++d)
    for (size_t nb = 1; nb <= 3; ++nb)
      for (size_t k = 2; k <= 3; ++k)
        for (int soft = 0; soft < 2; ++soft)
          for (int rep = 0; rep < 3; ++rep) {
            Rng gi = rng.child(10000 + cases);
            MixupGenerator g(d, gi);
            CorrelationMatrix cm = random_correlation(d, rng);
            Tensor zq = rand_mat({1, d}, rng), zb = rand_mat({nb, d}, rng);
            Tensor yb = onehot_rows(nb, k, rng);
            Tape t;
            auto mix = synthesize(t, t.constant(zq), t.constant(zb), t.constant(yb),
                                  t.constant(cm.c), g.bind(t, false), soft == 1);
            oracle::BruteMix bm = oracle::brute_mixup(
                to_vec(zq), to_rows(zb), to_rows(yb), to_rows(cm.c),
                to_rows(*g.params().find("gen/wq")), to_rows(*g.params().find("gen/wk")),
                to_rows(*g.params().find("gen/wv")), soft == 1);
            for (size_t j = 0; j < d; ++j)
              worst = std::max(worst, std::abs(mix.z_mix.value()[j] - bm.z_mix[j]));
            for (size_t i = 0; i < k; ++i)
              worst = std::max(worst, std::abs(mix.y_mix.value()[i] - bm.y_mix[i]));
            for (size_t j = 0; j < d; ++j)
              for (size_t i = 0; i < nb; ++i)
                worst = std::max(worst, std::abs(mix.scores.value().at(j, i) - bm.scores[j][i]));
            ++cases;
          }
  c.expect(worst <= 1e-12, "fast path drifted from brute force by " + fmt(worst));
  if (!c.ok) return {false, "brute-force equivalence: " + c.why};
  return {true, "brute-force equivalence: " + std::to_string(cases) + " cases, max diff " +
                    fmt(worst) + ", " + fmt(elapsed_s(t0), "%.1f") + "s"};
}

// ---------------------------------------------------------------- criterion 4

Outcome criterion4() {
  auto t0 = Clock::now();
  Checker c;
  Rng rng(404);

  // noise off, one step: exactly a clamped gradient-ascent step
  {
    Rng fi = rng.child(1);
    FeatureExtractor f(mlp_spec(4, 3, 5, 3), fi);
    Rng hi = rng.child(2);
    Classifier h(3, 3, hi);
    Tensor x = rand_box({1, 4}, rng, 0.1, 0.9);
    Tensor y = onehot_rows(1, 3, rng);
    SgldConfig sc;
    sc.steps = 1;
    sc.eta = 0.05;
    sc.noise_scale_override = 0.0;
    Rng chain = rng.child(3);
    Tensor stepped = sgld_query(x, y, f, h, sc, chain);
    Tensor g = input_gradient(f, h, x, y);
    double drift = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
      double want = std::min(1.0, std::max(0.0, x[i] + sc.eta * g[i]));
      drift = std::max(drift, std::abs(stepped[i] - want));
    }
    c.expect(drift == 0.0, "noise-free step is not exact, drift " + fmt(drift));
  }

  // identity feature path reduces to the closed-form linear ascent
  double worst_trace = 0.0;
  {
    Rng fi = rng.child(4);
    FeatureExtractor f(mlp_spec(3, 3, 3, 3), fi);
    Tensor eye({3, 3});
    for (size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    *f.params().find("fc1/w") = eye;
    *f.params().find("fc1/b") = Tensor({1, 3});
    *f.params().find("fc2/w") = eye;
    *f.params().find("fc2/b") = Tensor({1, 3});
    Rng hi = rng.child(5);
    Classifier h(3, 3, hi);
    Tensor x = rand_box({1, 3}, rng, 0.3, 0.7);
    Tensor y = onehot_rows(1, 3, rng);
    auto trace =
        oracle::linear_ascent_trace(to_vec(x), to_vec(y), to_rows(*h.params().find("out/w")),
                                    to_vec(*h.params().find("out/b")), 0.1, 5, 0.0, 1.0);
    for (int steps = 1; steps <= 5; ++steps) {
      SgldConfig sc;
      sc.steps = steps;
      sc.eta = 0.1;
      sc.noise_scale_override = 0.0;
      Rng chain = rng.child(6);
      Tensor xt = sgld_query(x, y, f, h, sc, chain);
      for (size_t i = 0; i < 3; ++i)
        worst_trace = std::max(worst_trace, std::abs(xt[i] - trace[steps - 1][i]));
    }
    c.expect(worst_trace <= 1e-10, "linear ascent trace off by " + fmt(worst_trace));
  }

  // injected noise variance matches twice the step size
  double var_rel = 0.0, var = 0.0;
  {
    const size_t chains = 100, dim = 200;
    Rng fi = rng.child(7);
    FeatureExtractor f(mlp_spec(dim, 2, 2, 2), fi);
    Rng hi = rng.child(8);
    Classifier h(2, 2, hi);
    *h.params().find("out/w") = Tensor({2, 2});
    *h.params().find("out/b") = Tensor({1, 2});
    SgldConfig sc;
    sc.steps = 1;
    sc.eta = 0.005;
    Tensor seeds = Tensor::full({chains, dim}, 0.5);
    Tensor ys({chains, 2});
    for (size_t i = 0; i < chains; ++i) ys.at(i, i % 2) = 1.0;
    std::vector<Rng> crs;
    crs.reserve(chains);
    for (size_t i = 0; i < chains; ++i) crs.push_back(rng.child(9000 + i));
    Tensor out = sgld_query_batch(seeds, ys, f, h, sc, crs);
    const size_t n = out.size();
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) mean += out[i] - 0.5;
    mean /= static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) var += (out[i] - 0.5 - mean) * (out[i] - 0.5 - mean);
    var /= static_cast<double>(n - 1);
    var_rel = std::abs(var / (2.0 * sc.eta) - 1.0);
    c.expect(var_rel <= 0.05, "noise variance " + fmt(var) + " vs 2*eta " + fmt(2.0 * sc.eta) +
                                  " (" + fmt(100.0 * var_rel, "%.2f") + "% off over " +
                                  std::to_string(n) + " draws)");
  }

  if (!c.ok) return {false, "langevin reductions: " + c.why};
  return {true, "langevin reductions: exact noise-free step, trace err " + fmt(worst_trace) +
                    ", noise var within " + fmt(100.0 * var_rel, "%.2f") + "% of 2*eta, " +
                    fmt(elapsed_s(t0), "%.1f") + "s"};
}

// ------------------------------------------------------- criteria 5, 6 and 7

double target_accuracy(const RunMetrics& m, const std::string& name) {
  if (m.iters.empty()) return 0.0;
  const auto& ev = m.iters.back().eval;
  if (name.empty()) {
    double s = 0.0;
    int n = 0;
    for (size_t i = 1; i < ev.size(); ++i) {
      s += ev[i].second;
      ++n;
    }
    return n > 0 ? s / n : 0.0;
  }
  for (const auto& [domain, acc] : ev)
    if (domain == name) return acc;
  return 0.0;
}

std::string shared_pretrain(const RunConfig& base, const DomainSet& ds, uint64_t seed,
                            const std::string& dir) {
  fs::create_directories(dir);
  std::string ckpt = dir + "/pretrain.ckpt";
  RunConfig cfg = base;
  cfg.seed = seed;
  cfg.variant = "erm";
  cfg.out_dir.clear();
  resolve_config(cfg);
  Trainer tr(cfg, ds);
  tr.pretrain();
  tr.save_model(ckpt, 0);
  return ckpt;
}

double run_variant(const RunConfig& base, const DomainSet& ds, const std::string& variant,
                   uint64_t seed, const std::string& ckpt, const std::string& target) {
  RunConfig cfg = base;
  cfg.seed = seed;
  cfg.variant = variant;
  cfg.pretrain_checkpoint = ckpt;
  cfg.out_dir.clear();
  resolve_config(cfg);
  Trainer tr(cfg, ds);
  return target_accuracy(tr.run(), target);
}

Outcome uplift_benchmark(const std::string& config_path, const std::string& tag,
                         const std::string& target, double min_uplift_pts, double erm_lo,
                         double erm_hi, double budget_s) {
  auto t0 = Clock::now();
  Checker c;
  RunConfig base = load_config(config_path);
  DomainSet ds = load_manifest(base.manifest);
  std::string root = out_root() + "/" + tag;
  double erm_sum = 0.0, full_sum = 0.0;
  std::string per_seed;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    std::string ckpt = shared_pretrain(base, ds, seed, root + "/s" + std::to_string(seed));
    double erm = run_variant(base, ds, "erm", seed, ckpt, target);
    double full = run_variant(base, ds, "full", seed, ckpt, target);
    erm_sum += erm;
    full_sum += full;
    per_seed += (per_seed.empty() ? "" : " ") + fmt(100.0 * (full - erm), "%+.1f");
  }
  double erm_mean = erm_sum / 5.0, full_mean = full_sum / 5.0;
  double uplift = 100.0 * (full_mean - erm_mean);
  double secs = elapsed_s(t0);
  std::string stats = "baseline " + pct(erm_mean) + "%, mixup " + pct(full_mean) + "%, " +
                      fmt(uplift, "%+.2f") + " pts (per-seed " + per_seed + "), " +
                      fmt(secs, "%.1f") + "s";
  if (erm_lo > 0.0)
    c.expect(erm_mean >= erm_lo && erm_mean <= erm_hi,
             "baseline outside [" + pct(erm_lo) + "%, " + pct(erm_hi) + "%]: " + stats);
  c.expect(uplift >= min_uplift_pts,
           "uplift below " + fmt(min_uplift_pts, "%.0f") + " pts: " + stats);
  c.expect(secs < budget_s, "over the time budget: " + stats);
  if (!c.ok) return {false, tag + ": " + c.why};
  return {true, tag + ": " + stats};
}

Outcome criterion5() {
  return uplift_benchmark("configs/blobs.json", "blobs", "", 2.0, 0.0, 1.0, 300.0);
}

Outcome criterion6() {
  return uplift_benchmark("configs/digits.json", "digits", "usps", 3.0, 0.70, 0.82, 7200.0);
}

Outcome criterion7() {
  auto t0 = Clock::now();
  Checker c;
  RunConfig base = load_config("configs/blobs.json");
  DomainSet ds = load_manifest(base.manifest);
  std::string root = out_root() + "/ablations";
  const std::vector<std::string> variants{"full", "no_mix_tr", "no_adv", "no_mix_gen", "no_sgld"};
  std::vector<double> mean(variants.size(), 0.0);
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    std::string ckpt = shared_pretrain(base, ds, seed, root + "/s" + std::to_string(seed));
    for (size_t v = 0; v < variants.size(); ++v)
      mean[v] += run_variant(base, ds, variants[v], seed, ckpt, "") / 5.0;
  }
  std::string table;
  for (size_t v = 0; v < variants.size(); ++v)
    table += (v > 0 ? ", " : "") + variants[v] + " " + pct(mean[v]) + "%";
  for (size_t v = 1; v < variants.size(); ++v)
    c.expect(mean[0] >= mean[v], "full below " + variants[v]);
  for (size_t v = 2; v < variants.size(); ++v)
    c.expect(mean[1] <= mean[v], "no_mix_tr is not the worst variant");
  if (!c.ok) return {false, "ablations: " + c.why + " [" + table + "]"};
  return {true, "ablations: " + table + ", " + fmt(elapsed_s(t0), "%.1f") + "s"};
}

// ---------------------------------------------------------------- criterion 8

Outcome criterion8() {
  auto t0 = Clock::now();
  Checker c;
  const char* bin = std::getenv("MPBM_BIN");
  if (bin == nullptr) return {false, "reruns: MPBM_BIN is not set"};
  std::string root = out_root() + "/rerun";
  fs::remove_all(root);
  fs::create_directories(root);
  std::string overrides =
      " --override epochs=6 --override outer_iters=3 --override queries_per_outer=6"
      " --override generator_iters=3 --override finetune_iters=5 --override eval_every=1";
  std::string cmd = std::string(bin) + " train --config configs/blobs.json" + overrides;
  c.expect(run_cmd(cmd + " --out " + root + "/a", root + "/a.log") == 0, "first train run failed");
  c.expect(run_cmd(cmd + " --out " + root + "/b", root + "/b.log") == 0, "second train run failed");
  for (const char* f : {"metrics.jsonl", "summary.json"}) {
    std::string a = slurp(root + "/a/" + std::string(f));
    c.expect(!a.empty() && a == slurp(root + "/b/" + std::string(f)),
             std::string(f) + " differs between identical runs");
  }
  // the config record faithfully echoes the output directory, the one input
  // that must differ between the two runs; everything else has to match
  auto drop_out_dir = [](std::string s) {
    size_t at = s.find("\"out_dir\"");
    if (at == std::string::npos) return s;
    size_t end = s.find('\n', at);
    return s.erase(at, end == std::string::npos ? end : end - at);
  };
  std::string ra = slurp(root + "/a/resolved_config.json");
  c.expect(!ra.empty() && drop_out_dir(ra) == drop_out_dir(slurp(root + "/b/resolved_config.json")),
           "resolved_config.json differs beyond out_dir between identical runs");
  std::string ev = std::string(bin) + " eval --checkpoint " + root + "/a/model_final.ckpt" +
                   " --manifest configs/blobs-manifest.json";
  c.expect(run_cmd(ev + " --out " + root + "/e1.csv", root + "/e1.log") == 0, "first eval failed");
  c.expect(run_cmd(ev + " --out " + root + "/e2.csv", root + "/e2.log") == 0, "second eval failed");
  std::string e1 = slurp(root + "/e1.csv");
  c.expect(!e1.empty() && e1 == slurp(root + "/e2.csv"), "eval csv differs between identical runs");
  if (!c.ok) return {false, "reruns: " + c.why};
  return {true, "reruns: metrics, summary, resolved config and eval csv byte-identical, " +
                    fmt(elapsed_s(t0), "%.1f") + "s"};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      only = std::atoi(argv[++i]);
      if (only < 1 || only > 8) {
        std::fprintf(stderr, "--only expects a criterion number in 1..8\n");
        return 2;
      }
    } else {
      std::fprintf(stderr, "usage: %s [--only N]\n", argv[0]);
      return 2;
    }
  }

  struct Entry {
    int id;
    Outcome (*fn)();
  };
  const Entry entries[] = {{1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4},
                           {5, criterion5}, {6, criterion6}, {7, criterion7}, {8, criterion8}};
  bool all_pass = true;
  for (const Entry& e : entries) {
    if (only != 0 && e.id != only) continue;
    Outcome o;
    try {
      o = e.fn();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    std::printf("criterion %d: %s - %s\n", e.id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    all_pass = all_pass && o.pass;
  }
  return all_pass ? 0 : 1;
}
