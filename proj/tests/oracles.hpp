#pragma once

// Independent reference implementations used as test oracles: central finite
// differences, per-feature mixup transcription with materialized diagonals,
// textbook Pearson correlation, and a closed-form linear-model ascent trace.
// Everything here is plain loops over std::vector on purpose.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "mpbm/tensor.hpp"

namespace oracle {

// max_i |analytic_i - central_fd_i| / max(1e-4, |analytic|_inf, |fd|_inf)
inline double fd_rel_error(const std::function<double()>& loss,
                           const std::vector<mpbm::Tensor*>& params,
                           const std::vector<mpbm::Tensor>& analytic, double h = 1e-5) {
  double worst = 0.0, scale = 1e-4;
  for (size_t p = 0; p < params.size(); ++p) {
    mpbm::Tensor& t = *params[p];
    for (size_t i = 0; i < t.size(); ++i) {
      double save = t[i];
      t[i] = save + h;
      double fp = loss();
      t[i] = save - h;
      double fm = loss();
      t[i] = save;
      double fd = (fp - fm) / (2.0 * h);
      double a = analytic[p][i];
      worst = std::max(worst, std::abs(a - fd));
      scale = std::max(scale, std::max(std::abs(a), std::abs(fd)));
    }
  }
  return worst / scale;
}

inline std::vector<double> softmax_vec(const std::vector<double>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  std::vector<double> e(v.size());
  double sum = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    e[i] = std::exp(v[i] - mx);
    sum += e[i];
  }
  for (double& x : e) x /= sum;
  return e;
}

struct BruteMix {
  std::vector<double> z_mix;                // d
  std::vector<double> y_mix;                // K
  std::vector<std::vector<double>> scores;  // d rows of N_b attention weights
};

// Direct per-feature transcription: for each feature j materialize the full
// d x d diagonal matrix diag(c_j), form q_j and K_j with explicit triple
// loops, softmax the scaled dot products, and mix values and labels.
inline BruteMix brute_mixup(const std::vector<double>& zq,                // d
                            const std::vector<std::vector<double>>& zb,   // N_b x d
                            const std::vector<std::vector<double>>& yb,   // N_b x K
                            const std::vector<std::vector<double>>& c,    // d x d
                            const std::vector<std::vector<double>>& wq,   // d x d
                            const std::vector<std::vector<double>>& wk,   // d x d
                            const std::vector<std::vector<double>>& wv,   // d x d
                            bool label_softmax) {
  size_t d = zq.size(), nb = zb.size(), k = yb[0].size();
  // V = Z_b W^V
  std::vector<std::vector<double>> v(nb, std::vector<double>(d, 0.0));
  for (size_t i = 0; i < nb; ++i)
    for (size_t col = 0; col < d; ++col)
      for (size_t t = 0; t < d; ++t) v[i][col] += zb[i][t] * wv[t][col];

  BruteMix out;
  out.z_mix.assign(d, 0.0);
  out.scores.assign(d, std::vector<double>(nb, 0.0));
  std::vector<double> mean_a(nb, 0.0);
  for (size_t j = 0; j < d; ++j) {
    std::vector<std::vector<double>> diag(d, std::vector<double>(d, 0.0));
    for (size_t t = 0; t < d; ++t) diag[t][t] = c[j][t];
    // q_j = z_q diag(c_j) W^Q
    std::vector<double> scaled_q(d, 0.0);
    for (size_t col = 0; col < d; ++col)
      for (size_t t = 0; t < d; ++t) scaled_q[col] += zq[t] * diag[t][col];
    std::vector<double> qj(d, 0.0);
    for (size_t col = 0; col < d; ++col)
      for (size_t t = 0; t < d; ++t) qj[col] += scaled_q[t] * wq[t][col];
    // K_j = Z_b diag(c_j) W^K, row per base instance
    std::vector<double> sj(nb, 0.0);
    for (size_t i = 0; i < nb; ++i) {
      std::vector<double> scaled(d, 0.0);
      for (size_t col = 0; col < d; ++col)
        for (size_t t = 0; t < d; ++t) scaled[col] += zb[i][t] * diag[t][col];
      std::vector<double> kj(d, 0.0);
      for (size_t col = 0; col < d; ++col)
        for (size_t t = 0; t < d; ++t) kj[col] += scaled[t] * wk[t][col];
      for (size_t t = 0; t < d; ++t) sj[i] += qj[t] * kj[t];
      sj[i] /= std::sqrt(static_cast<double>(d));
    }
    std::vector<double> aj = softmax_vec(sj);
    out.scores[j] = aj;
    for (size_t i = 0; i < nb; ++i) {
      out.z_mix[j] += aj[i] * v[i][j];
      mean_a[i] += aj[i] / static_cast<double>(d);
    }
  }
  std::vector<double> w = label_softmax ? softmax_vec(mean_a) : mean_a;
  out.y_mix.assign(k, 0.0);
  for (size_t i = 0; i < nb; ++i)
    for (size_t t = 0; t < k; ++t) out.y_mix[t] += w[i] * yb[i][t];
  return out;
}

// textbook Pearson coefficient between two columns
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// Ascent trace for logits = x W + b: T steps of x += eta * (p - y) W^T with
// clamping, p = softmax(x W + b). Returns the iterate after every step.
inline std::vector<std::vector<double>> linear_ascent_trace(
    std::vector<double> x, const std::vector<double>& y,
    const std::vector<std::vector<double>>& w, const std::vector<double>& b, double eta,
    int steps, double lo, double hi) {
  size_t d = x.size(), k = b.size();
  std::vector<std::vector<double>> trace;
  for (int t = 0; t < steps; ++t) {
    std::vector<double> logits(k, 0.0);
    for (size_t c = 0; c < k; ++c) {
      for (size_t i = 0; i < d; ++i) logits[c] += x[i] * w[i][c];
      logits[c] += b[c];
    }
    std::vector<double> p = softmax_vec(logits);
    for (size_t i = 0; i < d; ++i) {
      double g = 0.0;
      for (size_t c = 0; c < k; ++c) g += (p[c] - y[c]) * w[i][c];
      x[i] = std::min(hi, std::max(lo, x[i] + eta * g));
    }
    trace.push_back(x);
  }
  return trace;
}

}  // namespace oracle
