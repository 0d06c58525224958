#include "mpbm/correlation.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace mpbm {

Tensor pearson_matrix(const Tensor& features, size_t max_rows, Rng* rng) {
  if (features.ndim() != 2)
    throw std::runtime_error("pearson_matrix: expected N x d features, got " +
                             features.shape_str());
  size_t N = features.rows(), d = features.cols();
  if (N < 2) throw std::runtime_error("pearson_matrix: need at least 2 rows");

  std::vector<size_t> rows(N);
  for (size_t i = 0; i < N; ++i) rows[i] = i;
  if (N > max_rows && rng != nullptr) {
    rng->shuffle(rows);
    rows.resize(max_rows);
  }
  size_t n = rows.size();

  std::vector<double> mean(d, 0.0);
  for (size_t r : rows)
    for (size_t k = 0; k < d; ++k) mean[k] += features[r * d + k];
  for (size_t k = 0; k < d; ++k) mean[k] /= static_cast<double>(n);

  // centered second moments
  std::vector<double> cov(d * d, 0.0);
  std::vector<double> var(d, 0.0);
  std::vector<double> cent(d);
  for (size_t r : rows) {
    for (size_t k = 0; k < d; ++k) cent[k] = features[r * d + k] - mean[k];
    for (size_t i = 0; i < d; ++i) {
      var[i] += cent[i] * cent[i];
      for (size_t j = i + 1; j < d; ++j) cov[i * d + j] += cent[i] * cent[j];
    }
  }

  Tensor out({d, d});
  for (size_t i = 0; i < d; ++i) {
    out[i * d + i] = 1.0;
    for (size_t j = i + 1; j < d; ++j) {
      double denom = std::sqrt(var[i] * var[j]);
      double r = denom > 0.0 ? cov[i * d + j] / denom : 0.0;
      out[i * d + j] = r;
      out[j * d + i] = r;
    }
  }
  return out;
}

CorrelationMatrix normalize_rows(const Tensor& raw) {
  if (raw.ndim() != 2 || raw.rows() != raw.cols())
    throw std::runtime_error("normalize_rows: expected square matrix, got " + raw.shape_str());
  size_t d = raw.rows();
  CorrelationMatrix cm;
  cm.d = d;
  cm.c = Tensor({d, d});
  for (size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (size_t k = 0; k < d; ++k) s += std::abs(raw[j * d + k]);
    if (s <= 0.0)
      throw std::runtime_error("normalize_rows: all-zero row " + std::to_string(j));
    for (size_t k = 0; k < d; ++k) cm.c[j * d + k] = std::abs(raw[j * d + k]) / s;
  }
  return cm;
}

Tensor diag_scale(const CorrelationMatrix& c, size_t j, const Tensor& m) {
  if (j >= c.d) throw std::runtime_error("diag_scale: feature index " + std::to_string(j) +
                                         " out of range for d=" + std::to_string(c.d));
  if (m.ndim() != 2 || m.cols() != c.d)
    throw std::runtime_error("diag_scale: expected last dim " + std::to_string(c.d) + ", got " +
                             m.shape_str());
  size_t N = m.rows(), d = c.d;
  Tensor out({N, d});
  const double* cj = c.c.data() + j * d;
  for (size_t i = 0; i < N; ++i)
    for (size_t k = 0; k < d; ++k) out[i * d + k] = m[i * d + k] * cj[k];
  return out;
}

}  // namespace mpbm
