#pragma once

#include "mpbm/rng.hpp"
#include "mpbm/tensor.hpp"

namespace mpbm {

// Row-normalized feature correlation structure: row j is a probability
// distribution over features, used to scale queries and keys per feature.
struct CorrelationMatrix {
  Tensor c;  // d x d, rows on the simplex
  size_t d = 0;
};

// Pearson coefficient between every pair of feature columns of an N x d matrix.
// Constant columns correlate 0 with everything else and 1 with themselves.
// When N exceeds max_rows and an rng is given, a uniform row subsample is used.
Tensor pearson_matrix(const Tensor& features, size_t max_rows = 10000, Rng* rng = nullptr);

// Row-wise |.| then L1 normalization of a raw correlation matrix.
CorrelationMatrix normalize_rows(const Tensor& raw);

// m @ diag(c_j) as elementwise column scaling; never materializes the diagonal.
Tensor diag_scale(const CorrelationMatrix& c, size_t j, const Tensor& m);

}  // namespace mpbm
