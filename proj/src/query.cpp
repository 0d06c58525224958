#include "mpbm/query.hpp"

#include <cmath>
#include <stdexcept>

namespace mpbm {

Tensor sgld_query_batch(const Tensor& x_seeds, const Tensor& y_onehots,
                        const FeatureExtractor& f, const Classifier& h, const SgldConfig& cfg,
                        std::vector<Rng>& chain_rngs, bool* aborted) {
  if (cfg.steps < 1) throw std::runtime_error("sgld: steps must be >= 1");
  if (cfg.eta <= 0.0) throw std::runtime_error("sgld: eta must be > 0");
  size_t m = x_seeds.extent(0);
  if (y_onehots.extent(0) != m)
    throw std::runtime_error("sgld: " + std::to_string(m) + " seeds but " +
                             std::to_string(y_onehots.extent(0)) + " label rows");
  if (chain_rngs.size() != m)
    throw std::runtime_error("sgld: need one rng per chain");
  if (aborted) *aborted = false;

  double noise = cfg.noise_scale_override.value_or(std::sqrt(2.0 * cfg.eta));
  size_t row = x_seeds.size() / m;
  Tensor x = x_seeds;
  std::vector<bool> live(m, true);

  for (int t = 0; t < cfg.steps; ++t) {
    Tensor g = input_gradient(f, h, x, y_onehots);
    for (size_t i = 0; i < m; ++i) {
      if (!live[i]) continue;
      double* xi = x.data() + i * row;
      const double* gi = g.data() + i * row;
      bool finite = true;
      for (size_t k = 0; k < row; ++k)
        if (!std::isfinite(gi[k])) {
          finite = false;
          break;
        }
      if (!finite) {
        live[i] = false;
        if (aborted) *aborted = true;
        continue;
      }
      for (size_t k = 0; k < row; ++k) {
        double v = xi[k] + cfg.eta * gi[k];
        if (noise > 0.0) v += noise * chain_rngs[i].normal();
        xi[k] = std::min(cfg.clamp_hi, std::max(cfg.clamp_lo, v));
      }
    }
  }
  return x;
}

Tensor sgld_query(const Tensor& x_seed, const Tensor& y_onehot, const FeatureExtractor& f,
                  const Classifier& h, const SgldConfig& cfg, Rng& rng, bool* aborted) {
  std::vector<size_t> bshape = x_seed.shape();
  if (bshape.empty() || bshape[0] != 1) {
    bshape.insert(bshape.begin(), 1);
  }
  Tensor xb = x_seed.reshaped(bshape);
  std::vector<size_t> yshape = y_onehot.shape();
  Tensor yb = yshape.size() == 2 ? y_onehot : y_onehot.reshaped({1, y_onehot.size()});
  std::vector<Rng> rngs{rng};
  Tensor out = sgld_query_batch(xb, yb, f, h, cfg, rngs, aborted);
  rng = rngs[0];  // advance the caller's stream
  return out.reshaped(x_seed.shape());
}

}  // namespace mpbm
