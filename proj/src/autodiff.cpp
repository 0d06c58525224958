#include "mpbm/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <utility>

namespace mpbm {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

CMap as_mat(const Tensor& t, size_t r, size_t c) { return CMap(t.data(), r, c); }
MMap as_mat(Tensor& t, size_t r, size_t c) { return MMap(t.data(), r, c); }

void ensure_grad(detail::Node* n) {
  if (n->grad.size() == 0) n->grad = Tensor(n->value.shape());
}

// accumulate src into n's grad if n participates in differentiation
void acc(detail::Node* n, const Tensor& src) {
  if (!n->requires_grad) return;
  ensure_grad(n);
  for (size_t i = 0; i < src.size(); ++i) n->grad[i] += src[i];
}

void require_2d(const Tensor& t, const char* who) {
  if (t.ndim() != 2)
    throw std::runtime_error(std::string(who) + ": expected 2-d tensor, got " + t.shape_str());
}

}  // namespace

const Tensor& Var::grad() const {
  ensure_grad(n_);
  return n_->grad;
}

detail::Node* Tape::alloc(Tensor value, bool requires_grad) {
  nodes_.emplace_back();
  detail::Node& n = nodes_.back();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return &n;
}

Var Tape::leaf(Tensor v, bool requires_grad) { return Var(alloc(std::move(v), requires_grad)); }

Var Tape::record(Tensor value, bool requires_grad, std::function<void(detail::Node&)> back) {
  detail::Node* n = alloc(std::move(value), requires_grad);
  if (requires_grad) n->backward = std::move(back);
  return Var(n);
}

void Tape::backward(Var loss) {
  if (swept_) throw std::runtime_error("tape: backward already run");
  swept_ = true;
  if (loss.value().size() != 1)
    throw std::runtime_error("tape: backward needs a scalar loss, got " + loss.value().shape_str());
  detail::Node* root = loss.n_;
  if (!root->requires_grad) return;
  ensure_grad(root);
  root->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& n = *it;
    if (n.backward && n.grad.size() != 0) n.backward(n);
  }
}

std::vector<Tensor> grad(Tape& tape, Var loss, const std::vector<Var>& wrt, bool* any_detached) {
  tape.backward(loss);
  if (any_detached) *any_detached = false;
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Var& v : wrt) {
    if (any_detached && (!v.requires_grad() || !v.has_grad())) *any_detached = true;
    out.push_back(v.grad());
  }
  return out;
}

Var Tape::add(Var a, Var b) {
  if (!a.value().same_shape(b.value()))
    throw std::runtime_error("add: shape mismatch " + a.value().shape_str() + " vs " +
                             b.value().shape_str());
  Tensor out(a.value().shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  detail::Node *pa = a.n_, *pb = b.n_;
  bool rg = pa->requires_grad || pb->requires_grad;
  return record(std::move(out), rg, [pa, pb](detail::Node& self) {
    acc(pa, self.grad);
    acc(pb, self.grad);
  });
}

Var Tape::sub(Var a, Var b) {
  if (!a.value().same_shape(b.value()))
    throw std::runtime_error("sub: shape mismatch " + a.value().shape_str() + " vs " +
                             b.value().shape_str());
  Tensor out(a.value().shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  detail::Node *pa = a.n_, *pb = b.n_;
  bool rg = pa->requires_grad || pb->requires_grad;
  return record(std::move(out), rg, [pa, pb](detail::Node& self) {
    acc(pa, self.grad);
    if (pb->requires_grad) {
      ensure_grad(pb);
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  if (!a.value().same_shape(b.value()))
    throw std::runtime_error("mul: shape mismatch " + a.value().shape_str() + " vs " +
                             b.value().shape_str());
  Tensor out(a.value().shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  detail::Node *pa = a.n_, *pb = b.n_;
  bool rg = pa->requires_grad || pb->requires_grad;
  return record(std::move(out), rg, [pa, pb](detail::Node& self) {
    if (pa->requires_grad) {
      ensure_grad(pa);
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      ensure_grad(pb);
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

Var Tape::scale(Var a, double c) {
  Tensor out(a.value().shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = c * a.value()[i];
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa, c](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += c * self.grad[i];
  });
}

Var Tape::add_rowvec(Var m, Var r) {
  require_2d(m.value(), "add_rowvec");
  require_2d(r.value(), "add_rowvec");
  size_t N = m.value().rows(), d = m.value().cols();
  if (r.value().rows() != 1 || r.value().cols() != d)
    throw std::runtime_error("add_rowvec: row vector " + r.value().shape_str() +
                             " does not broadcast over " + m.value().shape_str());
  Tensor out({N, d});
  for (size_t i = 0; i < N; ++i)
    for (size_t k = 0; k < d; ++k) out[i * d + k] = m.value()[i * d + k] + r.value()[k];
  detail::Node *pm = m.n_, *pr = r.n_;
  bool rg = pm->requires_grad || pr->requires_grad;
  return record(std::move(out), rg, [pm, pr, N, d](detail::Node& self) {
    acc(pm, self.grad);
    if (pr->requires_grad) {
      ensure_grad(pr);
      for (size_t i = 0; i < N; ++i)
        for (size_t k = 0; k < d; ++k) pr->grad[k] += self.grad[i * d + k];
    }
  });
}

Var Tape::mul_rowvec(Var m, Var r) {
  require_2d(m.value(), "mul_rowvec");
  require_2d(r.value(), "mul_rowvec");
  size_t N = m.value().rows(), d = m.value().cols();
  if (r.value().rows() != 1 || r.value().cols() != d)
    throw std::runtime_error("mul_rowvec: row vector " + r.value().shape_str() +
                             " does not broadcast over " + m.value().shape_str());
  Tensor out({N, d});
  for (size_t i = 0; i < N; ++i)
    for (size_t k = 0; k < d; ++k) out[i * d + k] = m.value()[i * d + k] * r.value()[k];
  detail::Node *pm = m.n_, *pr = r.n_;
  bool rg = pm->requires_grad || pr->requires_grad;
  return record(std::move(out), rg, [pm, pr, N, d](detail::Node& self) {
    if (pm->requires_grad) {
      ensure_grad(pm);
      for (size_t i = 0; i < N; ++i)
        for (size_t k = 0; k < d; ++k) pm->grad[i * d + k] += self.grad[i * d + k] * pr->value[k];
    }
    if (pr->requires_grad) {
      ensure_grad(pr);
      for (size_t i = 0; i < N; ++i)
        for (size_t k = 0; k < d; ++k) pr->grad[k] += self.grad[i * d + k] * pm->value[i * d + k];
    }
  });
}

Var Tape::transpose(Var a) {
  require_2d(a.value(), "transpose");
  size_t R = a.value().rows(), C = a.value().cols();
  Tensor out({C, R});
  as_mat(out, C, R) = as_mat(a.value(), R, C).transpose();
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa, R, C](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    as_mat(pa->grad, R, C) += as_mat(self.grad, C, R).transpose();
  });
}

Var Tape::reshape(Var a, std::vector<size_t> shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
  });
}

Var Tape::concat_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw std::runtime_error("concat_rows: empty input");
  size_t d = rows[0].value().cols();
  for (const Var& r : rows) {
    require_2d(r.value(), "concat_rows");
    if (r.value().rows() != 1 || r.value().cols() != d)
      throw std::runtime_error("concat_rows: expected 1x" + std::to_string(d) + " rows, got " +
                               r.value().shape_str());
  }
  size_t N = rows.size();
  Tensor out({N, d});
  std::vector<detail::Node*> parents(N);
  bool rg = false;
  for (size_t i = 0; i < N; ++i) {
    parents[i] = rows[i].n_;
    rg = rg || parents[i]->requires_grad;
    for (size_t k = 0; k < d; ++k) out[i * d + k] = rows[i].value()[k];
  }
  return record(std::move(out), rg, [parents, d](detail::Node& self) {
    for (size_t i = 0; i < parents.size(); ++i) {
      if (!parents[i]->requires_grad) continue;
      ensure_grad(parents[i]);
      for (size_t k = 0; k < d; ++k) parents[i]->grad[k] += self.grad[i * d + k];
    }
  });
}

Var Tape::matmul(Var a, Var b) {
  require_2d(a.value(), "matmul");
  require_2d(b.value(), "matmul");
  size_t M = a.value().rows(), K = a.value().cols();
  if (b.value().rows() != K)
    throw std::runtime_error("matmul: inner dimensions disagree " + a.value().shape_str() + " x " +
                             b.value().shape_str());
  size_t N = b.value().cols();
  Tensor out({M, N});
  as_mat(out, M, N).noalias() = as_mat(a.value(), M, K) * as_mat(b.value(), K, N);
  detail::Node *pa = a.n_, *pb = b.n_;
  bool rg = pa->requires_grad || pb->requires_grad;
  return record(std::move(out), rg, [pa, pb, M, K, N](detail::Node& self) {
    CMap g(self.grad.data(), M, N);
    if (pa->requires_grad) {
      ensure_grad(pa);
      as_mat(pa->grad, M, K).noalias() += g * as_mat(pb->value, K, N).transpose();
    }
    if (pb->requires_grad) {
      ensure_grad(pb);
      as_mat(pb->grad, K, N).noalias() += as_mat(pa->value, M, K).transpose() * g;
    }
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  require_2d(a.value(), "matmul_nt");
  require_2d(b.value(), "matmul_nt");
  size_t M = a.value().rows(), K = a.value().cols();
  if (b.value().cols() != K)
    throw std::runtime_error("matmul_nt: inner dimensions disagree " + a.value().shape_str() +
                             " x " + b.value().shape_str() + "^T");
  size_t N = b.value().rows();
  Tensor out({M, N});
  as_mat(out, M, N).noalias() = as_mat(a.value(), M, K) * as_mat(b.value(), N, K).transpose();
  detail::Node *pa = a.n_, *pb = b.n_;
  bool rg = pa->requires_grad || pb->requires_grad;
  return record(std::move(out), rg, [pa, pb, M, K, N](detail::Node& self) {
    CMap g(self.grad.data(), M, N);
    if (pa->requires_grad) {
      ensure_grad(pa);
      as_mat(pa->grad, M, K).noalias() += g * as_mat(pb->value, N, K);
    }
    if (pb->requires_grad) {
      ensure_grad(pb);
      as_mat(pb->grad, N, K).noalias() += g.transpose() * as_mat(pa->value, M, K);
    }
  });
}

Var Tape::relu(Var a) {
  Tensor out(a.value().shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] > 0.0 ? a.value()[i] : 0.0;
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (pa->value[i] > 0.0) pa->grad[i] += self.grad[i];
  });
}

Var Tape::tanh(Var a) {
  Tensor out(a.value().shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.value()[i]);
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

Var Tape::sigmoid(Var a) {
  Tensor out(a.value().shape());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = a.value()[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] * self.value[i] * (1.0 - self.value[i]);
  });
}

Var Tape::log(Var a) {
  Tensor out(a.value().shape());
  for (size_t i = 0; i < out.size(); ++i) {
    if (a.value()[i] <= 0.0)
      throw std::runtime_error("log: non-positive input " + std::to_string(a.value()[i]));
    out[i] = std::log(a.value()[i]);
  }
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] / pa->value[i];
  });
}

Var Tape::clamp(Var a, double lo, double hi) {
  Tensor out(a.value().shape());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = a.value()[i];
    out[i] = x < lo ? lo : (x > hi ? hi : x);
  }
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa, lo, hi](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double x = pa->value[i];
      if (x > lo && x < hi) pa->grad[i] += self.grad[i];
    }
  });
}

Var Tape::softmax_rows(Var a) {
  require_2d(a.value(), "softmax_rows");
  size_t N = a.value().rows(), d = a.value().cols();
  Tensor out({N, d});
  for (size_t i = 0; i < N; ++i) {
    const double* row = a.value().data() + i * d;
    double mx = row[0];
    for (size_t k = 1; k < d; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (size_t k = 0; k < d; ++k) {
      out[i * d + k] = std::exp(row[k] - mx);
      z += out[i * d + k];
    }
    for (size_t k = 0; k < d; ++k) out[i * d + k] /= z;
  }
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa, N, d](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < N; ++i) {
      const double* p = self.value.data() + i * d;
      const double* g = self.grad.data() + i * d;
      double dot = 0.0;
      for (size_t k = 0; k < d; ++k) dot += p[k] * g[k];
      for (size_t k = 0; k < d; ++k) pa->grad[i * d + k] += p[k] * (g[k] - dot);
    }
  });
}

Var Tape::sum(Var a) {
  double s = 0.0;
  for (size_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
  detail::Node* pa = a.n_;
  return record(Tensor::scalar(s), pa->requires_grad, [pa](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += self.grad[0];
  });
}

Var Tape::mean(Var a) {
  size_t n = a.value().size();
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += a.value()[i];
  detail::Node* pa = a.n_;
  double inv = 1.0 / static_cast<double>(n);
  return record(Tensor::scalar(s * inv), pa->requires_grad, [pa, inv](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += self.grad[0] * inv;
  });
}

Var Tape::row_sum(Var a) {
  require_2d(a.value(), "row_sum");
  size_t N = a.value().rows(), d = a.value().cols();
  Tensor out({N, 1});
  for (size_t i = 0; i < N; ++i) {
    double s = 0.0;
    for (size_t k = 0; k < d; ++k) s += a.value()[i * d + k];
    out[i] = s;
  }
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa, N, d](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < N; ++i)
      for (size_t k = 0; k < d; ++k) pa->grad[i * d + k] += self.grad[i];
  });
}

Var Tape::col_mean(Var a) {
  require_2d(a.value(), "col_mean");
  size_t N = a.value().rows(), d = a.value().cols();
  Tensor out({1, d});
  double inv = 1.0 / static_cast<double>(N);
  for (size_t k = 0; k < d; ++k) {
    double s = 0.0;
    for (size_t i = 0; i < N; ++i) s += a.value()[i * d + k];
    out[k] = s * inv;
  }
  detail::Node* pa = a.n_;
  return record(std::move(out), pa->requires_grad, [pa, N, d, inv](detail::Node& self) {
    if (!pa->requires_grad) return;
    ensure_grad(pa);
    for (size_t i = 0; i < N; ++i)
      for (size_t k = 0; k < d; ++k) pa->grad[i * d + k] += self.grad[k] * inv;
  });
}

Var Tape::cross_entropy(Var logits, Var target, Reduction red) {
  require_2d(logits.value(), "cross_entropy");
  require_2d(target.value(), "cross_entropy");
  if (!logits.value().same_shape(target.value()))
    throw std::runtime_error("cross_entropy: shape mismatch " + logits.value().shape_str() +
                             " vs " + target.value().shape_str());
  size_t N = logits.value().rows(), K = logits.value().cols();
  Tensor logp({N, K});
  Tensor prob({N, K});
  double total = 0.0;
  for (size_t i = 0; i < N; ++i) {
    const double* t = target.value().data() + i * K;
    double tsum = 0.0;
    for (size_t k = 0; k < K; ++k) {
      if (t[k] < -1e-6)
        throw std::runtime_error("cross_entropy: negative target entry " + std::to_string(t[k]));
      tsum += t[k];
    }
    if (std::abs(tsum - 1.0) > 1e-6)
      throw std::runtime_error("cross_entropy: target row " + std::to_string(i) +
                               " off the simplex (sum " + std::to_string(tsum) + ")");
    const double* l = logits.value().data() + i * K;
    double mx = l[0];
    for (size_t k = 1; k < K; ++k) mx = std::max(mx, l[k]);
    double z = 0.0;
    for (size_t k = 0; k < K; ++k) z += std::exp(l[k] - mx);
    double lse = mx + std::log(z);
    double li = 0.0;
    for (size_t k = 0; k < K; ++k) {
      logp[i * K + k] = l[k] - lse;
      prob[i * K + k] = std::exp(logp[i * K + k]);
      li -= t[k] * logp[i * K + k];
    }
    total += li;
  }
  double inv = red == Reduction::Mean ? 1.0 / static_cast<double>(N) : 1.0;
  detail::Node *pl = logits.n_, *pt = target.n_;
  bool rg = pl->requires_grad || pt->requires_grad;
  return record(Tensor::scalar(total * inv), rg,
                [pl, pt, N, K, inv, logp = std::move(logp),
                 prob = std::move(prob)](detail::Node& self) {
                  double s = self.grad[0] * inv;
                  if (pl->requires_grad) {
                    ensure_grad(pl);
                    for (size_t i = 0; i < N; ++i) {
                      const double* t = pt->value.data() + i * K;
                      double tsum = 0.0;
                      for (size_t k = 0; k < K; ++k) tsum += t[k];
                      for (size_t k = 0; k < K; ++k)
                        pl->grad[i * K + k] += s * (prob[i * K + k] * tsum - t[k]);
                    }
                  }
                  if (pt->requires_grad) {
                    ensure_grad(pt);
                    for (size_t i = 0; i < N * K; ++i) pt->grad[i] += s * (-logp[i]);
                  }
                });
}

namespace {

struct ConvDims {
  size_t N, C, H, W, F, kh, kw, OH, OW;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, size_t stride, size_t pad) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw std::runtime_error("conv2d: expected 4-d input and weight, got " + x.shape_str() +
                             " and " + w.shape_str());
  ConvDims d{};
  d.N = x.extent(0);
  d.C = x.extent(1);
  d.H = x.extent(2);
  d.W = x.extent(3);
  d.F = w.extent(0);
  d.kh = w.extent(2);
  d.kw = w.extent(3);
  if (w.extent(1) != d.C)
    throw std::runtime_error("conv2d: channel mismatch " + x.shape_str() + " vs " + w.shape_str());
  if (d.H + 2 * pad < d.kh || d.W + 2 * pad < d.kw)
    throw std::runtime_error("conv2d: kernel larger than padded input");
  d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
  d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
  return d;
}

// gather one sample's receptive fields into a (C*kh*kw) x (OH*OW) matrix
void im2col(const double* x, const ConvDims& d, size_t stride, size_t pad, double* cols) {
  for (size_t c = 0; c < d.C; ++c)
    for (size_t ki = 0; ki < d.kh; ++ki)
      for (size_t kj = 0; kj < d.kw; ++kj) {
        size_t r = (c * d.kh + ki) * d.kw + kj;
        for (size_t oi = 0; oi < d.OH; ++oi)
          for (size_t oj = 0; oj < d.OW; ++oj) {
            long ii = static_cast<long>(oi * stride + ki) - static_cast<long>(pad);
            long jj = static_cast<long>(oj * stride + kj) - static_cast<long>(pad);
            double v = 0.0;
            if (ii >= 0 && jj >= 0 && ii < static_cast<long>(d.H) && jj < static_cast<long>(d.W))
              v = x[(c * d.H + ii) * d.W + jj];
            cols[r * (d.OH * d.OW) + oi * d.OW + oj] = v;
          }
      }
}

// scatter-add a (C*kh*kw) x (OH*OW) gradient back onto one sample
void col2im_add(const double* cols, const ConvDims& d, size_t stride, size_t pad, double* gx) {
  for (size_t c = 0; c < d.C; ++c)
    for (size_t ki = 0; ki < d.kh; ++ki)
      for (size_t kj = 0; kj < d.kw; ++kj) {
        size_t r = (c * d.kh + ki) * d.kw + kj;
        for (size_t oi = 0; oi < d.OH; ++oi)
          for (size_t oj = 0; oj < d.OW; ++oj) {
            long ii = static_cast<long>(oi * stride + ki) - static_cast<long>(pad);
            long jj = static_cast<long>(oj * stride + kj) - static_cast<long>(pad);
            if (ii >= 0 && jj >= 0 && ii < static_cast<long>(d.H) && jj < static_cast<long>(d.W))
              gx[(c * d.H + ii) * d.W + jj] += cols[r * (d.OH * d.OW) + oi * d.OW + oj];
          }
      }
}

}  // namespace

Var Tape::conv2d(Var x, Var w, Var b, size_t stride, size_t pad) {
  ConvDims dm = conv_dims(x.value(), w.value(), stride, pad);
  if (b.value().ndim() != 2 || b.value().rows() != 1 || b.value().cols() != dm.F)
    throw std::runtime_error("conv2d: bias must be 1x" + std::to_string(dm.F) + ", got " +
                             b.value().shape_str());
  size_t ckk = dm.C * dm.kh * dm.kw, osz = dm.OH * dm.OW;
  Tensor out({dm.N, dm.F, dm.OH, dm.OW});
  std::vector<double> cols(ckk * osz);
  CMap wm(w.value().data(), dm.F, ckk);
  for (size_t n = 0; n < dm.N; ++n) {
    im2col(x.value().data() + n * dm.C * dm.H * dm.W, dm, stride, pad, cols.data());
    MMap om(out.data() + n * dm.F * osz, dm.F, osz);
    om.noalias() = wm * CMap(cols.data(), ckk, osz);
    for (size_t f = 0; f < dm.F; ++f) {
      double bias = b.value()[f];
      double* o = out.data() + (n * dm.F + f) * osz;
      for (size_t i = 0; i < osz; ++i) o[i] += bias;
    }
  }
  detail::Node *px = x.n_, *pw = w.n_, *pb = b.n_;
  bool rg = px->requires_grad || pw->requires_grad || pb->requires_grad;
  return record(std::move(out), rg, [px, pw, pb, dm, stride, pad, ckk, osz](detail::Node& self) {
    std::vector<double> cols(ckk * osz);
    std::vector<double> gcols(ckk * osz);
    for (size_t n = 0; n < dm.N; ++n) {
      CMap g(self.grad.data() + n * dm.F * osz, dm.F, osz);
      if (pw->requires_grad || px->requires_grad)
        im2col(px->value.data() + n * dm.C * dm.H * dm.W, dm, stride, pad, cols.data());
      if (pw->requires_grad) {
        ensure_grad(pw);
        MMap(pw->grad.data(), dm.F, ckk).noalias() += g * CMap(cols.data(), ckk, osz).transpose();
      }
      if (px->requires_grad) {
        ensure_grad(px);
        MMap(gcols.data(), ckk, osz).noalias() =
            CMap(pw->value.data(), dm.F, ckk).transpose() * g;
        col2im_add(gcols.data(), dm, stride, pad, px->grad.data() + n * dm.C * dm.H * dm.W);
      }
      if (pb->requires_grad) {
        ensure_grad(pb);
        for (size_t f = 0; f < dm.F; ++f) {
          const double* gp = self.grad.data() + (n * dm.F + f) * osz;
          double s = 0.0;
          for (size_t i = 0; i < osz; ++i) s += gp[i];
          pb->grad[f] += s;
        }
      }
    }
  });
}

Var Tape::maxpool2(Var x) {
  if (x.value().ndim() != 4)
    throw std::runtime_error("maxpool2: expected 4-d input, got " + x.value().shape_str());
  size_t N = x.value().extent(0), C = x.value().extent(1);
  size_t H = x.value().extent(2), W = x.value().extent(3);
  size_t OH = H / 2, OW = W / 2;
  if (OH == 0 || OW == 0) throw std::runtime_error("maxpool2: input too small " + x.value().shape_str());
  Tensor out({N, C, OH, OW});
  std::vector<size_t> argmax(out.size());
  for (size_t nc = 0; nc < N * C; ++nc) {
    const double* xp = x.value().data() + nc * H * W;
    for (size_t oi = 0; oi < OH; ++oi)
      for (size_t oj = 0; oj < OW; ++oj) {
        size_t best = (2 * oi) * W + 2 * oj;
        double bv = xp[best];
        for (size_t di = 0; di < 2; ++di)
          for (size_t dj = 0; dj < 2; ++dj) {
            size_t idx = (2 * oi + di) * W + 2 * oj + dj;
            if (xp[idx] > bv) {
              bv = xp[idx];
              best = idx;
            }
          }
        size_t o = nc * OH * OW + oi * OW + oj;
        out[o] = bv;
        argmax[o] = nc * H * W + best;
      }
  }
  detail::Node* px = x.n_;
  return record(std::move(out), px->requires_grad,
                [px, argmax = std::move(argmax)](detail::Node& self) {
                  if (!px->requires_grad) return;
                  ensure_grad(px);
                  for (size_t i = 0; i < self.grad.size(); ++i)
                    px->grad[argmax[i]] += self.grad[i];
                });
}

}  // namespace mpbm
