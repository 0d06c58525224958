#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

#include "mpbm/tensor.hpp"

namespace mpbm {

class Tape;

namespace detail {
struct Node {
  Tensor value;
  Tensor grad;  // allocated at backward time
  bool requires_grad = false;
  std::function<void(Node&)> backward;  // pushes this node's grad into its parents
};
}  // namespace detail

// Handle to a value recorded on a Tape. Valid while the Tape is alive.
class Var {
 public:
  Var() = default;
  const Tensor& value() const { return n_->value; }
  const Tensor& grad() const;
  // true once a backward sweep has deposited gradient into this node
  bool has_grad() const { return n_->grad.size() != 0; }
  bool requires_grad() const { return n_->requires_grad; }
  bool valid() const { return n_ != nullptr; }

 private:
  friend class Tape;
  explicit Var(detail::Node* n) : n_(n) {}
  detail::Node* n_ = nullptr;
};

enum class Reduction { Mean, Sum };

// Reverse-mode tape: records operations, replays them backward once.
class Tape {
 public:
  Var leaf(Tensor v, bool requires_grad = true);
  Var constant(Tensor v) { return leaf(std::move(v), false); }

  // pointwise / structural
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_rowvec(Var m, Var r);  // N x d plus broadcast 1 x d
  Var mul_rowvec(Var m, Var r);  // N x d times broadcast 1 x d
  Var transpose(Var a);
  Var reshape(Var a, std::vector<size_t> shape);
  Var concat_rows(const std::vector<Var>& rows);  // stack k tensors of shape 1 x d

  // linear algebra
  Var matmul(Var a, Var b);     // a @ b
  Var matmul_nt(Var a, Var b);  // a @ b^T

  // nonlinearities
  Var relu(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var log(Var a);
  Var clamp(Var a, double lo, double hi);
  Var softmax_rows(Var a);  // row-wise, max-subtracted

  // reductions
  Var sum(Var a);
  Var mean(Var a);
  Var row_sum(Var a);   // N x M -> N x 1
  Var col_mean(Var a);  // N x M -> 1 x M

  // -sum_k target_k log softmax(logits)_k per row, reduced over rows
  Var cross_entropy(Var logits, Var target, Reduction red = Reduction::Mean);

  // convolution stack (inputs N x C x H x W)
  Var conv2d(Var x, Var w, Var b, size_t stride = 1, size_t pad = 0);
  Var maxpool2(Var x);  // 2x2, stride 2

  // seeds d(loss)=1 and sweeps recorded nodes once in reverse order
  void backward(Var loss);

  size_t num_nodes() const { return nodes_.size(); }

 private:
  friend class Var;
  detail::Node* alloc(Tensor value, bool requires_grad);
  Var record(Tensor value, bool requires_grad, std::function<void(detail::Node&)> back);
  std::deque<detail::Node> nodes_;
  bool swept_ = false;
};

// Gradients of a scalar loss w.r.t. a set of recorded tensors.
// A wrt entry that does not require grad (or never fed the loss) yields zeros;
// any_detached is set when that happens.
std::vector<Tensor> grad(Tape& tape, Var loss, const std::vector<Var>& wrt,
                         bool* any_detached = nullptr);

}  // namespace mpbm
