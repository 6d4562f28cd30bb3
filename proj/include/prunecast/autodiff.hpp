#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <vector>

#include "prunecast/tensor.hpp"

namespace prunecast {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Append-only reverse-mode tape. Nodes are stored in creation order, which
/// is a topological order by construction. A tape may run backward once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf owning its value.
  Var leaf(Tensor value, bool requires_grad = false);
  /// Leaf viewing an external tensor, which must outlive the tape.
  Var leaf_ref(const Tensor& value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Used by op implementations.
  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer for node `id`, zero-initialized on first touch.
  Tensor& grad_buffer(std::size_t id);

  void backward(Var loss);
  bool consumed() const noexcept { return consumed_; }

  /// d loss / d var. Zeros when the loss does not depend on var.
  Tensor grad(Var v) const;

  /// When set to N > 0, mask_columns() also records per-sample gradient
  /// sums, with the rows of every masked tensor split into N equal blocks.
  void track_samples(std::size_t n) { sample_count_ = n; }
  std::size_t sample_count() const noexcept { return sample_count_; }
  /// Per-sample sums for a mask node: [N x mask_len]. Zeros if untouched.
  Tensor sample_grad(Var mask) const;
  Tensor& sample_grad_buffer(std::size_t mask_id, std::size_t len);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    const Tensor& value() const { return external ? *external : owned; }
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::size_t sample_count_ = 0;
  std::map<std::size_t, Tensor> sample_grads_;
};

namespace ad {

// Matrix product of 2-D operands.
Var matmul(Var a, Var b);

// Elementwise add/mul. `b` may equal a's shape, be a length-cols vector
// (broadcast over rows), or be a [r x cols] matrix with a.rows() % r == 0
// (tiled over a leading batch folded into rows).
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);

Var relu(Var a);
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Var gelu(Var a);
double gelu_value(double x);

Var softmax_rows(Var a);
Var layer_norm(Var a, Var gain, Var offset, double eps);
Var rms_norm(Var a, Var gain, double eps);

// Mean of squared differences over every element; returns a [1] tensor.
Var mse_loss(Var pred, Var target);

// x * m with a length-cols mask broadcast over rows. Records per-sample
// mask gradients when the tape tracks samples.
Var mask_columns(Var x, Var mask);

Var gather_columns(Var a, const std::vector<std::size_t>& index);
Var scatter_columns(Var a, const std::vector<std::size_t>& index, std::size_t width);
Var take_rows(Var a, const std::vector<std::size_t>& rows);

/// Column groups of one attention call. qk_offsets/v_offsets have one more
/// entry than there are heads; head h owns [off[h], off[h+1]).
struct AttentionLayout {
  std::size_t samples = 0;
  std::size_t tokens = 0;
  std::vector<std::size_t> qk_offsets;
  std::vector<std::size_t> v_offsets;
  double scale = 1.0;
  bool causal = false;

  std::size_t heads() const { return v_offsets.empty() ? 0 : v_offsets.size() - 1; }
};

// Per-sample, per-head softmax(q k^T * scale) v over rows grouped by sample.
// Output is [samples*tokens x v_offsets.back()].
Var attention(Var q, Var k, Var v, const AttentionLayout& layout);

}  // namespace ad

namespace linalg {

// c (+)= a * b, all row-major. Used by the tape and by inference code.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate);
// c += a * b^T where a is [m x k], b is [n x k].
void gemm_abt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n);
// c += a^T * b where a is [k x m], b is [k x n].
void gemm_atb_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n);

}  // namespace linalg

}  // namespace prunecast
