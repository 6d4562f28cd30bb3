#include "prunecast/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "prunecast/errors.hpp"

namespace prunecast {

namespace linalg {

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
}  // namespace

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  MMap cm(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) cm.setZero();
    return;
  }
  CMap am(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  CMap bm(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  if (accumulate) {
    cm.noalias() += am * bm;
  } else {
    cm.noalias() = am * bm;
  }
}

void gemm_abt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  CMap am(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  CMap bm(b, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  MMap cm(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  cm.noalias() += am * bm.transpose();
}

void gemm_atb_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  CMap am(a, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
  CMap bm(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  MMap cm(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  cm.noalias() += am.transpose() * bm;
}

}  // namespace linalg

const Tensor& Var::value() const {
  if (!tape) throw StateError("Var is not attached to a tape");
  return tape->value(id);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf_ref(const Tensor& value, bool requires_grad) {
  Node n;
  n.external = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (consumed_) throw StateError("cannot record on a tape after backward");
  Node n;
  n.owned = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](std::size_t i) { return nodes_[i].requires_grad; });
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const { return nodes_.at(id).value(); }

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor(n.value().shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
  if (consumed_) throw StateError("backward already ran on this tape");
  if (value(loss.id).size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()));
  }
  consumed_ = true;
  grad_buffer(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor(n.value().shape(), 0.0);
  return n.grad;
}

Tensor Tape::sample_grad(Var mask) const {
  auto it = sample_grads_.find(mask.id);
  if (it != sample_grads_.end()) return it->second;
  return Tensor({sample_count_, value(mask.id).size()}, 0.0);
}

Tensor& Tape::sample_grad_buffer(std::size_t mask_id, std::size_t len) {
  auto it = sample_grads_.find(mask_id);
  if (it == sample_grads_.end()) {
    it = sample_grads_.emplace(mask_id, Tensor({sample_count_, len}, 0.0)).first;
  }
  return it->second;
}

namespace ad {

namespace {

Tape& tape_of(Var a, Var b) {
  if (!a.tape || a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

// Returns true when b broadcasts onto a via index i -> i % b.size().
void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return;
  const bool row_vec = b.rank() == 1 && b.size() == a.cols();
  const bool tiled = b.rank() == 2 && b.cols() == a.cols() && b.rows() > 0 && a.rows() % b.rows() == 0;
  if (!(row_vec || tiled) || (b.size() == 0 && a.size() != 0)) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                         shape_str(a.shape()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out({m, n});
  linalg::gemm(av.raw(), bv.raw(), out.raw(), m, k, n, false);
  const std::size_t ai = a.id, bi = b.id;
  return t.push(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    if (tp.requires_grad(ai)) linalg::gemm_abt_acc(g.raw(), bv.raw(), tp.grad_buffer(ai).raw(), m, n, k);
    if (tp.requires_grad(bi)) linalg::gemm_atb_acc(av.raw(), g.raw(), tp.grad_buffer(bi).raw(), k, m, n);
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_broadcast(av, bv, "add");
  Tensor out = av;
  const std::size_t bs = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % bs];
  const std::size_t ai = a.id, bi = b.id;
  return t.push(std::move(out), {ai, bi}, [ai, bi, bs](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bs] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_broadcast(av, bv, "mul");
  Tensor out = av;
  const std::size_t bs = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % bs];
  const std::size_t ai = a.id, bi = b.id;
  return t.push(std::move(out), {ai, bi}, [ai, bi, bs](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % bs];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bs] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& x : out.data()) x *= s;
  const std::size_t ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai, s](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Var sum(Var a) {
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  const std::size_t ai = a.id;
  return a.tape->push(Tensor({1}, {acc}), {ai}, [ai](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& x : out.data()) x = x > 0.0 ? x : 0.0;
  const std::size_t ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ai);
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) ga[i] += g[i];
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

Var gelu(Var a) {
  Tensor out = a.value();
  for (auto& x : out.data()) x = gelu_value(x);
  const std::size_t ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ai);
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = av[i];
      const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      ga[i] += g[i] * d;
    }
  });
}

namespace {

void softmax_row(const double* in, double* out, std::size_t n, std::size_t valid) {
  // Entries at index >= valid are masked to probability 0.
  if (valid == 0) {
    for (std::size_t j = 0; j < n; ++j) out[j] = 0.0;
    return;
  }
  double mx = in[0];
  for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < valid; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < valid; ++j) out[j] /= z;
  for (std::size_t j = valid; j < n; ++j) out[j] = 0.0;
}

}  // namespace

Var softmax_rows(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i) softmax_row(av.raw() + i * c, out.raw() + i * c, c, c);
  const std::size_t ai = a.id, self = a.tape->size();
  return a.tape->push(std::move(out), {ai}, [ai, self, r, c](Tape& tp, const Tensor& g) {
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i) {
      const double* yr = y.raw() + i * c;
      const double* gr = g.raw() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < c; ++j) ga.raw()[i * c + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var layer_norm(Var a, Var gain, Var offset, double eps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const Tensor& av = a.value();
  const std::size_t r = av.rows(), c = av.cols();
  if (gain.value().size() != c || offset.value().size() != c) {
    throw DimensionError("layer_norm: gain/offset " + shape_str(gain.shape()) + " for input " +
                         shape_str(av.shape()));
  }
  Tensor xhat(av.shape());
  std::vector<double> inv(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = av.raw() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(c);
    inv[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) xhat.raw()[i * c + j] = (x[j] - mean) * inv[i];
  }
  const Tensor& gv = gain.value();
  const Tensor& ov = offset.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.raw()[i * c + j] = xhat.raw()[i * c + j] * gv[j] + ov[j];

  const std::size_t ai = a.id, gi = gain.id, oi = offset.id;
  return a.tape->push(std::move(out), {ai, gi, oi},
                      [ai, gi, oi, r, c, xhat = std::move(xhat), inv = std::move(inv)](Tape& tp, const Tensor& g) {
                        const Tensor& gv = tp.value(gi);
                        if (tp.requires_grad(gi)) {
                          Tensor& gg = tp.grad_buffer(gi);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) gg[j] += g.raw()[i * c + j] * xhat.raw()[i * c + j];
                        }
                        if (tp.requires_grad(oi)) {
                          Tensor& go = tp.grad_buffer(oi);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) go[j] += g.raw()[i * c + j];
                        }
                        if (tp.requires_grad(ai)) {
                          Tensor& ga = tp.grad_buffer(ai);
                          const double inv_c = 1.0 / static_cast<double>(c);
                          for (std::size_t i = 0; i < r; ++i) {
                            const double* gr = g.raw() + i * c;
                            const double* xh = xhat.raw() + i * c;
                            double m1 = 0.0, m2 = 0.0;
                            for (std::size_t j = 0; j < c; ++j) {
                              const double gx = gr[j] * gv[j];
                              m1 += gx;
                              m2 += gx * xh[j];
                            }
                            m1 *= inv_c;
                            m2 *= inv_c;
                            for (std::size_t j = 0; j < c; ++j) {
                              ga.raw()[i * c + j] += inv[i] * (gr[j] * gv[j] - m1 - xh[j] * m2);
                            }
                          }
                        }
                      });
}

Var rms_norm(Var a, Var gain, double eps) {
  if (!(eps > 0.0)) throw ContractError("rms_norm: eps must be positive");
  const Tensor& av = a.value();
  const std::size_t r = av.rows(), c = av.cols();
  if (gain.value().size() != c) {
    throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " for input " + shape_str(av.shape()));
  }
  std::vector<double> inv(r);
  Tensor xhat(av.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = av.raw() + i * c;
    double ms = 0.0;
    for (std::size_t j = 0; j < c; ++j) ms += x[j] * x[j];
    ms /= static_cast<double>(c);
    inv[i] = 1.0 / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < c; ++j) xhat.raw()[i * c + j] = x[j] * inv[i];
  }
  const Tensor& gv = gain.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.raw()[i * c + j] = xhat.raw()[i * c + j] * gv[j];
  const std::size_t ai = a.id, gi = gain.id;
  return a.tape->push(std::move(out), {ai, gi},
                      [ai, gi, r, c, xhat = std::move(xhat), inv = std::move(inv)](Tape& tp, const Tensor& g) {
                        const Tensor& gv = tp.value(gi);
                        if (tp.requires_grad(gi)) {
                          Tensor& gg = tp.grad_buffer(gi);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) gg[j] += g.raw()[i * c + j] * xhat.raw()[i * c + j];
                        }
                        if (tp.requires_grad(ai)) {
                          Tensor& ga = tp.grad_buffer(ai);
                          const double inv_c = 1.0 / static_cast<double>(c);
                          for (std::size_t i = 0; i < r; ++i) {
                            const double* gr = g.raw() + i * c;
                            const double* xh = xhat.raw() + i * c;
                            double m = 0.0;
                            for (std::size_t j = 0; j < c; ++j) m += gr[j] * gv[j] * xh[j];
                            m *= inv_c;
                            for (std::size_t j = 0; j < c; ++j) {
                              ga.raw()[i * c + j] += inv[i] * (gr[j] * gv[j] - xh[j] * m);
                            }
                          }
                        }
                      });
}

Var mse_loss(Var pred, Var target) {
  Tape& t = tape_of(pred, target);
  const Tensor& p = pred.value();
  const Tensor& y = target.value();
  if (p.shape() != y.shape()) {
    throw DimensionError("mse_loss: " + shape_str(p.shape()) + " vs " + shape_str(y.shape()));
  }
  if (p.size() == 0) throw ContractError("mse_loss: empty operands");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - y[i]) * (p[i] - y[i]);
  const double n = static_cast<double>(p.size());
  const std::size_t pi = pred.id, yi = target.id;
  return t.push(Tensor({1}, {acc / n}), {pi, yi}, [pi, yi, n](Tape& tp, const Tensor& g) {
    const Tensor& p = tp.value(pi);
    const Tensor& y = tp.value(yi);
    const double s = 2.0 * g[0] / n;
    if (tp.requires_grad(pi)) {
      Tensor& gp = tp.grad_buffer(pi);
      for (std::size_t i = 0; i < p.size(); ++i) gp[i] += s * (p[i] - y[i]);
    }
    if (tp.requires_grad(yi)) {
      Tensor& gy = tp.grad_buffer(yi);
      for (std::size_t i = 0; i < p.size(); ++i) gy[i] -= s * (p[i] - y[i]);
    }
  });
}

Var mask_columns(Var x, Var mask) {
  Tape& t = tape_of(x, mask);
  const Tensor& xv = x.value();
  const Tensor& mv = mask.value();
  if (mv.rank() != 1 || mv.size() != xv.cols()) {
    throw DimensionError("mask_columns: mask " + shape_str(mv.shape()) + " for input " + shape_str(xv.shape()));
  }
  const std::size_t r = xv.rows(), c = xv.cols();
  const std::size_t samples = t.sample_count();
  if (samples > 0 && r % samples != 0) {
    throw ContractError("mask_columns: " + std::to_string(r) + " rows do not split into " +
                        std::to_string(samples) + " samples");
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.raw()[i * c + j] *= mv[j];
  const std::size_t xi = x.id, mi = mask.id;
  return t.push(std::move(out), {xi, mi}, [xi, mi, r, c, samples](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(xi);
    const Tensor& mv = tp.value(mi);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_buffer(xi);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx.raw()[i * c + j] += g.raw()[i * c + j] * mv[j];
    }
    if (tp.requires_grad(mi)) {
      Tensor& gm = tp.grad_buffer(mi);
      Tensor* per = samples > 0 ? &tp.sample_grad_buffer(mi, c) : nullptr;
      const std::size_t block = samples > 0 ? r / samples : r;
      for (std::size_t i = 0; i < r; ++i) {
        double* ps = per ? per->raw() + (i / block) * c : nullptr;
        for (std::size_t j = 0; j < c; ++j) {
          const double v = g.raw()[i * c + j] * xv.raw()[i * c + j];
          gm[j] += v;
          if (ps) ps[j] += v;
        }
      }
    }
  });
}

Var gather_columns(Var a, const std::vector<std::size_t>& index) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows(), c = av.cols(), n = index.size();
  for (auto i : index) {
    if (i >= c) throw DimensionError("gather_columns: index " + std::to_string(i) + " out of " + shape_str(av.shape()));
  }
  Tensor out({r, n});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out.raw()[i * n + j] = av.raw()[i * c + index[j]];
  const std::size_t ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai, index, r, c, n](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.raw()[i * c + index[j]] += g.raw()[i * n + j];
  });
}

Var scatter_columns(Var a, const std::vector<std::size_t>& index, std::size_t width) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows(), n = av.cols();
  if (index.size() != n) {
    throw DimensionError("scatter_columns: " + std::to_string(index.size()) + " indices for " + shape_str(av.shape()));
  }
  for (auto i : index) {
    if (i >= width) throw DimensionError("scatter_columns: index " + std::to_string(i) + " >= width " + std::to_string(width));
  }
  Tensor out({r, width}, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out.raw()[i * width + index[j]] = av.raw()[i * n + j];
  const std::size_t ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai, index, r, n, width](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.raw()[i * n + j] += g.raw()[i * width + index[j]];
  });
}

Var take_rows(Var a, const std::vector<std::size_t>& rows) {
  const Tensor& av = a.value();
  const std::size_t c = av.cols();
  for (auto r : rows) {
    if (r >= av.rows()) throw DimensionError("take_rows: row " + std::to_string(r) + " out of " + shape_str(av.shape()));
  }
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(av.raw() + rows[i] * c, c, out.raw() + i * c);
  const std::size_t ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai, rows, c](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga.raw()[rows[i] * c + j] += g.raw()[i * c + j];
  });
}

namespace {

// Copies columns [c0, c1) of rows [r0, r0+n) into a contiguous block.
void copy_block(const Tensor& src, std::size_t r0, std::size_t n, std::size_t c0, std::size_t c1, double* dst) {
  const std::size_t c = src.cols(), w = c1 - c0;
  for (std::size_t i = 0; i < n; ++i) std::copy_n(src.raw() + (r0 + i) * c + c0, w, dst + i * w);
}

void add_block(Tensor& dst, std::size_t r0, std::size_t n, std::size_t c0, std::size_t c1, const double* src) {
  const std::size_t c = dst.cols(), w = c1 - c0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) dst.raw()[(r0 + i) * c + c0 + j] += src[i * w + j];
}

void check_layout(const ad::AttentionLayout& l, const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t rows = l.samples * l.tokens;
  if (l.qk_offsets.size() != l.v_offsets.size() || l.v_offsets.empty()) {
    throw ContractError("attention: malformed head layout");
  }
  if (q.rows() != rows || k.rows() != rows || v.rows() != rows || q.cols() != l.qk_offsets.back() ||
      k.cols() != l.qk_offsets.back() || v.cols() != l.v_offsets.back()) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()) + " do not match layout");
  }
}

}  // namespace

Var attention(Var q, Var k, Var v, const AttentionLayout& layout) {
  Tape& t = tape_of(q, k);
  tape_of(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  check_layout(layout, qv, kv, vv);
  const std::size_t N = layout.samples, T = layout.tokens, H = layout.heads();
  const std::size_t vw = layout.v_offsets.back();
  Tensor out({N * T, vw}, 0.0);
  // Probabilities per (sample, head), each T x T.
  std::vector<double> probs(N * H * T * T);
  std::vector<double> qb, kb, vb, sb(T * T), ob;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t q0 = layout.qk_offsets[h], q1 = layout.qk_offsets[h + 1];
      const std::size_t v0 = layout.v_offsets[h], v1 = layout.v_offsets[h + 1];
      const std::size_t dq = q1 - q0, dv = v1 - v0;
      qb.resize(T * dq);
      kb.resize(T * dq);
      vb.resize(T * dv);
      ob.assign(T * dv, 0.0);
      copy_block(qv, n * T, T, q0, q1, qb.data());
      copy_block(kv, n * T, T, q0, q1, kb.data());
      copy_block(vv, n * T, T, v0, v1, vb.data());
      std::fill(sb.begin(), sb.end(), 0.0);
      linalg::gemm_abt_acc(qb.data(), kb.data(), sb.data(), T, dq, T);
      double* p = probs.data() + (n * H + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t j = 0; j < T; ++j) sb[i * T + j] *= layout.scale;
        softmax_row(sb.data() + i * T, p + i * T, T, layout.causal ? i + 1 : T);
      }
      linalg::gemm(p, vb.data(), ob.data(), T, T, dv, false);
      add_block(out, n * T, T, v0, v1, ob.data());
    }
  }
  const std::size_t qi = q.id, ki = k.id, vi = v.id;
  return t.push(std::move(out), {qi, ki, vi},
                [qi, ki, vi, layout, probs = std::move(probs)](Tape& tp, const Tensor& g) {
                  const Tensor& qv = tp.value(qi);
                  const Tensor& kv = tp.value(ki);
                  const Tensor& vv = tp.value(vi);
                  const std::size_t N = layout.samples, T = layout.tokens, H = layout.heads();
                  Tensor* gq = tp.requires_grad(qi) ? &tp.grad_buffer(qi) : nullptr;
                  Tensor* gk = tp.requires_grad(ki) ? &tp.grad_buffer(ki) : nullptr;
                  Tensor* gv = tp.requires_grad(vi) ? &tp.grad_buffer(vi) : nullptr;
                  std::vector<double> qb, kb, vb, gb, dp(T * T), ds(T * T), tmp;
                  for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t h = 0; h < H; ++h) {
                      const std::size_t q0 = layout.qk_offsets[h], q1 = layout.qk_offsets[h + 1];
                      const std::size_t v0 = layout.v_offsets[h], v1 = layout.v_offsets[h + 1];
                      const std::size_t dq = q1 - q0, dv = v1 - v0;
                      const double* p = probs.data() + (n * H + h) * T * T;
                      gb.resize(T * dv);
                      copy_block(g, n * T, T, v0, v1, gb.data());
                      vb.resize(T * dv);
                      copy_block(vv, n * T, T, v0, v1, vb.data());
                      if (gv) {
                        tmp.assign(T * dv, 0.0);
                        linalg::gemm_atb_acc(p, gb.data(), tmp.data(), T, T, dv);
                        add_block(*gv, n * T, T, v0, v1, tmp.data());
                      }
                      if (!gq && !gk) continue;
                      std::fill(dp.begin(), dp.end(), 0.0);
                      linalg::gemm_abt_acc(gb.data(), vb.data(), dp.data(), T, dv, T);
                      for (std::size_t i = 0; i < T; ++i) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < T; ++j) dot += dp[i * T + j] * p[i * T + j];
                        for (std::size_t j = 0; j < T; ++j) {
                          ds[i * T + j] = p[i * T + j] * (dp[i * T + j] - dot) * layout.scale;
                        }
                      }
                      qb.resize(T * dq);
                      kb.resize(T * dq);
                      copy_block(qv, n * T, T, q0, q1, qb.data());
                      copy_block(kv, n * T, T, q0, q1, kb.data());
                      if (gq) {
                        tmp.assign(T * dq, 0.0);
                        linalg::gemm(ds.data(), kb.data(), tmp.data(), T, T, dq, true);
                        add_block(*gq, n * T, T, q0, q1, tmp.data());
                      }
                      if (gk) {
                        tmp.assign(T * dq, 0.0);
                        linalg::gemm_atb_acc(ds.data(), qb.data(), tmp.data(), T, T, dq);
                        add_block(*gk, n * T, T, q0, q1, tmp.data());
                      }
                    }
                  }
                });
}

}  // namespace ad

}  // namespace prunecast
