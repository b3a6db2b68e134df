#pragma once

// Minimal tape-based reverse-mode automatic differentiation over dense
// row-major matrices. Every tensor in the library is a Matrix whose rows are
// tokens (or pixels) and whose columns are channels.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace uso {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

namespace ag {

/// A named, persistent tensor owned by a model. Gradients accumulate into
/// `grad` during Tape::backward when `trainable` is set.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Ordered collection of parameters with stable addresses.
class ParameterSet {
 public:
  Parameter& add(std::string name, Matrix init) {
    for (const auto& p : params_) {
      if (p->name == name) throw std::logic_error("duplicate parameter: " + name);
    }
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->value = std::move(init);
    p->zero_grad();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter* find(const std::string& name) {
    for (auto& p : params_) {
      if (p->name == name) return p.get();
    }
    return nullptr;
  }
  const Parameter* find(const std::string& name) const {
    for (const auto& p : params_) {
      if (p->name == name) return p.get();
    }
    return nullptr;
  }
  Parameter& at(const std::string& name) {
    auto* p = find(name);
    if (!p) throw std::out_of_range("no parameter named " + name);
    return *p;
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.cbegin(); }
  auto end() const { return params_.cend(); }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  double item() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var{this, nodes_.size() - 1};
  }

  /// Leaf for a parameter. Frozen parameters and no-grad mode give constants.
  Var param(Parameter& p) {
    const bool track = grad_enabled_ && p.trainable;
    nodes_.push_back(Node{p.value, {}, {}, track ? &p : nullptr, track});
    if (track) ++tracked_;
    return Var{this, nodes_.size() - 1};
  }

  /// Record an op result. The node tracks gradients only when grad mode is
  /// on and at least one input does.
  Var record(Matrix value, bool any_input_tracked, Backward bw) {
    const bool track = grad_enabled_ && any_input_tracked;
    nodes_.push_back(Node{std::move(value), {}, track ? std::move(bw) : Backward{}, nullptr, track});
    if (track) ++tracked_;
    return Var{this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Accumulate `g` into the gradient slot of node `id` if it tracks grads.
  template <class Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a scalar (1×1) node. Parameter gradients are added
  /// to Parameter::grad.
  void backward(Var loss) {
    if (loss.tape != this) throw std::logic_error("backward: var from another tape");
    Node& root = nodes_[loss.id];
    if (root.value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!root.requires_grad) return;
    root.grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) {
        Matrix g = std::move(n.grad);
        n.grad = Matrix();
        n.backward(*this, g);
      } else if (n.param) {
        n.param->grad += n.grad;
        n.grad = Matrix();
      }
    }
  }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  /// Number of nodes that participate in backpropagation.
  std::size_t tracked_ops() const { return tracked_; }
  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    tracked_ = 0;
  }

 private:
  std::vector<Node> nodes_;
  std::size_t tracked_ = 0;
  bool grad_enabled_ = true;
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

/// RAII scope that disables gradient recording.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.grad_enabled()) {
    tape_.set_grad_enabled(false);
  }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

namespace detail {
inline void check_same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw std::logic_error("vars live on different tapes");
}
inline void check_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.value(), b.value(), "add");
  Tape& t = *a.tape;
  return t.record(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Matrix& g) {
                    tp.accumulate(a.id, g);
                    tp.accumulate(b.id, g);
                  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.value(), b.value(), "sub");
  Tape& t = *a.tape;
  return t.record(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Matrix& g) {
                    tp.accumulate(a.id, g);
                    tp.accumulate(b.id, -g);
                  });
}

inline Var mul(Var a, Var b) {
  detail::check_same_tape(a, b);
  detail::check_shape(a.value(), b.value(), "mul");
  Tape& t = *a.tape;
  return t.record(a.value().cwiseProduct(b.value()), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(a.id)) tp.accumulate(a.id, g.cwiseProduct(b.value()));
                    if (tp.requires_grad(b.id)) tp.accumulate(b.id, g.cwiseProduct(a.value()));
                  });
}

inline Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, a.requires_grad(),
                        [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a.id, g * s); });
}

inline Var add_scalar(Var a, double s) {
  return a.tape->record(a.value().array() + s, a.requires_grad(),
                        [a](Tape& tp, const Matrix& g) { tp.accumulate(a.id, g); });
}

/// a (n×k) · b (k×m)
inline Var matmul(Var a, Var b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out;
  out.noalias() = a.value() * b.value();
  return a.tape->record(std::move(out), a.requires_grad() || b.requires_grad(),
                        [a, b](Tape& tp, const Matrix& g) {
                          if (tp.requires_grad(a.id)) {
                            Matrix ga;
                            ga.noalias() = g * b.value().transpose();
                            tp.accumulate(a.id, ga);
                          }
                          if (tp.requires_grad(b.id)) {
                            Matrix gb;
                            gb.noalias() = a.value().transpose() * g;
                            tp.accumulate(b.id, gb);
                          }
                        });
}

/// Adds a 1×m row to every row of x (n×m).
inline Var add_row(Var x, Var row) {
  detail::check_same_tape(x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) throw std::invalid_argument("add_row: bad row shape");
  Matrix out = x.value().rowwise() + row.value().row(0);
  return x.tape->record(std::move(out), x.requires_grad() || row.requires_grad(),
                        [x, row](Tape& tp, const Matrix& g) {
                          tp.accumulate(x.id, g);
                          if (tp.requires_grad(row.id)) tp.accumulate(row.id, g.colwise().sum());
                        });
}

/// Multiplies every row of x (n×m) elementwise by a 1×m row.
inline Var mul_row(Var x, Var row) {
  detail::check_same_tape(x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) throw std::invalid_argument("mul_row: bad row shape");
  Matrix out = x.value().array().rowwise() * row.value().row(0).array();
  return x.tape->record(std::move(out), x.requires_grad() || row.requires_grad(),
                        [x, row](Tape& tp, const Matrix& g) {
                          if (tp.requires_grad(x.id)) {
                            Matrix gx = g.array().rowwise() * row.value().row(0).array();
                            tp.accumulate(x.id, gx);
                          }
                          if (tp.requires_grad(row.id)) {
                            tp.accumulate(row.id, g.cwiseProduct(x.value()).colwise().sum());
                          }
                        });
}

/// Broadcasts a 1×m row into n rows.
inline Var repeat_rows(Var row, Eigen::Index n) {
  if (row.rows() != 1) throw std::invalid_argument("repeat_rows: expects a single row");
  Matrix out = row.value().replicate(n, 1);
  return row.tape->record(std::move(out), row.requires_grad(),
                          [row](Tape& tp, const Matrix& g) { tp.accumulate(row.id, g.colwise().sum()); });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    if (p.tape != &t) throw std::logic_error("concat_rows: mixed tapes");
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    tracked = tracked || p.requires_grad();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.record(std::move(out), tracked, [parts](Tape& tp, const Matrix& g) {
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      if (tp.requires_grad(p.id)) tp.accumulate(p.id, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    tracked = tracked || p.requires_grad();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.record(std::move(out), tracked, [parts](Tape& tp, const Matrix& g) {
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      if (tp.requires_grad(p.id)) tp.accumulate(p.id, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

inline Var slice_rows(Var x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) throw std::out_of_range("slice_rows");
  Matrix out = x.value().middleRows(begin, count);
  return x.tape->record(std::move(out), x.requires_grad(), [x, begin, count](Tape& tp, const Matrix& g) {
    Matrix full = Matrix::Zero(x.rows(), x.cols());
    full.middleRows(begin, count) = g;
    tp.accumulate(x.id, full);
  });
}

/// Gathers rows `index` of x (used for embedding lookup).
inline Var gather_rows(Var x, std::vector<int> index) {
  Matrix out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw std::out_of_range("gather_rows: index");
    out.row(static_cast<Eigen::Index>(i)) = x.value().row(index[i]);
  }
  return x.tape->record(std::move(out), x.requires_grad(), [x, index](Tape& tp, const Matrix& g) {
    Matrix full = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t i = 0; i < index.size(); ++i) full.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(x.id, full);
  });
}

inline Var transpose(Var x) {
  Matrix out = x.value().transpose();
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x](Tape& tp, const Matrix& g) { tp.accumulate(x.id, g.transpose()); });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Var relu(Var x) {
  Matrix out = x.value().cwiseMax(0.0);
  return x.tape->record(std::move(out), x.requires_grad(), [x](Tape& tp, const Matrix& g) {
    Matrix gx = (x.value().array() > 0.0).select(g, 0.0);
    tp.accumulate(x.id, gx);
  });
}

inline Var sigmoid(Var x) {
  Matrix out = (1.0 + (-x.value().array()).exp()).inverse();
  Matrix saved = out;
  return x.tape->record(std::move(out), x.requires_grad(), [x, saved](Tape& tp, const Matrix& g) {
    Matrix gx = g.array() * saved.array() * (1.0 - saved.array());
    tp.accumulate(x.id, gx);
  });
}

inline Var silu(Var x) {
  const Matrix& v = x.value();
  Matrix sig = (1.0 + (-v.array()).exp()).inverse();
  Matrix out = v.cwiseProduct(sig);
  return x.tape->record(std::move(out), x.requires_grad(), [x, sig](Tape& tp, const Matrix& g) {
    const auto& v = x.value().array();
    Matrix gx = g.array() * (sig.array() * (1.0 + v * (1.0 - sig.array())));
    tp.accumulate(x.id, gx);
  });
}

/// tanh-approximated GELU
inline Var gelu(Var x) {
  static constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const auto& v = x.value().array();
  Eigen::ArrayXXd inner = k * (v + 0.044715 * v.cube());
  Eigen::ArrayXXd th = inner.tanh();
  Matrix out = (0.5 * v * (1.0 + th)).matrix();
  return x.tape->record(std::move(out), x.requires_grad(), [x, th](Tape& tp, const Matrix& g) {
    const auto& v = x.value().array();
    Eigen::ArrayXXd dinner = k * (1.0 + 3.0 * 0.044715 * v.square());
    Eigen::ArrayXXd d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th.square()) * dinner;
    Matrix gx = (g.array() * d).matrix();
    tp.accumulate(x.id, gx);
  });
}

inline Var square(Var x) {
  Matrix out = x.value().array().square().matrix();
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x](Tape& tp, const Matrix& g) { tp.accumulate(x.id, 2.0 * g.cwiseProduct(x.value())); });
}

inline Var exp(Var x) {
  Matrix out = x.value().array().exp().matrix();
  Matrix saved = out;
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x, saved](Tape& tp, const Matrix& g) { tp.accumulate(x.id, g.cwiseProduct(saved)); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape->record(std::move(out), x.requires_grad(), [x](Tape& tp, const Matrix& g) {
    tp.accumulate(x.id, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

inline Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

/// Column sums: n×m → 1×m.
inline Var sum_rows(Var x) {
  Matrix out = x.value().colwise().sum();
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x](Tape& tp, const Matrix& g) { tp.accumulate(x.id, g.replicate(x.rows(), 1)); });
}

/// Row sums: n×m → n×1.
inline Var sum_cols(Var x) {
  Matrix out = x.value().rowwise().sum();
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x](Tape& tp, const Matrix& g) { tp.accumulate(x.id, g.replicate(1, x.cols())); });
}

/// Frobenius inner product of two equal-shape tensors, as a 1×1.
inline Var dot(Var a, Var b) { return sum(mul(a, b)); }

// ---------------------------------------------------------------------------
// Normalization and attention
// ---------------------------------------------------------------------------

/// RMS normalization over each row, times a learned 1×m gain.
inline Var rms_norm(Var x, Var gain, double eps = 1e-6) {
  detail::check_same_tape(x, gain);
  const Matrix& v = x.value();
  const Eigen::Index m = v.cols();
  Eigen::VectorXd inv = ((v.array().square().rowwise().sum() / static_cast<double>(m)) + eps).rsqrt();
  Matrix normed = v.array().colwise() * inv.array();
  Matrix out = normed.array().rowwise() * gain.value().row(0).array();
  return x.tape->record(std::move(out), x.requires_grad() || gain.requires_grad(),
                        [x, gain, inv, normed, m](Tape& tp, const Matrix& g) {
                          if (tp.requires_grad(gain.id)) {
                            tp.accumulate(gain.id, g.cwiseProduct(normed).colwise().sum());
                          }
                          if (tp.requires_grad(x.id)) {
                            Matrix gn = g.array().rowwise() * gain.value().row(0).array();
                            Eigen::VectorXd proj = gn.cwiseProduct(normed).rowwise().sum() / static_cast<double>(m);
                            Matrix gx = (gn - (normed.array().colwise() * proj.array()).matrix()).array().colwise() *
                                        inv.array();
                            tp.accumulate(x.id, gx);
                          }
                        });
}

/// Divides each row by its L2 norm. Rows with norm below eps pass through.
inline Var normalize_rows(Var x, double eps = 1e-12) {
  const Matrix& v = x.value();
  Eigen::VectorXd norms = v.rowwise().norm();
  Matrix out = v;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    if (norms(i) > eps) out.row(i) /= norms(i);
  }
  Matrix saved = out;
  return x.tape->record(std::move(out), x.requires_grad(), [x, saved, norms, eps](Tape& tp, const Matrix& g) {
    Matrix gx = g;
    for (Eigen::Index i = 0; i < saved.rows(); ++i) {
      if (norms(i) <= eps) continue;
      const double proj = g.row(i).dot(saved.row(i));
      gx.row(i) = (g.row(i) - proj * saved.row(i)) / norms(i);
    }
    tp.accumulate(x.id, gx);
  });
}

/// Mean cross-entropy of row-wise softmax(logits) against integer targets.
inline Var cross_entropy(Var logits, std::vector<int> targets) {
  const Matrix& z = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != z.rows()) throw std::invalid_argument("cross_entropy: batch size");
  Matrix probs(z.rows(), z.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    RowVector e = (z.row(i).array() - mx).exp().matrix();
    const double s = e.sum();
    probs.row(i) = e / s;
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) throw std::out_of_range("cross_entropy: target");
    loss -= (z(i, y) - mx - std::log(s));
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  return logits.tape->record(std::move(out), logits.requires_grad(),
                             [logits, probs, targets, n](Tape& tp, const Matrix& g) {
                               Matrix gz = probs;
                               for (std::size_t i = 0; i < targets.size(); ++i) {
                                 gz(static_cast<Eigen::Index>(i), targets[i]) -= 1.0;
                               }
                               tp.accumulate(logits.id, gz * (g(0, 0) / n));
                             });
}

/// Softmax over each row.
inline Var softmax_rows(Var x) {
  Matrix out = x.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mx = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  Matrix saved = out;
  return x.tape->record(std::move(out), x.requires_grad(), [x, saved](Tape& tp, const Matrix& g) {
    Eigen::VectorXd rs = g.cwiseProduct(saved).rowwise().sum();
    Matrix gx = saved.cwiseProduct(g.colwise() - rs);
    tp.accumulate(x.id, gx);
  });
}

/// Multi-head softmax attention with no mask: every query sees every key.
/// q, k, v are n×d (already position-mixed); heads split the columns.
inline Var attention(Var q, Var k, Var v, int heads) {
  detail::check_same_tape(q, k);
  detail::check_same_tape(q, v);
  const Eigen::Index n = q.rows();
  const Eigen::Index d = q.cols();
  if (d % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  if (k.rows() != n || v.rows() != n || k.cols() != d || v.cols() != d) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  const Eigen::Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  Matrix out(n, d);
  for (int h = 0; h < heads; ++h) {
    Matrix s;
    s.noalias() = q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose();
    s *= inv_sqrt;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp().matrix();
      s.row(i) /= s.row(i).sum();
    }
    out.middleCols(h * dh, dh).noalias() = s * v.value().middleCols(h * dh, dh);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  const bool tracked = q.requires_grad() || k.requires_grad() || v.requires_grad();
  if (!q.tape->grad_enabled() || !tracked) probs.clear();
  return q.tape->record(std::move(out), tracked,
                        [q, k, v, heads, dh, inv_sqrt, probs = std::move(probs)](Tape& tp, const Matrix& g) {
                          const Eigen::Index n = q.rows();
                          const Eigen::Index d = q.cols();
                          Matrix gq = Matrix::Zero(n, d);
                          Matrix gk = Matrix::Zero(n, d);
                          Matrix gv = Matrix::Zero(n, d);
                          for (int h = 0; h < heads; ++h) {
                            const Matrix& p = probs[static_cast<std::size_t>(h)];
                            auto go = g.middleCols(h * dh, dh);
                            gv.middleCols(h * dh, dh).noalias() = p.transpose() * go;
                            Matrix gp;
                            gp.noalias() = go * v.value().middleCols(h * dh, dh).transpose();
                            Eigen::VectorXd rs = gp.cwiseProduct(p).rowwise().sum();
                            Matrix gs = p.cwiseProduct((gp.colwise() - rs));
                            gs *= inv_sqrt;
                            gq.middleCols(h * dh, dh).noalias() = gs * k.value().middleCols(h * dh, dh);
                            gk.middleCols(h * dh, dh).noalias() = gs.transpose() * q.value().middleCols(h * dh, dh);
                          }
                          tp.accumulate(q.id, gq);
                          tp.accumulate(k.id, gk);
                          tp.accumulate(v.id, gv);
                        });
}

/// Rotates adjacent column pairs (2i, 2i+1) of x by per-entry angles whose
/// cosines and sines are given (both n×d/2).
inline Var rotate_pairs(Var x, const Matrix& cos, const Matrix& sin) {
  const Eigen::Index n = x.rows();
  const Eigen::Index half = x.cols() / 2;
  if (x.cols() % 2 != 0 || cos.rows() != n || cos.cols() != half || sin.rows() != n || sin.cols() != half) {
    throw std::invalid_argument("rotate_pairs: shape mismatch");
  }
  const Matrix& v = x.value();
  Matrix out(n, x.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index i = 0; i < half; ++i) {
      const double a = v(r, 2 * i), b = v(r, 2 * i + 1);
      out(r, 2 * i) = a * cos(r, i) - b * sin(r, i);
      out(r, 2 * i + 1) = a * sin(r, i) + b * cos(r, i);
    }
  }
  return x.tape->record(std::move(out), x.requires_grad(), [x, cos, sin](Tape& tp, const Matrix& g) {
    const Eigen::Index n = g.rows();
    const Eigen::Index half = g.cols() / 2;
    Matrix gx(n, g.cols());
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index i = 0; i < half; ++i) {
        const double ga = g(r, 2 * i), gb = g(r, 2 * i + 1);
        gx(r, 2 * i) = ga * cos(r, i) + gb * sin(r, i);
        gx(r, 2 * i + 1) = -ga * sin(r, i) + gb * cos(r, i);
      }
    }
    tp.accumulate(x.id, gx);
  });
}

// ---------------------------------------------------------------------------
// Spatial ops on images stored as (H·W)×C matrices, row index y·W + x.
// ---------------------------------------------------------------------------

struct Geometry {
  int height = 0;
  int width = 0;
  int channels = 0;
};

/// Unfolds k×k patches (zero padded) into rows; output is (Ho·Wo)×(k·k·C)
/// with column order (ky, kx, c).
inline Var im2col(Var x, Geometry g, int kernel, int stride, int pad) {
  if (x.rows() != static_cast<Eigen::Index>(g.height) * g.width || x.cols() != g.channels) {
    throw std::invalid_argument("im2col: input does not match geometry");
  }
  const int ho = (g.height + 2 * pad - kernel) / stride + 1;
  const int wo = (g.width + 2 * pad - kernel) / stride + 1;
  const int c = g.channels;
  const Matrix& v = x.value();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(ho) * wo, static_cast<Eigen::Index>(kernel) * kernel * c);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= g.height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= g.width) continue;
          out.block(row, (static_cast<Eigen::Index>(ky) * kernel + kx) * c, 1, c) =
              v.row(static_cast<Eigen::Index>(iy) * g.width + ix);
        }
      }
    }
  }
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x, g, kernel, stride, pad, ho, wo](Tape& tp, const Matrix& grad) {
                          const int c = g.channels;
                          Matrix gx = Matrix::Zero(x.rows(), x.cols());
                          for (int oy = 0; oy < ho; ++oy) {
                            for (int ox = 0; ox < wo; ++ox) {
                              const Eigen::Index row = static_cast<Eigen::Index>(oy) * wo + ox;
                              for (int ky = 0; ky < kernel; ++ky) {
                                const int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= g.height) continue;
                                for (int kx = 0; kx < kernel; ++kx) {
                                  const int ix = ox * stride + kx - pad;
                                  if (ix < 0 || ix >= g.width) continue;
                                  gx.row(static_cast<Eigen::Index>(iy) * g.width + ix) +=
                                      grad.block(row, (static_cast<Eigen::Index>(ky) * kernel + kx) * c, 1, c);
                                }
                              }
                            }
                          }
                          tp.accumulate(x.id, gx);
                        });
}

/// Inverse of a non-overlapping patchify: rows of x are cells of an
/// (h×w) grid, each holding a p×p×C block in (py, px, c) order. Output is
/// the (h·p · w·p)×C image.
inline Var unpatchify(Var x, int grid_h, int grid_w, int patch, int channels) {
  if (x.rows() != static_cast<Eigen::Index>(grid_h) * grid_w ||
      x.cols() != static_cast<Eigen::Index>(patch) * patch * channels) {
    throw std::invalid_argument("unpatchify: shape mismatch");
  }
  const int width = grid_w * patch;
  Matrix out(static_cast<Eigen::Index>(grid_h) * patch * width, channels);
  const Matrix& v = x.value();
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx)
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          out.row(static_cast<Eigen::Index>(gy * patch + py) * width + gx * patch + px) =
              v.block(static_cast<Eigen::Index>(gy) * grid_w + gx, (static_cast<Eigen::Index>(py) * patch + px) * channels,
                      1, channels);
  return x.tape->record(std::move(out), x.requires_grad(),
                        [x, grid_h, grid_w, patch, channels, width](Tape& tp, const Matrix& g) {
                          Matrix gx(x.rows(), x.cols());
                          for (int gy = 0; gy < grid_h; ++gy)
                            for (int gxi = 0; gxi < grid_w; ++gxi)
                              for (int py = 0; py < patch; ++py)
                                for (int px = 0; px < patch; ++px)
                                  gx.block(static_cast<Eigen::Index>(gy) * grid_w + gxi,
                                           (static_cast<Eigen::Index>(py) * patch + px) * channels, 1, channels) =
                                      g.row(static_cast<Eigen::Index>(gy * patch + py) * width + gxi * patch + px);
                          tp.accumulate(x.id, gx);
                        });
}

/// Average pooling of an (H×W)×C map down to (oh×ow)×C. H and W must be
/// multiples of oh and ow.
inline Var avg_pool(Var x, Geometry g, int oh, int ow) {
  if (g.height % oh != 0 || g.width % ow != 0) throw std::invalid_argument("avg_pool: indivisible");
  if (x.rows() != static_cast<Eigen::Index>(g.height) * g.width) throw std::invalid_argument("avg_pool: geometry");
  const int bh = g.height / oh, bw = g.width / ow;
  const double inv = 1.0 / (bh * bw);
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(oh) * ow, x.cols());
  const Matrix& v = x.value();
  for (int y = 0; y < g.height; ++y)
    for (int xx = 0; xx < g.width; ++xx)
      out.row(static_cast<Eigen::Index>(y / bh) * ow + xx / bw) += v.row(static_cast<Eigen::Index>(y) * g.width + xx);
  out *= inv;
  return x.tape->record(std::move(out), x.requires_grad(), [x, g, ow, bh, bw, inv](Tape& tp, const Matrix& grad) {
    Matrix gx(x.rows(), x.cols());
    for (int y = 0; y < g.height; ++y)
      for (int xx = 0; xx < g.width; ++xx)
        gx.row(static_cast<Eigen::Index>(y) * g.width + xx) =
            grad.row(static_cast<Eigen::Index>(y / bh) * ow + xx / bw) * inv;
    tp.accumulate(x.id, gx);
  });
}

/// Column-wise maximum over all rows (global max pooling); 1 × cols.
inline Var max_rows(Var x) {
  const Matrix& v = x.value();
  Matrix out(1, v.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(v.cols()));
  for (Eigen::Index c = 0; c < v.cols(); ++c) out(0, c) = v.col(c).maxCoeff(&arg[static_cast<std::size_t>(c)]);
  return x.tape->record(std::move(out), x.requires_grad(), [x, arg](Tape& tp, const Matrix& g) {
    Matrix gx = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < gx.cols(); ++c) gx(arg[static_cast<std::size_t>(c)], c) = g(0, c);
    tp.accumulate(x.id, gx);
  });
}

}  // namespace ag
}  // namespace uso
