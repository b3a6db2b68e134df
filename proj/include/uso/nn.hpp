#pragma once

// Layers, initializers, optimizers and the seeded RNG shared by every model.

#include "uso/autograd.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace uso {

/// Seeded generator with platform-independent uniform and normal draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0); }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<int>(engine_() % span);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal() * stddev;
    return m;
  }

  /// Derive an independent stream from this seed and a tag.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

namespace nn {

using ag::Parameter;
using ag::ParameterSet;
using ag::Tape;
using ag::Var;

/// x·W + b with W stored in×out.
struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  Linear() = default;
  Linear(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng, double gain = 1.0) {
    weight = &ps.add(name + ".weight", rng.normal_matrix(in, out, gain / std::sqrt(static_cast<double>(in))));
    bias = &ps.add(name + ".bias", Matrix::Zero(1, out));
  }

  Var operator()(Tape& t, Var x) const { return ag::add_row(ag::matmul(x, t.param(*weight)), t.param(*bias)); }
  int in() const { return static_cast<int>(weight->value.rows()); }
  int out() const { return static_cast<int>(weight->value.cols()); }
};

/// k×k convolution with stride and zero padding, on (H·W)×C maps.
struct Conv2d {
  Linear proj;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(ParameterSet& ps, const std::string& name, int in, int out, int k, int s, int p, Rng& rng)
      : proj(ps, name, in * k * k, out, rng, std::sqrt(2.0)), kernel(k), stride(s), pad(p) {}

  ag::Geometry output_geometry(ag::Geometry g) const {
    return {(g.height + 2 * pad - kernel) / stride + 1, (g.width + 2 * pad - kernel) / stride + 1, proj.out()};
  }

  Var operator()(Tape& t, Var x, ag::Geometry g) const {
    if (kernel == 1 && stride == 1 && pad == 0) return proj(t, x);
    return proj(t, ag::im2col(x, g, kernel, stride, pad));
  }
};

struct RmsNorm {
  Parameter* gain = nullptr;
  RmsNorm() = default;
  RmsNorm(ParameterSet& ps, const std::string& name, int width) {
    gain = &ps.add(name + ".gain", Matrix::Ones(1, width));
  }
  Var operator()(Tape& t, Var x) const { return ag::rms_norm(x, t.param(*gain)); }
};

struct Embedding {
  Parameter* table = nullptr;
  Embedding() = default;
  Embedding(ParameterSet& ps, const std::string& name, int vocab, int width, Rng& rng, double stddev = 0.5) {
    table = &ps.add(name + ".table", rng.normal_matrix(vocab, width, stddev));
  }
  Var operator()(Tape& t, const std::vector<int>& ids) const { return ag::gather_rows(t.param(*table), ids); }
};

/// Global L2 norm of all gradients of trainable parameters.
inline double grad_norm(const ParameterSet& ps) {
  double s = 0.0;
  for (const auto& p : ps) {
    if (p->trainable) s += p->grad.squaredNorm();
  }
  return std::sqrt(s);
}

/// Rescales gradients so that their global norm is at most max_norm.
inline double clip_grad_norm(ParameterSet& ps, double max_norm) {
  const double n = grad_norm(ps);
  if (n > max_norm && n > 0.0) {
    const double f = max_norm / n;
    for (auto& p : ps) {
      if (p->trainable) p->grad *= f;
    }
  }
  return n;
}

/// SGD with heavy-ball momentum. Only trainable parameters move.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(ParameterSet& ps) {
    for (auto& p : ps) {
      if (!p->trainable) continue;
      auto& buf = velocity_[p->name];
      if (buf.size() == 0) buf = Matrix::Zero(p->value.rows(), p->value.cols());
      buf = momentum_ * buf + p->grad;
      p->value -= lr_ * buf;
    }
  }
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  std::unordered_map<std::string, Matrix> velocity_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParameterSet& ps) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (auto& p : ps) {
      if (!p->trainable) continue;
      auto& [m, v] = state_[p->name];
      if (m.size() == 0) {
        m = Matrix::Zero(p->value.rows(), p->value.cols());
        v = Matrix::Zero(p->value.rows(), p->value.cols());
      }
      m = b1_ * m + (1.0 - b1_) * p->grad;
      v = b2_ * v + (1.0 - b2_) * p->grad.cwiseAbs2();
      p->value.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    }
  }
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::unordered_map<std::string, std::pair<Matrix, Matrix>> state_;
};

}  // namespace nn
}  // namespace uso
