#pragma once

// Flow-matching pretrain loss, differentiable style reward, and the combined
// objective with its step-gated reward weight.

#include "uso/autograd.hpp"
#include "uso/style_descriptor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace uso::obj {

/// Straight path between data and noise: x_t = (1-t)·x0 + t·eps, with
/// target velocity eps - x0.
struct PathSample {
  Matrix x0;
  Matrix eps;
  double t = 0.0;
  Matrix x_t;
  Matrix v_target;
};

inline PathSample sample_path(const Matrix& x0, const Matrix& eps, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("sample_path: t outside [0,1]");
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw std::invalid_argument("sample_path: shape mismatch");
  PathSample s;
  s.x0 = x0;
  s.eps = eps;
  s.t = t;
  s.x_t = (1.0 - t) * x0 + t * eps;
  s.v_target = eps - x0;
  return s;
}

/// One-jump data prediction from a state at time t and a velocity.
inline Matrix predict_x0(const Matrix& x_t, const Matrix& v, double t) { return x_t - t * v; }

/// w_t · mean((v_pred - v_target)^2)
inline ag::Var flow_matching_loss(ag::Var v_pred, const PathSample& s, double w_t = 1.0) {
  if (v_pred.rows() != s.v_target.rows() || v_pred.cols() != s.v_target.cols()) {
    throw std::invalid_argument("flow_matching_loss: shape mismatch");
  }
  ag::Var diff = ag::sub(v_pred, v_pred.tape->constant(s.v_target));
  return ag::scale(ag::mean(ag::square(diff)), w_t);
}

inline double flow_matching_loss(const Matrix& v_pred, const PathSample& s, double w_t = 1.0) {
  if (v_pred.rows() != s.v_target.rows() || v_pred.cols() != s.v_target.cols()) {
    throw std::invalid_argument("flow_matching_loss: shape mismatch");
  }
  return w_t * (v_pred - s.v_target).squaredNorm() / static_cast<double>(v_pred.size());
}

/// Cosine between style descriptors, differentiable in `img`.
inline ag::Var reward_score(ag::Var img, const Matrix& style_ref) {
  const RowVector ref = descriptor::style_descriptor(style_ref);
  ag::Var d = descriptor::describe(img);
  return ag::dot(d, img.tape->constant(Matrix(ref)));
}

inline double reward_score(const Matrix& img, const Matrix& style_ref) {
  return descriptor::style_similarity(img, style_ref);
}

/// Per-sample loss from a reward: the negated reward.
inline ag::Var reward_to_loss(ag::Var reward) { return ag::scale(reward, -1.0); }

inline ag::Var style_reward_loss(ag::Var decoded_img, const Matrix& style_ref) {
  return reward_to_loss(reward_score(decoded_img, style_ref));
}

/// Mean of the per-sample reward losses.
inline ag::Var style_reward_loss(const std::vector<ag::Var>& decoded, const std::vector<Matrix>& style_refs) {
  if (decoded.empty() || decoded.size() != style_refs.size()) {
    throw std::invalid_argument("style_reward_loss: need one style reference per decoded image");
  }
  std::vector<ag::Var> losses;
  for (std::size_t i = 0; i < decoded.size(); ++i) losses.push_back(style_reward_loss(decoded[i], style_refs[i]));
  return ag::scale(ag::sum(ag::concat_rows(losses)), 1.0 / static_cast<double>(losses.size()));
}

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossBreakdown {
  double l_pre = 0.0;
  double l_srl = 0.0;
  int lambda = 0;
  long long step = 0;
  double total = 0.0;
};

/// Reward weight: 0 before step S, 1 from step S on.
inline int reward_weight(long long step, long long reward_start) { return step >= reward_start ? 1 : 0; }

/// total = l_pre + lambda·l_srl. Non-finite inputs are rejected whatever lambda is.
inline LossBreakdown total_loss(double l_pre, double l_srl, long long step, long long reward_start) {
  if (step < 0) throw std::invalid_argument("total_loss: negative step");
  if (!std::isfinite(l_pre)) throw NonFiniteLoss("pretrain loss is not finite at step " + std::to_string(step));
  if (!std::isfinite(l_srl)) throw NonFiniteLoss("reward loss is not finite at step " + std::to_string(step));
  LossBreakdown b;
  b.l_pre = l_pre;
  b.l_srl = l_srl;
  b.step = step;
  b.lambda = reward_weight(step, reward_start);
  b.total = b.lambda ? l_pre + l_srl : l_pre;
  return b;
}

}  // namespace uso::obj
