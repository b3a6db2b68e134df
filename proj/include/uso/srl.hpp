#pragma once

// Style reward learning on top of flow matching, and the Euler sampler.
//
// One srl_step:
//   1. pretrain loss on the batch;
//   2. per reward sample, draw an integer t in [t_s, t_e];
//   3. integrate from x_T ~ N(0, I) down to x_t with gradients disabled;
//   4. evaluate the velocity at x_t with gradients enabled;
//   5. predict x0 in one jump (x_t - (t/T)·v) and decode it;
//   6. reward loss = -style similarity to the style reference;
//   7. total = pretrain + lambda·reward, backprop, optimizer update.

#include "uso/model.hpp"
#include "uso/objectives.hpp"

#include <concepts>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace uso::srl {

struct RolloutConfig {
  int T_steps = 8;
  int t_s = 1;
  int t_e = 3;
  std::uint64_t seed = 0;
  /// true: x0 = x_t - (t/T)·v. false: x0 = x_t - (1/T)·v, the literal single-step form.
  bool one_jump = true;

  double dt() const { return 1.0 / T_steps; }
  void validate() const {
    if (T_steps < 1) throw std::invalid_argument("T_steps must be at least 1");
    if (t_s < 0 || t_s > t_e || t_e >= T_steps) throw std::invalid_argument("reward interval must satisfy 0 <= t_s <= t_e < T");
  }
};

/// Euler integration of dx/dt = v from t = 1 down to t = 0 in `steps` uniform
/// steps: x_{k-1} = x_k - v(x_k, k/steps)/steps.
template <class VelocityFn>
  requires std::invocable<VelocityFn&, const Matrix&, double>
Matrix integrate(VelocityFn&& velocity, Matrix x, int steps) {
  if (steps < 1) throw std::invalid_argument("integrate: steps must be positive");
  const double dt = 1.0 / steps;
  for (int k = steps; k >= 1; --k) {
    const Matrix v = velocity(x, k * dt);
    x -= dt * v;
  }
  return x;
}

enum class TaskMode { text, subject, style, joint };

struct GenerationRequest {
  TaskMode task = TaskMode::joint;
  synth::PromptSpec prompt;
  const Matrix* style_ref = nullptr;    // image
  const Matrix* content_ref = nullptr;  // image
};

inline void check_references(const GenerationRequest& r) {
  const bool needs_style = r.task == TaskMode::style || r.task == TaskMode::joint;
  const bool needs_content = r.task == TaskMode::subject || r.task == TaskMode::joint;
  if (needs_style && !r.style_ref) throw std::invalid_argument("generation task requires a style reference");
  if (needs_content && !r.content_ref) throw std::invalid_argument("generation task requires a content reference");
}

/// Generates one image; deterministic in (model, request, cfg.T_steps, seed).
inline Matrix sample(const UsoModel& m, const GenerationRequest& req, const RolloutConfig& cfg, std::uint64_t seed) {
  check_references(req);
  if (cfg.T_steps < 1) throw std::invalid_argument("T_steps must be at least 1");
  ag::Tape tape;
  ag::NoGradGuard guard(tape);
  std::optional<Matrix> content_latent;
  if (req.content_ref && req.task != TaskMode::style && req.task != TaskMode::text) {
    content_latent = m.encode_latent(*req.content_ref);
  }
  const bool use_style = req.style_ref && req.task != TaskMode::subject && req.task != TaskMode::text;
  const Conditioning c =
      m.condition(tape, req.prompt, use_style ? req.style_ref : nullptr, content_latent ? &*content_latent : nullptr);
  Rng rng(Rng::mix(seed, 0x5A3E));
  Matrix x = rng.normal_matrix(enc::kLatentTokens, enc::kLatentChannels);
  x = integrate([&](const Matrix& xt, double t) { return m.velocity(tape, c, tape.constant(xt), t).value(); }, x,
                cfg.T_steps);
  return m.decode(x);
}

// ---------------------------------------------------------------------------
// srl_step
// ---------------------------------------------------------------------------

/// What srl_step needs from a model.
template <class A>
concept SrlAdapter = requires(A& a, const A& ca, ag::Tape& t, const typename A::Example& ex, Rng& rng, ag::Var x,
                              const typename A::Condition& cond) {
  { a.parameters() } -> std::same_as<ag::ParameterSet&>;
  { ca.pretrain_loss(t, ex, rng) } -> std::same_as<ag::Var>;
  { ca.condition(t, ex) } -> std::same_as<typename A::Condition>;
  { ca.velocity(t, cond, x, 0.5) } -> std::same_as<ag::Var>;
  { ca.decode(t, x) } -> std::same_as<ag::Var>;
  { ca.style_reference(ex) } -> std::same_as<const Matrix*>;
  { ca.latent_rows() } -> std::convertible_to<Eigen::Index>;
  { ca.latent_cols() } -> std::convertible_to<Eigen::Index>;
};

/// Binds UsoModel to the srl_step contract.
class ModelAdapter {
 public:
  using Example = TrainExample;
  using Condition = Conditioning;

  explicit ModelAdapter(UsoModel& m) : m_(m) {}

  ag::ParameterSet& parameters() { return m_.parameters(); }
  ag::Var pretrain_loss(ag::Tape& t, const Example& ex, Rng& rng) const { return uso::pretrain_loss(t, m_, ex, rng); }
  Condition condition(ag::Tape& t, const Example& ex) const {
    return m_.condition(t, ex.prompt, ex.style_ref ? &*ex.style_ref : nullptr,
                        ex.content_latent ? &*ex.content_latent : nullptr);
  }
  ag::Var velocity(ag::Tape& t, const Condition& c, ag::Var x, double time) const { return m_.velocity(t, c, x, time); }
  ag::Var decode(ag::Tape& t, ag::Var latent) const { return m_.decode(t, latent); }
  const Matrix* style_reference(const Example& ex) const { return ex.style_ref ? &*ex.style_ref : nullptr; }
  Eigen::Index latent_rows() const { return enc::kLatentTokens; }
  Eigen::Index latent_cols() const { return enc::kLatentChannels; }

 private:
  UsoModel& m_;
};

struct SrlOptions {
  RolloutConfig rollout;
  long long reward_start = 0;  // S
  int reward_samples = 2;      // reward branch runs on at most this many examples with a style reference
  double grad_clip = 1.0;      // <= 0 disables clipping
  bool force_no_reward = false;
};

/// Rollout end state supplied from outside instead of integrating.
struct InjectedState {
  int t = 0;
  Matrix x_t;
};

struct SrlOutcome {
  obj::LossBreakdown loss;
  std::vector<int> chosen_t;
  std::vector<Matrix> rollout_states;  // x_t per reward sample
  std::vector<Matrix> predicted_x0;
  std::vector<Matrix> decoded;
  std::vector<double> rewards;
  std::size_t tracked_ops = 0;
  double grad_norm = 0.0;
};

struct NoOptimizer {
  void step(ag::ParameterSet&) {}
};

template <SrlAdapter Adapter, class Optimizer = NoOptimizer>
SrlOutcome srl_step(Adapter& a, std::span<const typename Adapter::Example> batch, long long step, const SrlOptions& opt,
                    Rng& rng, Optimizer* optimizer = nullptr, std::span<const InjectedState> injected = {}) {
  if (batch.empty()) throw std::invalid_argument("srl_step: empty batch");
  opt.rollout.validate();
  ag::ParameterSet& params = a.parameters();
  params.zero_grad();
  ag::Tape tape;
  SrlOutcome out;

  std::vector<ag::Var> pre;
  for (const auto& ex : batch) pre.push_back(a.pretrain_loss(tape, ex, rng));
  ag::Var l_pre = pre.size() == 1 ? pre.front() : ag::scale(ag::sum(ag::concat_rows(pre)), 1.0 / pre.size());

  const int lambda = opt.force_no_reward ? 0 : obj::reward_weight(step, opt.reward_start);
  std::optional<ag::Var> l_srl;
  if (lambda) {
    const int T = opt.rollout.T_steps;
    const double dt = opt.rollout.dt();
    std::vector<ag::Var> losses;
    std::size_t used = 0;
    for (const auto& ex : batch) {
      if (static_cast<int>(used) >= opt.reward_samples) break;
      const Matrix* ref = a.style_reference(ex);
      if (!ref) continue;
      const auto cond = a.condition(tape, ex);
      int t = 0;
      Matrix x;
      if (used < injected.size()) {
        t = injected[used].t;
        x = injected[used].x_t;
      } else {
        t = rng.uniform_int(opt.rollout.t_s, opt.rollout.t_e);
        x = rng.normal_matrix(a.latent_rows(), a.latent_cols());
        ag::NoGradGuard guard(tape);
        for (int tau = T; tau > t; --tau) {
          const Matrix v = a.velocity(tape, cond, tape.constant(x), tau * dt).value();
          x -= dt * v;
        }
      }
      ag::Var xt = tape.constant(x);
      ag::Var v = a.velocity(tape, cond, xt, t * dt);
      const double jump = opt.rollout.one_jump ? t * dt : dt;
      ag::Var x0 = ag::sub(xt, ag::scale(v, jump));
      ag::Var img = a.decode(tape, x0);
      ag::Var r = obj::reward_score(img, *ref);
      losses.push_back(obj::reward_to_loss(r));
      out.chosen_t.push_back(t);
      out.rollout_states.push_back(x);
      out.predicted_x0.push_back(x0.value());
      out.decoded.push_back(img.value());
      out.rewards.push_back(r.item());
      ++used;
    }
    if (!losses.empty()) {
      l_srl = losses.size() == 1 ? losses.front() : ag::scale(ag::sum(ag::concat_rows(losses)), 1.0 / losses.size());
    }
  }

  const double srl_value = l_srl ? l_srl->item() : 0.0;
  out.loss = obj::total_loss(l_pre.item(), srl_value, step, opt.force_no_reward ? step + 1 : opt.reward_start);
  ag::Var total = (lambda && l_srl) ? ag::add(l_pre, *l_srl) : l_pre;
  tape.backward(total);
  out.tracked_ops = tape.tracked_ops();
  out.grad_norm = opt.grad_clip > 0.0 ? nn::clip_grad_norm(params, opt.grad_clip) : nn::grad_norm(params);
  if (optimizer) optimizer->step(params);
  return out;
}

}  // namespace uso::srl
