#pragma once

// Warm-up training that manufactures the frozen parts every later stage
// assumes: the latent autoencoder, the semantic style encoder, and a base
// text-to-image backbone.

#include "uso/model.hpp"
#include "uso/synthworld.hpp"

#include <functional>
#include <string>
#include <vector>

namespace uso::found {

/// Marks exactly the parameters whose name starts with one of `prefixes` as trainable.
inline void set_trainable_prefixes(ag::ParameterSet& ps, const std::vector<std::string>& prefixes) {
  for (auto& p : ps) {
    bool on = false;
    for (const auto& pre : prefixes) on = on || p->name.rfind(pre, 0) == 0;
    p->trainable = on && p->name.find("latent_shift") == std::string::npos &&
                   p->name.find("latent_scale") == std::string::npos;
  }
}

/// A random image of the synthetic world: any palette including the canonical one.
struct WorldSample {
  synth::ContentSpec content;
  synth::StyleSpec style;
  std::uint64_t seed = 0;
  Matrix image;
};

inline WorldSample random_world_sample(Rng& rng) {
  WorldSample s;
  s.content = synth::random_content(rng);
  s.style = synth::StyleSpec{rng.uniform_int(0, synth::kNumPalettes - 1),
                             static_cast<synth::Texture>(rng.uniform_int(0, synth::kNumTextures - 1)), 0.0};
  s.seed = rng.next_u64();
  s.image = synth::apply_style(s.content, s.style, s.seed);
  return s;
}

struct WarmupConfig {
  int steps = 600;
  int batch = 8;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

using ProgressFn = std::function<void(int step, double loss)>;

/// Cosine decay from `base` to 5% of it.
inline double cosine_lr(double base, int step, int steps) {
  const double f = steps > 1 ? static_cast<double>(step) / (steps - 1) : 1.0;
  return base * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(M_PI * f)));
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

inline double reconstruction_mae(const UsoModel& m, const Matrix& img) {
  return (m.decode(m.encode_latent(img)) - img).cwiseAbs().mean();
}

/// MSE reconstruction training of ae.*, then sets the latent standardization
/// to the per-channel mean and std of codes on fresh samples.
inline void train_autoencoder(UsoModel& m, const WarmupConfig& cfg, const ProgressFn& progress = {}) {
  auto& ps = m.parameters();
  set_trainable_prefixes(ps, {"ae."});
  const auto& ae = m.autoencoder();
  Rng rng(Rng::mix(cfg.seed, 0xAE));
  nn::Adam opt(cfg.lr);
  for (int step = 0; step < cfg.steps; ++step) {
    opt.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
    ps.zero_grad();
    ag::Tape t;
    std::vector<ag::Var> losses;
    for (int b = 0; b < cfg.batch; ++b) {
      const Matrix img = random_world_sample(rng).image;
      ag::Var x = t.constant(img);
      ag::Var rec = ae.decode_raw(t, ae.encode_raw(t, x));
      losses.push_back(ag::mean(ag::square(ag::sub(rec, x))));
    }
    ag::Var loss = ag::scale(ag::sum(ag::concat_rows(losses)), 1.0 / cfg.batch);
    t.backward(loss);
    opt.step(ps);
    if (progress) progress(step, loss.item());
  }
  Matrix sum = Matrix::Zero(1, enc::kLatentChannels), sq = Matrix::Zero(1, enc::kLatentChannels);
  const int n = 64;
  for (int i = 0; i < n; ++i) {
    ag::Tape t;
    ag::NoGradGuard g(t);
    const Matrix z = ae.encode_raw(t, t.constant(random_world_sample(rng).image)).value();
    sum += z.colwise().sum();
    sq += z.array().square().matrix().colwise().sum();
  }
  const double count = static_cast<double>(n) * enc::kLatentTokens;
  const Matrix mean = sum / count;
  Matrix var = sq / count - mean.array().square().matrix();
  m.mutable_autoencoder().latent_shift().value = mean;
  m.mutable_autoencoder().latent_scale().value = var.array().max(1e-8).sqrt().matrix();
  set_trainable_prefixes(ps, {});
}

// ---------------------------------------------------------------------------
// Semantic encoder: style-contrastive warm-up
// ---------------------------------------------------------------------------

inline constexpr int kContrastDim = 32;
inline constexpr double kContrastTemperature = 0.1;

/// InfoNCE over pooled taps: two renders of one style class (different
/// shapes, positions and phases) are positives, all other classes negatives.
inline void train_semantic_encoder(UsoModel& m, const WarmupConfig& cfg, const ProgressFn& progress = {}) {
  auto& ps = m.parameters();
  set_trainable_prefixes(ps, {"semantic."});
  ag::ParameterSet head_ps;
  Rng rng(Rng::mix(cfg.seed, 0x5E3A));
  int pooled_width = 0;
  for (int c : enc::SemanticEncoder::kChannels) pooled_width += c;
  nn::Linear head(head_ps, "head", pooled_width, kContrastDim, rng);
  nn::Adam opt(cfg.lr), head_opt(cfg.lr);
  const int classes = std::max(2, cfg.batch / 2);
  const int total_classes = synth::kNumPalettes * synth::kNumTextures;
  for (int step = 0; step < cfg.steps; ++step) {
    ps.zero_grad();
    head_ps.zero_grad();
    ag::Tape t;
    std::vector<int> chosen;
    while (static_cast<int>(chosen.size()) < classes) {
      const int c = rng.uniform_int(0, total_classes - 1);
      if (std::find(chosen.begin(), chosen.end(), c) == chosen.end()) chosen.push_back(c);
    }
    std::vector<ag::Var> views[2];
    for (int c : chosen) {
      for (int v = 0; v < 2; ++v) {
        synth::StyleSpec s{c / synth::kNumTextures, static_cast<synth::Texture>(c % synth::kNumTextures), 0.0};
        const Matrix img = synth::apply_style(synth::random_content(rng), s, rng.next_u64());
        ag::Var e = head(t, enc::pooled_embedding(m.semantic_encoder()(t, t.constant(img))));
        views[v].push_back(e);
      }
    }
    ag::Var a = ag::normalize_rows(ag::concat_rows(views[0]));
    ag::Var b = ag::normalize_rows(ag::concat_rows(views[1]));
    ag::Var logits = ag::scale(ag::matmul(a, ag::transpose(b)), 1.0 / kContrastTemperature);
    std::vector<int> targets(static_cast<std::size_t>(classes));
    for (int i = 0; i < classes; ++i) targets[static_cast<std::size_t>(i)] = i;
    ag::Var loss = ag::scale(ag::add(ag::cross_entropy(logits, targets), ag::cross_entropy(ag::transpose(logits), targets)), 0.5);
    t.backward(loss);
    opt.step(ps);
    head_opt.step(head_ps);
    if (progress) progress(step, loss.item());
  }
  set_trainable_prefixes(ps, {});
}

// ---------------------------------------------------------------------------
// Base text-to-image backbone
// ---------------------------------------------------------------------------

struct T2IConfig {
  WarmupConfig warmup{8000, 8, 2e-3, 0};
  int pool_size = 2048;
  double style_word_dropout = 0.2;
};

/// Prompt (shape, position, palette word) -> image examples over the whole world.
inline std::vector<TrainExample> t2i_pool(const UsoModel& m, int n, double dropout, std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x7217));
  std::vector<TrainExample> pool;
  pool.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const WorldSample s = random_world_sample(rng);
    TrainExample ex;
    const bool drop = rng.uniform() < dropout;
    ex.prompt = synth::describe_content(s.content, drop ? std::nullopt : std::optional<int>(s.style.palette_id),
                                        synth::PromptMode::descriptive);
    ex.target_latent = m.encode_latent(s.image);
    pool.push_back(std::move(ex));
  }
  return pool;
}

/// Trains backbone.* on text-only sequences [c, z_t].
inline void train_base_t2i(UsoModel& m, const T2IConfig& cfg, const ProgressFn& progress = {}) {
  auto& ps = m.parameters();
  const auto pool = t2i_pool(m, cfg.pool_size, cfg.style_word_dropout, cfg.warmup.seed);
  set_trainable_prefixes(ps, {"backbone."});
  Rng rng(Rng::mix(cfg.warmup.seed, 0xB45E));
  nn::Adam opt(cfg.warmup.lr);
  for (int step = 0; step < cfg.warmup.steps; ++step) {
    opt.set_lr(cosine_lr(cfg.warmup.lr, step, cfg.warmup.steps));
    ps.zero_grad();
    ag::Tape t;
    std::vector<ag::Var> losses;
    for (int b = 0; b < cfg.warmup.batch; ++b) {
      const auto& ex = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
      losses.push_back(pretrain_loss(t, m, ex, rng));
    }
    ag::Var loss = ag::scale(ag::sum(ag::concat_rows(losses)), 1.0 / cfg.warmup.batch);
    t.backward(loss);
    nn::clip_grad_norm(ps, 1.0);
    opt.step(ps);
    if (progress) progress(step, loss.item());
  }
  set_trainable_prefixes(ps, {});
}

}  // namespace uso::found
