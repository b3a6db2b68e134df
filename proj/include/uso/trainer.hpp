#pragma once

// Two-stage schedule. Stage 1 (align) trains only the style projector on
// (style reference, target) pairs; Stage 2 (disentangle) freezes the
// projector and trains the backbone on triplets with mixed task modes. Both
// switch the style reward on at step S. Also: ablation variants and the
// end-to-end ablation runner.

#include "uso/dataset.hpp"
#include "uso/evalbench.hpp"
#include "uso/foundation.hpp"
#include "uso/model.hpp"
#include "uso/srl.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace uso::train {

enum class Stage { align, disentangle };

inline std::string_view to_string(Stage s) { return s == Stage::align ? "align" : "disentangle"; }

enum class Variant { full, no_srl, no_sat, no_de, single_mlp, single_resampler, unfrozen_encoder };

inline constexpr std::array<std::pair<Variant, std::string_view>, 7> kVariantNames{{
    {Variant::full, "full"},
    {Variant::no_srl, "no_srl"},
    {Variant::no_sat, "no_sat"},
    {Variant::no_de, "no_de"},
    {Variant::single_mlp, "single_mlp"},
    {Variant::single_resampler, "single_resampler"},
    {Variant::unfrozen_encoder, "unfrozen_encoder"},
}};

inline std::string_view to_string(Variant v) {
  for (const auto& [k, name] : kVariantNames)
    if (k == v) return name;
  return "?";
}

inline Variant variant_from_string(std::string_view s) {
  for (const auto& [k, name] : kVariantNames)
    if (name == s) return k;
  throw std::invalid_argument("unknown variant: " + std::string(s));
}

/// Projector variants only differ in Stage 1.
inline bool is_projector_variant(Variant v) {
  return v == Variant::single_mlp || v == Variant::single_resampler || v == Variant::unfrozen_encoder;
}

inline ModelConfig model_config(Variant v) {
  ModelConfig c;
  if (v == Variant::no_de) c.style_route = StyleRoute::autoencoder;
  if (v == Variant::single_mlp) c.projector = enc::ProjectorKind::single_mlp;
  if (v == Variant::single_resampler) c.projector = enc::ProjectorKind::single_resampler;
  return c;
}

// ---------------------------------------------------------------------------
// Freeze policy
// ---------------------------------------------------------------------------

using FreezeMask = std::map<std::string, bool>;  // name -> trainable

inline bool has_prefix(const std::string& name, std::string_view prefix) { return name.rfind(prefix, 0) == 0; }

/// align: projector only. disentangle: backbone only. no_sat trains
/// encoder, projector and backbone together in its single stage; the
/// unfrozen-encoder projector variant adds the encoder to Stage 1.
inline FreezeMask freeze_policy(const ag::ParameterSet& ps, Stage stage, Variant v = Variant::full) {
  FreezeMask mask;
  for (const auto& p : ps) {
    const std::string& n = p->name;
    bool on = false;
    if (stage == Stage::align) {
      on = has_prefix(n, "projector.") || (v == Variant::unfrozen_encoder && has_prefix(n, "semantic."));
    } else {
      on = has_prefix(n, "backbone.") ||
           (v == Variant::no_sat && (has_prefix(n, "projector.") || has_prefix(n, "semantic.")));
    }
    if (has_prefix(n, "ae.")) on = false;
    mask[n] = on;
  }
  return mask;
}

inline void apply_mask(ag::ParameterSet& ps, const FreezeMask& mask) {
  for (auto& p : ps) p->trainable = mask.at(p->name);
}

// ---------------------------------------------------------------------------
// Training examples
// ---------------------------------------------------------------------------

/// A curated triplet with its latents cached.
struct PreparedTriplet {
  synth::Triplet triplet;
  Matrix target_latent;
  Matrix content_latent;
};

inline std::vector<PreparedTriplet> prepare(const UsoModel& m, const std::vector<synth::Triplet>& triplets) {
  std::vector<PreparedTriplet> out;
  out.reserve(triplets.size());
  for (const auto& t : triplets) out.push_back({t, m.encode_latent(t.target), m.encode_latent(t.content_ref)});
  return out;
}

enum class TaskMode { style_only, subject_only, joint };

/// Stage 1 pair / Stage 2 style-only: style reference + subject words -> target.
inline TrainExample style_example(const PreparedTriplet& p) {
  TrainExample ex;
  ex.prompt = synth::describe_content(p.triplet.content, std::nullopt, synth::PromptMode::descriptive_stylization);
  ex.target_latent = p.target_latent;
  ex.style_ref = p.triplet.style_ref;
  return ex;
}

/// Subject-only: content reference + subject and style words -> target.
inline TrainExample subject_example(const PreparedTriplet& p) {
  TrainExample ex;
  ex.prompt = synth::describe_content(p.triplet.content, p.triplet.style.palette_id,
                                      synth::PromptMode::descriptive_stylization);
  ex.target_latent = p.target_latent;
  ex.content_latent = p.content_latent;
  return ex;
}

/// Joint: both references with the triplet's own prompt.
inline TrainExample joint_example(const PreparedTriplet& p) {
  TrainExample ex;
  ex.prompt = p.triplet.prompt;
  ex.target_latent = p.target_latent;
  ex.style_ref = p.triplet.style_ref;
  ex.content_latent = p.content_latent;
  return ex;
}

inline TrainExample make_example(const PreparedTriplet& p, TaskMode mode) {
  switch (mode) {
    case TaskMode::style_only:
      return style_example(p);
    case TaskMode::subject_only:
      return subject_example(p);
    case TaskMode::joint:
      return joint_example(p);
  }
  return joint_example(p);
}

// ---------------------------------------------------------------------------
// Stage loop
// ---------------------------------------------------------------------------

struct StageConfig {
  int steps = 900;
  int batch = 8;
  double lr = 1e-3;
  double momentum = 0.9;
  double reward_start_fraction = 0.7;
  srl::RolloutConfig rollout;
  int reward_samples = 2;
  double grad_clip = 1.0;
  bool reward_enabled = true;
  std::array<int, 3> task_mix{1, 1, 2};  // style-only : subject-only : joint
  std::string optimizer = "adam";        // sgd | adam
  std::uint64_t seed = 0;

  long long reward_start() const { return std::llround(reward_start_fraction * steps); }
};

struct StepLog {
  long long step = 0;
  double l_pre = 0.0;
  double l_srl = 0.0;
  int lambda = 0;
  double grad_norm = 0.0;
  int reward_samples = 0;
};

inline nlohmann::json to_json(const StepLog& s) {
  return {{"step", s.step},           {"l_pre", s.l_pre},         {"l_srl", s.l_srl},
          {"lambda", s.lambda},       {"grad_norm", s.grad_norm}, {"reward_samples", s.reward_samples}};
}

/// SGD with momentum, or Adam.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(const std::string& kind, double lr, double momentum) {
    if (kind == "sgd") {
      sgd_.emplace(lr, momentum);
    } else if (kind == "adam") {
      adam_.emplace(lr);
    } else {
      throw std::invalid_argument("unknown optimizer: " + kind);
    }
  }
  void step(ag::ParameterSet& ps) {
    if (sgd_) sgd_->step(ps);
    if (adam_) adam_->step(ps);
  }

 private:
  std::optional<nn::SgdMomentum> sgd_;
  std::optional<nn::Adam> adam_;
};

struct StageState {
  Stage stage = Stage::align;
  long long step = 0;
  FreezeMask freeze_mask;
  long long S = 0;
  Optimizer optimizer;
};

using StepCallback = std::function<void(const StepLog&)>;
using BatchSampler = std::function<std::vector<TrainExample>(Rng&, int)>;

inline std::vector<StepLog> run_stage(UsoModel& m, StageState& state, const StageConfig& cfg, const BatchSampler& next,
                                      const StepCallback& on_step = {}) {
  apply_mask(m.parameters(), state.freeze_mask);
  srl::ModelAdapter adapter(m);
  srl::SrlOptions opt;
  opt.rollout = cfg.rollout;
  opt.reward_start = state.S;
  opt.reward_samples = cfg.reward_samples;
  opt.grad_clip = cfg.grad_clip;
  opt.force_no_reward = !cfg.reward_enabled;
  Rng rng(Rng::mix(cfg.seed, 0x57A6E + static_cast<std::uint64_t>(state.stage)));
  std::vector<StepLog> log;
  for (; state.step < cfg.steps; ++state.step) {
    const auto batch = next(rng, cfg.batch);
    const auto out = srl::srl_step(adapter, std::span<const TrainExample>(batch), state.step, opt, rng, &state.optimizer);
    StepLog s{state.step, out.loss.l_pre, out.loss.l_srl, out.loss.lambda, out.grad_norm,
              static_cast<int>(out.rewards.size())};
    log.push_back(s);
    if (on_step) on_step(s);
  }
  return log;
}

inline StageState make_state(const UsoModel& m, Stage stage, const StageConfig& cfg, Variant v) {
  StageState s;
  s.stage = stage;
  s.freeze_mask = freeze_policy(m.parameters(), stage, v);
  s.S = cfg.reward_enabled ? cfg.reward_start() : cfg.steps;
  s.optimizer = Optimizer(cfg.optimizer, cfg.lr, cfg.momentum);
  return s;
}

/// Stage 1 on (style reference, target) pairs taken from the triplets.
inline std::vector<StepLog> stage1_train(UsoModel& m, const std::vector<PreparedTriplet>& data, const StageConfig& cfg,
                                         Variant v = Variant::full, const StepCallback& on_step = {}) {
  if (data.empty()) throw std::invalid_argument("stage1_train: no training pairs");
  StageState state = make_state(m, Stage::align, cfg, v);
  const int n = static_cast<int>(data.size());
  return run_stage(
      m, state, cfg,
      [&](Rng& rng, int b) {
        std::vector<TrainExample> batch;
        for (int i = 0; i < b; ++i) batch.push_back(style_example(data[static_cast<std::size_t>(rng.uniform_int(0, n - 1))]));
        return batch;
      },
      on_step);
}

inline TaskMode draw_mode(Rng& rng, const std::array<int, 3>& mix) {
  const int total = mix[0] + mix[1] + mix[2];
  if (total <= 0) throw std::invalid_argument("task mix must have a positive weight");
  int r = rng.uniform_int(0, total - 1);
  if (r < mix[0]) return TaskMode::style_only;
  r -= mix[0];
  return r < mix[1] ? TaskMode::subject_only : TaskMode::joint;
}

/// Stage 2 on triplets with task modes drawn per example.
inline std::vector<StepLog> stage2_train(UsoModel& m, const std::vector<PreparedTriplet>& data, const StageConfig& cfg,
                                         Variant v = Variant::full, const StepCallback& on_step = {}) {
  if (data.empty()) throw std::invalid_argument("stage2_train: no triplets");
  StageState state = make_state(m, Stage::disentangle, cfg, v);
  const int n = static_cast<int>(data.size());
  return run_stage(
      m, state, cfg,
      [&](Rng& rng, int b) {
        std::vector<TrainExample> batch;
        for (int i = 0; i < b; ++i) {
          const auto& p = data[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
          batch.push_back(make_example(p, draw_mode(rng, cfg.task_mix)));
        }
        return batch;
      },
      on_step);
}

// ---------------------------------------------------------------------------
// Foundation: shared frozen components
// ---------------------------------------------------------------------------

struct FoundationConfig {
  found::WarmupConfig autoencoder{2000, 8, 3e-3, 0};
  found::WarmupConfig semantic{400, 16, 2e-3, 0};
  found::T2IConfig t2i;
  eval::ClassifierConfig classifier;
  std::uint64_t seed = 0;
};

struct Foundation {
  Checkpoint model;       // semantic.*, ae.*, backbone.*
  Checkpoint classifier;  // shape classifier
  nlohmann::json stats = nlohmann::json::object();
};

using ProgressLine = std::function<void(const std::string&)>;

inline Foundation build_foundation(const FoundationConfig& cfg, const ProgressLine& progress = {}) {
  auto report = [&](const std::string& what, int every) {
    return [&, what, every](int step, double loss) {
      if (progress && (step % every == 0)) progress(what + " step " + std::to_string(step) + " loss " + std::to_string(loss));
    };
  };
  UsoModel m(ModelConfig{}, cfg.seed);
  auto ae = cfg.autoencoder;
  ae.seed = Rng::mix(cfg.seed, 1);
  found::train_autoencoder(m, ae, report("autoencoder", 250));
  auto sem = cfg.semantic;
  sem.seed = Rng::mix(cfg.seed, 2);
  found::train_semantic_encoder(m, sem, report("semantic", 100));
  auto t2i = cfg.t2i;
  t2i.warmup.seed = Rng::mix(cfg.seed, 3);
  found::train_base_t2i(m, t2i, report("t2i", 250));
  eval::ShapeClassifier clf(cfg.seed);
  auto cc = cfg.classifier;
  cc.warmup.seed = Rng::mix(cfg.seed, 4);
  eval::train_classifier(clf, cc, &m, report("classifier", 200));

  Foundation f;
  f.model = m.checkpoint();
  f.model.tensors.erase(f.model.tensors.lower_bound("projector."), f.model.tensors.lower_bound("projector/"));
  f.classifier = clf.checkpoint();
  Rng rng(Rng::mix(cfg.seed, 5));
  double mae = 0.0;
  for (int i = 0; i < 100; ++i) mae += found::reconstruction_mae(m, found::random_world_sample(rng).image);
  f.stats["autoencoder_mae"] = mae / 100.0;
  f.stats["classifier_accuracy"] = eval::classifier_accuracy(clf, 400, Rng::mix(cfg.seed, 6));
  f.model.meta["stats"] = f.stats;
  return f;
}

inline void save_foundation(const Foundation& f, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  f.model.save(dir / "model.ckpt");
  f.classifier.save(dir / "classifier.ckpt");
  std::ofstream(dir / "stats.json") << f.stats.dump(2) << "\n";
}

inline bool has_foundation(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / "model.ckpt") && std::filesystem::exists(dir / "classifier.ckpt");
}

inline Foundation load_foundation(const std::filesystem::path& dir) {
  if (!has_foundation(dir)) throw std::runtime_error("no pretrained encoders under " + dir.string());
  Foundation f;
  f.model = Checkpoint::load(dir / "model.ckpt");
  f.classifier = Checkpoint::load(dir / "classifier.ckpt");
  if (f.model.meta.contains("stats")) f.stats = f.model.meta.at("stats");
  return f;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

struct AblationConfig {
  StageConfig stage1;
  StageConfig stage2;
  eval::BenchSpec bench = eval::BenchSpec::standard();
  std::vector<eval::BenchTask> tasks{eval::BenchTask::joint};
  std::uint64_t seed = 0;
};

struct AblationResult {
  eval::MetricReport report;
  std::vector<StepLog> stage1_log;
  std::vector<StepLog> stage2_log;
  Checkpoint final_checkpoint;
  std::array<long long, 2> style_route_counts{0, 0};
};

/// Builds the variant's model on the foundation, runs the stages it uses,
/// then the bench. Projector variants stop after Stage 1.
inline AblationResult run_ablation(Variant v, const AblationConfig& cfg, const Foundation& f,
                                   const std::vector<synth::Triplet>& triplets, const StepCallback& on_step = {}) {
  UsoModel m(model_config(v), Rng::mix(cfg.seed, 0xAB1));
  m.load_matching(f.model);
  const auto data = prepare(m, triplets);
  AblationResult r;
  StageConfig s1 = cfg.stage1, s2 = cfg.stage2;
  s1.seed = Rng::mix(cfg.seed, 11);
  s2.seed = Rng::mix(cfg.seed, 12);
  if (v == Variant::no_srl) s1.reward_enabled = s2.reward_enabled = false;
  if (v != Variant::no_sat) r.stage1_log = stage1_train(m, data, s1, v, on_step);
  if (!is_projector_variant(v)) r.stage2_log = stage2_train(m, data, s2, v, on_step);
  for (auto& p : m.parameters()) p->trainable = false;

  eval::ShapeClassifier clf;
  clf.restore(f.classifier);
  const eval::PaletteDetector palette;
  r.report.variant = std::string(to_string(v));
  r.report.seed = cfg.seed;
  for (auto task : cfg.tasks) r.report.tasks.push_back(eval::run_bench(m, cfg.bench, task, {clf, palette}));
  r.final_checkpoint = m.checkpoint();
  r.final_checkpoint.meta["variant"] = r.report.variant;
  r.style_route_counts = m.style_route_counts();
  r.report.extra["style_route_counts"] = {{"semantic", r.style_route_counts[0]}, {"autoencoder", r.style_route_counts[1]}};
  r.report.extra["stage1_steps"] = r.stage1_log.size();
  r.report.extra["stage2_steps"] = r.stage2_log.size();
  return r;
}

}  // namespace uso::train
