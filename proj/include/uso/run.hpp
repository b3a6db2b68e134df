#pragma once

// Run configuration shared by the command-line tool and the acceptance
// harness: flat dotted keys mapped onto dataset, stage and bench settings.

#include "uso/config.hpp"
#include "uso/trainer.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

namespace uso::run {

struct RunConfig {
  synth::DatasetConfig data;
  train::AblationConfig ablation;
  train::Variant variant = train::Variant::full;
  std::filesystem::path foundation;
  std::filesystem::path dataset;
  std::filesystem::path checkpoint;
  std::uint64_t seed = 0;
};

inline std::set<std::string> stage_keys(const std::string& p) {
  return {p + ".steps",      p + ".batch",     p + ".lr",        p + ".momentum",       p + ".optimizer",
          p + ".reward_start_fraction",        p + ".reward",    p + ".reward_samples", p + ".grad_clip",
          p + ".t_s",        p + ".t_e",       p + ".T_steps",   p + ".one_jump",       p + ".task_mix"};
}

inline std::set<std::string> known_keys() {
  std::set<std::string> k{"seed",          "variant",           "foundation",     "dataset",        "checkpoint",
                          "data.preserved", "data.shifted",      "data.tau_style", "data.num_palettes", "data.unique",
                          "data.seed",     "bench.samples_per_cell", "bench.T_steps", "bench.tasks",  "bench.seed"};
  for (const auto& s : {"stage1", "stage2"}) k.merge(stage_keys(s));
  return k;
}

inline std::array<int, 3> parse_mix(const std::string& s) {
  std::array<int, 3> mix{};
  std::istringstream in(s);
  char sep = 0;
  if (!(in >> mix[0] >> sep >> mix[1] >> sep >> mix[2])) throw ConfigError("task_mix: expected a:b:c, got " + s);
  return mix;
}

inline void read_stage(const KeyValueConfig& kv, const std::string& p, train::StageConfig& c) {
  c.steps = static_cast<int>(kv.get_int(p + ".steps", c.steps));
  c.batch = static_cast<int>(kv.get_int(p + ".batch", c.batch));
  c.lr = kv.get_double(p + ".lr", c.lr);
  c.momentum = kv.get_double(p + ".momentum", c.momentum);
  c.optimizer = kv.get_string(p + ".optimizer", c.optimizer);
  c.reward_start_fraction = kv.get_double(p + ".reward_start_fraction", c.reward_start_fraction);
  c.reward_enabled = kv.get_bool(p + ".reward", c.reward_enabled);
  c.reward_samples = static_cast<int>(kv.get_int(p + ".reward_samples", c.reward_samples));
  c.grad_clip = kv.get_double(p + ".grad_clip", c.grad_clip);
  c.rollout.t_s = static_cast<int>(kv.get_int(p + ".t_s", c.rollout.t_s));
  c.rollout.t_e = static_cast<int>(kv.get_int(p + ".t_e", c.rollout.t_e));
  c.rollout.T_steps = static_cast<int>(kv.get_int(p + ".T_steps", c.rollout.T_steps));
  c.rollout.one_jump = kv.get_bool(p + ".one_jump", c.rollout.one_jump);
  if (kv.has(p + ".task_mix")) c.task_mix = parse_mix(kv.get_string(p + ".task_mix", ""));
  if (c.steps < 0 || c.batch <= 0 || !(c.lr > 0.0)) throw ConfigError(p + ": steps >= 0, batch > 0 and lr > 0 required");
  if (c.optimizer != "sgd" && c.optimizer != "adam") throw ConfigError(p + ".optimizer: sgd or adam");
  try {
    c.rollout.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(p + ": " + e.what());
  }
}

inline std::vector<eval::BenchTask> parse_tasks(const std::string& s) {
  std::vector<eval::BenchTask> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(eval::task_from_string(item));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (out.empty()) throw ConfigError("bench.tasks is empty");
  return out;
}

/// Desk-scale defaults, then the config file.
inline RunConfig resolve(const KeyValueConfig& kv) {
  kv.require_known(known_keys());
  RunConfig r;
  r.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
  try {
    r.variant = train::variant_from_string(kv.get_string("variant", "full"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  r.foundation = kv.get_string("foundation", "");
  r.dataset = kv.get_string("dataset", "");
  r.checkpoint = kv.get_string("checkpoint", "");

  r.data.preserved = static_cast<int>(kv.get_int("data.preserved", 300));
  r.data.shifted = static_cast<int>(kv.get_int("data.shifted", 300));
  r.data.tau_style = kv.get_double("data.tau_style", r.data.tau_style);
  r.data.num_palettes = static_cast<int>(kv.get_int("data.num_palettes", r.data.num_palettes));
  r.data.unique = kv.get_bool("data.unique", r.data.unique);
  r.data.seed = static_cast<std::uint64_t>(kv.get_int("data.seed", static_cast<long long>(Rng::mix(r.seed, 0xDA7A) >> 1)));

  auto& a = r.ablation;
  a.seed = r.seed;
  read_stage(kv, "stage1", a.stage1);
  read_stage(kv, "stage2", a.stage2);
  a.bench = eval::BenchSpec::standard(static_cast<std::uint64_t>(kv.get_int("bench.seed", 0)));
  a.bench.samples_per_cell = static_cast<int>(kv.get_int("bench.samples_per_cell", a.bench.samples_per_cell));
  a.bench.T_steps = static_cast<int>(kv.get_int("bench.T_steps", a.bench.T_steps));
  a.tasks = parse_tasks(kv.get_string("bench.tasks", "joint"));
  if (a.bench.samples_per_cell <= 0 || a.bench.T_steps <= 0) throw ConfigError("bench: samples_per_cell and T_steps must be positive");
  return r;
}

/// Root for relative run directories; USO_RUN_ROOT overrides the working directory.
inline std::filesystem::path run_root() {
  const char* env = std::getenv("USO_RUN_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::current_path();
}

inline std::filesystem::path resolve_dir(const std::filesystem::path& p) { return p.is_absolute() ? p : run_root() / p; }

/// Appends one JSON object per line.
class JsonlLog {
 public:
  explicit JsonlLog(const std::filesystem::path& path) : out_(path, std::ios::app) {
    if (!out_) throw std::runtime_error("cannot open log " + path.string());
  }
  void write(const nlohmann::json& j) { out_ << j.dump() << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

inline std::vector<synth::Triplet> triplets_for(const RunConfig& r) {
  if (!r.dataset.empty()) return synth::load_dataset(resolve_dir(r.dataset));
  std::vector<synth::Triplet> out;
  for (auto& rec : synth::generate_records(r.data)) out.push_back(std::move(rec.triplet));
  return out;
}

}  // namespace uso::run
