// uso: dataset build, encoder warm-up, stage training, ablations, bench and
// report, each writing into its own run directory.

#include "uso/run.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

using namespace uso;
namespace fs = std::filesystem;

namespace {

struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<long long> seed;
  std::string out;
  std::string variant;
  std::string stage = "disentangle";
  std::optional<int> steps;
  bool reuse = false;
  std::string runs;
};

KeyValueConfig load_config(const Options& o) {
  KeyValueConfig kv = o.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(o.config);
  for (const auto& s : o.overrides) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + s);
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (o.seed) kv.set("seed", std::to_string(*o.seed));
  if (!o.variant.empty()) kv.set("variant", o.variant);
  return kv;
}

/// Creates the run directory and snapshots the resolved config into it.
fs::path open_run(const Options& o, const KeyValueConfig& kv, const std::string& command) {
  if (o.out.empty()) throw ConfigError(command + ": --out is required");
  const fs::path dir = run::resolve_dir(o.out);
  fs::create_directories(dir);
  std::ofstream(dir / "config.snapshot") << "# " << command << "\n" << kv.dump();
  return dir;
}

fs::path foundation_dir(const KeyValueConfig& kv) {
  if (kv.has("foundation")) return run::resolve_dir(kv.get_string("foundation", ""));
  if (const char* env = std::getenv("USO_FOUNDATION"); env && *env) return run::resolve_dir(env);
  return run::resolve_dir("foundation");
}

train::Foundation require_foundation(const KeyValueConfig& kv) {
  const fs::path dir = foundation_dir(kv);
  if (!train::has_foundation(dir)) throw MissingArtifact("no pretrained encoders at " + dir.string());
  return train::load_foundation(dir);
}

Checkpoint require_checkpoint(const run::RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("checkpoint key is required");
  fs::path p = run::resolve_dir(rc.checkpoint);
  if (fs::is_directory(p)) p /= "model.ckpt";
  if (!fs::exists(p)) throw MissingArtifact("no checkpoint at " + p.string());
  return Checkpoint::load(p);
}

std::unique_ptr<UsoModel> model_from(const Checkpoint& ck, std::uint64_t seed) {
  const ModelConfig mc = ck.meta.contains("model") ? ModelConfig::from_json(ck.meta.at("model")) : ModelConfig{};
  auto m = std::make_unique<UsoModel>(mc, seed);
  m->load_matching(ck);
  return m;
}

train::StepCallback step_logger(run::JsonlLog& log, const std::string& stage) {
  return [&log, stage](const train::StepLog& s) {
    auto j = train::to_json(s);
    j["stage"] = stage;
    log.write(j);
  };
}

bool already_done(const fs::path& dir, const std::string& artifact) {
  if (!fs::exists(dir / artifact)) return false;
  std::cout << "complete: " << (dir / artifact).string() << "\n";
  return true;
}

std::uint64_t file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::uint64_t h = 1469598103934665603ull;
  char c;
  while (in.get(c)) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
  return h;
}

int build_data(const Options& o) {
  auto kv = load_config(o);
  const auto rc = run::resolve(kv);
  const fs::path dir = open_run(o, kv, "build-data");
  const fs::path manifest = synth::build_dataset(rc.data, dir);
  std::cout << "manifest " << manifest.string() << " hash " << std::hex << file_hash(manifest) << std::dec << "\n";
  return 0;
}

int pretrain_encoders(const Options& o) {
  auto kv = load_config(o);
  const auto rc = run::resolve(kv);
  const fs::path dir = open_run(o, kv, "pretrain-encoders");
  if (o.reuse && train::has_foundation(dir)) {
    std::cout << "reusing " << dir.string() << "\n";
    return 0;
  }
  train::FoundationConfig fc;
  fc.seed = rc.seed;
  run::JsonlLog log(dir / "log.jsonl");
  const auto f = train::build_foundation(fc, [&](const std::string& line) {
    log.write({{"progress", line}});
    std::cerr << line << "\n";
  });
  train::save_foundation(f, dir);
  std::cout << f.stats.dump() << "\n";
  return 0;
}

int train_stage(const Options& o, train::Stage stage) {
  auto kv = load_config(o);
  if (o.steps) kv.set(stage == train::Stage::align ? "stage1.steps" : "stage2.steps", std::to_string(*o.steps));
  const auto rc = run::resolve(kv);
  const std::string name = stage == train::Stage::align ? "train-stage1" : "train-stage2";
  const fs::path dir = open_run(o, kv, name);
  if (already_done(dir, "model.ckpt")) return 0;

  std::unique_ptr<UsoModel> m;
  if (!rc.checkpoint.empty()) {
    m = model_from(require_checkpoint(rc), rc.seed);
  } else {
    m = std::make_unique<UsoModel>(train::model_config(rc.variant), Rng::mix(rc.seed, 0xAB1));
    m->load_matching(require_foundation(kv).model);
  }
  const auto data = train::prepare(*m, run::triplets_for(rc));
  run::JsonlLog log(dir / "log.jsonl");
  auto cfg = stage == train::Stage::align ? rc.ablation.stage1 : rc.ablation.stage2;
  cfg.seed = Rng::mix(rc.seed, stage == train::Stage::align ? 11 : 12);
  if (rc.variant == train::Variant::no_srl) cfg.reward_enabled = false;
  if (stage == train::Stage::align) {
    train::stage1_train(*m, data, cfg, rc.variant, step_logger(log, "align"));
  } else {
    train::stage2_train(*m, data, cfg, rc.variant, step_logger(log, "disentangle"));
  }
  auto ck = m->checkpoint();
  ck.meta["variant"] = std::string(train::to_string(rc.variant));
  ck.meta["stage"] = std::string(train::to_string(stage));
  ck.save(dir / "model.ckpt");
  return 0;
}

/// Reward on from the first step, on top of an existing checkpoint.
int srl_finetune(const Options& o) {
  auto kv = load_config(o);
  const auto stage = o.stage == "align" ? train::Stage::align : train::Stage::disentangle;
  if (o.stage != "align" && o.stage != "disentangle") throw ConfigError("--stage must be align or disentangle");
  const std::string prefix = stage == train::Stage::align ? "stage1" : "stage2";
  if (o.steps) kv.set(prefix + ".steps", std::to_string(*o.steps));
  kv.set(prefix + ".reward_start_fraction", "0");
  const auto rc = run::resolve(kv);
  const fs::path dir = open_run(o, kv, "srl-finetune");
  if (already_done(dir, "model.ckpt")) return 0;
  auto m = model_from(require_checkpoint(rc), rc.seed);
  const auto data = train::prepare(*m, run::triplets_for(rc));
  run::JsonlLog log(dir / "log.jsonl");
  auto cfg = stage == train::Stage::align ? rc.ablation.stage1 : rc.ablation.stage2;
  cfg.seed = Rng::mix(rc.seed, 13);
  if (stage == train::Stage::align) {
    train::stage1_train(*m, data, cfg, rc.variant, step_logger(log, "srl"));
  } else {
    train::stage2_train(*m, data, cfg, rc.variant, step_logger(log, "srl"));
  }
  m->checkpoint().save(dir / "model.ckpt");
  return 0;
}

void write_report(const fs::path& dir, const eval::MetricReport& r) {
  std::ofstream(dir / "report.json") << eval::to_json(r).dump(2) << "\n";
  std::ofstream(dir / "summary.csv") << eval::to_csv(eval::summary_rows(eval::to_json(r), dir.filename().string()));
}

int ablate(const Options& o) {
  auto kv = load_config(o);
  if (o.steps) kv.set("stage2.steps", std::to_string(*o.steps));
  const auto rc = run::resolve(kv);
  const fs::path dir = open_run(o, kv, "ablate");
  if (already_done(dir, "report.json")) return 0;
  const auto f = require_foundation(kv);
  run::JsonlLog log(dir / "log.jsonl");
  const bool runs_stage1 = rc.variant != train::Variant::no_sat && rc.ablation.stage1.steps > 0;
  std::string stage = runs_stage1 ? "align" : "disentangle";
  long long last = -1;
  auto cb = [&](const train::StepLog& s) {
    if (s.step <= last) stage = "disentangle";
    last = s.step;
    auto j = train::to_json(s);
    j["stage"] = stage;
    log.write(j);
  };
  const auto r = train::run_ablation(rc.variant, rc.ablation, f, run::triplets_for(rc), cb);
  r.final_checkpoint.save(dir / "model.ckpt");
  write_report(dir, r.report);
  std::cout << eval::to_csv(eval::summary_rows(eval::to_json(r.report), dir.filename().string()));
  return 0;
}

int bench(const Options& o) {
  auto kv = load_config(o);
  const auto rc = run::resolve(kv);
  const fs::path dir = open_run(o, kv, "bench");
  const auto ck = require_checkpoint(rc);
  const auto f = require_foundation(kv);
  auto m = model_from(ck, rc.seed);
  eval::ShapeClassifier clf;
  clf.restore(f.classifier);
  const eval::PaletteDetector palette;
  eval::MetricReport r;
  r.variant = ck.meta.value("variant", std::string(train::to_string(rc.variant)));
  r.seed = rc.seed;
  for (auto task : rc.ablation.tasks) r.tasks.push_back(eval::run_bench(*m, rc.ablation.bench, task, {clf, palette}));
  write_report(dir, r);
  std::cout << eval::to_csv(eval::summary_rows(eval::to_json(r), dir.filename().string()));
  return 0;
}

int report(const Options& o) {
  if (o.runs.empty()) throw ConfigError("report: --runs a,b,c is required");
  KeyValueConfig kv = load_config(o);
  const fs::path dir = open_run(o, kv, "report");
  std::vector<eval::SummaryRow> rows;
  std::istringstream in(o.runs);
  std::string run_name;
  while (std::getline(in, run_name, ',')) {
    const fs::path p = run::resolve_dir(run_name) / "report.json";
    std::ifstream f(p);
    if (!f) throw MissingArtifact("no report at " + p.string());
    for (auto& row : eval::summary_rows(nlohmann::json::parse(f), run_name)) rows.push_back(std::move(row));
  }
  std::ofstream(dir / "summary.csv") << eval::to_csv(rows);

  std::set<std::string> tasks;
  for (const auto& r : rows) tasks.insert(r.task);
  for (const auto& task : tasks) {
    std::vector<std::string> labels;
    std::vector<std::vector<double>> values;
    for (const auto& r : rows) {
      if (r.task != task) continue;
      labels.push_back(r.run);
      values.push_back({r.style_sim, r.content_sim, r.text_align});
    }
    std::ofstream(dir / (task + ".svg")) << eval::bar_chart_svg(task, labels, {"style_sim", "content_sim", "text_align"}, values);
  }
  std::cout << eval::to_csv(rows);
  return 0;
}

std::string quote(std::string s) {
  for (auto& c : s)
    if (c == '"' || c == '\n') c = '\'';
  return "\"" + s + "\"";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"USO desk-scale pipeline"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value config file");
    sub->add_option("--set", o.overrides, "config override key=value (repeatable)");
    sub->add_option("--seed", o.seed);
    sub->add_option("--out", o.out, "run directory");
    sub->add_option("--variant", o.variant);
    sub->add_option("--stage", o.stage, "align | disentangle");
    sub->add_option("--steps", o.steps);
    return sub;
  };
  std::map<std::string, std::function<int()>> handlers{
      {"build-data", [&] { return build_data(o); }},
      {"pretrain-encoders", [&] { return pretrain_encoders(o); }},
      {"train-stage1", [&] { return train_stage(o, train::Stage::align); }},
      {"train-stage2", [&] { return train_stage(o, train::Stage::disentangle); }},
      {"srl-finetune", [&] { return srl_finetune(o); }},
      {"ablate", [&] { return ablate(o); }},
      {"bench", [&] { return bench(o); }},
      {"report", [&] { return report(o); }},
  };
  for (const auto& [name, fn] : handlers) {
    auto* sub = common(app.add_subcommand(name));
    if (name == "pretrain-encoders") sub->add_flag("--reuse", o.reuse, "keep an existing foundation");
    if (name == "report") sub->add_option("--runs", o.runs, "comma-separated run directories");
  }

  std::string command = "?";
  try {
    app.parse(argc, argv);
    command = app.get_subcommands().front()->get_name();
    return handlers.at(command)();
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error kind=usage command=" << command << " message=" << quote(e.what()) << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error kind=config command=" << command << " message=" << quote(e.what()) << "\n";
    return 2;
  } catch (const MissingArtifact& e) {
    std::cerr << "error kind=missing_artifact command=" << command << " message=" << quote(e.what()) << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error kind=runtime command=" << command << " message=" << quote(e.what()) << "\n";
    return 1;
  }
}
