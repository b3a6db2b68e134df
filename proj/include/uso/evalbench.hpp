#pragma once

// Miniature customization benchmark: oracle detectors, the three metric
// dimensions (content consistency, style similarity, text alignment), the
// bench runner and report export (JSON, CSV, SVG bar charts).

#include "uso/checkpoint.hpp"
#include "uso/foundation.hpp"
#include "uso/srl.hpp"
#include "uso/style_descriptor.hpp"
#include "uso/synthworld.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace uso::eval {

/// Shared with the reward: one descriptor implementation.
inline RowVector style_descriptor(const Matrix& img) { return descriptor::style_descriptor(img); }

// ---------------------------------------------------------------------------
// Shape classifier (content oracle)
// ---------------------------------------------------------------------------

class ShapeClassifier {
 public:
  static constexpr int kFeatures = 32;

  explicit ShapeClassifier(std::uint64_t seed = 0) {
    Rng rng(Rng::mix(seed, 0xC1A5));
    conv1_ = nn::Conv2d(ps_, "classifier.conv1", 3, 16, 3, 1, 1, rng);
    conv2_ = nn::Conv2d(ps_, "classifier.conv2", 16, 32, 3, 1, 1, rng);
    conv3_ = nn::Conv2d(ps_, "classifier.conv3", 32, 32, 3, 2, 1, rng);
    fc_ = nn::Linear(ps_, "classifier.fc", 32, kFeatures, rng);
    head_ = nn::Linear(ps_, "classifier.head", kFeatures, synth::kNumShapes, rng);
  }
  ShapeClassifier(const ShapeClassifier&) = delete;
  ShapeClassifier& operator=(const ShapeClassifier&) = delete;

  ag::ParameterSet& parameters() { return ps_; }
  const ag::ParameterSet& parameters() const { return ps_; }

  /// Penultimate features and logits. The input is centered on its median
  /// color so the subject shows up as a deviation whatever the palette.
  std::pair<ag::Var, ag::Var> forward(ag::Tape& t, const Matrix& img) const {
    ag::Geometry g = enc::kImageGeometry;
    ag::Var x = ag::relu(conv1_(t, t.constant(center(img)), g));
    g = conv1_.output_geometry(g);
    x = ag::relu(conv2_(t, x, g));
    g = conv2_.output_geometry(g);
    x = ag::relu(conv3_(t, x, g));
    ag::Var feat = ag::relu(fc_(t, ag::max_rows(x)));
    return {feat, head_(t, feat)};
  }

  static Matrix center(const Matrix& img) {
    Matrix out = img;
    for (int c = 0; c < 3; ++c) {
      Eigen::VectorXd col = img.col(c);
      std::nth_element(col.data(), col.data() + col.size() / 2, col.data() + col.size());
      out.col(c).array() -= col(col.size() / 2);
    }
    return out;
  }

  RowVector features(const Matrix& img) const {
    enc::check_image(img);
    ag::Tape t;
    ag::NoGradGuard g(t);
    return forward(t, img).first.value();
  }

  int predict(const Matrix& img) const {
    ag::Tape t;
    ag::NoGradGuard g(t);
    const Matrix logits = forward(t, img).second.value();
    Eigen::Index k = 0;
    logits.row(0).maxCoeff(&k);
    return static_cast<int>(k);
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.meta["kind"] = "shape_classifier";
    ck.put(ps_);
    return ck;
  }
  void restore(const Checkpoint& ck) { ck.restore(ps_); }

 private:
  ag::ParameterSet ps_;
  nn::Conv2d conv1_, conv2_, conv3_;
  nn::Linear fc_, head_;
};

struct ClassifierConfig {
  found::WarmupConfig warmup{3000, 16, 2e-3, 0};
  double noise = 0.03;
};

/// Trains on canonical and stylized renders. When an autoencoder is supplied,
/// half of the images pass through a reconstruction round trip so the
/// classifier also sees codec-smoothed inputs.
inline void train_classifier(ShapeClassifier& clf, const ClassifierConfig& cfg, const UsoModel* codec = nullptr,
                             const found::ProgressFn& progress = {}) {
  auto& ps = clf.parameters();
  Rng rng(Rng::mix(cfg.warmup.seed, 0xC1F));
  nn::Adam opt(cfg.warmup.lr);
  for (int step = 0; step < cfg.warmup.steps; ++step) {
    opt.set_lr(found::cosine_lr(cfg.warmup.lr, step, cfg.warmup.steps));
    ps.zero_grad();
    ag::Tape t;
    std::vector<ag::Var> logits;
    std::vector<int> labels;
    for (int b = 0; b < cfg.warmup.batch; ++b) {
      found::WorldSample s = found::random_world_sample(rng);
      Matrix img = s.image;
      if (codec && rng.uniform() < 0.5) img = codec->decode(codec->encode_latent(img));
      img += rng.normal_matrix(img.rows(), img.cols(), cfg.noise);
      logits.push_back(clf.forward(t, img).second);
      labels.push_back(s.content.shape_id);
    }
    ag::Var loss = ag::cross_entropy(ag::concat_rows(logits), labels);
    t.backward(loss);
    opt.step(ps);
    if (progress) progress(step, loss.item());
  }
}

/// Fraction of clean renders classified correctly.
inline double classifier_accuracy(const ShapeClassifier& clf, int n, std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0xACC));
  int ok = 0;
  for (int i = 0; i < n; ++i) {
    const found::WorldSample s = found::random_world_sample(rng);
    ok += clf.predict(s.image) == s.content.shape_id;
  }
  return static_cast<double>(ok) / n;
}

// ---------------------------------------------------------------------------
// Detectors
// ---------------------------------------------------------------------------

/// Grid cell whose pixels deviate most from the image's median color.
inline std::pair<int, int> occupied_cell(const Matrix& img) {
  enc::check_image(img);
  RowVector bg(3);
  for (int c = 0; c < 3; ++c) {
    Eigen::VectorXd col = img.col(c);
    std::nth_element(col.data(), col.data() + col.size() / 2, col.data() + col.size());
    bg(c) = col(col.size() / 2);
  }
  double best = -1.0;
  std::pair<int, int> cell{0, 0};
  for (int r = 0; r < synth::kGrid; ++r) {
    for (int c = 0; c < synth::kGrid; ++c) {
      double s = 0.0;
      for (int y = r * synth::kCell; y < (r + 1) * synth::kCell; ++y)
        for (int x = c * synth::kCell; x < (c + 1) * synth::kCell; ++x) {
          s += (img.row(y * synth::kImageSize + x) - bg).norm();
        }
      if (s > best) {
        best = s;
        cell = {r, c};
      }
    }
  }
  return cell;
}

/// Palette whose prototype descriptors (every texture, a few contents) lie
/// closest to the image's descriptor.
class PaletteDetector {
 public:
  PaletteDetector() {
    Rng rng(0xFA1E77E);
    for (int p = 0; p < synth::kNumPalettes; ++p) {
      for (int tx = 0; tx < synth::kNumTextures; ++tx) {
        RowVector acc = RowVector::Zero(descriptor::kDim);
        for (int k = 0; k < 4; ++k) {
          const synth::StyleSpec s{p, static_cast<synth::Texture>(tx), 0.25 * k};
          acc += style_descriptor(synth::apply_style(synth::random_content(rng), s, rng.next_u64()));
        }
        prototypes_.push_back(acc.normalized());
        labels_.push_back(p);
      }
    }
  }

  int operator()(const Matrix& img) const {
    const RowVector d = style_descriptor(img);
    double best = -2.0;
    int label = 0;
    for (std::size_t i = 0; i < prototypes_.size(); ++i) {
      const double c = d.dot(prototypes_[i]);
      if (c > best) {
        best = c;
        label = labels_[i];
      }
    }
    return label;
  }

 private:
  std::vector<RowVector> prototypes_;
  std::vector<int> labels_;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct ContentScore {
  double cosine = 0.0;
  bool correct = false;
};

/// Classifier-feature cosine; `correct` compares the predicted shape of the
/// generation against `shape_id`.
inline ContentScore content_similarity(const ShapeClassifier& clf, const Matrix& gen, const Matrix& content_ref,
                                       int shape_id) {
  const RowVector a = clf.features(gen), b = clf.features(content_ref);
  ContentScore s;
  const double na = a.norm(), nb = b.norm();
  s.cosine = (na > 0.0 && nb > 0.0) ? a.dot(b) / (na * nb) : 0.0;
  s.correct = clf.predict(gen) == shape_id;
  return s;
}

/// Mean of per-slot indicators over the slots the prompt fills; 1 for an empty prompt.
inline double text_alignment(const ShapeClassifier& clf, const PaletteDetector& palette, const Matrix& gen,
                             const synth::PromptSpec& prompt) {
  if (!prompt.valid()) throw std::invalid_argument("text_alignment: invalid prompt");
  int slots = 0, hits = 0;
  if (prompt.shape_word != synth::kNullToken) {
    ++slots;
    hits += synth::shape_token(clf.predict(gen)) == prompt.shape_word;
  }
  if (prompt.position_word != synth::kNullToken) {
    ++slots;
    const auto [r, c] = occupied_cell(gen);
    hits += synth::position_token(r, c) == prompt.position_word;
  }
  if (prompt.style_word) {
    ++slots;
    hits += synth::style_token(palette(gen)) == *prompt.style_word;
  }
  return slots == 0 ? 1.0 : static_cast<double>(hits) / slots;
}

// ---------------------------------------------------------------------------
// Bench
// ---------------------------------------------------------------------------

enum class BenchTask { subject, style, joint };

inline std::string_view to_string(BenchTask t) {
  switch (t) {
    case BenchTask::subject:
      return "subject";
    case BenchTask::style:
      return "style";
    case BenchTask::joint:
      return "joint";
  }
  return "?";
}

inline BenchTask task_from_string(std::string_view s) {
  if (s == "subject") return BenchTask::subject;
  if (s == "style") return BenchTask::style;
  if (s == "joint") return BenchTask::joint;
  throw std::invalid_argument("unknown bench task: " + std::string(s));
}

/// A prompt template: layout-preserved, or shifted by (drow, dcol) on the grid.
struct BenchPrompt {
  synth::LayoutMode mode = synth::LayoutMode::preserved;
  int drow = 0;
  int dcol = 0;
};

struct BenchSpec {
  std::vector<synth::ContentSpec> content_pool;
  std::vector<synth::StyleSpec> style_pool;
  std::vector<BenchPrompt> prompt_pool;
  int samples_per_cell = 2;
  int T_steps = 8;
  std::uint64_t seed = 0;

  std::size_t cells() const { return content_pool.size() * style_pool.size() * prompt_pool.size(); }
  std::size_t generations() const { return cells() * static_cast<std::size_t>(samples_per_cell); }

  /// 8 contents × 6 styles × 3 prompts (one preserved, two shifted), 2 samples per cell.
  static BenchSpec standard(std::uint64_t seed = 0) {
    BenchSpec b;
    b.seed = seed;
    Rng rng(Rng::mix(seed, 0xBE7C));
    for (int i = 0; i < 8; ++i) {
      synth::ContentSpec c = synth::random_content(rng);
      c.shape_id = i % synth::kNumShapes;
      b.content_pool.push_back(c);
    }
    for (int i = 0; i < 6; ++i) {
      b.style_pool.push_back(synth::StyleSpec{1 + i, static_cast<synth::Texture>(i % synth::kNumTextures), 0.0});
    }
    b.prompt_pool = {{synth::LayoutMode::preserved, 0, 0},
                     {synth::LayoutMode::shifted, 2, 1},
                     {synth::LayoutMode::shifted, 1, 3}};
    return b;
  }
};

/// Everything one bench cell needs, derived from the spec.
struct BenchCell {
  synth::ContentSpec content;      // as shown in the content reference
  synth::ContentSpec placed;       // where the prompt asks for the subject
  synth::StyleSpec style;
  synth::ContentSpec decoy;        // subject of the style reference
  BenchPrompt prompt;
  Matrix content_ref;
  Matrix style_ref;
};

inline BenchCell make_cell(const BenchSpec& spec, std::size_t ci, std::size_t si, std::size_t pi) {
  BenchCell cell;
  cell.content = spec.content_pool.at(ci);
  cell.style = spec.style_pool.at(si);
  cell.prompt = spec.prompt_pool.at(pi);
  cell.placed = cell.content;
  if (cell.prompt.mode == synth::LayoutMode::shifted) {
    cell.placed.row = (cell.content.row + cell.prompt.drow) % synth::kGrid;
    cell.placed.col = (cell.content.col + cell.prompt.dcol) % synth::kGrid;
  }
  cell.decoy = synth::ContentSpec{(cell.content.shape_id + 1 + static_cast<int>(si) % (synth::kNumShapes - 1)) %
                                      synth::kNumShapes,
                                  (cell.content.row + 2) % synth::kGrid, (cell.content.col + 2) % synth::kGrid,
                                  synth::Scale::large};
  const std::uint64_t render_seed = Rng::mix(spec.seed, 0xCE11 + ci * 131 + si);
  cell.content_ref = synth::render_content(cell.content, render_seed);
  cell.style_ref = synth::apply_style(cell.decoy, cell.style, render_seed);
  return cell;
}

/// Prompt and references for a task. Subject: content ref + style word.
/// Style: style ref + subject words. Joint: both refs; empty prompt when
/// layout-preserved, subject words at the new place when shifted.
inline srl::GenerationRequest make_request(const BenchCell& cell, BenchTask task) {
  srl::GenerationRequest r;
  switch (task) {
    case BenchTask::subject:
      r.task = srl::TaskMode::subject;
      r.prompt = synth::describe_content(cell.placed, cell.style.palette_id, synth::PromptMode::descriptive_stylization);
      r.content_ref = &cell.content_ref;
      break;
    case BenchTask::style:
      r.task = srl::TaskMode::style;
      r.prompt = synth::describe_content(cell.placed, std::nullopt, synth::PromptMode::descriptive);
      r.style_ref = &cell.style_ref;
      break;
    case BenchTask::joint:
      r.task = srl::TaskMode::joint;
      if (cell.prompt.mode == synth::LayoutMode::preserved) {
        r.prompt = synth::PromptSpec{synth::kNullToken, synth::kNullToken, std::nullopt,
                                     synth::PromptMode::instructive_stylization};
      } else {
        r.prompt = synth::describe_content(cell.placed, std::nullopt, synth::PromptMode::instructive_stylization);
      }
      r.content_ref = &cell.content_ref;
      r.style_ref = &cell.style_ref;
      break;
  }
  return r;
}

struct CellResult {
  std::size_t content_index = 0, style_index = 0, prompt_index = 0;
  std::string layout;
  int samples = 0;
  std::optional<double> content_sim, content_acc, style_sim, text_align;
  std::string error;
};

struct Summary {
  double content_sim = 0.0, content_acc = 0.0, style_sim = 0.0, text_align = 0.0;
  std::size_t cells = 0;
};

struct TaskReport {
  BenchTask task = BenchTask::joint;
  std::vector<CellResult> cells;
  std::size_t generations = 0;

  /// Means over cells with values; `layout` filters by "preserved"/"shifted".
  Summary summary(std::string_view layout = {}) const {
    Summary s;
    for (const auto& c : cells) {
      if (!layout.empty() && c.layout != layout) continue;
      if (!c.style_sim) continue;
      s.content_sim += *c.content_sim;
      s.content_acc += *c.content_acc;
      s.style_sim += *c.style_sim;
      s.text_align += *c.text_align;
      ++s.cells;
    }
    if (s.cells) {
      const double n = static_cast<double>(s.cells);
      s.content_sim /= n;
      s.content_acc /= n;
      s.style_sim /= n;
      s.text_align /= n;
    }
    return s;
  }
};

struct Oracles {
  const ShapeClassifier& classifier;
  const PaletteDetector& palette;
};

/// Generates samples_per_cell images per cell with fixed seeds and scores
/// them. A cell whose generation fails is kept with null metrics.
inline TaskReport run_bench(const UsoModel& model, const BenchSpec& spec, BenchTask task, const Oracles& oracles) {
  TaskReport rep;
  rep.task = task;
  srl::RolloutConfig rc;
  rc.T_steps = spec.T_steps;
  std::size_t index = 0;
  for (std::size_t ci = 0; ci < spec.content_pool.size(); ++ci) {
    for (std::size_t si = 0; si < spec.style_pool.size(); ++si) {
      for (std::size_t pi = 0; pi < spec.prompt_pool.size(); ++pi, ++index) {
        const BenchCell cell = make_cell(spec, ci, si, pi);
        const srl::GenerationRequest req = make_request(cell, task);
        const Matrix placed_ref = synth::render_content(cell.placed, 0);
        CellResult res{ci, si, pi, std::string(synth::to_string(cell.prompt.mode)), 0, {}, {}, {}, {}, {}};
        try {
          double cs = 0.0, ca = 0.0, ss = 0.0, ta = 0.0;
          for (int s = 0; s < spec.samples_per_cell; ++s) {
            const Matrix img = srl::sample(model, req, rc, Rng::mix(spec.seed, index * 1000 + static_cast<std::size_t>(s)));
            ++rep.generations;
            ++res.samples;
            const ContentScore c = content_similarity(oracles.classifier, img, placed_ref, cell.content.shape_id);
            cs += c.cosine;
            ca += c.correct ? 1.0 : 0.0;
            ss += descriptor::style_similarity(img, cell.style_ref);
            ta += text_alignment(oracles.classifier, oracles.palette, img, req.prompt);
          }
          const double n = spec.samples_per_cell;
          res.content_sim = cs / n;
          res.content_acc = ca / n;
          res.style_sim = ss / n;
          res.text_align = ta / n;
        } catch (const std::exception& e) {
          res.error = e.what();
        }
        rep.cells.push_back(std::move(res));
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

inline constexpr int kReportSchemaVersion = 1;

struct MetricReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::vector<TaskReport> tasks;
  nlohmann::json extra = nlohmann::json::object();

  const TaskReport* find(BenchTask t) const {
    for (const auto& r : tasks)
      if (r.task == t) return &r;
    return nullptr;
  }
};

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json summary_json(const Summary& s) {
  return {{"cells", s.cells},
          {"content_sim", s.content_sim},
          {"content_acc", s.content_acc},
          {"style_sim", s.style_sim},
          {"text_align", s.text_align}};
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["variant"] = r.variant;
  j["seed"] = r.seed;
  j["extra"] = r.extra;
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : r.tasks) {
    nlohmann::json tj;
    tj["task"] = std::string(to_string(t.task));
    tj["generations"] = t.generations;
    tj["summary"] = summary_json(t.summary());
    if (t.task == BenchTask::joint) {
      tj["summary_preserved"] = summary_json(t.summary("preserved"));
      tj["summary_shifted"] = summary_json(t.summary("shifted"));
    }
    tj["cells"] = nlohmann::json::array();
    for (const auto& c : t.cells) {
      nlohmann::json cj{{"content", c.content_index}, {"style", c.style_index}, {"prompt", c.prompt_index},
                        {"layout", c.layout},         {"samples", c.samples},     {"content_sim", opt_json(c.content_sim)},
                        {"content_acc", opt_json(c.content_acc)}, {"style_sim", opt_json(c.style_sim)},
                        {"text_align", opt_json(c.text_align)}};
      if (!c.error.empty()) cj["error"] = c.error;
      tj["cells"].push_back(cj);
    }
    j["tasks"].push_back(tj);
  }
  return j;
}

/// Flat per-task summary row as stored in a report file.
struct SummaryRow {
  std::string run;
  std::string variant;
  std::uint64_t seed = 0;
  std::string task;
  double content_sim = 0.0, content_acc = 0.0, style_sim = 0.0, text_align = 0.0;
};

inline std::vector<SummaryRow> summary_rows(const nlohmann::json& report, const std::string& run) {
  if (report.value("schema_version", 0) != kReportSchemaVersion) {
    throw std::runtime_error("unsupported report schema in " + run);
  }
  std::vector<SummaryRow> rows;
  for (const auto& t : report.at("tasks")) {
    const auto& s = t.at("summary");
    rows.push_back(SummaryRow{run, report.at("variant").get<std::string>(), report.at("seed").get<std::uint64_t>(),
                              t.at("task").get<std::string>(), s.at("content_sim").get<double>(),
                              s.at("content_acc").get<double>(), s.at("style_sim").get<double>(),
                              s.at("text_align").get<double>()});
  }
  return rows;
}

inline std::string to_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream out;
  out << "run,variant,seed,task,content_sim,content_acc,style_sim,text_align\n";
  for (const auto& r : rows) {
    out << r.run << ',' << r.variant << ',' << r.seed << ',' << r.task << ',' << r.content_sim << ',' << r.content_acc
        << ',' << r.style_sim << ',' << r.text_align << '\n';
  }
  return out.str();
}

/// Grouped bar chart: one group per row label, one bar per series.
inline std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                                 const std::vector<std::string>& series, const std::vector<std::vector<double>>& values) {
  const int width = 120 + static_cast<int>(labels.size()) * (30 * static_cast<int>(series.size()) + 30);
  const int height = 260, top = 40, bottom = 210;
  static const char* colors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  svg << "<line x1=\"60\" y1=\"" << bottom << "\" x2=\"" << width - 10 << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = k * 0.25;
    const double y = bottom - v * (bottom - top);
    svg << "<text x=\"20\" y=\"" << y + 4 << "\" font-family=\"sans-serif\" font-size=\"10\">" << v << "</text>\n";
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double x0 = 70 + static_cast<double>(i) * (30.0 * series.size() + 30.0);
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = std::clamp(values.at(i).at(s), 0.0, 1.0);
      const double h = v * (bottom - top);
      svg << "<rect x=\"" << x0 + 30.0 * s << "\" y=\"" << bottom - h << "\" width=\"26\" height=\"" << h
          << "\" fill=\"" << colors[s % 6] << "\"/>\n";
    }
    svg << "<text x=\"" << x0 << "\" y=\"" << bottom + 15 << "\" font-family=\"sans-serif\" font-size=\"10\">"
        << labels[i] << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    svg << "<rect x=\"" << 70 + 110 * s << "\" y=\"235\" width=\"10\" height=\"10\" fill=\"" << colors[s % 6]
        << "\"/><text x=\"" << 84 + 110 * s << "\" y=\"244\" font-family=\"sans-serif\" font-size=\"10\">" << series[s]
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace uso::eval
