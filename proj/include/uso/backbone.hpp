#pragma once

// In-context generative transformer. One joint attention over the whole
// multimodal sequence [style, text, noisy latent, content] with 2-D rotary
// position mixing; velocity is read out at the noisy-latent slots.

#include "uso/encoders.hpp"
#include "uso/nn.hpp"

#include <json.hpp>

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace uso::bb {

using ag::ParameterSet;
using ag::Tape;
using ag::Var;

struct ArchConfig {
  int d_model = 64;
  int heads = 4;
  int layers = 4;
  int mlp_hidden = 128;
  int latent_grid = enc::kLatentGrid;
  int latent_channels = enc::kLatentChannels;
  double rope_base = 100.0;

  int head_dim() const { return d_model / heads; }

  nlohmann::json to_json() const {
    return {{"d_model", d_model}, {"heads", heads},           {"layers", layers},
            {"mlp_hidden", mlp_hidden}, {"latent_grid", latent_grid}, {"latent_channels", latent_channels},
            {"rope_base", rope_base}};
  }
  static ArchConfig from_json(const nlohmann::json& j) {
    ArchConfig a;
    a.d_model = j.at("d_model");
    a.heads = j.at("heads");
    a.layers = j.at("layers");
    a.mlp_hidden = j.at("mlp_hidden");
    a.latent_grid = j.at("latent_grid");
    a.latent_channels = j.at("latent_channels");
    a.rope_base = j.at("rope_base");
    return a;
  }
  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

enum class SegmentKind { style, text, noisy_latent, content };

struct Position {
  int h = 0;
  int w = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

/// One contiguous block of the sequence. Style, text and content segments
/// hold d_model-wide tokens; the noisy-latent segment holds the raw latent
/// (h·w × d_lat), which predict_velocity embeds together with the time.
struct Segment {
  SegmentKind kind;
  Var tokens;
  std::vector<Position> positions;
};

struct TokenSequence {
  std::vector<Segment> segments;
  int grid_h = enc::kLatentGrid;
  int grid_w = enc::kLatentGrid;

  std::size_t length() const {
    std::size_t n = 0;
    for (const auto& s : segments) n += static_cast<std::size_t>(s.tokens.rows());
    return n;
  }
  const Segment* find(SegmentKind k) const {
    for (const auto& s : segments)
      if (s.kind == k) return &s;
    return nullptr;
  }
};

/// Builds [z_s, c, z_t, z_c]; absent optional segments are skipped.
inline TokenSequence make_sequence(std::optional<Var> style, Var text, Var noisy_latent, std::optional<Var> content,
                                   int grid_h = enc::kLatentGrid, int grid_w = enc::kLatentGrid) {
  TokenSequence s;
  s.grid_h = grid_h;
  s.grid_w = grid_w;
  if (style) s.segments.push_back({SegmentKind::style, *style, {}});
  s.segments.push_back({SegmentKind::text, text, {}});
  s.segments.push_back({SegmentKind::noisy_latent, noisy_latent, {}});
  if (content) s.segments.push_back({SegmentKind::content, *content, {}});
  return s;
}

inline void validate_order(const TokenSequence& seq) {
  int last = -1;
  bool has_noisy = false;
  for (const auto& s : seq.segments) {
    const int k = static_cast<int>(s.kind);
    if (k <= last) throw std::invalid_argument("token sequence segments out of order");
    last = k;
    has_noisy = has_noisy || s.kind == SegmentKind::noisy_latent;
  }
  if (!has_noisy) throw std::invalid_argument("token sequence has no noisy-latent segment");
}

/// Text token j -> (0, j); style token k -> position of text token k mod n_text;
/// noisy token at grid (i, j) -> (i, j); content token at (i, j) -> (h+i, w+j).
inline TokenSequence assign_positions(TokenSequence seq) {
  validate_order(seq);
  const Segment* text = seq.find(SegmentKind::text);
  const int n_text = text ? static_cast<int>(text->tokens.rows()) : 0;
  for (auto& s : seq.segments) {
    const int n = static_cast<int>(s.tokens.rows());
    s.positions.assign(static_cast<std::size_t>(n), Position{});
    switch (s.kind) {
      case SegmentKind::text:
        for (int j = 0; j < n; ++j) s.positions[static_cast<std::size_t>(j)] = {0, j};
        break;
      case SegmentKind::style:
        if (n_text == 0) throw std::invalid_argument("style tokens need a text segment to share positions with");
        for (int k = 0; k < n; ++k) s.positions[static_cast<std::size_t>(k)] = {0, k % n_text};
        break;
      case SegmentKind::noisy_latent:
        if (n != seq.grid_h * seq.grid_w) throw std::invalid_argument("noisy latent does not tile the grid");
        for (int i = 0; i < n; ++i) s.positions[static_cast<std::size_t>(i)] = {i / seq.grid_w, i % seq.grid_w};
        break;
      case SegmentKind::content:
        if (n != seq.grid_h * seq.grid_w) throw std::invalid_argument("content tokens do not tile the grid");
        for (int i = 0; i < n; ++i) {
          s.positions[static_cast<std::size_t>(i)] = {seq.grid_h + i / seq.grid_w, seq.grid_w + i % seq.grid_w};
        }
        break;
    }
  }
  return seq;
}

/// Rotary tables for the given positions. Within each head the first half of
/// the rotation pairs encode p_h and the second half p_w.
inline std::pair<Matrix, Matrix> rotary_tables(const std::vector<Position>& pos, const ArchConfig& a) {
  const int pairs_per_head = a.head_dim() / 2;
  const int per_axis = pairs_per_head / 2;
  const auto n = static_cast<Eigen::Index>(pos.size());
  Matrix cos(n, a.d_model / 2), sin(n, a.d_model / 2);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (int c = 0; c < a.d_model / 2; ++c) {
      const int pair = c % pairs_per_head;
      const int axis = pair / per_axis;
      const int i = pair % per_axis;
      const double freq = std::pow(a.rope_base, -static_cast<double>(i) / per_axis);
      const double p = axis == 0 ? pos[static_cast<std::size_t>(r)].h : pos[static_cast<std::size_t>(r)].w;
      cos(r, c) = std::cos(p * freq);
      sin(r, c) = std::sin(p * freq);
    }
  }
  return {cos, sin};
}

inline constexpr int kTimeFeatures = 16;

inline Matrix time_features(double t) {
  Matrix f(1, kTimeFeatures);
  for (int i = 0; i < kTimeFeatures / 2; ++i) {
    const double freq = std::pow(2.0, i - 1) * M_PI;
    f(0, 2 * i) = std::sin(freq * t);
    f(0, 2 * i + 1) = std::cos(freq * t);
  }
  return f;
}

struct VelocityField {
  Var v;  // (h·w) × d_lat
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(ParameterSet& ps, const ArchConfig& arch, Rng& rng, const std::string& prefix = "backbone") : arch_(arch) {
    if (arch.d_model % arch.heads != 0 || arch.head_dim() % 4 != 0) {
      throw std::invalid_argument("head width must be a multiple of 4 for 2-D rotary mixing");
    }
    img_in_ = nn::Linear(ps, prefix + ".img_in", arch.latent_channels, arch.d_model, rng);
    cond_in_ = nn::Linear(ps, prefix + ".cond_in", arch.latent_channels, arch.d_model, rng);
    time1_ = nn::Linear(ps, prefix + ".time1", kTimeFeatures, arch.d_model, rng);
    time2_ = nn::Linear(ps, prefix + ".time2", arch.d_model, arch.d_model, rng);
    grid_ = &ps.add(prefix + ".grid_embed", rng.normal_matrix(arch.latent_grid * arch.latent_grid, arch.d_model, 0.1));
    for (int l = 0; l < arch.layers; ++l) {
      const std::string b = prefix + ".block" + std::to_string(l);
      Block blk;
      blk.norm1 = nn::RmsNorm(ps, b + ".norm1", arch.d_model);
      blk.q = nn::Linear(ps, b + ".q", arch.d_model, arch.d_model, rng);
      blk.k = nn::Linear(ps, b + ".k", arch.d_model, arch.d_model, rng);
      blk.v = nn::Linear(ps, b + ".v", arch.d_model, arch.d_model, rng);
      blk.o = nn::Linear(ps, b + ".o", arch.d_model, arch.d_model, rng, 0.5);
      blk.norm2 = nn::RmsNorm(ps, b + ".norm2", arch.d_model);
      blk.fc1 = nn::Linear(ps, b + ".fc1", arch.d_model, arch.mlp_hidden, rng);
      blk.fc2 = nn::Linear(ps, b + ".fc2", arch.mlp_hidden, arch.d_model, rng, 0.5);
      blocks_.push_back(blk);
    }
    final_norm_ = nn::RmsNorm(ps, prefix + ".final_norm", arch.d_model);
    out_ = nn::Linear(ps, prefix + ".out", arch.d_model, arch.latent_channels, rng, 0.1);
  }

  const ArchConfig& arch() const { return arch_; }
  const nn::Linear& content_projection() const { return cond_in_; }

  /// Velocity at the noisy-latent slots. `seq` must carry positions.
  VelocityField predict_velocity(Tape& tp, const TokenSequence& seq, double t) const {
    validate_order(seq);
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("predict_velocity: t outside [0,1]");
    std::vector<Var> parts;
    std::vector<Position> positions;
    Eigen::Index noisy_begin = 0, noisy_count = 0, offset = 0;
    for (const auto& s : seq.segments) {
      if (s.positions.size() != static_cast<std::size_t>(s.tokens.rows())) {
        throw std::invalid_argument("predict_velocity: positions not assigned");
      }
      if (s.kind == SegmentKind::noisy_latent) {
        if (s.tokens.cols() != arch_.latent_channels) throw std::invalid_argument("noisy latent width mismatch");
        Var temb = time2_(tp, ag::silu(time1_(tp, tp.constant(time_features(t)))));
        if (s.tokens.rows() != grid_->value.rows()) throw std::invalid_argument("noisy latent does not tile the grid");
        Var tokens = ag::add(img_in_(tp, s.tokens), tp.param(*grid_));
        parts.push_back(ag::add(tokens, ag::repeat_rows(temb, s.tokens.rows())));
        noisy_begin = offset;
        noisy_count = s.tokens.rows();
      } else {
        if (s.tokens.cols() != arch_.d_model) throw std::invalid_argument("segment width differs from d_model");
        if (s.kind == SegmentKind::content && s.tokens.rows() == grid_->value.rows()) {
          parts.push_back(ag::add(s.tokens, tp.param(*grid_)));
        } else {
          parts.push_back(s.tokens);
        }
      }
      positions.insert(positions.end(), s.positions.begin(), s.positions.end());
      offset += s.tokens.rows();
    }
    const auto [cos, sin] = rotary_tables(positions, arch_);
    Var x = ag::concat_rows(parts);
    for (const auto& blk : blocks_) {
      Var h = blk.norm1(tp, x);
      Var q = ag::rotate_pairs(blk.q(tp, h), cos, sin);
      Var k = ag::rotate_pairs(blk.k(tp, h), cos, sin);
      Var v = blk.v(tp, h);
      x = ag::add(x, blk.o(tp, ag::attention(q, k, v, arch_.heads)));
      x = ag::add(x, blk.fc2(tp, ag::gelu(blk.fc1(tp, blk.norm2(tp, x)))));
    }
    Var noisy = ag::slice_rows(x, noisy_begin, noisy_count);
    return VelocityField{out_(tp, final_norm_(tp, noisy))};
  }

 private:
  struct Block {
    nn::RmsNorm norm1, norm2;
    nn::Linear q, k, v, o, fc1, fc2;
  };

  ArchConfig arch_;
  nn::Linear img_in_, cond_in_, time1_, time2_, out_;
  std::vector<Block> blocks_;
  nn::RmsNorm final_norm_;
  ag::Parameter* grid_ = nullptr;
};

}  // namespace uso::bb
