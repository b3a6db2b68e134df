#pragma once

// Procedural content/style universe, the exact stylization and
// de-stylization experts, triplet curation and filtering.
//
// Images are (H·W)×3 matrices with row index y·W + x and values in [0,1].
// The canvas is 32×32, split into a 4×4 grid of 8×8 cells; every shape lies
// entirely inside its cell.

#include "uso/nn.hpp"
#include "uso/style_descriptor.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace uso::synth {

inline constexpr int kImageSize = 32;
inline constexpr int kPixels = kImageSize * kImageSize;
inline constexpr int kGrid = 4;
inline constexpr int kCell = kImageSize / kGrid;
inline constexpr int kNumShapes = 4;
inline constexpr int kNumPalettes = 8;
inline constexpr int kIdentityPalette = 0;
inline constexpr int kNumTextures = 4;

using Image = Matrix;

enum class Shape : int { circle = 0, square = 1, triangle = 2, cross = 3 };
enum class Scale : int { small = 0, large = 1 };
enum class Texture : int { flat = 0, hatch = 1, dots = 2, stripes = 3 };
enum class LayoutMode : int { preserved = 0, shifted = 1 };
enum class PromptMode : int { descriptive = 0, instructive_stylization = 1, descriptive_stylization = 2 };

inline constexpr std::array<std::string_view, kNumShapes> kShapeNames{"circle", "square", "triangle", "cross"};
inline constexpr std::array<std::string_view, kNumTextures> kTextureNames{"flat", "hatch", "dots", "stripes"};

struct ContentSpec {
  int shape_id = 0;
  int row = 0;
  int col = 0;
  Scale scale = Scale::small;

  bool valid() const { return shape_id >= 0 && shape_id < kNumShapes && row >= 0 && row < kGrid && col >= 0 && col < kGrid; }
  int cell() const { return row * kGrid + col; }
  friend bool operator==(const ContentSpec&, const ContentSpec&) = default;
};

struct StyleSpec {
  int palette_id = kIdentityPalette;
  Texture texture = Texture::flat;
  double texture_phase = 0.0;  // [0, 1)

  bool valid() const {
    return palette_id >= 0 && palette_id < kNumPalettes && static_cast<int>(texture) >= 0 &&
           static_cast<int>(texture) < kNumTextures && texture_phase >= 0.0 && texture_phase < 1.0;
  }
  /// Discrete style class, ignoring phase.
  int style_class() const { return palette_id * kNumTextures + static_cast<int>(texture); }
  friend bool operator==(const StyleSpec&, const StyleSpec&) = default;
};

struct Palette {
  std::array<double, 3> fg;
  std::array<double, 3> bg;
};

/// Palette 0 is the canonical "photoreal" domain used for content references.
inline const std::array<Palette, kNumPalettes>& palettes() {
  static const std::array<Palette, kNumPalettes> table{{
      {{0.25, 0.25, 0.25}, {0.85, 0.85, 0.85}},  // canonical
      {{0.85, 0.15, 0.10}, {0.90, 0.90, 0.50}},
      {{0.10, 0.15, 0.55}, {0.50, 0.90, 0.90}},
      {{0.10, 0.50, 0.15}, {0.90, 0.50, 0.90}},
      {{0.90, 0.90, 0.15}, {0.50, 0.50, 0.90}},
      {{0.10, 0.50, 0.50}, {0.90, 0.50, 0.50}},
      {{0.55, 0.10, 0.55}, {0.50, 0.90, 0.50}},
      {{0.95, 0.95, 0.95}, {0.15, 0.50, 0.90}},
  }};
  return table;
}

// ---------------------------------------------------------------------------
// Prompt vocabulary: 0 is the null token; then shape words, position words
// (one per grid cell) and style words (one per palette).
// ---------------------------------------------------------------------------

inline constexpr int kNullToken = 0;
inline constexpr int kShapeTokenBase = 1;
inline constexpr int kPositionTokenBase = kShapeTokenBase + kNumShapes;
inline constexpr int kStyleTokenBase = kPositionTokenBase + kGrid * kGrid;
inline constexpr int kVocabSize = kStyleTokenBase + kNumPalettes;

inline int shape_token(int shape_id) { return kShapeTokenBase + shape_id; }
inline int position_token(int row, int col) { return kPositionTokenBase + row * kGrid + col; }
inline int style_token(int palette_id) { return kStyleTokenBase + palette_id; }

struct PromptSpec {
  int shape_word = kNullToken;
  int position_word = kNullToken;
  std::optional<int> style_word;
  PromptMode mode = PromptMode::descriptive;

  bool empty() const { return shape_word == kNullToken && position_word == kNullToken && !style_word; }
  bool valid() const {
    auto ok = [](int id, int lo, int hi) { return id == kNullToken || (id >= lo && id < hi); };
    return ok(shape_word, kShapeTokenBase, kPositionTokenBase) &&
           ok(position_word, kPositionTokenBase, kStyleTokenBase) &&
           (!style_word || (*style_word >= kStyleTokenBase && *style_word < kVocabSize));
  }
  friend bool operator==(const PromptSpec&, const PromptSpec&) = default;
};

inline PromptSpec describe_content(const ContentSpec& c, std::optional<int> palette, PromptMode mode) {
  PromptSpec p;
  p.shape_word = shape_token(c.shape_id);
  p.position_word = position_token(c.row, c.col);
  if (palette) p.style_word = style_token(*palette);
  p.mode = mode;
  return p;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {

inline bool inside(int shape_id, double dx, double dy, double r) {
  switch (shape_id) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case 2: {
      if (dy < -r || dy > r) return false;
      return std::abs(dx) <= 0.5 * (dy + r);
    }
    case 3: {
      const double arm = 0.35 * r;
      return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
    }
    default:
      throw std::invalid_argument("unknown shape id");
  }
}

/// Sub-cell jitter of the shape center; small shapes move by at most one
/// pixel per axis so they stay inside their cell.
inline std::pair<int, int> jitter(const ContentSpec& spec, std::uint64_t seed) {
  if (spec.scale == Scale::large) return {0, 0};
  const std::uint64_t h = Rng::mix(seed, 0x5EEDULL + static_cast<std::uint64_t>(spec.cell()));
  return {static_cast<int>(h % 3) - 1, static_cast<int>((h / 3) % 3) - 1};
}

}  // namespace detail

/// Fractional coverage of each pixel by the shape (4×4 supersampling).
inline Eigen::VectorXd coverage(const ContentSpec& spec, std::uint64_t seed) {
  if (!spec.valid()) throw std::invalid_argument("invalid ContentSpec");
  const auto [jx, jy] = detail::jitter(spec, seed);
  const double cx = spec.col * kCell + kCell / 2.0 + jx;
  const double cy = spec.row * kCell + kCell / 2.0 + jy;
  const double r = spec.scale == Scale::small ? 2.0 : 3.5;
  Eigen::VectorXd cov = Eigen::VectorXd::Zero(kPixels);
  const int y0 = spec.row * kCell, x0 = spec.col * kCell;
  for (int y = y0; y < y0 + kCell; ++y) {
    for (int x = x0; x < x0 + kCell; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
          const double px = x + (sx + 0.5) / 4.0, py = y + (sy + 0.5) / 4.0;
          if (detail::inside(spec.shape_id, px - cx, py - cy, r)) ++hits;
        }
      cov(y * kImageSize + x) = hits / 16.0;
    }
  }
  return cov;
}

/// Texture modulation mask in {0,1}, period 4 pixels.
inline double texture_mask(Texture t, double phase, int x, int y) {
  const int p = static_cast<int>(std::floor(phase * 4.0)) % 4;
  switch (t) {
    case Texture::flat:
      return 0.0;
    case Texture::hatch:
      return ((x + y + p) % 4 == 0) ? 1.0 : 0.0;
    case Texture::dots:
      return (((x + p) % 4) < 2 && ((y + p) % 4) < 2) ? 1.0 : 0.0;
    case Texture::stripes:
      return ((x + p) % 4 == 0) ? 1.0 : 0.0;
  }
  return 0.0;
}

inline constexpr double kTextureDepth = 0.4;

/// Renders a shape with the given style. With the identity palette and flat
/// texture this is the canonical rendering.
inline Image apply_style(const ContentSpec& spec, const StyleSpec& style, std::uint64_t seed) {
  if (!style.valid()) throw std::invalid_argument("invalid StyleSpec");
  const Eigen::VectorXd cov = coverage(spec, seed);
  const Palette& pal = palettes()[static_cast<std::size_t>(style.palette_id)];
  Image img(kPixels, 3);
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const int p = y * kImageSize + x;
      const double m = 1.0 - kTextureDepth * texture_mask(style.texture, style.texture_phase, x, y);
      for (int c = 0; c < 3; ++c) {
        const double base = cov(p) * pal.fg[static_cast<std::size_t>(c)] + (1.0 - cov(p)) * pal.bg[static_cast<std::size_t>(c)];
        img(p, c) = base * m;
      }
    }
  }
  return img;
}

inline Image render_content(const ContentSpec& spec, std::uint64_t seed) {
  return apply_style(spec, StyleSpec{kIdentityPalette, Texture::flat, 0.0}, seed);
}

/// Exact de-stylization: returns the canonical rendering of `provenance`
/// (the caller passes a re-posed spec for layout-shifted triplets).
inline Image destylize(const Image& target, const ContentSpec& provenance, std::uint64_t seed) {
  if (target.rows() != kPixels || target.cols() != 3) throw std::invalid_argument("destylize: bad image shape");
  return render_content(provenance, seed);
}

// ---------------------------------------------------------------------------
// Triplets
// ---------------------------------------------------------------------------

struct Triplet {
  Image style_ref;
  Image content_ref;
  Image target;
  PromptSpec prompt;
  LayoutMode layout_mode = LayoutMode::preserved;
  ContentSpec content;         // provenance of the target
  StyleSpec style;             // provenance of the target
  ContentSpec content_ref_spec;
  ContentSpec style_ref_spec;  // decoy subject drawn in the style reference
  std::uint64_t seed = 0;
};

/// Random position/scale change that always moves the subject to another cell.
inline ContentSpec shift_layout(const ContentSpec& c, Rng& rng) {
  ContentSpec out = c;
  do {
    out.row = rng.uniform_int(0, kGrid - 1);
    out.col = rng.uniform_int(0, kGrid - 1);
  } while (out.row == c.row && out.col == c.col);
  out.scale = rng.uniform() < 0.5 ? Scale::small : Scale::large;
  return out;
}

inline ContentSpec decoy_for(const ContentSpec& c, Rng& rng) {
  ContentSpec d;
  d.shape_id = (c.shape_id + rng.uniform_int(1, kNumShapes - 1)) % kNumShapes;
  d.row = rng.uniform_int(0, kGrid - 1);
  d.col = rng.uniform_int(0, kGrid - 1);
  d.scale = rng.uniform() < 0.5 ? Scale::small : Scale::large;
  return d;
}

inline Triplet make_triplet(const ContentSpec& content, const StyleSpec& style, LayoutMode mode, std::uint64_t seed) {
  if (!content.valid() || !style.valid()) throw std::invalid_argument("make_triplet: invalid specs");
  Rng rng(Rng::mix(seed, 0x7219));
  Triplet t;
  t.seed = seed;
  t.layout_mode = mode;
  t.content = content;
  t.style = style;
  t.target = apply_style(content, style, seed);
  t.content_ref_spec = mode == LayoutMode::preserved ? content : shift_layout(content, rng);
  t.content_ref = destylize(t.target, t.content_ref_spec, seed);
  t.style_ref_spec = decoy_for(content, rng);
  t.style_ref = apply_style(t.style_ref_spec, style, Rng::mix(seed, 0xDEC0));
  if (mode == LayoutMode::preserved) {
    t.prompt = PromptSpec{kNullToken, kNullToken, std::nullopt, PromptMode::instructive_stylization};
  } else {
    t.prompt = describe_content(content, std::nullopt, PromptMode::instructive_stylization);
  }
  return t;
}

enum class FilterVerdict { accept, reject_style, reject_content };

struct FilterResult {
  FilterVerdict verdict = FilterVerdict::accept;
  double style_score = 0.0;
  bool content_agrees = false;
  bool accepted() const { return verdict == FilterVerdict::accept; }
};

inline constexpr double kDefaultStyleThreshold = 0.9;

inline FilterResult filter_triplet(const Triplet& t, double tau_style = kDefaultStyleThreshold, double tau_content = 0.5) {
  if (!(tau_style > 0.0 && tau_style < 1.0) || !(tau_content > 0.0 && tau_content < 1.0)) {
    throw std::invalid_argument("filter thresholds must lie in (0,1)");
  }
  FilterResult r;
  r.style_score = descriptor::style_similarity(t.target, t.style_ref);
  // Ground-truth content oracle: a perfect shape classifier agrees with
  // probability 1 or 0, compared against tau_content.
  const double agreement = t.content.shape_id == t.content_ref_spec.shape_id ? 1.0 : 0.0;
  r.content_agrees = agreement >= tau_content;
  if (r.style_score < tau_style) {
    r.verdict = FilterVerdict::reject_style;
  } else if (!r.content_agrees) {
    r.verdict = FilterVerdict::reject_content;
  }
  return r;
}

inline std::string_view to_string(FilterVerdict v) {
  switch (v) {
    case FilterVerdict::accept:
      return "accept";
    case FilterVerdict::reject_style:
      return "style";
    case FilterVerdict::reject_content:
      return "content";
  }
  return "?";
}

inline std::string_view to_string(LayoutMode m) { return m == LayoutMode::preserved ? "preserved" : "shifted"; }

inline ContentSpec random_content(Rng& rng) {
  return ContentSpec{rng.uniform_int(0, kNumShapes - 1), rng.uniform_int(0, kGrid - 1), rng.uniform_int(0, kGrid - 1),
                     rng.uniform() < 0.5 ? Scale::small : Scale::large};
}

/// Random non-canonical style drawn from palettes 1..num_palettes. Generated
/// data keeps the texture phase at 0.
inline StyleSpec random_style(Rng& rng, int num_palettes = kNumPalettes - 1) {
  return StyleSpec{rng.uniform_int(1, num_palettes), static_cast<Texture>(rng.uniform_int(0, kNumTextures - 1)), 0.0};
}

}  // namespace uso::synth
