#pragma once

// Conditional encoders: the semantic style encoder with its projector
// variants, the latent autoencoder, and the prompt embedder.

#include "uso/nn.hpp"
#include "uso/synthworld.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace uso::enc {

using ag::Geometry;
using ag::ParameterSet;
using ag::Tape;
using ag::Var;

inline constexpr Geometry kImageGeometry{synth::kImageSize, synth::kImageSize, 3};
inline constexpr int kDownsample = 4;
inline constexpr int kLatentGrid = synth::kImageSize / kDownsample;  // 8
inline constexpr int kLatentChannels = 4;
inline constexpr int kLatentTokens = kLatentGrid * kLatentGrid;      // 64

inline void check_image(const Matrix& img) {
  if (img.rows() != synth::kPixels || img.cols() != 3) {
    throw std::invalid_argument("expected a 3x32x32 image stored as 1024x3, got " + std::to_string(img.rows()) + "x" +
                                std::to_string(img.cols()));
  }
}

// ---------------------------------------------------------------------------
// Semantic style encoder
// ---------------------------------------------------------------------------

struct StyleFeatures {
  std::vector<Var> layers;         // (H_i·W_i)×C_i maps
  std::vector<Geometry> geometry;
  std::vector<int> source_layer_ids;
};

/// Three stride-2 conv blocks; each block output is a tap.
class SemanticEncoder {
 public:
  static constexpr int kTaps = 3;
  static constexpr std::array<int, kTaps> kChannels{16, 32, 32};

  SemanticEncoder() = default;
  SemanticEncoder(ParameterSet& ps, Rng& rng, const std::string& prefix = "semantic") {
    int in = 3;
    for (int i = 0; i < kTaps; ++i) {
      convs_[static_cast<std::size_t>(i)] =
          nn::Conv2d(ps, prefix + ".conv" + std::to_string(i + 1), in, kChannels[static_cast<std::size_t>(i)], 3, 2, 1, rng);
      in = kChannels[static_cast<std::size_t>(i)];
    }
  }

  StyleFeatures operator()(Tape& t, Var img) const {
    if (img.rows() != synth::kPixels || img.cols() != 3) throw std::invalid_argument("encode_style: shape mismatch");
    StyleFeatures f;
    Geometry g = kImageGeometry;
    Var x = img;
    for (int i = 0; i < kTaps; ++i) {
      const auto& conv = convs_[static_cast<std::size_t>(i)];
      x = ag::relu(conv(t, x, g));
      g = conv.output_geometry(g);
      f.layers.push_back(x);
      f.geometry.push_back(g);
      f.source_layer_ids.push_back(i + 1);
    }
    return f;
  }

 private:
  std::array<nn::Conv2d, kTaps> convs_;
};

/// Globally pooled taps, concatenated: the embedding used by the warm-up.
inline Var pooled_embedding(const StyleFeatures& f) {
  std::vector<Var> pooled;
  for (std::size_t i = 0; i < f.layers.size(); ++i) pooled.push_back(ag::avg_pool(f.layers[i], f.geometry[i], 1, 1));
  return ag::concat_cols(pooled);
}

// ---------------------------------------------------------------------------
// Projectors: style features -> style tokens z_s
// ---------------------------------------------------------------------------

enum class ProjectorKind { hierarchical, single_mlp, single_resampler };

inline std::string_view to_string(ProjectorKind k) {
  switch (k) {
    case ProjectorKind::hierarchical:
      return "hierarchical";
    case ProjectorKind::single_mlp:
      return "single_mlp";
    case ProjectorKind::single_resampler:
      return "single_resampler";
  }
  return "?";
}

inline ProjectorKind projector_from_string(std::string_view s) {
  if (s == "hierarchical") return ProjectorKind::hierarchical;
  if (s == "single_mlp") return ProjectorKind::single_mlp;
  if (s == "single_resampler") return ProjectorKind::single_resampler;
  throw std::invalid_argument("unknown projector variant: " + std::string(s));
}

inline constexpr int kPoolSide = 2;  // each layer pooled to 2×2 tokens

/// Maps style features to d_model tokens. The hierarchical form pools every
/// layer to 2×2, applies a per-layer linear map and concatenates the blocks
/// in the order the layers are given.
class Projector {
 public:
  Projector() = default;
  Projector(ParameterSet& ps, ProjectorKind kind, int d_model, Rng& rng, const std::string& prefix = "projector")
      : kind_(kind) {
    switch (kind) {
      case ProjectorKind::hierarchical:
        for (int i = 0; i < SemanticEncoder::kTaps; ++i) {
          per_layer_.emplace_back(ps, prefix + ".layer" + std::to_string(i + 1),
                                  SemanticEncoder::kChannels[static_cast<std::size_t>(i)], d_model, rng);
        }
        break;
      case ProjectorKind::single_mlp:
        fc1_ = nn::Linear(ps, prefix + ".fc1", SemanticEncoder::kChannels.back(), d_model, rng);
        fc2_ = nn::Linear(ps, prefix + ".fc2", d_model, d_model, rng);
        break;
      case ProjectorKind::single_resampler:
        queries_ = &ps.add(prefix + ".queries", rng.normal_matrix(kPoolSide * kPoolSide, d_model, 0.5));
        key_ = nn::Linear(ps, prefix + ".key", SemanticEncoder::kChannels.back(), d_model, rng);
        value_ = nn::Linear(ps, prefix + ".value", SemanticEncoder::kChannels.back(), d_model, rng);
        out_ = nn::Linear(ps, prefix + ".out", d_model, d_model, rng);
        break;
    }
  }

  ProjectorKind kind() const { return kind_; }

  Var operator()(Tape& t, const StyleFeatures& f) const {
    if (f.layers.empty()) throw std::invalid_argument("project_style: no feature layers");
    switch (kind_) {
      case ProjectorKind::hierarchical: {
        std::vector<Var> blocks;
        for (std::size_t i = 0; i < f.layers.size(); ++i) {
          const int id = f.source_layer_ids[i];
          if (id < 1 || id > static_cast<int>(per_layer_.size())) throw std::out_of_range("project_style: layer id");
          Var pooled = ag::avg_pool(f.layers[i], f.geometry[i], kPoolSide, kPoolSide);
          blocks.push_back(per_layer_[static_cast<std::size_t>(id - 1)](t, pooled));
        }
        return ag::concat_rows(blocks);
      }
      case ProjectorKind::single_mlp: {
        Var pooled = ag::avg_pool(f.layers.back(), f.geometry.back(), kPoolSide, kPoolSide);
        return fc2_(t, ag::gelu(fc1_(t, pooled)));
      }
      case ProjectorKind::single_resampler: {
        const Var& last = f.layers.back();
        Var k = key_(t, last);
        Var v = value_(t, last);
        Var q = t.param(*queries_);
        const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
        Var attn = ag::softmax_rows(ag::scale(ag::matmul(q, ag::transpose(k)), inv));
        return out_(t, ag::matmul(attn, v));
      }
    }
    throw std::logic_error("unreachable");
  }

  /// Token count produced for the semantic encoder's features.
  int token_count() const {
    return kind_ == ProjectorKind::hierarchical ? SemanticEncoder::kTaps * kPoolSide * kPoolSide : kPoolSide * kPoolSide;
  }

 private:
  ProjectorKind kind_ = ProjectorKind::hierarchical;
  std::vector<nn::Linear> per_layer_;
  nn::Linear fc1_, fc2_;
  ag::Parameter* queries_ = nullptr;
  nn::Linear key_, value_, out_;
};

// ---------------------------------------------------------------------------
// Latent autoencoder (the frozen codec)
// ---------------------------------------------------------------------------

/// Plain autoencoder with downsample factor 4 and 4 latent channels. Latents
/// are standardized per channel with constants fixed after warm-up.
class Autoencoder {
 public:
  Autoencoder() = default;
  Autoencoder(ParameterSet& ps, Rng& rng, const std::string& prefix = "ae") {
    enc1_ = nn::Conv2d(ps, prefix + ".enc1", 3, 32, 3, 1, 1, rng);
    enc2_ = nn::Conv2d(ps, prefix + ".enc2", 32, 64, kDownsample, kDownsample, 0, rng);
    enc3_ = nn::Conv2d(ps, prefix + ".enc3", 64, kLatentChannels, 1, 1, 0, rng);
    dec1_ = nn::Conv2d(ps, prefix + ".dec1", kLatentChannels, 64, 1, 1, 0, rng);
    dec2_ = nn::Conv2d(ps, prefix + ".dec2", 64, 64, 3, 1, 1, rng);
    dec3_ = nn::Linear(ps, prefix + ".dec3", 64, 64, rng);
    dec4_ = nn::Linear(ps, prefix + ".dec4", 64, kDownsample * kDownsample * 3, rng);
    shift_ = &ps.add(prefix + ".latent_shift", Matrix::Zero(1, kLatentChannels));
    scale_ = &ps.add(prefix + ".latent_scale", Matrix::Ones(1, kLatentChannels));
    shift_->trainable = false;
    scale_->trainable = false;
  }

  /// Unstandardized code.
  Var encode_raw(Tape& t, Var img) const {
    if (img.rows() != synth::kPixels || img.cols() != 3) throw std::invalid_argument("encode_latent: shape mismatch");
    Geometry g = kImageGeometry;
    Var x = ag::silu(enc1_(t, img, g));
    g = enc1_.output_geometry(g);
    x = ag::silu(enc2_(t, x, g));
    g = enc2_.output_geometry(g);
    return enc3_(t, x, g);
  }

  /// Image -> standardized latent (64×4).
  Var encode(Tape& t, Var img) const {
    Var raw = encode_raw(t, img);
    Matrix inv = scale_->value.cwiseInverse();
    Var centered = ag::add_row(raw, t.constant(-shift_->value));
    return ag::mul_row(centered, t.constant(inv));
  }

  /// Standardized latent (64×4) -> image (1024×3) in (0, 1).
  Var decode(Tape& t, Var latent) const {
    if (latent.rows() != kLatentTokens || latent.cols() != kLatentChannels) {
      throw std::invalid_argument("decode: latent must be 64x4");
    }
    Var raw = ag::add_row(ag::mul_row(latent, t.constant(scale_->value)), t.constant(shift_->value));
    return decode_raw(t, raw);
  }

  Var decode_raw(Tape& t, Var raw) const {
    Geometry g{kLatentGrid, kLatentGrid, kLatentChannels};
    Var x = ag::silu(dec1_(t, raw, g));
    g = dec1_.output_geometry(g);
    x = ag::silu(dec2_(t, x, g));
    x = ag::silu(dec3_(t, x));
    Var patches = ag::sigmoid(dec4_(t, x));
    return ag::unpatchify(patches, kLatentGrid, kLatentGrid, kDownsample, 3);
  }

  ag::Parameter& latent_shift() { return *shift_; }
  ag::Parameter& latent_scale() { return *scale_; }

 private:
  nn::Conv2d enc1_, enc2_, enc3_, dec1_, dec2_;
  nn::Linear dec3_, dec4_;
  ag::Parameter* shift_ = nullptr;
  ag::Parameter* scale_ = nullptr;
};

struct ContentTokens {
  Var z_c;  // n_c × d_model
  int grid_h = kLatentGrid;
  int grid_w = kLatentGrid;
};

/// Content tokens: the autoencoder's latent grid projected to model width.
inline ContentTokens encode_content(Tape& t, const Autoencoder& ae, const nn::Linear& projection, const Matrix& img) {
  check_image(img);
  Var latent = ae.encode(t, t.constant(img));
  return ContentTokens{projection(t, latent), kLatentGrid, kLatentGrid};
}

// ---------------------------------------------------------------------------
// Prompt embedder
// ---------------------------------------------------------------------------

inline constexpr int kTextTokens = 3;  // shape, position, style slots

/// Fixed-length text tokens; empty slots use the reserved null embedding.
class PromptEmbedder {
 public:
  PromptEmbedder() = default;
  PromptEmbedder(ParameterSet& ps, int d_model, Rng& rng, const std::string& prefix = "backbone.text") {
    table_ = nn::Embedding(ps, prefix, synth::kVocabSize, d_model, rng);
  }

  static std::vector<int> token_ids(const synth::PromptSpec& p) {
    if (!p.valid()) throw std::out_of_range("prompt token id outside vocabulary");
    return {p.shape_word, p.position_word, p.style_word.value_or(synth::kNullToken)};
  }

  Var operator()(Tape& t, const synth::PromptSpec& p) const { return table_(t, token_ids(p)); }

 private:
  nn::Embedding table_;
};

}  // namespace uso::enc
