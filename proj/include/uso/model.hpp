#pragma once

// The assembled customization model: encoders, projector and backbone over a
// single parameter set, with parameter-name prefixes
//   semantic.*   semantic style encoder
//   ae.*         latent autoencoder
//   projector.*  style projector
//   backbone.*   transformer, text embedding, latent/content/time embeddings

#include "uso/backbone.hpp"
#include "uso/checkpoint.hpp"
#include "uso/encoders.hpp"
#include "uso/objectives.hpp"

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace uso {

/// Which encoder consumes the style reference.
enum class StyleRoute { semantic, autoencoder };

inline std::string_view to_string(StyleRoute r) { return r == StyleRoute::semantic ? "semantic" : "autoencoder"; }

struct ModelConfig {
  bb::ArchConfig arch;
  enc::ProjectorKind projector = enc::ProjectorKind::hierarchical;
  StyleRoute style_route = StyleRoute::semantic;

  nlohmann::json to_json() const {
    return {{"arch", arch.to_json()},
            {"projector", std::string(enc::to_string(projector))},
            {"style_route", std::string(to_string(style_route))}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.arch = bb::ArchConfig::from_json(j.at("arch"));
    c.projector = enc::projector_from_string(j.at("projector").get<std::string>());
    c.style_route = j.at("style_route").get<std::string>() == "semantic" ? StyleRoute::semantic : StyleRoute::autoencoder;
    return c;
  }
};

/// Inputs of one generation: prompt plus optional references. Latents of
/// the references are supplied precomputed where available.
struct Conditioning {
  std::optional<ag::Var> style;    // z_s
  ag::Var text;                    // c
  std::optional<ag::Var> content;  // z_c
};

class UsoModel {
 public:
  explicit UsoModel(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    Rng rng(Rng::mix(seed, 0x40DE1));
    semantic_ = enc::SemanticEncoder(params_, rng);
    ae_ = enc::Autoencoder(params_, rng);
    text_ = enc::PromptEmbedder(params_, cfg.arch.d_model, rng);
    backbone_ = bb::Backbone(params_, cfg.arch, rng);
    if (cfg.style_route == StyleRoute::semantic) {
      projector_ = enc::Projector(params_, cfg.projector, cfg.arch.d_model, rng);
    } else {
      ae_projector_ = nn::Linear(params_, "projector.latent", enc::kLatentChannels, cfg.arch.d_model, rng);
    }
  }

  UsoModel(const UsoModel&) = delete;
  UsoModel& operator=(const UsoModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ag::ParameterSet& parameters() { return params_; }
  const ag::ParameterSet& parameters() const { return params_; }
  const enc::Autoencoder& autoencoder() const { return ae_; }
  enc::Autoencoder& mutable_autoencoder() { return ae_; }
  const enc::SemanticEncoder& semantic_encoder() const { return semantic_; }
  const bb::Backbone& backbone() const { return backbone_; }
  const enc::PromptEmbedder& text_embedder() const { return text_; }

  /// Counts of style references consumed per encoder route.
  const std::array<long long, 2>& style_route_counts() const { return route_counts_; }

  ag::Var style_tokens(ag::Tape& t, const Matrix& style_ref) const {
    enc::check_image(style_ref);
    if (cfg_.style_route == StyleRoute::semantic) {
      ++route_counts_[0];
      return projector_(t, semantic_(t, t.constant(style_ref)));
    }
    ++route_counts_[1];
    return ae_projector_(t, ae_.encode(t, t.constant(style_ref)));
  }

  Matrix encode_latent(const Matrix& img) const {
    enc::check_image(img);
    ag::Tape t;
    ag::NoGradGuard g(t);
    return ae_.encode(t, t.constant(img)).value();
  }

  Matrix decode(const Matrix& latent) const {
    ag::Tape t;
    ag::NoGradGuard g(t);
    return ae_.decode(t, t.constant(latent)).value();
  }
  ag::Var decode(ag::Tape& t, ag::Var latent) const { return ae_.decode(t, latent); }

  Conditioning condition(ag::Tape& t, const synth::PromptSpec& prompt, const Matrix* style_ref,
                         const Matrix* content_latent) const {
    Conditioning c;
    c.text = text_(t, prompt);
    if (style_ref) c.style = style_tokens(t, *style_ref);
    if (content_latent) {
      if (content_latent->rows() != enc::kLatentTokens || content_latent->cols() != enc::kLatentChannels) {
        throw std::invalid_argument("content latent must be 64x4");
      }
      c.content = backbone_.content_projection()(t, t.constant(*content_latent));
    }
    return c;
  }

  ag::Var velocity(ag::Tape& t, const Conditioning& c, ag::Var x_t, double time) const {
    auto seq = bb::assign_positions(bb::make_sequence(c.style, c.text, x_t, c.content));
    return backbone_.predict_velocity(t, seq, time).v;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.meta["model"] = cfg_.to_json();
    ck.put(params_);
    return ck;
  }

  /// Loads every tensor whose name exists in the model; returns how many
  /// parameters were restored.
  std::size_t load_matching(const Checkpoint& ck) {
    if (ck.meta.contains("model")) {
      const auto arch = bb::ArchConfig::from_json(ck.meta.at("model").at("arch"));
      if (!(arch == cfg_.arch)) throw std::runtime_error("checkpoint architecture does not match model");
    }
    std::size_t n = 0;
    for (auto& p : params_) {
      auto it = ck.tensors.find(p->name);
      if (it == ck.tensors.end()) continue;
      if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
        throw std::runtime_error("checkpoint shape mismatch for " + p->name);
      }
      p->value = it->second;
      ++n;
    }
    return n;
  }

 private:
  ModelConfig cfg_;
  ag::ParameterSet params_;
  enc::SemanticEncoder semantic_;
  enc::Autoencoder ae_;
  enc::PromptEmbedder text_;
  bb::Backbone backbone_;
  enc::Projector projector_;
  nn::Linear ae_projector_;
  mutable std::array<long long, 2> route_counts_{0, 0};
};

/// Training record with cached latents.
struct TrainExample {
  synth::PromptSpec prompt;
  Matrix target_latent;
  std::optional<Matrix> style_ref;
  std::optional<Matrix> content_latent;
};

/// Flow-matching loss of one example at a uniformly drawn time.
inline ag::Var pretrain_loss(ag::Tape& t, const UsoModel& m, const TrainExample& ex, Rng& rng) {
  const Conditioning c = m.condition(t, ex.prompt, ex.style_ref ? &*ex.style_ref : nullptr,
                                     ex.content_latent ? &*ex.content_latent : nullptr);
  const double time = rng.uniform();
  const Matrix eps = rng.normal_matrix(ex.target_latent.rows(), ex.target_latent.cols());
  const obj::PathSample path = obj::sample_path(ex.target_latent, eps, time);
  ag::Var v = m.velocity(t, c, t.constant(path.x_t), time);
  return obj::flow_matching_loss(v, path);
}

}  // namespace uso
