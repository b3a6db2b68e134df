#include "support.hpp"

using namespace uso;
using uso::testing::central_difference;
using uso::testing::relative_error;

namespace {

Matrix sample_image(std::uint64_t seed) {
  Rng rng(seed);
  return synth::apply_style(synth::random_content(rng), synth::random_style(rng), rng.next_u64());
}

}  // namespace

TEST(SemanticEncoder, ThreeTapsAtDecreasingResolution) {
  ag::ParameterSet ps;
  Rng rng(1);
  enc::SemanticEncoder e(ps, rng);
  ag::Tape t;
  const auto f = e(t, t.constant(sample_image(2)));
  ASSERT_EQ(f.layers.size(), 3u);
  for (std::size_t i = 1; i < f.layers.size(); ++i) {
    EXPECT_LT(f.geometry[i].height, f.geometry[i - 1].height);
    EXPECT_LT(f.geometry[i].width, f.geometry[i - 1].width);
  }
  EXPECT_EQ(f.source_layer_ids, (std::vector<int>{1, 2, 3}));
}

TEST(SemanticEncoder, ZeroImageGivesFiniteFeatures) {
  ag::ParameterSet ps;
  Rng rng(1);
  enc::SemanticEncoder e(ps, rng);
  ag::Tape t;
  for (const auto& l : e(t, t.constant(Matrix::Zero(synth::kPixels, 3))).layers) EXPECT_TRUE(l.value().allFinite());
}

TEST(SemanticEncoder, RejectsWrongShape) {
  ag::ParameterSet ps;
  Rng rng(1);
  enc::SemanticEncoder e(ps, rng);
  ag::Tape t;
  EXPECT_THROW(e(t, t.constant(Matrix::Zero(16, 3))), std::invalid_argument);
}

TEST(SemanticEncoder, PretrainedFeaturesSeeTexture) {
  USO_REQUIRE_FOUNDATION();
  const auto owned = uso::testing::pretrained_model(*found);
  const UsoModel& m = *owned;
  const synth::ContentSpec c{1, 1, 1, synth::Scale::large};
  for (int tex = 1; tex < synth::kNumTextures; ++tex) {
    ag::Tape t;
    const auto a = m.semantic_encoder()(t, t.constant(synth::apply_style(c, {3, synth::Texture::flat, 0.0}, 1)));
    const auto b =
        m.semantic_encoder()(t, t.constant(synth::apply_style(c, {3, static_cast<synth::Texture>(tex), 0.0}, 1)));
    double best = 0.0;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      const Matrix pa = ag::avg_pool(a.layers[i], a.geometry[i], 1, 1).value();
      const Matrix pb = ag::avg_pool(b.layers[i], b.geometry[i], 1, 1).value();
      best = std::max(best, (pa - pb).norm() / std::max(pa.norm(), 1e-12));
    }
    EXPECT_GE(best, 1e-3) << "texture " << tex;
  }
}

TEST(Projector, HierarchicalConcatenatesFourTokensPerLayer) {
  ag::ParameterSet ps;
  Rng rng(3);
  enc::SemanticEncoder e(ps, rng);
  enc::Projector p(ps, enc::ProjectorKind::hierarchical, 64, rng);
  ag::Tape t;
  const Matrix z = p(t, e(t, t.constant(sample_image(4)))).value();
  EXPECT_EQ(z.rows(), 12);
  EXPECT_EQ(z.cols(), 64);
  EXPECT_EQ(p.token_count(), 12);
}

TEST(Projector, ZeroWeightsGiveBiasRows) {
  ag::ParameterSet ps;
  Rng rng(3);
  enc::SemanticEncoder e(ps, rng);
  enc::Projector p(ps, enc::ProjectorKind::hierarchical, 64, rng);
  for (auto& prm : ps) {
    if (prm->name.rfind("projector.", 0) == 0 && prm->name.ends_with(".weight")) prm->value.setZero();
  }
  ag::Tape t;
  const Matrix z = p(t, e(t, t.constant(sample_image(5)))).value();
  for (int layer = 0; layer < 3; ++layer) {
    const Matrix& bias = ps.find("projector.layer" + std::to_string(layer + 1) + ".bias")->value;
    for (int r = 0; r < 4; ++r) EXPECT_EQ(z.row(layer * 4 + r), bias.row(0));
  }
}

TEST(Projector, PermutingLayersPermutesRowBlocks) {
  ag::ParameterSet ps;
  Rng rng(6);
  enc::SemanticEncoder e(ps, rng);
  enc::Projector p(ps, enc::ProjectorKind::hierarchical, 64, rng);
  ag::Tape t;
  auto f = e(t, t.constant(sample_image(7)));
  const Matrix z = p(t, f).value();
  enc::StyleFeatures g;
  for (int i : {2, 0, 1}) {
    g.layers.push_back(f.layers[static_cast<std::size_t>(i)]);
    g.geometry.push_back(f.geometry[static_cast<std::size_t>(i)]);
    g.source_layer_ids.push_back(f.source_layer_ids[static_cast<std::size_t>(i)]);
  }
  const Matrix zp = p(t, g).value();
  const int order[3] = {2, 0, 1};
  for (int blk = 0; blk < 3; ++blk) EXPECT_EQ(zp.middleRows(blk * 4, 4), z.middleRows(order[blk] * 4, 4));
}

TEST(Projector, SingleDepthVariantsEmitFourTokens) {
  for (auto kind : {enc::ProjectorKind::single_mlp, enc::ProjectorKind::single_resampler}) {
    ag::ParameterSet ps;
    Rng rng(8);
    enc::SemanticEncoder e(ps, rng);
    enc::Projector p(ps, kind, 64, rng);
    ag::Tape t;
    const Matrix z = p(t, e(t, t.constant(sample_image(9)))).value();
    EXPECT_EQ(z.rows(), 4);
    EXPECT_EQ(z.cols(), 64);
  }
  EXPECT_THROW(enc::projector_from_string("deep"), std::invalid_argument);
}

TEST(Autoencoder, LatentGridIsEightByEight) {
  const UsoModel m(ModelConfig{}, 1);
  const Matrix z = m.encode_latent(sample_image(10));
  EXPECT_EQ(z.rows(), 64);
  EXPECT_EQ(z.cols(), 4);
  ag::Tape t;
  const auto ct = enc::encode_content(t, m.autoencoder(), m.backbone().content_projection(), sample_image(10));
  EXPECT_EQ(ct.grid_h, 8);
  EXPECT_EQ(ct.grid_w, 8);
  EXPECT_EQ(ct.z_c.rows(), 64);
  EXPECT_THROW(m.encode_latent(Matrix::Zero(10, 3)), std::invalid_argument);
}

TEST(Autoencoder, PretrainedRoundTripMae) {
  USO_REQUIRE_FOUNDATION();
  const auto owned = uso::testing::pretrained_model(*found);
  const UsoModel& m = *owned;
  Rng rng(0x4E1D);
  double mae = 0.0;
  for (int i = 0; i < 100; ++i) mae += found::reconstruction_mae(m, found::random_world_sample(rng).image);
  EXPECT_LE(mae / 100.0, 0.05);
}

TEST(Autoencoder, DecodeInputGradientMatchesFiniteDifferences) {
  const UsoModel m(ModelConfig{}, 2);
  Rng rng(11);
  for (int k = 0; k < 10; ++k) {
    Matrix z = rng.normal_matrix(64, 4);
    const Matrix w = rng.normal_matrix(synth::kPixels, 3);
    auto objective = [&] { return (m.decode(z).array() * w.array()).sum(); };
    ag::ParameterSet ps;
    auto& leaf = ps.add("z", z);
    ag::Tape t;
    t.backward(ag::sum(ag::mul(m.decode(t, t.param(leaf)), t.constant(w))));
    const int r = rng.uniform_int(0, 63), c = rng.uniform_int(0, 3);
    EXPECT_LE(relative_error(leaf.grad(r, c), central_difference(objective, z(r, c))), 1e-3) << "probe " << k;
  }
}

TEST(EncodeContent, IndependentOfTheTargetStyle) {
  const UsoModel m(ModelConfig{}, 3);
  const synth::ContentSpec c{2, 0, 3, synth::Scale::small};
  const auto a = synth::make_triplet(c, {1, synth::Texture::dots, 0.0}, synth::LayoutMode::preserved, 5);
  const auto b = synth::make_triplet(c, {6, synth::Texture::hatch, 0.0}, synth::LayoutMode::preserved, 5);
  EXPECT_EQ(m.encode_latent(a.content_ref), m.encode_latent(b.content_ref));
}

TEST(PromptEmbedder, EmptyPromptIsAllNullTokens) {
  const UsoModel m(ModelConfig{}, 4);
  ag::Tape t;
  const Matrix e = m.text_embedder()(t, synth::PromptSpec{}).value();
  ASSERT_EQ(e.rows(), enc::kTextTokens);
  const Matrix& table = m.parameters().find("backbone.text.table")->value;
  for (int r = 0; r < e.rows(); ++r) EXPECT_EQ(e.row(r), table.row(synth::kNullToken));
}

TEST(PromptEmbedder, ShapeWordChangesOnlyItsSlot) {
  const UsoModel m(ModelConfig{}, 4);
  ag::Tape t;
  const synth::PromptSpec a = synth::describe_content({0, 1, 2, synth::Scale::small}, 3, synth::PromptMode::descriptive);
  synth::PromptSpec b = a;
  b.shape_word = synth::shape_token(2);
  const Matrix ea = m.text_embedder()(t, a).value(), eb = m.text_embedder()(t, b).value();
  EXPECT_EQ(m.text_embedder()(t, a).value(), ea);
  EXPECT_NE(ea.row(0), eb.row(0));
  EXPECT_EQ(ea.bottomRows(2), eb.bottomRows(2));
}

TEST(PromptEmbedder, RejectsIdsOutsideVocabulary) {
  const UsoModel m(ModelConfig{}, 4);
  ag::Tape t;
  synth::PromptSpec p;
  p.style_word = synth::kVocabSize;
  EXPECT_THROW(m.text_embedder()(t, p), std::out_of_range);
}
