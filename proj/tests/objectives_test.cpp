#include "support.hpp"

using namespace uso;
using uso::testing::central_difference;
using uso::testing::relative_error;

TEST(SamplePath, Endpoints) {
  Rng rng(1);
  const Matrix x0 = rng.normal_matrix(64, 4), eps = rng.normal_matrix(64, 4);
  EXPECT_EQ(obj::sample_path(x0, eps, 0.0).x_t, x0);
  EXPECT_EQ(obj::sample_path(x0, eps, 1.0).x_t, eps);
}

TEST(SamplePath, ZeroDataGivesNoiseVelocity) {
  Matrix e1 = Matrix::Zero(4, 4);
  e1(0, 0) = 1.0;
  for (double t : {0.0, 0.3, 0.75, 1.0}) EXPECT_EQ(obj::sample_path(Matrix::Zero(4, 4), e1, t).v_target, e1);
}

TEST(SamplePath, OneJumpRecoveryOnRandomTuples) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Matrix x0 = rng.normal_matrix(8, 4), eps = rng.normal_matrix(8, 4);
    const auto s = obj::sample_path(x0, eps, rng.uniform());
    EXPECT_LE((obj::predict_x0(s.x_t, s.v_target, s.t) - x0).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(SamplePath, RejectsTimeOutsideUnitInterval) {
  EXPECT_THROW(obj::sample_path(Matrix::Zero(2, 2), Matrix::Zero(2, 2), 1.5), std::invalid_argument);
}

TEST(FlowMatchingLoss, ExactPredictionIsZeroAndUnitOffsetIsOne) {
  Rng rng(3);
  const auto s = obj::sample_path(rng.normal_matrix(64, 4), rng.normal_matrix(64, 4), 0.4);
  EXPECT_EQ(obj::flow_matching_loss(s.v_target, s), 0.0);
  const Matrix off = s.v_target.array() + 1.0;
  EXPECT_NEAR(obj::flow_matching_loss(off, s), 1.0, 1e-12);
  EXPECT_NEAR(obj::flow_matching_loss(off, s, 0.5), 0.5, 1e-12);
  EXPECT_THROW(obj::flow_matching_loss(Matrix::Zero(3, 4), s), std::invalid_argument);
}

TEST(FlowMatchingLoss, TapeAndPlainFormsAgree) {
  Rng rng(4);
  const auto s = obj::sample_path(rng.normal_matrix(64, 4), rng.normal_matrix(64, 4), 0.6);
  const Matrix v = rng.normal_matrix(64, 4);
  ag::Tape t;
  EXPECT_NEAR(obj::flow_matching_loss(t.constant(v), s).item(), obj::flow_matching_loss(v, s), 1e-12);
}

TEST(Reward, SelfSimilarityIsOne) {
  const Matrix img = synth::apply_style({1, 2, 2, synth::Scale::large}, {3, synth::Texture::dots, 0.0}, 1);
  EXPECT_NEAR(obj::reward_score(img, img), 1.0, 1e-12);
}

TEST(Reward, SameStyleDifferentShapes) {
  Rng rng(5);
  for (int i = 0; i < 40; ++i) {
    const auto s = synth::random_style(rng);
    const Matrix a = synth::apply_style({0, 1, 1, synth::Scale::large}, s, rng.next_u64());
    const Matrix b = synth::apply_style({3, 2, 0, synth::Scale::small}, s, rng.next_u64());
    EXPECT_GE(obj::reward_score(a, b), 0.95);
  }
}

TEST(Reward, FlatStylesAreTranslationInvariant) {
  Rng rng(6);
  for (int p = 1; p < synth::kNumPalettes; ++p) {
    synth::ContentSpec c = synth::random_content(rng);
    synth::ContentSpec moved = c;
    moved.row = (c.row + 2) % synth::kGrid;
    moved.col = (c.col + 1) % synth::kGrid;
    const synth::StyleSpec s{p, synth::Texture::flat, 0.0};
    EXPECT_GE(obj::reward_score(synth::apply_style(c, s, 1), synth::apply_style(moved, s, 1)), 0.99);
  }
}

TEST(Reward, LossIsTheNegatedReward) {
  const Matrix img = synth::apply_style({1, 0, 0, synth::Scale::large}, {2, synth::Texture::flat, 0.0}, 1);
  ag::Tape t;
  EXPECT_NEAR(obj::style_reward_loss(t.constant(img), img).item(), -1.0, 1e-12);
  ag::Var r = t.constant(Matrix::Zero(1, 1));
  EXPECT_EQ(obj::reward_to_loss(r).item(), 0.0);
}

TEST(Reward, OrthogonalDescriptorsGiveZeroLoss) {
  // A black image maps to the first basis direction; a descriptor without a
  // component there is orthogonal to it.
  const Matrix black = Matrix::Zero(synth::kPixels, 3);
  const RowVector d0 = descriptor::style_descriptor(black);
  EXPECT_EQ(d0(0), 1.0);
  EXPECT_NEAR(d0.norm(), 1.0, 1e-12);
  Matrix ref = Matrix::Constant(synth::kPixels, 3, 1.0);
  const RowVector dr = descriptor::style_descriptor(ref);
  ag::Tape t;
  EXPECT_NEAR(obj::style_reward_loss(t.constant(black), ref).item(), -dr(0), 1e-12);
  EXPECT_NEAR(dr(0), 0.0, 1e-6);
}

TEST(Reward, BatchLossIsTheMeanOfPerSampleLosses) {
  Rng rng(7);
  std::vector<Matrix> imgs, refs;
  for (int i = 0; i < 3; ++i) {
    imgs.push_back(synth::apply_style(synth::random_content(rng), synth::random_style(rng), rng.next_u64()));
    refs.push_back(synth::apply_style(synth::random_content(rng), synth::random_style(rng), rng.next_u64()));
  }
  ag::Tape t;
  std::vector<ag::Var> vars;
  double expected = 0.0;
  for (int i = 0; i < 3; ++i) {
    vars.push_back(t.constant(imgs[i]));
    expected -= obj::reward_score(imgs[i], refs[i]) / 3.0;
  }
  EXPECT_NEAR(obj::style_reward_loss(vars, refs).item(), expected, 1e-12);
}

TEST(Reward, DescriptorIsUnitNormAndFiniteOnBlack) {
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const Matrix img = synth::apply_style(synth::random_content(rng), synth::random_style(rng), rng.next_u64());
    EXPECT_NEAR(descriptor::style_descriptor(img).norm(), 1.0, 1e-12);
  }
  const RowVector black = descriptor::style_descriptor(Matrix::Zero(synth::kPixels, 3));
  EXPECT_TRUE(black.allFinite());
}

TEST(Reward, InputGradientMatchesFiniteDifferences) {
  Rng rng(9);
  const Matrix ref = synth::apply_style({2, 1, 1, synth::Scale::large}, {4, synth::Texture::hatch, 0.0}, 3);
  Matrix img = synth::apply_style({0, 2, 2, synth::Scale::large}, {2, synth::Texture::stripes, 0.0}, 4);
  img = (img + 0.05 * rng.normal_matrix(img.rows(), img.cols())).cwiseMax(0.0).cwiseMin(1.0);
  ag::ParameterSet ps;
  auto& leaf = ps.add("img", img);
  ag::Tape t;
  t.backward(obj::reward_score(t.param(leaf), ref));
  const Matrix g = leaf.grad;
  for (int probe = 0; probe < 12; ++probe) {
    const int p = rng.uniform_int(0, synth::kPixels - 1), c = rng.uniform_int(0, 2);
    const double fd = central_difference([&] { return obj::reward_score(img, ref); }, img(p, c));
    EXPECT_LE(relative_error(g(p, c), fd), 1e-3) << "pixel " << p << " channel " << c;
  }
}

TEST(TotalLoss, LambdaGatesAtS) {
  const auto before = obj::total_loss(0.5, -0.8, 9, 10);
  EXPECT_EQ(before.lambda, 0);
  EXPECT_EQ(before.total, 0.5);
  const auto at = obj::total_loss(0.5, -0.8, 10, 10);
  EXPECT_EQ(at.lambda, 1);
  EXPECT_DOUBLE_EQ(at.total, 0.5 - 0.8);
}

TEST(TotalLoss, NonFiniteRewardIsRejectedBeforeS) {
  EXPECT_THROW(obj::total_loss(0.5, std::nan(""), 0, 10), obj::NonFiniteLoss);
  EXPECT_THROW(obj::total_loss(INFINITY, 0.0, 20, 10), obj::NonFiniteLoss);
  EXPECT_THROW(obj::total_loss(0.5, 0.0, -1, 10), std::invalid_argument);
}
