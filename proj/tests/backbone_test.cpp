#include "support.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

using namespace uso;
using uso::testing::central_difference;
using uso::testing::relative_error;

namespace {

struct Fixture {
  bb::ArchConfig arch;
  ag::ParameterSet ps;
  bb::Backbone net;
  Matrix style, text, noisy, content;

  explicit Fixture(bb::ArchConfig a = {}, std::uint64_t seed = 1) : arch(a) {
    Rng rng(seed);
    net = bb::Backbone(ps, arch, rng);
    style = rng.normal_matrix(12, arch.d_model);
    text = rng.normal_matrix(enc::kTextTokens, arch.d_model);
    noisy = rng.normal_matrix(64, arch.latent_channels);
    content = rng.normal_matrix(64, arch.d_model);
  }

  bb::TokenSequence sequence(ag::Tape& t, bool with_style = true, bool with_content = true) const {
    return bb::assign_positions(bb::make_sequence(with_style ? std::optional(t.constant(style)) : std::nullopt,
                                                  t.constant(text), t.constant(noisy),
                                                  with_content ? std::optional(t.constant(content)) : std::nullopt));
  }
};

}  // namespace

TEST(Positions, ContentUsesTheDiagonalOffset) {
  Fixture f;
  ag::Tape t;
  const auto seq = f.sequence(t);
  const auto* content = seq.find(bb::SegmentKind::content);
  ASSERT_NE(content, nullptr);
  EXPECT_EQ(content->positions[0], (bb::Position{8, 8}));
  EXPECT_EQ(content->positions[63], (bb::Position{15, 15}));
  const auto* noisy = seq.find(bb::SegmentKind::noisy_latent);
  EXPECT_EQ(noisy->positions[0], (bb::Position{0, 0}));
  EXPECT_EQ(noisy->positions[9], (bb::Position{1, 1}));
}

TEST(Positions, StyleTokensReuseTextIndices) {
  Fixture f;
  ag::Tape t;
  const auto seq = f.sequence(t);
  const auto* style = seq.find(bb::SegmentKind::style);
  const auto* text = seq.find(bb::SegmentKind::text);
  const int n_text = static_cast<int>(text->positions.size());
  for (std::size_t k = 0; k < style->positions.size(); ++k) {
    EXPECT_EQ(style->positions[k], text->positions[k % static_cast<std::size_t>(n_text)]);
  }
}

TEST(Positions, ContentAndNoisyLatentAreDisjoint) {
  Fixture f;
  ag::Tape t;
  const auto seq = f.sequence(t);
  std::set<std::pair<int, int>> noisy;
  for (const auto& p : seq.find(bb::SegmentKind::noisy_latent)->positions) noisy.insert({p.h, p.w});
  EXPECT_EQ(noisy.size(), 64u);
  for (const auto& p : seq.find(bb::SegmentKind::content)->positions) EXPECT_FALSE(noisy.count({p.h, p.w}));
}

TEST(Sequence, LengthAccounting) {
  Fixture f;
  ag::Tape t;
  EXPECT_EQ(f.sequence(t).length(), 12u + 3u + 64u + 64u);
  EXPECT_EQ(f.sequence(t, true, false).length(), 12u + 3u + 64u);
  const auto seq = f.sequence(t);
  std::vector<bb::SegmentKind> kinds;
  for (const auto& s : seq.segments) kinds.push_back(s.kind);
  EXPECT_EQ(kinds, (std::vector<bb::SegmentKind>{bb::SegmentKind::style, bb::SegmentKind::text,
                                                  bb::SegmentKind::noisy_latent, bb::SegmentKind::content}));
}

TEST(Sequence, MissingNoisyLatentIsAnError) {
  Fixture f;
  ag::Tape t;
  bb::TokenSequence seq;
  seq.segments.push_back({bb::SegmentKind::text, t.constant(f.text), {}});
  EXPECT_THROW(bb::assign_positions(seq), std::invalid_argument);
}

TEST(Velocity, OutputHasTheLatentGridShape) {
  Fixture f;
  ag::Tape t;
  const Matrix v = f.net.predict_velocity(t, f.sequence(t), 0.5).v.value();
  EXPECT_EQ(v.rows(), 64);
  EXPECT_EQ(v.cols(), 4);
  EXPECT_TRUE(v.allFinite());
  EXPECT_THROW(f.net.predict_velocity(t, f.sequence(t), 1.5), std::invalid_argument);
}

TEST(Velocity, PermutingStyleRowsWithTheirPositionsIsInvariant) {
  Fixture f;
  ag::Tape t;
  auto seq = f.sequence(t);
  const Matrix base = f.net.predict_velocity(t, seq, 0.4).v.value();
  auto& style = seq.segments[0];
  Rng rng(3);
  std::vector<int> perm(static_cast<std::size_t>(style.tokens.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(rng.next_u64()));
  std::vector<bb::Position> pos;
  for (int i : perm) pos.push_back(style.positions[static_cast<std::size_t>(i)]);
  style.tokens = ag::gather_rows(style.tokens, perm);
  style.positions = pos;
  const Matrix permuted = f.net.predict_velocity(t, seq, 0.4).v.value();
  EXPECT_LE((permuted - base).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Velocity, ContentConditioningIsLive) {
  Fixture f;
  ag::Tape t;
  const Matrix with = f.net.predict_velocity(t, f.sequence(t), 0.4).v.value();
  const Matrix without = f.net.predict_velocity(t, f.sequence(t, true, false), 0.4).v.value();
  EXPECT_GE((with - without).norm() / with.norm(), 1e-4);
}

TEST(Velocity, AttentionIsBidirectional) {
  Fixture f;
  ag::Tape t;
  const Matrix base = f.net.predict_velocity(t, f.sequence(t), 0.4).v.value();
  f.content.row(63) += RowVector::Constant(f.arch.d_model, 0.5);
  const Matrix moved = f.net.predict_velocity(t, f.sequence(t), 0.4).v.value();
  EXPECT_GT((moved.row(0) - base.row(0)).norm(), 0.0);
}

TEST(Velocity, ParameterGradientMatchesFiniteDifferences) {
  bb::ArchConfig a;
  a.d_model = 32;
  a.layers = 2;
  a.mlp_hidden = 64;
  Fixture f(a, 7);
  Rng rng(8);
  const Matrix w = rng.normal_matrix(64, 4);
  auto loss = [&](ag::Tape& t) { return ag::sum(ag::mul(f.net.predict_velocity(t, f.sequence(t), 0.3).v, t.constant(w))); };
  auto value = [&] {
    ag::Tape t;
    ag::NoGradGuard g(t);
    return loss(t).item();
  };
  f.ps.zero_grad();
  {
    ag::Tape t;
    t.backward(loss(t));
  }
  std::vector<ag::Parameter*> params;
  for (auto& p : f.ps) params.push_back(p.get());
  int checked = 0;
  for (int attempt = 0; attempt < 400 && checked < 20; ++attempt) {
    ag::Parameter* p = params[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(params.size()) - 1))];
    const int r = rng.uniform_int(0, static_cast<int>(p->value.rows()) - 1);
    const int c = rng.uniform_int(0, static_cast<int>(p->value.cols()) - 1);
    const double g = p->grad(r, c);
    if (std::abs(g) < 1e-6) continue;
    EXPECT_LE(relative_error(g, central_difference(value, p->value(r, c))), 1e-3) << p->name << "(" << r << "," << c << ")";
    ++checked;
  }
  EXPECT_EQ(checked, 20);
}
