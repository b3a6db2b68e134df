#include "support.hpp"

#include <fstream>
#include <set>
#include <sstream>

using namespace uso;
using namespace uso::synth;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<StyleSpec> all_styles() {
  std::vector<StyleSpec> out;
  for (int p = 0; p < kNumPalettes; ++p)
    for (int t = 0; t < kNumTextures; ++t) out.push_back({p, static_cast<Texture>(t), 0.0});
  return out;
}

}  // namespace

TEST(Render, SameSpecAndSeedIsBitIdentical) {
  const ContentSpec c{static_cast<int>(Shape::circle), 0, 0, Scale::small};
  const Image a = render_content(c, 7), b = render_content(c, 7);
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(double) * a.size()));
}

TEST(Render, MovingAShapeOnlyTouchesTheTwoCells) {
  const ContentSpec a{static_cast<int>(Shape::circle), 0, 0, Scale::small};
  const ContentSpec b{static_cast<int>(Shape::circle), 3, 3, Scale::small};
  const Image ia = render_content(a, 7), ib = render_content(b, 7);
  int changed = 0;
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const bool in_a = y < kCell && x < kCell;
      const bool in_b = y >= 3 * kCell && x >= 3 * kCell;
      const double diff = (ia.row(y * kImageSize + x) - ib.row(y * kImageSize + x)).cwiseAbs().maxCoeff();
      if (!in_a && !in_b) {
        EXPECT_EQ(diff, 0.0) << "pixel " << x << "," << y;
      }
      if (diff > 0.0) ++changed;
    }
  }
  EXPECT_GT(changed, 0);
}

TEST(Render, ValuesStayInUnitRange) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const ContentSpec c = random_content(rng);
    const StyleSpec s{rng.uniform_int(0, kNumPalettes - 1), static_cast<Texture>(rng.uniform_int(0, 3)), rng.uniform()};
    const Image img = apply_style(c, s, rng.next_u64());
    EXPECT_GE(img.minCoeff(), 0.0);
    EXPECT_LE(img.maxCoeff(), 1.0);
  }
}

TEST(Render, InvalidSpecThrows) {
  EXPECT_THROW(render_content(ContentSpec{kNumShapes, 0, 0, Scale::small}, 0), std::invalid_argument);
  EXPECT_THROW(render_content(ContentSpec{0, kGrid, 0, Scale::small}, 0), std::invalid_argument);
  EXPECT_THROW(apply_style(ContentSpec{}, StyleSpec{kNumPalettes, Texture::flat, 0.0}, 0), std::invalid_argument);
  EXPECT_THROW(apply_style(ContentSpec{}, StyleSpec{1, Texture::flat, 1.0}, 0), std::invalid_argument);
}

TEST(ApplyStyle, IdentityStyleIsTheCanonicalRendering) {
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    const ContentSpec c = random_content(rng);
    const auto seed = rng.next_u64();
    EXPECT_EQ(apply_style(c, StyleSpec{kIdentityPalette, Texture::flat, 0.0}, seed), render_content(c, seed));
  }
}

TEST(ApplyStyle, SameStyleAcrossContentIsSimilar) {
  Rng rng(5);
  for (const StyleSpec& s : all_styles()) {
    for (int i = 0; i < 10; ++i) {
      const Image a = apply_style(random_content(rng), s, rng.next_u64());
      const Image b = apply_style(random_content(rng), s, rng.next_u64());
      EXPECT_GE(descriptor::style_similarity(a, b), 0.95) << "palette " << s.palette_id;
    }
  }
}

TEST(ApplyStyle, DifferentPalettesAreDissimilar) {
  Rng rng(6);
  const auto styles = all_styles();
  for (const auto& a : styles) {
    for (const auto& b : styles) {
      if (a.palette_id == b.palette_id) continue;
      for (int i = 0; i < 3; ++i) {
        const Image ia = apply_style(random_content(rng), a, rng.next_u64());
        const Image ib = apply_style(random_content(rng), b, rng.next_u64());
        EXPECT_LT(descriptor::style_similarity(ia, ib), 0.9);
      }
    }
  }
}

TEST(ApplyStyle, DistinctStyleClassesStaySeparated) {
  const auto styles = all_styles();
  const ContentSpec c{1, 1, 2, Scale::large};
  for (std::size_t i = 0; i < styles.size(); ++i) {
    for (std::size_t j = i + 1; j < styles.size(); ++j) {
      EXPECT_LT(descriptor::style_similarity(apply_style(c, styles[i], 1), apply_style(c, styles[j], 1)), 0.9)
          << i << " vs " << j;
    }
  }
}

TEST(ApplyStyle, DescriptorSeparationMargin) {
  Rng rng(9);
  std::vector<std::pair<int, RowVector>> grid;
  for (int i = 0; i < 200; ++i) {
    const StyleSpec s = random_style(rng);
    grid.emplace_back(s.style_class(), descriptor::style_descriptor(apply_style(random_content(rng), s, rng.next_u64())));
  }
  double same_min = 1.0, cross_max = -1.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    for (std::size_t j = i + 1; j < grid.size(); ++j) {
      const double c = descriptor::cosine(grid[i].second, grid[j].second);
      const bool same = grid[i].first == grid[j].first;
      const bool cross_palette = grid[i].first / kNumTextures != grid[j].first / kNumTextures;
      if (same) same_min = std::min(same_min, c);
      if (cross_palette) cross_max = std::max(cross_max, c);
    }
  }
  EXPECT_GE(same_min - cross_max, 0.05) << "same " << same_min << " cross " << cross_max;
}

TEST(Destylize, PreservedRoundTripIsExact) {
  const ContentSpec c{2, 1, 3, Scale::large};
  const StyleSpec s{4, Texture::hatch, 0.0};
  EXPECT_EQ(destylize(apply_style(c, s, 21), c, 21), render_content(c, 21));
}

TEST(Destylize, OutputHasNoStylizedForeground) {
  Rng rng(12);
  for (int p = 1; p < kNumPalettes; ++p) {
    const ContentSpec c = random_content(rng);
    const Image out = destylize(apply_style(c, StyleSpec{p, Texture::dots, 0.0}, 3), c, 3);
    const auto& fg = palettes()[static_cast<std::size_t>(p)].fg;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const bool match = std::abs(out(i, 0) - fg[0]) < 1e-9 && std::abs(out(i, 1) - fg[1]) < 1e-9 &&
                         std::abs(out(i, 2) - fg[2]) < 1e-9;
      EXPECT_FALSE(match) << "palette " << p << " pixel " << i;
    }
  }
}

TEST(Triplet, PreservedKeepsTheContentSpec) {
  const Triplet t = make_triplet({0, 2, 2, Scale::small}, {0, Texture::hatch, 0.0}, LayoutMode::preserved, 4);
  EXPECT_EQ(t.content_ref_spec, t.content);
  EXPECT_EQ(t.content_ref, render_content(t.content, 4));
  EXPECT_TRUE(t.prompt.empty());
}

TEST(Triplet, ShiftedMovesTheSubject) {
  Rng rng(13);
  for (int i = 0; i < 100; ++i) {
    const Triplet t = make_triplet(random_content(rng), random_style(rng), LayoutMode::shifted, rng.next_u64());
    EXPECT_EQ(t.content_ref_spec.shape_id, t.content.shape_id);
    EXPECT_TRUE(t.content_ref_spec.row != t.content.row || t.content_ref_spec.col != t.content.col);
  }
}

TEST(Triplet, StyleReferenceDrawsADecoyShape) {
  Rng rng(14);
  for (int i = 0; i < 100; ++i) {
    const auto mode = i % 2 ? LayoutMode::shifted : LayoutMode::preserved;
    const Triplet t = make_triplet(random_content(rng), random_style(rng), mode, static_cast<std::uint64_t>(i));
    EXPECT_NE(t.style_ref_spec.shape_id, t.content.shape_id);
  }
}

TEST(Filter, WellFormedTripletsAreAccepted) {
  Rng rng(15);
  for (int i = 0; i < 50; ++i) {
    const Triplet t = make_triplet(random_content(rng), random_style(rng), LayoutMode::preserved, rng.next_u64());
    EXPECT_TRUE(filter_triplet(t, 0.9).accepted());
  }
}

TEST(Filter, WrongPaletteIsRejectedForStyle) {
  Triplet t = make_triplet({1, 0, 0, Scale::large}, {2, Texture::flat, 0.0}, LayoutMode::preserved, 1);
  t.target = apply_style(t.content, {5, Texture::flat, 0.0}, 1);
  EXPECT_EQ(filter_triplet(t).verdict, FilterVerdict::reject_style);
}

TEST(Filter, SwappedContentIsRejectedForContent) {
  Triplet t = make_triplet({1, 0, 0, Scale::large}, {2, Texture::flat, 0.0}, LayoutMode::preserved, 1);
  t.content_ref_spec.shape_id = 3;
  t.content_ref = render_content(t.content_ref_spec, 1);
  EXPECT_EQ(filter_triplet(t).verdict, FilterVerdict::reject_content);
}

TEST(Filter, ThresholdsOutsideUnitIntervalThrow) {
  const Triplet t = make_triplet({}, {1, Texture::flat, 0.0}, LayoutMode::preserved, 1);
  EXPECT_THROW(filter_triplet(t, 1.0), std::invalid_argument);
  EXPECT_THROW(filter_triplet(t, 0.9, 0.0), std::invalid_argument);
}

TEST(Dataset, ExactCountAndAllRecordsPassTheFilter) {
  DatasetConfig cfg;
  cfg.preserved = 100;
  cfg.shifted = 100;
  cfg.seed = 3;
  const auto records = generate_records(cfg);
  ASSERT_EQ(records.size(), 200u);
  int shifted_moved = 0, shifted = 0;
  for (const auto& r : records) {
    EXPECT_TRUE(filter_triplet(r.triplet, cfg.tau_style).accepted());
    EXPECT_NE(r.triplet.style_ref_spec.shape_id, r.triplet.content.shape_id);
    if (r.triplet.layout_mode == LayoutMode::shifted) {
      ++shifted;
      const auto& a = r.triplet.content;
      const auto& b = r.triplet.content_ref_spec;
      if (a.row != b.row || a.col != b.col) ++shifted_moved;
    }
  }
  EXPECT_EQ(shifted, 100);
  EXPECT_EQ(shifted_moved, shifted);
}

TEST(Dataset, SameSeedGivesByteIdenticalManifests) {
  DatasetConfig cfg;
  cfg.preserved = 12;
  cfg.shifted = 12;
  cfg.seed = 42;
  const auto dir = uso::testing::scratch_dir("dataset");
  const auto m1 = build_dataset(cfg, dir / "a");
  const auto m2 = build_dataset(cfg, dir / "b");
  EXPECT_EQ(slurp(m1), slurp(m2));
  const auto loaded = load_dataset(dir / "a");
  const auto records = generate_records(cfg);
  ASSERT_EQ(loaded.size(), records.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_TRUE(loaded[i].target.isApprox(records[i].triplet.target, 1e-6));
    EXPECT_EQ(loaded[i].content, records[i].triplet.content);
    EXPECT_EQ(loaded[i].prompt, records[i].triplet.prompt);
  }
  std::filesystem::remove_all(dir);
}

TEST(Dataset, UnsatisfiableUniquenessFails) {
  DatasetConfig cfg;
  cfg.num_palettes = 1;
  cfg.unique = true;
  cfg.preserved = kNumShapes * kGrid * kGrid * 2 * kNumTextures + 1;
  EXPECT_THROW(generate_records(cfg), DatasetError);
}

TEST(Dataset, ConfigRejectsUnknownKeys) {
  std::istringstream in("preserved = 3\nbogus = 1\n");
  EXPECT_THROW(DatasetConfig::from(KeyValueConfig::parse(in)), ConfigError);
}

TEST(Prompt, TokenIdsStayInsideTheVocabulary) {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const PromptSpec p = describe_content(random_content(rng), rng.uniform_int(0, kNumPalettes - 1),
                                          PromptMode::descriptive_stylization);
    EXPECT_TRUE(p.valid());
    EXPECT_LT(*p.style_word, kVocabSize);
  }
}
