#include "support.hpp"

using namespace uso;
using train::Stage;
using train::Variant;

namespace {

std::vector<synth::Triplet> small_triplets(std::uint64_t seed = 3) {
  synth::DatasetConfig dc;
  dc.preserved = 4;
  dc.shifted = 4;
  dc.seed = seed;
  std::vector<synth::Triplet> out;
  for (auto& r : synth::generate_records(dc)) out.push_back(r.triplet);
  return out;
}

train::StageConfig short_stage(int steps) {
  train::StageConfig c;
  c.steps = steps;
  c.batch = 2;
  c.reward_start_fraction = 0.0;
  c.reward_samples = 1;
  return c;
}

std::set<std::string> changed(const std::map<std::string, std::uint64_t>& a,
                              const std::map<std::string, std::uint64_t>& b) {
  std::set<std::string> out;
  for (const auto& [k, v] : a)
    if (b.at(k) != v) out.insert(k);
  return out;
}

bool all_prefixed(const std::set<std::string>& names, std::string_view prefix) {
  return std::all_of(names.begin(), names.end(), [&](const auto& n) { return train::has_prefix(n, prefix); });
}

}  // namespace

TEST(FreezePolicy, StageMasks) {
  const UsoModel m(ModelConfig{}, 1);
  for (const auto& [name, on] : train::freeze_policy(m.parameters(), Stage::align)) {
    EXPECT_EQ(on, train::has_prefix(name, "projector.")) << name;
  }
  for (const auto& [name, on] : train::freeze_policy(m.parameters(), Stage::disentangle)) {
    EXPECT_EQ(on, train::has_prefix(name, "backbone.")) << name;
  }
  for (const auto& [name, on] : train::freeze_policy(m.parameters(), Stage::align, Variant::unfrozen_encoder)) {
    EXPECT_EQ(on, train::has_prefix(name, "projector.") || train::has_prefix(name, "semantic.")) << name;
  }
  for (const auto& [name, on] : train::freeze_policy(m.parameters(), Stage::disentangle, Variant::no_sat)) {
    if (train::has_prefix(name, "ae.") || train::has_prefix(name, "projector.")) {
      EXPECT_EQ(on, train::has_prefix(name, "projector.")) << name;
    }
  }
}

TEST(Stage1, ChangesOnlyProjectorParameters) {
  UsoModel m(ModelConfig{}, 2);
  const auto data = train::prepare(m, small_triplets());
  const auto before = parameter_hashes(m.parameters());
  const auto log = train::stage1_train(m, data, short_stage(3));
  ASSERT_EQ(log.size(), 3u);
  const auto diff = changed(before, parameter_hashes(m.parameters()));
  EXPECT_FALSE(diff.empty());
  EXPECT_TRUE(all_prefixed(diff, "projector.")) << *diff.begin();
}

TEST(Stage2, LeavesProjectorBitUnchanged) {
  UsoModel m(ModelConfig{}, 3);
  const auto data = train::prepare(m, small_triplets());
  const auto before = parameter_hashes(m.parameters());
  train::stage2_train(m, data, short_stage(3));
  const auto diff = changed(before, parameter_hashes(m.parameters()));
  EXPECT_FALSE(diff.empty());
  EXPECT_TRUE(all_prefixed(diff, "backbone."));
}

TEST(Stage2, ZeroStepsKeepsEveryParameter) {
  UsoModel m(ModelConfig{}, 4);
  const auto data = train::prepare(m, small_triplets());
  const auto before = parameter_hashes(m.parameters());
  EXPECT_TRUE(train::stage2_train(m, data, short_stage(0)).empty());
  EXPECT_EQ(before, parameter_hashes(m.parameters()));
}

TEST(Stage2, RewardWeightSwitchesOnAtS) {
  UsoModel m(ModelConfig{}, 5);
  const auto data = train::prepare(m, small_triplets());
  auto cfg = short_stage(6);
  cfg.reward_start_fraction = 0.5;
  cfg.task_mix = {1, 0, 0};
  std::vector<int> lambdas;
  for (const auto& s : train::stage2_train(m, data, cfg)) lambdas.push_back(s.lambda);
  EXPECT_EQ(lambdas, (std::vector<int>{0, 0, 0, 1, 1, 1}));
}

TEST(Stage2, DisabledRewardKeepsLambdaZero) {
  UsoModel m(ModelConfig{}, 6);
  const auto data = train::prepare(m, small_triplets());
  auto cfg = short_stage(4);
  cfg.reward_enabled = false;
  for (const auto& s : train::stage2_train(m, data, cfg)) {
    EXPECT_EQ(s.lambda, 0);
    EXPECT_EQ(s.reward_samples, 0);
  }
}

TEST(Stage2, SubjectOnlyBatchesTrainWithoutReward) {
  UsoModel m(ModelConfig{}, 7);
  const auto data = train::prepare(m, small_triplets());
  auto cfg = short_stage(2);
  cfg.task_mix = {0, 1, 0};
  for (const auto& s : train::stage2_train(m, data, cfg)) {
    EXPECT_EQ(s.reward_samples, 0);
    EXPECT_TRUE(std::isfinite(s.l_pre));
  }
  cfg.task_mix = {0, 0, 0};
  EXPECT_THROW(train::stage2_train(m, data, cfg), std::invalid_argument);
}

TEST(Stage2, DeterministicUnderFixedSeed) {
  std::vector<std::vector<train::StepLog>> logs;
  std::vector<std::map<std::string, std::uint64_t>> hashes;
  for (int run = 0; run < 2; ++run) {
    UsoModel m(ModelConfig{}, 8);
    const auto data = train::prepare(m, small_triplets());
    logs.push_back(train::stage2_train(m, data, short_stage(3)));
    hashes.push_back(parameter_hashes(m.parameters()));
  }
  ASSERT_EQ(logs[0].size(), logs[1].size());
  for (std::size_t i = 0; i < logs[0].size(); ++i) {
    EXPECT_EQ(logs[0][i].l_pre, logs[1][i].l_pre);
    EXPECT_EQ(logs[0][i].l_srl, logs[1][i].l_srl);
  }
  EXPECT_EQ(hashes[0], hashes[1]);
}

TEST(Variants, NoDeRoutesStyleThroughTheAutoencoder) {
  UsoModel m(train::model_config(Variant::no_de), 9);
  EXPECT_EQ(m.parameters().find("projector.layer1.weight"), nullptr);
  const auto data = train::prepare(m, small_triplets());
  train::stage1_train(m, data, short_stage(2), Variant::no_de);
  EXPECT_EQ(m.style_route_counts()[0], 0);
  EXPECT_GT(m.style_route_counts()[1], 0);

  UsoModel full(ModelConfig{}, 9);
  train::stage1_train(full, train::prepare(full, small_triplets()), short_stage(2));
  EXPECT_GT(full.style_route_counts()[0], 0);
  EXPECT_EQ(full.style_route_counts()[1], 0);
}

TEST(Variants, NamesRoundTrip) {
  for (const auto& [v, name] : train::kVariantNames) EXPECT_EQ(train::variant_from_string(name), v);
  EXPECT_THROW(train::variant_from_string("no_everything"), std::invalid_argument);
}

TEST(Foundation, SaveLoadRoundTrip) {
  USO_REQUIRE_FOUNDATION();
  const auto dir = uso::testing::scratch_dir("foundation_copy");
  train::save_foundation(*found, dir);
  ASSERT_TRUE(train::has_foundation(dir));
  const auto back = train::load_foundation(dir);
  EXPECT_EQ(back.model.tensors, found->model.tensors);
  EXPECT_EQ(back.stats, found->stats);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(train::load_foundation(dir), std::runtime_error);
}

TEST(Foundation, Stage2ReducesPretrainLoss) {
  USO_REQUIRE_FOUNDATION();
  const auto owned = uso::testing::pretrained_model(*found);
  UsoModel& m = *owned;
  synth::DatasetConfig dc;
  dc.preserved = dc.shifted = 40;
  std::vector<synth::Triplet> tr;
  for (auto& r : synth::generate_records(dc)) tr.push_back(r.triplet);
  const auto data = train::prepare(m, tr);
  auto cfg = short_stage(120);
  cfg.batch = 4;
  cfg.reward_enabled = false;
  cfg.optimizer = "adam";
  cfg.lr = 1e-3;
  const auto log = train::stage2_train(m, data, cfg);
  auto mean = [&](std::size_t b, std::size_t e) {
    double s = 0.0;
    for (std::size_t i = b; i < e; ++i) s += log[i].l_pre;
    return s / static_cast<double>(e - b);
  };
  EXPECT_LT(mean(90, 120), mean(0, 30));
}
