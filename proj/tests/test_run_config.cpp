#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "eurobert/run_config.hpp"

using namespace eurobert;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = EUROBERT_SOURCE_DIR;

void expect_plan_eq(const TrainPlan& a, const TrainPlan& b) {
  EXPECT_EQ(a.base_lr, b.base_lr);
  EXPECT_EQ(a.warmup, b.warmup);
  EXPECT_EQ(a.batch_size, b.batch_size);
  EXPECT_EQ(a.strategy, b.strategy);
  EXPECT_EQ(a.adam, b.adam);
  EXPECT_EQ(a.phases, b.phases);
}

bool contains(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(PresetFiles, ModelFilesMatchTheBuiltInPresets) {
  for (const char* name : {"210m", "610m", "2.1b", "small", "tiny"}) {
    SCOPED_TRACE(name);
    std::vector<std::string> problems;
    const auto c = parse_encoder_config(YAML::LoadFile((kSource / "presets/models" / (std::string(name) + ".yaml")).string()), problems);
    EXPECT_TRUE(problems.empty());
    EXPECT_EQ(c, encoder_preset(name));
  }
}

TEST(PresetFiles, MixFilesMatchTheBuiltInPresets) {
  for (const char* name : {"pretrain-reference", "anneal-reference", "anneal-final"}) {
    SCOPED_TRACE(name);
    const auto file = load_mix_spec((kSource / "presets/mixes" / (std::string(name) + ".yaml")).string());
    const auto ref = mix_preset(name);
    ASSERT_EQ(file.entries.size(), ref.entries.size());
    for (std::size_t i = 0; i < ref.entries.size(); ++i) {
      EXPECT_EQ(file.entries[i].label, ref.entries[i].label);
      EXPECT_EQ(file.entries[i].weight, ref.entries[i].weight);
      EXPECT_EQ(file.entries[i].match.describe(), ref.entries[i].match.describe());
    }
  }
}

TEST(PresetFiles, RunFilesReproduceTheReferenceRecipe) {
  for (const char* size : {"210m", "610m", "2.1b"}) {
    SCOPED_TRACE(size);
    const auto cfg = load_run_config((kSource / "presets/runs" / ("eurobert-" + std::string(size) + ".yaml")).string());
    EXPECT_EQ(cfg.model, encoder_preset(size));
    EXPECT_TRUE(cfg.vocab_size_explicit);
    expect_plan_eq(cfg.plan, train_plan_preset("reference-" + std::string(size)));
  }
}

TEST(PresetFiles, DeskRunResolvesPathsNextToTheConfig) {
  const auto cfg = load_run_config((kSource / "presets/runs/desk-tiny.yaml").string());
  EXPECT_EQ(cfg.model_preset, "tiny");
  EXPECT_FALSE(cfg.vocab_size_explicit);
  ASSERT_EQ(cfg.corpus.size(), 1u);
  EXPECT_TRUE(fs::exists(cfg.corpus[0])) << cfg.corpus[0];
  EXPECT_TRUE(fs::exists(cfg.tokenizer)) << cfg.tokenizer;
  ASSERT_EQ(cfg.plan.phases.size(), 2u);
  for (const auto& ph : cfg.plan.phases) EXPECT_NO_THROW(resolve_mix(ph.mix)) << ph.mix;
  EXPECT_EQ(cfg.plan.phases[1].min_quality, 3);
}

TEST(RunConfigParsing, ReportsEveryProblemAtOnce) {
  const auto root = YAML::Load(R"(
name: broken
seed: not-a-number
colour: blue
model:
  preset: tiny
  d_modle: 64
  n_heads: 3
train:
  preset: tiny
  phases:
    - name: pretrain
      schedule: sideways
)");
  try {
    parse_run_config(root);
    FAIL() << "expected a ConfigError";
  } catch (const ConfigError& e) {
    const auto& p = e.problems();
    EXPECT_GE(p.size(), 4u);
    EXPECT_TRUE(contains(p, "seed"));
    EXPECT_TRUE(contains(p, "colour"));
    EXPECT_TRUE(contains(p, "d_modle"));
    EXPECT_TRUE(contains(p, "sideways"));
  }
}

TEST(RunConfigParsing, SequenceLongerThanTheModelIsRejected) {
  const auto root = YAML::Load(R"(
model: tiny
train:
  preset: tiny
  phases:
    - name: anneal
      seq_len: 4096
)");
  try {
    parse_run_config(root);
    FAIL() << "expected a ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_TRUE(contains(e.problems(), "max_seq_len"));
  }
}

TEST(RunConfigParsing, ResolvedConfigRoundTrips) {
  auto cfg = load_run_config((kSource / "presets/runs/eurobert-610m.yaml").string());
  const auto again = parse_run_config(YAML::Load(dump_yaml(to_yaml(cfg))));
  EXPECT_EQ(again.name, cfg.name);
  EXPECT_EQ(again.seed, cfg.seed);
  EXPECT_EQ(again.checkpoint_every, cfg.checkpoint_every);
  EXPECT_EQ(again.tokenizer, cfg.tokenizer);
  EXPECT_EQ(again.corpus, cfg.corpus);
  EXPECT_EQ(again.model, cfg.model);
  expect_plan_eq(again.plan, cfg.plan);
}

TEST(RunConfigParsing, VocabularyBindsToTheTokenizerUnlessPinned) {
  auto cfg = parse_run_config(YAML::Load("model: tiny\ntrain: tiny\n"));
  const Vocab bytes;
  bind_vocab(cfg, bytes);
  EXPECT_EQ(cfg.model.vocab_size, bytes.size());

  auto pinned = parse_run_config(YAML::Load("model: {preset: tiny, vocab_size: 999}\ntrain: tiny\n"));
  EXPECT_THROW(bind_vocab(pinned, bytes), ConfigError);
}
