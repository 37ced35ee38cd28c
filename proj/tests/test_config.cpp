#include <gtest/gtest.h>

#include <fstream>

#include "gcnet/config_file.hpp"

using namespace gcnet;

namespace {

std::string error_of(const std::string& text, const std::vector<std::string>& overrides = {}) {
  try {
    parse_run_config(text, "run.yaml", overrides);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(RunConfig, EmptyTextGivesDeskDefaults) {
  auto rc = parse_run_config("");
  EXPECT_EQ(rc.model.channels, 8);
  EXPECT_EQ(rc.train.max_steps, 2000);
  EXPECT_DOUBLE_EQ(rc.train.learning_rate, 1e-3);
  EXPECT_EQ(rc.data.source, DataSource::generated);
  EXPECT_EQ(rc.data.train_count, 64);
  EXPECT_FALSE(rc.ablation.has_value());
}

TEST(RunConfig, NestedValuesAndPresets) {
  auto rc = parse_run_config(R"(
model:
  preset: default
  direction_hidden: 32
train:
  preset: default
  weight_decay: 0.001
  loss: l1
  augmentation:
    hflip_prob: 0.25
  resize:
    max_side: 800
data:
  source: directory
  root: /data/x
  synthetic:
    families: [disk, square]
    count_max: 9
)");
  EXPECT_EQ(rc.model.channels, 256);
  EXPECT_EQ(rc.model.direction_hidden, 32);
  EXPECT_DOUBLE_EQ(rc.train.learning_rate, 1e-5);
  EXPECT_DOUBLE_EQ(rc.train.weight_decay, 0.001);
  EXPECT_EQ(rc.train.loss, LossKind::l1);
  EXPECT_DOUBLE_EQ(rc.train.augmentation.hflip_prob, 0.25);
  EXPECT_EQ(rc.train.resize.max_side, 800);
  EXPECT_EQ(rc.data.source, DataSource::directory);
  EXPECT_EQ(rc.data.root, "/data/x");
  EXPECT_EQ(rc.data.synthetic.families.size(), 2u);
  EXPECT_EQ(rc.data.synthetic.count_max, 9);
}

TEST(RunConfig, OverridesWinOverFileValues) {
  auto rc = parse_run_config("train:\n  max_steps: 10\n", "run.yaml",
                             {"train.max_steps=25", "model.seed=4", "data.synthetic.height=64", "train.augmentation.vflip_prob=0"});
  EXPECT_EQ(rc.train.max_steps, 25);
  EXPECT_EQ(rc.model.seed, 4u);
  EXPECT_EQ(rc.data.synthetic.height, 64);
  EXPECT_EQ(rc.train.augmentation.vflip_prob, 0.0);
}

TEST(RunConfig, AblationRowSetsFlags) {
  auto rc = parse_run_config("model:\n  ablation: B3\n");
  ASSERT_TRUE(rc.ablation.has_value());
  EXPECT_TRUE(rc.model.recalibration);
  EXPECT_FALSE(rc.model.condenser);
  EXPECT_TRUE(rc.model.location_counter);
}

TEST(RunConfig, ExemplarVariantSwitchesBothSections) {
  auto rc = parse_run_config("train:\n  exemplar_variant: true\n");
  EXPECT_TRUE(rc.model.exemplar_variant);
  EXPECT_TRUE(rc.train.exemplar_variant);
}

TEST(RunConfigErrors, UnknownKeyReportsLineAndColumn) {
  const auto e = error_of("model:\n  channels: 8\n  chanels: 9\n");
  EXPECT_NE(e.find("run.yaml:3:3"), std::string::npos) << e;
  EXPECT_NE(e.find("model.chanels"), std::string::npos) << e;
}

TEST(RunConfigErrors, WrongTypeReportsValueLocation) {
  const auto e = error_of("train:\n  batch_size: 4\n  max_steps: lots\n");
  EXPECT_NE(e.find("run.yaml:3:14"), std::string::npos) << e;
  EXPECT_NE(e.find("integer"), std::string::npos) << e;
}

TEST(RunConfigErrors, SyntaxErrorReportsLine) {
  const auto e = error_of("model:\n  channels: [8\ntrain: {\n");
  EXPECT_NE(e.find("run.yaml:"), std::string::npos) << e;
  EXPECT_FALSE(e.empty());
}

TEST(RunConfigErrors, BadEnumAndPresetAndSemanticChecks) {
  EXPECT_NE(error_of("train:\n  loss: huber\n").find("run.yaml:2:9"), std::string::npos);
  EXPECT_NE(error_of("model:\n  preset: huge\n").find("unknown model preset"), std::string::npos);
  EXPECT_NE(error_of("model:\n  ablation: B9\n").find("B9"), std::string::npos);
  EXPECT_NE(error_of("model:\n  channels: 16\n").find("last stage width"), std::string::npos);
  EXPECT_NE(error_of("data:\n  synthetic:\n    families: [disk, hexagon]\n").find("hexagon"), std::string::npos);
  EXPECT_NE(error_of("- 1\n- 2\n").find("mapping"), std::string::npos);
}

TEST(RunConfigErrors, MalformedOverrides) {
  EXPECT_NE(error_of("", {"train.max_steps"}).find("expected key.path=value"), std::string::npos);
  EXPECT_NE(error_of("", {"train..x=1"}).find("empty key"), std::string::npos);
  EXPECT_NE(error_of("train:\n  max_steps: 3\n", {"train.max_steps.deep=1"}).find("not a section"), std::string::npos);
  EXPECT_NE(error_of("", {"train.max_steps.deep=1"}).find("'train.max_steps' has the wrong type"), std::string::npos);
  EXPECT_NE(error_of("", {"train.unknown_knob=1"}).find("train.unknown_knob"), std::string::npos);
}

TEST(RunConfig, SerialisedConfigParsesBackToTheSameValues) {
  auto rc = parse_run_config("model:\n  ablation: B1\ntrain:\n  max_steps: 7\n  loss: l1\n", "a.yaml",
                             {"data.val_count=3"});
  auto again = parse_run_config(to_yaml(rc), "b.yaml");
  EXPECT_EQ(to_json(again.model), to_json(rc.model));
  EXPECT_EQ(to_json(again.train), to_json(rc.train));
  EXPECT_EQ(to_config_json(again), to_config_json(rc));
}

TEST(RunConfig, MissingFileIsAnIoError) {
  EXPECT_THROW(load_run_config("/nonexistent/run.yaml"), IoError);
  const auto path = std::filesystem::temp_directory_path() / "gcnet_test_config.yaml";
  {
    std::ofstream os(path);
    os << "train:\n  max_steps: 3\n";
  }
  EXPECT_EQ(load_run_config(path, {"train.batch_size=2"}).train.batch_size, 2);
}
