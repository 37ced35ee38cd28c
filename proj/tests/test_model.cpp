#include <gtest/gtest.h>

#include <fstream>

#include "gcnet/checkpoint.hpp"
#include "gcnet/gradcheck.hpp"
#include "support.hpp"

using namespace gcnet;
using namespace gcnet::testing;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("gcnet_test_model_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

ImageTensor<float> random_image(Index h, Index w, std::uint64_t seed) {
  Rng rng(seed);
  return ImageTensor<float>::from(random_tensor<float>({1, 3, h, w}, rng, 0, 1));
}

std::vector<std::string> active_names(const ModelConfig& cfg) {
  GcnetParams<float> p(cfg);
  std::vector<std::string> out;
  for (auto& [n, v] : p.named_parameters(cfg, ParamScope::active)) out.push_back(n);
  return out;
}

bool has_prefix(const std::vector<std::string>& names, const std::string& prefix) {
  return std::any_of(names.begin(), names.end(), [&](const std::string& n) { return n.rfind(prefix, 0) == 0; });
}

}  // namespace

TEST(Forward, DefaultConfigProducesScalarCountAnd32x32Map) {
  const ModelConfig cfg;
  GcnetParams<float> p(cfg);
  auto r = forward(random_image(512, 512, 1), p, cfg, Phase::eval);
  EXPECT_EQ(r.count.data.shape(), (Shape{1}));
  ASSERT_TRUE(r.similarity.has_value());
  EXPECT_EQ(r.similarity->data.shape(), (Shape{1, 32, 32}));
  EXPECT_EQ(r.token->count(), 16);
}

TEST(Forward, RowB2SkipsAnisotropicAndCondenser) {
  const auto cfg = ablation_variant(ModelConfig::tiny(), AblationRow::B2);
  GcnetParams<float> p(cfg);
  auto r = forward(random_image(64, 64, 2), p, cfg, Phase::eval);
  ASSERT_TRUE(r.similarity.has_value());
  EXPECT_FALSE(r.direction.has_value());
  for (float e : r.token_weights->data.value().values()) EXPECT_FLOAT_EQ(e, 1.0f / 4.0f);
  const auto names = active_names(cfg);
  EXPECT_FALSE(has_prefix(names, "dass.horizontal"));
  EXPECT_FALSE(has_prefix(names, "dass.direction_hidden"));
  EXPECT_FALSE(has_prefix(names, "dass.token_head"));
  EXPECT_TRUE(has_prefix(names, "counter.head"));
}

TEST(Forward, RowB0IsPooledBackboneIntoHead) {
  const auto cfg = ablation_variant(ModelConfig::tiny(), AblationRow::B0);
  GcnetParams<float> p(cfg);
  auto r = forward(random_image(64, 64, 3), p, cfg, Phase::eval);
  EXPECT_FALSE(r.similarity.has_value());
  EXPECT_EQ(r.count.data.shape(), (Shape{1}));
  EXPECT_FALSE(has_prefix(active_names(cfg), "backbone.exemplar"));
}

TEST(Forward, RowB1CountsFromMeanSimilarity) {
  const auto cfg = ablation_variant(ModelConfig::tiny(), AblationRow::B1);
  GcnetParams<float> p(cfg);
  p.gap.scale.mutable_value()[0] = 3.0f;
  p.gap.offset.mutable_value()[0] = 0.25f;
  auto r = forward(random_image(64, 64, 4), p, cfg, Phase::eval);
  double mean = 0;
  for (float v : r.similarity->data.value().values()) mean += v;
  mean /= static_cast<double>(r.similarity->data.numel());
  EXPECT_NEAR(r.count.data.value()[0], 3.0 * mean + 0.25, 1e-4);
  EXPECT_TRUE(r.direction.has_value());
}

TEST(Forward, SameSeedSameOutputsAcrossInstances) {
  const auto cfg = ModelConfig::tiny();
  GcnetParams<float> a(cfg, 42), b(cfg, 42);
  auto img = random_image(64, 96, 5);
  auto ra = forward(img, a, cfg, Phase::eval), rb = forward(img, b, cfg, Phase::eval);
  EXPECT_EQ(ra.count.data.value(), rb.count.data.value());
  EXPECT_EQ(ra.similarity->data.value(), rb.similarity->data.value());
}

TEST(Forward, ExemplarVariantAuxiliaryHead) {
  auto cfg = ModelConfig::tiny();
  cfg.exemplar_variant = true;
  GcnetParams<float> p(cfg);
  auto r = forward(random_image(64, 64, 6), p, cfg, Phase::eval);
  auto aux = forward_exemplar_aux(random_image(128, 128, 7), r, p, cfg, Phase::eval);
  EXPECT_EQ(aux.data.shape(), (Shape{1}));
  auto plain = ModelConfig::tiny();
  GcnetParams<float> q(plain);
  auto rq = forward(random_image(64, 64, 6), q, plain, Phase::eval);
  EXPECT_THROW(forward_exemplar_aux(random_image(128, 128, 7), rq, q, plain, Phase::eval), ConfigError);
}

TEST(Ablation, RowFlags) {
  const ModelConfig base;
  auto b4 = ablation_variant(base, AblationRow::B4);
  EXPECT_TRUE(b4.recalibration && b4.condenser && b4.location_counter);
  auto b0 = ablation_variant(base, AblationRow::B0);
  EXPECT_FALSE(b0.recalibration || b0.condenser || b0.location_counter);
  auto b3 = ablation_variant(base, "B3");
  EXPECT_TRUE(b3.recalibration);
  EXPECT_FALSE(b3.condenser);
  EXPECT_TRUE(b3.location_counter);
  EXPECT_THROW(ablation_variant(base, "B5"), ConfigError);
}

TEST(Ablation, ParameterCountsAreMonotoneOnTinyConfig) {
  Index prev = 0;
  for (auto row : {AblationRow::B0, AblationRow::B1, AblationRow::B2, AblationRow::B3, AblationRow::B4}) {
    const auto cfg = ablation_variant(ModelConfig::tiny(), row);
    GcnetParams<float> p(cfg);
    const Index n = parameter_count(p, cfg);
    EXPECT_GE(n, prev) << to_string(row);
    prev = n;
  }
}

TEST(Ablation, FullModelHasMoreParametersThanBaselineAtDefaultWidth) {
  const auto b0 = ablation_variant(ModelConfig{}, AblationRow::B0);
  const auto b4 = ablation_variant(ModelConfig{}, AblationRow::B4);
  GcnetParams<float> p0(b0), p4(b4);
  EXPECT_GT(parameter_count(p4, b4), parameter_count(p0, b0));
}

TEST(ModelConfigValidation, RejectsInconsistentSettings) {
  auto c = ModelConfig::tiny();
  c.stage_channels = {8, 8, 8, 4};
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.unfold_kernel = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.exemplar_grid = 16;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModuleGradients, SimulatorAndDassMatchFiniteDifferences) {
  for (const char* m : {"linear", "exemplar_sim", "dass"}) {
    auto r = gradcheck_module(m, ModelConfig::tiny(), 1);
    // Central differences leave ~1e-11 absolute noise; against the 1e-5 floor
    // that reads as a few 1e-6 relative on near-zero entries.
    EXPECT_LT(r.max_rel_error, 1e-5) << m << " worst " << r.worst;
    EXPECT_GT(r.checked, 0);
  }
  EXPECT_THROW(gradcheck_module("nope", ModelConfig::tiny()), ConfigError);
}

// ---------------------------------------------------------------- checkpoints

TEST(Checkpoint, RoundTripIsBitwise) {
  auto cfg = ModelConfig::tiny();
  cfg.seed = 9;
  GcnetParams<float> p(cfg);
  auto named = p.named_parameters(cfg);
  Rng rng(1);
  for (auto& [n, v] : named) v->mutable_value() = random_tensor<float>(v->shape(), rng);
  for (auto& [n, t] : p.named_buffers()) *t = random_tensor<float>(t->shape(), rng, 0.1, 2);
  OptimizerState opt;
  opt.step = 17;
  for (auto& [n, v] : named) {
    opt.first_moment.emplace(n, random_tensor<float>(v->shape(), rng));
    opt.second_moment.emplace(n, random_tensor<float>(v->shape(), rng, 0, 1));
  }
  auto ck = make_checkpoint(p, cfg, 17, opt);
  ck.metadata = {{"note", "x"}};
  const auto dir = temp_dir("roundtrip");
  save_checkpoint(dir / "a.ckpt", ck);
  EXPECT_FALSE(fs::exists(dir / "a.ckpt.tmp"));

  auto back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back.step, 17);
  EXPECT_EQ(back.metadata, ck.metadata);
  EXPECT_EQ(to_json(back.config), to_json(cfg));
  EXPECT_EQ(back.parameters, ck.parameters);
  EXPECT_EQ(back.buffers, ck.buffers);
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->step, 17);
  EXPECT_EQ(back.optimizer->first_moment, opt.first_moment);
  EXPECT_EQ(back.optimizer->second_moment, opt.second_moment);

  auto q = params_from_checkpoint(back);
  auto qn = q.named_parameters(back.config);
  ASSERT_EQ(qn.size(), named.size());
  for (std::size_t i = 0; i < qn.size(); ++i) {
    EXPECT_EQ(qn[i].first, named[i].first);
    EXPECT_EQ(qn[i].second->value(), named[i].second->value());
  }
}

TEST(Checkpoint, TruncatedFileIsCorrupt) {
  const auto cfg = ModelConfig::tiny();
  GcnetParams<float> p(cfg);
  const auto dir = temp_dir("truncated");
  save_checkpoint(dir / "a.ckpt", make_checkpoint(p, cfg));
  const auto size = fs::file_size(dir / "a.ckpt");
  for (auto keep : {size - 1, size / 2, std::uintmax_t{10}}) {
    fs::copy_file(dir / "a.ckpt", dir / "b.ckpt", fs::copy_options::overwrite_existing);
    fs::resize_file(dir / "b.ckpt", keep);
    EXPECT_THROW(load_checkpoint(dir / "b.ckpt"), CorruptCheckpointError) << keep;
  }
  {
    std::ofstream os(dir / "c.ckpt", std::ios::binary);
    os << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(dir / "c.ckpt"), CorruptCheckpointError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Checkpoint, UnknownSchemaVersionIsRejected) {
  const auto cfg = ModelConfig::tiny();
  GcnetParams<float> p(cfg);
  const auto dir = temp_dir("version");
  save_checkpoint(dir / "a.ckpt", make_checkpoint(p, cfg));
  {
    std::fstream f(dir / "a.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const char v2[4] = {2, 0, 0, 0};
    f.write(v2, 4);
  }
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt"), CheckpointVersionError);
}

TEST(Checkpoint, WidthMismatchIsAShapeError) {
  ModelConfig c128;
  c128.channels = 128;
  c128.stage_channels = {32, 64, 128, 128};
  GcnetParams<float> small(c128);
  const auto dir = temp_dir("shape");
  save_checkpoint(dir / "c128.ckpt", make_checkpoint(small, c128));
  const ModelConfig c256;
  GcnetParams<float> big(c256);
  EXPECT_THROW(restore_params(load_checkpoint(dir / "c128.ckpt"), big, c256), CheckpointShapeError);
}
