#include <gtest/gtest.h>

#include <numeric>

#include "helpers.hpp"
#include "tudp/evaluation.hpp"
#include "tudp/training.hpp"

namespace tudp {
namespace {

using test::vec;

TrainConfig small_cfg(std::int64_t steps, std::uint64_t seed = 3) {
  TrainConfig c;
  c.hidden = {48, 48};
  c.base_lr = 2e-3;
  c.total_steps = steps;
  c.seed = seed;
  return c;
}

TaskSuite suite_of(int k_min, int k_max, double s_min, int scenes = 4, std::uint64_t seed = 7) {
  SuiteConfig c;
  c.k_min = k_min;
  c.k_max = k_max;
  c.s_min = s_min;
  c.num_scenes = scenes;
  return generate_suite(c, seed);
}

std::string ckpt_text(const TrainedNet& n, const std::string& kind) { return checkpoint_json(n, kind).dump(); }

TEST(ScalarLosses, Examples) {
  EXPECT_EQ(score_loss(0.3, 0.3, LossNorm::squared), 0.0);
  EXPECT_DOUBLE_EQ(score_loss(0.5, 1.0, LossNorm::squared), 0.25);
  EXPECT_DOUBLE_EQ(score_loss(0.5, 1.0, LossNorm::unsquared), 0.5);

  EXPECT_NEAR(open_loss(0.5, 1.0), 0.6931471805599453, 1e-15);
  EXPECT_NEAR(open_loss(0.9, 0.0), 2.3025850929940455, 1e-14);
  EXPECT_LT(open_loss(1.0 - 1e-9, 1.0), 1e-6);

  EXPECT_EQ(action_loss(vec({0.1, 0.2}), vec({0.1, 0.2}), LossNorm::squared), 0.0);
  EXPECT_DOUBLE_EQ(action_loss(vec({0, 0, 0}), vec({0.3, 0.4, 0}), LossNorm::squared), 0.25);
  EXPECT_DOUBLE_EQ(action_loss(vec({0, 0, 0}), vec({0.3, 0.4, 0}), LossNorm::unsquared), 0.5);
  // lambda = 0 makes the target zero; any predicted motion is penalized.
  EXPECT_GT(action_loss(vec({0.01, 0}), 0.0 * vec({0.3, 0.4}), LossNorm::squared), 0.0);
  EXPECT_THROW(action_loss(vec({0}), vec({0, 0}), LossNorm::squared), ConfigError);

  EXPECT_EQ(noise_loss(0.7, 0.0, 0.4), 0.7);
  EXPECT_DOUBLE_EQ(noise_loss(1.0, 0.5, 0.4), 1.2);
  EXPECT_EQ(noise_loss(0.7, 3.0, 0.0), 0.7);
}

TEST(ApproxCorrelationWeight, Examples) {
  const Vec y = vec({0, 0});
  EXPECT_EQ(approx_correlation_weight_from_score(1.0, y, vec({0.5, 0}), 0.1), 0.0);
  EXPECT_EQ(approx_correlation_weight_from_score(0.0, y, vec({0.5, 0}), 0.1), 1.0);
  EXPECT_EQ(approx_correlation_weight_from_score(0.0, y, vec({0.05, 0}), 0.1), 1.0);
  EXPECT_EQ(approx_correlation_weight_from_score(1.0, y, vec({0.05, 0}), 0.1, false), 2.0);
  EXPECT_EQ(approx_correlation_weight_from_score(1.0, y, vec({0.05, 0}), 0.1, true), 1.0);
  // Boundary: sgn(0) = 0.
  EXPECT_EQ(approx_correlation_weight_from_score(0.8, y, vec({0.1, 0}), 0.1), 1.0);
  EXPECT_DOUBLE_EQ(approx_correlation_weight_from_score(0.25, y, vec({0.5, 0}), 0.1), 0.75);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.total_steps = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(InputNorm, UsesTrainScenesAndSamplingSpread) {
  const TaskSuite suite = suite_of(1, 3, 0.25);
  const InputNorm n = detail::suite_input_norm(suite, 0.5);
  const Eigen::Index c = suite.context_dim();
  ASSERT_EQ(n.mean.size(), c + 2);
  for (Eigen::Index j = 0; j < n.scale.size(); ++j) EXPECT_GT(n.scale(j), 0.0);
  // y spread includes the sampling noise.
  EXPECT_GE(n.scale(c), 0.5);
}

TEST(ScoreTraining, ZeroStepsLeavesInitialization) {
  const TaskSuite suite = suite_of(1, 2, 0.25);
  ScoreNet net = init_score_net(suite, {}, small_cfg(100));
  const std::string before = ckpt_text(net, "score");
  continue_score_training(net, suite, 0);
  EXPECT_EQ(net.step, 0);
  EXPECT_TRUE(net.log.empty());
  EXPECT_EQ(ckpt_text(net, "score"), before);
}

TEST(ScoreTraining, SameSeedSameCheckpoint) {
  const TaskSuite suite = suite_of(1, 3, 0.25);
  const auto a = train_score(suite, {}, small_cfg(150));
  const auto b = train_score(suite, {}, small_cfg(150));
  EXPECT_EQ(ckpt_text(a, "score"), ckpt_text(b, "score"));
  const auto c = train_score(suite, {}, small_cfg(150, 4));
  EXPECT_NE(ckpt_text(a, "score"), ckpt_text(c, "score"));
  for (const auto& r : a.log) EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_EQ(a.log.size(), 150u);
  EXPECT_EQ(a.log.back().step, 150);
}

TEST(ScoreTraining, ScoresStayInUnitInterval) {
  const TaskSuite suite = suite_of(1, 3, 0.25);
  const auto net = train_score(suite, {}, small_cfg(200));
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const double s = net.score(suite.scenes[0].context, vec({3 * draw_normal(rng), 3 * draw_normal(rng)}));
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
}

TEST(Resume, ScoreCheckpointContinuesBitExactly) {
  const TaskSuite suite = suite_of(1, 3, 0.25);
  const auto straight = train_score(suite, {}, small_cfg(200));
  ScoreNet half = init_score_net(suite, {}, small_cfg(200));
  continue_score_training(half, suite, 90);
  ScoreNet resumed = score_net_from_json(nlohmann::json::parse(ckpt_text(half, "score")));
  EXPECT_EQ(resumed.step, 90);
  continue_score_training(resumed, suite, 200);
  EXPECT_EQ(ckpt_text(resumed, "score"), ckpt_text(straight, "score"));
}

TEST(Resume, DiffusionCheckpointContinuesBitExactly) {
  const TaskSuite suite = suite_of(2, 3, 0.25);
  const auto score = train_score(suite, {}, small_cfg(100));
  const auto straight = train_diffusion(suite, &score, {}, small_cfg(160));
  DiffusionNet half = init_diffusion_net(suite, {}, small_cfg(160));
  continue_diffusion_training(half, suite, &score, 77);
  DiffusionNet resumed = diffusion_net_from_json(nlohmann::json::parse(ckpt_text(half, "diffusion")));
  continue_diffusion_training(resumed, suite, &score, 160);
  EXPECT_EQ(ckpt_text(resumed, "diffusion"), ckpt_text(straight, "diffusion"));
}

TEST(Checkpoint, CarriesFormatFields) {
  const TaskSuite suite = suite_of(1, 2, 0.25);
  const auto j = checkpoint_json(init_score_net(suite, {}, small_cfg(10)), "score");
  for (const char* key : {"format_version", "layer_dims", "activation", "heads", "weights", "biases", "normalization",
                          "train_config", "rng_seed", "suite_signature", "field_params", "step", "adam"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_THROW(diffusion_net_from_json(j), ConfigError);
  auto bad = j;
  bad["format_version"] = 99;
  EXPECT_THROW(score_net_from_json(bad), ConfigError);
}

TEST(Checkpoint, UncappedVelocityRoundTrips) {
  const TaskSuite suite = suite_of(1, 2, 0.25);
  FieldParams p;
  p.v = std::numeric_limits<double>::infinity();
  const auto net = init_diffusion_net(suite, p, small_cfg(10));
  const auto back = diffusion_net_from_json(nlohmann::json::parse(ckpt_text(net, "diffusion")));
  EXPECT_TRUE(std::isinf(back.field.v));
}

TEST(PhaseOrdering, RefusesScoreNetFromAnotherSuite) {
  const TaskSuite a = suite_of(1, 3, 0.25, 4, 7);
  const TaskSuite b = suite_of(1, 3, 0.25, 4, 8);
  const auto score = train_score(a, {}, small_cfg(5));
  EXPECT_THROW(train_diffusion(b, &score, {}, small_cfg(5)), ConfigError);
  EXPECT_THROW(train_diffusion(a, nullptr, {}, small_cfg(5)), ConfigError);
}

TEST(PhaseOrdering, RefusesMismatchedDimension) {
  const TaskSuite a = suite_of(1, 3, 0.25);
  SuiteConfig c3;
  c3.d = 3;
  const TaskSuite b = generate_suite(c3, 7);
  ScoreNet net = init_score_net(a, {}, small_cfg(5));
  EXPECT_THROW(continue_score_training(net, b, 5), ConfigError);
}

TEST(DiffusionTraining, LossDecreasesOverTraining) {
  const TaskSuite suite = suite_of(1, 3, 0.6);
  TrainConfig cfg = small_cfg(4000);
  cfg.lambda_mode = LambdaMode::oracle;
  const auto net = train_diffusion(suite, nullptr, {}, cfg);
  ASSERT_EQ(net.log.size(), 4000u);
  auto mean = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 1000; ++i) s += net.log[i].loss;
    return s / 1000;
  };
  EXPECT_LT(mean(3000), mean(0));
  for (const auto& r : net.log) ASSERT_TRUE(std::isfinite(r.loss));
  EXPECT_TRUE(net.params.finite());
}

HeatmapGrid trained_grid(const DiffusionNet& net, const Scene& s) {
  return field_heatmap(FieldSource::trained, s, net.field, &net, SliceSpec{}, 21);
}

TEST(DiffusionTraining, SingleModeLambdaSourcesAgree) {
  // With one mode the exact gate is identically 1; the score-derived gate
  // only departs from 1 in a thin shell just outside l.
  const TaskSuite suite = suite_of(1, 1, 0.25, 3);
  TrainConfig cfg = small_cfg(3000);
  const auto score = train_score(suite, {}, cfg);
  const auto with_score = train_diffusion(suite, &score, {}, cfg);
  cfg.lambda_mode = LambdaMode::oracle;
  const auto with_oracle = train_diffusion(suite, nullptr, {}, cfg);
  for (const auto& s : suite.scenes) {
    const auto oracle = field_heatmap(FieldSource::oracle_unified, s, {}, nullptr, SliceSpec{}, 21);
    const double a = grid_rms(trained_grid(with_score, s), oracle);
    const double b = grid_rms(trained_grid(with_oracle, s), oracle);
    EXPECT_LT(std::abs(a - b), 0.03) << "scene " << s.id << " score " << a << " oracle " << b;
    EXPECT_LT(grid_rms(trained_grid(with_score, s), trained_grid(with_oracle, s)), 0.05);
  }
}

TEST(DiffusionTraining, UngatedTrainingLeavesLargerBiasAtModes) {
  const TaskSuite suite = suite_of(2, 4, 0.25, 4, 11);
  TrainConfig cfg = small_cfg(3000);
  cfg.lambda_mode = LambdaMode::oracle;
  const auto gated = train_diffusion(suite, nullptr, {}, cfg);
  cfg.lambda_mode = LambdaMode::one;
  const auto ungated = train_diffusion(suite, nullptr, {}, cfg);
  double bias_gated = 0, bias_ungated = 0;
  for (const auto& s : suite.scenes)
    for (const auto& m : s.modes) {
      bias_gated += gated.noise(s.context, m.pos).norm();
      bias_ungated += ungated.noise(s.context, m.pos).norm();
    }
  EXPECT_GT(bias_ungated, bias_gated);
}

TEST(DiffusionTraining, OpenHeadLearnsLabelBits) {
  const TaskSuite suite = suite_of(1, 3, 0.6);
  TrainConfig cfg = small_cfg(3000);
  cfg.lambda_mode = LambdaMode::oracle;
  const auto net = train_diffusion(suite, nullptr, {}, cfg);
  for (const auto& s : suite.scenes)
    for (const auto& m : s.modes) EXPECT_EQ(net.open(s.context, m.pos) > 0.5, m.open > 0.5);
}

}  // namespace
}  // namespace tudp
