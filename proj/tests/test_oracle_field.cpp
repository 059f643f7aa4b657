#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "tudp/checks.hpp"
#include "tudp/denoiser.hpp"
#include "tudp/oracle_field.hpp"

namespace tudp {
namespace {

using test::scene_of;
using test::vec;

// Reference values below come from a separate arbitrary-precision script.
constexpr double kUnifiedAtHalf = -0.48201379003790845;
constexpr double kLiteralAtHalf = -0.11876943805360267;
constexpr double kTwoDx = 0.057943863950497428;
constexpr double kTwoDy = 0.18058017633631858;
constexpr double kBayesAtMode = 0.99966464987141242;

FieldParams params(MergeForm form = MergeForm::posterior) {
  FieldParams p;
  p.form = form;
  return p;
}

TEST(ConditionalVelocity, ZeroAtTarget) {
  EXPECT_EQ(conditional_velocity(vec({0.2, 0.1}), vec({0.2, 0.1}), 0.5), vec({0, 0}));
}

TEST(ConditionalVelocity, BoundaryIsExact) {
  const Vec e = conditional_velocity(vec({0.3, 0.4, 0}), vec({0, 0, 0}), 0.5);
  EXPECT_DOUBLE_EQ(e(0), 0.3);
  EXPECT_DOUBLE_EQ(e(1), 0.4);
  EXPECT_DOUBLE_EQ(e(2), 0.0);
}

TEST(ConditionalVelocity, CapsFarDisplacement) {
  const Vec e = conditional_velocity(vec({3, 4, 0}), vec({0, 0, 0}), 0.5);
  EXPECT_NEAR(e(0), 0.3, 1e-15);
  EXPECT_NEAR(e(1), 0.4, 1e-15);
  EXPECT_NEAR(e.norm(), 0.5, 1e-15);
}

TEST(ConditionalVelocity, UncappedWhenVIsInfinite) {
  const Vec e = conditional_velocity(vec({3, 4}), vec({0, 0}), std::numeric_limits<double>::infinity());
  EXPECT_EQ(e, vec({3, 4}));
}

TEST(ConditionalVelocity, MagnitudeNeverExceedsV) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Vec y = vec({draw_normal(rng), draw_normal(rng)}) * 2;
    const Vec t = vec({draw_normal(rng), draw_normal(rng)});
    const Vec e = conditional_velocity(y, t, 0.5);
    EXPECT_LE(e.norm(), 0.5 + 1e-15);
    if ((y - t).norm() <= 0.5) {
      EXPECT_EQ(e, y - t);
    }
  }
}

TEST(CorrelationWeight, Examples) {
  const Scene s = scene_of({vec({0, 0}), vec({1, 0})});
  EXPECT_EQ(correlation_weight(vec({0.05, 0}), 0, s.modes, 0.1), 1);
  EXPECT_EQ(correlation_weight(vec({0.95, 0}), 0, s.modes, 0.1), 0);
  // Closed ball: exactly l away still gates.
  EXPECT_EQ(correlation_weight(vec({0.9, 0}), 0, s.modes, 0.1), 0);
  const Scene one = scene_of({vec({0.3, 0.3})});
  EXPECT_EQ(correlation_weight(vec({0.3, 0.3}), 0, one.modes, 0.1), 1);
  EXPECT_EQ(correlation_weight(vec({-5, 9}), 0, one.modes, 0.1), 1);
}

TEST(UnifiedField, ZeroAtEveryModeBothForms) {
  const Scene s = scene_of({vec({-0.5, 0.2}), vec({0.4, 0.1}), vec({0.1, -0.8})});
  for (auto form : {MergeForm::posterior, MergeForm::literal})
    for (const auto& m : s.modes) EXPECT_EQ(unified_field(m.pos, s, params(form)).norm(), 0.0);
}

TEST(UnifiedField, SymmetricMidpointIsZero) {
  const Scene s = scene_of({vec({-1}), vec({1})});
  for (auto form : {MergeForm::posterior, MergeForm::literal}) {
    EXPECT_EQ(unified_field(vec({0}), s, params(form))(0), 0.0);
    EXPECT_EQ(unweighted_field(vec({0}), s, params(form))(0), 0.0);
  }
}

TEST(UnifiedField, PosteriorReferenceValue) {
  const Scene s = scene_of({vec({-1}), vec({1})});
  EXPECT_NEAR(unified_field(vec({0.5}), s, params())(0), kUnifiedAtHalf, 1e-14);
}

TEST(UnifiedField, LiteralReferenceValue) {
  const Scene s = scene_of({vec({-1}), vec({1})});
  EXPECT_NEAR(unified_field(vec({0.5}), s, params(MergeForm::literal))(0), kLiteralAtHalf, 1e-14);
}

TEST(UnifiedField, TwoDimensionalReferenceValue) {
  const Scene s = scene_of({vec({0, 0}), vec({1, 0})});
  const Vec e = unified_field(vec({0.3, 0.2}), s, params());
  EXPECT_NEAR(e(0), kTwoDx, 1e-14);
  EXPECT_NEAR(e(1), kTwoDy, 1e-14);
}

TEST(UnifiedField, UnderflowFallsBackPerForm) {
  const Scene s = scene_of({vec({-1, 0}), vec({1, 0})});
  const Vec far = vec({400, 3});
  const Vec post = unified_field(far, s, params());
  EXPECT_TRUE(post.allFinite());
  EXPECT_NEAR(post.norm(), 0.5, 1e-12);
  EXPECT_NEAR((post.normalized() - (far - s.modes[1].pos).normalized()).norm(), 0.0, 1e-12);
  EXPECT_EQ(unified_field(far, s, params(MergeForm::literal)).norm(), 0.0);
}

TEST(UnifiedField, PosteriorMagnitudeCappedByV) {
  const auto suite = generate_suite(SuiteConfig{}, 21);
  Rng rng(2);
  for (const auto& s : suite.scenes)
    for (int i = 0; i < 200; ++i) {
      const Vec y = vec({draw_uniform(rng, -2.5, 2.5), draw_uniform(rng, -2.5, 2.5)});
      EXPECT_LE(unified_field(y, s, params()).norm(), 0.5 + 1e-12);
      EXPECT_LE(unweighted_field(y, s, params()).norm(), 0.5 + 1e-12);
    }
}

TEST(UnifiedField, LiteralMagnitudeBoundedByPeakDensity) {
  const auto suite = generate_suite(SuiteConfig{}, 22);
  const FieldParams p = params(MergeForm::literal);
  const double peak = 1.0 / (2 * std::numbers::pi * p.sigma * p.sigma);
  Rng rng(3);
  for (const auto& s : suite.scenes)
    for (int i = 0; i < 200; ++i) {
      const Vec y = vec({draw_uniform(rng, -2.5, 2.5), draw_uniform(rng, -2.5, 2.5)});
      EXPECT_LE(unified_field(y, s, p).norm(), p.v * peak + 1e-12);
    }
}

TEST(UnifiedField, SingleModeDistanceShrinksByV) {
  const Scene s = scene_of({vec({0.2, -0.1})});
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const Vec y = s.modes[0].pos + vec({draw_normal(rng), draw_normal(rng)});
    const double before = (y - s.modes[0].pos).norm();
    const double after = (y - unified_field(y, s, params()) - s.modes[0].pos).norm();
    EXPECT_NEAR(after, std::max(0.0, before - 0.5), 1e-12);
  }
}

TEST(UnifiedField, ReflectionNegatesField) {
  const Scene s = scene_of({vec({-0.6, 0.3}), vec({0.5, 0.5}), vec({0.2, -0.7})});
  const Scene r = scene_of({vec({0.6, -0.3}), vec({-0.5, -0.5}), vec({-0.2, 0.7})});
  Rng rng(5);
  for (auto form : {MergeForm::posterior, MergeForm::literal})
    for (int i = 0; i < 100; ++i) {
      const Vec y = vec({draw_uniform(rng, -1.5, 1.5), draw_uniform(rng, -1.5, 1.5)});
      EXPECT_LE((unified_field(y, s, params(form)) + unified_field(-y, r, params(form))).norm(), 1e-13);
    }
}

TEST(UnweightedField, SingleModeEqualsConditionalVelocity) {
  const Scene s = scene_of({vec({0.1, 0.4})});
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    const Vec y = vec({draw_normal(rng), draw_normal(rng)});
    EXPECT_LE((unweighted_field(y, s, params()) - conditional_velocity(y, s.modes[0].pos, 0.5)).norm(), 1e-15);
  }
}

TEST(UnweightedField, BiasAtSymmetricModes) {
  const Scene s = scene_of({vec({-1}), vec({1})});
  EXPECT_NEAR(unweighted_field(vec({1}), s, params())(0), kSymmetricBias, 1e-15);
  EXPECT_NEAR(unweighted_field(vec({-1}), s, params())(0), -kSymmetricBias, 1e-15);
}

TEST(ScoreLabel, Examples) {
  EXPECT_EQ(score_label(vec({0.05}), vec({0}), 0.1, -10), 1.0);
  EXPECT_EQ(score_label(vec({0.1}), vec({0}), 0.1, -10), 1.0);
  EXPECT_NEAR(score_label(vec({0.2}), vec({0}), 0.1, -10), 0.36787944117144233, 1e-15);
  double prev = 1.0;
  for (double r = 0.11; r < 1.0; r += 0.05) {
    const double s = score_label(vec({r}), vec({0}), 0.1, -10);
    EXPECT_LT(s, prev);
    prev = s;
  }
}

TEST(BayesScore, FarSeparatedModeScoresNearOne) {
  const Scene s = scene_of({vec({-1}), vec({1})});
  FieldParams p = params();
  p.sigma = 0.3;
  EXPECT_GE(bayes_score(vec({1}), s, p), 0.999);
  EXPECT_NEAR(bayes_score(vec({1}), s, params()), kBayesAtMode, 1e-14);
}

TEST(BayesScore, SingleModeEqualsLabel) {
  const Scene s = scene_of({vec({0.3, 0.3})});
  for (double x : {-1.0, 0.0, 0.35, 0.9})
    EXPECT_DOUBLE_EQ(bayes_score(vec({x, 0.2}), s, params()), score_label(vec({x, 0.2}), s.modes[0].pos, 0.1, -10));
}

TEST(BayesScore, EquidistantPointUsesCommonLabel) {
  const Scene s = scene_of({vec({-1}), vec({1})});
  EXPECT_NEAR(bayes_score(vec({0}), s, params()), std::exp(-10 * 0.9), 1e-17);
}

TEST(FieldBiasReport, SymmetricPair) {
  const auto rep = field_bias_report(scene_of({vec({-1}), vec({1})}), params());
  ASSERT_EQ(rep.size(), 2u);
  for (const auto& b : rep) {
    EXPECT_EQ(b.unified, 0.0);
    EXPECT_NEAR(b.unweighted, kSymmetricBias, 1e-15);
  }
}

TEST(FieldBiasReport, SingleModeHasNoBias) {
  const auto rep = field_bias_report(scene_of({vec({0.2, 0.2})}), params());
  EXPECT_EQ(rep[0].unified, 0.0);
  EXPECT_EQ(rep[0].unweighted, 0.0);
}

TEST(FieldBiasReport, GeneratedScenes) {
  const auto suite = generate_suite(SuiteConfig{}, 23);
  for (const auto& s : suite.scenes)
    for (const auto& b : field_bias_report(s, params())) {
      EXPECT_EQ(b.unified, 0.0);
      if (s.k() >= 2) {
        EXPECT_GT(b.unweighted, 0.0);
      }
    }
}

TEST(FieldParams, Validation) {
  EXPECT_NO_THROW(params().validate());
  FieldParams p;
  p.l = 0.6;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.sigma = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.m_exp = -5;  // tolerated
  EXPECT_NO_THROW(p.validate());
}

TEST(CheckBattery, FreshBatteryPasses) {
  for (const auto& r : run_check_battery()) EXPECT_TRUE(r.passed) << r.name << " " << r.detail;
}

TEST(CheckBattery, SignFlippedVelocityFailsFixedPointScan) {
  const FieldFn flipped = [](const Vec& y, const Scene& s, const FieldParams& p) {
    return unified_field_with(y, s.modes, p, [](const Vec& a, const Vec& b, double v) {
      return Vec(-conditional_velocity(a, b, v));
    });
  };
  const auto scenes = scan_scenes(30, 0.25, 11);
  EXPECT_FALSE(check_fixed_points(scenes, FieldParams{}, flipped).passed);
  EXPECT_TRUE(check_fixed_points(scenes, FieldParams{}).passed);
}

TEST(CheckBattery, OneStepNeedsSeparation) {
  FieldParams p;
  p.sigma = 0.15;
  // Two modes only 0.3 apart: one step from the rim misses by far more than 1e-3.
  std::vector<Scene> close{scene_of({vec({0, 0}), vec({0.3, 0})})};
  EXPECT_FALSE(check_one_step(close, p, 200).passed);
}

}  // namespace
}  // namespace tudp
