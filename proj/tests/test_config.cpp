#include <gtest/gtest.h>

#include <sstream>

#include "tudp/config.hpp"

namespace tudp {
namespace {

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

TEST(RunConfig, DefaultsMatchDocumentedValues) {
  const RunConfig c;
  EXPECT_EQ(c.field.v, 0.5);
  EXPECT_EQ(c.field.l, 0.1);
  EXPECT_EQ(c.field.sigma, 0.5);
  EXPECT_EQ(c.field.m_exp, -10.0);
  EXPECT_EQ(c.field.form, MergeForm::posterior);
  EXPECT_EQ(c.eval.delta, 0.01);
  EXPECT_EQ(c.eval.N, 100);
  EXPECT_EQ(c.train.w_open, 0.4);
  EXPECT_EQ(c.train.batch_size, 32);
  EXPECT_EQ(c.train.base_lr, 1e-4);
  EXPECT_EQ(c.train.total_steps, 40000);
  EXPECT_EQ(c.baseline_T, 100);
  EXPECT_EQ(c.suite.s_min, 2 * c.field.l + 0.05);
  EXPECT_EQ(c.resolved_eval().tau, c.field.l);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, DumpParsesBackToSameConfig) {
  RunConfig c;
  c.field.v = std::numeric_limits<double>::infinity();
  c.train.hidden = {64, 32};
  c.tau = 0.25;
  c.eval.split = "train";
  const std::string text = dump_config(c, true);
  const RunConfig back = parse(text);
  EXPECT_EQ(dump_config(back), dump_config(c));
  EXPECT_TRUE(std::isinf(back.field.v));
  EXPECT_EQ(back.train.hidden, (std::vector<int>{64, 32}));
  EXPECT_EQ(back.resolved_eval().tau, 0.25);
}

TEST(RunConfig, EveryKeyIsDumped) {
  const std::string text = dump_config(RunConfig{});
  for (const char* key : {"suite.d", "suite.k_max", "suite.s_min", "suite.seed", "field.v", "field.l", "field.sigma",
                          "field.m_exp", "field.form", "train.batch_size", "train.base_lr", "train.total_steps",
                          "train.w_open", "train.norm", "baseline.T", "eval.N", "eval.delta", "eval.tau",
                          "eval.episodes_per_scene", "run.timing"})
    EXPECT_NE(text.find(std::string(key) + " = "), std::string::npos) << key;
}

TEST(RunConfig, CommentsAndBlankLines) {
  const RunConfig c = parse("# header\n\n  field.l = 0.2   # wider\nfield.sigma=0.25\n");
  EXPECT_EQ(c.field.l, 0.2);
  EXPECT_EQ(c.field.sigma, 0.25);
  EXPECT_EQ(c.resolved_eval().tau, 0.2);
}

TEST(RunConfig, UnknownKeyRejectedWithLine) {
  try {
    parse("field.l = 0.1\nfield.lambda = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("field.lambda"), std::string::npos);
  }
}

TEST(RunConfig, MalformedValuesRejected) {
  EXPECT_THROW(parse("field.l\n"), ConfigError);
  EXPECT_THROW(parse("field.l = abc\n"), ConfigError);
  EXPECT_THROW(parse("eval.N = 3.5\n"), ConfigError);
  EXPECT_THROW(parse("eval.early_termination = maybe\n"), ConfigError);
  EXPECT_THROW(parse("field.form = blend\n"), ConfigError);
  EXPECT_THROW(parse("train.hidden = 64,,x\n"), ConfigError);
  EXPECT_THROW(parse("suite.seed = -1\n"), ConfigError);
}

TEST(RunConfig, ValidationCatchesInconsistentValues) {
  EXPECT_THROW(parse("field.l = 0.7\n").validate(), ConfigError);
  EXPECT_THROW(parse("eval.episodes_per_scene = 0\n").validate(), ConfigError);
  EXPECT_THROW(parse("baseline.T = 0\n").validate(), ConfigError);
}

TEST(RunConfig, HashTracksContent) {
  RunConfig a, b;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.field.sigma = 0.25;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(RunConfig, SampleConfigsLoad) {
  for (const char* name : {"default", "smoke", "separated", "ablation"}) {
    const RunConfig c = load_config(std::string(TUDP_SOURCE_DIR) + "/configs/" + name + ".conf");
    EXPECT_NO_THROW(c.validate()) << name;
  }
  EXPECT_EQ(dump_config(load_config(std::string(TUDP_SOURCE_DIR) + "/configs/default.conf")), dump_config(RunConfig{}));
  EXPECT_THROW(load_config("/nonexistent/x.conf"), ConfigError);
}

}  // namespace
}  // namespace tudp
