#pragma once

// Two-phase action-wise training. Phase 1 fits the action score network to
// the neighborhood score label; phase 2 fits the unified diffusion network to
// correlation-weighted capped velocities plus the gripper-open head.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tudp/actionspace.hpp"
#include "tudp/neuralnet.hpp"
#include "tudp/oracle_field.hpp"

namespace tudp {

enum class LossNorm { squared, unsquared };

/// Where phase 2 gets its correlation weights from.
enum class LambdaMode {
  score_net,  // approximated from the trained score network
  oracle,     // exact 0/1 weight from the ground-truth modes
  one,        // fixed at 1: action-wise weighting disabled
};

inline const char* to_string(LossNorm n) { return n == LossNorm::squared ? "squared" : "unsquared"; }
inline LossNorm loss_norm_from_string(const std::string& s) {
  if (s == "squared") return LossNorm::squared;
  if (s == "unsquared") return LossNorm::unsquared;
  throw ConfigError("unknown loss norm '" + s + "'");
}

inline const char* to_string(LambdaMode m) {
  switch (m) {
    case LambdaMode::score_net: return "score";
    case LambdaMode::oracle: return "oracle";
    case LambdaMode::one: return "one";
  }
  return "?";
}
inline LambdaMode lambda_mode_from_string(const std::string& s) {
  if (s == "score") return LambdaMode::score_net;
  if (s == "oracle") return LambdaMode::oracle;
  if (s == "one") return LambdaMode::one;
  throw ConfigError("unknown lambda mode '" + s + "'");
}

inline const char* to_string(MergeForm f) { return f == MergeForm::posterior ? "posterior" : "literal"; }
inline MergeForm merge_form_from_string(const std::string& s) {
  if (s == "posterior") return MergeForm::posterior;
  if (s == "literal") return MergeForm::literal;
  throw ConfigError("unknown field form '" + s + "'");
}

struct TrainConfig {
  int batch_size = 32;
  double base_lr = 1e-4;
  std::int64_t total_steps = 40000;
  std::uint64_t seed = 0;
  LossNorm norm = LossNorm::squared;
  std::vector<int> hidden{256, 256, 256};
  Activation activation = Activation::relu;
  double w_open = 0.4;
  LambdaMode lambda_mode = LambdaMode::score_net;
  bool clamp_lambda = true;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (total_steps < 1) throw ConfigError("train.total_steps must be >= 1");
    if (!(base_lr >= 0)) throw ConfigError("train.base_lr must be >= 0");
    if (hidden.empty()) throw ConfigError("train.hidden must list at least one width");
    for (int h : hidden)
      if (h < 1) throw ConfigError("train.hidden widths must be >= 1");
    if (!(w_open >= 0)) throw ConfigError("train.w_open must be >= 0");
  }
};

struct LossRecord {
  std::int64_t step = 0;
  double lr = 0;
  double loss = 0;
  double wall_ms = 0;
};

/// Parameters plus everything needed to resume training bit-exactly.
struct TrainedNet {
  MlpParams params;
  AdamState adam;
  std::int64_t step = 0;
  TrainConfig config;
  FieldParams field;
  std::uint64_t suite_signature = 0;
  int d = 0;
  std::vector<LossRecord> log;  // records of the current process only
};

/// Action score network: input [context, y], one sigmoid head "score".
struct ScoreNet : TrainedNet {
  double score(const Vec& context, const Vec& y) const;
};

/// Unified diffusion network: input [context, y], heads "noise" (width d,
/// linear) and "open" (width 1, sigmoid).
struct DiffusionNet : TrainedNet {
  Vec noise(const Vec& context, const Vec& y) const;
  double open(const Vec& context, const Vec& y) const;
};

// ---- scalar losses ----------------------------------------------------------

inline double score_loss(double pred, double target, LossNorm norm) {
  const double e = pred - target;
  return norm == LossNorm::squared ? e * e : std::abs(e);
}

/// Binary cross entropy; prediction clamped to [1e-7, 1 - 1e-7].
inline double open_loss(double pred_open, double label_open) { return bce(pred_open, label_open); }

inline double action_loss(const Vec& net_noise, const Vec& target_noise, LossNorm norm) {
  if (net_noise.size() != target_noise.size()) throw ConfigError("action_loss: dimension mismatch");
  const double sq = (net_noise - target_noise).squaredNorm();
  return norm == LossNorm::squared ? sq : std::sqrt(sq);
}

inline double noise_loss(double action_term, double open_term, double w_open) {
  return action_term + w_open * open_term;
}

/// 1 - s * sgn(|y_hat - y| - l), with sgn(0) = 0, clamped to [0, 1] unless
/// `clamp` is false.
inline double approx_correlation_weight_from_score(double s, const Vec& y, const Vec& y_hat, double l,
                                                   bool clamp = true) {
  const double r = (y_hat - y).norm() - l;
  const double sgn = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
  const double lam = 1.0 - s * sgn;
  return clamp ? std::clamp(lam, 0.0, 1.0) : lam;
}

inline Vec stack_input(const Vec& context, const Vec& y) {
  Vec in(context.size() + y.size());
  in << context, y;
  return in;
}

inline double ScoreNet::score(const Vec& context, const Vec& y) const {
  return forward(params, stack_input(context, y))(params.head("score").offset);
}

inline Vec DiffusionNet::noise(const Vec& context, const Vec& y) const {
  const auto& h = params.head("noise");
  return forward(params, stack_input(context, y)).segment(h.offset, h.width);
}

inline double DiffusionNet::open(const Vec& context, const Vec& y) const {
  return forward(params, stack_input(context, y))(params.head("open").offset);
}

inline double approx_correlation_weight(const ScoreNet& net, const Vec& context, const Vec& y, const Vec& y_hat,
                                        double l, bool clamp = true) {
  return approx_correlation_weight_from_score(net.score(context, y), y, y_hat, l, clamp);
}

// ---- training ---------------------------------------------------------------

namespace detail {

inline constexpr std::uint64_t kScorePhase = 0x73636f7265ULL;
inline constexpr std::uint64_t kDiffusionPhase = 0x6469666675ULL;
inline constexpr std::uint64_t kBaselinePhase = 0x626173656cULL;
inline constexpr std::uint64_t kInitTag = 0x696e6974ULL;

inline std::vector<const Scene*> train_scenes(const TaskSuite& suite) {
  auto scenes = suite.split(Split::train);
  if (scenes.empty()) throw ConfigError("suite has no train split");
  return scenes;
}

/// Context statistics from the train scenes; y statistics from the
/// demonstration distribution (uniform scene, uniform mode) widened by the
/// sampling noise.
inline InputNorm suite_input_norm(const TaskSuite& suite, double sigma, int extra_dims = 0) {
  const auto scenes = train_scenes(suite);
  const Eigen::Index c = suite.context_dim();
  const int d = suite.d();
  Vec cmean = Vec::Zero(c), csq = Vec::Zero(c), ymean = Vec::Zero(d), ysq = Vec::Zero(d);
  for (const Scene* s : scenes) {
    cmean += s->context;
    csq += s->context.cwiseProduct(s->context);
    Vec m = Vec::Zero(d), m2 = Vec::Zero(d);
    for (const auto& a : s->modes) {
      m += a.pos;
      m2 += a.pos.cwiseProduct(a.pos);
    }
    ymean += m / s->k();
    ysq += m2 / s->k();
  }
  const double n = static_cast<double>(scenes.size());
  cmean /= n;
  ymean /= n;
  Vec cvar = (csq / n - cmean.cwiseProduct(cmean)).cwiseMax(0.0);
  Vec yvar = (ysq / n - ymean.cwiseProduct(ymean)).cwiseMax(0.0).array() + sigma * sigma;
  InputNorm norm;
  norm.mean = Vec::Zero(c + d + extra_dims);
  norm.scale = Vec::Ones(c + d + extra_dims);
  norm.mean.head(c) = cmean;
  norm.mean.segment(c, d) = ymean;
  for (Eigen::Index i = 0; i < c; ++i) norm.scale(i) = cvar(i) > 1e-12 ? std::sqrt(cvar(i)) : 1.0;
  for (int i = 0; i < d; ++i) norm.scale(c + i) = std::sqrt(yvar(i));
  return norm;
}

/// Runs optimizer steps [net.step, until). Each step draws from its own
/// stream keyed by (seed, phase, step), so stopping and resuming reproduces
/// an uninterrupted run.
template <class MakeBatch>
void run_steps(TrainedNet& net, std::uint64_t phase, std::int64_t until, const LossSpec& spec,
               MakeBatch&& make_batch) {
  until = std::min(until, net.config.total_steps);
  using clock = std::chrono::steady_clock;
  for (; net.step < until; ++net.step) {
    const auto t0 = clock::now();
    Rng rng = derive_rng(net.config.seed, {phase, static_cast<std::uint64_t>(net.step)});
    const Batch batch = make_batch(rng);
    const double lr = cosine_lr(net.step, net.config.total_steps, net.config.base_lr);
    const Gradients g = grad(net.params, batch, spec);
    adam_step(net.params, g, net.adam, lr);
    const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    net.log.push_back({net.step + 1, lr, g.loss, ms});
  }
}

inline LossKind action_loss_kind(LossNorm n) { return n == LossNorm::squared ? LossKind::l2_squared : LossKind::l2; }

}  // namespace detail

inline ScoreNet init_score_net(const TaskSuite& suite, const FieldParams& p, const TrainConfig& cfg) {
  p.validate();
  cfg.validate();
  ScoreNet net;
  net.config = cfg;
  net.field = p;
  net.suite_signature = suite.signature();
  net.d = suite.d();
  Rng rng = derive_rng(cfg.seed, {detail::kScorePhase, detail::kInitTag});
  net.params = make_mlp(suite.context_dim() + suite.d(), cfg.hidden, {{"score", 0, 1, HeadKind::sigmoid}},
                        cfg.activation, rng);
  net.params.norm = detail::suite_input_norm(suite, p.sigma);
  net.adam = AdamState::like(net.params);
  return net;
}

inline void check_suite(const TrainedNet& net, const TaskSuite& suite) {
  if (net.d != suite.d()) throw ConfigError("checkpoint action dimension does not match suite");
  if (net.suite_signature != suite.signature())
    throw ConfigError("checkpoint was trained on a different suite (signature " + hex64(net.suite_signature) +
                      ", suite " + hex64(suite.signature()) + ")");
}

/// Phase 1 from the net's current step up to `until` (clipped to total_steps).
inline void continue_score_training(ScoreNet& net, const TaskSuite& suite, std::int64_t until) {
  check_suite(net, suite);
  const auto scenes = detail::train_scenes(suite);
  const FieldParams p = net.field;
  const int d = suite.d();
  const Eigen::Index c = suite.context_dim();
  const int bs = net.config.batch_size;
  const LossSpec spec{{"score", detail::action_loss_kind(net.config.norm), 1.0}};
  detail::run_steps(net, detail::kScorePhase, until, spec, [&](Rng& rng) {
    Batch b;
    b.inputs.resize(c + d, bs);
    b.targets.resize(1, bs);
    for (int i = 0; i < bs; ++i) {
      const Scene& s = *scenes[std::uniform_int_distribution<std::size_t>(0, scenes.size() - 1)(rng)];
      const Demonstration demo = sample_demonstration(s, rng);
      const Action y = sample_noisy_action(demo.label, p.sigma, rng);
      b.inputs.col(i) << s.context, y.pos;
      b.targets(0, i) = score_label(y.pos, demo.label.pos, p.l, p.m_exp);
    }
    return b;
  });
}

inline ScoreNet train_score(const TaskSuite& suite, const FieldParams& p, const TrainConfig& cfg) {
  ScoreNet net = init_score_net(suite, p, cfg);
  continue_score_training(net, suite, cfg.total_steps);
  return net;
}

inline DiffusionNet init_diffusion_net(const TaskSuite& suite, const FieldParams& p, const TrainConfig& cfg) {
  p.validate();
  cfg.validate();
  DiffusionNet net;
  net.config = cfg;
  net.field = p;
  net.suite_signature = suite.signature();
  net.d = suite.d();
  Rng rng = derive_rng(cfg.seed, {detail::kDiffusionPhase, detail::kInitTag});
  const int d = suite.d();
  net.params = make_mlp(suite.context_dim() + d, cfg.hidden,
                        {{"noise", 0, d, HeadKind::linear}, {"open", d, 1, HeadKind::sigmoid}}, cfg.activation, rng);
  net.params.norm = detail::suite_input_norm(suite, p.sigma);
  net.adam = AdamState::like(net.params);
  return net;
}

/// Phase 2 from the net's current step up to `until`. `score` may be null
/// only when the config's lambda mode does not need it.
inline void continue_diffusion_training(DiffusionNet& net, const TaskSuite& suite, const ScoreNet* score,
                                        std::int64_t until) {
  check_suite(net, suite);
  const LambdaMode mode = net.config.lambda_mode;
  if (mode == LambdaMode::score_net) {
    if (score == nullptr) throw ConfigError("phase 2 needs a trained score network (or an oracle lambda mode)");
    check_suite(*score, suite);
  }
  const auto scenes = detail::train_scenes(suite);
  const FieldParams p = net.field;
  const int d = suite.d();
  const Eigen::Index c = suite.context_dim();
  const int bs = net.config.batch_size;
  const bool clamp = net.config.clamp_lambda;
  const LossSpec spec{{"noise", detail::action_loss_kind(net.config.norm), 1.0},
                      {"open", LossKind::bce, net.config.w_open}};
  detail::run_steps(net, detail::kDiffusionPhase, until, spec, [&](Rng& rng) {
    Batch b;
    b.inputs.resize(c + d, bs);
    b.targets.resize(d + 1, bs);
    std::vector<const Scene*> picked(static_cast<std::size_t>(bs));
    std::vector<std::size_t> label_idx(static_cast<std::size_t>(bs));
    for (int i = 0; i < bs; ++i) {
      const Scene& s = *scenes[std::uniform_int_distribution<std::size_t>(0, scenes.size() - 1)(rng)];
      const std::size_t li = sample_mode_index(s, rng);
      const Action y = sample_noisy_action(s.modes[li], p.sigma, rng);
      b.inputs.col(i) << s.context, y.pos;
      picked[static_cast<std::size_t>(i)] = &s;
      label_idx[static_cast<std::size_t>(i)] = li;
    }
    Mat scores;
    if (mode == LambdaMode::score_net) scores = forward(score->params, b.inputs);
    const Eigen::Index score_row = mode == LambdaMode::score_net ? score->params.head("score").offset : 0;
    for (int i = 0; i < bs; ++i) {
      const Scene& s = *picked[static_cast<std::size_t>(i)];
      const Action& label = s.modes[label_idx[static_cast<std::size_t>(i)]];
      const Vec y = b.inputs.col(i).tail(d);
      double lam = 1.0;
      if (mode == LambdaMode::score_net)
        lam = approx_correlation_weight_from_score(scores(score_row, i), y, label.pos, p.l, clamp);
      else if (mode == LambdaMode::oracle)
        lam = correlation_weight(y, label_idx[static_cast<std::size_t>(i)], s.modes, p.l);
      b.targets.col(i).head(d) = lam * conditional_velocity(y, label.pos, p.v);
      b.targets(d, i) = label.open;
    }
    return b;
  });
}

inline DiffusionNet train_diffusion(const TaskSuite& suite, const ScoreNet* score, const FieldParams& p,
                                    const TrainConfig& cfg) {
  DiffusionNet net = init_diffusion_net(suite, p, cfg);
  continue_diffusion_training(net, suite, score, cfg.total_steps);
  return net;
}

// ---- checkpoints ------------------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"base_lr", c.base_lr},     {"total_steps", c.total_steps},
          {"seed", c.seed},             {"norm", to_string(c.norm)}, {"hidden", c.hidden},
          {"activation", to_string(c.activation)}, {"w_open", c.w_open},
          {"lambda_mode", to_string(c.lambda_mode)}, {"clamp_lambda", c.clamp_lambda}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.base_lr = j.at("base_lr").get<double>();
  c.total_steps = j.at("total_steps").get<std::int64_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.norm = loss_norm_from_string(j.at("norm").get<std::string>());
  c.hidden = j.at("hidden").get<std::vector<int>>();
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.w_open = j.at("w_open").get<double>();
  c.lambda_mode = lambda_mode_from_string(j.at("lambda_mode").get<std::string>());
  c.clamp_lambda = j.at("clamp_lambda").get<bool>();
  return c;
}

inline nlohmann::json to_json(const FieldParams& p) {
  return {{"v", p.v}, {"l", p.l}, {"sigma", p.sigma}, {"m_exp", p.m_exp}, {"form", to_string(p.form)}};
}

inline FieldParams field_params_from_json(const nlohmann::json& j) {
  FieldParams p;
  // JSON has no infinity; an uncapped field is stored as null.
  p.v = j.at("v").is_null() ? std::numeric_limits<double>::infinity() : j.at("v").get<double>();
  p.l = j.at("l").get<double>();
  p.sigma = j.at("sigma").get<double>();
  p.m_exp = j.at("m_exp").get<double>();
  p.form = merge_form_from_string(j.at("form").get<std::string>());
  return p;
}

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_json(const TrainedNet& net, const std::string& kind) {
  nlohmann::json j = to_json(net.params);
  j["format_version"] = kCheckpointVersion;
  j["kind"] = kind;
  j["train_config"] = to_json(net.config);
  j["rng_seed"] = net.config.seed;
  j["field_params"] = to_json(net.field);
  if (std::isinf(net.field.v)) j["field_params"]["v"] = nullptr;
  j["suite_signature"] = hex64(net.suite_signature);
  j["action_dim"] = net.d;
  j["step"] = net.step;
  j["adam"] = to_json(net.adam);
  return j;
}

inline void load_checkpoint_into(TrainedNet& net, const nlohmann::json& j, const std::string& kind) {
  try {
    if (j.at("format_version").get<int>() != kCheckpointVersion)
      throw ConfigError("unsupported checkpoint format_version");
    if (j.at("kind").get<std::string>() != kind)
      throw ConfigError("expected a '" + kind + "' checkpoint, got '" + j.at("kind").get<std::string>() + "'");
    net.params = mlp_from_json(j);
    net.config = train_config_from_json(j.at("train_config"));
    net.field = field_params_from_json(j.at("field_params"));
    net.suite_signature = std::stoull(j.at("suite_signature").get<std::string>(), nullptr, 16);
    net.d = j.at("action_dim").get<int>();
    net.step = j.at("step").get<std::int64_t>();
    net.adam = adam_from_json(j.at("adam"), net.params);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline ScoreNet score_net_from_json(const nlohmann::json& j) {
  ScoreNet n;
  load_checkpoint_into(n, j, "score");
  return n;
}

inline DiffusionNet diffusion_net_from_json(const nlohmann::json& j) {
  DiffusionNet n;
  load_checkpoint_into(n, j, "diffusion");
  return n;
}

}  // namespace tudp
