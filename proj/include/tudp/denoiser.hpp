#pragma once

// Iterative denoising with a time-unified field (constant across iterations,
// early exit on small updates) and a time-varying DDPM/DDIM baseline for
// comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tudp/actionspace.hpp"
#include "tudp/neuralnet.hpp"
#include "tudp/oracle_field.hpp"
#include "tudp/training.hpp"

namespace tudp {

struct DenoiseOptions {
  int max_iterations = 100;  // N
  double delta = 0.01;
  bool early_termination = true;
};

struct DenoiseTrace {
  std::vector<Vec> iterates;   // y_0 ... y_n
  std::vector<double> dnorms;  // |y_{t+1} - y_t| per applied update
  int iterations_used = 0;
  bool terminated_early = false;
  Action final;
};

/// Non-finite iterate; carries the trace up to and including the bad step.
class DenoiseError : public NumericError {
 public:
  DenoiseError(const std::string& what, DenoiseTrace partial)
      : NumericError(what), trace(std::move(partial)) {}
  DenoiseTrace trace;
};

/// y_{t+1} = y_t - eps(y_t) for at most N updates, stopping after the first
/// update with |y_{t+1} - y_t| < delta when early termination is on. The
/// returned trace has final.pos set; final.open is left to the caller.
template <class Field>
DenoiseTrace iterate_field(Field&& eps, const Vec& y0, const DenoiseOptions& opt) {
  if (opt.max_iterations < 1) throw ConfigError("denoise: N must be >= 1");
  if (opt.early_termination && !(opt.delta > 0)) throw ConfigError("denoise: delta must be > 0");
  DenoiseTrace trace;
  trace.iterates.push_back(y0);
  for (int t = 0; t < opt.max_iterations; ++t) {
    const Vec& y = trace.iterates.back();
    Vec next = y - eps(y);
    const double dn = (next - y).norm();
    trace.iterates.push_back(std::move(next));
    trace.dnorms.push_back(dn);
    if (!trace.iterates.back().allFinite()) {
      trace.iterations_used = static_cast<int>(trace.dnorms.size());
      throw DenoiseError("denoise: non-finite iterate at update " + std::to_string(t + 1), trace);
    }
    if (opt.early_termination && dn < opt.delta) {
      trace.terminated_early = true;
      break;
    }
  }
  trace.iterations_used = static_cast<int>(trace.dnorms.size());
  trace.final.pos = trace.iterates.back();
  return trace;
}

/// Time-unified denoising with a trained network. The open state is read
/// once from the open head at the final position.
inline DenoiseTrace denoise(const DiffusionNet& net, const Vec& context, const Vec& y0, const DenoiseOptions& opt) {
  if (y0.size() != net.d) throw ConfigError("denoise: initial action dimension mismatch");
  auto trace = iterate_field([&](const Vec& y) { return net.noise(context, y); }, y0, opt);
  trace.final.open = net.open(context, trace.final.pos);
  return trace;
}

inline std::size_t nearest_mode(const Vec& y, std::span<const Action> modes) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < modes.size(); ++i) {
    const double dist = (y - modes[i].pos).norm();
    if (dist < best_d) {
      best_d = dist;
      best = i;
    }
  }
  return best;
}

/// Denoising under the closed-form unified field. The open state is the
/// open bit of the nearest mode.
inline DenoiseTrace denoise_oracle(const Scene& scene, const Vec& y0, const FieldParams& p, const DenoiseOptions& opt) {
  auto trace = iterate_field([&](const Vec& y) { return unified_field(y, scene, p); }, y0, opt);
  trace.final.open = scene.modes[nearest_mode(trace.final.pos, scene.modes)].open;
  return trace;
}

/// Standard normal initial action.
inline Vec sample_initial(Rng& rng, int d) {
  Vec y(d);
  for (int j = 0; j < d; ++j) y(j) = draw_normal(rng);
  return y;
}

// ---- time-varying baseline -------------------------------------------------

/// Cosine noise schedule. alpha_bar[t] for t = 0..T, alpha_bar[0] = 1 (clean)
/// and strictly decreasing.
struct BaselineSchedule {
  int T = 100;
  std::vector<double> alpha_bar;

  static BaselineSchedule cosine(int T, double s = 0.008) {
    if (T < 1) throw ConfigError("baseline.T must be >= 1");
    BaselineSchedule sch;
    sch.T = T;
    auto f = [&](double t) {
      const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
      return c * c;
    };
    sch.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
    sch.alpha_bar[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double beta = std::min(1.0 - f(t) / f(t - 1), 0.999);
      sch.alpha_bar[static_cast<std::size_t>(t)] = sch.alpha_bar[static_cast<std::size_t>(t) - 1] * (1.0 - beta);
    }
    return sch;
  }

  void validate() const {
    if (T < 1 || alpha_bar.size() != static_cast<std::size_t>(T) + 1) throw ConfigError("baseline schedule size");
    for (int t = 1; t <= T; ++t)
      if (!(alpha_bar[static_cast<std::size_t>(t)] < alpha_bar[static_cast<std::size_t>(t) - 1]) ||
          !(alpha_bar[static_cast<std::size_t>(t)] > 0))
        throw ConfigError("baseline schedule must be strictly decreasing in signal");
  }
};

inline constexpr int kTimeEmbedDim = 9;

/// [t/T, sin(2^j pi t/T), cos(2^j pi t/T) for j = 0..3]
inline Vec time_embedding(int t, int T) {
  Vec e(kTimeEmbedDim);
  const double u = static_cast<double>(t) / T;
  e(0) = u;
  for (int j = 0; j < 4; ++j) {
    const double a = std::ldexp(std::numbers::pi * u, j);
    e(1 + 2 * j) = std::sin(a);
    e(2 + 2 * j) = std::cos(a);
  }
  return e;
}

/// Noise-prediction network conditioned on the timestep: input
/// [context, y_t, time embedding], heads "noise" and "open".
struct BaselineNet : TrainedNet {
  BaselineSchedule schedule;

  Vec predict(const Vec& context, const Vec& y, int t) const {
    Vec in(context.size() + y.size() + kTimeEmbedDim);
    in << context, y, time_embedding(t, schedule.T);
    return forward(params, in);
  }
};

inline BaselineNet init_baseline_net(const TaskSuite& suite, const TrainConfig& cfg, const BaselineSchedule& sch) {
  cfg.validate();
  sch.validate();
  BaselineNet net;
  net.config = cfg;
  net.schedule = sch;
  net.suite_signature = suite.signature();
  net.d = suite.d();
  const int d = suite.d();
  Rng rng = derive_rng(cfg.seed, {detail::kBaselinePhase, detail::kInitTag});
  net.params = make_mlp(suite.context_dim() + d + kTimeEmbedDim, cfg.hidden,
                        {{"noise", 0, d, HeadKind::linear}, {"open", d, 1, HeadKind::sigmoid}}, cfg.activation, rng);
  // Noisy positions are roughly unit scale at every t; only the context is standardized.
  net.params.norm = detail::suite_input_norm(suite, 1.0, kTimeEmbedDim);
  net.params.norm.mean.segment(suite.context_dim(), d).setZero();
  net.params.norm.scale.segment(suite.context_dim(), d).setOnes();
  net.adam = AdamState::like(net.params);
  return net;
}

/// Standard epsilon-prediction training: t ~ U{1..T}, y_t = sqrt(ab) y_hat +
/// sqrt(1 - ab) eps, squared error on eps plus the weighted open loss.
inline void continue_baseline_training(BaselineNet& net, const TaskSuite& suite, std::int64_t until) {
  check_suite(net, suite);
  const auto scenes = detail::train_scenes(suite);
  const int d = suite.d();
  const Eigen::Index c = suite.context_dim();
  const int bs = net.config.batch_size;
  const int T = net.schedule.T;
  const LossSpec spec{{"noise", LossKind::l2_squared, 1.0}, {"open", LossKind::bce, net.config.w_open}};
  detail::run_steps(net, detail::kBaselinePhase, until, spec, [&](Rng& rng) {
    Batch b;
    b.inputs.resize(c + d + kTimeEmbedDim, bs);
    b.targets.resize(d + 1, bs);
    for (int i = 0; i < bs; ++i) {
      const Scene& s = *scenes[std::uniform_int_distribution<std::size_t>(0, scenes.size() - 1)(rng)];
      const Action& label = s.modes[sample_mode_index(s, rng)];
      const int t = std::uniform_int_distribution<int>(1, T)(rng);
      const double ab = net.schedule.alpha_bar[static_cast<std::size_t>(t)];
      const Vec eps = sample_initial(rng, d);
      b.inputs.col(i) << s.context, std::sqrt(ab) * label.pos + std::sqrt(1.0 - ab) * eps, time_embedding(t, T);
      b.targets.col(i).head(d) = eps;
      b.targets(d, i) = label.open;
    }
    return b;
  });
}

inline BaselineNet train_baseline(const TaskSuite& suite, const TrainConfig& cfg, const BaselineSchedule& sch) {
  BaselineNet net = init_baseline_net(suite, cfg, sch);
  continue_baseline_training(net, suite, cfg.total_steps);
  return net;
}

/// Evenly strided timesteps from T down to 0, both endpoints included.
inline std::vector<int> strided_timesteps(int T, int iterations) {
  if (iterations < 1 || iterations > T) throw ConfigError("baseline iterations must lie in [1, T]");
  std::vector<int> ts;
  for (int j = 0; j <= iterations; ++j)
    ts.push_back(static_cast<int>(std::lround(static_cast<double>(T) * (iterations - j) / iterations)));
  return ts;
}

/// Deterministic DDIM reverse process over the strided timesteps. The clean
/// estimate is clipped to the workspace; the direction term keeps the raw
/// predicted noise.
inline DenoiseTrace denoise_baseline(const BaselineNet& net, const Vec& context, const Vec& y0, int iterations) {
  if (y0.size() != net.d) throw ConfigError("denoise_baseline: initial action dimension mismatch");
  const auto ts = strided_timesteps(net.schedule.T, iterations);
  const auto& ab = net.schedule.alpha_bar;
  const auto& nh = net.params.head("noise");
  DenoiseTrace trace;
  trace.iterates.push_back(y0);
  for (std::size_t j = 0; j + 1 < ts.size(); ++j) {
    const int t = ts[j], t_next = ts[j + 1];
    const Vec& y = trace.iterates.back();
    const double a = ab[static_cast<std::size_t>(t)], a_next = ab[static_cast<std::size_t>(t_next)];
    const Vec eps = net.predict(context, y, t).segment(nh.offset, nh.width);
    const Vec x0 = ((y - std::sqrt(1.0 - a) * eps) / std::sqrt(a)).cwiseMax(-1.0).cwiseMin(1.0);
    Vec next = t_next == 0 ? x0 : Vec(std::sqrt(a_next) * x0 + std::sqrt(1.0 - a_next) * eps);
    trace.dnorms.push_back((next - y).norm());
    trace.iterates.push_back(std::move(next));
    if (!trace.iterates.back().allFinite()) {
      trace.iterations_used = static_cast<int>(trace.dnorms.size());
      throw DenoiseError("denoise_baseline: non-finite iterate at update " + std::to_string(j + 1), trace);
    }
  }
  trace.iterations_used = static_cast<int>(trace.dnorms.size());
  trace.final.pos = trace.iterates.back();
  trace.final.open = net.predict(context, trace.final.pos, 0)(net.params.head("open").offset);
  return trace;
}

inline nlohmann::json baseline_checkpoint_json(const BaselineNet& net) {
  nlohmann::json j = checkpoint_json(net, "baseline");
  j["schedule"] = {{"kind", "cosine"}, {"T", net.schedule.T}};
  return j;
}

inline BaselineNet baseline_net_from_json(const nlohmann::json& j) {
  BaselineNet n;
  load_checkpoint_into(n, j, "baseline");
  try {
    n.schedule = BaselineSchedule::cosine(j.at("schedule").at("T").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed baseline checkpoint: ") + e.what());
  }
  return n;
}

inline nlohmann::json trace_to_json(const DenoiseTrace& tr, int scene_id, std::uint64_t seed) {
  nlohmann::json its = nlohmann::json::array();
  for (const auto& y : tr.iterates) its.push_back(vec_to_json(y));
  return {{"scene_id", scene_id}, {"seed", seed}, {"iterates", its}, {"dnorms", tr.dnorms},
          {"terminated_early", tr.terminated_early}};
}

}  // namespace tudp
