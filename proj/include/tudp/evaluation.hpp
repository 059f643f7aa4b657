#pragma once

// Success metrics, paired iteration sweeps, field-magnitude heatmaps and
// ablation sweeps. "Success" is a proxy: the final position lies within tau
// of a ground-truth mode and the predicted open bit matches that mode.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "tudp/actionspace.hpp"
#include "tudp/denoiser.hpp"
#include "tudp/oracle_field.hpp"
#include "tudp/training.hpp"

namespace tudp {

struct TudpPolicy {
  const DiffusionNet* net = nullptr;
};
struct OraclePolicy {
  FieldParams field;
};
struct BaselinePolicy {
  const BaselineNet* net = nullptr;
};
using Policy = std::variant<TudpPolicy, OraclePolicy, BaselinePolicy>;

inline std::string policy_name(const Policy& p) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, TudpPolicy>) return "tudp";
        else if constexpr (std::is_same_v<T, OraclePolicy>) return "oracle";
        else return "baseline";
      },
      p);
}

struct EvalConfig {
  int N = 100;
  double delta = 0.01;
  bool early_termination = true;
  double tau = 0.1;
  int episodes_per_scene = 4;
  std::uint64_t seed = 0;
  std::string split = "all";  // train | val | test | all
  bool timing = false;
  int workers = 1;

  void validate() const {
    if (N < 1) throw ConfigError("eval.N must be >= 1");
    if (!(tau > 0)) throw ConfigError("eval.tau must be > 0");
    if (early_termination && !(delta > 0)) throw ConfigError("eval.delta must be > 0");
    if (episodes_per_scene < 1) throw ConfigError("eval.episodes_per_scene must be >= 1 (empty report)");
    if (workers < 1) throw ConfigError("eval.workers must be >= 1");
    if (split != "all") split_from_string(split);
  }
};

struct SceneResult {
  int scene_id = 0;
  int episodes = 0;
  int successes = 0;
  double mean_iters = 0;
  int max_iters = 0;
  double early_rate = 0;
  double median_ms = 0;

  double success() const { return episodes ? static_cast<double>(successes) / episodes : 0.0; }
};

struct EvalReport {
  std::string suite_id;
  std::string policy;
  std::vector<SceneResult> scenes;
  double success_rate = 0;  // episode-weighted
  double mean_iters = 0;
  int max_iters = 0;
  double early_rate = 0;
  double median_ms = 0;
  EvalConfig config;
  std::string field_form;
};

struct Episode {
  bool success = false;
  int iterations = 0;
  bool early = false;
  double ms = 0;
  DenoiseTrace trace;
};

inline bool is_success(const Action& final, const Scene& scene, double tau) {
  const std::size_t i = nearest_mode(final.pos, scene.modes);
  const bool open_pred = final.open >= 0.5;
  const bool open_true = scene.modes[i].open >= 0.5;
  return (final.pos - scene.modes[i].pos).norm() <= tau && open_pred == open_true;
}

inline Vec episode_initial(const EvalConfig& cfg, int scene_id, int episode, int d) {
  Rng rng = derive_rng(cfg.seed, {0x65706973ULL, static_cast<std::uint64_t>(scene_id), static_cast<std::uint64_t>(episode)});
  return sample_initial(rng, d);
}

inline DenoiseTrace run_policy(const Policy& policy, const Scene& scene, const Vec& y0, const EvalConfig& cfg) {
  const DenoiseOptions opt{cfg.N, cfg.delta, cfg.early_termination};
  return std::visit(
      [&](const auto& p) -> DenoiseTrace {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, TudpPolicy>) return denoise(*p.net, scene.context, y0, opt);
        else if constexpr (std::is_same_v<T, OraclePolicy>) return denoise_oracle(scene, y0, p.field, opt);
        else return denoise_baseline(*p.net, scene.context, y0, std::min(cfg.N, p.net->schedule.T));
      },
      policy);
}

inline std::vector<const Scene*> eval_scenes(const TaskSuite& suite, const std::string& split) {
  if (split == "all") {
    std::vector<const Scene*> out;
    for (const auto& s : suite.scenes) out.push_back(&s);
    return out;
  }
  return suite.split(split_from_string(split));
}

/// Runs every (scene, episode) pair. Initial noise depends only on
/// (seed, scene id, episode), so two policies evaluated with the same config
/// see identical starts. Workers fill disjoint slots; reduction is in order.
inline std::vector<std::vector<Episode>> run_episodes(const Policy& policy, const TaskSuite& suite,
                                                      const EvalConfig& cfg, bool keep_traces = false) {
  cfg.validate();
  const auto scenes = eval_scenes(suite, cfg.split);
  if (scenes.empty()) throw ConfigError("no scenes in split '" + cfg.split + "'");
  const int per = cfg.episodes_per_scene;
  const std::size_t total = scenes.size() * static_cast<std::size_t>(per);
  std::vector<std::vector<Episode>> out(scenes.size(), std::vector<Episode>(static_cast<std::size_t>(per)));

  auto work = [&](std::size_t begin, std::size_t stride) {
    using clock = std::chrono::steady_clock;
    for (std::size_t job = begin; job < total; job += stride) {
      const Scene& s = *scenes[job / static_cast<std::size_t>(per)];
      const int ep = static_cast<int>(job % static_cast<std::size_t>(per));
      const Vec y0 = episode_initial(cfg, s.id, ep, suite.d());
      const auto t0 = clock::now();
      DenoiseTrace tr = run_policy(policy, s, y0, cfg);
      Episode& e = out[job / static_cast<std::size_t>(per)][static_cast<std::size_t>(ep)];
      e.ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      e.success = is_success(tr.final, s, cfg.tau);
      e.iterations = tr.iterations_used;
      e.early = tr.terminated_early;
      if (keep_traces) e.trace = std::move(tr);
    }
  };
  if (cfg.workers <= 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < cfg.workers; ++w) pool.emplace_back(work, static_cast<std::size_t>(w), static_cast<std::size_t>(cfg.workers));
  }
  return out;
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) return 0;
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline EvalReport summarize(const std::vector<std::vector<Episode>>& episodes, const TaskSuite& suite,
                            const Policy& policy, const EvalConfig& cfg) {
  EvalReport r;
  r.suite_id = hex64(suite.signature());
  r.policy = policy_name(policy);
  r.config = cfg;
  r.field_form = std::holds_alternative<OraclePolicy>(policy) ? to_string(std::get<OraclePolicy>(policy).field.form)
                                                              : (std::holds_alternative<TudpPolicy>(policy) ? "learned" : "time-varying");
  const auto scenes = eval_scenes(suite, cfg.split);
  std::vector<double> all_ms;
  int n = 0, succ = 0, early = 0;
  double iters = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    SceneResult sr;
    sr.scene_id = scenes[i]->id;
    std::vector<double> ms;
    for (const auto& e : episodes[i]) {
      ++sr.episodes;
      sr.successes += e.success;
      sr.mean_iters += e.iterations;
      sr.max_iters = std::max(sr.max_iters, e.iterations);
      sr.early_rate += e.early;
      ms.push_back(e.ms);
      all_ms.push_back(e.ms);
    }
    n += sr.episodes;
    succ += sr.successes;
    iters += sr.mean_iters;
    early += static_cast<int>(sr.early_rate);
    sr.mean_iters /= sr.episodes;
    sr.early_rate /= sr.episodes;
    sr.median_ms = median(ms);
    r.max_iters = std::max(r.max_iters, sr.max_iters);
    r.scenes.push_back(sr);
  }
  r.success_rate = static_cast<double>(succ) / n;
  r.mean_iters = iters / n;
  r.early_rate = static_cast<double>(early) / n;
  r.median_ms = median(all_ms);
  return r;
}

inline EvalReport evaluate(const Policy& policy, const TaskSuite& suite, const EvalConfig& cfg) {
  return summarize(run_episodes(policy, suite, cfg), suite, policy, cfg);
}

// ---- iteration sweep --------------------------------------------------------

struct SweepRow {
  int N = 0;
  double success_a = 0;
  double success_b = 0;
};

/// Paired success rates of two policies over a list of iteration budgets.
inline std::vector<SweepRow> iteration_sweep(const Policy& a, const Policy& b, const TaskSuite& suite,
                                             const std::vector<int>& Ns, EvalConfig cfg) {
  if (Ns.empty()) throw ConfigError("sweep: empty iteration list");
  std::vector<SweepRow> rows;
  for (int N : Ns) {
    cfg.N = N;
    rows.push_back({N, evaluate(a, suite, cfg).success_rate, evaluate(b, suite, cfg).success_rate});
  }
  return rows;
}

// ---- heatmaps ---------------------------------------------------------------

struct SliceSpec {
  int axis_x = 0;
  int axis_y = 1;
  Vec fixed;  // values of the remaining coordinates (full-length; free axes ignored)
  double lo = -1.0;
  double hi = 1.0;
};

struct HeatmapGrid {
  SliceSpec slice;
  int resolution = 0;
  std::vector<double> magnitude;  // row-major, row = y index, col = x index

  double at(int row, int col) const { return magnitude[static_cast<std::size_t>(row * resolution + col)]; }
};

inline double cell_center(const SliceSpec& s, int res, int i) { return s.lo + (i + 0.5) * (s.hi - s.lo) / res; }

/// |field| at every cell center of a 2-D slice through action space.
inline HeatmapGrid field_heatmap(const std::function<Vec(const Vec&)>& field, int d, SliceSpec slice, int resolution) {
  if (resolution < 1) throw ConfigError("heatmap resolution must be >= 1");
  if (slice.axis_x < 0 || slice.axis_x >= d || slice.axis_y < 0 || slice.axis_y >= d ||
      (d > 1 && slice.axis_x == slice.axis_y))
    throw ConfigError("heatmap slice axes must be distinct and within the action dimension");
  if (slice.fixed.size() == 0) slice.fixed = Vec::Zero(d);
  if (slice.fixed.size() != d) throw ConfigError("heatmap fixed coordinates must have length d");
  HeatmapGrid g;
  g.slice = slice;
  g.resolution = resolution;
  g.magnitude.reserve(static_cast<std::size_t>(resolution) * resolution);
  for (int r = 0; r < resolution; ++r)
    for (int c = 0; c < resolution; ++c) {
      Vec y = slice.fixed;
      y(slice.axis_x) = cell_center(slice, resolution, c);
      if (d > 1) y(slice.axis_y) = cell_center(slice, resolution, r);
      g.magnitude.push_back(field(y).norm());
    }
  return g;
}

enum class FieldSource { oracle_unified, oracle_unweighted, trained };

inline FieldSource field_source_from_string(const std::string& s) {
  if (s == "unified") return FieldSource::oracle_unified;
  if (s == "unweighted") return FieldSource::oracle_unweighted;
  if (s == "net") return FieldSource::trained;
  throw ConfigError("unknown field source '" + s + "' (unified | unweighted | net)");
}

inline HeatmapGrid field_heatmap(FieldSource src, const Scene& scene, const FieldParams& p, const DiffusionNet* net,
                                 const SliceSpec& slice, int resolution) {
  const int d = scene.dim();
  switch (src) {
    case FieldSource::oracle_unified:
      return field_heatmap([&](const Vec& y) { return unified_field(y, scene, p); }, d, slice, resolution);
    case FieldSource::oracle_unweighted:
      return field_heatmap([&](const Vec& y) { return unweighted_field(y, scene, p); }, d, slice, resolution);
    case FieldSource::trained:
      if (net == nullptr) throw ConfigError("heatmap source 'net' needs a diffusion checkpoint");
      return field_heatmap([&](const Vec& y) { return net->noise(scene.context, y); }, d, slice, resolution);
  }
  throw ConfigError("bad field source");
}

inline double grid_rms(const HeatmapGrid& a, const HeatmapGrid& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.magnitude.size(); ++i) s += std::pow(a.magnitude[i] - b.magnitude[i], 2);
  return std::sqrt(s / static_cast<double>(a.magnitude.size()));
}

/// CSV: two header lines (axes, resolution), then one grid row per line.
inline void write_heatmap_csv(std::ostream& os, const HeatmapGrid& g) {
  os << "axes," << g.slice.axis_x << ',' << g.slice.axis_y << '\n';
  os << "resolution," << g.resolution << '\n';
  for (int r = 0; r < g.resolution; ++r) {
    for (int c = 0; c < g.resolution; ++c) os << (c ? "," : "") << fmt_double(g.at(r, c));
    os << '\n';
  }
}

/// Binary 8-bit PGM, min-max normalized; the first grid row is the lowest
/// y value, so rows are written top-down in reverse.
inline void write_heatmap_pgm(std::ostream& os, const HeatmapGrid& g, const std::string& comment = {}) {
  const auto [lo_it, hi_it] = std::minmax_element(g.magnitude.begin(), g.magnitude.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;
  os << "P5\n";
  if (!comment.empty()) os << "# " << comment << '\n';
  os << g.resolution << ' ' << g.resolution << "\n255\n";
  for (int r = g.resolution - 1; r >= 0; --r)
    for (int c = 0; c < g.resolution; ++c) {
      const double u = span > 0 ? (g.at(r, c) - lo) / span : 0.0;
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * u))));
    }
}

// ---- ablations --------------------------------------------------------------

struct AblationSetup {
  TaskSuite suite;
  FieldParams field;
  TrainConfig train;
  EvalConfig eval;  // tau stays fixed across values so rows are comparable
};

struct AblationRow {
  std::string param;
  std::string value;
  double success = 0;
  double median_ms = 0;
  double mean_iters = 0;
};

inline double parse_real(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ConfigError("not a number: '" + s + "'");
  return x;
}

/// Trains (both phases as needed) and evaluates one configuration per value.
/// Parameters: l, sigma, v, lambda-mode (score | oracle | one),
/// early-termination (on | off). Every configuration reuses the same seeds.
inline std::vector<AblationRow> ablation_sweep(const std::string& param, const std::vector<std::string>& values,
                                               const AblationSetup& setup) {
  if (values.empty()) throw ConfigError("ablate: empty value list");
  static const std::vector<std::string> known{"l", "sigma", "v", "lambda-mode", "early-termination"};
  if (std::find(known.begin(), known.end(), param) == known.end())
    throw ConfigError("ablate: unknown parameter '" + param + "'");

  auto train_and_eval = [&](FieldParams f, TrainConfig t, EvalConfig e) {
    std::optional<ScoreNet> score;
    if (t.lambda_mode == LambdaMode::score_net) score = train_score(setup.suite, f, t);
    const DiffusionNet net = train_diffusion(setup.suite, score ? &*score : nullptr, f, t);
    return evaluate(TudpPolicy{&net}, setup.suite, e);
  };

  std::vector<AblationRow> rows;
  std::optional<DiffusionNet> shared;  // early-termination rows share one trained net
  std::optional<ScoreNet> shared_score;
  for (const auto& value : values) {
    FieldParams f = setup.field;
    TrainConfig t = setup.train;
    EvalConfig e = setup.eval;
    EvalReport rep;
    if (param == "early-termination") {
      if (value != "on" && value != "off") throw ConfigError("early-termination values are on | off");
      e.early_termination = value == "on";
      if (!shared) {
        if (t.lambda_mode == LambdaMode::score_net) shared_score = train_score(setup.suite, f, t);
        shared = train_diffusion(setup.suite, shared_score ? &*shared_score : nullptr, f, t);
      }
      rep = evaluate(TudpPolicy{&*shared}, setup.suite, e);
    } else {
      if (param == "l") f.l = parse_real(value);
      else if (param == "sigma") f.sigma = parse_real(value);
      else if (param == "v") f.v = parse_real(value);
      else t.lambda_mode = lambda_mode_from_string(value);
      f.validate();
      rep = train_and_eval(f, t, e);
    }
    rows.push_back({param, value, rep.success_rate, rep.median_ms, rep.mean_iters});
  }
  return rows;
}

}  // namespace tudp
