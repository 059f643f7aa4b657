#pragma once

// Actions, scenes and the synthetic multi-modal task generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tudp/common.hpp"

namespace tudp {

/// End-effector action: position in the normalized workspace plus the
/// gripper-open state. Labels carry open in {0,1}; predictions carry a
/// probability.
struct Action {
  Vec pos;
  double open = 0.0;
};

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct Scene {
  int id = 0;
  Vec context;
  std::vector<Action> modes;
  Split split = Split::train;

  int k() const { return static_cast<int>(modes.size()); }
  int dim() const { return modes.empty() ? 0 : static_cast<int>(modes.front().pos.size()); }
};

struct Demonstration {
  int scene_id = 0;
  Action label;
};

struct SuiteConfig {
  int d = 2;
  int k_min = 1;
  int k_max = 4;
  int num_scenes = 8;
  double s_min = 0.25;  // 2l + 0.05 at l = 0.1
  /// 0 keeps the raw context layout; > 0 passes it through a fixed random
  /// linear map to this many features.
  int context_dim = 0;
  double val_fraction = 0.0;
  double test_fraction = 0.0;
  int max_retries = 10000;
};

/// Raised when mode separation cannot be met within the retry budget.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TaskSuite {
  SuiteConfig config;
  std::uint64_t seed = 0;
  std::vector<Scene> scenes;

  int d() const { return config.d; }
  int context_dim() const { return scenes.empty() ? 0 : static_cast<int>(scenes.front().context.size()); }

  const Scene& scene(int id) const {
    for (const auto& s : scenes)
      if (s.id == id) return s;
    throw ConfigError("suite has no scene " + std::to_string(id));
  }

  std::vector<const Scene*> split(Split which) const {
    std::vector<const Scene*> out;
    for (const auto& s : scenes)
      if (s.split == which) out.push_back(&s);
    return out;
  }

  /// Stable identity of the suite contents; checkpoints record it.
  std::uint64_t signature() const;
};

/// Guard band on each workspace coordinate for noisy samples.
inline double guard_band(double sigma) { return 3.0 * sigma; }

inline double min_pairwise_distance(std::span<const Action> modes) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < modes.size(); ++i)
    for (std::size_t j = i + 1; j < modes.size(); ++j)
      best = std::min(best, (modes[i].pos - modes[j].pos).norm());
  return best;
}

/// Raw context: per slot (pos, open) for k_max slots, zero padded, followed
/// by a one-hot of k.
inline Vec raw_context(std::span<const Action> modes, int d, int k_max) {
  Vec ctx = Vec::Zero(k_max * (d + 1) + k_max);
  for (std::size_t i = 0; i < modes.size(); ++i) {
    ctx.segment(static_cast<Eigen::Index>(i) * (d + 1), d) = modes[i].pos;
    ctx(static_cast<Eigen::Index>(i) * (d + 1) + d) = modes[i].open;
  }
  ctx(k_max * (d + 1) + static_cast<Eigen::Index>(modes.size()) - 1) = 1.0;
  return ctx;
}

inline TaskSuite generate_suite(const SuiteConfig& cfg, std::uint64_t seed) {
  if (cfg.d < 1) throw ConfigError("suite.d must be >= 1");
  if (cfg.k_max < 1 || cfg.k_min < 1 || cfg.k_min > cfg.k_max)
    throw ConfigError("suite.k_min/k_max must satisfy 1 <= k_min <= k_max");
  if (!(cfg.s_min > 0)) throw ConfigError("suite.s_min must be > 0");
  if (cfg.num_scenes < 1) throw ConfigError("suite.num_scenes must be >= 1");
  if (cfg.val_fraction < 0 || cfg.test_fraction < 0 || cfg.val_fraction + cfg.test_fraction >= 1.0)
    throw ConfigError("suite split fractions must be >= 0 and leave room for a train split");
  if (cfg.context_dim < 0) throw ConfigError("suite.context_dim must be >= 0");

  TaskSuite suite;
  suite.config = cfg;
  suite.seed = seed;

  const int raw_dim = cfg.k_max * (cfg.d + 1) + cfg.k_max;
  Mat projection;
  if (cfg.context_dim > 0) {
    Rng prng = derive_rng(seed, {0x70726f6aULL});
    projection.resize(cfg.context_dim, raw_dim);
    for (Eigen::Index r = 0; r < projection.rows(); ++r)
      for (Eigen::Index c = 0; c < projection.cols(); ++c)
        projection(r, c) = draw_normal(prng) / std::sqrt(static_cast<double>(raw_dim));
  }

  const int n_test = static_cast<int>(std::floor(cfg.test_fraction * cfg.num_scenes));
  const int n_val = static_cast<int>(std::floor(cfg.val_fraction * cfg.num_scenes));
  const int n_train = cfg.num_scenes - n_val - n_test;

  for (int id = 0; id < cfg.num_scenes; ++id) {
    Rng rng = derive_rng(seed, {0x7363656eULL, static_cast<std::uint64_t>(id)});
    const int k = std::uniform_int_distribution<int>(cfg.k_min, cfg.k_max)(rng);

    std::vector<Action> modes(static_cast<std::size_t>(k));
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
      for (auto& m : modes) {
        m.pos.resize(cfg.d);
        for (int j = 0; j < cfg.d; ++j) m.pos(j) = draw_uniform(rng, -1.0, 1.0);
        m.open = std::bernoulli_distribution(0.5)(rng) ? 1.0 : 0.0;
      }
      placed = k == 1 || min_pairwise_distance(modes) >= cfg.s_min;
    }
    if (!placed)
      throw InfeasibleError("scene " + std::to_string(id) + ": cannot place " + std::to_string(k) +
                            " modes with separation " + fmt_double(cfg.s_min) + " in d=" +
                            std::to_string(cfg.d) + " after " + std::to_string(cfg.max_retries) +
                            " retries");

    Scene scene;
    scene.id = id;
    scene.modes = std::move(modes);
    Vec raw = raw_context(scene.modes, cfg.d, cfg.k_max);
    scene.context = cfg.context_dim > 0 ? Vec(projection * raw) : raw;
    scene.split = id < n_train ? Split::train : (id < n_train + n_val ? Split::val : Split::test);
    suite.scenes.push_back(std::move(scene));
  }
  return suite;
}

inline std::size_t sample_mode_index(const Scene& scene, Rng& rng) {
  return static_cast<std::size_t>(std::uniform_int_distribution<int>(0, scene.k() - 1)(rng));
}

/// Uniform choice among the scene's successful actions.
inline Demonstration sample_demonstration(const Scene& scene, Rng& rng) {
  return {scene.id, scene.modes[sample_mode_index(scene, rng)]};
}

/// Isotropic Gaussian perturbation of the label position, clamped to the
/// guard band. The open state is carried over unchanged.
inline Action sample_noisy_action(const Action& label, double sigma, Rng& rng) {
  if (!(sigma > 0)) throw ConfigError("sigma must be > 0");
  const double bound = 1.0 + guard_band(sigma);
  Action out = label;
  for (Eigen::Index j = 0; j < out.pos.size(); ++j)
    out.pos(j) = std::clamp(label.pos(j) + sigma * draw_normal(rng), -bound, bound);
  return out;
}

// ---- serialization ----------------------------------------------------------

inline nlohmann::json vec_to_json(const Vec& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Vec vec_from_json(const nlohmann::json& a) {
  Vec v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
  return v;
}

inline nlohmann::json to_json(const SuiteConfig& c) {
  return {{"d", c.d},
          {"k_min", c.k_min},
          {"k_max", c.k_max},
          {"num_scenes", c.num_scenes},
          {"s_min", c.s_min},
          {"context_dim", c.context_dim},
          {"val_fraction", c.val_fraction},
          {"test_fraction", c.test_fraction},
          {"max_retries", c.max_retries}};
}

inline SuiteConfig suite_config_from_json(const nlohmann::json& j) {
  SuiteConfig c;
  c.d = j.at("d").get<int>();
  c.k_min = j.at("k_min").get<int>();
  c.k_max = j.at("k_max").get<int>();
  c.num_scenes = j.at("num_scenes").get<int>();
  c.s_min = j.at("s_min").get<double>();
  c.context_dim = j.at("context_dim").get<int>();
  c.val_fraction = j.at("val_fraction").get<double>();
  c.test_fraction = j.at("test_fraction").get<double>();
  c.max_retries = j.at("max_retries").get<int>();
  return c;
}

inline nlohmann::json to_json(const TaskSuite& suite) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& s : suite.scenes) {
    nlohmann::json modes = nlohmann::json::array();
    for (const auto& m : s.modes) modes.push_back({{"pos", vec_to_json(m.pos)}, {"open", m.open}});
    scenes.push_back({{"id", s.id}, {"split", to_string(s.split)}, {"context", vec_to_json(s.context)},
                      {"modes", modes}});
  }
  return {{"format", "tudp-suite"}, {"format_version", 1}, {"seed", suite.seed},
          {"config", to_json(suite.config)}, {"scenes", scenes}};
}

inline TaskSuite suite_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "tudp-suite") throw ConfigError("not a suite file");
    TaskSuite suite;
    suite.seed = j.at("seed").get<std::uint64_t>();
    suite.config = suite_config_from_json(j.at("config"));
    for (const auto& js : j.at("scenes")) {
      Scene s;
      s.id = js.at("id").get<int>();
      s.split = split_from_string(js.at("split").get<std::string>());
      s.context = vec_from_json(js.at("context"));
      for (const auto& jm : js.at("modes"))
        s.modes.push_back({vec_from_json(jm.at("pos")), jm.at("open").get<double>()});
      if (s.modes.empty()) throw ConfigError("scene without modes");
      suite.scenes.push_back(std::move(s));
    }
    return suite;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed suite json: ") + e.what());
  }
}

inline std::uint64_t TaskSuite::signature() const {
  nlohmann::json j = to_json(*this);
  return fnv1a(j.dump());
}

}  // namespace tudp
