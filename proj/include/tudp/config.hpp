#pragma once

// Flat run configuration: `section.key = value` lines, `#` starts a comment.
// Unknown keys are rejected.

#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tudp/actionspace.hpp"
#include "tudp/denoiser.hpp"
#include "tudp/evaluation.hpp"
#include "tudp/oracle_field.hpp"
#include "tudp/training.hpp"

namespace tudp {

struct RunConfig {
  SuiteConfig suite;
  std::uint64_t seed = 7;  // suite generation seed; --seed overrides
  FieldParams field;
  TrainConfig train;
  int baseline_T = 100;
  EvalConfig eval;
  std::optional<double> tau;  // unset: follows field.l
  bool timing = false;        // wall-clock columns; off keeps outputs byte-stable

  EvalConfig resolved_eval() const {
    EvalConfig e = eval;
    e.tau = tau.value_or(field.l);
    e.timing = timing;
    return e;
  }

  void validate() const {
    field.validate();
    train.validate();
    resolved_eval().validate();
    if (baseline_T < 1) throw ConfigError("baseline.T must be >= 1");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return x;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

inline double parse_num(const std::string& key, const std::string& v) {
  try {
    return parse_real(v);
  } catch (const ConfigError&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(parse_int(key, trim(item))));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
  return out;
}

inline std::string join_ints(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

inline std::string num(double x) { return std::isinf(x) ? (x > 0 ? "inf" : "-inf") : fmt_double(x); }

struct Key {
  const char* name;
  const char* doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// clang-format off
inline const std::vector<Key>& config_keys() {
  static const std::vector<Key> keys{
    {"suite.d", "action position dimension",
     [](const RunConfig& c) { return std::to_string(c.suite.d); },
     [](RunConfig& c, const std::string& v) { c.suite.d = static_cast<int>(parse_int("suite.d", v)); }},
    {"suite.k_min", "fewest modes per scene",
     [](const RunConfig& c) { return std::to_string(c.suite.k_min); },
     [](RunConfig& c, const std::string& v) { c.suite.k_min = static_cast<int>(parse_int("suite.k_min", v)); }},
    {"suite.k_max", "most modes per scene",
     [](const RunConfig& c) { return std::to_string(c.suite.k_max); },
     [](RunConfig& c, const std::string& v) { c.suite.k_max = static_cast<int>(parse_int("suite.k_max", v)); }},
    {"suite.num_scenes", "",
     [](const RunConfig& c) { return std::to_string(c.suite.num_scenes); },
     [](RunConfig& c, const std::string& v) { c.suite.num_scenes = static_cast<int>(parse_int("suite.num_scenes", v)); }},
    {"suite.s_min", "minimum pairwise mode distance (2l + 0.05)",
     [](const RunConfig& c) { return num(c.suite.s_min); },
     [](RunConfig& c, const std::string& v) { c.suite.s_min = parse_num("suite.s_min", v); }},
    {"suite.context_dim", "0 = raw context, else random linear map to this width",
     [](const RunConfig& c) { return std::to_string(c.suite.context_dim); },
     [](RunConfig& c, const std::string& v) { c.suite.context_dim = static_cast<int>(parse_int("suite.context_dim", v)); }},
    {"suite.val_fraction", "",
     [](const RunConfig& c) { return num(c.suite.val_fraction); },
     [](RunConfig& c, const std::string& v) { c.suite.val_fraction = parse_num("suite.val_fraction", v); }},
    {"suite.test_fraction", "",
     [](const RunConfig& c) { return num(c.suite.test_fraction); },
     [](RunConfig& c, const std::string& v) { c.suite.test_fraction = parse_num("suite.test_fraction", v); }},
    {"suite.max_retries", "rejection-sampling attempts per scene",
     [](const RunConfig& c) { return std::to_string(c.suite.max_retries); },
     [](RunConfig& c, const std::string& v) { c.suite.max_retries = static_cast<int>(parse_int("suite.max_retries", v)); }},
    {"suite.seed", "generation seed",
     [](const RunConfig& c) { return std::to_string(c.seed); },
     [](RunConfig& c, const std::string& v) { c.seed = parse_u64("suite.seed", v); }},
    {"field.v", "velocity limitation (inf = uncapped)",
     [](const RunConfig& c) { return num(c.field.v); },
     [](RunConfig& c, const std::string& v) { c.field.v = parse_num("field.v", v); }},
    {"field.l", "neighborhood radius",
     [](const RunConfig& c) { return num(c.field.l); },
     [](RunConfig& c, const std::string& v) { c.field.l = parse_num("field.l", v); }},
    {"field.sigma", "noisy-action sampling std",
     [](const RunConfig& c) { return num(c.field.sigma); },
     [](RunConfig& c, const std::string& v) { c.field.sigma = parse_num("field.sigma", v); }},
    {"field.m_exp", "score label decay exponent (<= -10)",
     [](const RunConfig& c) { return num(c.field.m_exp); },
     [](RunConfig& c, const std::string& v) { c.field.m_exp = parse_num("field.m_exp", v); }},
    {"field.form", "posterior | literal",
     [](const RunConfig& c) { return std::string(to_string(c.field.form)); },
     [](RunConfig& c, const std::string& v) { c.field.form = merge_form_from_string(v); }},
    {"train.batch_size", "",
     [](const RunConfig& c) { return std::to_string(c.train.batch_size); },
     [](RunConfig& c, const std::string& v) { c.train.batch_size = static_cast<int>(parse_int("train.batch_size", v)); }},
    {"train.base_lr", "initial learning rate, cosine decay to 0",
     [](const RunConfig& c) { return num(c.train.base_lr); },
     [](RunConfig& c, const std::string& v) { c.train.base_lr = parse_num("train.base_lr", v); }},
    {"train.total_steps", "rounds per phase (D)",
     [](const RunConfig& c) { return std::to_string(c.train.total_steps); },
     [](RunConfig& c, const std::string& v) { c.train.total_steps = parse_int("train.total_steps", v); }},
    {"train.seed", "",
     [](const RunConfig& c) { return std::to_string(c.train.seed); },
     [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("train.seed", v); }},
    {"train.norm", "squared | unsquared",
     [](const RunConfig& c) { return std::string(to_string(c.train.norm)); },
     [](RunConfig& c, const std::string& v) { c.train.norm = loss_norm_from_string(v); }},
    {"train.hidden", "hidden layer widths",
     [](const RunConfig& c) { return join_ints(c.train.hidden); },
     [](RunConfig& c, const std::string& v) { c.train.hidden = parse_int_list("train.hidden", v); }},
    {"train.activation", "relu | tanh",
     [](const RunConfig& c) { return std::string(to_string(c.train.activation)); },
     [](RunConfig& c, const std::string& v) { c.train.activation = activation_from_string(v); }},
    {"train.w_open", "opening loss weight",
     [](const RunConfig& c) { return num(c.train.w_open); },
     [](RunConfig& c, const std::string& v) { c.train.w_open = parse_num("train.w_open", v); }},
    {"train.lambda_mode", "score | oracle | one",
     [](const RunConfig& c) { return std::string(to_string(c.train.lambda_mode)); },
     [](RunConfig& c, const std::string& v) { c.train.lambda_mode = lambda_mode_from_string(v); }},
    {"train.clamp_lambda", "clamp the score-derived weight to [0,1]",
     [](const RunConfig& c) { return std::string(c.train.clamp_lambda ? "true" : "false"); },
     [](RunConfig& c, const std::string& v) { c.train.clamp_lambda = parse_bool("train.clamp_lambda", v); }},
    {"baseline.T", "training timesteps of the time-varying baseline",
     [](const RunConfig& c) { return std::to_string(c.baseline_T); },
     [](RunConfig& c, const std::string& v) { c.baseline_T = static_cast<int>(parse_int("baseline.T", v)); }},
    {"eval.N", "iteration budget",
     [](const RunConfig& c) { return std::to_string(c.eval.N); },
     [](RunConfig& c, const std::string& v) { c.eval.N = static_cast<int>(parse_int("eval.N", v)); }},
    {"eval.delta", "early-termination threshold",
     [](const RunConfig& c) { return num(c.eval.delta); },
     [](RunConfig& c, const std::string& v) { c.eval.delta = parse_num("eval.delta", v); }},
    {"eval.early_termination", "",
     [](const RunConfig& c) { return std::string(c.eval.early_termination ? "true" : "false"); },
     [](RunConfig& c, const std::string& v) { c.eval.early_termination = parse_bool("eval.early_termination", v); }},
    {"eval.tau", "success radius; 'l' follows field.l",
     [](const RunConfig& c) { return c.tau ? num(*c.tau) : std::string("l"); },
     [](RunConfig& c, const std::string& v) {
       if (v == "l") c.tau.reset();
       else c.tau = parse_num("eval.tau", v);
     }},
    {"eval.episodes_per_scene", "",
     [](const RunConfig& c) { return std::to_string(c.eval.episodes_per_scene); },
     [](RunConfig& c, const std::string& v) { c.eval.episodes_per_scene = static_cast<int>(parse_int("eval.episodes_per_scene", v)); }},
    {"eval.seed", "initial-noise seed",
     [](const RunConfig& c) { return std::to_string(c.eval.seed); },
     [](RunConfig& c, const std::string& v) { c.eval.seed = parse_u64("eval.seed", v); }},
    {"eval.split", "train | val | test | all",
     [](const RunConfig& c) { return c.eval.split; },
     [](RunConfig& c, const std::string& v) {
       if (v != "all") split_from_string(v);
       c.eval.split = v;
     }},
    {"run.timing", "write wall-clock columns (otherwise nan)",
     [](const RunConfig& c) { return std::string(c.timing ? "true" : "false"); },
     [](RunConfig& c, const std::string& v) { c.timing = parse_bool("run.timing", v); }},
  };
  return keys;
}
// clang-format on

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (key == k.name) return k.set(cfg, value);
  throw ConfigError("unknown config key '" + key + "'");
}

/// Parses `section.key = value` lines on top of `base`.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'section.key = value'");
    try {
      set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(in);
}

/// Canonical text form; with `docs` each key carries its description.
inline std::string dump_config(const RunConfig& cfg, bool docs = false) {
  std::string out;
  for (const auto& k : detail::config_keys()) {
    std::string line = std::string(k.name) + " = " + k.get(cfg);
    if (docs && *k.doc) {
      line.resize(std::max<std::size_t>(line.size(), 34), ' ');
      line += std::string("# ") + k.doc;
    }
    out += line + '\n';
  }
  return out;
}

inline std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a(dump_config(cfg)); }

}  // namespace tudp
