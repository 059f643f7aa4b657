#pragma once

// `tudp-lab` subcommands. run_cli() is the whole program minus main(), so
// tests can drive it in-process.
//
// Exit codes: 0 ok, 2 usage/config error, 3 numeric failure or failed check,
// 4 infeasible suite generation.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tudp/actionspace.hpp"
#include "tudp/checks.hpp"
#include "tudp/config.hpp"
#include "tudp/denoiser.hpp"
#include "tudp/evaluation.hpp"
#include "tudp/training.hpp"

namespace tudp {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitNumeric = 3, kExitInfeasible = 4 };

namespace cli {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;

  RunConfig resolve() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    if (workers) cfg.eval.workers = *workers;
    cfg.validate();
    return cfg;
  }
};

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "run config file (section.key = value)");
  sub->add_option("--set", c.sets, "override a config key, e.g. --set field.l=0.2")->take_all();
}

inline std::string provenance_line(const RunConfig& cfg, std::uint64_t seed) {
  return std::string("tudp-lab ") + std::string(kVersion) + " config=" + hex64(config_hash(cfg)) + " seed=" + std::to_string(seed);
}

inline nlohmann::json provenance_json(const RunConfig& cfg, std::uint64_t seed) {
  return {{"tool", "tudp-lab"}, {"version", kVersion}, {"config_hash", hex64(config_hash(cfg))}, {"seed", seed}};
}

inline std::ofstream open_out(const std::string& path, bool binary = false) {
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  return os;
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

inline void write_json(const std::string& path, const nlohmann::json& j) { open_out(path) << j.dump(1) << '\n'; }

inline TaskSuite read_suite(const std::string& path) {
  try {
    return suite_from_json(read_json(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path + "' is not a suite: " + e.what());
  }
}

template <class Loader>
auto read_checkpoint(const std::string& path, Loader&& load) {
  try {
    return load(read_json(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path + "' is not a checkpoint: " + e.what());
  }
}

inline std::string timed(double ms, bool timing) { return timing ? fmt_double(ms) : "nan"; }

inline void write_train_log(const std::string& path, const TrainedNet& net, const RunConfig& cfg) {
  if (path.empty()) return;
  auto os = open_out(path);
  os << "# " << provenance_line(cfg, net.config.seed) << '\n';
  os << "step,lr,loss,wall_ms\n";
  for (const auto& r : net.log)
    os << r.step << ',' << fmt_double(r.lr) << ',' << fmt_double(r.loss) << ',' << timed(r.wall_ms, cfg.timing) << '\n';
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!detail::trim(item).empty()) out.push_back(detail::trim(item));
  return out;
}

struct TrainArgs {
  std::string suite, out, log, resume;
  std::optional<std::int64_t> until;
};

inline void add_train_args(CLI::App* sub, TrainArgs& a) {
  sub->add_option("--suite", a.suite, "suite JSON")->required();
  sub->add_option("--out", a.out, "checkpoint path")->required();
  sub->add_option("--log", a.log, "training-log CSV path");
  sub->add_option("--resume", a.resume, "continue from this checkpoint");
  sub->add_option("--until", a.until, "stop after this many total steps");
}

/// Resolves the policy named on the command line.
struct PolicyHolder {
  std::optional<DiffusionNet> tudp;
  std::optional<BaselineNet> baseline;
  Policy policy;

  static PolicyHolder load(const std::string& kind, const std::string& ckpt, const TaskSuite& suite,
                           const FieldParams& field) {
    PolicyHolder h;
    if (kind == "oracle") {
      h.policy = OraclePolicy{field};
      return h;
    }
    if (ckpt.empty()) throw ConfigError("policy '" + kind + "' needs a checkpoint");
    if (kind == "tudp") {
      h.tudp = read_checkpoint(ckpt, diffusion_net_from_json);
      check_suite(*h.tudp, suite);
    } else if (kind == "baseline") {
      h.baseline = read_checkpoint(ckpt, baseline_net_from_json);
      check_suite(*h.baseline, suite);
    } else {
      throw ConfigError("unknown policy '" + kind + "' (tudp | oracle | baseline)");
    }
    return h;
  }

  // The variant holds raw pointers into this object, so bind them late.
  const Policy& get() {
    if (tudp) policy = TudpPolicy{&*tudp};
    if (baseline) policy = BaselinePolicy{&*baseline};
    return policy;
  }
};

}  // namespace cli

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  using namespace cli;
  CLI::App app{"Desk-scale lab for a time-unified diffusion policy", "tudp-lab"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Common common;

  // gen
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "generate a task suite");
  add_common(gen, common);
  gen->add_option("--seed", common.seed, "suite seed (default suite.seed)");
  gen->add_option("--out", gen_out, "suite JSON path")->required();

  // training
  TrainArgs ta;
  std::string score_ckpt;
  bool oracle_lambda = false;
  auto* tscore = app.add_subcommand("train-score", "phase 1: action score network");
  auto* tpolicy = app.add_subcommand("train-policy", "phase 2: time-unified diffusion network");
  auto* tbase = app.add_subcommand("train-baseline", "time-varying DDPM baseline");
  for (auto* sub : {tscore, tpolicy, tbase}) {
    add_common(sub, common);
    add_train_args(sub, ta);
    sub->add_option("--seed", common.seed, "training seed (default train.seed)");
  }
  tpolicy->add_option("--score", score_ckpt, "phase-1 checkpoint");
  tpolicy->add_flag("--oracle-lambda", oracle_lambda, "gate with the exact correlation weight instead of the score net");

  // eval / sweep / heatmap / ablate
  std::string suite_path, policy_kind = "tudp", ckpt, eval_out, traces_out;
  auto* eval = app.add_subcommand("eval", "success report of one policy");
  add_common(eval, common);
  eval->add_option("--suite", suite_path)->required();
  eval->add_option("--policy", policy_kind, "tudp | oracle | baseline")->capture_default_str();
  eval->add_option("--ckpt", ckpt, "checkpoint for tudp or baseline");
  eval->add_option("--out", eval_out, "CSV path")->required();
  eval->add_option("--traces", traces_out, "JSONL trace path");
  eval->add_option("--seed", common.seed, "episode seed (default eval.seed)");
  eval->add_option("--workers", common.workers, "episode-parallel workers");

  std::string policy_b = "baseline", ckpt_b, ns_text = "1,2,5,10,50,100";
  auto* sweep = app.add_subcommand("sweep", "paired success over iteration budgets");
  add_common(sweep, common);
  sweep->add_option("--suite", suite_path)->required();
  sweep->add_option("--policy-a", policy_kind, "tudp | oracle | baseline")->capture_default_str();
  sweep->add_option("--ckpt-a", ckpt);
  sweep->add_option("--policy-b", policy_b, "tudp | oracle | baseline")->capture_default_str();
  sweep->add_option("--ckpt-b", ckpt_b);
  sweep->add_option("--Ns", ns_text, "comma-separated iteration budgets")->capture_default_str();
  sweep->add_option("--out", eval_out, "CSV path")->required();
  sweep->add_option("--seed", common.seed, "episode seed (default eval.seed)");
  sweep->add_option("--workers", common.workers, "episode-parallel workers");

  int scene_id = 0, resolution = 41;
  std::string source = "unified", axes = "0,1", pgm_out;
  std::vector<double> fixed;
  double lo = -1.0, hi = 1.0;
  auto* heat = app.add_subcommand("heatmap", "field magnitude on a 2-D slice");
  add_common(heat, common);
  heat->add_option("--suite", suite_path)->required();
  heat->add_option("--scene", scene_id)->capture_default_str();
  heat->add_option("--source", source, "unified | unweighted | net")->capture_default_str();
  heat->add_option("--ckpt", ckpt, "diffusion checkpoint for --source net");
  heat->add_option("--resolution", resolution)->capture_default_str();
  heat->add_option("--axes", axes, "two slice axes")->capture_default_str();
  heat->add_option("--fixed", fixed, "values of the remaining coordinates")->take_all();
  heat->add_option("--lo", lo)->capture_default_str();
  heat->add_option("--hi", hi)->capture_default_str();
  heat->add_option("--out", eval_out, "CSV path")->required();
  heat->add_option("--pgm", pgm_out, "PGM (P5) path");

  std::string param, values_text;
  auto* ablate = app.add_subcommand("ablate", "retrain and evaluate across one parameter");
  add_common(ablate, common);
  ablate->add_option("--suite", suite_path)->required();
  ablate->add_option("--param", param, "l | sigma | v | lambda-mode | early-termination")->required();
  ablate->add_option("--values", values_text, "comma-separated values")->required();
  ablate->add_option("--out", eval_out, "CSV path")->required();
  ablate->add_option("--workers", common.workers, "episode-parallel workers");

  std::string check_out;
  auto* check = app.add_subcommand("check", "run the verification battery");
  add_common(check, common);
  check->add_option("--out", check_out, "JSON report path (default: stdout)");

  bool docs = true;
  auto* defaults = app.add_subcommand("defaults", "print the default config");
  defaults->add_flag("!--bare", docs, "omit descriptions");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    // exit() prints help/version to `out`, errors to `err`.
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*defaults) {
      out << dump_config(RunConfig{}, docs);
      return kExitOk;
    }

    RunConfig cfg = common.resolve();

    if (*gen) {
      if (common.seed) cfg.seed = *common.seed;
      const TaskSuite suite = generate_suite(cfg.suite, cfg.seed);
      nlohmann::json j = to_json(suite);
      j["provenance"] = provenance_json(cfg, cfg.seed);
      write_json(gen_out, j);
      out << "suite " << gen_out << " scenes=" << suite.scenes.size() << " checksum=" << hex64(suite.signature())
          << '\n';
      return kExitOk;
    }

    if (*tscore || *tpolicy || *tbase) {
      if (common.seed) cfg.train.seed = *common.seed;
      const TaskSuite suite = read_suite(ta.suite);
      const std::int64_t until = ta.until.value_or(std::numeric_limits<std::int64_t>::max());
      auto finish = [&](const TrainedNet& net, nlohmann::json j) {
        j["provenance"] = provenance_json(cfg, net.config.seed);
        write_json(ta.out, j);
        write_train_log(ta.log, net, cfg);
        out << "checkpoint " << ta.out << " step=" << net.step << '/' << net.config.total_steps;
        if (!net.log.empty()) out << " loss=" << fmt_double(net.log.back().loss);
        out << '\n';
        return kExitOk;
      };

      if (*tscore) {
        ScoreNet net = ta.resume.empty() ? init_score_net(suite, cfg.field, cfg.train)
                                         : read_checkpoint(ta.resume, score_net_from_json);
        continue_score_training(net, suite, until);
        return finish(net, checkpoint_json(net, "score"));
      }
      if (*tpolicy) {
        if (oracle_lambda) cfg.train.lambda_mode = LambdaMode::oracle;
        DiffusionNet net = ta.resume.empty() ? init_diffusion_net(suite, cfg.field, cfg.train)
                                             : read_checkpoint(ta.resume, diffusion_net_from_json);
        std::optional<ScoreNet> score;
        if (net.config.lambda_mode == LambdaMode::score_net) {
          if (score_ckpt.empty()) throw ConfigError("train-policy needs --score (or --oracle-lambda)");
          score = read_checkpoint(score_ckpt, score_net_from_json);
          check_suite(*score, suite);
        }
        continue_diffusion_training(net, suite, score ? &*score : nullptr, until);
        return finish(net, checkpoint_json(net, "diffusion"));
      }
      BaselineNet net = ta.resume.empty()
                            ? init_baseline_net(suite, cfg.train, BaselineSchedule::cosine(cfg.baseline_T))
                            : read_checkpoint(ta.resume, baseline_net_from_json);
      continue_baseline_training(net, suite, until);
      return finish(net, baseline_checkpoint_json(net));
    }

    if (*check) {
      const auto results = run_check_battery(cfg.field);
      bool ok = true;
      nlohmann::json report;
      report["provenance"] = provenance_json(cfg, 0);
      for (const auto& r : results) {
        ok = ok && r.passed;
        nlohmann::json j = to_json(r);
        if (!cfg.timing) j["seconds"] = nullptr;
        report["checks"].push_back(j);
        err << (r.passed ? "PASS " : "FAIL ") << r.name << " value=" << fmt_double(r.value)
            << " threshold=" << fmt_double(r.threshold) << '\n';
      }
      report["passed"] = ok;
      if (check_out.empty()) out << report.dump(1) << '\n';
      else write_json(check_out, report);
      return ok ? kExitOk : kExitNumeric;
    }

    const TaskSuite suite = read_suite(suite_path);
    EvalConfig ecfg = cfg.resolved_eval();
    if (common.seed) ecfg.seed = *common.seed;
    const std::string header = "# " + provenance_line(cfg, ecfg.seed) + '\n';

    if (*eval) {
      auto holder = PolicyHolder::load(policy_kind, ckpt, suite, cfg.field);
      const Policy& policy = holder.get();
      const auto episodes = run_episodes(policy, suite, ecfg, !traces_out.empty());
      const EvalReport rep = summarize(episodes, suite, policy, ecfg);
      auto os = open_out(eval_out);
      os << header << "# policy=" << rep.policy << " suite=" << rep.suite_id << " N=" << ecfg.N
         << " tau=" << fmt_double(ecfg.tau) << " (success is the tau-ball proxy: nearest mode within tau, open bit matches)\n";
      os << "scene_id,episodes,success,mean_iters,early_rate,mean_ms\n";
      for (const auto& s : rep.scenes)
        os << s.scene_id << ',' << s.episodes << ',' << fmt_double(s.success()) << ',' << fmt_double(s.mean_iters)
           << ',' << fmt_double(s.early_rate) << ',' << timed(s.median_ms, ecfg.timing) << '\n';
      int total = 0;
      for (const auto& s : rep.scenes) total += s.episodes;
      os << "all," << total << ',' << fmt_double(rep.success_rate) << ',' << fmt_double(rep.mean_iters) << ','
         << fmt_double(rep.early_rate) << ',' << timed(rep.median_ms, ecfg.timing) << '\n';
      if (!traces_out.empty()) {
        auto ts = open_out(traces_out);
        const auto scenes = eval_scenes(suite, ecfg.split);
        for (std::size_t i = 0; i < scenes.size(); ++i)
          for (const auto& e : episodes[i]) ts << trace_to_json(e.trace, scenes[i]->id, ecfg.seed).dump() << '\n';
      }
      out << rep.policy << " success=" << fmt_double(rep.success_rate) << " (tau-ball proxy) mean_iters="
          << fmt_double(rep.mean_iters) << '\n';
      return kExitOk;
    }

    if (*sweep) {
      std::vector<int> Ns;
      for (const auto& s : split_list(ns_text)) Ns.push_back(static_cast<int>(detail::parse_int("--Ns", s)));
      auto a = PolicyHolder::load(policy_kind, ckpt, suite, cfg.field);
      auto b = PolicyHolder::load(policy_b, ckpt_b, suite, cfg.field);
      const auto rows = iteration_sweep(a.get(), b.get(), suite, Ns, ecfg);
      auto os = open_out(eval_out);
      os << header << "# a=" << policy_name(a.get()) << " b=" << policy_name(b.get())
         << " tau=" << fmt_double(ecfg.tau) << " (tau-ball proxy)\n";
      os << "N,success_a,success_b\n";
      for (const auto& r : rows) {
        os << r.N << ',' << fmt_double(r.success_a) << ',' << fmt_double(r.success_b) << '\n';
        out << "N=" << r.N << " a=" << fmt_double(r.success_a) << " b=" << fmt_double(r.success_b) << '\n';
      }
      return kExitOk;
    }

    if (*heat) {
      if (scene_id < 0 || scene_id >= static_cast<int>(suite.scenes.size()))
        throw ConfigError("--scene out of range");
      const Scene& scene = suite.scene(scene_id);
      const auto ax = split_list(axes);
      if (ax.size() != 2) throw ConfigError("--axes expects two indices");
      SliceSpec slice;
      slice.axis_x = static_cast<int>(detail::parse_int("--axes", ax[0]));
      slice.axis_y = static_cast<int>(detail::parse_int("--axes", ax[1]));
      slice.lo = lo;
      slice.hi = hi;
      slice.fixed = Vec::Zero(scene.dim());
      for (std::size_t i = 0; i < fixed.size() && i < static_cast<std::size_t>(scene.dim()); ++i)
        slice.fixed(static_cast<Eigen::Index>(i)) = fixed[i];
      std::optional<DiffusionNet> net;
      const FieldSource src = field_source_from_string(source);
      if (src == FieldSource::trained) {
        if (ckpt.empty()) throw ConfigError("--source net needs --ckpt");
        net = read_checkpoint(ckpt, diffusion_net_from_json);
        check_suite(*net, suite);
      }
      const HeatmapGrid g = field_heatmap(src, scene, cfg.field, net ? &*net : nullptr, slice, resolution);
      auto os = open_out(eval_out);
      os << header;
      write_heatmap_csv(os, g);
      if (!pgm_out.empty()) {
        auto ps = open_out(pgm_out, true);
        write_heatmap_pgm(ps, g, provenance_line(cfg, ecfg.seed));
      }
      out << "heatmap " << eval_out << " source=" << source << " max=" << fmt_double(*std::max_element(g.magnitude.begin(), g.magnitude.end())) << '\n';
      return kExitOk;
    }

    if (*ablate) {
      const auto values = split_list(values_text);
      AblationSetup setup{suite, cfg.field, cfg.train, ecfg};
      const auto rows = ablation_sweep(param, values, setup);
      auto os = open_out(eval_out);
      os << header << "# tau=" << fmt_double(ecfg.tau) << " fixed across rows (tau-ball proxy)\n";
      os << "param,value,success,mean_ms\n";
      for (const auto& r : rows) {
        os << r.param << ',' << r.value << ',' << fmt_double(r.success) << ',' << timed(r.median_ms, ecfg.timing)
           << '\n';
        out << r.param << '=' << r.value << " success=" << fmt_double(r.success)
            << " mean_iters=" << fmt_double(r.mean_iters) << '\n';
      }
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InfeasibleError& e) {
    err << "infeasible: " << e.what() << '\n';
    return kExitInfeasible;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitConfig;
}

}  // namespace tudp
