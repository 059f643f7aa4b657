#pragma once

// Standing verification battery: gradient vs finite differences, fixed
// points of the unified field, one-step convergence inside neighborhoods,
// and the bias contrast between gated and ungated merging.

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tudp/actionspace.hpp"
#include "tudp/neuralnet.hpp"
#include "tudp/oracle_field.hpp"
#include "tudp/training.hpp"

namespace tudp {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0;      // the measured quantity
  double threshold = 0;  // what it was compared against
  double seconds = 0;
  std::string detail;
};

inline nlohmann::json to_json(const CheckResult& r) {
  return {{"name", r.name},           {"passed", r.passed},   {"value", r.value},
          {"threshold", r.threshold}, {"seconds", r.seconds}, {"detail", r.detail}};
}

/// |a - b| / max(|a|, |b|), with the denominator floored at 1e-8 so that two
/// vanishing derivatives compare as equal.
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

struct GradientProbe {
  double max_rel_error = 0;
  int coordinates = 0;
};

/// Reverse-mode gradient against central differences at `probes` random
/// parameter coordinates.
inline GradientProbe probe_gradient(MlpParams params, const Batch& batch, const LossSpec& spec, int probes,
                                    Rng& rng, double h = 1e-5) {
  const Gradients g = grad(params, batch, spec);
  const std::size_t n = param_count(params);
  GradientProbe out;
  for (int k = 0; k < probes; ++k) {
    const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    double& w = param_at(params, idx);
    const double saved = w;
    w = saved + h;
    const double up = batch_loss(params, batch, spec);
    w = saved - h;
    const double down = batch_loss(params, batch, spec);
    w = saved;
    const double fd = (up - down) / (2 * h);
    out.max_rel_error = std::max(out.max_rel_error, relative_error(grad_at(g, idx), fd));
    ++out.coordinates;
  }
  return out;
}

/// Random network and batch shaped like one of the trainers' problems:
/// "score" (sigmoid score head), "action" (noise head) or "open" (open head).
inline std::pair<MlpParams, Batch> gradient_fixture(const std::string& which, LossSpec& spec, LossNorm norm,
                                                    std::uint64_t seed) {
  Rng rng = derive_rng(seed, {fnv1a(which)});
  const int d = 2, c = 5, bs = 16;
  std::vector<Head> heads;
  if (which == "score") {
    heads = {{"score", 0, 1, HeadKind::sigmoid}};
    spec = {{"score", norm == LossNorm::squared ? LossKind::l2_squared : LossKind::l2, 1.0}};
  } else {
    heads = {{"noise", 0, d, HeadKind::linear}, {"open", d, 1, HeadKind::sigmoid}};
    if (which == "action")
      spec = {{"noise", norm == LossNorm::squared ? LossKind::l2_squared : LossKind::l2, 1.0}};
    else
      spec = {{"open", LossKind::bce, 0.4}};
  }
  MlpParams p = make_mlp(c + d, {24, 24}, heads, Activation::tanh, rng);
  // Larger final-layer weights so sigmoid heads are away from 0.5 and the
  // probe exercises their curvature.
  p.weights.back() *= 10.0;
  Batch b;
  b.inputs.resize(c + d, bs);
  b.targets.resize(p.output_dim(), bs);
  b.weights.resize(bs);
  for (int i = 0; i < bs; ++i) {
    for (int r = 0; r < c + d; ++r) b.inputs(r, i) = draw_normal(rng);
    for (int r = 0; r < p.output_dim(); ++r) b.targets(r, i) = draw_uniform(rng, -0.5, 0.5);
    if (which == "score") b.targets(0, i) = draw_uniform(rng, 0.01, 1.0);
    if (which == "open") b.targets(d, i) = std::bernoulli_distribution(0.5)(rng) ? 1.0 : 0.0;
    b.weights(i) = draw_uniform(rng, 0.5, 1.5);
  }
  return {std::move(p), std::move(b)};
}

inline CheckResult check_gradients(std::uint64_t seed = 1, int probes = 200, LossNorm norm = LossNorm::squared) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r{"gradient_finite_difference", true, 0, 1e-4, 0, {}};
  for (const std::string which : {"score", "action", "open"}) {
    LossSpec spec;
    auto [p, b] = gradient_fixture(which, spec, norm, seed);
    Rng rng = derive_rng(seed, {0x6664ULL, fnv1a(which)});
    const auto probe = probe_gradient(p, b, spec, probes, rng);
    r.value = std::max(r.value, probe.max_rel_error);
    r.detail += which + "=" + fmt_double(probe.max_rel_error) + " ";
  }
  r.passed = r.value <= r.threshold;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

using FieldFn = std::function<Vec(const Vec&, const Scene&, const FieldParams&)>;

inline Vec default_unified(const Vec& y, const Scene& s, const FieldParams& p) { return unified_field(y, s, p); }

/// Scenes spanning d in {1,2,3}, k <= 4 (fewer where the line cannot fit
/// them), at the given separation.
inline std::vector<Scene> scan_scenes(int count, double s_min, std::uint64_t seed) {
  std::vector<Scene> out;
  for (int d = 1; d <= 3; ++d) {
    SuiteConfig sc;
    sc.d = d;
    sc.k_max = d == 1 ? std::min(4, static_cast<int>(std::floor(2.0 / s_min)) + 1) : 4;
    sc.s_min = s_min;
    sc.num_scenes = count / 3 + (d <= count % 3 ? 1 : 0);
    for (auto& s : generate_suite(sc, seed + static_cast<std::uint64_t>(d)).scenes) out.push_back(std::move(s));
  }
  return out;
}

/// Every mode must be an exact zero of the field, and one update from any
/// point at distance l/2 must move strictly closer to the mode.
inline CheckResult check_fixed_points(const std::vector<Scene>& scenes, FieldParams p, const FieldFn& field = default_unified,
                                      std::uint64_t seed = 3) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r{"oracle_fixed_point_scan", true, 0, 0, 0, {}};
  Rng rng = derive_rng(seed, {0x6670ULL});
  int modes = 0, not_contracting = 0;
  for (const MergeForm form : {MergeForm::posterior, MergeForm::literal}) {
    p.form = form;
    for (const auto& s : scenes)
      for (const auto& m : s.modes) {
        ++modes;
        r.value = std::max(r.value, field(m.pos, s, p).norm());
        for (int probe = 0; probe < 4; ++probe) {
          Vec dir = Vec(s.dim()).unaryExpr([&](double) { return draw_normal(rng); }).normalized();
          const Vec y = m.pos + 0.5 * p.l * dir;
          const Vec next = y - field(y, s, p);
          if (!((next - m.pos).norm() < (y - m.pos).norm())) ++not_contracting;
        }
      }
  }
  r.passed = r.value <= r.threshold && not_contracting == 0;
  r.detail = std::to_string(modes) + " mode evaluations, " + std::to_string(not_contracting) + " non-contracting probes";
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// One update from inside a neighborhood lands within `tol` of its mode.
inline CheckResult check_one_step(const std::vector<Scene>& scenes, const FieldParams& p, int samples = 1000,
                                  double tol = 1e-3, std::uint64_t seed = 5) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r{"one_step_neighborhood", true, 0, tol, 0, {}};
  Rng rng = derive_rng(seed, {0x6f6eULL});
  for (int i = 0; i < samples; ++i) {
    const Scene& s = scenes[std::uniform_int_distribution<std::size_t>(0, scenes.size() - 1)(rng)];
    const Action& m = s.modes[sample_mode_index(s, rng)];
    // Uniform in the closed ball of radius l.
    Vec dir = Vec(s.dim()).unaryExpr([&](double) { return draw_normal(rng); }).normalized();
    const double radius = p.l * std::pow(draw_uniform(rng, 0.0, 1.0), 1.0 / s.dim());
    const Vec y = m.pos + radius * dir;
    r.value = std::max(r.value, (y - unified_field(y, s, p) - m.pos).norm());
  }
  r.passed = r.value <= tol;
  r.detail = std::to_string(samples) + " samples";
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Brute-force value of the ungated posterior field at +1 for modes {-1,+1},
/// sigma = v = 0.5 (computed independently of this library).
inline constexpr double kSymmetricBias = 1.6767506523323908e-4;

/// Ungated field is nonzero at every mode of every k >= 2 scene; gated field
/// is exactly zero; the symmetric 1-D case matches the brute-force value.
inline CheckResult check_bias_contrast(const std::vector<Scene>& scenes, FieldParams p) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r{"bias_contrast", true, 0, 0.01, 0, {}};
  p.form = MergeForm::posterior;
  int zero_unweighted = 0, nonzero_unified = 0, multi = 0;
  for (const auto& s : scenes) {
    if (s.k() < 2) continue;
    ++multi;
    for (const auto& b : field_bias_report(s, p)) {
      zero_unweighted += !(b.unweighted > 0);
      nonzero_unified += b.unified != 0;
    }
  }
  Scene sym;
  sym.modes = {{Vec::Constant(1, -1.0), 0}, {Vec::Constant(1, 1.0), 0}};
  FieldParams sp{0.5, 0.1, 0.5, -10, MergeForm::posterior};
  const auto rep = field_bias_report(sym, sp);
  r.value = std::max(relative_error(rep[0].unweighted, kSymmetricBias), relative_error(rep[1].unweighted, kSymmetricBias));
  r.passed = zero_unweighted == 0 && nonzero_unified == 0 && r.value <= r.threshold && multi > 0;
  r.detail = std::to_string(multi) + " multi-modal scenes; symmetric case " + fmt_double(rep[1].unweighted);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Full battery with the standard parameters.
inline std::vector<CheckResult> run_check_battery(const FieldParams& base = {}, const FieldFn& field = default_unified) {
  std::vector<CheckResult> out;
  out.push_back(check_gradients(1, 200, LossNorm::squared));
  auto unsq = check_gradients(2, 200, LossNorm::unsquared);
  unsq.name = "gradient_finite_difference_unsquared";
  out.push_back(unsq);
  const auto scenes = scan_scenes(100, 2 * base.l + 0.05, 11);
  out.push_back(check_fixed_points(scenes, base, field));
  FieldParams sharp = base;
  sharp.sigma = 0.15;
  sharp.form = MergeForm::posterior;
  out.push_back(check_one_step(scan_scenes(60, 6 * sharp.sigma, 13), sharp));
  out.push_back(check_bias_contrast(scenes, base));
  return out;
}

}  // namespace tudp
