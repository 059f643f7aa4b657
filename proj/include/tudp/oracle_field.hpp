#pragma once

// Closed-form velocity fields over the action space. These are the training
// targets' expectations and the reference every learned field is checked
// against.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "tudp/actionspace.hpp"

namespace tudp {

enum class MergeForm {
  literal,    // sum_i (1/k) p(y|mode_i) lambda_i eps_i, unnormalized
  posterior,  // sum_i w_i lambda_i eps_i with w_i the posterior over modes
};

struct FieldParams {
  double v = 0.5;       // velocity limitation; +inf disables the cap
  double l = 0.1;       // neighborhood radius
  double sigma = 0.5;   // std of noisy-action sampling
  double m_exp = -10.0; // score decay exponent
  MergeForm form = MergeForm::posterior;

  void validate() const {
    if (!(v > 0)) throw ConfigError("field.v must be > 0");
    if (!(l > 0)) throw ConfigError("field.l must be > 0");
    if (!(sigma > 0)) throw ConfigError("field.sigma must be > 0");
    if (l > v) throw ConfigError("field.l must not exceed field.v");
  }
};

/// v * (y - y_hat) / max(v, |y - y_hat|). Exact displacement within v of the
/// target, capped at magnitude v outside.
inline Vec conditional_velocity(const Vec& y, const Vec& y_hat, double v) {
  Vec diff = y - y_hat;
  if (std::isinf(v)) return diff;
  const double r = diff.norm();
  return diff * (v / std::max(v, r));
}

/// 0 when y lies within l of any mode other than mode i, else 1.
inline int correlation_weight(const Vec& y, std::size_t i, std::span<const Action> modes, double l) {
  double nearest_other = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < modes.size(); ++j)
    if (j != i) nearest_other = std::min(nearest_other, (y - modes[j].pos).norm());
  return nearest_other <= l ? 0 : 1;
}

/// Full d-dimensional isotropic Gaussian log density.
inline double log_gaussian_density(const Vec& y, const Vec& mean, double sigma) {
  const double d = static_cast<double>(y.size());
  return -(y - mean).squaredNorm() / (2.0 * sigma * sigma) -
         0.5 * d * std::log(2.0 * std::numbers::pi * sigma * sigma);
}

/// Posterior p(mode_i | y) under a uniform prior; log-space, max-subtracted.
inline std::vector<double> posterior_weights(const Vec& y, std::span<const Action> modes, double sigma) {
  std::vector<double> w(modes.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < modes.size(); ++i) {
    w[i] = -(y - modes[i].pos).squaredNorm() / (2.0 * sigma * sigma);
    top = std::max(top, w[i]);
  }
  double total = 0;
  for (auto& x : w) total += (x = std::exp(x - top));
  for (auto& x : w) x /= total;
  return w;
}

namespace detail {

template <class Gate, class Velocity>
Vec merged_field(const Vec& y, std::span<const Action> modes, const FieldParams& p, Gate&& gate, Velocity&& velocity) {
  Vec out = Vec::Zero(y.size());
  const std::size_t k = modes.size();
  if (p.form == MergeForm::posterior) {
    const auto w = posterior_weights(y, modes, p.sigma);
    for (std::size_t i = 0; i < k; ++i) {
      const double g = gate(i);
      if (w[i] == 0.0 || g == 0.0) continue;
      out += (w[i] * g) * velocity(y, modes[i].pos, p.v);
    }
  } else {
    // Underflowed densities contribute nothing; far from every mode this is 0.
    for (std::size_t i = 0; i < k; ++i) {
      const double g = gate(i);
      const double dens = std::exp(log_gaussian_density(y, modes[i].pos, p.sigma));
      if (dens == 0.0 || g == 0.0) continue;
      out += (dens * g / static_cast<double>(k)) * velocity(y, modes[i].pos, p.v);
    }
  }
  return out;
}

}  // namespace detail

/// Time-unified field: every mode's capped pull gated by its correlation
/// weight, merged per p.form. `velocity` replaces the conditional velocity
/// (used to inject faults in tests).
template <class Velocity>
Vec unified_field_with(const Vec& y, std::span<const Action> modes, const FieldParams& p, Velocity&& velocity) {
  return detail::merged_field(
      y, modes, p, [&](std::size_t i) { return double(correlation_weight(y, i, modes, p.l)); }, velocity);
}

inline Vec unified_field(const Vec& y, std::span<const Action> modes, const FieldParams& p) {
  return unified_field_with(y, modes, p, conditional_velocity);
}

inline Vec unified_field(const Vec& y, const Scene& scene, const FieldParams& p) {
  return unified_field(y, std::span<const Action>(scene.modes), p);
}

/// Same merge with every gate fixed at 1; biased at the modes when k >= 2.
inline Vec unweighted_field(const Vec& y, std::span<const Action> modes, const FieldParams& p) {
  return detail::merged_field(y, modes, p, [](std::size_t) { return 1.0; }, conditional_velocity);
}

inline Vec unweighted_field(const Vec& y, const Scene& scene, const FieldParams& p) {
  return unweighted_field(y, std::span<const Action>(scene.modes), p);
}

/// exp(m * relu(|y - y_hat| - l)): 1 on the closed neighborhood, decaying outside.
inline double score_label(const Vec& y, const Vec& y_hat, double l, double m_exp) {
  return std::exp(m_exp * std::max(0.0, (y - y_hat).norm() - l));
}

/// Posterior expectation of the score label; the squared-loss minimizer of
/// the score network at y.
inline double bayes_score(const Vec& y, std::span<const Action> modes, const FieldParams& p) {
  const auto w = posterior_weights(y, modes, p.sigma);
  double s = 0;
  for (std::size_t i = 0; i < modes.size(); ++i) s += w[i] * score_label(y, modes[i].pos, p.l, p.m_exp);
  return s;
}

inline double bayes_score(const Vec& y, const Scene& scene, const FieldParams& p) {
  return bayes_score(y, std::span<const Action>(scene.modes), p);
}

struct ModeBias {
  double unweighted = 0;
  double unified = 0;
};

/// Field magnitude evaluated at each mode, for the gated and ungated merge.
inline std::vector<ModeBias> field_bias_report(const Scene& scene, const FieldParams& p) {
  std::vector<ModeBias> out;
  for (const auto& m : scene.modes)
    out.push_back({unweighted_field(m.pos, scene, p).norm(), unified_field(m.pos, scene, p).norm()});
  return out;
}

}  // namespace tudp
