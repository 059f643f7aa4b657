#pragma once

// Small fully-connected networks: batched forward pass, exact reverse-mode
// gradients for the handful of losses the trainers need, Adam and a cosine
// learning-rate schedule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tudp/actionspace.hpp"
#include "tudp/common.hpp"

namespace tudp {

enum class Activation { relu, tanh };
enum class HeadKind { linear, sigmoid };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }
inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

/// A named slice [offset, offset + width) of the final layer.
struct Head {
  std::string name;
  int offset = 0;
  int width = 1;
  HeadKind kind = HeadKind::linear;
};

/// Inputs are standardized as (x - mean) / scale before the first layer.
struct InputNorm {
  Vec mean;
  Vec scale;
};

struct MlpParams {
  std::vector<int> layer_dims;
  Activation activation = Activation::relu;
  std::vector<Mat> weights;  // weights[i] is layer_dims[i+1] x layer_dims[i]
  std::vector<Vec> biases;
  std::vector<Head> heads;
  InputNorm norm;

  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  std::size_t num_layers() const { return weights.size(); }

  const Head& head(const std::string& name) const {
    for (const auto& h : heads)
      if (h.name == name) return h;
    throw ConfigError("network has no head '" + name + "'");
  }

  bool has_head(const std::string& name) const {
    return std::any_of(heads.begin(), heads.end(), [&](const Head& h) { return h.name == name; });
  }

  void check_shapes() const {
    if (layer_dims.size() < 2 || weights.size() != layer_dims.size() - 1 || biases.size() != weights.size())
      throw ConfigError("mlp: layer count mismatch");
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i].rows() != layer_dims[i + 1] || weights[i].cols() != layer_dims[i] ||
          biases[i].size() != layer_dims[i + 1])
        throw ConfigError("mlp: shape mismatch at layer " + std::to_string(i));
    }
    if (norm.mean.size() != input_dim() || norm.scale.size() != input_dim())
      throw ConfigError("mlp: normalization size mismatch");
    for (const auto& h : heads)
      if (h.offset < 0 || h.width < 1 || h.offset + h.width > output_dim())
        throw ConfigError("mlp: head '" + h.name + "' out of range");
  }

  bool finite() const {
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (!weights[i].allFinite() || !biases[i].allFinite()) return false;
    return true;
  }
};

/// He-style uniform init for the hidden layers; the last layer starts small
/// so initial predictions sit near zero (linear heads) or 0.5 (sigmoid heads).
inline MlpParams make_mlp(int input_dim, const std::vector<int>& hidden, std::vector<Head> heads,
                          Activation act, Rng& rng) {
  MlpParams p;
  int out_dim = 0;
  for (const auto& h : heads) out_dim = std::max(out_dim, h.offset + h.width);
  p.layer_dims.push_back(input_dim);
  for (int h : hidden) p.layer_dims.push_back(h);
  p.layer_dims.push_back(out_dim);
  p.activation = act;
  p.heads = std::move(heads);
  for (std::size_t i = 0; i + 1 < p.layer_dims.size(); ++i) {
    const int fan_in = p.layer_dims[i];
    const bool last = i + 2 == p.layer_dims.size();
    const double gain = act == Activation::relu ? std::sqrt(2.0) : 1.0;
    const double bound = (last ? 0.1 : gain) * std::sqrt(3.0 / fan_in);
    Mat w(p.layer_dims[i + 1], fan_in);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = draw_uniform(rng, -bound, bound);
    p.weights.push_back(std::move(w));
    p.biases.push_back(Vec::Zero(p.layer_dims[i + 1]));
  }
  p.norm.mean = Vec::Zero(input_dim);
  p.norm.scale = Vec::Ones(input_dim);
  return p;
}

inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

namespace detail {

inline void activate(Mat& z, Activation act) {
  if (act == Activation::relu)
    z = z.cwiseMax(0.0);
  else
    z = z.array().tanh().matrix();
}

// Head nonlinearities applied row-slice-wise to the raw final layer.
inline void apply_heads(Mat& out, const MlpParams& p) {
  for (const auto& h : p.heads)
    if (h.kind == HeadKind::sigmoid)
      out.middleRows(h.offset, h.width) = out.middleRows(h.offset, h.width).unaryExpr([](double z) { return sigmoid(z); });
}

struct Tape {
  std::vector<Mat> acts;  // acts[0] is the normalized input, acts[i] post-activation of layer i
  Mat out;                // after head nonlinearities
};

inline Tape forward_tape(const MlpParams& p, const Mat& inputs) {
  if (inputs.rows() != p.input_dim())
    throw ConfigError("mlp: input has " + std::to_string(inputs.rows()) + " features, expected " +
                      std::to_string(p.input_dim()));
  Tape t;
  t.acts.reserve(p.num_layers());
  t.acts.push_back(((inputs.colwise() - p.norm.mean).array().colwise() / p.norm.scale.array()).matrix());
  for (std::size_t i = 0; i < p.num_layers(); ++i) {
    Mat z = p.weights[i] * t.acts.back();
    z.colwise() += p.biases[i];
    if (i + 1 < p.num_layers()) {
      activate(z, p.activation);
      t.acts.push_back(std::move(z));
    } else {
      apply_heads(z, p);
      t.out = std::move(z);
    }
  }
  return t;
}

}  // namespace detail

/// Batched forward pass; one sample per column. Returns the final layer with
/// each head's nonlinearity applied.
inline Mat forward(const MlpParams& p, const Mat& inputs) { return detail::forward_tape(p, inputs).out; }

inline Vec forward(const MlpParams& p, const Vec& input) {
  Mat in = input;
  return forward(p, in).col(0);
}

// ---- losses -----------------------------------------------------------------

enum class LossKind {
  l2_squared,  // |pred - target|^2
  l2,          // |pred - target|
  bce,         // binary cross entropy on a sigmoid head, prediction clamped to [1e-7, 1 - 1e-7]
};

struct LossTerm {
  std::string head;
  LossKind kind = LossKind::l2_squared;
  double weight = 1.0;
};

using LossSpec = std::vector<LossTerm>;

/// One sample per column. Target rows line up with the network output; rows
/// not covered by a loss term are ignored.
struct Batch {
  Mat inputs;
  Mat targets;
  Vec weights;  // per-sample; empty means all ones

  Eigen::Index size() const { return inputs.cols(); }
  double weight(Eigen::Index b) const { return weights.size() == 0 ? 1.0 : weights(b); }
};

inline constexpr double kBceClamp = 1e-7;

inline double bce(double pred, double label) {
  const double pc = std::clamp(pred, kBceClamp, 1.0 - kBceClamp);
  return -(label * std::log(pc) + (1.0 - label) * std::log(1.0 - pc));
}

struct Gradients {
  std::vector<Mat> dw;
  std::vector<Vec> db;
  double loss = 0;
  Vec per_sample_loss;
};

namespace detail {

// Per-sample loss and dL/d(raw final layer) for one column.
inline double loss_and_seed(const MlpParams& p, const LossSpec& spec, const Eigen::Ref<const Vec>& out,
                            const Eigen::Ref<const Vec>& target, Eigen::Ref<Vec> seed) {
  double total = 0;
  for (const auto& term : spec) {
    const Head& h = p.head(term.head);
    auto pred = out.segment(h.offset, h.width);
    auto tgt = target.segment(h.offset, h.width);
    auto s = seed.segment(h.offset, h.width);
    const Vec diff = pred - tgt;
    Vec dpred(h.width);
    switch (term.kind) {
      case LossKind::l2_squared:
        total += term.weight * diff.squaredNorm();
        dpred = 2.0 * term.weight * diff;
        break;
      case LossKind::l2: {
        const double n = diff.norm();
        total += term.weight * n;
        dpred = n > 0 ? Vec(term.weight * diff / n) : Vec::Zero(h.width);
        break;
      }
      case LossKind::bce: {
        if (h.kind != HeadKind::sigmoid) throw ConfigError("bce loss needs a sigmoid head");
        // Gradient taken straight to the logit, valid while unclamped.
        Vec dz(h.width);
        for (int j = 0; j < h.width; ++j) {
          total += term.weight * bce(pred(j), tgt(j));
          const bool clamped = pred(j) < kBceClamp || pred(j) > 1.0 - kBceClamp;
          dz(j) = clamped ? 0.0 : term.weight * (pred(j) - tgt(j));
        }
        s += dz;
        continue;
      }
    }
    if (h.kind == HeadKind::sigmoid) dpred = dpred.cwiseProduct(pred.cwiseProduct((1.0 - pred.array()).matrix()));
    s += dpred;
  }
  return total;
}

}  // namespace detail

/// Exact gradient of the weighted mean per-sample loss.
inline Gradients grad(const MlpParams& p, const Batch& batch, const LossSpec& spec) {
  if (batch.size() == 0) throw ConfigError("grad: empty batch");
  if (batch.targets.rows() != p.output_dim() || batch.targets.cols() != batch.size())
    throw ConfigError("grad: target shape mismatch");
  const auto tape = detail::forward_tape(p, batch.inputs);
  const Eigen::Index n = batch.size();
  const double inv_n = 1.0 / static_cast<double>(n);

  Gradients g;
  g.per_sample_loss.resize(n);
  Mat delta = Mat::Zero(p.output_dim(), n);
  for (Eigen::Index b = 0; b < n; ++b) {
    const double l = detail::loss_and_seed(p, spec, tape.out.col(b), batch.targets.col(b), delta.col(b));
    if (!std::isfinite(l)) throw NumericError("non-finite loss at batch sample " + std::to_string(b));
    g.per_sample_loss(b) = l;
    const double w = batch.weight(b) * inv_n;
    g.loss += w * l;
    delta.col(b) *= w;
  }

  const std::size_t layers = p.num_layers();
  g.dw.resize(layers);
  g.db.resize(layers);
  for (std::size_t i = layers; i-- > 0;) {
    g.dw[i].noalias() = delta * tape.acts[i].transpose();
    g.db[i] = delta.rowwise().sum();
    if (i == 0) break;
    Mat back = p.weights[i].transpose() * delta;
    const Mat& a = tape.acts[i];
    if (p.activation == Activation::relu)
      back = back.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
    else
      back = back.cwiseProduct((1.0 - a.array().square()).matrix());
    delta = std::move(back);
  }
  return g;
}

/// Weighted mean loss without gradients.
inline double batch_loss(const MlpParams& p, const Batch& batch, const LossSpec& spec) {
  const Mat out = forward(p, batch.inputs);
  Vec scratch = Vec::Zero(p.output_dim());
  double total = 0;
  for (Eigen::Index b = 0; b < batch.size(); ++b)
    total += batch.weight(b) * detail::loss_and_seed(p, spec, out.col(b), batch.targets.col(b), scratch);
  return total / static_cast<double>(batch.size());
}

// Flat indexing over all weights then biases, layer by layer.
inline std::size_t param_count(const MlpParams& p) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < p.num_layers(); ++i) n += p.weights[i].size() + p.biases[i].size();
  return n;
}

template <class Weights, class Biases>
decltype(auto) flat_ref(Weights& w, Biases& b, std::size_t idx) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto nw = static_cast<std::size_t>(w[i].size());
    if (idx < nw) return w[i].data()[idx];
    idx -= nw;
    const auto nb = static_cast<std::size_t>(b[i].size());
    if (idx < nb) return b[i].data()[idx];
    idx -= nb;
  }
  throw std::out_of_range("flat parameter index");
}

inline double& param_at(MlpParams& p, std::size_t idx) {
  return flat_ref(p.weights, p.biases, idx);
}
inline double grad_at(const Gradients& g, std::size_t idx) {
  return flat_ref(g.dw, g.db, idx);
}

// ---- optimizer --------------------------------------------------------------

struct AdamState {
  std::vector<Mat> m_w, v_w;
  std::vector<Vec> m_b, v_b;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState like(const MlpParams& p) {
    AdamState s;
    for (std::size_t i = 0; i < p.num_layers(); ++i) {
      s.m_w.push_back(Mat::Zero(p.weights[i].rows(), p.weights[i].cols()));
      s.v_w.push_back(s.m_w.back());
      s.m_b.push_back(Vec::Zero(p.biases[i].size()));
      s.v_b.push_back(s.m_b.back());
    }
    return s;
  }
};

/// Bias-corrected Adam update, in place.
inline void adam_step(MlpParams& p, const Gradients& g, AdamState& s, double lr) {
  if (s.m_w.size() != p.num_layers() || g.dw.size() != p.num_layers())
    throw ConfigError("adam: shape mismatch");
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    m = s.beta1 * m + (1.0 - s.beta1) * grad;
    v = s.beta2 * v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + s.eps);
  };
  for (std::size_t i = 0; i < p.num_layers(); ++i) {
    update(p.weights[i], g.dw[i], s.m_w[i], s.v_w[i]);
    update(p.biases[i], g.db[i], s.m_b[i], s.v_b[i]);
  }
  if (!p.finite()) throw NumericError("adam: non-finite parameters after step " + std::to_string(s.step));
}

/// base * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(std::int64_t step, std::int64_t total, double base) {
  if (total <= 0) return base;
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---- serialization ----------------------------------------------------------

inline nlohmann::json mat_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat mat_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(j.size()) != rows) throw ConfigError("matrix row count mismatch");
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (static_cast<Eigen::Index>(row.size()) != cols) throw ConfigError("matrix column count mismatch");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline nlohmann::json to_json(const MlpParams& p) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : p.heads)
    heads.push_back({{"name", h.name}, {"offset", h.offset}, {"width", h.width},
                     {"kind", h.kind == HeadKind::sigmoid ? "sigmoid" : "linear"}});
  nlohmann::json w = nlohmann::json::array(), b = nlohmann::json::array();
  for (std::size_t i = 0; i < p.num_layers(); ++i) {
    w.push_back(mat_to_json(p.weights[i]));
    b.push_back(vec_to_json(p.biases[i]));
  }
  return {{"layer_dims", p.layer_dims},
          {"activation", to_string(p.activation)},
          {"heads", heads},
          {"weights", w},
          {"biases", b},
          {"normalization", {{"mean", vec_to_json(p.norm.mean)}, {"scale", vec_to_json(p.norm.scale)}}}};
}

inline MlpParams mlp_from_json(const nlohmann::json& j) {
  MlpParams p;
  p.layer_dims = j.at("layer_dims").get<std::vector<int>>();
  p.activation = activation_from_string(j.at("activation").get<std::string>());
  for (const auto& h : j.at("heads"))
    p.heads.push_back({h.at("name").get<std::string>(), h.at("offset").get<int>(), h.at("width").get<int>(),
                       h.at("kind").get<std::string>() == "sigmoid" ? HeadKind::sigmoid : HeadKind::linear});
  const auto& w = j.at("weights");
  const auto& b = j.at("biases");
  if (w.size() + 1 != p.layer_dims.size() || b.size() != w.size()) throw ConfigError("mlp: layer count mismatch");
  for (std::size_t i = 0; i < w.size(); ++i) {
    p.weights.push_back(mat_from_json(w[i], p.layer_dims[i + 1], p.layer_dims[i]));
    p.biases.push_back(vec_from_json(b[i]));
  }
  p.norm.mean = vec_from_json(j.at("normalization").at("mean"));
  p.norm.scale = vec_from_json(j.at("normalization").at("scale"));
  p.check_shapes();
  return p;
}

inline nlohmann::json to_json(const AdamState& s) {
  nlohmann::json mw = nlohmann::json::array(), vw = nlohmann::json::array(), mb = nlohmann::json::array(),
                 vb = nlohmann::json::array();
  for (std::size_t i = 0; i < s.m_w.size(); ++i) {
    mw.push_back(mat_to_json(s.m_w[i]));
    vw.push_back(mat_to_json(s.v_w[i]));
    mb.push_back(vec_to_json(s.m_b[i]));
    vb.push_back(vec_to_json(s.v_b[i]));
  }
  return {{"step", s.step}, {"beta1", s.beta1}, {"beta2", s.beta2}, {"eps", s.eps},
          {"m_w", mw},      {"v_w", vw},        {"m_b", mb},        {"v_b", vb}};
}

inline AdamState adam_from_json(const nlohmann::json& j, const MlpParams& like) {
  AdamState s;
  s.step = j.at("step").get<std::int64_t>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  for (std::size_t i = 0; i < like.num_layers(); ++i) {
    const auto r = like.weights[i].rows(), c = like.weights[i].cols();
    s.m_w.push_back(mat_from_json(j.at("m_w")[i], r, c));
    s.v_w.push_back(mat_from_json(j.at("v_w")[i], r, c));
    s.m_b.push_back(vec_from_json(j.at("m_b")[i]));
    s.v_b.push_back(vec_from_json(j.at("v_b")[i]));
  }
  return s;
}

}  // namespace tudp
