#pragma once

// Flow matching: interpolants and target velocities, the training objective
// with condition dropout, AdamW training with EMA, and Euler probability-flow
// sampling with classifier-free guidance.

#include "rnafm/data_metrics.hpp"
#include "rnafm/nn.hpp"
#include "rnafm/velocity_network.hpp"

#include <json.hpp>

#include <algorithm>
#include <concepts>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rnafm {

enum class InterpolantKind { Linear, Logistic };

inline InterpolantKind parse_interpolant(const std::string& s) {
  if (s == "linear") return InterpolantKind::Linear;
  if (s == "logistic") return InterpolantKind::Logistic;
  throw ConfigError("unknown interpolant '" + s + "' (expected linear or logistic)");
}

inline const char* to_string(InterpolantKind k) { return k == InterpolantKind::Linear ? "linear" : "logistic"; }

// x_t = alpha(t) x1 + sigma(t) x0 with noise at t=0 and data at t=1.
class Interpolant {
 public:
  explicit Interpolant(InterpolantKind kind = InterpolantKind::Linear, double logistic_steepness = 10.0)
      : kind_(kind), a_(logistic_steepness) {
    if (kind_ == InterpolantKind::Logistic && !(a_ > 0.0)) throw ConfigError("logistic steepness must be > 0");
  }

  InterpolantKind kind() const { return kind_; }
  double steepness() const { return a_; }

  double alpha(double t) const {
    if (kind_ == InterpolantKind::Linear) return t;
    const double lo = logistic(-a_ / 2.0);
    return (logistic(a_ * (t - 0.5)) - lo) / (logistic(a_ / 2.0) - lo);
  }
  double sigma(double t) const { return 1.0 - alpha(t); }

  double alpha_dot(double t) const {
    if (kind_ == InterpolantKind::Linear) return 1.0;
    const double l = logistic(a_ * (t - 0.5));
    return a_ * l * (1.0 - l) / (logistic(a_ / 2.0) - logistic(-a_ / 2.0));
  }
  double sigma_dot(double t) const { return -alpha_dot(t); }

 private:
  static double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

  InterpolantKind kind_;
  double a_;
};

inline Mat interpolate(const Mat& x0, const Mat& x1, double t, const Interpolant& interp) {
  require_shape(x0.rows() == x1.rows() && x0.cols() == x1.cols(), "interpolate: shape mismatch");
  return interp.alpha(t) * x1 + interp.sigma(t) * x0;
}

inline Mat target_velocity(const Mat& x0, const Mat& x1, double t, const Interpolant& interp) {
  require_shape(x0.rows() == x1.rows() && x0.cols() == x1.cols(), "target_velocity: shape mismatch");
  return interp.alpha_dot(t) * x1 + interp.sigma_dot(t) * x0;
}

// v_uncond + s (v_cond - v_uncond); s = 1 and s = 0 return their operand exactly.
inline Mat cfg_velocity(const Mat& v_cond, const Mat& v_uncond, double s) {
  require_shape(v_cond.rows() == v_uncond.rows() && v_cond.cols() == v_uncond.cols(), "cfg_velocity: shape mismatch");
  if (s == 1.0) return v_cond;
  if (s == 0.0) return v_uncond;
  return v_uncond + s * (v_cond - v_uncond);
}

struct FlowConfig {
  int steps = 20;
  double cfg_scale = 2.0;
  double condition_dropout = 0.1;
  double ema_decay = 0.999;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  int batch_size = 32;
  int max_epochs = 2000;

  void validate() const {
    if (steps < 1) throw ConfigError("flow.steps must be >= 1");
    if (!(cfg_scale >= 0.0)) throw ConfigError("flow.cfg_scale must be >= 0");
    if (!(condition_dropout >= 0.0 && condition_dropout < 1.0))
      throw ConfigError("flow.condition_dropout must be in [0,1)");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("flow.ema_decay must be in [0,1]");
    if (!(learning_rate > 0.0)) throw ConfigError("flow.learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("flow.batch_size must be >= 1");
    if (max_epochs < 0) throw ConfigError("flow.max_epochs must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const FlowConfig& c) {
  j = {{"steps", c.steps},
       {"cfg_scale", c.cfg_scale},
       {"condition_dropout", c.condition_dropout},
       {"ema_decay", c.ema_decay},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs}};
}

inline void from_json(const nlohmann::json& j, FlowConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.cfg_scale = j.value("cfg_scale", c.cfg_scale);
  c.condition_dropout = j.value("condition_dropout", c.condition_dropout);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
}

// Anything that can evaluate a batched velocity; nullptr conditions are NULL.
template <class F>
concept VelocityField = requires(const F& f, const Mat& x, std::span<const double> t, std::span<const Mat* const> y) {
  { f.velocity(x, t, y) } -> std::convertible_to<Mat>;
};

template <VelocityField F>
Mat evaluate_velocity(const F& field, const Mat& x, double t, const Mat* y) {
  std::vector<double> ts(static_cast<std::size_t>(x.rows()), t);
  std::vector<const Mat*> ys(static_cast<std::size_t>(x.rows()), y);
  return field.velocity(x, std::span<const double>(ts), std::span<const Mat* const>(ys));
}

// Exact velocity field E[d x_t/dt | x_t = x] when x1 ~ N(mean, variance * I),
// independent of the condition.
class GaussianTargetVelocity {
 public:
  GaussianTargetVelocity(Vec mean, double variance, Interpolant interp = Interpolant())
      : mean_(std::move(mean)), variance_(variance), interp_(interp) {}

  Mat velocity(const Mat& x, std::span<const double> t, std::span<const Mat* const>) const {
    require_shape(x.cols() == mean_.size(), "GaussianTargetVelocity: width mismatch");
    Mat out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double tt = t[static_cast<std::size_t>(r)];
      const double a = interp_.alpha(tt);
      const double s = interp_.sigma(tt);
      const double c = a * a * variance_ + s * s;
      const RowVec centered = x.row(r) - a * mean_.transpose();
      const RowVec e1 = mean_.transpose() + (a * variance_ / c) * centered;
      const RowVec e0 = (s / c) * centered;
      out.row(r) = interp_.alpha_dot(tt) * e1 + interp_.sigma_dot(tt) * e0;
    }
    return out;
  }

 private:
  Vec mean_;
  double variance_;
  Interpolant interp_;
};

// Per-item random draws of one flow-matching batch.
struct FlowDraws {
  std::vector<double> t;
  Mat x0;
  std::vector<char> drop_condition;
};

inline FlowDraws draw_flow(Rng& rng, Eigen::Index batch, Eigen::Index genes, double condition_dropout) {
  FlowDraws d;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::bernoulli_distribution drop(condition_dropout);
  d.t.resize(static_cast<std::size_t>(batch));
  d.drop_condition.resize(static_cast<std::size_t>(batch));
  for (Eigen::Index b = 0; b < batch; ++b) {
    d.t[static_cast<std::size_t>(b)] = uniform(rng);
    d.drop_condition[static_cast<std::size_t>(b)] = condition_dropout > 0.0 ? drop(rng) : 0;
  }
  d.x0 = standard_normal(rng, batch, genes);
  return d;
}

struct FlowBatch {
  Mat x_t;
  Mat target;
  std::vector<const Mat*> conditions;
};

inline FlowBatch make_flow_batch(const Mat& x1, std::span<const Mat* const> ys, const FlowDraws& draws,
                                 const Interpolant& interp) {
  require_shape(draws.x0.rows() == x1.rows() && draws.x0.cols() == x1.cols(), "flow batch: x0/x1 shape mismatch");
  require_shape(static_cast<Eigen::Index>(ys.size()) == x1.rows(), "flow batch: one condition per item required");
  FlowBatch fb;
  fb.x_t.resize(x1.rows(), x1.cols());
  fb.target.resize(x1.rows(), x1.cols());
  fb.conditions.resize(ys.size());
  for (Eigen::Index b = 0; b < x1.rows(); ++b) {
    const double t = draws.t[static_cast<std::size_t>(b)];
    fb.x_t.row(b) = interp.alpha(t) * x1.row(b) + interp.sigma(t) * draws.x0.row(b);
    fb.target.row(b) = interp.alpha_dot(t) * x1.row(b) + interp.sigma_dot(t) * draws.x0.row(b);
    fb.conditions[static_cast<std::size_t>(b)] = draws.drop_condition[static_cast<std::size_t>(b)] ? nullptr : ys[static_cast<std::size_t>(b)];
  }
  return fb;
}

inline void check_loss_residual(const Mat& prediction, const Mat& target) {
  for (Eigen::Index b = 0; b < prediction.rows(); ++b) {
    if (!(prediction.row(b) - target.row(b)).allFinite())
      throw NumericalError("flow-matching loss is non-finite at batch item " + std::to_string(b));
  }
}

// Mean over batch and genes of (v(x_t, t | y) - v*)^2 with fixed draws.
template <VelocityField F>
double fm_loss(const F& field, const Mat& x1, std::span<const Mat* const> ys, const FlowDraws& draws,
               const Interpolant& interp) {
  const FlowBatch fb = make_flow_batch(x1, ys, draws, interp);
  const Mat v = field.velocity(fb.x_t, std::span<const double>(draws.t), std::span<const Mat* const>(fb.conditions));
  check_loss_residual(v, fb.target);
  return (v - fb.target).squaredNorm() / static_cast<double>(v.size());
}

template <VelocityField F>
double fm_loss(const F& field, const Mat& x1, std::span<const Mat* const> ys, const Interpolant& interp, Rng& rng,
               const FlowConfig& cfg) {
  const FlowDraws draws = draw_flow(rng, x1.rows(), x1.cols(), cfg.condition_dropout);
  return fm_loss(field, x1, ys, draws, interp);
}

// Records the training loss on `tape`; gradients flow into `grads` on backward().
inline ad::Var fm_loss_tape(ad::Tape& tape, const VelocityModel& model, std::vector<Mat>* grads, const Mat& x1,
                            std::span<const Mat* const> ys, const FlowDraws& draws, const Interpolant& interp,
                            const ForwardOptions& opts = {}) {
  const FlowBatch fb = make_flow_batch(x1, ys, draws, interp);
  nn::Binding bind{tape, model.parameters(), grads};
  auto v = model.forward(bind, fb.x_t, draws.t, fb.conditions, opts);
  check_loss_residual(tape.value(v), fb.target);
  return ad::mse(tape, v, fb.target);
}

// ---------------------------------------------------------------------------
// Training

struct Dataset {
  Mat x1;  // n x G, standardized
  std::vector<Mat> conditions;

  Eigen::Index size() const { return x1.rows(); }
};

struct TrainState {
  std::vector<Mat> ema;
  nn::AdamWState optimizer;
  int epochs_done = 0;
  std::vector<double> loss_history;  // epoch-mean loss
};

inline TrainState make_train_state(const VelocityModel& model) {
  TrainState s;
  s.ema = model.parameters().values();
  s.optimizer = nn::make_adamw_state(model.parameters());
  return s;
}

struct TrainResult {
  bool diverged = false;
  std::string message;
};

inline VelocityModel with_parameters(const VelocityModel& model, const std::vector<Mat>& values) {
  VelocityModel out = model;
  require_shape(values.size() == out.parameters().size(), "parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    require_shape(values[i].rows() == out.parameters().value(i).rows() &&
                      values[i].cols() == out.parameters().value(i).cols(),
                  "parameter '" + out.parameters().name(i) + "' has the wrong shape");
    out.parameters().value(i) = values[i];
  }
  return out;
}

// Runs epochs state.epochs_done .. cfg.max_epochs - 1. All randomness of epoch
// e comes from derive_rng(seed, e), so a resumed run replays the same draws.
// On a non-finite loss the parameters and state roll back to the end of the
// last completed epoch and the result is flagged as diverged.
inline TrainResult train(VelocityModel& model, const Dataset& data, const FlowConfig& cfg, const Interpolant& interp,
                         TrainState& state, std::uint64_t seed,
                         const std::function<void(int, double)>& on_epoch = {}) {
  cfg.validate();
  require_shape(data.x1.cols() == model.gene_count(), "train: dataset gene count differs from the model");
  require_shape(static_cast<Eigen::Index>(data.conditions.size()) == data.size(), "train: one condition per sample");
  if (data.size() < 1) throw ConfigError("train: empty dataset");
  if (state.ema.size() != model.parameters().size()) state = make_train_state(model);
  const nn::AdamWConfig opt{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay};
  const auto n = static_cast<std::size_t>(data.size());

  for (int epoch = state.epochs_done; epoch < cfg.max_epochs; ++epoch) {
    const std::vector<Mat> good_params = model.parameters().values();
    const TrainState good_state = state;
    Rng rng = derive_rng(seed, static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t loss_items = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const auto batch = static_cast<Eigen::Index>(stop - start);
      Mat x1(batch, data.x1.cols());
      std::vector<const Mat*> ys(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        x1.row(static_cast<Eigen::Index>(i - start)) = data.x1.row(static_cast<Eigen::Index>(order[i]));
        ys[i - start] = &data.conditions[order[i]];
      }
      const FlowDraws draws = draw_flow(rng, batch, x1.cols(), cfg.condition_dropout);
      std::vector<Mat> grads = model.parameters().zeros_like();
      double loss = 0.0;
      try {
        ad::Tape tape;
        ForwardOptions fo;
        fo.training = true;
        fo.rng = &rng;
        auto l = fm_loss_tape(tape, model, &grads, x1, ys, draws, interp, fo);
        loss = tape.value(l)(0, 0);
        if (!std::isfinite(loss)) throw NumericalError("flow-matching loss is non-finite");
        tape.backward(l);
      } catch (const NumericalError& e) {
        model.parameters().values() = good_params;
        state = good_state;
        return {true, "epoch " + std::to_string(epoch) + ": " + e.what()};
      }
      nn::adamw_step(model.parameters(), grads, state.optimizer, opt);
      if (!model.parameters().all_finite()) {
        model.parameters().values() = good_params;
        state = good_state;
        return {true, "epoch " + std::to_string(epoch) + ": parameters became non-finite"};
      }
      nn::ema_update(state.ema, model.parameters(), cfg.ema_decay);
      loss_sum += loss * static_cast<double>(batch);
      loss_items += static_cast<std::size_t>(batch);
    }
    const double mean_loss = loss_sum / static_cast<double>(loss_items);
    state.loss_history.push_back(mean_loss);
    state.epochs_done = epoch + 1;
    if (on_epoch) on_epoch(epoch, mean_loss);
  }
  return {};
}

// ---------------------------------------------------------------------------
// Sampling

// Integrates dx/dt = v_cfg(x, t | y) from t=0 to 1 with forward Euler.
template <VelocityField F>
Mat euler_integrate(const F& field, Mat x, const Mat* y, const FlowConfig& cfg) {
  if (cfg.steps < 1) throw ConfigError("flow.steps must be >= 1");
  const double dt = 1.0 / static_cast<double>(cfg.steps);
  for (int n = 0; n < cfg.steps; ++n) {
    const double t = static_cast<double>(n) / static_cast<double>(cfg.steps);
    Mat v = evaluate_velocity(field, x, t, y);
    if (cfg.cfg_scale != 1.0) v = cfg_velocity(v, evaluate_velocity(field, x, t, nullptr), cfg.cfg_scale);
    x += dt * v;
    if (!x.allFinite()) throw NumericalError("sampler state became non-finite at Euler step " + std::to_string(n));
  }
  return x;
}

// One sample, de-standardized when a standardizer is supplied.
template <VelocityField F>
Vec euler_sample(const F& field, const Mat* y, Eigen::Index genes, const FlowConfig& cfg, Rng& rng,
                 const Standardizer* standardizer = nullptr) {
  Mat x = euler_integrate(field, standard_normal(rng, 1, genes), y, cfg);
  if (standardizer) x = standardizer->invert_unchecked(x);
  return x.row(0).transpose();
}

struct SampleSet {
  std::string condition_id;
  Mat samples;  // N x G
  Vec mean;
  Vec variance;  // population variance

  Eigen::Index size() const { return samples.rows(); }
};

// N trajectories integrated together (rows are independent), each from its
// own N(0, I) draw.
template <VelocityField F>
SampleSet generate_ensemble(const F& field, const Mat* y, Eigen::Index genes, int n, const FlowConfig& cfg, Rng& rng,
                            const Standardizer* standardizer = nullptr, std::string condition_id = {}) {
  if (n < 1) throw ConfigError("ensemble size must be >= 1");
  SampleSet s;
  s.condition_id = std::move(condition_id);
  s.samples = euler_integrate(field, standard_normal(rng, n, genes), y, cfg);
  if (standardizer) s.samples = standardizer->invert_unchecked(s.samples);
  s.mean = s.samples.colwise().mean().transpose();
  s.variance = ensemble_variance(s.samples);
  return s;
}

}  // namespace rnafm
