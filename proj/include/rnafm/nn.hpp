#pragma once

// Named parameter storage, layer building blocks and the AdamW optimizer.

#include "rnafm/autodiff.hpp"
#include "rnafm/common.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace rnafm::nn {

class ParameterSet {
 public:
  std::size_t add(std::string name, Mat value) {
    if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    index_.emplace(name, values_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const Mat& value(std::size_t i) const { return values_.at(i); }
  Mat& value(std::size_t i) { return values_.at(i); }
  const std::vector<Mat>& values() const { return values_; }
  std::vector<Mat>& values() { return values_; }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

  std::vector<Mat> zeros_like() const {
    std::vector<Mat> out;
    out.reserve(values_.size());
    for (const auto& v : values_) out.push_back(Mat::Zero(v.rows(), v.cols()));
    return out;
  }

  bool all_finite() const {
    for (const auto& v : values_)
      if (!v.allFinite()) return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Binds a parameter set to one tape; `grads`, when given, receives gradients.
struct Binding {
  ad::Tape& tape;
  const ParameterSet& params;
  std::vector<Mat>* grads = nullptr;

  ad::Var operator()(std::size_t idx) const {
    return tape.param(params.value(idx), grads ? &(*grads)[idx] : nullptr);
  }
};

inline Mat uniform(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = bound > 0.0 ? dist(rng) : 0.0;
  return out;
}

struct Linear {
  std::size_t weight = 0;  // in x out
  std::size_t bias = 0;    // 1 x out

  enum class Init { FanIn, Zero };

  static Linear create(ParameterSet& ps, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
                       Init init = Init::FanIn) {
    const double bound = (init == Init::FanIn && in > 0) ? 1.0 / std::sqrt(static_cast<double>(in)) : 0.0;
    Linear l;
    l.weight = ps.add(name + ".weight", uniform(rng, in, out, bound));
    l.bias = ps.add(name + ".bias", uniform(rng, 1, out, bound));
    return l;
  }

  ad::Var operator()(const Binding& bind, ad::Var x) const {
    return ad::add_bias(bind.tape, ad::matmul(bind.tape, x, bind(weight)), bind(bias));
  }
};

// Two-layer perceptron with GELU between the layers.
struct Mlp {
  Linear first;
  Linear second;

  static Mlp create(ParameterSet& ps, const std::string& name, Eigen::Index in, Eigen::Index hidden,
                    Eigen::Index out, Rng& rng, Linear::Init last_init = Linear::Init::FanIn) {
    Mlp m;
    m.first = Linear::create(ps, name + ".fc1", in, hidden, rng);
    m.second = Linear::create(ps, name + ".fc2", hidden, out, rng, last_init);
    return m;
  }

  ad::Var operator()(const Binding& bind, ad::Var x) const {
    return second(bind, ad::gelu(bind.tape, first(bind, x)));
  }
};

struct LayerNorm {
  std::size_t gamma = 0;
  std::size_t beta = 0;

  static LayerNorm create(ParameterSet& ps, const std::string& name, Eigen::Index width) {
    LayerNorm ln;
    ln.gamma = ps.add(name + ".gamma", Mat::Ones(1, width));
    ln.beta = ps.add(name + ".beta", Mat::Zero(1, width));
    return ln;
  }

  ad::Var operator()(const Binding& bind, ad::Var x) const {
    auto& t = bind.tape;
    return ad::add_bias(t, ad::mul_row(t, ad::layer_norm(t, x), bind(gamma)), bind(beta));
  }
};

struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  Eigen::Index heads = 1;

  static MultiHeadAttention create(ParameterSet& ps, const std::string& name, Eigen::Index width,
                                   Eigen::Index heads, Rng& rng) {
    if (heads < 1 || width % heads != 0)
      throw ConfigError(name + ": width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                        " heads");
    MultiHeadAttention m;
    m.query = Linear::create(ps, name + ".q", width, width, rng);
    m.key = Linear::create(ps, name + ".k", width, width, rng);
    m.value = Linear::create(ps, name + ".v", width, width, rng);
    m.output = Linear::create(ps, name + ".o", width, width, rng);
    m.heads = heads;
    return m;
  }

  ad::Var operator()(const Binding& bind, ad::Var x, Eigen::Index tokens, const Mat* mask = nullptr,
                     ad::AttentionTrace* trace = nullptr) const {
    auto q = query(bind, x);
    auto k = key(bind, x);
    auto v = value(bind, x);
    return output(bind, ad::attention(bind.tape, q, k, v, tokens, heads, mask, trace));
  }
};

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::vector<Mat> first_moment;
  std::vector<Mat> second_moment;
  std::uint64_t step = 0;
};

inline AdamWState make_adamw_state(const ParameterSet& ps) { return {ps.zeros_like(), ps.zeros_like(), 0}; }

// Decoupled weight decay, bias-corrected moments.
inline void adamw_step(ParameterSet& ps, const std::vector<Mat>& grads, AdamWState& state, const AdamWConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Mat& p = ps.value(i);
    const Mat& g = grads[i];
    Mat& m = state.first_moment[i];
    Mat& v = state.second_moment[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p *= (1.0 - cfg.learning_rate * cfg.weight_decay);
    p.array() -= cfg.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.epsilon);
  }
}

// shadow <- decay * shadow + (1 - decay) * current
inline void ema_update(std::vector<Mat>& shadow, const ParameterSet& current, double decay) {
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    if (decay == 0.0) {
      shadow[i] = current.value(i);
    } else {
      shadow[i] = decay * shadow[i] + (1.0 - decay) * current.value(i);
    }
  }
}

}  // namespace rnafm::nn
