#pragma once

// The conditional velocity field v(x_t, t | y): pathway tokenization, one
// graph-masked attention block, a stack of adaLN-modulated transformer
// blocks, per-pathway/background heads and overlap-averaged reconstruction.

#include "rnafm/autodiff.hpp"
#include "rnafm/gene_tokenizer.hpp"
#include "rnafm/nn.hpp"
#include "rnafm/pathway_graph.hpp"

#include <json.hpp>

#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

namespace rnafm {

struct NetworkConfig {
  int depth = 7;
  int heads = 8;
  int hidden = 512;
  int condition_dim = 2048;
  int cluster_count = 100;
  int condition_heads = 1;
  int mlp_ratio = 4;
  double graph_dropout = 0.1;
  double residual_scale_init = 1.0;
  double time_scale = 1000.0;  // t in [0,1] is stretched before the sinusoids

  void validate() const {
    if (depth < 1) throw ConfigError("network.depth must be >= 1");
    if (heads < 1 || hidden < 1 || hidden % heads != 0) throw ConfigError("network.hidden must be divisible by network.heads");
    if (condition_dim < 1 || cluster_count < 1) throw ConfigError("network.condition_dim and cluster_count must be >= 1");
    if (condition_heads < 1 || condition_dim % condition_heads != 0)
      throw ConfigError("network.condition_dim must be divisible by network.condition_heads");
    if (mlp_ratio < 1) throw ConfigError("network.mlp_ratio must be >= 1");
    if (!(graph_dropout >= 0.0 && graph_dropout < 1.0)) throw ConfigError("network.graph_dropout must be in [0,1)");
  }
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"depth", c.depth},
       {"heads", c.heads},
       {"hidden", c.hidden},
       {"condition_dim", c.condition_dim},
       {"cluster_count", c.cluster_count},
       {"condition_heads", c.condition_heads},
       {"mlp_ratio", c.mlp_ratio},
       {"graph_dropout", c.graph_dropout},
       {"residual_scale_init", c.residual_scale_init},
       {"time_scale", c.time_scale}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.hidden = j.value("hidden", c.hidden);
  c.condition_dim = j.value("condition_dim", c.condition_dim);
  c.cluster_count = j.value("cluster_count", c.cluster_count);
  c.condition_heads = j.value("condition_heads", c.condition_heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.graph_dropout = j.value("graph_dropout", c.graph_dropout);
  c.residual_scale_init = j.value("residual_scale_init", c.residual_scale_init);
  c.time_scale = j.value("time_scale", c.time_scale);
}

// Attention probabilities and intermediates captured during one forward pass.
struct ForwardTrace {
  ad::AttentionTrace graph_attention;
  Mat graph_attention_output;  // multi-head attention output before the residual
  std::vector<ad::AttentionTrace> block_attention;
};

struct ForwardOptions {
  bool training = false;  // enables dropout; requires rng
  Rng* rng = nullptr;
  ForwardTrace* trace = nullptr;
};

// Sinusoidal frequency features [cos, sin] of scaled time, width h.
inline Mat time_features(std::span<const double> t, Eigen::Index width, double time_scale) {
  const Eigen::Index half = width / 2;
  Mat out = Mat::Zero(static_cast<Eigen::Index>(t.size()), width);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (Eigen::Index i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = t[b] * time_scale * freq;
      out(static_cast<Eigen::Index>(b), i) = std::cos(arg);
      out(static_cast<Eigen::Index>(b), half + i) = std::sin(arg);
    }
  }
  return out;
}

class VelocityModel {
 public:
  VelocityModel(NetworkConfig config, std::shared_ptr<const PathwayCollection> collection, std::string fingerprint,
                std::uint64_t init_seed)
      : config_(config), collection_(std::move(collection)), fingerprint_(std::move(fingerprint)) {
    config_.validate();
    if (!collection_) throw ConfigError("velocity model requires a pathway collection");
    graph_ = PathwayGraph::build(*collection_);
    Rng rng = derive_rng(init_seed, 0x5eed);
    const Eigen::Index h = config_.hidden;
    const Eigen::Index d = config_.condition_dim;
    auto& ps = params_;

    tokenizer_ = TokenizerParams::create(ps, *collection_, h, rng);

    time_mlp_.first = nn::Linear::create(ps, "time.fc1", h, h, rng);
    time_mlp_.second = nn::Linear::create(ps, "time.fc2", h, h, rng);

    cond_norm_ = nn::LayerNorm::create(ps, "condition.norm", d);
    cond_attn_ = nn::MultiHeadAttention::create(ps, "condition.attn", d, config_.condition_heads, rng);
    cond_proj_ = nn::Linear::create(ps, "condition.proj", d, h, rng);
    null_embedding_ = ps.add("condition.null_embedding", Mat::Zero(1, h));

    graph_attn_ = nn::MultiHeadAttention::create(ps, "graph.attn", h, config_.heads, rng);
    residual_scale_ = ps.add("graph.residual_scale", Mat::Constant(1, 1, config_.residual_scale_init));
    graph_norm_ = nn::LayerNorm::create(ps, "graph.norm", h);
    graph_ffn_ = nn::Mlp::create(ps, "graph.ffn", h, config_.mlp_ratio * h, h, rng);

    for (int j = 0; j < config_.depth; ++j) {
      const std::string name = "block" + std::to_string(j);
      Block blk;
      blk.modulation = nn::Linear::create(ps, name + ".adaln", h, 6 * h, rng, nn::Linear::Init::Zero);
      blk.attn = nn::MultiHeadAttention::create(ps, name + ".attn", h, config_.heads, rng);
      blk.mlp = nn::Mlp::create(ps, name + ".mlp", h, config_.mlp_ratio * h, h, rng);
      blocks_.push_back(blk);
    }
    final_modulation_ = nn::Linear::create(ps, "final.adaln", h, 2 * h, rng, nn::Linear::Init::Zero);
    for (std::size_t i = 0; i < collection_->size(); ++i) {
      heads_.push_back(nn::Linear::create(ps, "head.pathway" + std::to_string(i), 2 * h,
                                          static_cast<Eigen::Index>(collection_->pathway(i).members.size()), rng));
    }
    background_head_ = nn::Linear::create(ps, "head.background", 2 * h,
                                          static_cast<Eigen::Index>(collection_->background().size()), rng);
  }

  const NetworkConfig& config() const { return config_; }
  const PathwayCollection& collection() const { return *collection_; }
  std::shared_ptr<const PathwayCollection> collection_ptr() const { return collection_; }
  const PathwayGraph& graph() const { return graph_; }
  const std::string& fingerprint() const { return fingerprint_; }
  Eigen::Index gene_count() const { return static_cast<Eigen::Index>(collection_->gene_count()); }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }
  const TokenizerParams& tokenizer() const { return tokenizer_; }

  std::size_t residual_scale_index() const { return residual_scale_; }
  std::size_t null_embedding_index() const { return null_embedding_; }
  const nn::Mlp& graph_ffn() const { return graph_ffn_; }

  void check_condition(const Mat& y) const {
    require_shape(y.rows() == config_.cluster_count && y.cols() == config_.condition_dim,
                  "condition must be " + std::to_string(config_.cluster_count) + " x " +
                      std::to_string(config_.condition_dim) + ", got " + std::to_string(y.rows()) + " x " +
                      std::to_string(y.cols()));
    if (!y.allFinite()) throw NumericalError("condition contains non-finite values");
  }

  // ---- tape-level components -------------------------------------------

  ad::Var time_embed(const nn::Binding& bind, std::span<const double> t) const {
    for (double v : t)
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("time must lie in [0,1], got " + format_double(v));
    auto feats = bind.tape.constant(time_features(t, config_.hidden, config_.time_scale));
    return time_mlp_.second(bind, ad::silu(bind.tape, time_mlp_.first(bind, feats)));
  }

  // Encodes a stack of non-null conditions (each k x d) to n x h.
  ad::Var encode_conditions(const nn::Binding& bind, const std::vector<const Mat*>& ys) const {
    auto& t = bind.tape;
    const Eigen::Index k = config_.cluster_count;
    Mat stacked(static_cast<Eigen::Index>(ys.size()) * k, config_.condition_dim);
    for (std::size_t i = 0; i < ys.size(); ++i) {
      check_condition(*ys[i]);
      stacked.middleRows(static_cast<Eigen::Index>(i) * k, k) = *ys[i];
    }
    auto y = t.constant(std::move(stacked));
    auto attended = ad::add(t, y, cond_attn_(bind, cond_norm_(bind, y), k));
    return cond_proj_(bind, ad::mean_tokens(t, attended, k));
  }

  // One conditioning row per sample; nullptr entries select the null embedding.
  ad::Var condition_embed(const nn::Binding& bind, std::span<const Mat* const> ys) const {
    std::vector<const Mat*> present;
    std::vector<int> source(ys.size(), -1);
    for (std::size_t b = 0; b < ys.size(); ++b) {
      if (ys[b]) {
        source[b] = static_cast<int>(present.size());
        present.push_back(ys[b]);
      }
    }
    auto& t = bind.tape;
    ad::Var encoded = present.empty() ? t.constant(Mat::Zero(0, config_.hidden)) : encode_conditions(bind, present);
    return ad::select_condition(t, encoded, bind(null_embedding_), source);
  }

  // tokens: (B*P) x h.
  ad::Var graph_block(const nn::Binding& bind, ad::Var tokens, const ForwardOptions& opts) const {
    auto& t = bind.tape;
    const auto p = static_cast<Eigen::Index>(collection_->size());
    auto attn = graph_attn_(bind, tokens, p, &graph_.mask, opts.trace ? &opts.trace->graph_attention : nullptr);
    if (opts.trace) opts.trace->graph_attention_output = t.value(attn);
    if (opts.training && config_.graph_dropout > 0.0) {
      if (!opts.rng) throw Error("graph block dropout requires an rng in training mode");
      const double keep = 1.0 - config_.graph_dropout;
      std::bernoulli_distribution draw(keep);
      Mat mask(t.value(attn).rows(), t.value(attn).cols());
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = draw(*opts.rng) ? 1.0 / keep : 0.0;
      attn = ad::apply_mask(t, attn, std::move(mask));
    }
    auto res = ad::add(t, tokens, ad::scale_by(t, attn, bind(residual_scale_)));
    return ad::add(t, res, graph_ffn_(bind, graph_norm_(bind, res)));
  }

  // Full forward pass; returns the B x G velocity.
  ad::Var forward(const nn::Binding& bind, const Mat& x_t, std::span<const double> t_values,
                  std::span<const Mat* const> ys, const ForwardOptions& opts = {}) const {
    auto& t = bind.tape;
    const auto batch = x_t.rows();
    require_shape(x_t.cols() == gene_count(), "forward: state width " + std::to_string(x_t.cols()) +
                                                  " differs from gene count " + std::to_string(gene_count()));
    require_shape(static_cast<Eigen::Index>(t_values.size()) == batch && static_cast<Eigen::Index>(ys.size()) == batch,
                  "forward: batch sizes of state, time and condition differ");
    if (!x_t.allFinite()) throw NumericalError("forward: non-finite state");
    const Eigen::Index h = config_.hidden;
    const auto p = static_cast<Eigen::Index>(collection_->size());
    const Eigen::Index tokens = p + 1;

    auto x = t.constant(x_t);
    auto emb = tokenizer_.embed(bind, x, *collection_);
    auto z_path = graph_block(bind, emb.pathway_tokens, opts);
    auto z = ad::concat_tokens(t, z_path, p, emb.background, 1);

    auto c = ad::add(t, time_embed(bind, t_values), condition_embed(bind, ys));
    auto c_act = ad::silu(t, c);

    if (opts.trace) opts.trace->block_attention.assign(blocks_.size(), {});
    for (std::size_t j = 0; j < blocks_.size(); ++j) {
      const auto& blk = blocks_[j];
      auto mod = blk.modulation(bind, c_act);
      auto shift1 = ad::slice_cols(t, mod, 0, h);
      auto scale1 = ad::slice_cols(t, mod, h, h);
      auto gate1 = ad::slice_cols(t, mod, 2 * h, h);
      auto shift2 = ad::slice_cols(t, mod, 3 * h, h);
      auto scale2 = ad::slice_cols(t, mod, 4 * h, h);
      auto gate2 = ad::slice_cols(t, mod, 5 * h, h);
      auto a_in = ad::modulate(t, ad::layer_norm(t, z), shift1, scale1, tokens);
      auto a = blk.attn(bind, a_in, tokens, nullptr, opts.trace ? &opts.trace->block_attention[j] : nullptr);
      z = ad::add(t, z, ad::gate(t, a, gate1, tokens));
      auto m_in = ad::modulate(t, ad::layer_norm(t, z), shift2, scale2, tokens);
      z = ad::add(t, z, ad::gate(t, blk.mlp(bind, m_in), gate2, tokens));
    }

    auto fmod = final_modulation_(bind, c_act);
    auto zf = ad::modulate(t, ad::layer_norm(t, z), ad::slice_cols(t, fmod, 0, h), ad::slice_cols(t, fmod, h, h), tokens);

    std::vector<ad::Var> parts;
    parts.reserve(heads_.size());
    for (std::size_t i = 0; i < heads_.size(); ++i) {
      auto zi = ad::slice_tokens(t, zf, tokens, static_cast<Eigen::Index>(i), 1);
      parts.push_back(heads_[i](bind, ad::concat_cols(t, zi, c)));
    }
    auto zb = ad::slice_tokens(t, zf, tokens, p, 1);
    auto bg = background_head_(bind, ad::concat_cols(t, zb, c));
    (void)batch;
    return ad::overlap_average(t, parts, bg, *collection_);
  }

  // ---- value-level API ---------------------------------------------------

  // Evaluation-mode velocity (no dropout, no gradients).
  Mat velocity(const Mat& x_t, std::span<const double> t, std::span<const Mat* const> ys,
               ForwardTrace* trace = nullptr) const {
    ad::Tape tape(false);
    nn::Binding bind{tape, params_, nullptr};
    ForwardOptions opts;
    opts.trace = trace;
    auto out = forward(bind, x_t, t, ys, opts);
    Mat v = tape.value(out);
    if (!v.allFinite()) throw NumericalError("velocity: non-finite network output");
    return v;
  }

  Mat velocity(const Mat& x_t, double t, const Mat* y) const {
    std::vector<double> ts(static_cast<std::size_t>(x_t.rows()), t);
    std::vector<const Mat*> ys(static_cast<std::size_t>(x_t.rows()), y);
    return velocity(x_t, ts, ys);
  }

  Mat time_embed(std::span<const double> t) const {
    ad::Tape tape(false);
    nn::Binding bind{tape, params_, nullptr};
    return tape.value(time_embed(bind, t));
  }

  // h-vector c_y; nullptr selects the null embedding.
  RowVec condition_embed(const Mat* y) const {
    ad::Tape tape(false);
    nn::Binding bind{tape, params_, nullptr};
    const Mat* ys[1] = {y};
    return tape.value(condition_embed(bind, ys)).row(0);
  }

  // One sample's P x h tokens through the graph block.
  Mat graph_attention_block(const Mat& tokens, ForwardTrace* trace = nullptr) const {
    require_shape(tokens.rows() == static_cast<Eigen::Index>(collection_->size()) && tokens.cols() == config_.hidden,
                  "graph_attention_block: tokens must be P x h");
    if (!tokens.allFinite()) throw NumericalError("graph_attention_block: non-finite tokens");
    ad::Tape tape(false);
    nn::Binding bind{tape, params_, nullptr};
    ForwardOptions opts;
    opts.trace = trace;
    Mat out = tape.value(graph_block(bind, tape.constant(tokens), opts));
    if (!out.allFinite()) throw NumericalError("graph_attention_block: non-finite output");
    return out;
  }

 private:
  struct Block {
    nn::Linear modulation;
    nn::MultiHeadAttention attn;
    nn::Mlp mlp;
  };

  NetworkConfig config_;
  std::shared_ptr<const PathwayCollection> collection_;
  std::string fingerprint_;
  PathwayGraph graph_;
  nn::ParameterSet params_;

  TokenizerParams tokenizer_;
  nn::Mlp time_mlp_;
  nn::LayerNorm cond_norm_;
  nn::MultiHeadAttention cond_attn_;
  nn::Linear cond_proj_;
  std::size_t null_embedding_ = 0;
  nn::MultiHeadAttention graph_attn_;
  std::size_t residual_scale_ = 0;
  nn::LayerNorm graph_norm_;
  nn::Mlp graph_ffn_;
  std::vector<Block> blocks_;
  nn::Linear final_modulation_;
  std::vector<nn::Linear> heads_;
  nn::Linear background_head_;
};

// Joint conditioning vector: time embedding plus condition embedding.
inline RowVec combine_conditioning(const RowVec& time_embedding, const RowVec& condition_embedding) {
  require_shape(time_embedding.size() == condition_embedding.size(), "combine_conditioning: width mismatch");
  return time_embedding + condition_embedding;
}

}  // namespace rnafm
