#pragma once

// Gene-to-pathway tokens and the pathway-to-gene overlap-averaged
// reconstruction.

#include "rnafm/autodiff.hpp"
#include "rnafm/nn.hpp"
#include "rnafm/pathway_graph.hpp"

#include <algorithm>
#include <vector>

namespace rnafm {

struct PathwayTokens {
  Mat tokens;              // P x h
  RowVec background_token;  // h
};

class TokenizerParams {
 public:
  struct Embedder {
    nn::Mlp mlp;
    std::size_t token_bias = 0;  // e_i, 1 x h
  };

  // Hidden width of the embedding perceptron for an input of size n.
  static Eigen::Index hidden_width(std::size_t n, Eigen::Index h) {
    return std::min<Eigen::Index>(4 * static_cast<Eigen::Index>(n), h);
  }

  static TokenizerParams create(nn::ParameterSet& ps, const PathwayCollection& collection, Eigen::Index h, Rng& rng) {
    TokenizerParams tp;
    tp.hidden_ = h;
    for (std::size_t i = 0; i < collection.size(); ++i) {
      const auto n = collection.pathway(i).members.size();
      const std::string name = "tokenizer.pathway" + std::to_string(i);
      Embedder e;
      e.mlp = nn::Mlp::create(ps, name, static_cast<Eigen::Index>(n), hidden_width(n, h), h, rng);
      e.token_bias = ps.add(name + ".token_bias", Mat::Zero(1, h));
      tp.pathways_.push_back(e);
    }
    const auto nb = collection.background().size();
    tp.background_.mlp =
        nn::Mlp::create(ps, "tokenizer.background", static_cast<Eigen::Index>(nb), hidden_width(nb, h), h, rng);
    tp.background_.token_bias = ps.add("tokenizer.background.token_bias", Mat::Zero(1, h));
    return tp;
  }

  Eigen::Index hidden() const { return hidden_; }
  const std::vector<Embedder>& pathways() const { return pathways_; }
  const Embedder& background() const { return background_; }

  struct Output {
    ad::Var pathway_tokens;  // (B*P) x h
    ad::Var background;      // B x h
  };

  Output embed(const nn::Binding& bind, ad::Var x, const PathwayCollection& collection) const {
    auto& t = bind.tape;
    require_shape(pathways_.size() == collection.size(), "tokenizer: parameters do not match the pathway collection");
    require_shape(t.value(x).cols() == static_cast<Eigen::Index>(collection.gene_count()),
                  "tokenizer: input width differs from gene count");
    std::vector<ad::Var> tokens;
    tokens.reserve(pathways_.size());
    for (std::size_t i = 0; i < pathways_.size(); ++i) {
      auto xi = ad::gather_cols(t, x, collection.pathway(i).members);
      tokens.push_back(ad::add_bias(t, pathways_[i].mlp(bind, xi), bind(pathways_[i].token_bias)));
    }
    auto xb = ad::gather_cols(t, x, collection.background());
    auto b = ad::add_bias(t, background_.mlp(bind, xb), bind(background_.token_bias));
    return {ad::stack_tokens(t, tokens), b};
  }

 private:
  Eigen::Index hidden_ = 0;
  std::vector<Embedder> pathways_;
  Embedder background_;
};

// Single-sample embedding of a G-vector into P pathway tokens plus the
// background token.
inline PathwayTokens embed(const Vec& x, const nn::ParameterSet& ps, const TokenizerParams& params,
                           const PathwayCollection& collection) {
  require_shape(x.size() == static_cast<Eigen::Index>(collection.gene_count()), "embed: input length differs from G");
  if (!x.allFinite()) throw NumericalError("embed: non-finite expression input");
  ad::Tape tape(false);
  nn::Binding bind{tape, ps, nullptr};
  auto xv = tape.constant(x.transpose());
  auto out = params.embed(bind, xv, collection);
  return {tape.value(out.pathway_tokens), tape.value(out.background).row(0)};
}

// Overlap averaging of per-pathway and background head outputs into gene space.
inline Vec reconstruct(const std::vector<Vec>& per_pathway, const Vec& background, const PathwayCollection& collection) {
  require_shape(per_pathway.size() == collection.size(), "reconstruct: one prediction per pathway required");
  ad::Tape tape(false);
  std::vector<ad::Var> parts;
  parts.reserve(per_pathway.size());
  for (std::size_t i = 0; i < per_pathway.size(); ++i) {
    require_shape(per_pathway[i].size() == static_cast<Eigen::Index>(collection.pathway(i).members.size()),
                  "reconstruct: prediction for pathway " + std::to_string(i) + " has wrong length");
    parts.push_back(tape.constant(per_pathway[i].transpose()));
  }
  require_shape(background.size() == static_cast<Eigen::Index>(collection.background().size()),
                "reconstruct: background prediction has wrong length");
  auto out = ad::overlap_average(tape, parts, tape.constant(background.transpose()), collection);
  return tape.value(out).row(0).transpose();
}

}  // namespace rnafm
