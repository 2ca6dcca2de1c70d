#pragma once

// Slide-level conditions: k-means aggregation of tile features, and a
// synthetic task with a closed-form conditional expression law.

#include "rnafm/common.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace rnafm {

struct TileFeatures {
  std::string slide_id;
  Mat features;  // n_tiles x d
};

struct SlideRepresentation {
  std::string slide_id;
  Mat y;  // k x d
};

struct KMeansOptions {
  int max_iterations = 100;
  double tolerance = 1e-6;  // max centroid movement
};

namespace detail {

inline bool row_less(const Mat& m, Eigen::Index a, Eigen::Index b) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    if (m(a, c) < m(b, c)) return true;
    if (m(a, c) > m(b, c)) return false;
  }
  return false;
}

}  // namespace detail

// Lloyd's k-means on the tile rows. Tiles are first put in lexicographic order
// and seeding is greedy farthest-point from a content-hashed start, so the
// result does not depend on input row order. Output rows are centroids sorted
// by descending cluster size, ties by first assigned (canonical) tile.
inline SlideRepresentation cluster_slide(const TileFeatures& tiles, int k, const KMeansOptions& opts = {}) {
  if (k < 1) throw ConfigError("cluster_slide: k must be >= 1");
  const Mat& raw = tiles.features;
  const auto n = raw.rows();
  if (n < 1) throw ConfigError("cluster_slide: slide '" + tiles.slide_id + "' has no tiles");
  if (!raw.allFinite()) throw NumericalError("cluster_slide: non-finite tile features in '" + tiles.slide_id + "'");

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return detail::row_less(raw, a, b); });
  Mat x(n, raw.cols());
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = raw.row(order[static_cast<std::size_t>(i)]);

  const Eigen::Index clusters = std::min<Eigen::Index>(k, n);
  Fnv1a h;
  for (Eigen::Index i = 0; i < x.size(); ++i) h.update(x.data()[i]);
  Mat centroids(clusters, x.cols());
  centroids.row(0) = x.row(static_cast<Eigen::Index>(h.digest() % static_cast<std::uint64_t>(n)));
  Vec nearest = (x.rowwise() - centroids.row(0)).rowwise().squaredNorm();
  for (Eigen::Index c = 1; c < clusters; ++c) {
    Eigen::Index far = 0;
    nearest.maxCoeff(&far);  // first maximal index on ties
    centroids.row(c) = x.row(far);
    nearest = nearest.cwiseMin((x.rowwise() - centroids.row(c)).rowwise().squaredNorm());
  }

  std::vector<Eigen::Index> assign(static_cast<std::size_t>(n), 0);
  for (int it = 0; it < opts.max_iterations; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (centroids.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
      assign[static_cast<std::size_t>(i)] = best;
    }
    Mat next = Mat::Zero(clusters, x.cols());
    std::vector<Eigen::Index> count(static_cast<std::size_t>(clusters), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
      ++count[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    double moved = 0.0;
    for (Eigen::Index c = 0; c < clusters; ++c) {
      if (count[static_cast<std::size_t>(c)] == 0) {
        next.row(c) = centroids.row(c);  // empty cluster keeps its centroid
      } else {
        next.row(c) /= static_cast<double>(count[static_cast<std::size_t>(c)]);
      }
      moved = std::max(moved, (next.row(c) - centroids.row(c)).norm());
    }
    centroids = std::move(next);
    if (moved <= opts.tolerance) break;
  }
  // final assignment against the converged centroids
  std::vector<Eigen::Index> size(static_cast<std::size_t>(clusters), 0);
  std::vector<Eigen::Index> first(static_cast<std::size_t>(clusters), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    (centroids.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
    ++size[static_cast<std::size_t>(best)];
    first[static_cast<std::size_t>(best)] = std::min(first[static_cast<std::size_t>(best)], i);
  }
  std::vector<Eigen::Index> rank(static_cast<std::size_t>(clusters));
  std::iota(rank.begin(), rank.end(), 0);
  std::stable_sort(rank.begin(), rank.end(), [&](auto a, auto b) {
    const auto sa = size[static_cast<std::size_t>(a)];
    const auto sb = size[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return first[static_cast<std::size_t>(a)] < first[static_cast<std::size_t>(b)];
  });

  SlideRepresentation rep;
  rep.slide_id = tiles.slide_id;
  rep.y.resize(k, x.cols());
  for (Eigen::Index r = 0; r < k; ++r) rep.y.row(r) = centroids.row(rank[static_cast<std::size_t>(r % clusters)]);
  return rep;
}

struct SyntheticTaskConfig {
  std::uint64_t seed = 0;
  Eigen::Index genes = 40;
  Eigen::Index condition_dim = 16;
  Eigen::Index clusters = 8;
  double noise = 0.3;          // sigma_task
  double signal_scale = 1.0;   // per-gene std of the conditional mean, roughly
  double cluster_spread = 0.5; // within-slide spread of cluster rows
};

// Ground truth: y has rows mu + spread * eps (mu, eps standard normal, values
// rounded to float32), ybar = mean of the rows, and x1 | y ~ N(W ybar, noise^2 I).
class SyntheticTask {
 public:
  explicit SyntheticTask(const SyntheticTaskConfig& cfg) : cfg_(cfg) {
    if (cfg.genes < 1 || cfg.condition_dim < 1 || cfg.clusters < 1) throw ConfigError("synthetic task: dims must be positive");
    if (!(cfg.noise >= 0.0)) throw ConfigError("synthetic task: noise must be >= 0");
    Rng rng = derive_rng(cfg.seed, 0x7a5c);
    mixing_ = standard_normal(rng, cfg.genes, cfg.condition_dim) *
              (cfg.signal_scale / std::sqrt(static_cast<double>(cfg.condition_dim)));
  }

  SyntheticTask(const SyntheticTaskConfig& cfg, Mat mixing) : cfg_(cfg), mixing_(std::move(mixing)) {
    require_shape(mixing_.rows() == cfg.genes && mixing_.cols() == cfg.condition_dim, "synthetic task: W shape");
  }

  const SyntheticTaskConfig& config() const { return cfg_; }
  const Mat& mixing() const { return mixing_; }
  double noise() const { return cfg_.noise; }

  Vec conditional_mean(const Mat& y) const {
    require_shape(y.cols() == cfg_.condition_dim, "synthetic task: condition width");
    return mixing_ * y.colwise().mean().transpose();
  }
  double conditional_variance() const { return cfg_.noise * cfg_.noise; }

  Mat sample_condition(Rng& rng) const {
    const Mat mu = standard_normal(rng, 1, cfg_.condition_dim);
    Mat y = standard_normal(rng, cfg_.clusters, cfg_.condition_dim) * cfg_.cluster_spread;
    y.rowwise() += mu.row(0);
    return y.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
  }

  Vec sample_expression(const Mat& y, Rng& rng) const {
    const Mat z = standard_normal(rng, 1, cfg_.genes);
    return conditional_mean(y) + cfg_.noise * z.row(0).transpose();
  }

  std::pair<Vec, Mat> sample_pair(Rng& rng) const {
    Mat y = sample_condition(rng);
    Vec x = sample_expression(y, rng);
    return {std::move(x), std::move(y)};
  }

 private:
  SyntheticTaskConfig cfg_;
  Mat mixing_;
};

inline SyntheticTask synth_task(const SyntheticTaskConfig& cfg) { return SyntheticTask(cfg); }

}  // namespace rnafm
