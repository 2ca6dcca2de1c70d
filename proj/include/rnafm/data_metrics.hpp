#pragma once

// Expression preprocessing, fold assignment, per-gene PCC/RMSE, top-K gene
// selection and ensemble uncertainty metrics.

#include "rnafm/common.hpp"

#include <algorithm>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rnafm {

enum class ExpressionSpace { Raw, Log, Standardized };

inline const char* to_string(ExpressionSpace s) {
  switch (s) {
    case ExpressionSpace::Raw: return "raw";
    case ExpressionSpace::Log: return "log";
    case ExpressionSpace::Standardized: return "standardized";
  }
  return "?";
}

struct ExpressionMatrix {
  std::vector<std::string> sample_ids;
  std::vector<std::string> genes;
  Mat values;  // samples x genes
  ExpressionSpace space = ExpressionSpace::Raw;

  std::string vocabulary_fingerprint() const {
    Fnv1a h;
    h.update(std::uint64_t{genes.size()});
    for (const auto& g : genes) h.update(g);
    return h.hex();
  }

  std::optional<std::size_t> row_of(const std::string& id) const {
    auto it = std::find(sample_ids.begin(), sample_ids.end(), id);
    if (it == sample_ids.end()) return std::nullopt;
    return static_cast<std::size_t>(it - sample_ids.begin());
  }
};

// log2(x + 1), elementwise.
inline Mat log_transform(const Mat& raw) {
  for (Eigen::Index i = 0; i < raw.size(); ++i)
    if (!(raw.data()[i] >= 0.0)) throw ParseError("log_transform: negative or NaN raw expression value");
  return raw.unaryExpr([](double v) { return std::log2(v + 1.0); });
}

inline ExpressionMatrix log_transform(const ExpressionMatrix& m) {
  if (m.space != ExpressionSpace::Raw) throw ConfigError("log_transform: matrix is not in raw space");
  ExpressionMatrix out = m;
  out.values = log_transform(m.values);
  out.space = ExpressionSpace::Log;
  return out;
}

// Per-gene z-scoring with population standard deviation.
class Standardizer {
 public:
  static constexpr double kDefaultFloor = 1e-6;

  Standardizer() = default;
  Standardizer(Vec mean, Vec stddev, std::string fingerprint)
      : mean_(std::move(mean)), std_(std::move(stddev)), fingerprint_(std::move(fingerprint)) {}

  static Standardizer fit(const Mat& train, std::string fingerprint, double floor = kDefaultFloor) {
    if (train.rows() < 2) throw ConfigError("standardizer: need at least 2 training samples");
    Vec mean = train.colwise().mean().transpose();
    Vec sd(train.cols());
    for (Eigen::Index g = 0; g < train.cols(); ++g) {
      const double var = (train.col(g).array() - mean(g)).square().mean();
      sd(g) = std::max(std::sqrt(var), floor);
    }
    return Standardizer(std::move(mean), std::move(sd), std::move(fingerprint));
  }

  const Vec& mean() const { return mean_; }
  const Vec& stddev() const { return std_; }
  const std::string& fingerprint() const { return fingerprint_; }
  Eigen::Index size() const { return mean_.size(); }

  void check(const std::string& fingerprint, Eigen::Index cols) const {
    if (fingerprint != fingerprint_)
      throw FingerprintError("standardizer was fit on vocabulary " + fingerprint_ + ", applied to " + fingerprint);
    require_shape(cols == mean_.size(), "standardizer: gene count mismatch");
  }

  Mat apply(const Mat& x, const std::string& fingerprint) const {
    check(fingerprint, x.cols());
    return apply_unchecked(x);
  }
  Mat invert(const Mat& z, const std::string& fingerprint) const {
    check(fingerprint, z.cols());
    return invert_unchecked(z);
  }

  Mat apply_unchecked(const Mat& x) const {
    return (x.rowwise() - mean_.transpose()).array().rowwise() / std_.transpose().array();
  }
  Mat invert_unchecked(const Mat& z) const {
    return (z.array().rowwise() * std_.transpose().array()).matrix().rowwise() + mean_.transpose();
  }

 private:
  Vec mean_;
  Vec std_;
  std::string fingerprint_;
};

// Seeded uniform partition into `folds` groups whose sizes differ by at most one.
inline std::vector<int> assign_folds(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 1) throw ConfigError("fold count must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_rng(seed, 0xf01d);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[order[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
  return fold;
}

// ---------------------------------------------------------------------------
// Per-gene accuracy

// Pearson correlation; nullopt when either side is constant.
inline std::optional<double> pcc(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw ShapeError("pcc: length mismatch");
  if (pred.size() < 2) throw ShapeError("pcc: need at least 2 values");
  const double n = static_cast<double>(pred.size());
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
  const double mt = std::accumulate(truth.begin(), truth.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = pred[i] - mp;
    const double b = truth[i] - mt;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / (std::sqrt(sxx) * std::sqrt(syy)), -1.0, 1.0);
}

inline double rmse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw ShapeError("rmse: length mismatch");
  if (pred.empty()) throw ShapeError("rmse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

inline std::vector<double> column(const Mat& m, Eigen::Index c) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) out[static_cast<std::size_t>(r)] = m(r, c);
  return out;
}

inline std::vector<std::optional<double>> per_gene_pcc(const Mat& pred, const Mat& truth) {
  require_shape(pred.rows() == truth.rows() && pred.cols() == truth.cols(), "per_gene_pcc: shape mismatch");
  std::vector<std::optional<double>> out;
  out.reserve(static_cast<std::size_t>(pred.cols()));
  for (Eigen::Index g = 0; g < pred.cols(); ++g) out.push_back(pcc(column(pred, g), column(truth, g)));
  return out;
}

inline std::vector<double> per_gene_rmse(const Mat& pred, const Mat& truth) {
  require_shape(pred.rows() == truth.rows() && pred.cols() == truth.cols(), "per_gene_rmse: shape mismatch");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(pred.cols()));
  for (Eigen::Index g = 0; g < pred.cols(); ++g) out.push_back(rmse(column(pred, g), column(truth, g)));
  return out;
}

// Ranks genes by PCC averaged over folds (undefined entries skipped), ties to
// the lower gene index, and returns the first k.
inline std::vector<std::size_t> select_top_k(const std::vector<std::vector<std::optional<double>>>& fold_pcc,
                                             std::size_t k) {
  if (fold_pcc.empty()) throw ConfigError("select_top_k: no folds");
  const std::size_t genes = fold_pcc.front().size();
  std::vector<std::pair<double, std::size_t>> eligible;
  for (std::size_t g = 0; g < genes; ++g) {
    double sum = 0.0;
    int count = 0;
    for (const auto& fold : fold_pcc) {
      if (fold.size() != genes) throw ShapeError("select_top_k: folds disagree on gene count");
      if (fold[g]) {
        sum += *fold[g];
        ++count;
      }
    }
    if (count > 0) eligible.emplace_back(sum / count, g);
  }
  if (k > eligible.size())
    throw ConfigError("select_top_k: K=" + std::to_string(k) + " exceeds the " + std::to_string(eligible.size()) +
                      " genes with a defined PCC");
  std::stable_sort(eligible.begin(), eligible.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(eligible[i].second);
  return out;
}

// ---------------------------------------------------------------------------
// Ensemble statistics

enum class PointEstimate { Mean, Median, Single };

// Linear interpolation between order statistics of a sorted sample.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ShapeError("quantile: empty sample");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// samples: N x G. Mean is the default point estimate.
inline Vec point_prediction(const Mat& samples, PointEstimate mode = PointEstimate::Mean) {
  if (samples.rows() < 1) throw ShapeError("point_prediction: empty ensemble");
  switch (mode) {
    case PointEstimate::Mean: return samples.colwise().mean().transpose();
    case PointEstimate::Single: return samples.row(0).transpose();
    case PointEstimate::Median: {
      Vec out(samples.cols());
      for (Eigen::Index g = 0; g < samples.cols(); ++g) {
        auto col = column(samples, g);
        std::sort(col.begin(), col.end());
        out(g) = quantile_sorted(col, 0.5);
      }
      return out;
    }
  }
  return {};
}

// Population variance per gene.
inline Vec ensemble_variance(const Mat& samples) {
  const RowVec mean = samples.colwise().mean();
  return (samples.rowwise() - mean).array().square().colwise().mean().transpose();
}

inline void check_ensembles(std::span<const Mat> ensembles, const Mat& truths) {
  require_shape(static_cast<Eigen::Index>(ensembles.size()) == truths.rows(),
                "uncertainty metrics: one ensemble per truth row required");
  for (const auto& e : ensembles) require_shape(e.cols() == truths.cols(), "uncertainty metrics: gene count mismatch");
}

// Fraction of (sample, gene) truths inside the central ensemble interval at
// each nominal level.
inline std::vector<double> interval_coverage(std::span<const Mat> ensembles, const Mat& truths,
                                             std::span<const double> levels, std::size_t min_members = 10) {
  check_ensembles(ensembles, truths);
  std::vector<std::size_t> hits(levels.size(), 0);
  std::size_t total = 0;
  for (std::size_t s = 0; s < ensembles.size(); ++s) {
    const Mat& e = ensembles[s];
    if (static_cast<std::size_t>(e.rows()) < min_members)
      throw ConfigError("interval_coverage: ensemble of " + std::to_string(e.rows()) + " members; need >= " +
                        std::to_string(min_members));
    for (Eigen::Index g = 0; g < e.cols(); ++g) {
      auto col = column(e, g);
      std::sort(col.begin(), col.end());
      const double truth = truths(static_cast<Eigen::Index>(s), g);
      for (std::size_t l = 0; l < levels.size(); ++l) {
        const double lo = quantile_sorted(col, (1.0 - levels[l]) / 2.0);
        const double hi = quantile_sorted(col, (1.0 + levels[l]) / 2.0);
        if (truth >= lo && truth <= hi) ++hits[l];
      }
      ++total;
    }
  }
  std::vector<double> out(levels.size(), 0.0);
  if (total == 0) return out;
  for (std::size_t l = 0; l < levels.size(); ++l) out[l] = static_cast<double>(hits[l]) / static_cast<double>(total);
  return out;
}

// Mean Gaussian negative log-likelihood of the truths under per-gene ensemble
// mean and (floored) population variance.
inline double gaussian_nll(std::span<const Mat> ensembles, const Mat& truths, double variance_floor = 1e-6) {
  check_ensembles(ensembles, truths);
  double acc = 0.0;
  std::size_t total = 0;
  for (std::size_t s = 0; s < ensembles.size(); ++s) {
    const Mat& e = ensembles[s];
    if (e.rows() < 2) throw ConfigError("gaussian_nll: need at least 2 ensemble members");
    const Vec mean = e.colwise().mean().transpose();
    const Vec var = ensemble_variance(e);
    for (Eigen::Index g = 0; g < e.cols(); ++g) {
      const double v = std::max(var(g), variance_floor);
      const double r = truths(static_cast<Eigen::Index>(s), g) - mean(g);
      acc += 0.5 * std::log(2.0 * std::numbers::pi * v) + r * r / (2.0 * v);
      ++total;
    }
  }
  return total ? acc / static_cast<double>(total) : 0.0;
}

// Average ranks (1-based) with ties sharing the mean rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = r;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("spearman: length mismatch");
  if (a.size() < 3) throw ShapeError("spearman: need at least 3 pairs");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pcc(ra, rb);
}

// Spearman correlation between per-(sample, gene) ensemble variance and the
// absolute error of the ensemble mean.
inline std::optional<double> variance_error_spearman(std::span<const Mat> ensembles, const Mat& truths) {
  check_ensembles(ensembles, truths);
  std::vector<double> vars;
  std::vector<double> errs;
  for (std::size_t s = 0; s < ensembles.size(); ++s) {
    const Mat& e = ensembles[s];
    const Vec mean = e.colwise().mean().transpose();
    const Vec var = ensemble_variance(e);
    for (Eigen::Index g = 0; g < e.cols(); ++g) {
      vars.push_back(var(g));
      errs.push_back(std::abs(truths(static_cast<Eigen::Index>(s), g) - mean(g)));
    }
  }
  return spearman(vars, errs);
}

// Restrict ensembles and truths to a subset of gene columns.
inline std::pair<std::vector<Mat>, Mat> restrict_genes(std::span<const Mat> ensembles, const Mat& truths,
                                                       std::span<const std::size_t> genes) {
  std::vector<Mat> es;
  es.reserve(ensembles.size());
  Mat t(truths.rows(), static_cast<Eigen::Index>(genes.size()));
  for (std::size_t j = 0; j < genes.size(); ++j)
    t.col(static_cast<Eigen::Index>(j)) = truths.col(static_cast<Eigen::Index>(genes[j]));
  for (const auto& e : ensembles) {
    Mat r(e.rows(), static_cast<Eigen::Index>(genes.size()));
    for (std::size_t j = 0; j < genes.size(); ++j)
      r.col(static_cast<Eigen::Index>(j)) = e.col(static_cast<Eigen::Index>(genes[j]));
    es.push_back(std::move(r));
  }
  return {std::move(es), std::move(t)};
}

// ---------------------------------------------------------------------------
// Reports

struct TopKSummary {
  std::size_t k = 0;
  std::vector<std::size_t> genes;
  double mean_pcc = 0.0;
  double mean_rmse = 0.0;
};

struct MetricsReport {
  std::vector<std::optional<double>> pcc;
  std::vector<double> rmse;
  std::size_t undefined_pcc = 0;
  double mean_pcc = 0.0;  // over genes with a defined PCC
  double mean_rmse = 0.0;
  std::vector<TopKSummary> top_k;
};

struct UncertaintyReport {
  std::vector<double> levels;
  std::vector<double> coverage;
  double nll = 0.0;
  std::optional<double> spearman;
};

inline const std::vector<double>& default_coverage_levels() {
  static const std::vector<double> levels{0.5, 0.8, 0.9};
  return levels;
}

inline const std::vector<std::size_t>& default_top_k() {
  static const std::vector<std::size_t> ks{1000, 500, 200, 100, 50, 20};
  return ks;
}

// `folds` gives each row's fold (out-of-fold evaluation); empty means one fold.
inline MetricsReport compute_metrics(const Mat& pred, const Mat& truth, std::span<const std::size_t> top_ks,
                                     std::span<const int> folds = {}) {
  MetricsReport rep;
  rep.pcc = per_gene_pcc(pred, truth);
  rep.rmse = per_gene_rmse(pred, truth);
  double sum = 0.0;
  for (const auto& p : rep.pcc) {
    if (p)
      sum += *p;
    else
      ++rep.undefined_pcc;
  }
  const auto defined = rep.pcc.size() - rep.undefined_pcc;
  rep.mean_pcc = defined ? sum / static_cast<double>(defined) : 0.0;
  rep.mean_rmse = std::accumulate(rep.rmse.begin(), rep.rmse.end(), 0.0) / static_cast<double>(rep.rmse.size());

  std::vector<std::vector<std::optional<double>>> fold_pcc;
  if (folds.empty()) {
    fold_pcc.push_back(rep.pcc);
  } else {
    require_shape(static_cast<Eigen::Index>(folds.size()) == pred.rows(), "compute_metrics: one fold per row required");
    const int max_fold = *std::max_element(folds.begin(), folds.end());
    for (int f = 0; f <= max_fold; ++f) {
      std::vector<Eigen::Index> rows;
      for (std::size_t r = 0; r < folds.size(); ++r)
        if (folds[r] == f) rows.push_back(static_cast<Eigen::Index>(r));
      if (rows.size() < 2) continue;
      Mat p(static_cast<Eigen::Index>(rows.size()), pred.cols());
      Mat t(static_cast<Eigen::Index>(rows.size()), pred.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        p.row(static_cast<Eigen::Index>(i)) = pred.row(rows[i]);
        t.row(static_cast<Eigen::Index>(i)) = truth.row(rows[i]);
      }
      fold_pcc.push_back(per_gene_pcc(p, t));
    }
    if (fold_pcc.empty()) fold_pcc.push_back(rep.pcc);
  }
  for (auto k : top_ks) {
    if (k > defined || k == 0) continue;
    TopKSummary s;
    s.k = k;
    s.genes = select_top_k(fold_pcc, k);
    double ps = 0.0, rs = 0.0;
    std::size_t pn = 0;
    for (auto g : s.genes) {
      if (rep.pcc[g]) {
        ps += *rep.pcc[g];
        ++pn;
      }
      rs += rep.rmse[g];
    }
    s.mean_pcc = pn ? ps / static_cast<double>(pn) : 0.0;
    s.mean_rmse = rs / static_cast<double>(s.genes.size());
    rep.top_k.push_back(std::move(s));
  }
  return rep;
}

inline UncertaintyReport compute_uncertainty(std::span<const Mat> ensembles, const Mat& truths,
                                             std::span<const double> levels, double variance_floor = 1e-6) {
  UncertaintyReport rep;
  rep.levels.assign(levels.begin(), levels.end());
  rep.coverage = interval_coverage(ensembles, truths, levels);
  rep.nll = gaussian_nll(ensembles, truths, variance_floor);
  rep.spearman = variance_error_spearman(ensembles, truths);
  return rep;
}

}  // namespace rnafm
