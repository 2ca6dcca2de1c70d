#pragma once

// Straight-line reference implementations of the evaluation metrics, written
// independently of the library code (no shared helpers).

#include "rnafm/common.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

namespace rnafm::oracle {

inline std::optional<double> pcc(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double num = 0, dx = 0, dy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    num += (x[i] - mx) * (y[i] - my);
    dx += (x[i] - mx) * (x[i] - mx);
    dy += (y[i] - my) * (y[i] - my);
  }
  if (dx == 0 || dy == 0) return std::nullopt;
  return num / std::sqrt(dx * dy);
}

inline double rmse(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s / x.size());
}

// Repeated argmax: highest fold-averaged PCC, lowest index on ties.
inline std::vector<std::size_t> top_k(const std::vector<std::vector<std::optional<double>>>& folds, std::size_t k) {
  const std::size_t genes = folds[0].size();
  std::vector<double> avg(genes, 0.0);
  std::vector<bool> ok(genes, false);
  for (std::size_t g = 0; g < genes; ++g) {
    int c = 0;
    for (const auto& f : folds)
      if (f[g]) {
        avg[g] += *f[g];
        ++c;
      }
    if (c) {
      avg[g] /= c;
      ok[g] = true;
    }
  }
  std::vector<std::size_t> out;
  std::vector<bool> taken(genes, false);
  for (std::size_t r = 0; r < k; ++r) {
    std::size_t best = genes;
    for (std::size_t g = 0; g < genes; ++g) {
      if (!ok[g] || taken[g]) continue;
      if (best == genes || avg[g] > avg[best]) best = g;
    }
    taken[best] = true;
    out.push_back(best);
  }
  return out;
}

// Type-7 sample quantile: h = (n-1)p, interpolate between floor and ceil.
inline double quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (v.size() - 1) * p;
  const double lo = v[static_cast<std::size_t>(std::floor(h))];
  const double hi = v[static_cast<std::size_t>(std::ceil(h))];
  return lo + (h - std::floor(h)) * (hi - lo);
}

inline std::vector<double> coverage(const std::vector<Mat>& ens, const Mat& truth, const std::vector<double>& levels) {
  std::vector<double> out;
  for (double level : levels) {
    double inside = 0, total = 0;
    for (std::size_t s = 0; s < ens.size(); ++s)
      for (Eigen::Index g = 0; g < truth.cols(); ++g) {
        std::vector<double> col;
        for (Eigen::Index i = 0; i < ens[s].rows(); ++i) col.push_back(ens[s](i, g));
        const double lo = quantile(col, (1 - level) / 2), hi = quantile(col, (1 + level) / 2);
        const double t = truth(static_cast<Eigen::Index>(s), g);
        inside += (lo <= t && t <= hi) ? 1 : 0;
        total += 1;
      }
    out.push_back(inside / total);
  }
  return out;
}

inline std::pair<double, double> mean_var(const Mat& e, Eigen::Index g) {
  double m = 0;
  for (Eigen::Index i = 0; i < e.rows(); ++i) m += e(i, g);
  m /= e.rows();
  double v = 0;
  for (Eigen::Index i = 0; i < e.rows(); ++i) v += (e(i, g) - m) * (e(i, g) - m);
  return {m, v / e.rows()};
}

inline double nll(const std::vector<Mat>& ens, const Mat& truth, double floor = 1e-6) {
  double acc = 0;
  int n = 0;
  for (std::size_t s = 0; s < ens.size(); ++s)
    for (Eigen::Index g = 0; g < truth.cols(); ++g) {
      auto [m, v] = mean_var(ens[s], g);
      v = std::max(v, floor);
      const double r = truth(static_cast<Eigen::Index>(s), g) - m;
      acc += -std::log(std::exp(-r * r / (2 * v)) / std::sqrt(2 * std::numbers::pi * v));
      ++n;
    }
  return acc / n;
}

// Average rank by counting: 1 + #less + (#equal - 1)/2.
inline std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double v : x) {
      less += v < x[i];
      equal += v == x[i];
    }
    r[i] = 1 + less + (equal - 1) / 2;
  }
  return r;
}

inline std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pcc(ranks(a), ranks(b));
}

inline std::optional<double> variance_error_spearman(const std::vector<Mat>& ens, const Mat& truth) {
  std::vector<double> vars, errs;
  for (std::size_t s = 0; s < ens.size(); ++s)
    for (Eigen::Index g = 0; g < truth.cols(); ++g) {
      auto [m, v] = mean_var(ens[s], g);
      vars.push_back(v);
      errs.push_back(std::abs(truth(static_cast<Eigen::Index>(s), g) - m));
    }
  return spearman(vars, errs);
}

}  // namespace rnafm::oracle
