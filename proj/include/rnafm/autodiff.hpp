#pragma once

// Minimal reverse-mode autodiff over dense row-major matrices. A Tape records
// the forward computation of one step; backward() replays it in reverse.
// Token tensors are stored flattened as (batch * tokens) x width, with the
// tokens of one sample contiguous.

#include "rnafm/common.hpp"
#include "rnafm/pathway_graph.hpp"

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace rnafm::ad {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& grad_out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }

  // References `value` without copying; the referent must outlive the tape.
  // Gradients flow into `grad_sink` (same shape) during backward().
  Var param(const Mat& value, Mat* grad_sink) {
    Node n;
    n.ref = &value;
    n.needs_grad = record_ && grad_sink != nullptr;
    if (n.needs_grad) {
      n.backward = [grad_sink](Tape&, const Mat& g) { *grad_sink += g; };
    }
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  const Mat& value(Var v) const { return nodes_.at(v.id).val(); }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  // Gradient of the last backward() with respect to v (zeros if unreached).
  Mat grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Mat::Zero(n.val().rows(), n.val().cols());
    return n.grad;
  }

  template <class Expr>
  void accumulate(Var v, const Expr& g) {
    auto& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0 && n.val().size() != 0) {
      n.grad = g;
    } else if (n.val().size() != 0) {
      n.grad += g;
    }
  }

  void backward(Var loss) {
    if (!record_) throw Error("backward() on a non-recording tape");
    auto& root = nodes_.at(loss.id);
    require_shape(root.val().rows() == 1 && root.val().cols() == 1, "backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    root.grad = Mat::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad || !n.backward || n.grad.size() == 0) continue;
      // the closure may grow nothing but may touch other nodes' grads
      const Mat g = n.grad;
      n.backward(*this, g);
    }
  }

  bool any_needs_grad(std::initializer_list<Var> vars) const {
    if (!record_) return false;
    for (auto v : vars)
      if (nodes_.at(v.id).needs_grad) return true;
    return false;
  }

  Var push(Mat value, bool needs_grad, Backward backward) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat owned;
    const Mat* ref = nullptr;
    Mat grad;
    bool needs_grad = false;
    Backward backward;
    const Mat& val() const { return ref ? *ref : owned; }
  };

  bool record_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops

inline Var matmul(Tape& t, Var a, Var b) {
  const Mat& av = t.value(a);
  const Mat& bv = t.value(b);
  require_shape(av.cols() == bv.rows(), "matmul: inner dimensions differ");
  Mat out = av * bv;
  return t.push(std::move(out), t.any_needs_grad({a, b}), [a, b](Tape& tp, const Mat& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

inline Var add_bias(Tape& t, Var x, Var bias) {
  const Mat& xv = t.value(x);
  const Mat& bv = t.value(bias);
  require_shape(bv.rows() == 1 && bv.cols() == xv.cols(), "add_bias: bias must be 1 x cols");
  Mat out = xv.rowwise() + bv.row(0);
  return t.push(std::move(out), t.any_needs_grad({x, bias}), [x, bias](Tape& tp, const Mat& g) {
    tp.accumulate(x, g);
    if (tp.needs_grad(bias)) tp.accumulate(bias, g.colwise().sum());
  });
}

inline Var add(Tape& t, Var a, Var b) {
  require_shape(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                "add: shape mismatch");
  Mat out = t.value(a) + t.value(b);
  return t.push(std::move(out), t.any_needs_grad({a, b}), [a, b](Tape& tp, const Mat& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline Var mul(Tape& t, Var a, Var b) {
  require_shape(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                "mul: shape mismatch");
  Mat out = t.value(a).cwiseProduct(t.value(b));
  return t.push(std::move(out), t.any_needs_grad({a, b}), [a, b](Tape& tp, const Mat& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

inline Var scale(Tape& t, Var a, double c) {
  Mat out = c * t.value(a);
  return t.push(std::move(out), t.any_needs_grad({a}), [a, c](Tape& tp, const Mat& g) { tp.accumulate(a, c * g); });
}

// s is a 1x1 variable.
inline Var scale_by(Tape& t, Var a, Var s) {
  require_shape(t.value(s).size() == 1, "scale_by: scale must be 1x1");
  Mat out = t.value(s)(0, 0) * t.value(a);
  return t.push(std::move(out), t.any_needs_grad({a, s}), [a, s](Tape& tp, const Mat& g) {
    if (tp.needs_grad(a)) tp.accumulate(a, tp.value(s)(0, 0) * g);
    if (tp.needs_grad(s)) tp.accumulate(s, Mat::Constant(1, 1, g.cwiseProduct(tp.value(a)).sum()));
  });
}

inline Var gelu(Tape& t, Var x) {
  const Mat& xv = t.value(x);
  Mat out = xv.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); });
  return t.push(std::move(out), t.any_needs_grad({x}), [x](Tape& tp, const Mat& g) {
    const Mat d = tp.value(x).unaryExpr([](double v) {
      const double pdf = std::exp(-0.5 * v * v) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
      return 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) + v * pdf;
    });
    tp.accumulate(x, g.cwiseProduct(d));
  });
}

inline Var silu(Tape& t, Var x) {
  const Mat& xv = t.value(x);
  Mat out = xv.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
  return t.push(std::move(out), t.any_needs_grad({x}), [x](Tape& tp, const Mat& g) {
    const Mat d = tp.value(x).unaryExpr([](double v) {
      const double s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 + v * (1.0 - s));
    });
    tp.accumulate(x, g.cwiseProduct(d));
  });
}

// Row-wise normalization without affine parameters.
inline Var layer_norm(Tape& t, Var x, double eps = 1e-6) {
  const Mat& xv = t.value(x);
  const auto n = xv.cols();
  Mat out(xv.rows(), n);
  Vec inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    out.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Mat xhat = out;
  return t.push(std::move(out), t.any_needs_grad({x}),
                [x, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Mat& g) {
                  Mat dx(g.rows(), g.cols());
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    const double mg = g.row(r).mean();
                    const double mgx = g.row(r).cwiseProduct(xhat.row(r)).mean();
                    dx.row(r) = inv_std(r) * (g.row(r).array() - mg - xhat.row(r).array() * mgx);
                  }
                  tp.accumulate(x, dx);
                });
}

// x * gamma with gamma a 1 x cols row broadcast over rows.
inline Var mul_row(Tape& t, Var x, Var gamma) {
  const Mat& xv = t.value(x);
  const Mat& gv = t.value(gamma);
  require_shape(gv.rows() == 1 && gv.cols() == xv.cols(), "mul_row: gamma must be 1 x cols");
  Mat out = xv.array().rowwise() * gv.row(0).array();
  return t.push(std::move(out), t.any_needs_grad({x, gamma}), [x, gamma](Tape& tp, const Mat& g) {
    if (tp.needs_grad(x)) {
      Mat dx = g.array().rowwise() * tp.value(gamma).row(0).array();
      tp.accumulate(x, dx);
    }
    if (tp.needs_grad(gamma)) tp.accumulate(gamma, g.cwiseProduct(tp.value(x)).colwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Column and token bookkeeping

inline Var slice_cols(Tape& t, Var x, Eigen::Index start, Eigen::Index len) {
  const Mat& xv = t.value(x);
  require_shape(start >= 0 && len >= 0 && start + len <= xv.cols(), "slice_cols: out of range");
  Mat out = xv.middleCols(start, len);
  return t.push(std::move(out), t.any_needs_grad({x}), [x, start, len](Tape& tp, const Mat& g) {
    Mat dx = Mat::Zero(tp.value(x).rows(), tp.value(x).cols());
    dx.middleCols(start, len) = g;
    tp.accumulate(x, dx);
  });
}

inline Var concat_cols(Tape& t, Var a, Var b) {
  const Mat& av = t.value(a);
  const Mat& bv = t.value(b);
  require_shape(av.rows() == bv.rows(), "concat_cols: row mismatch");
  Mat out(av.rows(), av.cols() + bv.cols());
  out.leftCols(av.cols()) = av;
  out.rightCols(bv.cols()) = bv;
  const auto ac = av.cols();
  const auto bc = bv.cols();
  return t.push(std::move(out), t.any_needs_grad({a, b}), [a, b, ac, bc](Tape& tp, const Mat& g) {
    tp.accumulate(a, g.leftCols(ac));
    tp.accumulate(b, g.rightCols(bc));
  });
}

inline Var gather_cols(Tape& t, Var x, std::span<const std::size_t> idx) {
  const Mat& xv = t.value(x);
  Mat out(xv.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    require_shape(static_cast<Eigen::Index>(idx[j]) < xv.cols(), "gather_cols: index out of range");
    out.col(static_cast<Eigen::Index>(j)) = xv.col(static_cast<Eigen::Index>(idx[j]));
  }
  std::vector<std::size_t> cols(idx.begin(), idx.end());
  return t.push(std::move(out), t.any_needs_grad({x}), [x, cols = std::move(cols)](Tape& tp, const Mat& g) {
    Mat dx = Mat::Zero(tp.value(x).rows(), tp.value(x).cols());
    for (std::size_t j = 0; j < cols.size(); ++j)
      dx.col(static_cast<Eigen::Index>(cols[j])) += g.col(static_cast<Eigen::Index>(j));
    tp.accumulate(x, dx);
  });
}

// Each input is batch x width; output row b*T + i holds token i of sample b.
inline Var stack_tokens(Tape& t, const std::vector<Var>& tokens) {
  require_shape(!tokens.empty(), "stack_tokens: no tokens");
  const auto count = static_cast<Eigen::Index>(tokens.size());
  const auto batch = t.value(tokens[0]).rows();
  const auto width = t.value(tokens[0]).cols();
  Mat out(batch * count, width);
  bool needs = false;
  for (Eigen::Index i = 0; i < count; ++i) {
    const Mat& v = t.value(tokens[static_cast<std::size_t>(i)]);
    require_shape(v.rows() == batch && v.cols() == width, "stack_tokens: inconsistent token shapes");
    for (Eigen::Index b = 0; b < batch; ++b) out.row(b * count + i) = v.row(b);
    needs = needs || t.any_needs_grad({tokens[static_cast<std::size_t>(i)]});
  }
  return t.push(std::move(out), needs, [tokens, batch, count](Tape& tp, const Mat& g) {
    for (Eigen::Index i = 0; i < count; ++i) {
      const Var v = tokens[static_cast<std::size_t>(i)];
      if (!tp.needs_grad(v)) continue;
      Mat d(batch, g.cols());
      for (Eigen::Index b = 0; b < batch; ++b) d.row(b) = g.row(b * count + i);
      tp.accumulate(v, d);
    }
  });
}

inline Var slice_tokens(Tape& t, Var z, Eigen::Index tokens, Eigen::Index start, Eigen::Index count) {
  const Mat& zv = t.value(z);
  require_shape(tokens > 0 && zv.rows() % tokens == 0 && start + count <= tokens, "slice_tokens: bad layout");
  const auto batch = zv.rows() / tokens;
  Mat out(batch * count, zv.cols());
  for (Eigen::Index b = 0; b < batch; ++b) out.middleRows(b * count, count) = zv.middleRows(b * tokens + start, count);
  return t.push(std::move(out), t.any_needs_grad({z}), [z, tokens, start, count, batch](Tape& tp, const Mat& g) {
    Mat dz = Mat::Zero(tp.value(z).rows(), tp.value(z).cols());
    for (Eigen::Index b = 0; b < batch; ++b) dz.middleRows(b * tokens + start, count) = g.middleRows(b * count, count);
    tp.accumulate(z, dz);
  });
}

inline Var concat_tokens(Tape& t, Var a, Eigen::Index ta, Var b, Eigen::Index tb) {
  const Mat& av = t.value(a);
  const Mat& bv = t.value(b);
  require_shape(ta > 0 && tb > 0 && av.rows() % ta == 0 && bv.rows() % tb == 0 && av.rows() / ta == bv.rows() / tb &&
                    av.cols() == bv.cols(),
                "concat_tokens: bad layout");
  const auto batch = av.rows() / ta;
  const auto tt = ta + tb;
  Mat out(batch * tt, av.cols());
  for (Eigen::Index s = 0; s < batch; ++s) {
    out.middleRows(s * tt, ta) = av.middleRows(s * ta, ta);
    out.middleRows(s * tt + ta, tb) = bv.middleRows(s * tb, tb);
  }
  return t.push(std::move(out), t.any_needs_grad({a, b}), [a, b, ta, tb, batch, tt](Tape& tp, const Mat& g) {
    if (tp.needs_grad(a)) {
      Mat d(batch * ta, g.cols());
      for (Eigen::Index s = 0; s < batch; ++s) d.middleRows(s * ta, ta) = g.middleRows(s * tt, ta);
      tp.accumulate(a, d);
    }
    if (tp.needs_grad(b)) {
      Mat d(batch * tb, g.cols());
      for (Eigen::Index s = 0; s < batch; ++s) d.middleRows(s * tb, tb) = g.middleRows(s * tt + ta, tb);
      tp.accumulate(b, d);
    }
  });
}

inline Var mean_tokens(Tape& t, Var z, Eigen::Index tokens) {
  const Mat& zv = t.value(z);
  require_shape(tokens > 0 && zv.rows() % tokens == 0, "mean_tokens: bad layout");
  const auto batch = zv.rows() / tokens;
  Mat out(batch, zv.cols());
  for (Eigen::Index b = 0; b < batch; ++b) out.row(b) = zv.middleRows(b * tokens, tokens).colwise().mean();
  return t.push(std::move(out), t.any_needs_grad({z}), [z, tokens, batch](Tape& tp, const Mat& g) {
    Mat dz(batch * tokens, g.cols());
    const double w = 1.0 / static_cast<double>(tokens);
    for (Eigen::Index b = 0; b < batch; ++b)
      for (Eigen::Index i = 0; i < tokens; ++i) dz.row(b * tokens + i) = w * g.row(b);
    tp.accumulate(z, dz);
  });
}

// x * (1 + scale_b) + shift_b, with shift/scale given per sample (batch x width).
inline Var modulate(Tape& t, Var x, Var shift, Var scl, Eigen::Index tokens) {
  const Mat& xv = t.value(x);
  const Mat& sh = t.value(shift);
  const Mat& sc = t.value(scl);
  require_shape(xv.rows() == sh.rows() * tokens && sh.rows() == sc.rows() && sh.cols() == xv.cols() &&
                    sc.cols() == xv.cols(),
                "modulate: shape mismatch");
  Mat out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const auto b = r / tokens;
    out.row(r) = xv.row(r).array() * (1.0 + sc.row(b).array()) + sh.row(b).array();
  }
  return t.push(std::move(out), t.any_needs_grad({x, shift, scl}), [x, shift, scl, tokens](Tape& tp, const Mat& g) {
    const Mat& xv2 = tp.value(x);
    const Mat& sc2 = tp.value(scl);
    const auto batch = sc2.rows();
    Mat dx(g.rows(), g.cols());
    Mat dsh = Mat::Zero(batch, g.cols());
    Mat dsc = Mat::Zero(batch, g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const auto b = r / tokens;
      dx.row(r) = g.row(r).array() * (1.0 + sc2.row(b).array());
      dsh.row(b) += g.row(r);
      dsc.row(b) += g.row(r).cwiseProduct(xv2.row(r));
    }
    tp.accumulate(x, dx);
    tp.accumulate(shift, dsh);
    tp.accumulate(scl, dsc);
  });
}

// y * gate_b with the gate given per sample (batch x width).
inline Var gate(Tape& t, Var y, Var gt, Eigen::Index tokens) {
  const Mat& yv = t.value(y);
  const Mat& gv = t.value(gt);
  require_shape(yv.rows() == gv.rows() * tokens && yv.cols() == gv.cols(), "gate: shape mismatch");
  Mat out(yv.rows(), yv.cols());
  for (Eigen::Index r = 0; r < yv.rows(); ++r) out.row(r) = yv.row(r).cwiseProduct(gv.row(r / tokens));
  return t.push(std::move(out), t.any_needs_grad({y, gt}), [y, gt, tokens](Tape& tp, const Mat& g) {
    const Mat& yv2 = tp.value(y);
    const Mat& gv2 = tp.value(gt);
    Mat dy(g.rows(), g.cols());
    Mat dg = Mat::Zero(gv2.rows(), gv2.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      dy.row(r) = g.row(r).cwiseProduct(gv2.row(r / tokens));
      dg.row(r / tokens) += g.row(r).cwiseProduct(yv2.row(r));
    }
    tp.accumulate(y, dy);
    tp.accumulate(gt, dg);
  });
}

// Per-sample condition rows: source[b] >= 0 picks row source[b] of `encoded`,
// -1 picks the single row of `null_row`.
inline Var select_condition(Tape& t, Var encoded, Var null_row, std::span<const int> source) {
  const Mat& ev = t.value(encoded);
  const Mat& nv = t.value(null_row);
  require_shape(nv.rows() == 1, "select_condition: null row must be 1 x width");
  Mat out(static_cast<Eigen::Index>(source.size()), nv.cols());
  for (std::size_t b = 0; b < source.size(); ++b) {
    const auto r = static_cast<Eigen::Index>(b);
    if (source[b] < 0) {
      out.row(r) = nv.row(0);
    } else {
      require_shape(source[b] < ev.rows() && ev.cols() == nv.cols(), "select_condition: bad source row");
      out.row(r) = ev.row(source[b]);
    }
  }
  std::vector<int> src(source.begin(), source.end());
  return t.push(std::move(out), t.any_needs_grad({encoded, null_row}),
                [encoded, null_row, src = std::move(src)](Tape& tp, const Mat& g) {
                  Mat de = Mat::Zero(tp.value(encoded).rows(), tp.value(encoded).cols());
                  Mat dn = Mat::Zero(1, g.cols());
                  for (std::size_t b = 0; b < src.size(); ++b) {
                    if (src[b] < 0)
                      dn.row(0) += g.row(static_cast<Eigen::Index>(b));
                    else
                      de.row(src[b]) += g.row(static_cast<Eigen::Index>(b));
                  }
                  tp.accumulate(encoded, de);
                  tp.accumulate(null_row, dn);
                });
}

// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
inline Var apply_mask(Tape& t, Var x, Mat mask) {
  require_shape(mask.rows() == t.value(x).rows() && mask.cols() == t.value(x).cols(), "apply_mask: shape");
  Mat out = t.value(x).cwiseProduct(mask);
  return t.push(std::move(out), t.any_needs_grad({x}),
                [x, mask = std::move(mask)](Tape& tp, const Mat& g) { tp.accumulate(x, g.cwiseProduct(mask)); });
}

// ---------------------------------------------------------------------------
// Attention

// Attention probabilities of one call, indexed [sample * heads + head].
struct AttentionTrace {
  Eigen::Index heads = 0;
  std::vector<Mat> probs;
};

// Scaled dot-product attention over groups of `tokens` rows, split into
// `heads` column blocks. `mask` (tokens x tokens) is added to the logits.
inline Var attention(Tape& t, Var q, Var k, Var v, Eigen::Index tokens, Eigen::Index heads, const Mat* mask,
                     AttentionTrace* trace = nullptr) {
  const Mat& qv = t.value(q);
  const Mat& kv = t.value(k);
  const Mat& vv = t.value(v);
  require_shape(qv.rows() == kv.rows() && qv.rows() == vv.rows() && qv.cols() == kv.cols() && qv.cols() == vv.cols(),
                "attention: q/k/v shape mismatch");
  require_shape(tokens > 0 && qv.rows() % tokens == 0, "attention: rows not a multiple of token count");
  require_shape(heads > 0 && qv.cols() % heads == 0, "attention: width not divisible by heads");
  if (mask) require_shape(mask->rows() == tokens && mask->cols() == tokens, "attention: mask shape");
  const auto batch = qv.rows() / tokens;
  const auto hd = qv.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  auto probs = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(batch * heads));
  Mat out(qv.rows(), qv.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qb = qv.block(b * tokens, h * hd, tokens, hd);
      const auto kb = kv.block(b * tokens, h * hd, tokens, hd);
      const auto vb = vv.block(b * tokens, h * hd, tokens, hd);
      Mat s = (qb * kb.transpose()) * inv_sqrt;
      if (mask) s += *mask;
      for (Eigen::Index r = 0; r < tokens; ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        // vectorized exp clamps very negative inputs to a tiny positive value
        if (mask)
          for (Eigen::Index c = 0; c < tokens; ++c)
            if (is_masked((*mask)(r, c))) s(r, c) = 0.0;
        s.row(r) /= s.row(r).sum();
      }
      out.block(b * tokens, h * hd, tokens, hd) = s * vb;
      (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  }
  if (trace) {
    trace->heads = heads;
    trace->probs = *probs;
  }
  return t.push(std::move(out), t.any_needs_grad({q, k, v}),
                [q, k, v, tokens, heads, batch, hd, inv_sqrt, probs](Tape& tp, const Mat& g) {
                  const Mat& qv2 = tp.value(q);
                  const Mat& kv2 = tp.value(k);
                  const Mat& vv2 = tp.value(v);
                  Mat dq(qv2.rows(), qv2.cols());
                  Mat dk(kv2.rows(), kv2.cols());
                  Mat dv(vv2.rows(), vv2.cols());
                  for (Eigen::Index b = 0; b < batch; ++b) {
                    for (Eigen::Index h = 0; h < heads; ++h) {
                      const Mat& p = (*probs)[static_cast<std::size_t>(b * heads + h)];
                      const auto go = g.block(b * tokens, h * hd, tokens, hd);
                      dv.block(b * tokens, h * hd, tokens, hd) = p.transpose() * go;
                      Mat dp = go * vv2.block(b * tokens, h * hd, tokens, hd).transpose();
                      Mat ds(tokens, tokens);
                      for (Eigen::Index r = 0; r < tokens; ++r) {
                        const double dot = dp.row(r).dot(p.row(r));
                        ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
                      }
                      ds *= inv_sqrt;
                      dq.block(b * tokens, h * hd, tokens, hd) = ds * kv2.block(b * tokens, h * hd, tokens, hd);
                      dk.block(b * tokens, h * hd, tokens, hd) =
                          ds.transpose() * qv2.block(b * tokens, h * hd, tokens, hd);
                    }
                  }
                  tp.accumulate(q, dq);
                  tp.accumulate(k, dk);
                  tp.accumulate(v, dv);
                });
}

// ---------------------------------------------------------------------------
// Gene-space assembly and losses

// Overlap-averaged reconstruction: every gene receives the mean of the head
// outputs of all its homes (pathways and background).
inline Var overlap_average(Tape& t, const std::vector<Var>& pathway_parts, Var background_part,
                           const PathwayCollection& collection) {
  require_shape(pathway_parts.size() == collection.size(), "overlap_average: one prediction per pathway required");
  const Mat& bgv = t.value(background_part);
  const auto batch = bgv.rows();
  require_shape(bgv.cols() == static_cast<Eigen::Index>(collection.background().size()),
                "overlap_average: background prediction has wrong width");
  const auto genes = static_cast<Eigen::Index>(collection.gene_count());
  Mat sum = Mat::Zero(batch, genes);
  bool needs = t.any_needs_grad({background_part});
  for (std::size_t i = 0; i < pathway_parts.size(); ++i) {
    const Mat& pv = t.value(pathway_parts[i]);
    const auto& members = collection.pathway(i).members;
    require_shape(pv.rows() == batch && pv.cols() == static_cast<Eigen::Index>(members.size()),
                  "overlap_average: pathway prediction has wrong shape");
    for (std::size_t r = 0; r < members.size(); ++r)
      sum.col(static_cast<Eigen::Index>(members[r])) += pv.col(static_cast<Eigen::Index>(r));
    needs = needs || t.any_needs_grad({pathway_parts[i]});
  }
  const auto& bg = collection.background();
  for (std::size_t r = 0; r < bg.size(); ++r) sum.col(static_cast<Eigen::Index>(bg[r])) += bgv.col(static_cast<Eigen::Index>(r));
  const auto& cover = collection.cover_count();
  for (Eigen::Index gidx = 0; gidx < genes; ++gidx) {
    const auto c = cover[static_cast<std::size_t>(gidx)];
    if (c == 0) throw ShapeError("overlap_average: gene " + std::to_string(gidx) + " has no pathway or background home");
    sum.col(gidx) /= static_cast<double>(c);
  }
  const PathwayCollection* coll = &collection;
  return t.push(std::move(sum), needs, [pathway_parts, background_part, coll](Tape& tp, const Mat& g) {
    const auto& cover2 = coll->cover_count();
    Mat scaled = g;
    for (Eigen::Index gidx = 0; gidx < g.cols(); ++gidx) scaled.col(gidx) /= static_cast<double>(cover2[static_cast<std::size_t>(gidx)]);
    for (std::size_t i = 0; i < pathway_parts.size(); ++i) {
      if (!tp.needs_grad(pathway_parts[i])) continue;
      const auto& members = coll->pathway(i).members;
      Mat d(g.rows(), static_cast<Eigen::Index>(members.size()));
      for (std::size_t r = 0; r < members.size(); ++r)
        d.col(static_cast<Eigen::Index>(r)) = scaled.col(static_cast<Eigen::Index>(members[r]));
      tp.accumulate(pathway_parts[i], d);
    }
    if (tp.needs_grad(background_part)) {
      const auto& bg2 = coll->background();
      Mat d(g.rows(), static_cast<Eigen::Index>(bg2.size()));
      for (std::size_t r = 0; r < bg2.size(); ++r)
        d.col(static_cast<Eigen::Index>(r)) = scaled.col(static_cast<Eigen::Index>(bg2[r]));
      tp.accumulate(background_part, d);
    }
  });
}

// Mean over all entries of (pred - target)^2, as a 1x1 variable.
inline Var mse(Tape& t, Var pred, const Mat& target) {
  const Mat& pv = t.value(pred);
  require_shape(pv.rows() == target.rows() && pv.cols() == target.cols(), "mse: shape mismatch");
  Mat diff = pv - target;
  const double n = static_cast<double>(diff.size());
  Mat out = Mat::Constant(1, 1, diff.squaredNorm() / n);
  return t.push(std::move(out), t.any_needs_grad({pred}), [pred, diff = std::move(diff), n](Tape& tp, const Mat& g) {
    tp.accumulate(pred, (2.0 * g(0, 0) / n) * diff);
  });
}

// Sum of x * weights; a convenient scalar probe for gradient tests.
inline Var weighted_sum(Tape& t, Var x, const Mat& weights) {
  require_shape(t.value(x).rows() == weights.rows() && t.value(x).cols() == weights.cols(), "weighted_sum: shape");
  Mat out = Mat::Constant(1, 1, t.value(x).cwiseProduct(weights).sum());
  return t.push(std::move(out), t.any_needs_grad({x}),
                [x, weights](Tape& tp, const Mat& g) { tp.accumulate(x, g(0, 0) * weights); });
}

}  // namespace rnafm::ad
