#pragma once

// Task losses. All graph ops here are fused: forward computes the scalar in
// one pass and the closure applies a closed-form gradient, so none of them
// depend on the generic op chain being numerically stable for extreme logits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "scanenc/graph.hpp"
#include "scanenc/ops.hpp"
#include "scanenc/tensor.hpp"

namespace scanenc {
namespace detail {

inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid_stable(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Shared weighted-mean bookkeeping: loss = sum_i w_i * l_i / W with W = sum w_i
// (or the element count when no weights are given). W == 0 yields loss 0.
template <typename S>
struct WeightedMean {
  const Tensor<S>* weights;
  double wsum = 0;
  explicit WeightedMean(const Tensor<S>* w, std::int64_t n) : weights(w) {
    if (w) {
      if (w->size() != n)
        throw ShapeError("loss weights size " + std::to_string(w->size()) +
                         " does not match element count " + std::to_string(n));
      for (std::int64_t i = 0; i < n; ++i) wsum += double((*w)[i]);
    } else {
      wsum = double(n);
    }
  }
  double w(std::int64_t i) const { return weights ? double((*weights)[i]) : 1.0; }
};

}  // namespace detail

// Binary cross-entropy from logits: mean_i w_i * (softplus(x_i) - x_i * y_i).
// Labels in {0,1}; optional per-element weights (0 drops an element entirely,
// including its gradient).
template <typename S>
Var<S> bce_logits(Graph<S>& g, const Var<S>& logits, const Tensor<S>& labels01,
                  const Tensor<S>* weights = nullptr) {
  const Tensor<S>& x = logits->value;
  if (!x.same_shape(labels01))
    throw ShapeError("bce_logits: logits " + shape_str(x.shape()) + " vs labels " +
                     shape_str(labels01.shape()));
  const std::int64_t n = x.size();
  detail::WeightedMean<S> wm(weights, n);
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    double wi = wm.w(i);
    if (wi == 0) continue;
    acc += wi * (detail::softplus(double(x[i])) - double(x[i]) * double(labels01[i]));
  }
  Tensor<S> out = Tensor<S>::full({1}, wm.wsum > 0 ? S(acc / wm.wsum) : S(0));
  Var<S> y = g.make(std::move(out), logits->requires_grad, nullptr);
  if (y->requires_grad && wm.wsum > 0) {
    auto xs = logits;
    Tensor<S> labels = labels01;
    Tensor<S> w = weights ? *weights : Tensor<S>();
    double wsum = wm.wsum;
    auto yw = y.get();
    y->backward = [xs, labels, w, wsum, yw]() {
      const double gy = double(yw->grad[0]);
      Tensor<S> gx = Tensor<S>::zeros(xs->value.shape());
      for (std::int64_t i = 0; i < gx.size(); ++i) {
        double wi = w.size() ? double(w[i]) : 1.0;
        if (wi == 0) continue;
        double p = detail::sigmoid_stable(double(xs->value[i]));
        gx[i] = S(gy * wi / wsum * (p - double(labels[i])));
      }
      xs->accumulate(gx);
    };
  }
  return y;
}

// Focal loss from logits: mean_i w_i * -a_t (1 - p_t)^gamma_f * log p_t with
// p_t = sigmoid(x) for label 1 and sigmoid(-x) for label 0, a_t likewise
// blending alpha / (1 - alpha). gamma_f = 0, alpha = 0.5 reduces to 0.5 * BCE.
template <typename S>
Var<S> focal_loss(Graph<S>& g, const Var<S>& logits, const Tensor<S>& labels01,
                  double gamma_f = 2.0, double alpha = 0.25,
                  const Tensor<S>* weights = nullptr) {
  const Tensor<S>& x = logits->value;
  if (!x.same_shape(labels01))
    throw ShapeError("focal_loss: logits " + shape_str(x.shape()) + " vs labels " +
                     shape_str(labels01.shape()));
  if (gamma_f < 0) throw ValueError("focal_loss: gamma_f must be >= 0");
  const std::int64_t n = x.size();
  detail::WeightedMean<S> wm(weights, n);
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    double wi = wm.w(i);
    if (wi == 0) continue;
    double yl = double(labels01[i]);
    double z = (2.0 * yl - 1.0) * double(x[i]);
    double log_pt = -detail::softplus(-z);
    double one_m_pt = detail::sigmoid_stable(-z);
    double a_t = alpha * yl + (1.0 - alpha) * (1.0 - yl);
    acc += wi * (-a_t * std::pow(one_m_pt, gamma_f) * log_pt);
  }
  Tensor<S> out = Tensor<S>::full({1}, wm.wsum > 0 ? S(acc / wm.wsum) : S(0));
  Var<S> y = g.make(std::move(out), logits->requires_grad, nullptr);
  if (y->requires_grad && wm.wsum > 0) {
    auto xs = logits;
    Tensor<S> labels = labels01;
    Tensor<S> w = weights ? *weights : Tensor<S>();
    double wsum = wm.wsum;
    auto yw = y.get();
    y->backward = [xs, labels, w, wsum, gamma_f, alpha, yw]() {
      const double gy = double(yw->grad[0]);
      Tensor<S> gx = Tensor<S>::zeros(xs->value.shape());
      for (std::int64_t i = 0; i < gx.size(); ++i) {
        double wi = w.size() ? double(w[i]) : 1.0;
        if (wi == 0) continue;
        double yl = double(labels[i]);
        double s = 2.0 * yl - 1.0;
        double z = s * double(xs->value[i]);
        double pt = detail::sigmoid_stable(z);
        double one_m_pt = detail::sigmoid_stable(-z);
        double log_pt = -detail::softplus(-z);
        double a_t = alpha * yl + (1.0 - alpha) * (1.0 - yl);
        // d/dx of -a_t (1-pt)^g log pt, via d pt/dx = s pt (1-pt).
        double d = -a_t * s * std::pow(one_m_pt, gamma_f) *
                   (one_m_pt - gamma_f * pt * log_pt);
        gx[i] = S(gy * wi / wsum * d);
      }
      xs->accumulate(gx);
    };
  }
  return y;
}

// Cross-entropy of softmax(logits) rows against fixed soft target rows:
// mean_r w_r * (tsum_r * lse(x_r) - sum_b t_rb x_rb). The last axis is the
// category axis; row_weights has one entry per leading row.
template <typename S>
Var<S> soft_cross_entropy(Graph<S>& g, const Var<S>& logits, const Tensor<S>& targets,
                          const Tensor<S>* row_weights = nullptr) {
  const Tensor<S>& x = logits->value;
  if (!x.same_shape(targets))
    throw ShapeError("soft_cross_entropy: logits " + shape_str(x.shape()) +
                     " vs targets " + shape_str(targets.shape()));
  if (x.rank() < 1) throw ShapeError("soft_cross_entropy: rank >= 1 required");
  const std::int64_t nb = x.dim(-1);
  const std::int64_t rows = x.size() / std::max<std::int64_t>(nb, 1);
  detail::WeightedMean<S> wm(row_weights, rows);
  double acc = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    double wr = wm.w(r);
    if (wr == 0) continue;
    const S* xr = x.data() + r * nb;
    const S* tr = targets.data() + r * nb;
    double m = double(xr[0]);
    for (std::int64_t b = 1; b < nb; ++b) m = std::max(m, double(xr[b]));
    double se = 0, dot = 0, tsum = 0;
    for (std::int64_t b = 0; b < nb; ++b) {
      se += std::exp(double(xr[b]) - m);
      dot += double(tr[b]) * double(xr[b]);
      tsum += double(tr[b]);
    }
    double lse = m + std::log(se);
    acc += wr * (tsum * lse - dot);
  }
  Tensor<S> out = Tensor<S>::full({1}, wm.wsum > 0 ? S(acc / wm.wsum) : S(0));
  Var<S> y = g.make(std::move(out), logits->requires_grad, nullptr);
  if (y->requires_grad && wm.wsum > 0) {
    auto xs = logits;
    Tensor<S> t = targets;
    Tensor<S> w = row_weights ? *row_weights : Tensor<S>();
    double wsum = wm.wsum;
    auto yw = y.get();
    y->backward = [xs, t, w, wsum, nb, rows, yw]() {
      const double gy = double(yw->grad[0]);
      Tensor<S> gx = Tensor<S>::zeros(xs->value.shape());
      for (std::int64_t r = 0; r < rows; ++r) {
        double wr = w.size() ? double(w[r]) : 1.0;
        if (wr == 0) continue;
        const S* xr = xs->value.data() + r * nb;
        const S* tr = t.data() + r * nb;
        double m = double(xr[0]);
        for (std::int64_t b = 1; b < nb; ++b) m = std::max(m, double(xr[b]));
        double se = 0, tsum = 0;
        for (std::int64_t b = 0; b < nb; ++b) {
          se += std::exp(double(xr[b]) - m);
          tsum += double(tr[b]);
        }
        S* gr = gx.data() + r * nb;
        for (std::int64_t b = 0; b < nb; ++b) {
          double p = std::exp(double(xr[b]) - m) / se;
          gr[b] = S(gy * wr / wsum * (tsum * p - double(tr[b])));
        }
      }
      xs->accumulate(gx);
    };
  }
  return y;
}

// Weighted mean squared error: mean_i w_i * (x_i - t_i)^2. Weight 0 removes an
// element from both the value and the gradient.
template <typename S>
Var<S> masked_mse(Graph<S>& g, const Var<S>& pred, const Tensor<S>& target,
                  const Tensor<S>* weights = nullptr) {
  const Tensor<S>& x = pred->value;
  if (!x.same_shape(target))
    throw ShapeError("masked_mse: pred " + shape_str(x.shape()) + " vs target " +
                     shape_str(target.shape()));
  const std::int64_t n = x.size();
  detail::WeightedMean<S> wm(weights, n);
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    double wi = wm.w(i);
    if (wi == 0) continue;
    double d = double(x[i]) - double(target[i]);
    acc += wi * d * d;
  }
  Tensor<S> out = Tensor<S>::full({1}, wm.wsum > 0 ? S(acc / wm.wsum) : S(0));
  Var<S> y = g.make(std::move(out), pred->requires_grad, nullptr);
  if (y->requires_grad && wm.wsum > 0) {
    auto xs = pred;
    Tensor<S> t = target;
    Tensor<S> w = weights ? *weights : Tensor<S>();
    double wsum = wm.wsum;
    auto yw = y.get();
    y->backward = [xs, t, w, wsum, yw]() {
      const double gy = double(yw->grad[0]);
      Tensor<S> gx = Tensor<S>::zeros(xs->value.shape());
      for (std::int64_t i = 0; i < gx.size(); ++i) {
        double wi = w.size() ? double(w[i]) : 1.0;
        if (wi == 0) continue;
        gx[i] = S(gy * wi / wsum * 2.0 * (double(xs->value[i]) - double(t[i])));
      }
      xs->accumulate(gx);
    };
  }
  return y;
}

namespace detail {

// Layout contract for assignment logits [B, A, M]: real target columns form a
// prefix of length k_b per batch item, the last column is the shared null
// slot, and anything between is padding. Returns k_b per item and checks the
// prefix shape of target_valid.
inline std::vector<int> assignment_target_counts(const Tensor<std::uint8_t>& target_valid,
                                                 std::vector<std::uint8_t>* null_valid) {
  if (target_valid.rank() != 2)
    throw ShapeError("assignment target_valid must be [B, M], got " +
                     shape_str(target_valid.shape()));
  const std::int64_t B = target_valid.dim(0), M = target_valid.dim(1);
  std::vector<int> k(size_t(B), 0);
  null_valid->assign(size_t(B), 0);
  for (std::int64_t b = 0; b < B; ++b) {
    const std::uint8_t* row = target_valid.data() + b * M;
    std::int64_t j = 0;
    while (j < M - 1 && row[j]) ++j;
    k[size_t(b)] = int(j);
    for (std::int64_t p = j; p < M - 1; ++p)
      if (row[p])
        throw ValueError("assignment target_valid row " + std::to_string(b) +
                         " is not a prefix of real targets");
    (*null_valid)[size_t(b)] = row[M - 1];
  }
  return k;
}

}  // namespace detail

// Grouped assignment NLL over padded logits [B, A, M]. Column M-1 is the null
// slot; labels[b,a] is a real target index in [0, k_b) or -1 for null. Batch
// items are grouped by (k_b, null validity) and each group's tensor is
// truncated to its k real columns plus the null column before the row
// log-sum-exp, so padding columns never enter the arithmetic. Null-labeled
// terms are scaled by null_weight; the result is the mean over valid agents.
template <typename S>
Var<S> assignment_nll(Graph<S>& g, const Var<S>& logits,
                      const Tensor<std::uint8_t>& target_valid,
                      const Tensor<std::uint8_t>& agent_valid, const Tensor<int>& labels,
                      double null_weight = 0.05) {
  const Tensor<S>& x = logits->value;
  if (x.rank() != 3)
    throw ShapeError("assignment_nll: logits must be [B, A, M], got " +
                     shape_str(x.shape()));
  const std::int64_t B = x.dim(0), A = x.dim(1), M = x.dim(2);
  if (target_valid.rank() != 2 || target_valid.dim(0) != B || target_valid.dim(1) != M)
    throw ShapeError("assignment_nll: target_valid must be [B, M]");
  if (agent_valid.rank() != 2 || agent_valid.dim(0) != B || agent_valid.dim(1) != A)
    throw ShapeError("assignment_nll: agent_valid must be [B, A]");
  if (labels.rank() != 2 || labels.dim(0) != B || labels.dim(1) != A)
    throw ShapeError("assignment_nll: labels must be [B, A]");

  std::vector<std::uint8_t> null_valid;
  std::vector<int> k = detail::assignment_target_counts(target_valid, &null_valid);

  // Validate labels and count valid agents.
  std::int64_t n_valid = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t a = 0; a < A; ++a) {
      if (!agent_valid[b * A + a]) continue;
      ++n_valid;
      int lab = labels[b * A + a];
      if (lab == -1) {
        if (!null_valid[size_t(b)])
          throw ValueError("assignment_nll: null label with invalid null column, item " +
                           std::to_string(b));
      } else if (lab < 0 || lab >= k[size_t(b)]) {
        throw ValueError("assignment_nll: label " + std::to_string(lab) +
                         " out of range [0, " + std::to_string(k[size_t(b)]) +
                         ") at item " + std::to_string(b));
      }
    }
  if (n_valid == 0) throw ValueError("assignment_nll: no valid agents in batch");

  // Group batch items by (k, null validity); each group shares a truncated
  // column layout of k real columns plus (optionally) the null column.
  std::map<std::pair<int, int>, std::vector<std::int64_t>> groups;
  for (std::int64_t b = 0; b < B; ++b)
    groups[{k[size_t(b)], int(null_valid[size_t(b)])}].push_back(b);

  // Saved softmax probabilities per valid agent row, dense [B, A, M] with
  // zeros at padding columns; backward reuses them directly.
  Tensor<S> probs = Tensor<S>::zeros({int(B), int(A), int(M)});
  double acc = 0;
  std::vector<double> rowbuf;
  for (const auto& [key, items] : groups) {
    const int gk = key.first;
    const int gnull = key.second;
    const int cols = gk + gnull;
    if (cols == 0)
      throw ValueError("assignment_nll: item with no valid targets and no null column");
    rowbuf.assign(size_t(cols), 0.0);
    for (std::int64_t b : items)
      for (std::int64_t a = 0; a < A; ++a) {
        if (!agent_valid[b * A + a]) continue;
        const S* xr = x.data() + (b * A + a) * M;
        for (int c = 0; c < gk; ++c) rowbuf[size_t(c)] = double(xr[c]);
        if (gnull) rowbuf[size_t(gk)] = double(xr[M - 1]);
        double m = rowbuf[0];
        for (int c = 1; c < cols; ++c) m = std::max(m, rowbuf[size_t(c)]);
        double se = 0;
        for (int c = 0; c < cols; ++c) se += std::exp(rowbuf[size_t(c)] - m);
        const double lse = m + std::log(se);
        const int lab = labels[b * A + a];
        const int lab_col = lab == -1 ? gk : lab;
        const double w = lab == -1 ? null_weight : 1.0;
        acc += w * (lse - rowbuf[size_t(lab_col)]);
        S* pr = probs.data() + (b * A + a) * M;
        for (int c = 0; c < gk; ++c) pr[c] = S(std::exp(rowbuf[size_t(c)] - m) / se);
        if (gnull) pr[M - 1] = S(std::exp(rowbuf[size_t(gk)] - m) / se);
      }
  }

  Tensor<S> out = Tensor<S>::full({1}, S(acc / double(n_valid)));
  Var<S> y = g.make(std::move(out), logits->requires_grad, nullptr);
  if (y->requires_grad) {
    auto xs = logits;
    Tensor<std::uint8_t> av = agent_valid;
    Tensor<int> labs = labels;
    std::vector<int> kk = k;
    std::vector<std::uint8_t> nv = null_valid;
    auto yw = y.get();
    y->backward = [xs, probs, av, labs, kk, nv, n_valid, null_weight, B, A, M, yw]() {
      const double gy = double(yw->grad[0]);
      Tensor<S> gx = Tensor<S>::zeros(xs->value.shape());
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t a = 0; a < A; ++a) {
          if (!av[b * A + a]) continue;
          const int lab = labs[b * A + a];
          const double w = lab == -1 ? null_weight : 1.0;
          const double scale = gy * w / double(n_valid);
          const S* pr = probs.data() + (b * A + a) * M;
          S* gr = gx.data() + (b * A + a) * M;
          for (int c = 0; c < kk[size_t(b)]; ++c) gr[c] = S(scale * double(pr[c]));
          if (nv[size_t(b)]) gr[M - 1] = S(scale * double(pr[M - 1]));
          const std::int64_t lab_col = lab == -1 ? M - 1 : lab;
          gr[lab_col] = S(double(gr[lab_col]) - scale);
        }
      xs->accumulate(gx);
    };
  }
  return y;
}

// Reference path: per-agent masked NLL straight off the padded tensor, no
// grouping or truncation. Cross-checks the grouped computation.
template <typename S>
double assignment_nll_naive(const Tensor<S>& logits,
                            const Tensor<std::uint8_t>& target_valid,
                            const Tensor<std::uint8_t>& agent_valid,
                            const Tensor<int>& labels, double null_weight = 0.05) {
  const std::int64_t B = logits.dim(0), A = logits.dim(1), M = logits.dim(2);
  double acc = 0;
  std::int64_t n_valid = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t a = 0; a < A; ++a) {
      if (!agent_valid[b * A + a]) continue;
      ++n_valid;
      const S* xr = logits.data() + (b * A + a) * M;
      const std::uint8_t* tv = target_valid.data() + b * M;
      double m = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < M; ++j)
        if (tv[j]) m = std::max(m, double(xr[j]));
      double se = 0;
      for (std::int64_t j = 0; j < M; ++j)
        if (tv[j]) se += std::exp(double(xr[j]) - m);
      const int lab = labels[b * A + a];
      const std::int64_t lab_col = lab == -1 ? M - 1 : lab;
      const double w = lab == -1 ? null_weight : 1.0;
      acc += w * (m + std::log(se) - double(xr[lab_col]));
    }
  return n_valid ? acc / double(n_valid) : 0.0;
}

}  // namespace scanenc
