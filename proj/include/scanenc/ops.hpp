#pragma once

// Differentiable operations over graph variables. Every op computes its
// value eagerly with Eigen and registers a closure holding exactly the
// tensors its analytic backward needs. Tensors share storage, so the saved
// handles are cheap.
//
// Broadcasting is right-aligned: a shape is compatible with x when, after
// padding with leading 1s, every axis is equal or 1.

#include "scanenc/graph.hpp"
#include "scanenc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace scanenc {

namespace detail {

inline Shape pad_to_rank(const Shape& ys, int rank) {
  if (static_cast<int>(ys.size()) > rank)
    throw ShapeError("broadcast operand rank exceeds target: " + shape_str(ys));
  Shape p(rank, 1);
  std::copy(ys.begin(), ys.end(), p.end() - ys.size());
  return p;
}

// Iteration plan pairing offsets of x with offsets of a right-aligned
// broadcast operand y. The maximal matching suffix becomes one contiguous
// run; leading axes are walked with stride 0 where y broadcasts.
struct BcastPlan {
  std::int64_t outer = 1;
  std::int64_t run = 1;
  std::vector<int> lead_dims;
  std::vector<std::int64_t> y_strides;  // in elements, 0 on broadcast axes
};

inline BcastPlan make_bcast_plan(const Shape& xs, const Shape& ys) {
  Shape yp = pad_to_rank(ys, static_cast<int>(xs.size()));
  for (size_t i = 0; i < xs.size(); ++i)
    if (yp[i] != 1 && yp[i] != xs[i])
      throw ShapeError("cannot broadcast " + shape_str(ys) + " against " + shape_str(xs));
  BcastPlan plan;
  int split = static_cast<int>(xs.size());
  while (split > 0 && yp[split - 1] == xs[split - 1]) {
    plan.run *= xs[split - 1];
    --split;
  }
  plan.lead_dims.assign(xs.begin(), xs.begin() + split);
  plan.y_strides.resize(split);
  std::int64_t stride = plan.run;  // y suffix equals the run by construction
  for (int i = split - 1; i >= 0; --i) {
    plan.y_strides[i] = (yp[i] == 1) ? 0 : stride;
    stride *= yp[i];
  }
  for (int d : plan.lead_dims) plan.outer *= d;
  return plan;
}

template <class Fn>
void for_bcast_runs(const BcastPlan& plan, Fn&& fn) {
  int nlead = static_cast<int>(plan.lead_dims.size());
  for (std::int64_t o = 0; o < plan.outer; ++o) {
    std::int64_t rem = o, y_off = 0;
    for (int i = nlead - 1; i >= 0; --i) {
      y_off += (rem % plan.lead_dims[i]) * plan.y_strides[i];
      rem /= plan.lead_dims[i];
    }
    fn(o * plan.run, y_off, plan.run);
  }
}

// Sums g (shaped like xs) down to shape ys.
template <class S>
Tensor<S> reduce_to_shape(const Tensor<S>& g, const Shape& ys) {
  Tensor<S> out = Tensor<S>::zeros(ys);
  auto plan = make_bcast_plan(g.shape(), ys);
  const S* gp = g.data();
  S* op = out.data();
  for_bcast_runs(plan, [&](std::int64_t x_off, std::int64_t y_off, std::int64_t run) {
    ArrMap<S>(op + y_off, run) += ConstArrMap<S>(gp + x_off, run);
  });
  return out;
}

template <class S>
std::int64_t leading_count(const Tensor<S>& t, int trailing) {
  std::int64_t n = 1;
  for (int i = 0; i < t.rank() - trailing; ++i) n *= t.shape()[i];
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (!a->value.same_shape(b->value))
    throw ShapeError("add shapes differ: " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  Tensor<S> y(a->value.shape());
  y.arr() = a->value.arr() + b->value.arr();
  Graph<S>* g = a->graph;
  bool req = a->requires_grad || b->requires_grad;
  auto out = g->make(std::move(y), req, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [a, b, o] {
      if (a->requires_grad) a->accumulate(o->out_grad());
      if (b->requires_grad) b->accumulate(o->out_grad());
    };
  }
  return out;
}

// y broadcasts against x (right-aligned); covers bias vectors and per-step
// embeddings without materializing the expansion.
template <class S>
Var<S> add_bcast(const Var<S>& x, const Var<S>& y) {
  auto plan = detail::make_bcast_plan(x->value.shape(), y->value.shape());
  Tensor<S> v(x->value.shape());
  const S* xp = x->value.data();
  const S* yp = y->value.data();
  S* vp = v.data();
  detail::for_bcast_runs(plan, [&](std::int64_t xo, std::int64_t yo, std::int64_t run) {
    ArrMap<S>(vp + xo, run) = ConstArrMap<S>(xp + xo, run) + ConstArrMap<S>(yp + yo, run);
  });
  Graph<S>* g = x->graph;
  auto out = g->make(std::move(v), x->requires_grad || y->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [x, y, o] {
      if (x->requires_grad) x->accumulate(o->out_grad());
      if (y->requires_grad)
        y->accumulate(detail::reduce_to_shape(o->out_grad(), y->value.shape()));
    };
  }
  return out;
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  if (!a->value.same_shape(b->value))
    throw ShapeError("sub shapes differ: " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  Tensor<S> y(a->value.shape());
  y.arr() = a->value.arr() - b->value.arr();
  Graph<S>* g = a->graph;
  auto out = g->make(std::move(y), a->requires_grad || b->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [a, b, o] {
      if (a->requires_grad) a->accumulate(o->out_grad());
      if (b->requires_grad) {
        Tensor<S> gb(b->value.shape());
        gb.arr() = -o->out_grad().arr();
        b->accumulate(gb);
      }
    };
  }
  return out;
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  if (!a->value.same_shape(b->value))
    throw ShapeError("mul shapes differ: " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  Tensor<S> y(a->value.shape());
  y.arr() = a->value.arr() * b->value.arr();
  Graph<S>* g = a->graph;
  auto out = g->make(std::move(y), a->requires_grad || b->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [a, b, o] {
      if (a->requires_grad) {
        Tensor<S> ga(a->value.shape());
        ga.arr() = o->out_grad().arr() * b->value.arr();
        a->accumulate(ga);
      }
      if (b->requires_grad) {
        Tensor<S> gb(b->value.shape());
        gb.arr() = o->out_grad().arr() * a->value.arr();
        b->accumulate(gb);
      }
    };
  }
  return out;
}

template <class S>
Var<S> scale(const Var<S>& x, S c) {
  Tensor<S> y(x->value.shape());
  y.arr() = x->value.arr() * c;
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [x, c, o] {
      Tensor<S> gx(x->value.shape());
      gx.arr() = o->out_grad().arr() * c;
      x->accumulate(gx);
    };
  }
  return out;
}

template <class S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  Tensor<S> y = x->value.reshaped(shape);  // shares storage
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [x, o] { x->accumulate(o->out_grad().reshaped(x->value.shape())); };
  }
  return out;
}

// [A, B, ...rest] -> [B, A, ...rest]; the only permutation the models need.
template <class S>
Var<S> swap01(const Var<S>& x) {
  const Shape& s = x->value.shape();
  if (s.size() < 2) throw ShapeError("swap01 needs rank >= 2, got " + shape_str(s));
  std::int64_t A = s[0], B = s[1], inner = x->value.size() / (A * B);
  Shape os = s;
  std::swap(os[0], os[1]);
  Tensor<S> y(os);
  for (std::int64_t a = 0; a < A; ++a)
    for (std::int64_t b = 0; b < B; ++b)
      std::memcpy(y.data() + (b * A + a) * inner, x->value.data() + (a * B + b) * inner,
                  static_cast<size_t>(inner) * sizeof(S));
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [x, A, B, inner, o] {
      Tensor<S> gx(x->value.shape());
      const Tensor<S>& gy = o->out_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t a = 0; a < A; ++a)
          std::memcpy(gx.data() + (a * B + b) * inner, gy.data() + (b * A + a) * inner,
                      static_cast<size_t>(inner) * sizeof(S));
      x->accumulate(gx);
    };
  }
  return out;
}

// [N0, N1, N2, ...rest] -> [N0, N2, N1, ...rest]; separates attention heads.
template <class S>
Var<S> swap12(const Var<S>& x) {
  const Shape& s = x->value.shape();
  if (s.size() < 3) throw ShapeError("swap12 needs rank >= 3, got " + shape_str(s));
  std::int64_t N0 = s[0], A = s[1], B = s[2];
  std::int64_t inner = x->value.size() / (N0 * A * B);
  Shape os = s;
  std::swap(os[1], os[2]);
  Tensor<S> y(os);
  for (std::int64_t i = 0; i < N0; ++i)
    for (std::int64_t a = 0; a < A; ++a)
      for (std::int64_t b = 0; b < B; ++b)
        std::memcpy(y.data() + ((i * B + b) * A + a) * inner,
                    x->value.data() + ((i * A + a) * B + b) * inner,
                    static_cast<size_t>(inner) * sizeof(S));
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [x, N0, A, B, inner, o] {
      Tensor<S> gx(x->value.shape());
      const Tensor<S>& gy = o->out_grad();
      for (std::int64_t i = 0; i < N0; ++i)
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t a = 0; a < A; ++a)
            std::memcpy(gx.data() + ((i * A + a) * B + b) * inner,
                        gy.data() + ((i * B + b) * A + a) * inner,
                        static_cast<size_t>(inner) * sizeof(S));
      x->accumulate(gx);
    };
  }
  return out;
}

// Prepends an axis of extent n by tiling; backward sums over it. Used to
// share learned initial tokens across a batch.
template <class S>
Var<S> expand_leading(const Var<S>& x, int n) {
  std::int64_t inner = x->value.size();
  Shape os = x->value.shape();
  os.insert(os.begin(), n);
  Tensor<S> y(os);
  for (int i = 0; i < n; ++i)
    std::memcpy(y.data() + i * inner, x->value.data(), static_cast<size_t>(inner) * sizeof(S));
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [x, n, inner, o] {
      Tensor<S> gx = Tensor<S>::zeros(x->value.shape());
      const S* gp = o->out_grad().data();
      for (int i = 0; i < n; ++i) gx.arr() += ConstArrMap<S>(gp + i * inner, inner);
      x->accumulate(gx);
    };
  }
  return out;
}

template <class S>
Var<S> concat(const std::vector<Var<S>>& xs, int axis) {
  if (xs.empty()) throw ValueError("concat of zero tensors");
  const Shape& s0 = xs[0]->value.shape();
  int r = static_cast<int>(s0.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat axis out of range");
  int total = 0;
  for (const auto& x : xs) {
    const Shape& s = x->value.shape();
    if (static_cast<int>(s.size()) != r) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && s[i] != s0[i])
        throw ShapeError("concat shapes differ off-axis: " + shape_str(s0) + " vs " +
                         shape_str(s));
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (int i = axis + 1; i < r; ++i) inner *= s0[i];
  Tensor<S> y(os);
  std::int64_t y_row = static_cast<std::int64_t>(total) * inner;
  std::int64_t at = 0;
  for (const auto& x : xs) {
    std::int64_t x_row = static_cast<std::int64_t>(x->value.shape()[axis]) * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(y.data() + o * y_row + at, x->value.data() + o * x_row,
                  static_cast<size_t>(x_row) * sizeof(S));
    at += x_row;
  }
  bool req = false;
  for (const auto& x : xs) req = req || x->requires_grad;
  auto out = xs[0]->graph->make(std::move(y), req, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    auto inputs = xs;
    out->backward = [inputs, outer, inner, y_row, o] {
      const Tensor<S>& gy = o->out_grad();
      std::int64_t at = 0;
      for (const auto& x : inputs) {
        std::int64_t x_row = x->value.size() / outer;
        if (x->requires_grad) {
          Tensor<S> gx(x->value.shape());
          for (std::int64_t oi = 0; oi < outer; ++oi)
            std::memcpy(gx.data() + oi * x_row, gy.data() + oi * y_row + at,
                        static_cast<size_t>(x_row) * sizeof(S));
          x->accumulate(gx);
        }
        at += x_row;
      }
    };
  }
  return out;
}

// x[..., begin:end, ...] along axis, as a copy.
template <class S>
Var<S> slice(const Var<S>& x, int axis, int begin, int end) {
  const Shape& s = x->value.shape();
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("slice axis out of range");
  if (begin < 0 || end > s[axis] || begin > end)
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + shape_str(s));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  Shape os = s;
  os[axis] = end - begin;
  Tensor<S> y(os);
  std::int64_t x_row = static_cast<std::int64_t>(s[axis]) * inner;
  std::int64_t y_row = static_cast<std::int64_t>(end - begin) * inner;
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(y.data() + o * y_row, x->value.data() + o * x_row + begin * inner,
                static_cast<size_t>(y_row) * sizeof(S));
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    std::int64_t b_off = static_cast<std::int64_t>(begin) * inner;
    out->backward = [x, outer, x_row, y_row, b_off, o] {
      Tensor<S> gx = Tensor<S>::zeros(x->value.shape());
      const Tensor<S>& gy = o->out_grad();
      for (std::int64_t oi = 0; oi < outer; ++oi)
        std::memcpy(gx.data() + oi * x_row + b_off, gy.data() + oi * y_row,
                    static_cast<size_t>(y_row) * sizeof(S));
      x->accumulate(gx);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

// Exact GELU, x * Phi(x) with the Gaussian CDF via erf.
template <class S>
Var<S> gelu(const Var<S>& x) {
  Tensor<S> y(x->value.shape());
  const S* xp = x->value.data();
  S* yp = y.data();
  for (std::int64_t i = 0; i < y.size(); ++i) {
    S v = xp[i];
    yp[i] = S(0.5) * v * (S(1) + std::erf(v * S(M_SQRT1_2)));
  }
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [x, o] {
      Tensor<S> gx(x->value.shape());
      const S* xp = x->value.data();
      const S* gp = o->out_grad().data();
      S* gxp = gx.data();
      const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
      for (std::int64_t i = 0; i < gx.size(); ++i) {
        S v = xp[i];
        S cdf = S(0.5) * (S(1) + std::erf(v * S(M_SQRT1_2)));
        gxp[i] = gp[i] * (cdf + v * inv_sqrt2pi * std::exp(S(-0.5) * v * v));
      }
      x->accumulate(gx);
    };
  }
  return out;
}

template <class S>
inline S sigmoid_scalar(S v) {
  return v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
}

template <class S>
Var<S> sigmoid(const Var<S>& x) {
  Tensor<S> y(x->value.shape());
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = sigmoid_scalar(x->value[i]);
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    Tensor<S> saved = out->value;
    out->backward = [x, saved, o] {
      Tensor<S> gx(x->value.shape());
      gx.arr() = o->out_grad().arr() * saved.arr() * (S(1) - saved.arr());
      x->accumulate(gx);
    };
  }
  return out;
}

template <class S>
Var<S> tanh_op(const Var<S>& x) {
  Tensor<S> y(x->value.shape());
  y.arr() = x->value.arr().tanh();
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    Tensor<S> saved = out->value;
    out->backward = [x, saved, o] {
      Tensor<S> gx(x->value.shape());
      gx.arr() = o->out_grad().arr() * (S(1) - saved.arr() * saved.arr());
      x->accumulate(gx);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

namespace detail {

// C[..., m, n] = opA(A)[..., m, k] * opB(B)[..., k, n]. Leading axes of A and
// B must match, or B may be rank 2 and is then shared across A's batch.
// A shared untransposed B collapses the whole batch into one GEMM.
// Product-path policy: small products evaluate coefficient-wise, large ones
// through the packed kernels. The split depends on depth and columns only,
// never on the row count, and both paths compute each output row from that
// row's inputs alone, so a row's bits never depend on how many rows share
// the call. Coefficient-wise evaluation also skips packing overhead, which
// dominates the per-head attention products.
inline bool coeffwise_product(std::int64_t k, std::int64_t n) { return k + n < 48; }

template <class S>
Tensor<S> matmul_fwd(const Tensor<S>& a, const Tensor<S>& b, bool ta, bool tb) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul needs rank >= 2: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::int64_t am = a.shape()[a.rank() - 2], an = a.shape()[a.rank() - 1];
  std::int64_t bm = b.shape()[b.rank() - 2], bn = b.shape()[b.rank() - 1];
  std::int64_t m = ta ? an : am, k = ta ? am : an;
  std::int64_t kb = tb ? bn : bm, n = tb ? bm : bn;
  std::int64_t batch_a = leading_count(a, 2), batch_b = leading_count(b, 2);
  bool shared_b = (b.rank() == 2 && a.rank() > 2);
  if (k != kb || (!shared_b && !(batch_a == batch_b && a.rank() == b.rank())))
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + (ta ? " (A transposed)" : "") +
                     (tb ? " (B transposed)" : ""));
  Shape os(a.shape().begin(), a.shape().end() - 2);
  os.push_back(static_cast<int>(m));
  os.push_back(static_cast<int>(n));
  Tensor<S> c(os);
  const bool lazy = coeffwise_product(k, n);
  if (shared_b && !ta) {
    auto cm = c.mat(batch_a * m, n);
    auto amat = a.mat(batch_a * m, k);
    if (tb) {
      if (lazy)
        cm.noalias() = amat.lazyProduct(b.mat(n, k).transpose());
      else
        cm.noalias() = amat * b.mat(n, k).transpose();
    } else {
      if (lazy)
        cm.noalias() = amat.lazyProduct(b.mat(k, n));
      else
        cm.noalias() = amat * b.mat(k, n);
    }
    return c;
  }
  for (std::int64_t i = 0; i < batch_a; ++i) {
    auto as = a.slice_mat(i, am, an);
    auto bs = shared_b ? b.slice_mat(0, bm, bn) : b.slice_mat(i, bm, bn);
    auto cs = c.slice_mat(i, m, n);
    if (!ta && !tb) {
      if (lazy)
        cs.noalias() = as.lazyProduct(bs);
      else
        cs.noalias() = as * bs;
    } else if (ta && !tb) {
      if (lazy)
        cs.noalias() = as.transpose().lazyProduct(bs);
      else
        cs.noalias() = as.transpose() * bs;
    } else if (!ta && tb) {
      if (lazy)
        cs.noalias() = as.lazyProduct(bs.transpose());
      else
        cs.noalias() = as * bs.transpose();
    } else {
      if (lazy)
        cs.noalias() = as.transpose().lazyProduct(bs.transpose());
      else
        cs.noalias() = as.transpose() * bs.transpose();
    }
  }
  return c;
}

}  // namespace detail

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b, bool ta = false, bool tb = false) {
  Tensor<S> c = detail::matmul_fwd(a->value, b->value, ta, tb);
  Graph<S>* g = a->graph;
  auto out = g->make(std::move(c), a->requires_grad || b->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [a, b, ta, tb, o] {
      const Tensor<S>& gc = o->out_grad();
      bool shared_b = (b->value.rank() == 2 && a->value.rank() > 2);
      if (shared_b && !ta && !tb) {
        // Weight layout: the batch collapses into the row axis, so both
        // gradients are single GEMMs.
        std::int64_t k = a->value.shape().back();
        std::int64_t n = b->value.shape()[1];
        std::int64_t rows = a->value.size() / k;
        if (a->requires_grad) {
          Tensor<S> ga(a->value.shape());
          if (detail::coeffwise_product(n, k))
            ga.mat(rows, k).noalias() =
                gc.mat(rows, n).lazyProduct(b->value.mat(k, n).transpose());
          else
            ga.mat(rows, k).noalias() = gc.mat(rows, n) * b->value.mat(k, n).transpose();
          a->accumulate(ga);
        }
        if (b->requires_grad) {
          Tensor<S> gb(b->value.shape());
          if (detail::coeffwise_product(rows, n))
            gb.mat(k, n).noalias() =
                a->value.mat(rows, k).transpose().lazyProduct(gc.mat(rows, n));
          else
            gb.mat(k, n).noalias() = a->value.mat(rows, k).transpose() * gc.mat(rows, n);
          b->accumulate(gb);
        }
        return;
      }
      if (a->requires_grad) {
        // dA for C = opA(A) opB(B): four flag cases.
        Tensor<S> ga = ta ? (tb ? detail::matmul_fwd(b->value, gc, true, true)
                                : detail::matmul_fwd(b->value, gc, false, true))
                          : (tb ? detail::matmul_fwd(gc, b->value, false, false)
                                : detail::matmul_fwd(gc, b->value, false, true));
        if (ga.rank() > a->value.rank()) ga = detail::reduce_to_shape(ga, a->value.shape());
        a->accumulate(ga);
      }
      if (b->requires_grad) {
        Tensor<S> gb = tb ? (ta ? detail::matmul_fwd(gc, a->value, true, true)
                                : detail::matmul_fwd(gc, a->value, true, false))
                          : (ta ? detail::matmul_fwd(a->value, gc, false, false)
                                : detail::matmul_fwd(a->value, gc, true, false));
        if (gb.rank() > b->value.rank()) {
          // Shared rank-2 B with transpose flags: sum the batch explicitly.
          Tensor<S> red = Tensor<S>::zeros(b->value.shape());
          std::int64_t rows = b->value.shape()[0], cols = b->value.shape()[1];
          std::int64_t slices = gb.size() / (rows * cols);
          auto rm = red.mat(rows, cols);
          for (std::int64_t i = 0; i < slices; ++i) rm += gb.slice_mat(i, rows, cols);
          gb = std::move(red);
        }
        b->accumulate(gb);
      }
    };
  }
  return out;
}

// x [..., d_in] * w [d_in, d_out] + b [d_out].
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  return add_bcast(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Softmax and layer norm
// ---------------------------------------------------------------------------

namespace detail {

// In-place masked softmax rows: buffer is [rows, n] contiguous; mask row may
// be null (all valid). Max subtraction runs over valid entries only; fully
// masked rows throw unless allow_empty, in which case the row is zeroed.
template <class S>
void softmax_rows(S* p, std::int64_t rows, std::int64_t n, const std::uint8_t* mask,
                  std::int64_t mask_stride, bool allow_empty) {
  for (std::int64_t r = 0; r < rows; ++r) {
    S* row = p + r * n;
    const std::uint8_t* mr = mask ? mask + r * mask_stride : nullptr;
    S mx = -std::numeric_limits<S>::infinity();
    for (std::int64_t j = 0; j < n; ++j)
      if (!mr || mr[j]) mx = std::max(mx, row[j]);
    if (mx == -std::numeric_limits<S>::infinity()) {
      if (!allow_empty) throw ValueError("softmax over a fully masked slice");
      std::fill(row, row + n, S(0));
      continue;
    }
    S sum = S(0);
    for (std::int64_t j = 0; j < n; ++j) {
      if (!mr || mr[j]) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      } else {
        row[j] = S(0);
      }
    }
    S inv = S(1) / sum;
    for (std::int64_t j = 0; j < n; ++j) row[j] *= inv;
  }
}

}  // namespace detail

// Softmax over the last axis. The optional mask broadcasts right-aligned
// against x; masked entries produce exact zeros and receive zero gradient.
// allow_empty turns fully masked rows into all-zero rows instead of an error.
template <class S>
Var<S> softmax(const Var<S>& x, const Tensor<std::uint8_t>* mask = nullptr,
               bool allow_empty = false) {
  std::int64_t n = x->value.shape().back();
  std::int64_t rows = x->value.size() / n;
  Tensor<S> y = x->value.clone();
  if (mask) {
    auto plan = detail::make_bcast_plan(x->value.shape(), mask->shape());
    if (plan.run % n != 0)
      throw ShapeError("softmax mask must cover whole rows: " + shape_str(mask->shape()));
    S* yp = y.data();
    const std::uint8_t* mp = mask->data();
    detail::for_bcast_runs(plan, [&](std::int64_t xo, std::int64_t mo, std::int64_t run) {
      detail::softmax_rows(yp + xo, run / n, n, mp + mo, n, allow_empty);
    });
  } else {
    detail::softmax_rows(y.data(), rows, n, static_cast<const std::uint8_t*>(nullptr), 0, false);
  }
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    Tensor<S> probs = out->value;
    out->backward = [x, probs, n, rows, o] {
      Tensor<S> gx(x->value.shape());
      const S* pp = probs.data();
      const S* gp = o->out_grad().data();
      S* gxp = gx.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        ConstArrMap<S> p(pp + r * n, n), gy(gp + r * n, n);
        S dot = (p * gy).sum();
        ArrMap<S>(gxp + r * n, n) = p * (gy - dot);
      }
      x->accumulate(gx);
    };
  }
  return out;
}

// Normalizes the last axis with population variance, then applies gain and
// bias of extent d.
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias,
                  S eps = S(1e-5)) {
  std::int64_t d = x->value.shape().back();
  if (gain->value.size() != d || bias->value.size() != d)
    throw ShapeError("layer_norm gain/bias must have extent " + std::to_string(d));
  std::int64_t rows = x->value.size() / d;
  Tensor<S> y(x->value.shape());
  Tensor<S> xhat(x->value.shape());
  Tensor<S> inv_std({static_cast<int>(rows)});
  const S* xp = x->value.data();
  const S* gp = gain->value.data();
  const S* bp = bias->value.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    ConstArrMap<S> row(xp + r * d, d);
    S mean = row.mean();
    S var = (row - mean).square().mean();
    S is = S(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    ArrMap<S> xh(xhat.data() + r * d, d);
    xh = (row - mean) * is;
    ArrMap<S>(y.data() + r * d, d) = xh * ConstArrMap<S>(gp, d) + ConstArrMap<S>(bp, d);
  }
  Graph<S>* g = x->graph;
  bool req = x->requires_grad || gain->requires_grad || bias->requires_grad;
  auto out = g->make(std::move(y), req, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [x, gain, bias, xhat, inv_std, rows, d, o] {
      const Tensor<S>& gy = o->out_grad();
      const S* gyp = gy.data();
      const S* xhp = xhat.data();
      if (gain->requires_grad || bias->requires_grad) {
        Tensor<S> dg = Tensor<S>::zeros({static_cast<int>(d)});
        Tensor<S> db = Tensor<S>::zeros({static_cast<int>(d)});
        for (std::int64_t r = 0; r < rows; ++r) {
          dg.arr() += ConstArrMap<S>(gyp + r * d, d) * ConstArrMap<S>(xhp + r * d, d);
          db.arr() += ConstArrMap<S>(gyp + r * d, d);
        }
        if (gain->requires_grad) gain->accumulate(dg);
        if (bias->requires_grad) bias->accumulate(db);
      }
      if (x->requires_grad) {
        Tensor<S> gx(x->value.shape());
        ConstArrMap<S> gv(gain->value.data(), d);
        for (std::int64_t r = 0; r < rows; ++r) {
          ConstArrMap<S> gyr(gyp + r * d, d), xh(xhp + r * d, d);
          Eigen::Array<S, Eigen::Dynamic, 1> t = gyr * gv;
          S m1 = t.mean();
          S m2 = (t * xh).mean();
          ArrMap<S>(gx.data() + r * d, d) = inv_std[r] * (t - m1 - xh * m2);
        }
        x->accumulate(gx);
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Var<S> sum_all(const Var<S>& x) {
  Tensor<S> y = Tensor<S>::full({1}, x->value.arr().sum());
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [x, o] {
      Tensor<S> gx(x->value.shape());
      gx.arr() = o->out_grad()[0];
      x->accumulate(gx);
    };
  }
  return out;
}

template <class S>
Var<S> mean_all(const Var<S>& x) {
  return scale(sum_all(x), S(1) / static_cast<S>(x->value.size()));
}

}  // namespace scanenc
