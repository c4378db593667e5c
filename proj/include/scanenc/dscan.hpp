#pragma once

// Discounted inclusive scan along a time axis:
//
//   y_t = (1/gamma) * y_{t-1} + x_t,   y_{-1} = 0,   gamma >= 1.
//
// gamma = 1 degenerates to a cumulative sum. gamma < 1 is rejected: the
// recurrence would amplify history without bound.
//
// The batch form runs in three passes over fixed-length chunks so work stays
// cache-resident and the math matches the sequential recurrence exactly up
// to rounding:
//   1. an inclusive scan local to each chunk,
//   2. an exclusive scan across chunk carries, each step decayed by
//      gamma^-len of the chunk it crosses,
//   3. a per-element add-in of the chunk's carry decayed by offset+1.
//
// The step form keeps one accumulator per stream and costs O(1) per step
// with no allocation, which is what makes incremental inference flat-cost.

#include "scanenc/graph.hpp"
#include "scanenc/tensor.hpp"

#include <algorithm>
#include <tuple>
#include <vector>

namespace scanenc {

namespace detail {

template <class S>
void check_gamma(double gamma) {
  if (!(gamma >= 1.0))
    throw ValueError("dscan requires gamma >= 1, got " + std::to_string(gamma));
}

// Core chunked scan over layout [outer, T, inner]; reverse walks time from
// the end (the adjoint of the forward map).
template <class S>
void dscan_axis(const S* x, S* y, std::int64_t outer, std::int64_t T, std::int64_t inner,
                double gamma, int chunk, bool reverse) {
  const S g = static_cast<S>(1.0 / gamma);
  const std::int64_t L = chunk;
  const std::int64_t n_chunks = (T + L - 1) / L;
  // pows[i] = g^(i+1)
  std::vector<S> pows(static_cast<size_t>(std::min<std::int64_t>(L, T)));
  {
    S p = g;
    for (auto& v : pows) {
      v = p;
      p *= g;
    }
  }
  auto phys = [&](std::int64_t t) { return reverse ? T - 1 - t : t; };
  std::vector<S> carry_buf(static_cast<size_t>(n_chunks * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    const S* xo = x + o * T * inner;
    S* yo = y + o * T * inner;
    // Pass 1: local inclusive scans.
    for (std::int64_t c = 0; c < n_chunks; ++c) {
      std::int64_t lo = c * L, hi = std::min(T, lo + L);
      {
        std::int64_t p = phys(lo) * inner;
        if (yo + p != xo + p) ArrMap<S>(yo + p, inner) = ConstArrMap<S>(xo + p, inner);
      }
      for (std::int64_t t = lo + 1; t < hi; ++t) {
        ArrMap<S>(yo + phys(t) * inner, inner) =
            ConstArrMap<S>(xo + phys(t) * inner, inner) +
            g * ConstArrMap<S>(yo + phys(t - 1) * inner, inner);
      }
    }
    // Pass 2: exclusive scan of chunk carries; carry[c] is the discounted
    // prefix just before chunk c.
    for (std::int64_t c = 0; c < n_chunks; ++c) {
      ArrMap<S> carry(carry_buf.data() + c * inner, inner);
      if (c == 0) {
        carry.setZero();
        continue;
      }
      std::int64_t prev_lo = (c - 1) * L, prev_hi = std::min(T, prev_lo + L);
      std::int64_t prev_len = prev_hi - prev_lo;
      ConstArrMap<S> prev_local(yo + phys(prev_hi - 1) * inner, inner);
      ConstArrMap<S> prev_carry(carry_buf.data() + (c - 1) * inner, inner);
      carry = prev_local + pows[static_cast<size_t>(prev_len - 1)] * prev_carry;
    }
    // Pass 3: decayed carry add-in.
    for (std::int64_t c = 1; c < n_chunks; ++c) {
      std::int64_t lo = c * L, hi = std::min(T, lo + L);
      ConstArrMap<S> carry(carry_buf.data() + c * inner, inner);
      for (std::int64_t t = lo; t < hi; ++t)
        ArrMap<S>(yo + phys(t) * inner, inner) += pows[static_cast<size_t>(t - lo)] * carry;
    }
  }
}

template <class S>
std::tuple<std::int64_t, std::int64_t, std::int64_t> axis_split(const Tensor<S>& x, int axis) {
  int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("dscan axis out of range for " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  return {outer, static_cast<std::int64_t>(x.shape()[axis]), inner};
}

}  // namespace detail

template <class S>
Tensor<S> dscan_forward(const Tensor<S>& x, double gamma, int axis = 0, int chunk = 64) {
  detail::check_gamma<S>(gamma);
  auto [outer, T, inner] = detail::axis_split(x, axis);
  Tensor<S> y(x.shape());
  if (T > 0) detail::dscan_axis<S>(x.data(), y.data(), outer, T, inner, gamma, chunk, false);
  return y;
}

// Adjoint of dscan_forward: a discounted scan with time reversed. This is
// exactly the gradient map, since y = M x with M lower-triangular Toeplitz
// implies dx = M^T dy.
template <class S>
Tensor<S> dscan_backward(const Tensor<S>& gy, double gamma, int axis = 0, int chunk = 64) {
  detail::check_gamma<S>(gamma);
  auto [outer, T, inner] = detail::axis_split(gy, axis);
  Tensor<S> gx(gy.shape());
  if (T > 0) detail::dscan_axis<S>(gy.data(), gx.data(), outer, T, inner, gamma, chunk, true);
  return gx;
}

// Streaming accumulator for one scan: update is a single fused
// multiply-add on a fixed buffer.
template <class S>
struct ScanState {
  Tensor<S> acc;
  S inv_gamma = S(1);
  std::int64_t steps_seen = 0;

  std::int64_t bytes() const { return acc.size() * static_cast<std::int64_t>(sizeof(S)); }
};

template <class S>
ScanState<S> make_scan_state(Shape slice_shape, double gamma) {
  detail::check_gamma<S>(gamma);
  ScanState<S> st;
  st.acc = Tensor<S>::zeros(std::move(slice_shape));
  st.inv_gamma = static_cast<S>(1.0 / gamma);
  return st;
}

template <class S>
const Tensor<S>& dscan_step(ScanState<S>& st, const Tensor<S>& x) {
  if (!st.acc.same_shape(x))
    throw ShapeError("scan step shape " + shape_str(x.shape()) + " does not match state " +
                     shape_str(st.acc.shape()));
  st.acc.arr() = st.inv_gamma * st.acc.arr() + x.arr();
  ++st.steps_seen;
  return st.acc;
}

// Graph op over the batch form. gamma is a hyperparameter, not a learnable
// input, so only x receives gradient.
template <class S>
Var<S> dscan(const Var<S>& x, double gamma, int axis = 0, int chunk = 64) {
  Tensor<S> y = dscan_forward(x->value, gamma, axis, chunk);
  auto out = x->graph->make(std::move(y), x->requires_grad, nullptr);
  if (out->requires_grad) {
    GraphNode<S>* o = out.get();
    out->backward = [x, gamma, axis, chunk, o] {
      x->accumulate(dscan_backward(o->out_grad(), gamma, axis, chunk));
    };
  }
  return out;
}

}  // namespace scanenc
