#pragma once

// Histogram-loss Gaussian (HL-Gauss) categorical value coding. A scalar value
// becomes a categorical target by integrating a Gaussian kernel N(value,
// sigma^2) over uniform bins and renormalizing; decoding takes the expectation
// of bin centers under softmax(logits). Angles get a periodic variant: the
// kernel is laid out on a doubled template (half-period extensions on both
// sides) and the extension mass is folded back into the principal range by
// translation of one period, which makes the encoding exactly periodic up to
// the truncated far tails. Decoding an angle first rotates the categories so
// the argmax bin is centered and recomputes the bin values around it, then
// takes the usual expectation and wraps.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "scanenc/tensor.hpp"

namespace scanenc {

enum class PosRepr {
  cart_rel_scalar,
  cart_glbl_scalar,
  polar_rel_cat,
  cart_rel_cat,
  cart_glbl_cat,
};

inline PosRepr pos_repr_from_string(const std::string& s) {
  if (s == "cart_rel_scalar") return PosRepr::cart_rel_scalar;
  if (s == "cart_glbl_scalar") return PosRepr::cart_glbl_scalar;
  if (s == "polar_rel_cat") return PosRepr::polar_rel_cat;
  if (s == "cart_rel_cat") return PosRepr::cart_rel_cat;
  if (s == "cart_glbl_cat") return PosRepr::cart_glbl_cat;
  throw ValueError("unknown position representation: " + s);
}

inline const char* pos_repr_name(PosRepr r) {
  switch (r) {
    case PosRepr::cart_rel_scalar: return "cart_rel_scalar";
    case PosRepr::cart_glbl_scalar: return "cart_glbl_scalar";
    case PosRepr::polar_rel_cat: return "polar_rel_cat";
    case PosRepr::cart_rel_cat: return "cart_rel_cat";
    case PosRepr::cart_glbl_cat: return "cart_glbl_cat";
  }
  return "?";
}

inline bool pos_repr_categorical(PosRepr r) {
  return r != PosRepr::cart_rel_scalar && r != PosRepr::cart_glbl_scalar;
}

struct HlGaussSpec {
  int n_bins = 20;
  double sigma = 0.2;
  double lo = -4.0;
  double hi = 4.0;
  PosRepr repr = PosRepr::cart_rel_cat;

  void validate() const {
    if (n_bins < 2) throw ValueError("HlGaussSpec: n_bins must be >= 2");
    if (!(sigma > 0)) throw ValueError("HlGaussSpec: sigma must be > 0");
    if (!(hi > lo)) throw ValueError("HlGaussSpec: hi must exceed lo");
  }
  double width() const { return (hi - lo) / double(n_bins); }
  double center(int b) const { return lo + (double(b) + 0.5) * width(); }
};

namespace detail {

inline double norm_cdf(double z) { return 0.5 * std::erfc(-z * 0.7071067811865475244); }

inline void softmax_inplace(std::vector<double>& v) {
  double m = *std::max_element(v.begin(), v.end());
  double se = 0;
  for (double& x : v) {
    x = std::exp(x - m);
    se += x;
  }
  for (double& x : v) x /= se;
}

}  // namespace detail

// Bin masses of N(value, sigma^2) over the spec's uniform bins, renormalized
// to sum exactly 1. Values outside [lo, hi] still produce a valid (edge-heavy)
// distribution through the renormalization.
inline std::vector<double> hlgauss_encode(double value, const HlGaussSpec& spec) {
  spec.validate();
  const double w = spec.width();
  std::vector<double> mass(size_t(spec.n_bins));
  double prev = detail::norm_cdf((spec.lo - value) / spec.sigma);
  double total = 0;
  for (int b = 0; b < spec.n_bins; ++b) {
    double next = detail::norm_cdf((spec.lo + double(b + 1) * w - value) / spec.sigma);
    mass[size_t(b)] = std::max(0.0, next - prev);
    total += mass[size_t(b)];
    prev = next;
  }
  if (!(total > 0)) throw ValueError("hlgauss_encode: value too far outside range");
  for (double& m : mass) m /= total;
  return mass;
}

// Expectation of bin centers under softmax(logits).
inline double hlgauss_decode(const double* logits, const HlGaussSpec& spec) {
  spec.validate();
  std::vector<double> p(logits, logits + spec.n_bins);
  detail::softmax_inplace(p);
  double acc = 0;
  for (int b = 0; b < spec.n_bins; ++b) acc += p[size_t(b)] * spec.center(b);
  return acc;
}

inline double hlgauss_decode(const std::vector<double>& logits, const HlGaussSpec& spec) {
  if (int(logits.size()) != spec.n_bins)
    throw ShapeError("hlgauss_decode: logit count mismatch");
  return hlgauss_decode(logits.data(), spec);
}

namespace detail {

// Wrap x into [lo, lo + period).
inline double wrap_into(double x, double lo, double period) {
  double t = (x - lo) / period;
  return lo + period * (t - std::floor(t));
}

}  // namespace detail

// Periodic encoding for angles over the principal range [lo, hi) (period
// hi - lo). The kernel is integrated over a doubled template with half-period
// extensions on each side; extension bins map onto principal bins by
// translation of one period and their mass is added in. n_bins must be even so
// the extensions are bin-aligned.
inline std::vector<double> polar_wrap_encode(double theta, const HlGaussSpec& spec) {
  spec.validate();
  if (spec.n_bins % 2 != 0)
    throw ValueError("polar_wrap_encode: n_bins must be even");
  const int n = spec.n_bins;
  const int half = n / 2;
  const double period = spec.hi - spec.lo;
  const double w = spec.width();
  const double t0 = spec.lo - 0.5 * period;  // doubled template start
  theta = detail::wrap_into(theta, spec.lo, period);

  std::vector<double> folded(size_t(n), 0.0);
  double prev = detail::norm_cdf((t0 - theta) / spec.sigma);
  double total = 0;
  for (int t = 0; t < 2 * n; ++t) {
    double next = detail::norm_cdf((t0 + double(t + 1) * w - theta) / spec.sigma);
    double m = std::max(0.0, next - prev);
    prev = next;
    int target;
    if (t < half)
      target = t + half;  // lower extension, shifted up one period
    else if (t < half + n)
      target = t - half;  // principal range
    else
      target = t - half - n;  // upper extension, shifted down one period
    folded[size_t(target)] += m;
    total += m;
  }
  if (!(total > 0)) throw ValueError("polar_wrap_encode: degenerate kernel");
  for (double& m : folded) m /= total;
  return folded;
}

// Argmax-centered periodic decode: categories are rotated so the argmax bin
// sits at offset 0, bin values are recomputed as center(argmax) + offset *
// width with signed circular offsets in [-n/2, n/2), and the expectation is
// wrapped back into [lo, hi).
inline double polar_wrap_decode(const double* logits, const HlGaussSpec& spec) {
  spec.validate();
  const int n = spec.n_bins;
  std::vector<double> p(logits, logits + n);
  detail::softmax_inplace(p);
  int bstar = 0;
  for (int b = 1; b < n; ++b)
    if (p[size_t(b)] > p[size_t(bstar)]) bstar = b;
  const double w = spec.width();
  const double period = spec.hi - spec.lo;
  double acc = 0;
  for (int b = 0; b < n; ++b) {
    int d = ((b - bstar) % n + n) % n;
    if (d >= n / 2) d -= n;
    acc += p[size_t(b)] * (spec.center(bstar) + double(d) * w);
  }
  return detail::wrap_into(acc, spec.lo, period);
}

inline double polar_wrap_decode(const std::vector<double>& logits,
                                const HlGaussSpec& spec) {
  if (int(logits.size()) != spec.n_bins)
    throw ShapeError("polar_wrap_decode: logit count mismatch");
  return polar_wrap_decode(logits.data(), spec);
}

}  // namespace scanenc
