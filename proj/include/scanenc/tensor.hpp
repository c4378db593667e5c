#pragma once

// Dense row-major N-D array with shared immutable storage, plus the RNG and
// allocation accounting used across the library. Eigen provides all matrix
// math through Map views; no data is ever copied to build a view.

// Small products must take the same packed-GEMM path as large ones: the
// coefficient-based fallback sums in a different order, so the same row would
// decode to different bits depending on how many rows it shares a call with.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 1
#endif

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <new>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace scanenc {

using Shape = std::vector<int>;

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

// Live/peak byte counters over tensor buffers. Single-threaded by design;
// used for the bench memory estimate and the state-size contracts.
namespace alloc_stats {
inline std::int64_t& current_bytes() {
  static std::int64_t v = 0;
  return v;
}
inline std::int64_t& peak_bytes() {
  static std::int64_t v = 0;
  return v;
}
inline void on_alloc(std::int64_t n) {
  current_bytes() += n;
  if (current_bytes() > peak_bytes()) peak_bytes() = current_bytes();
}
inline void on_free(std::int64_t n) { current_bytes() -= n; }
inline void reset_peak() { peak_bytes() = current_bytes(); }
}  // namespace alloc_stats

template <class S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<MatrixX<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const MatrixX<S>>;
template <class S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <class S>
using ConstArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

template <class S>
class Tensor {
  // 64-byte aligned so vectorized loop peeling is identical for every
  // buffer; results then do not depend on heap addresses.
  struct Buffer {
    S* p = nullptr;
    std::int64_t n = 0;
    explicit Buffer(std::int64_t count) : n(count) {
      p = static_cast<S*>(
          ::operator new[](static_cast<size_t>(n) * sizeof(S), std::align_val_t(64)));
      std::memset(p, 0, static_cast<size_t>(n) * sizeof(S));
      alloc_stats::on_alloc(n * static_cast<std::int64_t>(sizeof(S)));
    }
    ~Buffer() {
      ::operator delete[](p, std::align_val_t(64));
      alloc_stats::on_free(n * static_cast<std::int64_t>(sizeof(S)));
    }
    Buffer(const Buffer&) = delete;
    Buffer& operator=(const Buffer&) = delete;
  };

 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), buf_(std::make_shared<Buffer>(shape_numel(shape_))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.data(), t.data() + t.size(), value);
    return t;
  }

  static Tensor from(Shape shape, const std::vector<S>& data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.buf_ = std::make_shared<Buffer>(static_cast<std::int64_t>(data.size()));
    std::memcpy(t.data(), data.data(), data.size() * sizeof(S));
    return t;
  }

  bool empty() const { return !buf_; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return buf_ ? buf_->n : 0; }

  int dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw ShapeError("axis out of range for " + shape_str(shape_));
    return shape_[i];
  }

  S* data() { return buf_->p; }
  const S* data() const { return buf_->p; }

  S& operator[](std::int64_t i) { return buf_->p[i]; }
  const S& operator[](std::int64_t i) const { return buf_->p[i]; }

  // Flat 1-D Eigen array view.
  ArrMap<S> arr() { return ArrMap<S>(data(), size()); }
  ConstArrMap<S> arr() const { return ConstArrMap<S>(data(), size()); }

  // 2-D Eigen view of the whole buffer.
  MatMap<S> mat(std::int64_t rows, std::int64_t cols) {
    if (rows * cols != size())
      throw ShapeError("cannot view " + shape_str(shape_) + " as " + std::to_string(rows) +
                       "x" + std::to_string(cols));
    return MatMap<S>(data(), rows, cols);
  }
  ConstMatMap<S> mat(std::int64_t rows, std::int64_t cols) const {
    if (rows * cols != size())
      throw ShapeError("cannot view " + shape_str(shape_) + " as " + std::to_string(rows) +
                       "x" + std::to_string(cols));
    return ConstMatMap<S>(data(), rows, cols);
  }

  // View the trailing two axes as a matrix stack: returns the slice at batch
  // index i of a [..., rows, cols] tensor.
  MatMap<S> slice_mat(std::int64_t i, std::int64_t rows, std::int64_t cols) {
    return MatMap<S>(data() + i * rows * cols, rows, cols);
  }
  ConstMatMap<S> slice_mat(std::int64_t i, std::int64_t rows, std::int64_t cols) const {
    return ConstMatMap<S>(data() + i * rows * cols, rows, cols);
  }

  // Same storage, new shape.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<Buffer>(size());
    std::memcpy(t.data(), data(), static_cast<size_t>(size()) * sizeof(S));
    return t;
  }

  void fill(S v) { std::fill(data(), data() + size(), v); }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<S>) {
      for (std::int64_t i = 0; i < size(); ++i)
        if (!std::isfinite(buf_->p[i])) return false;
    }
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  Shape shape_;
  std::shared_ptr<Buffer> buf_;
};

// Deterministic RNG. All distributions are implemented explicitly so results
// do not depend on the standard library's unspecified algorithms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    // Rejection sampling keeps the distribution exact for any n.
    std::uint64_t un = static_cast<std::uint64_t>(n);
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return static_cast<std::int64_t>(x % un);
  }

  // Inclusive integer range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + uniform_int(hi - lo + 1);
  }

  double normal() {
    // Marsaglia polar method with a cached spare.
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  // Normal truncated to [-clip, clip] standard deviations.
  double trunc_normal(double std_dev, double clip = 2.0) {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > clip);
    return z * std_dev;
  }

  // Derive an independent stream; mixing is splitmix64 over (seed, id).
  Rng split(std::uint64_t stream_id) const {
    std::uint64_t x = seed_ + 0x9e3779b97f4a7c15ull * (stream_id + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return Rng(x);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Mixes (seed, stream) into a fresh seed; used to derive per-episode and
// per-iteration streams statelessly so checkpoint resume needs no RNG state.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

template <class S>
Tensor<S> random_normal(Rng& rng, Shape shape, double std_dev = 1.0) {
  Tensor<S> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<S>(rng.normal() * std_dev);
  return t;
}

template <class S>
Tensor<S> random_uniform(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
  Tensor<S> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

}  // namespace scanenc
