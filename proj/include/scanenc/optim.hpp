#pragma once

// AdamW with decoupled weight decay, a polynomial learning-rate schedule,
// and global-norm gradient clipping. Moments live in name-keyed tensors so
// optimizer state serializes through the same checkpoint records as
// parameters.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "scanenc/params.hpp"

namespace scanenc {

// lr = base * (1 - step/total)^power, clamped at the endpoint.
inline double poly_lr(std::int64_t step, std::int64_t total, double base,
                      double power = 0.9) {
  if (total <= 0) throw ValueError("poly_lr: total steps must be positive");
  if (step < 0 || step > total) throw ValueError("poly_lr: step outside [0, total]");
  if (step == total) return 0.0;
  return base * std::pow(1.0 - double(step) / double(total), power);
}

// Global L2 norm over every gradient in the store; parameters that never
// received a gradient count as zero.
template <class S>
double grad_global_norm(const ParamStore<S>& ps) {
  double sq = 0;
  for (const auto& [name, p] : ps)
    for (std::int64_t i = 0; i < p.grad.size(); ++i)
      sq += double(p.grad[i]) * double(p.grad[i]);
  return std::sqrt(sq);
}

// Rescales all gradients so the global norm is at most max_norm. Returns the
// pre-clip norm. A uniform rescale preserves gradient direction.
template <class S>
double clip_gradients(ParamStore<S>& ps, double max_norm) {
  if (!(max_norm > 0)) throw ValueError("clip_gradients: max_norm must be positive");
  const double norm = grad_global_norm(ps);
  if (norm > max_norm) {
    const S scale = S(max_norm / norm);
    for (auto& [name, p] : ps)
      for (std::int64_t i = 0; i < p.grad.size(); ++i) p.grad[i] *= scale;
  }
  return norm;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled update: p -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p).
// The decay term applies to every parameter each step, gradient or not.
template <class S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps_taken() const { return step_; }

  void step(ParamStore<S>& ps, double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (auto& [name, p] : ps) {
      Tensor<S>& m = slot(m_, name, p.value.shape());
      Tensor<S>& v = slot(v_, name, p.value.shape());
      if (!p.grad.empty() && !p.grad.same_shape(p.value))
        throw ShapeError("adamw: gradient shape mismatch for " + name);
      for (std::int64_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad.empty() ? 0.0 : double(p.grad[i]);
        const double mi = cfg_.beta1 * double(m[i]) + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * double(v[i]) + (1.0 - cfg_.beta2) * g * g;
        m[i] = S(mi);
        v[i] = S(vi);
        const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps) +
                              cfg_.weight_decay * double(p.value[i]);
        p.value[i] = S(double(p.value[i]) - lr * update);
      }
    }
  }

  // Optimizer state as checkpoint records: per-parameter first and second
  // moments plus the step counter.
  std::vector<std::pair<std::string, const Tensor<S>*>> state_records() const {
    step_record_ = Tensor<S>::full({1}, S(step_));
    std::vector<std::pair<std::string, const Tensor<S>*>> recs;
    recs.emplace_back("adamw.step", &step_record_);
    for (const auto& [name, t] : m_) recs.emplace_back("m." + name, &t);
    for (const auto& [name, t] : v_) recs.emplace_back("v." + name, &t);
    return recs;
  }

  void load_state(std::vector<std::pair<std::string, Tensor<S>>> recs) {
    m_.clear();
    v_.clear();
    step_ = -1;
    for (auto& [name, t] : recs) {
      if (name == "adamw.step")
        step_ = std::int64_t(t[0]);
      else if (name.rfind("m.", 0) == 0)
        m_[name.substr(2)] = std::move(t);
      else if (name.rfind("v.", 0) == 0)
        v_[name.substr(2)] = std::move(t);
      else
        throw ValueError("adamw: unknown state record " + name);
    }
    if (step_ < 0) throw ValueError("adamw: state has no step record");
  }

 private:
  Tensor<S>& slot(std::map<std::string, Tensor<S>>& side, const std::string& name,
                  const Shape& shape) {
    auto it = side.find(name);
    if (it == side.end()) it = side.emplace(name, Tensor<S>::zeros(shape)).first;
    else if (it->second.shape() != shape)
      throw ShapeError("adamw: moment shape mismatch for " + name);
    return it->second;
  }

  AdamWConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, Tensor<S>> m_, v_;
  mutable Tensor<S> step_record_;
};

}  // namespace scanenc
