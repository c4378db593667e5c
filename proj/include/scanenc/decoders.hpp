#pragma once

// Task heads on top of the latent summary [B, n_l, d_l]: agent-target
// assignment via scaled dot products, occupancy rendering from continuous
// position queries, and position estimation with scalar or categorical
// (HL-Gauss) outputs. Heads are pure functions of (params, inputs); loss
// masking happens in the loss functions, not the heads.

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "scanenc/attention.hpp"
#include "scanenc/hlgauss.hpp"
#include "scanenc/losses.hpp"
#include "scanenc/sim.hpp"

namespace scanenc {

// Agents are projected to d_l and refined by one cross-attention read of the
// latent set; targets are projected to d_l. Logits are dot products scaled
// by 1/sqrt(d_l), with one extra trailing column: a learned null token when
// null assignments are enabled, otherwise a zero column the loss masks out.
template <typename S>
struct AssignmentHead {
  int d_l = 0;
  bool use_null = false;
  Linear<S> proj_agent, proj_target;
  LayerNormM<S> ln_q;
  Mha<S> cross;
  Parameter<S>* null_token = nullptr;  // [1, d_l]

  void init(ParamStore<S>& ps, const std::string& name, int d_o, int d_l_, int heads,
            bool use_null_, Rng& rng) {
    d_l = d_l_;
    use_null = use_null_;
    proj_agent.init(ps, name + ".pa", d_o, d_l, rng);
    proj_target.init(ps, name + ".pt", d_o, d_l, rng);
    ln_q.init(ps, name + ".lnq", d_l);
    cross.init(ps, name + ".cross", d_l, d_l, heads, rng);
    if (use_null)
      null_token = &ps.add(name + ".null",
                           random_normal<S>(rng, {1, d_l}, S(1) / std::sqrt(S(d_l))));
  }

  // agents.tokens [B, A, d_o], targets.tokens [B, M0, d_o], latent
  // [B, n_l, d_l] -> logits [B, A, M0 + 1] with the null slot last.
  Var<S> operator()(Graph<S>& g, const TokenSet<S>& agents, const TokenSet<S>& targets,
                    const Var<S>& latent) const {
    const int B = int(agents.batch());
    Var<S> q = proj_agent(g, g.constant(agents.tokens));
    q = add(q, cross(g, ln_q(g, q), latent));
    Var<S> t = proj_target(g, g.constant(targets.tokens));
    Var<S> slot = use_null
                      ? expand_leading(g.param(*null_token), B)
                      : g.constant(Tensor<S>::zeros({B, 1, d_l}));
    t = concat<S>({t, slot}, 1);
    return scale(matmul(q, t, false, true), S(1) / std::sqrt(S(d_l)));
  }
};

// Continuous occupancy queries: sinusoidal position features projected to
// d_l, one cross-attention read of the latent set, then a single logit per
// query. Each query row is independent, so any render resolution agrees
// with any other at shared coordinates.
template <typename S>
struct OccupancyHead {
  int d_l = 0;
  Linear<S> proj_q;
  LayerNormM<S> ln_q;
  Mha<S> cross;
  Linear<S> out;

  void init(ParamStore<S>& ps, const std::string& name, int d_o, int d_l_, int heads,
            Rng& rng) {
    d_l = d_l_;
    proj_q.init(ps, name + ".pq", d_o, d_l, rng);
    ln_q.init(ps, name + ".lnq", d_l);
    cross.init(ps, name + ".cross", d_l, d_l, heads, rng);
    out.init(ps, name + ".out", d_l, 1, rng);
  }

  // queries [n_q, d_o] (shared across the batch) or [B, n_q, d_o];
  // latent [B, n_l, d_l] -> logits [B, n_q]
  Var<S> operator()(Graph<S>& g, const Tensor<S>& queries, const Var<S>& latent) const {
    const int B = int(latent->value.dim(0));
    if (queries.rank() != 2 && queries.rank() != 3)
      throw ShapeError("occupancy queries: rank 2 or 3 required");
    if (queries.rank() == 3 && queries.dim(0) != B)
      throw ShapeError("occupancy queries: batch mismatch");
    const int n_q = int(queries.dim(queries.rank() - 2));
    Var<S> q = queries.rank() == 2 ? expand_leading(g.constant(queries), B)
                                   : g.constant(queries);
    q = proj_q(g, q);
    q = add(q, cross(g, ln_q(g, q), latent));
    Var<S> logit = out(g, q);  // [B, n_q, 1]
    return reshape(logit, {B, n_q});
  }
};

// Feature rows for a full render grid: cell centers of an h x w grid over
// the centered arena, featurized like any other observed position.
template <typename S>
Tensor<S> occupancy_queries(int grid_h, int grid_w, double arena, int d_o) {
  Tensor<S> q({grid_h * grid_w, d_o});
  for (int i = 0; i < grid_h; ++i)
    for (int j = 0; j < grid_w; ++j) {
      const double x = -arena / 2 + (j + 0.5) * arena / grid_w;
      const double y = -arena / 2 + (i + 0.5) * arena / grid_h;
      const auto f = featurize(x, y, 0.0, arena, d_o);
      for (int c = 0; c < d_o; ++c) q[std::int64_t(i) * grid_w * d_o + std::int64_t(j) * d_o + c] = S(f[size_t(c)]);
    }
  return q;
}

// Axis value specs for one position representation over a centered square
// arena of the given side length. Axis 0/1 are x/y (or radius/angle for the
// polar representation).
inline std::pair<HlGaussSpec, HlGaussSpec> position_axis_specs(PosRepr repr,
                                                               double arena) {
  HlGaussSpec a, b;
  switch (repr) {
    case PosRepr::cart_rel_scalar:
    case PosRepr::cart_rel_cat:
      a.lo = -arena;
      a.hi = arena;
      b = a;
      break;
    case PosRepr::cart_glbl_scalar:
    case PosRepr::cart_glbl_cat:
      a.lo = -arena / 2;
      a.hi = arena / 2;
      b = a;
      break;
    case PosRepr::polar_rel_cat:
      a.lo = 0;
      a.hi = arena * 1.4142135623730951;  // diagonal: max relative distance
      b.lo = -3.14159265358979323846;
      b.hi = 3.14159265358979323846;
      break;
  }
  return {a, b};
}

// Two label values per unit for the chosen representation. Relative
// coordinates are translations (no frame rotation); the polar angle is
// atan2 of the offset.
inline std::array<double, 2> position_label(PosRepr repr, double ux, double uy,
                                            double tx, double ty) {
  switch (repr) {
    case PosRepr::cart_rel_scalar:
    case PosRepr::cart_rel_cat:
      return {tx - ux, ty - uy};
    case PosRepr::cart_glbl_scalar:
    case PosRepr::cart_glbl_cat:
      return {tx, ty};
    case PosRepr::polar_rel_cat:
    default:
      return {std::hypot(tx - ux, ty - uy), std::atan2(ty - uy, tx - ux)};
  }
}

template <typename S>
struct PositionPrediction {
  Var<S> pos;          // [B, U, 2] scalar modes; [B, U, 2*n_bins] categorical
  Var<S> valid_logit;  // [B, U]
};

// Per-unit position estimate plus a logit for "this unit is following a
// position command". Unit tokens are refined by one cross-attention read of
// the latent set; both outputs are linear maps of the refined feature.
template <typename S>
struct PositionHead {
  PosRepr repr = PosRepr::cart_rel_cat;
  HlGaussSpec axis0, axis1;
  int d_l = 0;
  Linear<S> proj_unit;
  LayerNormM<S> ln_q;
  Mha<S> cross;
  Linear<S> out_pos, out_valid;

  void init(ParamStore<S>& ps, const std::string& name, int d_o, int d_l_, int heads,
            PosRepr repr_, double arena, Rng& rng) {
    repr = repr_;
    d_l = d_l_;
    auto specs = position_axis_specs(repr, arena);
    axis0 = specs.first;
    axis1 = specs.second;
    proj_unit.init(ps, name + ".pu", d_o, d_l, rng);
    ln_q.init(ps, name + ".lnq", d_l);
    cross.init(ps, name + ".cross", d_l, d_l, heads, rng);
    const int width = pos_repr_categorical(repr) ? 2 * axis0.n_bins : 2;
    out_pos.init(ps, name + ".pos", d_l, width, rng);
    out_valid.init(ps, name + ".valid", d_l, 1, rng);
  }

  PositionPrediction<S> operator()(Graph<S>& g, const TokenSet<S>& units,
                                   const Var<S>& latent) const {
    const int B = int(units.batch()), U = int(units.count());
    Var<S> q = proj_unit(g, g.constant(units.tokens));
    q = add(q, cross(g, ln_q(g, q), latent));
    PositionPrediction<S> out;
    out.pos = out_pos(g, q);
    out.valid_logit = reshape(out_valid(g, q), {B, U});
    return out;
  }

  // Decoded (axis0, axis1) values per unit, at the prediction's value scale.
  std::vector<std::array<double, 2>> decode(const Tensor<S>& pos_value) const {
    const std::int64_t B = pos_value.dim(0), U = pos_value.dim(1);
    std::vector<std::array<double, 2>> out(size_t(B * U));
    if (!pos_repr_categorical(repr)) {
      for (std::int64_t r = 0; r < B * U; ++r)
        out[size_t(r)] = {double(pos_value[r * 2]), double(pos_value[r * 2 + 1])};
      return out;
    }
    const int nb = axis0.n_bins;
    std::vector<double> row(static_cast<std::size_t>(nb));
    for (std::int64_t r = 0; r < B * U; ++r) {
      for (int k = 0; k < nb; ++k) row[size_t(k)] = double(pos_value[r * 2 * nb + k]);
      const double v0 = hlgauss_decode(row.data(), axis0);
      for (int k = 0; k < nb; ++k)
        row[size_t(k)] = double(pos_value[r * 2 * nb + nb + k]);
      const double v1 = repr == PosRepr::polar_rel_cat
                            ? polar_wrap_decode(row.data(), axis1)
                            : hlgauss_decode(row.data(), axis1);
      out[size_t(r)] = {v0, v1};
    }
    return out;
  }
};

// Position loss: scalar modes use masked L2; categorical modes use soft
// cross-entropy against the HL-Gauss (or wrapped, for the angle) target
// distribution. Rows with has_pos = 1 carry position terms (faux rows
// included); the valid-command BCE is masked to non-faux rows only, so faux
// positions never touch valid-logit training.
template <typename S>
Var<S> position_loss(Graph<S>& g, const PositionHead<S>& head,
                     const PositionPrediction<S>& pred,
                     const std::vector<std::array<double, 2>>& labels,
                     const Tensor<std::uint8_t>& has_pos,
                     const Tensor<std::uint8_t>& faux) {
  const std::int64_t B = pred.valid_logit->value.dim(0);
  const std::int64_t U = pred.valid_logit->value.dim(1);
  if (std::int64_t(labels.size()) != B * U)
    throw ShapeError("position_loss: one label pair per unit required");
  if (has_pos.size() != B * U || faux.size() != B * U)
    throw ShapeError("position_loss: one has_pos and faux flag per unit required");

  Var<S> pos_term;
  if (!pos_repr_categorical(head.repr)) {
    Tensor<S> target = Tensor<S>::zeros({int(B), int(U), 2});
    Tensor<S> w = Tensor<S>::zeros({int(B), int(U), 2});
    for (std::int64_t r = 0; r < B * U; ++r) {
      if (!has_pos[r]) continue;
      for (int a = 0; a < 2; ++a) {
        target[r * 2 + a] = S(labels[size_t(r)][size_t(a)]);
        w[r * 2 + a] = S(1);
      }
    }
    pos_term = masked_mse(g, pred.pos, target, &w);
  } else {
    // One soft cross-entropy row per axis per unit, weighted by has_pos.
    // Unlabeled rows keep a zero target: their weight is zero and their
    // label slots may hold garbage the encoder would reject.
    const int nb = head.axis0.n_bins;
    Tensor<S> target = Tensor<S>::zeros({int(B * U * 2), nb});
    Tensor<S> wflat = Tensor<S>::zeros({int(B * U * 2)});
    for (std::int64_t r = 0; r < B * U; ++r) {
      if (!has_pos[r]) continue;
      wflat[r * 2] = S(1);
      wflat[r * 2 + 1] = S(1);
      const auto d0 = hlgauss_encode(labels[size_t(r)][0], head.axis0);
      const auto d1 = head.repr == PosRepr::polar_rel_cat
                          ? polar_wrap_encode(labels[size_t(r)][1], head.axis1)
                          : hlgauss_encode(labels[size_t(r)][1], head.axis1);
      for (int k = 0; k < nb; ++k) {
        target[(r * 2) * nb + k] = S(d0[size_t(k)]);
        target[(r * 2 + 1) * nb + k] = S(d1[size_t(k)]);
      }
    }
    Var<S> flat = reshape(pred.pos, {int(B * U * 2), nb});
    pos_term = soft_cross_entropy(g, flat, target, &wflat);
  }

  Tensor<S> vlabel({int(B), int(U)});
  Tensor<S> vmask({int(B), int(U)});
  for (std::int64_t r = 0; r < B * U; ++r) {
    vlabel[r] = S(has_pos[r] && !faux[r] ? 1 : 0);
    vmask[r] = S(faux[r] ? 0 : 1);
  }
  Var<S> valid_term = bce_logits(g, pred.valid_logit, vlabel, &vmask);
  return add(pos_term, valid_term);
}

}  // namespace scanenc
