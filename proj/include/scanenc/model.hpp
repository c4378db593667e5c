#pragma once

// Whole-model assembly for the benchmark tasks: a sequence encoder feeding a
// task head, batch construction from recorded episodes, the training loss,
// and per-timestep evaluation. Heads run once over latents with time folded
// into the batch axis, so one call covers every step of every episode.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "scanenc/decoders.hpp"
#include "scanenc/encoders.hpp"
#include "scanenc/losses.hpp"
#include "scanenc/metrics.hpp"
#include "scanenc/sim.hpp"

namespace scanenc {

// Encoder plus the head for one task. Only the active task's head exists,
// so every parameter in the store receives gradient signal.
template <class S>
struct TaskModel {
  Task task = Task::assignment;
  double arena = 4.0;
  ParamStore<S> params;
  std::unique_ptr<SeqEncoder<S>> encoder;
  AssignmentHead<S> assign;
  OccupancyHead<S> occ;

  TaskModel(const EncoderConfig& cfg, Task task_, double arena_, std::uint64_t seed)
      : task(task_), arena(arena_) {
    Rng rng(seed);
    encoder = make_encoder<S>(params, "enc", cfg, rng);
    if (task == Task::assignment)
      assign.init(params, "assign", cfg.d_o, cfg.d_l, cfg.n_heads, /*use_null=*/false,
                  rng);
    else
      occ.init(params, "occ", cfg.d_o, cfg.d_l, cfg.n_heads, rng);
  }
};

// One training batch. Counts are constant within an episode, so validity
// masks carry no time axis. Assignment labels index real target columns;
// padded agents hold label 0 under a zero agent_valid flag. Hidden-target
// batches sample occupancy query cells per step instead.
template <class S>
struct Batch {
  SeqObs<S> obs;
  Tensor<int> labels;                      // [B, T, A]
  Tensor<std::uint8_t> agent_valid;        // [B, A]
  Tensor<std::uint8_t> target_valid;       // [B, M + 1], null column dead
  Tensor<S> occ_queries;                   // [B, T, nq, d_o]
  Tensor<S> occ_labels;                    // [B, T, nq]
};

namespace detail {

// Repeats each leading row T times: out[b * T + t, ...] = x[b, ...].
template <class X>
Tensor<X> tile_rows(const Tensor<X>& x, int T) {
  Shape s = x.shape();
  const std::int64_t B = s[0];
  std::int64_t row = 1;
  for (std::size_t i = 1; i < s.size(); ++i) row *= s[i];
  s[0] = int(B * T);
  Tensor<X> out(s);
  for (std::int64_t b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      std::memcpy(out.data() + (b * T + t) * row, x.data() + b * row,
                  static_cast<std::size_t>(row) * sizeof(X));
  return out;
}

}  // namespace detail

// Tokenizes recorded episodes exactly like the live observation path: robot
// pose features always, particle position features only for the assignment
// task. The rng drives occupancy query sampling and is untouched otherwise.
template <class S>
Batch<S> make_batch(const std::vector<EpisodeRecord>& episodes, Task task, int d_o,
                    int occ_queries, Rng& rng) {
  if (episodes.empty()) throw ValueError("make_batch: empty episode set");
  const int B = int(episodes.size());
  const int T = int(episodes[0].steps.size());
  if (T == 0) throw ValueError("make_batch: episode with no steps");
  int Np = 1, Ne = 1;
  for (const EpisodeRecord& ep : episodes) {
    if (int(ep.steps.size()) != T)
      throw ValueError("make_batch: episodes disagree on step count");
    Np = std::max(Np, ep.n_robots);
    if (task == Task::assignment) Ne = std::max(Ne, ep.n_targets);
  }
  if (task == Task::hidden_target) Ne = 1;

  Batch<S> out;
  out.obs.p_tokens = Tensor<S>::zeros({B, T, Np, d_o});
  out.obs.p_valid = Tensor<std::uint8_t>::zeros({B, T, Np});
  out.obs.e_tokens = Tensor<S>::zeros({B, T, Ne, d_o});
  out.obs.e_valid = Tensor<std::uint8_t>::zeros({B, T, Ne});
  if (task == Task::assignment) {
    out.labels = Tensor<int>::zeros({B, T, Np});
    out.agent_valid = Tensor<std::uint8_t>::zeros({B, Np});
    out.target_valid = Tensor<std::uint8_t>::zeros({B, Ne + 1});
  } else {
    if (occ_queries < 1) throw ValueError("make_batch: occ_queries must be positive");
    out.occ_queries = Tensor<S>::zeros({B, T, occ_queries, d_o});
    out.occ_labels = Tensor<S>::zeros({B, T, occ_queries});
  }

  std::vector<double> feat;
  for (int b = 0; b < B; ++b) {
    const EpisodeRecord& ep = episodes[b];
    const double arena = ep.config.arena;
    const int gh = ep.config.grid_h, gw = ep.config.grid_w;
    for (int t = 0; t < T; ++t) {
      const StepRecord& st = ep.steps[size_t(t)];
      for (int i = 0; i < ep.n_robots; ++i) {
        const auto& r = st.robots[size_t(i)];
        feat = featurize(r[0], r[1], r[2], arena, d_o);
        S* row = out.obs.p_tokens.data() + ((std::int64_t(b) * T + t) * Np + i) * d_o;
        for (int f = 0; f < d_o; ++f) row[f] = S(feat[size_t(f)]);
        out.obs.p_valid[(std::int64_t(b) * T + t) * Np + i] = 1;
        if (task == Task::assignment)
          out.labels[(std::int64_t(b) * T + t) * Np + i] = st.assignment[size_t(i)];
      }
      if (task == Task::assignment) {
        for (int j = 0; j < ep.n_targets; ++j) {
          const auto& p = st.particles[size_t(j)];
          feat = featurize(p[0], p[1], 0.0, arena, d_o);
          S* row = out.obs.e_tokens.data() + ((std::int64_t(b) * T + t) * Ne + j) * d_o;
          for (int f = 0; f < d_o; ++f) row[f] = S(feat[size_t(f)]);
          out.obs.e_valid[(std::int64_t(b) * T + t) * Ne + j] = 1;
        }
      } else {
        for (int q = 0; q < occ_queries; ++q) {
          const std::int64_t cell = rng.uniform_int(std::int64_t(gh) * gw);
          const int ci = int(cell / gw), cj = int(cell % gw);
          const double x = -arena / 2 + (cj + 0.5) * arena / gw;
          const double y = -arena / 2 + (ci + 0.5) * arena / gh;
          feat = featurize(x, y, 0.0, arena, d_o);
          S* row =
              out.occ_queries.data() + ((std::int64_t(b) * T + t) * occ_queries + q) * d_o;
          for (int f = 0; f < d_o; ++f) row[f] = S(feat[size_t(f)]);
          out.occ_labels[(std::int64_t(b) * T + t) * occ_queries + q] =
              st.occupancy[size_t(cell)] ? S(1) : S(0);
        }
      }
    }
    if (task == Task::assignment) {
      for (int i = 0; i < ep.n_robots; ++i) out.agent_valid[std::int64_t(b) * Np + i] = 1;
      for (int j = 0; j < ep.n_targets; ++j)
        out.target_valid[std::int64_t(b) * (Ne + 1) + j] = 1;
    }
  }
  out.obs.validate();
  return out;
}

// Encode the whole batch and apply the task head once over [B * T] items.
// Assignment returns logits [B * T, A, M + 1]; hidden-target returns
// occupancy logits [B * T, nq].
template <class S>
Var<S> model_logits(Graph<S>& g, const TaskModel<S>& m, const Batch<S>& batch) {
  const SeqObs<S>& obs = batch.obs;
  const int B = int(obs.batch()), T = int(obs.steps());
  Var<S> lat = m.encoder->forward(g, obs);  // [B, T, n_l, d_l]
  const int n_l = int(lat->value.dim(2)), d_l = int(lat->value.dim(3));
  Var<S> lat_f = reshape(lat, {B * T, n_l, d_l});
  if (m.task == Task::assignment) {
    TokenSet<S> agents{detail::fold_bt(obs.p_tokens),
                       detail::fold_bt(obs.p_valid), SourceId::player};
    TokenSet<S> targets{detail::fold_bt(obs.e_tokens),
                        detail::fold_bt(obs.e_valid), SourceId::enemy};
    return m.assign(g, agents, targets, lat_f);
  }
  return m.occ(g, detail::fold_bt(batch.occ_queries), lat_f);
}

template <class S>
Var<S> model_loss(Graph<S>& g, const TaskModel<S>& m, const Batch<S>& batch) {
  const int T = int(batch.obs.steps());
  Var<S> logits = model_logits(g, m, batch);
  if (m.task == Task::assignment)
    return assignment_nll(g, logits, detail::tile_rows(batch.target_valid, T),
                          detail::tile_rows(batch.agent_valid, T),
                          detail::fold_bt(batch.labels));
  return focal_loss(g, logits, detail::fold_bt(batch.occ_labels));
}

struct EvalSummary {
  std::vector<MetricRow> per_step;  // one row per sim timestep
  MetricRow mean;
};

// Metrics over recorded episodes, one row per sim timestep pooled across
// episodes: top-1/top-5 over valid agents plus the grouped NLL for the
// assignment task; ROC-AUC, probability MSE, and focal loss over sampled
// occupancy cells for the hidden-target task. Query sampling is seeded so
// repeated evaluations see the same cells. A timestep whose pooled occupancy
// labels are single-class reports the uninformative AUC 0.5.
template <class S>
EvalSummary evaluate(const TaskModel<S>& m, const std::vector<EpisodeRecord>& episodes,
                     int occ_queries, std::uint64_t query_seed) {
  if (episodes.empty()) throw ValueError("evaluate: empty episode set");
  Rng qrng(query_seed);
  const Batch<S> batch =
      make_batch<S>(episodes, m.task, m.encoder->config().d_o, occ_queries, qrng);
  Graph<S> g(false);
  const Tensor<S> logits = model_logits(g, m, batch)->value;

  const int B = int(batch.obs.batch()), T = int(batch.obs.steps());
  EvalSummary out;
  out.per_step.reserve(size_t(T));
  for (int t = 0; t < T; ++t) {
    MetricRow row;
    row.step = t;
    if (m.task == Task::assignment) {
      const int A = int(logits.dim(1)), M = int(logits.dim(2));
      Tensor<S> lt({B, A, M});
      Tensor<int> labels_t({B, A});
      for (int b = 0; b < B; ++b) {
        std::memcpy(lt.data() + std::int64_t(b) * A * M,
                    logits.data() + (std::int64_t(b) * T + t) * A * M,
                    static_cast<std::size_t>(A) * M * sizeof(S));
        std::memcpy(labels_t.data() + std::int64_t(b) * A,
                    batch.labels.data() + (std::int64_t(b) * T + t) * A,
                    static_cast<std::size_t>(A) * sizeof(int));
      }
      row.top1 = assignment_topk(lt, labels_t, batch.target_valid, batch.agent_valid, 1);
      row.top5 = assignment_topk(lt, labels_t, batch.target_valid, batch.agent_valid, 5);
      Graph<S> gs(false);
      row.loss = double(
          assignment_nll(gs, gs.constant(lt), batch.target_valid, batch.agent_valid,
                         labels_t)
              ->value[0]);
    } else {
      const int nq = int(logits.dim(1));
      Tensor<S> lt({B, nq});
      Tensor<S> lab({B, nq});
      std::vector<double> scores(size_t(B) * nq);
      std::vector<std::uint8_t> labels01(size_t(B) * nq);
      bool has_pos = false, has_neg = false;
      double mse = 0;
      for (int b = 0; b < B; ++b)
        for (int q = 0; q < nq; ++q) {
          const std::int64_t i = std::int64_t(b) * nq + q;
          const double z = double(logits[(std::int64_t(b) * T + t) * nq + q]);
          const double y = double(batch.occ_labels[(std::int64_t(b) * T + t) * nq + q]);
          lt[i] = S(z);
          lab[i] = S(y);
          scores[size_t(i)] = z;
          labels01[size_t(i)] = y > 0.5 ? 1 : 0;
          (y > 0.5 ? has_pos : has_neg) = true;
          const double p = 1.0 / (1.0 + std::exp(-z));
          mse += (p - y) * (p - y);
        }
      row.mse = mse / double(std::int64_t(B) * nq);
      row.auc = has_pos && has_neg ? roc_auc(scores, labels01) : 0.5;
      Graph<S> gs(false);
      row.loss = double(focal_loss(gs, gs.constant(lt), lab)->value[0]);
    }
    out.per_step.push_back(row);
  }
  MetricRow& mean = out.mean;
  for (const MetricRow& row : out.per_step) {
    mean.loss += row.loss;
    mean.top1 += row.top1;
    mean.top5 += row.top5;
    mean.auc += row.auc;
    mean.mse += row.mse;
  }
  mean.loss /= T;
  mean.top1 /= T;
  mean.top5 /= T;
  mean.auc /= T;
  mean.mse /= T;
  return out;
}

}  // namespace scanenc
