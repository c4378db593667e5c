#pragma once

// Training, evaluation, and throughput benchmarking over the simulator.
// Episodes are generated online: iteration i consumes episodes seeded by
// mix_seed(data_seed, i * batch + j), so a resumed run sees exactly the data
// stream the original would have seen, with no RNG state in the checkpoint.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "scanenc/config.hpp"
#include "scanenc/model.hpp"
#include "scanenc/optim.hpp"
#include "scanenc/params.hpp"

namespace scanenc {

struct TrainConfig {
  EncoderConfig encoder;
  SimConfig sim;
  Task task = Task::assignment;
  int batch_size = 16;
  int iterations = 5000;
  double lr = 1e-4;
  double lr_power = 0.9;
  double grad_clip = 0.1;
  int eval_every = 500;      // metric rows every this many iterations
  int eval_episodes = 16;    // fixed held-out episode count per evaluation
  int occ_queries = 256;     // sampled occupancy cells per step, training
  int eval_occ_queries = 256;
  int workers = 0;           // episode-generation threads; 0 runs inline
  std::uint64_t seed = 0;
  std::string precision = "f64";  // f32 | f64

  void validate() const {
    encoder.validate();
    sim.validate();
    if (batch_size < 1 || iterations < 1) throw ValueError("train: positive counts required");
    if (!(grad_clip > 0)) throw ValueError("train: grad_clip must be positive");
    if (!(lr > 0)) throw ValueError("train: lr must be positive");
    if (eval_every < 1 || eval_episodes < 1) throw ValueError("train: eval cadence invalid");
    if (occ_queries < 1 || eval_occ_queries < 1)
      throw ValueError("train: occupancy query counts must be positive");
    if (workers < 0) throw ValueError("train: workers must be >= 0");
    if (precision != "f32" && precision != "f64")
      throw ValueError("train: precision must be f32 or f64");
    if (encoder.kind == SeqKind::st_transformer && sim.episode_len > encoder.max_timesteps)
      throw ValueError("train: episode_len exceeds the encoder's time embedding range");
  }
};

// Flat key=value sections: train.*, encoder.*, sim.*. Unknown keys are
// rejected by the caller via KvConfig::require_all_read.
inline TrainConfig train_config_from_kv(const KvConfig& kv) {
  TrainConfig c;
  c.task = task_from_string(kv.get_str("train.task", task_name(c.task)));
  c.batch_size = int(kv.get_int("train.batch_size", c.batch_size));
  c.iterations = int(kv.get_int("train.iterations", c.iterations));
  c.lr = kv.get_f64("train.lr", c.lr);
  c.lr_power = kv.get_f64("train.lr_power", c.lr_power);
  c.grad_clip = kv.get_f64("train.grad_clip", c.grad_clip);
  c.eval_every = int(kv.get_int("train.eval_every", c.eval_every));
  c.eval_episodes = int(kv.get_int("train.eval_episodes", c.eval_episodes));
  c.occ_queries = int(kv.get_int("train.occ_queries", c.occ_queries));
  c.eval_occ_queries = int(kv.get_int("train.eval_occ_queries", c.eval_occ_queries));
  c.workers = int(kv.get_int("train.workers", c.workers));
  c.seed = kv.get_u64("train.seed", c.seed);
  c.precision = kv.get_str("train.precision", c.precision);

  EncoderConfig& e = c.encoder;
  e.kind = seq_kind_from_string(kv.get_str("encoder.kind", seq_kind_name(e.kind)));
  e.n_l = int(kv.get_int("encoder.n_l", e.n_l));
  e.d_l = int(kv.get_int("encoder.d_l", e.d_l));
  e.d_o = int(kv.get_int("encoder.d_o", e.d_o));
  e.n_heads = int(kv.get_int("encoder.n_heads", e.n_heads));
  e.ff_mult = int(kv.get_int("encoder.ff_mult", e.ff_mult));
  e.cycles = int(kv.get_int("encoder.cycles", e.cycles));
  e.gamma = kv.get_f64("encoder.gamma", e.gamma);
  e.skip_self_attn = kv.get_bool("encoder.skip_self_attn", e.skip_self_attn);
  e.sample_input_once = kv.get_bool("encoder.sample_input_once", e.sample_input_once);
  e.no_scan = kv.get_bool("encoder.no_scan", e.no_scan);
  e.combine = combine_mode_from_string(
      kv.get_str("encoder.combine", e.combine == CombineMode::fused        ? "fused"
                                    : e.combine == CombineMode::piecewise ? "piecewise"
                                                                          : "sequential"));
  e.per_step = enc_kind_from_string(
      kv.get_str("encoder.per_step", e.per_step == EncKind::bert ? "bert" : "xattn"));
  e.per_step_layers = int(kv.get_int("encoder.per_step_layers", e.per_step_layers));
  e.temporal_layers = int(kv.get_int("encoder.temporal_layers", e.temporal_layers));
  e.max_timesteps = int(kv.get_int("encoder.max_timesteps", e.max_timesteps));
  e.init = init_kind_from_string(
      kv.get_str("encoder.init", e.init == InitKind::learned ? "learned" : "zeros"));

  SimConfig& s = c.sim;
  s.arena = kv.get_f64("sim.arena", s.arena);
  s.dt = kv.get_f64("sim.dt", s.dt);
  s.max_speed = kv.get_f64("sim.max_speed", s.max_speed);
  s.n_robots_min = int(kv.get_int("sim.n_robots_min", s.n_robots_min));
  s.n_robots_max = int(kv.get_int("sim.n_robots_max", s.n_robots_max));
  s.n_targets_min = int(kv.get_int("sim.n_targets_min", s.n_targets_min));
  s.n_targets_max = int(kv.get_int("sim.n_targets_max", s.n_targets_max));
  s.skip_steps = int(kv.get_int("sim.skip_steps", s.skip_steps));
  s.episode_len = int(kv.get_int("sim.episode_len", s.episode_len));
  s.reach_radius = kv.get_f64("sim.reach_radius", s.reach_radius);
  s.collision_radius = kv.get_f64("sim.collision_radius", s.collision_radius);
  s.wheel_base = kv.get_f64("sim.wheel_base", s.wheel_base);
  s.particle_speed_std = kv.get_f64("sim.particle_speed_std", s.particle_speed_std);
  s.particle_speed_clamp = kv.get_f64("sim.particle_speed_clamp", s.particle_speed_clamp);
  s.collision_penalty = kv.get_f64("sim.collision_penalty", s.collision_penalty);
  s.control_grid = int(kv.get_int("sim.control_grid", s.control_grid));
  s.horizon_steps = int(kv.get_int("sim.horizon_steps", s.horizon_steps));
  s.grid_h = int(kv.get_int("sim.grid_h", s.grid_h));
  s.grid_w = int(kv.get_int("sim.grid_w", s.grid_w));
  s.dilation_cells = kv.get_f64("sim.dilation_cells", s.dilation_cells);
  c.validate();
  return c;
}

// Derived seed streams. Every stream is a pure function of (seed, index), so
// any prefix of the run can be replayed from the checkpoint's step counter.
namespace seeds {
inline std::uint64_t model(std::uint64_t s) { return mix_seed(s, 1); }
inline std::uint64_t data(std::uint64_t s) { return mix_seed(s, 2); }
inline std::uint64_t train_query(std::uint64_t s, std::int64_t iter) {
  return mix_seed(mix_seed(s, 3), std::uint64_t(iter));
}
inline std::uint64_t eval_data(std::uint64_t s) { return mix_seed(s, 4); }
inline std::uint64_t eval_query(std::uint64_t s) { return mix_seed(s, 5); }
}  // namespace seeds

namespace detail {

// Online episode source. Worker threads claim iteration indices and fill a
// bounded reorder buffer; next() hands batches out strictly in iteration
// order. Zero workers generates inline. Results are identical either way
// because every episode is a pure function of its derived seed.
class EpisodeStream {
 public:
  EpisodeStream(const SimConfig& base, std::uint64_t data_seed, int batch,
                std::int64_t begin, std::int64_t end, int workers, int capacity = 4)
      : base_(base), seed_(data_seed), batch_(batch), next_out_(begin),
        next_claim_(begin), end_(end), capacity_(capacity) {
    const int n = int(std::min<std::int64_t>(workers, std::max<std::int64_t>(end - begin, 0)));
    for (int w = 0; w < n; ++w) threads_.emplace_back([this] { work(); });
  }

  EpisodeStream(const EpisodeStream&) = delete;
  EpisodeStream& operator=(const EpisodeStream&) = delete;

  ~EpisodeStream() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    space_cv_.notify_all();
    for (std::thread& t : threads_) t.join();
  }

  std::vector<EpisodeRecord> batch_for(std::int64_t iter) const {
    std::vector<EpisodeRecord> eps;
    eps.reserve(size_t(batch_));
    for (int j = 0; j < batch_; ++j) {
      SimConfig c = base_;
      c.seed = mix_seed(seed_, std::uint64_t(iter) * std::uint64_t(batch_) + std::uint64_t(j));
      eps.push_back(rollout(c));
    }
    return eps;
  }

  std::vector<EpisodeRecord> next() {
    if (threads_.empty()) return batch_for(next_out_++);
    std::unique_lock<std::mutex> lk(mu_);
    const std::int64_t want = next_out_++;
    space_cv_.notify_all();
    ready_cv_.wait(lk, [&] { return ready_.count(want) != 0; });
    std::vector<EpisodeRecord> out = std::move(ready_[want]);
    ready_.erase(want);
    return out;
  }

 private:
  void work() {
    for (;;) {
      std::int64_t iter;
      {
        std::unique_lock<std::mutex> lk(mu_);
        space_cv_.wait(lk, [&] {
          return stop_ || (next_claim_ < end_ && next_claim_ < next_out_ + capacity_);
        });
        if (stop_ || next_claim_ >= end_) return;
        iter = next_claim_++;
      }
      std::vector<EpisodeRecord> eps = batch_for(iter);
      {
        std::lock_guard<std::mutex> lk(mu_);
        ready_[iter] = std::move(eps);
      }
      ready_cv_.notify_all();
    }
  }

  SimConfig base_;
  std::uint64_t seed_;
  int batch_;
  std::int64_t next_out_, next_claim_, end_;
  int capacity_;
  bool stop_ = false;
  std::map<std::int64_t, std::vector<EpisodeRecord>> ready_;
  std::mutex mu_;
  std::condition_variable ready_cv_, space_cv_;
  std::vector<std::thread> threads_;
};

inline double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace detail

struct TrainResult {
  std::vector<double> loss_history;     // one entry per optimizer step taken
  std::vector<MetricRow> metric_rows;   // cadence rows, means over timesteps
  EvalSummary final_eval;               // per-timestep rows at the last eval
  std::int64_t total_params = 0;
  std::int64_t steps_done = 0;
  double wall_s = 0;
  double peak_mb = 0;
};

// Checkpoint layout: "p.<name>" parameter records plus the optimizer's own
// records, name-sorted in one file.
template <class S>
void save_training_checkpoint(const std::string& path, const ParamStore<S>& params,
                              const AdamW<S>& opt) {
  std::vector<std::pair<std::string, const Tensor<S>*>> recs;
  for (const auto& [name, p] : params) recs.emplace_back("p." + name, &p.value);
  for (auto& rec : opt.state_records()) recs.push_back(rec);
  std::sort(recs.begin(), recs.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  write_checkpoint<S>(path, recs);
}

// Restores parameters and optimizer state; returns the completed step count.
template <class S>
std::int64_t load_training_checkpoint(const std::string& path, ParamStore<S>& params,
                                      AdamW<S>& opt) {
  std::vector<std::pair<std::string, Tensor<S>>> orec;
  std::size_t restored = 0;
  for (auto& [name, t] : read_checkpoint<S>(path)) {
    if (name.rfind("p.", 0) == 0) {
      std::string pname = name.substr(2);
      Parameter<S>& p = params.at(pname);
      if (p.value.shape() != t.shape())
        throw ShapeError("checkpoint shape mismatch for " + pname);
      p.value = std::move(t);
      ++restored;
    } else {
      orec.emplace_back(std::move(name), std::move(t));
    }
  }
  if (restored != params.count())
    throw ValueError("checkpoint covers " + std::to_string(restored) + " of " +
                     std::to_string(params.count()) + " parameters: " + path);
  opt.load_state(std::move(orec));
  return opt.steps_taken();
}

// Runs (or resumes) one training job. Evaluation uses a fixed held-out
// episode set and fixed query cells so cadence rows are comparable across
// the run. A non-finite loss aborts with the iteration and learning rate in
// the message. Metric rows go to `csv` when non-null.
template <class S>
TrainResult train_encoder(const TrainConfig& cfg, const std::string& resume_ckpt = "",
                          const std::string& save_ckpt = "", MetricsWriter* csv = nullptr,
                          bool log = false) {
  cfg.validate();
  const double t0 = detail::now_s();
  alloc_stats::reset_peak();

  TaskModel<S> model(cfg.encoder, cfg.task, cfg.sim.arena, seeds::model(cfg.seed));
  AdamW<S> opt;
  std::int64_t start = 0;
  if (!resume_ckpt.empty())
    start = load_training_checkpoint<S>(resume_ckpt, model.params, opt);
  if (start > cfg.iterations)
    throw ValueError("train: checkpoint is past the configured iteration count");

  TrainResult res;
  res.total_params = model.params.total_params();
  if (log)
    std::fprintf(stderr, "train: %s task=%s params=%lld iters=%lld..%d batch=%d\n",
                 seq_kind_name(cfg.encoder.kind), task_name(cfg.task),
                 (long long)res.total_params, (long long)start, cfg.iterations,
                 cfg.batch_size);

  std::vector<EpisodeRecord> eval_eps;
  eval_eps.reserve(size_t(cfg.eval_episodes));
  for (int e = 0; e < cfg.eval_episodes; ++e) {
    SimConfig c = cfg.sim;
    c.seed = mix_seed(seeds::eval_data(cfg.seed), std::uint64_t(e));
    eval_eps.push_back(rollout(c));
  }

  detail::EpisodeStream stream(cfg.sim, seeds::data(cfg.seed), cfg.batch_size, start,
                               cfg.iterations, cfg.workers);
  for (std::int64_t iter = start; iter < cfg.iterations; ++iter) {
    std::vector<EpisodeRecord> eps = stream.next();
    Rng qrng(seeds::train_query(cfg.seed, iter));
    Batch<S> batch = make_batch<S>(eps, cfg.task, cfg.encoder.d_o, cfg.occ_queries, qrng);

    Graph<S> g;
    Var<S> loss = model_loss(g, model, batch);
    const double lv = double(loss->value[0]);
    if (!std::isfinite(lv))
      throw ValueError("train: non-finite loss " + std::to_string(lv) + " at iteration " +
                       std::to_string(iter) + " (lr " +
                       std::to_string(poly_lr(iter, cfg.iterations, cfg.lr, cfg.lr_power)) +
                       ", seed " + std::to_string(cfg.seed) + ")");
    res.loss_history.push_back(lv);

    model.params.zero_grad();
    g.backward(loss);
    clip_gradients(model.params, cfg.grad_clip);
    opt.step(model.params, poly_lr(iter, cfg.iterations, cfg.lr, cfg.lr_power));
    ++res.steps_done;

    if ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.iterations) {
      EvalSummary ev =
          evaluate(model, eval_eps, cfg.eval_occ_queries, seeds::eval_query(cfg.seed));
      MetricRow row = ev.mean;
      row.step = iter + 1;
      row.wall_s = detail::now_s() - t0;
      row.peak_mb = double(alloc_stats::peak_bytes()) / (1024.0 * 1024.0);
      res.metric_rows.push_back(row);
      if (csv) csv->write(row);
      if (log)
        std::fprintf(stderr,
                     "  step %6lld  loss %.4f  top1 %.3f  top5 %.3f  auc %.3f  mse %.4f  "
                     "%.1fs\n",
                     (long long)row.step, row.loss, row.top1, row.top5, row.auc, row.mse,
                     row.wall_s);
      if (iter + 1 == cfg.iterations) res.final_eval = std::move(ev);
    }
  }

  if (!save_ckpt.empty()) save_training_checkpoint<S>(save_ckpt, model.params, opt);
  res.wall_s = detail::now_s() - t0;
  res.peak_mb = double(alloc_stats::peak_bytes()) / (1024.0 * 1024.0);
  return res;
}

// Precision dispatch for config-driven callers.
inline TrainResult train_run(const TrainConfig& cfg, const std::string& resume_ckpt = "",
                             const std::string& save_ckpt = "",
                             MetricsWriter* csv = nullptr, bool log = false) {
  if (cfg.precision == "f32")
    return train_encoder<float>(cfg, resume_ckpt, save_ckpt, csv, log);
  return train_encoder<double>(cfg, resume_ckpt, save_ckpt, csv, log);
}

struct BenchResult {
  double it_per_s = 0;
  double peak_mb = 0;
  std::int64_t total_params = 0;
};

// Times full optimizer iterations (tokenization, forward, backward, clip,
// update) over one fixed pre-generated episode batch, so encoder variants
// see identical data and the rollout cost stays out of the timed region.
template <class S>
BenchResult bench_train(const TrainConfig& cfg, int warmup = 2, int timed = 8) {
  cfg.validate();
  TaskModel<S> model(cfg.encoder, cfg.task, cfg.sim.arena, seeds::model(cfg.seed));
  detail::EpisodeStream stream(cfg.sim, seeds::data(cfg.seed), cfg.batch_size, 0, 1, 0);
  const std::vector<EpisodeRecord> eps = stream.batch_for(0);
  AdamW<S> opt;
  BenchResult res;
  res.total_params = model.params.total_params();
  double t0 = 0;
  for (int i = 0; i < warmup + timed; ++i) {
    if (i == warmup) {
      alloc_stats::reset_peak();
      t0 = detail::now_s();
    }
    Rng qrng(seeds::train_query(cfg.seed, i));
    Batch<S> batch = make_batch<S>(eps, cfg.task, cfg.encoder.d_o, cfg.occ_queries, qrng);
    Graph<S> g;
    Var<S> loss = model_loss(g, model, batch);
    model.params.zero_grad();
    g.backward(loss);
    clip_gradients(model.params, cfg.grad_clip);
    opt.step(model.params, poly_lr(std::min<std::int64_t>(i, cfg.iterations - 1),
                                   cfg.iterations, cfg.lr, cfg.lr_power));
  }
  res.it_per_s = timed / (detail::now_s() - t0);
  res.peak_mb = double(alloc_stats::peak_bytes()) / (1024.0 * 1024.0);
  return res;
}

// Per-step wall seconds of the incremental inference path over one episode
// stream of `total` steps, batch 1. Element t is the cost of consuming step
// t given t prior steps of history; medians over `repeats` passes tame
// scheduler noise. Observation counts are fixed so the trend isolates the
// history dependence.
template <class S>
std::vector<double> infer_step_seconds(const EncoderConfig& enc, int total,
                                       int repeats = 3, std::uint64_t seed = 0,
                                       int n_tokens = 8) {
  EncoderConfig cfg = enc;
  cfg.max_timesteps = std::max(cfg.max_timesteps, total);
  cfg.validate();
  ParamStore<S> ps;
  Rng rng(seeds::model(seed));
  std::unique_ptr<SeqEncoder<S>> model = make_encoder<S>(ps, "enc", cfg, rng);

  Rng drng(seeds::data(seed));
  std::vector<std::vector<double>> samples(static_cast<std::size_t>(total));
  for (int r = 0; r < repeats; ++r) {
    std::unique_ptr<EncState<S>> state = model->make_state(1);
    for (int t = 0; t < total; ++t) {
      TokenSet<S> obs_p{random_normal<S>(drng, {1, n_tokens, cfg.d_o}),
                        Tensor<std::uint8_t>::full({1, n_tokens}, 1), SourceId::player};
      TokenSet<S> obs_e{random_normal<S>(drng, {1, n_tokens, cfg.d_o}),
                        Tensor<std::uint8_t>::full({1, n_tokens}, 1), SourceId::enemy};
      Graph<S> g(false);
      const double s0 = detail::now_s();
      model->step(g, *state, obs_p, obs_e);
      samples[size_t(t)].push_back(detail::now_s() - s0);
    }
  }
  std::vector<double> med(static_cast<std::size_t>(total));
  for (int t = 0; t < total; ++t) {
    std::vector<double>& v = samples[size_t(t)];
    std::sort(v.begin(), v.end());
    med[size_t(t)] = v[v.size() / 2];
  }
  return med;
}

// Incremental-path throughput: steps consumed per second at batch 1 over a
// `total`-step horizon, including per-step tokenization.
template <class S>
BenchResult bench_infer(const TrainConfig& cfg, int total = 64) {
  cfg.validate();
  TaskModel<S> model(cfg.encoder, cfg.task, cfg.sim.arena, seeds::model(cfg.seed));
  SimConfig sc = cfg.sim;
  sc.seed = mix_seed(seeds::data(cfg.seed), 0);
  sc.episode_len = total;
  const EpisodeRecord ep = rollout(sc);
  const std::vector<EpisodeRecord> one{ep};
  Rng qrng(seeds::train_query(cfg.seed, 0));
  Batch<S> batch = make_batch<S>(one, cfg.task, cfg.encoder.d_o, cfg.occ_queries, qrng);

  BenchResult res;
  res.total_params = model.params.total_params();
  alloc_stats::reset_peak();
  std::unique_ptr<EncState<S>> state = model.encoder->make_state(1);
  const double t0 = detail::now_s();
  for (int t = 0; t < int(batch.obs.steps()); ++t) {
    Graph<S> g(false);
    model.encoder->step(g, *state, batch.obs.step_p(t), batch.obs.step_e(t));
  }
  res.it_per_s = batch.obs.steps() / (detail::now_s() - t0);
  res.peak_mb = double(alloc_stats::peak_bytes()) / (1024.0 * 1024.0);
  return res;
}

}  // namespace scanenc
