#pragma once

// Sequence encoders: one latent state [n_l, d_l] per timestep from a sequence
// of variably sized observation sets. Three families share one interface:
//
//   scan            cross-attention cycle blocks re-query the observation and
//                   a discounted inclusive scan over time accumulates history;
//                   incremental stepping is O(1) per step.
//   st_transformer  per-step set encoder, learned absolute time embedding,
//                   then joint attention over all step chunks with a
//                   chunk-causal mask; incremental stepping caches projected
//                   keys/values and grows O(t).
//   rnn/gru/lstm    per-step set encoder feeding one recurrent cell per latent
//                   row (weights shared across rows), learned or zero start.
//
// forward() builds the training graph over a whole padded sequence batch;
// step() advances an EncState by one observation and is an inference path
// (its output does not backpropagate into earlier steps).

#include <memory>
#include <utility>

#include "scanenc/attention.hpp"
#include "scanenc/dscan.hpp"

namespace scanenc {

// Whole-sequence observation batch, padded to fixed extents per source.
// Tokens are [B, T, N, d_o] with validity [B, T, N]; a row's tokens are
// arbitrary wherever valid is 0.
template <class S>
struct SeqObs {
  Tensor<S> p_tokens;
  Tensor<std::uint8_t> p_valid;
  Tensor<S> e_tokens;
  Tensor<std::uint8_t> e_valid;

  std::int64_t batch() const { return p_tokens.dim(0); }
  std::int64_t steps() const { return p_tokens.dim(1); }
  std::int64_t feat() const { return p_tokens.dim(3); }

  void validate() const {
    if (p_tokens.rank() != 4 || e_tokens.rank() != 4)
      throw ShapeError("SeqObs tokens must be [B, T, N, d_o]");
    if (e_tokens.dim(0) != batch() || e_tokens.dim(1) != steps() ||
        e_tokens.dim(3) != feat())
      throw ShapeError("SeqObs sources disagree on [B, T, ., d_o]: " +
                       shape_str(p_tokens.shape()) + " vs " + shape_str(e_tokens.shape()));
    auto check_valid = [](const Tensor<std::uint8_t>& v, const Tensor<S>& t) {
      if (v.rank() != 3 || v.dim(0) != t.dim(0) || v.dim(1) != t.dim(1) ||
          v.dim(2) != t.dim(2))
        throw ShapeError("SeqObs valid mask must be [B, T, N]");
    };
    check_valid(p_valid, p_tokens);
    check_valid(e_valid, e_tokens);
  }

  TokenSet<S> step_p(int t) const { return step_of(p_tokens, p_valid, t, SourceId::player); }
  TokenSet<S> step_e(int t) const { return step_of(e_tokens, e_valid, t, SourceId::enemy); }

 private:
  static TokenSet<S> step_of(const Tensor<S>& tok, const Tensor<std::uint8_t>& val, int t,
                             SourceId id) {
    const std::int64_t B = tok.dim(0), T = tok.dim(1), N = tok.dim(2), D = tok.dim(3);
    TokenSet<S> out;
    out.tokens = Tensor<S>({int(B), int(N), int(D)});
    out.valid = Tensor<std::uint8_t>({int(B), int(N)});
    for (std::int64_t b = 0; b < B; ++b) {
      std::memcpy(out.tokens.data() + b * N * D, tok.data() + (b * T + t) * N * D,
                  static_cast<size_t>(N * D) * sizeof(S));
      std::memcpy(out.valid.data() + b * N, val.data() + (b * T + t) * N,
                  static_cast<size_t>(N));
    }
    out.source_id = id;
    return out;
  }
};

enum class SeqKind { scan, st_transformer, rnn, gru, lstm };

inline SeqKind seq_kind_from_string(const std::string& s) {
  if (s == "scan") return SeqKind::scan;
  if (s == "st_transformer") return SeqKind::st_transformer;
  if (s == "rnn") return SeqKind::rnn;
  if (s == "gru") return SeqKind::gru;
  if (s == "lstm") return SeqKind::lstm;
  throw ValueError("unknown sequence encoder kind: " + s);
}

inline const char* seq_kind_name(SeqKind k) {
  switch (k) {
    case SeqKind::scan: return "scan";
    case SeqKind::st_transformer: return "st_transformer";
    case SeqKind::rnn: return "rnn";
    case SeqKind::gru: return "gru";
    default: return "lstm";
  }
}

enum class InitKind { learned, zeros };

inline InitKind init_kind_from_string(const std::string& s) {
  if (s == "learned") return InitKind::learned;
  if (s == "zeros") return InitKind::zeros;
  throw ValueError("unknown recurrent init kind: " + s);
}

struct EncoderConfig {
  SeqKind kind = SeqKind::scan;
  int n_l = 8;
  int d_l = 128;
  int d_o = 48;
  int n_heads = 4;
  int ff_mult = 4;

  // scan
  int cycles = 4;
  double gamma = 2.0;
  bool skip_self_attn = false;    // drop the latent self-attention sublayer
  bool sample_input_once = false;  // cycles past the first re-process latents only
  bool no_scan = false;            // ablation: no temporal accumulation at all

  // per-step set encoder (st_transformer and the recurrent family)
  CombineMode combine = CombineMode::fused;
  EncKind per_step = EncKind::bert;
  int per_step_layers = 2;

  // st_transformer
  int temporal_layers = 4;
  int max_timesteps = 64;

  // recurrent family
  InitKind init = InitKind::learned;

  void validate() const {
    if (cycles < 1) throw ValueError("encoder cycles must be >= 1");
    if (gamma < 1.0) throw ValueError("encoder gamma must be >= 1");
    if (n_l < 1 || d_l < 1 || d_o < 1) throw ValueError("encoder dims must be positive");
    if (n_heads < 1 || d_l % n_heads != 0)
      throw ValueError("latent width must divide into heads");
    if (skip_self_attn && sample_input_once)
      throw ValueError("skip_self_attn and sample_input_once are mutually exclusive");
    if (per_step_layers < 1 || temporal_layers < 1 || max_timesteps < 1)
      throw ValueError("encoder layer counts must be positive");
    if (combine == CombineMode::piecewise && n_l % 2 != 0)
      throw ValueError("piecewise combine requires an even latent count");
  }
};

// Recurrent carry for incremental stepping. Scan and rnn-family states are
// O(1) in the number of consumed steps; the st_transformer cache grows O(t).
template <class S>
struct EncState {
  int t = 0;  // steps consumed
  virtual ~EncState() = default;
  virtual std::int64_t byte_size() const = 0;
};

template <class S>
struct SeqEncoder {
  virtual ~SeqEncoder() = default;
  // All timestep latents, [B, T, n_l, d_l].
  virtual Var<S> forward(Graph<S>& g, const SeqObs<S>& obs) const = 0;
  virtual std::unique_ptr<EncState<S>> make_state(int batch) const = 0;
  // Consumes one step and returns its latents [B, n_l, d_l].
  virtual Var<S> step(Graph<S>& g, EncState<S>& state, const TokenSet<S>& obs_p,
                      const TokenSet<S>& obs_e) const = 0;
  virtual const EncoderConfig& config() const = 0;
};

namespace detail {

// Folds [B, T, ...] leading axes into one batch axis without copying.
template <class S>
Tensor<S> fold_bt(const Tensor<S>& x) {
  Shape s = x.shape();
  Shape f{int(std::int64_t(s[0]) * s[1])};
  f.insert(f.end(), s.begin() + 2, s.end());
  return x.reshaped(std::move(f));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scan encoder
// ---------------------------------------------------------------------------

// One cycle block: cross-attend the player source, then the enemy source,
// then latent self-attention, then feed-forward; pre-norm residuals all the
// way. self_only cycles (input sampled once) keep just the latter two.
template <class S>
struct ScanCycle {
  Mha<S> cross_p, cross_e, self;
  FeedForward<S> ff;
  LayerNormM<S> lnp, lne, lns, lnf;
  bool self_only = false;
  bool has_self = true;

  void init(ParamStore<S>& ps, const std::string& name, int d, int heads, int ff_mult,
            bool self_only_, bool has_self_, Rng& rng) {
    self_only = self_only_;
    has_self = self_only || has_self_;
    if (!self_only) {
      cross_p.init(ps, name + ".xp", d, d, heads, rng);
      cross_e.init(ps, name + ".xe", d, d, heads, rng);
      lnp.init(ps, name + ".lnp", d);
      lne.init(ps, name + ".lne", d);
    }
    if (has_self) {
      self.init(ps, name + ".self", d, d, heads, rng);
      lns.init(ps, name + ".lns", d);
    }
    ff.init(ps, name + ".ff", d, ff_mult * d, rng);
    lnf.init(ps, name + ".lnf", d);
  }

  // kp/ke are embedded observations [N, n, d]; gates zero the cross sublayer
  // for items whose source is empty.
  Var<S> operator()(Graph<S>& g, Var<S> x, const Var<S>& kp,
                    const Tensor<std::uint8_t>& p_valid, const Var<S>& gate_p,
                    const Var<S>& ke, const Tensor<std::uint8_t>& e_valid,
                    const Var<S>& gate_e) const {
    if (!self_only) {
      auto cp = cross_p(g, lnp(g, x), kp, &p_valid, nullptr, bool(gate_p));
      if (gate_p) cp = mul(cp, gate_p);
      x = add(x, cp);
      auto ce = cross_e(g, lne(g, x), ke, &e_valid, nullptr, bool(gate_e));
      if (gate_e) ce = mul(ce, gate_e);
      x = add(x, ce);
    }
    if (has_self) {
      auto h = lns(g, x);
      x = add(x, self(g, h, h));
    }
    x = add(x, ff(g, lnf(g, x)));
    return x;
  }
};

template <class S>
struct ScanEncState : EncState<S> {
  std::vector<ScanState<S>> acc;  // one accumulator per cycle

  std::int64_t byte_size() const override {
    std::int64_t n = 0;
    for (const auto& a : acc) n += a.bytes();
    return n;
  }
};

template <class S>
class ScanEncoder : public SeqEncoder<S> {
 public:
  ScanEncoder(ParamStore<S>& ps, const std::string& name, const EncoderConfig& cfg,
              Rng& rng)
      : cfg_(cfg) {
    cfg_.validate();
    Tensor<S> l0({cfg_.n_l, cfg_.d_l});
    for (std::int64_t i = 0; i < l0.size(); ++i)
      l0[i] = S(rng.trunc_normal(1.0 / std::sqrt(double(cfg_.d_l))));
    l0_ = &ps.add(name + ".l0", std::move(l0));
    embed_.init(ps, name + ".embed", cfg_.d_o, cfg_.d_l, rng);
    cycles_.resize(size_t(cfg_.cycles));
    for (int c = 0; c < cfg_.cycles; ++c)
      cycles_[size_t(c)].init(ps, name + ".cyc" + std::to_string(c), cfg_.d_l,
                              cfg_.n_heads, cfg_.ff_mult,
                              cfg_.sample_input_once && c > 0, !cfg_.skip_self_attn, rng);
    out_ln_.init(ps, name + ".out_ln", cfg_.d_l);
  }

  Var<S> forward(Graph<S>& g, const SeqObs<S>& obs) const override {
    obs.validate();
    check_feat(obs.feat());
    const int B = int(obs.batch()), T = int(obs.steps());
    const int N = B * T;
    Tensor<std::uint8_t> pv = detail::fold_bt(obs.p_valid);
    Tensor<std::uint8_t> ev = detail::fold_bt(obs.e_valid);
    auto kp = embed_(g, g.constant(detail::fold_bt(obs.p_tokens)));
    auto ke = embed_(g, g.constant(detail::fold_bt(obs.e_tokens)));
    Var<S> gate_p = detail::empty_source_gate<S>(g, pv, cfg_.n_l, cfg_.d_l);
    Var<S> gate_e = detail::empty_source_gate<S>(g, ev, cfg_.n_l, cfg_.d_l);

    Var<S> q = expand_leading(g.param(*l0_), N);
    for (const auto& cycle : cycles_) {
      Var<S> x = cycle(g, q, kp, pv, gate_p, ke, ev, gate_e);
      if (!cfg_.no_scan) {
        auto by_time = reshape(x, {B, T, cfg_.n_l, cfg_.d_l});
        x = reshape(dscan(by_time, cfg_.gamma, 1), {N, cfg_.n_l, cfg_.d_l});
      }
      q = x;
    }
    return reshape(out_ln_(g, q), {B, T, cfg_.n_l, cfg_.d_l});
  }

  std::unique_ptr<EncState<S>> make_state(int batch) const override {
    auto st = std::make_unique<ScanEncState<S>>();
    if (!cfg_.no_scan)
      for (int c = 0; c < cfg_.cycles; ++c)
        st->acc.push_back(make_scan_state<S>({batch, cfg_.n_l, cfg_.d_l}, cfg_.gamma));
    return st;
  }

  Var<S> step(Graph<S>& g, EncState<S>& state, const TokenSet<S>& obs_p,
              const TokenSet<S>& obs_e) const override {
    auto& st = dynamic_cast<ScanEncState<S>&>(state);
    obs_p.validate();
    obs_e.validate();
    check_feat(obs_p.feat());
    const int B = int(obs_p.batch());
    auto kp = embed_(g, g.constant(obs_p.tokens));
    auto ke = embed_(g, g.constant(obs_e.tokens));
    Var<S> gate_p = detail::empty_source_gate<S>(g, obs_p.valid, cfg_.n_l, cfg_.d_l);
    Var<S> gate_e = detail::empty_source_gate<S>(g, obs_e.valid, cfg_.n_l, cfg_.d_l);

    Var<S> q = expand_leading(g.param(*l0_), B);
    for (size_t c = 0; c < cycles_.size(); ++c) {
      Var<S> x = cycles_[c](g, q, kp, obs_p.valid, gate_p, ke, obs_e.valid, gate_e);
      if (!cfg_.no_scan) {
        dscan_step(st.acc[c], x->value);
        q = g.constant(st.acc[c].acc.clone());
      } else {
        q = x;
      }
    }
    ++st.t;
    return out_ln_(g, q);
  }

  const EncoderConfig& config() const override { return cfg_; }

 private:
  void check_feat(std::int64_t d) const {
    if (d != cfg_.d_o)
      throw ShapeError("observation feature width " + std::to_string(d) +
                       " does not match encoder d_o " + std::to_string(cfg_.d_o));
  }

  EncoderConfig cfg_;
  Parameter<S>* l0_ = nullptr;
  Linear<S> embed_;  // shared across sources and cycles
  std::vector<ScanCycle<S>> cycles_;
  LayerNormM<S> out_ln_;
};

// ---------------------------------------------------------------------------
// Spatio-temporal transformer
// ---------------------------------------------------------------------------

// Allow matrix over chunked step tokens: query (t, i) may attend key (t', j)
// iff t' <= t. Shape [T * n_l, T * n_l].
inline Tensor<std::uint8_t> chunk_causal_mask(int T, int n_l) {
  const std::int64_t n = std::int64_t(T) * n_l;
  Tensor<std::uint8_t> m({int(n), int(n)});
  for (std::int64_t qi = 0; qi < n; ++qi) {
    const std::int64_t tq = qi / n_l;
    for (std::int64_t kj = 0; kj < n; ++kj) m[qi * n + kj] = std::uint8_t(kj / n_l <= tq);
  }
  return m;
}

template <class S>
struct StEncState : EncState<S> {
  // Per temporal layer: projected keys/values [B, t * n_l, d_l] so far.
  std::vector<Tensor<S>> k_cache, v_cache;

  std::int64_t byte_size() const override {
    std::int64_t n = 0;
    for (const auto& t : k_cache) n += t.size() * std::int64_t(sizeof(S));
    for (const auto& t : v_cache) n += t.size() * std::int64_t(sizeof(S));
    return n;
  }
};

template <class S>
class StEncoder : public SeqEncoder<S> {
 public:
  StEncoder(ParamStore<S>& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg_.validate();
    Tensor<S> l0({cfg_.n_l, cfg_.d_l});
    for (std::int64_t i = 0; i < l0.size(); ++i)
      l0[i] = S(rng.trunc_normal(1.0 / std::sqrt(double(cfg_.d_l))));
    l0_ = &ps.add(name + ".l0", std::move(l0));
    Tensor<S> te({cfg_.max_timesteps, cfg_.d_l});
    for (std::int64_t i = 0; i < te.size(); ++i) te[i] = S(rng.trunc_normal(0.02));
    time_embed_ = &ps.add(name + ".time_embed", std::move(te));
    per_step_.init(ps, name + ".step", cfg_.combine, cfg_.per_step, cfg_.d_l, cfg_.d_o,
                   cfg_.n_l, cfg_.n_heads, cfg_.per_step_layers, cfg_.ff_mult, rng);
    temporal_.resize(size_t(cfg_.temporal_layers));
    for (int i = 0; i < cfg_.temporal_layers; ++i)
      temporal_[size_t(i)].init(ps, name + ".time" + std::to_string(i), cfg_.d_l,
                                cfg_.n_heads, cfg_.ff_mult * cfg_.d_l, rng);
    out_ln_.init(ps, name + ".out_ln", cfg_.d_l);
  }

  Var<S> forward(Graph<S>& g, const SeqObs<S>& obs) const override {
    obs.validate();
    const int B = int(obs.batch()), T = int(obs.steps());
    if (T > cfg_.max_timesteps)
      throw ValueError("sequence length " + std::to_string(T) +
                       " exceeds the position table (" +
                       std::to_string(cfg_.max_timesteps) + ")");
    auto x = encode_steps_folded(g, obs);  // [B*T, n_l, d_l]
    x = reshape(x, {B, T, cfg_.n_l, cfg_.d_l});
    auto tpos = reshape(slice(g.param(*time_embed_), 0, 0, T), {T, 1, cfg_.d_l});
    x = add_bcast(x, tpos);
    x = reshape(x, {B, T * cfg_.n_l, cfg_.d_l});
    Tensor<std::uint8_t> causal = chunk_causal_mask(T, cfg_.n_l);
    for (const auto& layer : temporal_) x = layer(g, x, nullptr, &causal);
    return reshape(out_ln_(g, x), {B, T, cfg_.n_l, cfg_.d_l});
  }

  std::unique_ptr<EncState<S>> make_state(int) const override {
    auto st = std::make_unique<StEncState<S>>();
    st->k_cache.resize(size_t(cfg_.temporal_layers));
    st->v_cache.resize(size_t(cfg_.temporal_layers));
    return st;
  }

  Var<S> step(Graph<S>& g, EncState<S>& state, const TokenSet<S>& obs_p,
              const TokenSet<S>& obs_e) const override {
    auto& st = dynamic_cast<StEncState<S>&>(state);
    if (st.t >= cfg_.max_timesteps)
      throw ValueError("step " + std::to_string(st.t) + " exceeds the position table (" +
                       std::to_string(cfg_.max_timesteps) + ")");
    const int B = int(obs_p.batch());
    Var<S> x = per_step_(g, obs_p, obs_e, expand_leading(g.param(*l0_), B));
    auto tpos = reshape(slice(g.param(*time_embed_), 0, st.t, st.t + 1), {1, 1, cfg_.d_l});
    x = add_bcast(x, tpos);
    for (size_t l = 0; l < temporal_.size(); ++l) {
      const auto& layer = temporal_[l];
      auto h = layer.ln1(g, x);
      Var<S> k_new = layer.self.wk(g, h);
      Var<S> v_new = layer.self.wv(g, h);
      Var<S> k_all = st.k_cache[l].empty()
                         ? k_new
                         : concat<S>({g.constant(st.k_cache[l]), k_new}, 1);
      Var<S> v_all = st.v_cache[l].empty()
                         ? v_new
                         : concat<S>({g.constant(st.v_cache[l]), v_new}, 1);
      x = add(x, layer.self.attend(g, h, k_all, v_all));
      x = add(x, layer.ff(g, layer.ln2(g, x)));
      st.k_cache[l] = k_all->value;  // graph values are write-once; share storage
      st.v_cache[l] = v_all->value;
    }
    ++st.t;
    return out_ln_(g, x);
  }

  const EncoderConfig& config() const override { return cfg_; }

 private:
  Var<S> encode_steps_folded(Graph<S>& g, const SeqObs<S>& obs) const {
    TokenSet<S> tp{detail::fold_bt(obs.p_tokens), detail::fold_bt(obs.p_valid),
                   SourceId::player};
    TokenSet<S> te{detail::fold_bt(obs.e_tokens), detail::fold_bt(obs.e_valid),
                   SourceId::enemy};
    const int N = int(obs.batch() * obs.steps());
    return per_step_(g, tp, te, expand_leading(g.param(*l0_), N));
  }

  EncoderConfig cfg_;
  Parameter<S>* l0_ = nullptr;
  Parameter<S>* time_embed_ = nullptr;
  SourceEncoder<S> per_step_;
  std::vector<BertLayer<S>> temporal_;
  LayerNormM<S> out_ln_;
};

// ---------------------------------------------------------------------------
// Recurrent family
// ---------------------------------------------------------------------------

// Elman cell: h' = tanh(W_ih x + b_ih + W_hh h + b_hh). Inputs are [N, d].
template <class S>
struct RnnCell {
  Linear<S> ih, hh;

  void init(ParamStore<S>& ps, const std::string& name, int d, Rng& rng) {
    ih.init(ps, name + ".ih", d, d, rng);
    hh.init(ps, name + ".hh", d, d, rng);
  }
  Var<S> operator()(Graph<S>& g, const Var<S>& x, const Var<S>& h) const {
    return tanh_op(add(ih(g, x), hh(g, h)));
  }
};

// Gated recurrent unit, gates stacked [r | z | n] on the last axis.
template <class S>
struct GruCell {
  Linear<S> ih, hh;
  int d = 0;

  void init(ParamStore<S>& ps, const std::string& name, int d_, Rng& rng) {
    d = d_;
    ih.init(ps, name + ".ih", d, 3 * d, rng);
    hh.init(ps, name + ".hh", d, 3 * d, rng);
  }
  Var<S> operator()(Graph<S>& g, const Var<S>& x, const Var<S>& h) const {
    auto gi = ih(g, x), gh = hh(g, h);
    auto r = sigmoid(add(slice(gi, 1, 0, d), slice(gh, 1, 0, d)));
    auto z = sigmoid(add(slice(gi, 1, d, 2 * d), slice(gh, 1, d, 2 * d)));
    auto n = tanh_op(add(slice(gi, 1, 2 * d, 3 * d), mul(r, slice(gh, 1, 2 * d, 3 * d))));
    auto ones = g.constant(Tensor<S>::full(n->value.shape(), S(1)));
    return add(mul(sub(ones, z), n), mul(z, h));
  }
};

// LSTM cell, gates stacked [i | f | g | o] on the last axis.
template <class S>
struct LstmCell {
  Linear<S> ih, hh;
  int d = 0;

  void init(ParamStore<S>& ps, const std::string& name, int d_, Rng& rng) {
    d = d_;
    ih.init(ps, name + ".ih", d, 4 * d, rng);
    hh.init(ps, name + ".hh", d, 4 * d, rng);
  }
  std::pair<Var<S>, Var<S>> operator()(Graph<S>& g, const Var<S>& x, const Var<S>& h,
                                       const Var<S>& c) const {
    auto gi = ih(g, x), gh = hh(g, h);
    auto i = sigmoid(add(slice(gi, 1, 0, d), slice(gh, 1, 0, d)));
    auto f = sigmoid(add(slice(gi, 1, d, 2 * d), slice(gh, 1, d, 2 * d)));
    auto cand = tanh_op(add(slice(gi, 1, 2 * d, 3 * d), slice(gh, 1, 2 * d, 3 * d)));
    auto o = sigmoid(add(slice(gi, 1, 3 * d, 4 * d), slice(gh, 1, 3 * d, 4 * d)));
    auto c_new = add(mul(f, c), mul(i, cand));
    return {mul(o, tanh_op(c_new)), c_new};
  }
};

template <class S>
struct RnnEncState : EncState<S> {
  Tensor<S> h, c;  // c only for lstm

  std::int64_t byte_size() const override {
    return (h.size() + c.size()) * std::int64_t(sizeof(S));
  }
};

template <class S>
class RnnEncoder : public SeqEncoder<S> {
 public:
  RnnEncoder(ParamStore<S>& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg_.validate();
    Tensor<S> l0({cfg_.n_l, cfg_.d_l});
    for (std::int64_t i = 0; i < l0.size(); ++i)
      l0[i] = S(rng.trunc_normal(1.0 / std::sqrt(double(cfg_.d_l))));
    l0_ = &ps.add(name + ".l0", std::move(l0));
    per_step_.init(ps, name + ".step", cfg_.combine, cfg_.per_step, cfg_.d_l, cfg_.d_o,
                   cfg_.n_l, cfg_.n_heads, cfg_.per_step_layers, cfg_.ff_mult, rng);
    if (cfg_.kind == SeqKind::rnn) rnn_.init(ps, name + ".cell", cfg_.d_l, rng);
    if (cfg_.kind == SeqKind::gru) gru_.init(ps, name + ".cell", cfg_.d_l, rng);
    if (cfg_.kind == SeqKind::lstm) lstm_.init(ps, name + ".cell", cfg_.d_l, rng);
    if (cfg_.init == InitKind::learned) {
      h0_ = &ps.add(name + ".h0", random_normal<S>(rng, {cfg_.n_l, cfg_.d_l}, 0.1));
      if (cfg_.kind == SeqKind::lstm)
        c0_ = &ps.add(name + ".c0", random_normal<S>(rng, {cfg_.n_l, cfg_.d_l}, 0.1));
    }
  }

  Var<S> forward(Graph<S>& g, const SeqObs<S>& obs) const override {
    obs.validate();
    const int B = int(obs.batch()), T = int(obs.steps());
    const int rows = B * cfg_.n_l;
    auto enc = reshape(encode_steps_folded(g, obs), {B, T, cfg_.n_l, cfg_.d_l});
    Var<S> h = start_rows(g, B, h0_);
    Var<S> c = cfg_.kind == SeqKind::lstm ? start_rows(g, B, c0_) : Var<S>();
    std::vector<Var<S>> outs;
    outs.reserve(size_t(T));
    for (int t = 0; t < T; ++t) {
      auto x = reshape(slice(enc, 1, t, t + 1), {rows, cfg_.d_l});
      advance(g, x, h, c);
      outs.push_back(reshape(h, {B, 1, cfg_.n_l, cfg_.d_l}));
    }
    return concat<S>(outs, 1);
  }

  std::unique_ptr<EncState<S>> make_state(int batch) const override {
    auto st = std::make_unique<RnnEncState<S>>();
    st->h = start_tensor(batch, h0_);
    if (cfg_.kind == SeqKind::lstm) st->c = start_tensor(batch, c0_);
    return st;
  }

  Var<S> step(Graph<S>& g, EncState<S>& state, const TokenSet<S>& obs_p,
              const TokenSet<S>& obs_e) const override {
    auto& st = dynamic_cast<RnnEncState<S>&>(state);
    const int B = int(obs_p.batch());
    const int rows = B * cfg_.n_l;
    Var<S> enc = per_step_(g, obs_p, obs_e, expand_leading(g.param(*l0_), B));
    auto x = reshape(enc, {rows, cfg_.d_l});
    Var<S> h = g.constant(st.h.reshaped({rows, cfg_.d_l}));
    Var<S> c = cfg_.kind == SeqKind::lstm
                   ? g.constant(st.c.reshaped({rows, cfg_.d_l}))
                   : Var<S>();
    advance(g, x, h, c);
    st.h = h->value.reshaped({B, cfg_.n_l, cfg_.d_l});
    if (cfg_.kind == SeqKind::lstm) st.c = c->value.reshaped({B, cfg_.n_l, cfg_.d_l});
    ++st.t;
    return reshape(h, {B, cfg_.n_l, cfg_.d_l});
  }

  const EncoderConfig& config() const override { return cfg_; }

 private:
  Var<S> encode_steps_folded(Graph<S>& g, const SeqObs<S>& obs) const {
    TokenSet<S> tp{detail::fold_bt(obs.p_tokens), detail::fold_bt(obs.p_valid),
                   SourceId::player};
    TokenSet<S> te{detail::fold_bt(obs.e_tokens), detail::fold_bt(obs.e_valid),
                   SourceId::enemy};
    const int N = int(obs.batch() * obs.steps());
    return per_step_(g, tp, te, expand_leading(g.param(*l0_), N));
  }

  // Start state as [B * n_l, d_l] rows, learned or zeros.
  Var<S> start_rows(Graph<S>& g, int B, Parameter<S>* p) const {
    if (p) return reshape(expand_leading(g.param(*p), B), {B * cfg_.n_l, cfg_.d_l});
    return g.constant(Tensor<S>::zeros({B * cfg_.n_l, cfg_.d_l}));
  }
  Tensor<S> start_tensor(int B, Parameter<S>* p) const {
    Tensor<S> t({B, cfg_.n_l, cfg_.d_l});
    if (p)
      for (int b = 0; b < B; ++b)
        std::memcpy(t.data() + std::int64_t(b) * p->value.size(), p->value.data(),
                    static_cast<size_t>(p->value.size()) * sizeof(S));
    return t;
  }

  void advance(Graph<S>& g, const Var<S>& x, Var<S>& h, Var<S>& c) const {
    if (cfg_.kind == SeqKind::rnn) {
      h = rnn_(g, x, h);
    } else if (cfg_.kind == SeqKind::gru) {
      h = gru_(g, x, h);
    } else {
      auto [h2, c2] = lstm_(g, x, h, c);
      h = h2;
      c = c2;
    }
  }

  EncoderConfig cfg_;
  Parameter<S>* l0_ = nullptr;
  Parameter<S>* h0_ = nullptr;
  Parameter<S>* c0_ = nullptr;
  SourceEncoder<S> per_step_;
  RnnCell<S> rnn_;
  GruCell<S> gru_;
  LstmCell<S> lstm_;
};

template <class S>
std::unique_ptr<SeqEncoder<S>> make_encoder(ParamStore<S>& ps, const std::string& name,
                                            const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  switch (cfg.kind) {
    case SeqKind::scan: return std::make_unique<ScanEncoder<S>>(ps, name, cfg, rng);
    case SeqKind::st_transformer: return std::make_unique<StEncoder<S>>(ps, name, cfg, rng);
    default: return std::make_unique<RnnEncoder<S>>(ps, name, cfg, rng);
  }
}

}  // namespace scanenc
