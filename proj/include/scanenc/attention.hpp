#pragma once

// Set-to-latent encoders. A variable, padded set of observation tokens is
// folded into a fixed block of latent tokens either BERT-style (latents join
// the token union as CLS-like rows and everything self-attends) or by
// cross-attention (latents query the observations). Three strategies combine
// the player and enemy sources: fused (one union with per-source learned
// embeddings), piecewise (each source gets half the latent rows), and
// sequential (encode player, then encode enemy on top of the result).
//
// All blocks are pre-norm residual. An observation source with zero valid
// tokens skips its cross-attention sublayer entirely: the softmax runs in
// allow-empty mode and the sublayer output is gated to zero for that batch
// item, so the latents ride the residual path through.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "scanenc/graph.hpp"
#include "scanenc/ops.hpp"
#include "scanenc/params.hpp"
#include "scanenc/tensor.hpp"

namespace scanenc {

enum class SourceId { player, enemy, single };

// Padded batch of token sets: tokens [B, n, d_o] with a validity mask [B, n].
// Invalid rows may hold arbitrary values; they are attention-masked and must
// never influence an output.
template <typename S>
struct TokenSet {
  Tensor<S> tokens;
  Tensor<std::uint8_t> valid;
  SourceId source_id = SourceId::single;

  std::int64_t batch() const { return tokens.dim(0); }
  std::int64_t count() const { return tokens.dim(1); }
  std::int64_t feat() const { return tokens.dim(2); }

  void validate() const {
    if (tokens.rank() != 3)
      throw ShapeError("TokenSet tokens must be [B, n, d_o], got " +
                       shape_str(tokens.shape()));
    if (valid.rank() != 2 || valid.dim(0) != batch() || valid.dim(1) != count())
      throw ShapeError("TokenSet valid mask must be [B, n]");
  }
  bool item_empty(std::int64_t b) const {
    for (std::int64_t i = 0; i < count(); ++i)
      if (valid[b * count() + i]) return false;
    return true;
  }
  bool any_item_empty() const {
    for (std::int64_t b = 0; b < batch(); ++b)
      if (item_empty(b)) return true;
    return false;
  }
};

// Logical attention-matrix footprint accounting: each attention call adds
// queries x keys per batch item. Lets tests confirm the structural cost gap
// between cross-attention (n_l * n_o) and union self-attention ((n_l+n_o)^2).
namespace attn_stats {
inline thread_local std::int64_t matrix_elements = 0;
inline void reset() { matrix_elements = 0; }
}  // namespace attn_stats

template <typename S>
struct Linear {
  Parameter<S>* w = nullptr;  // [in, out]
  Parameter<S>* b = nullptr;  // [out]

  void init(ParamStore<S>& ps, const std::string& name, int in, int out, Rng& rng) {
    Tensor<S> wt({in, out});
    const double std_dev = 1.0 / std::sqrt(double(in));
    for (std::int64_t i = 0; i < wt.size(); ++i) wt[i] = S(rng.trunc_normal(std_dev));
    w = &ps.add(name + ".w", std::move(wt));
    b = &ps.add(name + ".b", Tensor<S>::zeros({out}));
  }
  Var<S> operator()(Graph<S>& g, const Var<S>& x) const {
    return linear(x, g.param(*w), g.param(*b));
  }
};

template <typename S>
struct LayerNormM {
  Parameter<S>* gain = nullptr;
  Parameter<S>* bias = nullptr;

  void init(ParamStore<S>& ps, const std::string& name, int d) {
    gain = &ps.add(name + ".g", Tensor<S>::full({d}, S(1)));
    bias = &ps.add(name + ".b", Tensor<S>::zeros({d}));
  }
  Var<S> operator()(Graph<S>& g, const Var<S>& x) const {
    return layer_norm(x, g.param(*gain), g.param(*bias));
  }
};

template <typename S>
struct FeedForward {
  Linear<S> up, down;

  void init(ParamStore<S>& ps, const std::string& name, int d, int ff, Rng& rng) {
    up.init(ps, name + ".up", d, ff, rng);
    down.init(ps, name + ".down", ff, d, rng);
  }
  Var<S> operator()(Graph<S>& g, const Var<S>& x) const {
    return down(g, gelu(up(g, x)));
  }
};

// Multi-head attention. Queries are [B, m, d]; keys/values are [B, n, kv_dim]
// and may live in a different feature space than the model width. key_valid
// masks padded kv rows per batch item; attn_allow is an optional structural
// [m, n] mask shared across the batch (causal chunking and the like). A fully
// masked key row is an error unless allow_empty, in which case the attention
// row is zeroed and the caller is expected to gate the sublayer output.
template <typename S>
struct Mha {
  Linear<S> wq, wk, wv, wo;
  int n_heads = 4;
  int d = 0;
  int kv_dim = 0;

  void init(ParamStore<S>& ps, const std::string& name, int d_model, int d_kv,
            int heads, Rng& rng) {
    if (heads < 1 || d_model % heads != 0)
      throw ValueError("attention width " + std::to_string(d_model) +
                       " not divisible by " + std::to_string(heads) + " heads");
    n_heads = heads;
    d = d_model;
    kv_dim = d_kv;
    wq.init(ps, name + ".wq", d_model, d_model, rng);
    wk.init(ps, name + ".wk", d_kv, d_model, rng);
    wv.init(ps, name + ".wv", d_kv, d_model, rng);
    wo.init(ps, name + ".wo", d_model, d_model, rng);
  }

  Var<S> operator()(Graph<S>& g, const Var<S>& q, const Var<S>& kv,
                    const Tensor<std::uint8_t>* key_valid = nullptr,
                    const Tensor<std::uint8_t>* attn_allow = nullptr,
                    bool allow_empty = false) const {
    if (kv->value.rank() != 3 || kv->value.dim(0) != q->value.dim(0) ||
        kv->value.dim(2) != kv_dim)
      throw ShapeError("mha keys/values must be [B, n, " + std::to_string(kv_dim) +
                       "], got " + shape_str(kv->value.shape()));
    return attend(g, q, wk(g, kv), wv(g, kv), key_valid, attn_allow, allow_empty);
  }

  // Attention over already-projected keys/values [B, n, d]; incremental paths
  // cache these projections across steps and concatenate before attending.
  Var<S> attend(Graph<S>& g, const Var<S>& q, const Var<S>& k_proj, const Var<S>& v_proj,
                const Tensor<std::uint8_t>* key_valid = nullptr,
                const Tensor<std::uint8_t>* attn_allow = nullptr,
                bool allow_empty = false) const {
    const int B = q->value.dim(0), m = q->value.dim(1);
    const int n = k_proj->value.dim(1);
    if (q->value.rank() != 3 || q->value.dim(2) != d)
      throw ShapeError("mha queries must be [B, m, " + std::to_string(d) + "], got " +
                       shape_str(q->value.shape()));
    if (k_proj->value.rank() != 3 || k_proj->value.dim(0) != B || k_proj->value.dim(2) != d ||
        !k_proj->value.same_shape(v_proj->value))
      throw ShapeError("mha projected keys/values must be [B, n, " + std::to_string(d) + "]");
    const int hd = d / n_heads;

    auto split = [&](const Var<S>& x, int rows) {
      return swap12(reshape(x, {B, rows, n_heads, hd}));  // [B, H, rows, hd]
    };
    auto qh = split(wq(g, q), m);
    auto kh = split(k_proj, n);
    auto vh = split(v_proj, n);
    auto logits = scale(matmul(qh, kh, false, true), S(1.0 / std::sqrt(double(hd))));

    // Combined mask, shaped to broadcast right-aligned against [B, H, m, n].
    Tensor<std::uint8_t> mask;
    if (key_valid && attn_allow) {
      if (key_valid->rank() != 2 || key_valid->dim(0) != B || key_valid->dim(1) != n)
        throw ShapeError("mha key_valid must be [B, n]");
      if (attn_allow->rank() != 2 || attn_allow->dim(0) != m || attn_allow->dim(1) != n)
        throw ShapeError("mha attn_allow must be [m, n]");
      mask = Tensor<std::uint8_t>({B, 1, m, n});
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            mask[(std::int64_t(b) * m + i) * n + j] =
                std::uint8_t((*key_valid)[std::int64_t(b) * n + j] &&
                             (*attn_allow)[std::int64_t(i) * n + j]);
    } else if (key_valid) {
      if (key_valid->rank() != 2 || key_valid->dim(0) != B || key_valid->dim(1) != n)
        throw ShapeError("mha key_valid must be [B, n]");
      mask = key_valid->reshaped({B, 1, 1, n});
    } else if (attn_allow) {
      if (attn_allow->rank() != 2 || attn_allow->dim(0) != m || attn_allow->dim(1) != n)
        throw ShapeError("mha attn_allow must be [m, n]");
      mask = attn_allow->reshaped({1, 1, m, n});
    }
    auto probs = softmax(logits, mask.size() ? &mask : nullptr, allow_empty);
    attn_stats::matrix_elements += std::int64_t(B) * m * n;

    auto ctx = reshape(swap12(matmul(probs, vh)), {B, m, d});
    return wo(g, ctx);
  }
};

// One pre-norm transformer layer: self-attention then feed-forward.
template <typename S>
struct BertLayer {
  Mha<S> self;
  FeedForward<S> ff;
  LayerNormM<S> ln1, ln2;

  void init(ParamStore<S>& ps, const std::string& name, int d, int heads, int ff_width,
            Rng& rng) {
    self.init(ps, name + ".self", d, d, heads, rng);
    ff.init(ps, name + ".ff", d, ff_width, rng);
    ln1.init(ps, name + ".ln1", d);
    ln2.init(ps, name + ".ln2", d);
  }
  Var<S> operator()(Graph<S>& g, Var<S> x, const Tensor<std::uint8_t>* key_valid,
                    const Tensor<std::uint8_t>* attn_allow = nullptr) const {
    auto h = ln1(g, x);
    x = add(x, self(g, h, h, key_valid, attn_allow));
    x = add(x, ff(g, ln2(g, x)));
    return x;
  }
};

// One pre-norm cross-attention layer: latents query the observations, then
// latent self-attention, then feed-forward. gate (optional, [B, m, d] of 0/1)
// zeroes the cross sublayer for batch items whose source is empty.
template <typename S>
struct XattnLayer {
  Mha<S> cross, self;
  FeedForward<S> ff;
  LayerNormM<S> lnq, lns, lnf;

  void init(ParamStore<S>& ps, const std::string& name, int d, int d_kv, int heads,
            int ff_width, Rng& rng) {
    cross.init(ps, name + ".cross", d, d_kv, heads, rng);
    self.init(ps, name + ".self", d, d, heads, rng);
    ff.init(ps, name + ".ff", d, ff_width, rng);
    lnq.init(ps, name + ".lnq", d);
    lns.init(ps, name + ".lns", d);
    lnf.init(ps, name + ".lnf", d);
  }
  Var<S> operator()(Graph<S>& g, Var<S> x, const Var<S>& kv,
                    const Tensor<std::uint8_t>* key_valid, const Var<S>* gate) const {
    auto c = cross(g, lnq(g, x), kv, key_valid, nullptr, gate != nullptr);
    if (gate) c = mul(c, *gate);
    x = add(x, c);
    auto h = lns(g, x);
    x = add(x, self(g, h, h));
    x = add(x, ff(g, lnf(g, x)));
    return x;
  }
};

namespace detail {

// 0/1 gate over latents, [B, n_l, d_l]: zero rows for batch items whose
// source has no valid token. Empty Var when every item has at least one.
template <class S>
Var<S> empty_source_gate(Graph<S>& g, const Tensor<std::uint8_t>& valid, int n_l, int d_l) {
  const std::int64_t B = valid.dim(0), n_o = valid.dim(1);
  bool any_empty = false;
  auto item_empty = [&](std::int64_t b) {
    for (std::int64_t i = 0; i < n_o; ++i)
      if (valid[b * n_o + i]) return false;
    return true;
  };
  for (std::int64_t b = 0; b < B && !any_empty; ++b) any_empty = item_empty(b);
  if (!any_empty) return Var<S>();
  Tensor<S> gt({int(B), n_l, d_l});
  for (std::int64_t b = 0; b < B; ++b) {
    S v = item_empty(b) ? S(0) : S(1);
    for (std::int64_t i = 0; i < std::int64_t(n_l) * d_l; ++i) gt[b * n_l * d_l + i] = v;
  }
  return g.constant(std::move(gt));
}

}  // namespace detail

// BERT-style set encoder: learned input embedding lifts observations to the
// model width, latents are prepended as CLS-like rows, the union runs through
// self-attention layers, and the latent rows are returned.
template <typename S>
struct BertEncoder {
  Linear<S> embed;
  std::vector<BertLayer<S>> layers;
  LayerNormM<S> final_ln;
  int d_l = 0;

  void init(ParamStore<S>& ps, const std::string& name, int d, int d_o, int heads,
            int n_layers, int ff_mult, Rng& rng) {
    d_l = d;
    embed.init(ps, name + ".embed", d_o, d, rng);
    layers.resize(size_t(n_layers));
    for (int i = 0; i < n_layers; ++i)
      layers[size_t(i)].init(ps, name + ".layer" + std::to_string(i), d, heads,
                             ff_mult * d, rng);
    final_ln.init(ps, name + ".out_ln", d);
  }

  // kv: [B, n_o, d_o] (graph node so learned embeddings can feed in).
  Var<S> run(Graph<S>& g, const Var<S>& kv, const Tensor<std::uint8_t>& valid,
             const Var<S>& latents) const {
    const int B = latents->value.dim(0), n_l = latents->value.dim(1);
    const int n_o = kv->value.dim(1);
    auto x = concat<S>({latents, embed(g, kv)}, 1);  // [B, n_l + n_o, d_l]
    Tensor<std::uint8_t> union_valid({B, n_l + n_o});
    for (int b = 0; b < B; ++b) {
      for (int i = 0; i < n_l; ++i) union_valid[std::int64_t(b) * (n_l + n_o) + i] = 1;
      for (int i = 0; i < n_o; ++i)
        union_valid[std::int64_t(b) * (n_l + n_o) + n_l + i] =
            valid[std::int64_t(b) * n_o + i];
    }
    for (const auto& layer : layers) x = layer(g, x, &union_valid);
    return slice(final_ln(g, x), 1, 0, n_l);
  }

  Var<S> operator()(Graph<S>& g, const TokenSet<S>& obs, const Var<S>& latents) const {
    obs.validate();
    return run(g, g.constant(obs.tokens), obs.valid, latents);
  }
};

// Cross-attention set encoder: each layer cross-attends the latents to the
// observations, then runs latent self-attention and feed-forward.
template <typename S>
struct XattnEncoder {
  std::vector<XattnLayer<S>> layers;
  LayerNormM<S> final_ln;
  int d_l = 0;

  void init(ParamStore<S>& ps, const std::string& name, int d, int d_o, int heads,
            int n_layers, int ff_mult, Rng& rng) {
    d_l = d;
    layers.resize(size_t(n_layers));
    for (int i = 0; i < n_layers; ++i)
      layers[size_t(i)].init(ps, name + ".layer" + std::to_string(i), d, d_o, heads,
                             ff_mult * d, rng);
    final_ln.init(ps, name + ".out_ln", d);
  }

  Var<S> run(Graph<S>& g, const Var<S>& kv, const Tensor<std::uint8_t>& valid,
             const Var<S>& latents) const {
    const int n_l = latents->value.dim(1);
    // Gate only materializes when some batch item has an empty source.
    Var<S> gate = detail::empty_source_gate<S>(g, valid, n_l, d_l);
    Var<S> x = latents;
    for (const auto& layer : layers) x = layer(g, x, kv, &valid, gate ? &gate : nullptr);
    return final_ln(g, x);
  }

  Var<S> operator()(Graph<S>& g, const TokenSet<S>& obs, const Var<S>& latents) const {
    obs.validate();
    return run(g, g.constant(obs.tokens), obs.valid, latents);
  }
};

enum class EncKind { bert, xattn };

inline EncKind enc_kind_from_string(const std::string& s) {
  if (s == "bert") return EncKind::bert;
  if (s == "xattn") return EncKind::xattn;
  throw ValueError("unknown encoder kind: " + s);
}

// Tagged wrapper so callers can pick the encoder family at config time.
template <typename S>
struct SetEncoder {
  EncKind kind = EncKind::xattn;
  BertEncoder<S> bert;
  XattnEncoder<S> xattn;

  void init(ParamStore<S>& ps, const std::string& name, EncKind k, int d, int d_o,
            int heads, int n_layers, int ff_mult, Rng& rng) {
    kind = k;
    if (kind == EncKind::bert)
      bert.init(ps, name, d, d_o, heads, n_layers, ff_mult, rng);
    else
      xattn.init(ps, name, d, d_o, heads, n_layers, ff_mult, rng);
  }
  Var<S> run(Graph<S>& g, const Var<S>& kv, const Tensor<std::uint8_t>& valid,
             const Var<S>& latents) const {
    return kind == EncKind::bert ? bert.run(g, kv, valid, latents)
                                 : xattn.run(g, kv, valid, latents);
  }
  Var<S> operator()(Graph<S>& g, const TokenSet<S>& obs, const Var<S>& latents) const {
    obs.validate();
    return run(g, g.constant(obs.tokens), obs.valid, latents);
  }
};

enum class CombineMode { fused, piecewise, sequential };

inline CombineMode combine_mode_from_string(const std::string& s) {
  if (s == "fused") return CombineMode::fused;
  if (s == "piecewise") return CombineMode::piecewise;
  if (s == "sequential") return CombineMode::sequential;
  throw ValueError("unknown source combine mode: " + s);
}

// Two-source encoder. fused: one encoder over the concatenated sources, each
// token offset by its source's learned embedding. piecewise: independent
// encoders write the top and bottom halves of the latent rows. sequential:
// the player encode's output latents become the enemy encode's query latents.
template <typename S>
struct SourceEncoder {
  CombineMode mode = CombineMode::fused;
  SetEncoder<S> enc_a;            // fused: the only encoder; otherwise player
  SetEncoder<S> enc_b;            // piecewise / sequential: enemy
  Parameter<S>* embed_p = nullptr;  // fused only, [d_o]
  Parameter<S>* embed_e = nullptr;

  void init(ParamStore<S>& ps, const std::string& name, CombineMode m, EncKind kind,
            int d, int d_o, int n_l, int heads, int n_layers, int ff_mult, Rng& rng) {
    mode = m;
    if (mode == CombineMode::piecewise && n_l % 2 != 0)
      throw ValueError("piecewise combine requires an even latent count, got " +
                       std::to_string(n_l));
    enc_a.init(ps, name + (mode == CombineMode::fused ? ".enc" : ".enc_p"), kind, d,
               d_o, heads, n_layers, ff_mult, rng);
    if (mode != CombineMode::fused)
      enc_b.init(ps, name + ".enc_e", kind, d, d_o, heads, n_layers, ff_mult, rng);
    if (mode == CombineMode::fused) {
      Tensor<S> ep({d_o}), ee({d_o});
      for (int i = 0; i < d_o; ++i) {
        ep[i] = S(rng.trunc_normal(0.1));
        ee[i] = S(rng.trunc_normal(0.1));
      }
      embed_p = &ps.add(name + ".src_embed_p", std::move(ep));
      embed_e = &ps.add(name + ".src_embed_e", std::move(ee));
    }
  }

  Var<S> operator()(Graph<S>& g, const TokenSet<S>& obs_p, const TokenSet<S>& obs_e,
                    const Var<S>& latents) const {
    obs_p.validate();
    obs_e.validate();
    const std::int64_t B = latents->value.dim(0);
    if (obs_p.batch() != B || obs_e.batch() != B)
      throw ShapeError("encode_sources: batch sizes differ");
    for (std::int64_t b = 0; b < B; ++b)
      if (obs_p.item_empty(b) && obs_e.item_empty(b))
        throw ValueError("encode_sources: batch item " + std::to_string(b) +
                         " has no valid tokens in either source");

    if (mode == CombineMode::fused) {
      auto tp = add_bcast(g.constant(obs_p.tokens), g.param(*embed_p));
      auto te = add_bcast(g.constant(obs_e.tokens), g.param(*embed_e));
      auto kv = concat<S>({tp, te}, 1);
      const std::int64_t np = obs_p.count(), ne = obs_e.count();
      Tensor<std::uint8_t> valid({int(B), int(np + ne)});
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < np; ++i)
          valid[b * (np + ne) + i] = obs_p.valid[b * np + i];
        for (std::int64_t i = 0; i < ne; ++i)
          valid[b * (np + ne) + np + i] = obs_e.valid[b * ne + i];
      }
      return enc_a.run(g, kv, valid, latents);
    }
    if (mode == CombineMode::piecewise) {
      const int n_l = latents->value.dim(1);
      auto top = slice(latents, 1, 0, n_l / 2);
      auto bot = slice(latents, 1, n_l / 2, n_l);
      return concat<S>({enc_a(g, obs_p, top), enc_b(g, obs_e, bot)}, 1);
    }
    return enc_b(g, obs_e, enc_a(g, obs_p, latents));
  }
};

}  // namespace scanenc
