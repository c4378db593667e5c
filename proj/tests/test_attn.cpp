#include <cmath>
#include <vector>

#include "doctest.h"
#include "scanenc/attention.hpp"
#include "test_support.hpp"

using namespace scanenc;
using namespace testsup;

namespace {

Tensor<double> eye(int n) {
  Tensor<double> t = Tensor<double>::zeros({n, n});
  for (int i = 0; i < n; ++i) t[std::int64_t(i) * n + i] = 1.0;
  return t;
}

TokenSet<double> make_set(Rng& rng, int B, int n, int d_o,
                          const std::vector<int>& counts,
                          SourceId sid = SourceId::single) {
  TokenSet<double> ts;
  ts.tokens = random_normal<double>(rng, {B, n, d_o});
  ts.valid = Tensor<std::uint8_t>::zeros({B, n});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < counts[size_t(b)]; ++i) ts.valid[std::int64_t(b) * n + i] = 1;
  ts.source_id = sid;
  return ts;
}

// Plain-loop multi-head attention mirroring Mha's head layout (head h takes
// projection columns [h*hd, (h+1)*hd)).
Tensor<double> ref_mha(const Mha<double>& m, const Tensor<double>& q,
                       const Tensor<double>& kv, const Tensor<std::uint8_t>& key_valid) {
  const int B = q.dim(0), mq = q.dim(1), n = kv.dim(1);
  const int d = m.d, H = m.n_heads, hd = d / H, dk = m.kv_dim;
  const Tensor<double>&Wq = m.wq.w->value, &bq = m.wq.b->value;
  const Tensor<double>&Wk = m.wk.w->value, &bk = m.wk.b->value;
  const Tensor<double>&Wv = m.wv.w->value, &bv = m.wv.b->value;
  const Tensor<double>&Wo = m.wo.w->value, &bo = m.wo.b->value;
  auto proj = [](const double* row, const Tensor<double>& W, const Tensor<double>& b,
                 int in, int out, std::vector<double>& dst) {
    dst.assign(size_t(out), 0.0);
    for (int c = 0; c < out; ++c) {
      double acc = b[c];
      for (int r = 0; r < in; ++r) acc += row[r] * W[std::int64_t(r) * out + c];
      dst[size_t(c)] = acc;
    }
  };
  Tensor<double> out = Tensor<double>::zeros({B, mq, d});
  std::vector<double> Q, K, V, ctx(static_cast<size_t>(d));
  std::vector<std::vector<double>> Ks(static_cast<size_t>(n)), Vs(static_cast<size_t>(n));
  for (int b = 0; b < B; ++b) {
    for (int j = 0; j < n; ++j) {
      proj(kv.data() + (std::int64_t(b) * n + j) * dk, Wk, bk, dk, d, Ks[size_t(j)]);
      proj(kv.data() + (std::int64_t(b) * n + j) * dk, Wv, bv, dk, d, Vs[size_t(j)]);
    }
    for (int i = 0; i < mq; ++i) {
      proj(q.data() + (std::int64_t(b) * mq + i) * d, Wq, bq, d, d, Q);
      std::fill(ctx.begin(), ctx.end(), 0.0);
      for (int h = 0; h < H; ++h) {
        std::vector<double> logit(static_cast<size_t>(n), -1e300);
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
          if (!key_valid[std::int64_t(b) * n + j]) continue;
          double acc = 0;
          for (int c = 0; c < hd; ++c) acc += Q[size_t(h * hd + c)] * Ks[size_t(j)][size_t(h * hd + c)];
          logit[size_t(j)] = acc / std::sqrt(double(hd));
          mx = std::max(mx, logit[size_t(j)]);
        }
        double se = 0;
        for (int j = 0; j < n; ++j)
          if (key_valid[std::int64_t(b) * n + j]) se += std::exp(logit[size_t(j)] - mx);
        for (int j = 0; j < n; ++j) {
          if (!key_valid[std::int64_t(b) * n + j]) continue;
          double p = std::exp(logit[size_t(j)] - mx) / se;
          for (int c = 0; c < hd; ++c) ctx[size_t(h * hd + c)] += p * Vs[size_t(j)][size_t(h * hd + c)];
        }
      }
      double* orow = out.data() + (std::int64_t(b) * mq + i) * d;
      for (int c = 0; c < d; ++c) {
        double acc = bo[c];
        for (int r = 0; r < d; ++r) acc += ctx[size_t(r)] * Wo[std::int64_t(r) * d + c];
        orow[c] = acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("mha with one valid key returns that token's value projection") {
  Rng rng(1);
  ParamStore<double> ps;
  Mha<double> m;
  m.init(ps, "m", 4, 3, 1, rng);
  m.wo.w->value = eye(4);  // identity output projection

  Tensor<double> q = random_normal<double>(rng, {1, 2, 4});
  Tensor<double> kv = random_normal<double>(rng, {1, 3, 3});
  Tensor<std::uint8_t> valid = Tensor<std::uint8_t>::from({1, 3}, {0, 1, 0});
  Graph<double> g(false);
  auto out = m(g, g.constant(q), g.constant(kv), &valid);

  // Expected: value projection of kv token 1, for every query row.
  std::vector<double> expect(4);
  for (int c = 0; c < 4; ++c) {
    double acc = m.wv.b->value[c];
    for (int r = 0; r < 3; ++r) acc += kv[3 + r] * m.wv.w->value[std::int64_t(r) * 4 + c];
    expect[size_t(c)] = acc;
  }
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 4; ++c)
      CHECK(out->value[std::int64_t(i) * 4 + c] == doctest::Approx(expect[size_t(c)]).epsilon(1e-12));
}

TEST_CASE("mha with identical keys averages the value projections") {
  Rng rng(2);
  ParamStore<double> ps;
  Mha<double> m;
  m.init(ps, "m", 8, 5, 2, rng);
  m.wk.w->value = Tensor<double>::zeros({5, 8});  // all keys collapse to the bias
  m.wo.w->value = eye(8);
  m.wo.b->value = Tensor<double>::zeros({8});

  const int B = 2, n = 5;
  Tensor<double> q = random_normal<double>(rng, {B, 1, 8});
  Tensor<double> kv = random_normal<double>(rng, {B, n, 5});
  Tensor<std::uint8_t> valid = Tensor<std::uint8_t>::zeros({B, n});
  std::vector<int> counts = {3, 1};
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < counts[size_t(b)]; ++i) valid[std::int64_t(b) * n + i] = 1;

  Graph<double> g(false);
  auto out = m(g, g.constant(q), g.constant(kv), &valid);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < 8; ++c) {
      double mean = 0;
      for (int j = 0; j < counts[size_t(b)]; ++j) {
        double acc = m.wv.b->value[c];
        for (int r = 0; r < 5; ++r)
          acc += kv[(std::int64_t(b) * n + j) * 5 + r] * m.wv.w->value[std::int64_t(r) * 8 + c];
        mean += acc;
      }
      mean /= double(counts[size_t(b)]);
      CHECK(out->value[std::int64_t(b) * 8 + c] == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("mha matches explicit per-head reference") {
  Rng rng(3);
  ParamStore<double> ps;
  Mha<double> m;
  m.init(ps, "m", 8, 6, 2, rng);
  const int B = 2, mq = 3, n = 5;
  Tensor<double> q = random_normal<double>(rng, {B, mq, 8});
  Tensor<double> kv = random_normal<double>(rng, {B, n, 6});
  Tensor<std::uint8_t> valid = Tensor<std::uint8_t>::zeros({B, n});
  for (int b = 0; b < B; ++b) {
    valid[std::int64_t(b) * n] = 1;  // keep at least one key
    for (int j = 1; j < n; ++j) valid[std::int64_t(b) * n + j] = rng.uniform() < 0.6;
  }
  Graph<double> g(false);
  auto out = m(g, g.constant(q), g.constant(kv), &valid);
  Tensor<double> ref = ref_mha(m, q, kv, valid);
  CHECK(max_abs_diff(out->value, ref) < 1e-10);
}

TEST_CASE("mha rejects fully masked keys unless allowed") {
  Rng rng(4);
  ParamStore<double> ps;
  Mha<double> m;
  m.init(ps, "m", 4, 4, 1, rng);
  Tensor<double> q = random_normal<double>(rng, {1, 2, 4});
  Tensor<double> kv = random_normal<double>(rng, {1, 3, 4});
  Tensor<std::uint8_t> valid = Tensor<std::uint8_t>::zeros({1, 3});
  Graph<double> g(false);
  CHECK_THROWS_AS(m(g, g.constant(q), g.constant(kv), &valid), ValueError);
  auto out = m(g, g.constant(q), g.constant(kv), &valid, nullptr, true);
  // Zeroed attention rows leave only the output bias.
  for (int c = 0; c < 4; ++c)
    CHECK(out->value[c] == doctest::Approx(m.wo.b->value[c]).epsilon(1e-12));
  CHECK(m.wq.w->value.dim(0) == 4);
}

TEST_CASE("mha init rejects width not divisible by heads") {
  Rng rng(5);
  ParamStore<double> ps;
  Mha<double> m;
  CHECK_THROWS_AS(m.init(ps, "m", 10, 10, 4, rng), ValueError);
}

namespace {

template <typename EncT>
void check_shape_perm_padding(EncT& enc, int d_l, int d_o, int n_l) {
  Rng rng(6);
  const int B = 1;
  Graph<double> g(false);
  Tensor<double> lat0 = random_normal<double>(rng, {B, n_l, d_l});

  // Fixed-shape contract across valid counts.
  for (int c : {1, 2, 5}) {
    auto ts = make_set(rng, B, 5, d_o, {c});
    Graph<double> gi(false);
    auto out = enc(gi, ts, gi.constant(lat0));
    CHECK(out->value.dim(0) == B);
    CHECK(out->value.dim(1) == n_l);
    CHECK(out->value.dim(2) == d_l);
  }

  // Permutation invariance: scatter the same valid tokens into other slots.
  const int n = 6, c = 4;
  Tensor<double> rows = random_normal<double>(rng, {c, d_o});
  auto build = [&](const std::vector<int>& slots) {
    TokenSet<double> ts;
    ts.tokens = random_normal<double>(rng, {B, n, d_o});  // padding garbage
    ts.valid = Tensor<std::uint8_t>::zeros({B, n});
    for (int i = 0; i < c; ++i) {
      ts.valid[slots[size_t(i)]] = 1;
      for (int f = 0; f < d_o; ++f)
        ts.tokens[std::int64_t(slots[size_t(i)]) * d_o + f] = rows[std::int64_t(i) * d_o + f];
    }
    return ts;
  };
  Graph<double> ga(false), gb(false);
  auto oa = enc(ga, build({0, 1, 2, 3}), ga.constant(lat0));
  auto ob = enc(gb, build({5, 2, 0, 3}), gb.constant(lat0));
  CHECK(max_abs_diff(oa->value, ob->value) < 1e-10);

  // Padding independence: same valid tokens under a wider padded layout.
  TokenSet<double> small;
  small.tokens = rows.reshaped({B, c, d_o});
  small.valid = Tensor<std::uint8_t>::full({B, c}, 1);
  TokenSet<double> wide = build({0, 1, 2, 3});
  Graph<double> gs(false), gw(false);
  auto os = enc(gs, small, gs.constant(lat0));
  auto ow = enc(gw, wide, gw.constant(lat0));
  CHECK(max_abs_diff(os->value, ow->value) < 1e-10);
}

}  // namespace

TEST_CASE("bert_encode: shape, permutation and padding invariance") {
  Rng rng(7);
  ParamStore<double> ps;
  BertEncoder<double> enc;
  enc.init(ps, "enc", 16, 6, 4, 2, 4, rng);
  check_shape_perm_padding(enc, 16, 6, 3);
}

TEST_CASE("xattn_encode: shape, permutation and padding invariance") {
  Rng rng(8);
  ParamStore<double> ps;
  XattnEncoder<double> enc;
  enc.init(ps, "enc", 16, 6, 4, 2, 4, rng);
  check_shape_perm_padding(enc, 16, 6, 3);
}

TEST_CASE("xattn_encode output is a function of the single valid token") {
  Rng rng(9);
  ParamStore<double> ps;
  XattnEncoder<double> enc;
  enc.init(ps, "enc", 8, 4, 2, 1, 4, rng);
  Tensor<double> lat = random_normal<double>(rng, {1, 2, 8});
  auto one_token = [&](const std::vector<double>& t, std::uint64_t pad_seed) {
    Rng prng(pad_seed);
    TokenSet<double> ts;
    ts.tokens = random_normal<double>(prng, {1, 3, 4});
    ts.valid = Tensor<std::uint8_t>::from({1, 3}, {0, 1, 0});
    for (int f = 0; f < 4; ++f) ts.tokens[4 + f] = t[size_t(f)];
    return ts;
  };
  Graph<double> g1(false), g2(false), g3(false);
  auto a = enc(g1, one_token({1, 2, 3, 4}, 100), g1.constant(lat));
  auto b = enc(g2, one_token({1, 2, 3, 4}, 200), g2.constant(lat));
  auto c = enc(g3, one_token({4, 3, 2, 1}, 100), g3.constant(lat));
  CHECK(max_abs_diff(a->value, b->value) < 1e-12);  // padding cannot matter
  CHECK(max_abs_diff(a->value, c->value) > 1e-6);   // the token does
}

TEST_CASE("attention footprint: cross n_l*n_o vs union (n_l+n_o)^2") {
  Rng rng(10);
  const int n_l = 3, n_o = 7, L = 2;
  ParamStore<double> ps;
  BertEncoder<double> bert;
  XattnEncoder<double> xa;
  bert.init(ps, "b", 8, 4, 2, L, 4, rng);
  xa.init(ps, "x", 8, 4, 2, L, 4, rng);
  Tensor<double> lat = random_normal<double>(rng, {1, n_l, 8});
  auto ts = make_set(rng, 1, n_o, 4, {n_o});

  attn_stats::reset();
  {
    Graph<double> g(false);
    xa(g, ts, g.constant(lat));
  }
  CHECK(attn_stats::matrix_elements == L * (n_l * n_o + n_l * n_l));

  attn_stats::reset();
  {
    Graph<double> g(false);
    bert(g, ts, g.constant(lat));
  }
  CHECK(attn_stats::matrix_elements == L * (n_l + n_o) * (n_l + n_o));
}

TEST_CASE("encode_sources piecewise: latent halves are isolated per source") {
  Rng rng(11);
  ParamStore<double> ps;
  SourceEncoder<double> se;
  se.init(ps, "se", CombineMode::piecewise, EncKind::xattn, 8, 4, 4, 2, 1, 4, rng);
  Tensor<double> lat = random_normal<double>(rng, {1, 4, 8});
  auto obs_p = make_set(rng, 1, 3, 4, {2}, SourceId::player);
  auto obs_e = make_set(rng, 1, 3, 4, {3}, SourceId::enemy);
  Graph<double> g1(false);
  auto o1 = se(g1, obs_p, obs_e, g1.constant(lat));

  auto obs_e2 = obs_e;
  obs_e2.tokens = obs_e.tokens.clone();
  obs_e2.tokens[0] += 1.5;  // perturb the enemy source only
  Graph<double> g2(false);
  auto o2 = se(g2, obs_p, obs_e2, g2.constant(lat));

  auto top1 = Tensor<double>(o1->value).reshaped({4, 8});
  auto top2 = Tensor<double>(o2->value).reshaped({4, 8});
  double top_diff = 0, bot_diff = 0;
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 8; ++c)
      top_diff = std::max(top_diff, std::abs(top1[r * 8 + c] - top2[r * 8 + c]));
  for (int r = 2; r < 4; ++r)
    for (int c = 0; c < 8; ++c)
      bot_diff = std::max(bot_diff, std::abs(top1[r * 8 + c] - top2[r * 8 + c]));
  CHECK(top_diff == 0.0);
  CHECK(bot_diff > 1e-9);
}

TEST_CASE("encode_sources fused: swapping contents and embeddings is a no-op") {
  for (EncKind kind : {EncKind::bert, EncKind::xattn}) {
    Rng rng(12);
    ParamStore<double> ps;
    SourceEncoder<double> se;
    se.init(ps, "se", CombineMode::fused, kind, 8, 4, 2, 2, 1, 4, rng);
    Tensor<double> lat = random_normal<double>(rng, {2, 2, 8});
    auto obs_p = make_set(rng, 2, 3, 4, {2, 1}, SourceId::player);
    auto obs_e = make_set(rng, 2, 4, 4, {3, 2}, SourceId::enemy);

    Graph<double> g1(false);
    auto o1 = se(g1, obs_p, obs_e, g1.constant(lat));

    std::swap(se.embed_p->value, se.embed_e->value);
    Graph<double> g2(false);
    auto o2 = se(g2, obs_e, obs_p, g2.constant(lat));
    CHECK(max_abs_diff(o1->value, o2->value) < 1e-10);
  }
}

TEST_CASE("encode_sources sequential composes the two encoders") {
  Rng rng(13);
  ParamStore<double> ps;
  SourceEncoder<double> se;
  se.init(ps, "se", CombineMode::sequential, EncKind::xattn, 8, 4, 2, 2, 1, 4, rng);
  Tensor<double> lat = random_normal<double>(rng, {1, 2, 8});
  auto obs_p = make_set(rng, 1, 3, 4, {2}, SourceId::player);
  auto obs_e = make_set(rng, 1, 3, 4, {1}, SourceId::enemy);

  Graph<double> g1(false);
  auto o1 = se(g1, obs_p, obs_e, g1.constant(lat));
  Graph<double> g2(false);
  auto o2 = se.enc_b(g2, obs_e, se.enc_a(g2, obs_p, g2.constant(lat)));
  CHECK(max_abs_diff(o1->value, o2->value) == 0.0);
}

TEST_CASE("encode_sources: all modes are padding invariant, handle empty sources") {
  for (CombineMode mode :
       {CombineMode::fused, CombineMode::piecewise, CombineMode::sequential}) {
    for (EncKind kind : {EncKind::bert, EncKind::xattn}) {
      Rng rng(14);
      ParamStore<double> ps;
      SourceEncoder<double> se;
      se.init(ps, "se", mode, kind, 8, 4, 2, 2, 1, 4, rng);
      Tensor<double> lat = random_normal<double>(rng, {2, 2, 8});

      // Item 1 has an empty enemy source; padding rows differ between runs.
      auto obs_p = make_set(rng, 2, 3, 4, {2, 2}, SourceId::player);
      auto obs_e = make_set(rng, 2, 3, 4, {2, 0}, SourceId::enemy);
      auto repad = [&](const TokenSet<double>& ts, std::uint64_t seed) {
        Rng prng(seed);
        TokenSet<double> out = ts;
        out.tokens = ts.tokens.clone();
        for (std::int64_t b = 0; b < ts.batch(); ++b)
          for (std::int64_t i = 0; i < ts.count(); ++i)
            if (!ts.valid[b * ts.count() + i])
              for (std::int64_t f = 0; f < ts.feat(); ++f)
                out.tokens[(b * ts.count() + i) * ts.feat() + f] = prng.normal();
        return out;
      };
      Graph<double> g1(false), g2(false);
      auto o1 = se(g1, obs_p, obs_e, g1.constant(lat));
      auto o2 = se(g2, repad(obs_p, 900), repad(obs_e, 901), g2.constant(lat));
      CHECK(max_abs_diff(o1->value, o2->value) < 1e-10);

      // Both sources empty for an item is degenerate.
      auto obs_p0 = make_set(rng, 2, 3, 4, {2, 0}, SourceId::player);
      Graph<double> g3(false);
      CHECK_THROWS_AS(se(g3, obs_p0, obs_e, g3.constant(lat)), ValueError);
    }
  }
}

TEST_CASE("piecewise combine requires an even latent count") {
  Rng rng(15);
  ParamStore<double> ps;
  SourceEncoder<double> se;
  CHECK_THROWS_AS(
      se.init(ps, "se", CombineMode::piecewise, EncKind::xattn, 8, 4, 3, 2, 1, 4, rng),
      ValueError);
}

TEST_CASE("encoder gradients agree with finite differences") {
  Rng rng(16);
  ParamStore<double> ps;
  XattnEncoder<double> xa;
  BertEncoder<double> bert;
  xa.init(ps, "x", 8, 5, 2, 1, 2, rng);
  bert.init(ps, "b", 8, 5, 2, 1, 2, rng);

  Tensor<double> lat0 = random_normal<double>(rng, {2, 2, 8}, 0.5);
  Tensor<double> kv0 = random_normal<double>(rng, {2, 3, 5}, 0.5);
  Tensor<std::uint8_t> valid = Tensor<std::uint8_t>::from({2, 3}, {1, 0, 0, 1, 1, 1});

  // Through the latent path.
  fd_check(
      [&](Graph<double>& g, std::vector<Var<double>>& vs) {
        return project(g, xa.run(g, g.constant(kv0), valid, vs[0]));
      },
      {lat0}, 1e-5, 1e-4);
  fd_check(
      [&](Graph<double>& g, std::vector<Var<double>>& vs) {
        return project(g, bert.run(g, g.constant(kv0), valid, vs[0]));
      },
      {lat0}, 1e-5, 1e-4);

  // Through the observation path (keys and values).
  fd_check(
      [&](Graph<double>& g, std::vector<Var<double>>& vs) {
        return project(g, xa.run(g, vs[0], valid, g.constant(lat0)));
      },
      {kv0}, 1e-5, 1e-4);
  fd_check(
      [&](Graph<double>& g, std::vector<Var<double>>& vs) {
        return project(g, bert.run(g, vs[0], valid, g.constant(lat0)));
      },
      {kv0}, 1e-5, 1e-4);
}
