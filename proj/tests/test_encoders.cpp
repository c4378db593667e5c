#include <doctest.h>

#include "scanenc/encoders.hpp"
#include "test_support.hpp"

#include <cmath>
#include <functional>
#include <vector>

using namespace scanenc;
using testsup::max_abs_diff;
using testsup::project;

namespace {

EncoderConfig tiny_cfg(SeqKind k) {
  EncoderConfig c;
  c.kind = k;
  c.n_l = 4;
  c.d_l = 16;
  c.d_o = 6;
  c.n_heads = 4;
  c.ff_mult = 2;
  c.cycles = 2;
  c.gamma = 2.0;
  c.per_step_layers = 1;
  c.temporal_layers = 2;
  c.max_timesteps = 48;
  return c;
}

// Random padded sequence batch. Every (b, t) item keeps at least one valid
// player token; enemies listed in empty_e_steps are fully masked out.
SeqObs<double> make_seq(Rng& rng, int B, int T, int Np, int Ne, int d_o,
                        bool random_masks = false,
                        const std::vector<int>& empty_e_steps = {}) {
  SeqObs<double> o;
  o.p_tokens = random_normal<double>(rng, {B, T, Np, d_o}, 0.8);
  o.e_tokens = random_normal<double>(rng, {B, T, Ne, d_o}, 0.8);
  o.p_valid = Tensor<std::uint8_t>::full({B, T, Np}, 1);
  o.e_valid = Tensor<std::uint8_t>::full({B, T, Ne}, 1);
  if (random_masks) {
    for (std::int64_t i = 0; i < o.p_valid.size(); ++i)
      if (i % Np != 0 && rng.uniform() < 0.3) o.p_valid[i] = 0;
    for (std::int64_t i = 0; i < o.e_valid.size(); ++i)
      if (rng.uniform() < 0.3) o.e_valid[i] = 0;
  }
  for (int t : empty_e_steps)
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < Ne; ++i) o.e_valid[(std::int64_t(b) * T + t) * Ne + i] = 0;
  return o;
}

// Largest |difference| within timestep t of two [B, T, n_l, d_l] outputs.
double step_diff(const Tensor<double>& a, const Tensor<double>& b, int t) {
  const std::int64_t B = a.dim(0), T = a.dim(1), inner = std::int64_t(a.dim(2)) * a.dim(3);
  double m = 0;
  for (std::int64_t bi = 0; bi < B; ++bi)
    for (std::int64_t i = 0; i < inner; ++i) {
      std::int64_t at = (bi * T + t) * inner + i;
      m = std::max(m, std::abs(a[at] - b[at]));
    }
  return m;
}

double l2_norm(const Tensor<double>& t) {
  double s = 0;
  for (std::int64_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
  return std::sqrt(s);
}

// Finite-difference check of parameter gradients through a rebuildable loss.
// Checks a spread of elements from every parameter in the store.
void fd_params(ParamStore<double>& ps,
               const std::function<Var<double>(Graph<double>&)>& loss_of, double eps,
               double tol, int checks_per_param) {
  ps.zero_grad();
  Graph<double> g;
  auto loss = loss_of(g);
  g.backward(loss);

  auto eval = [&] {
    Graph<double> ge(false);
    return loss_of(ge)->value[0];
  };

  for (auto& [name, p] : ps) {
    INFO("parameter ", name);
    REQUIRE_FALSE(p.grad.empty());
    const std::int64_t sz = p.value.size();
    const std::int64_t stride = std::max<std::int64_t>(1, sz / checks_per_param);
    for (std::int64_t j = 0; j < sz; j += stride) {
      const double old = p.value[j];
      p.value[j] = old + eps;
      const double up = eval();
      p.value[j] = old - eps;
      const double dn = eval();
      p.value[j] = old;
      const double numeric = (up - dn) / (2 * eps);
      const double analytic = p.grad[j];
      const double denom = std::max({1.0, std::abs(numeric), std::abs(analytic)});
      INFO("element ", j, ": analytic ", analytic, " numeric ", numeric);
      CHECK(std::abs(analytic - numeric) / denom <= tol);
    }
  }
}

}  // namespace

TEST_CASE("every encoder kind is causal under future perturbation") {
  Rng pick(19);
  for (SeqKind k : {SeqKind::scan, SeqKind::st_transformer, SeqKind::rnn, SeqKind::gru,
                    SeqKind::lstm}) {
    INFO("kind ", seq_kind_name(k));
    Rng rng(21);
    ParamStore<double> ps;
    auto enc = make_encoder<double>(ps, "enc", tiny_cfg(k), rng);
    Rng drng(22);
    const int T = 6;
    auto obs = make_seq(drng, 2, T, 3, 3, 6);
    Graph<double> g1(false);
    auto o1 = enc->forward(g1, obs);

    const int tstar = 1 + int(pick.uniform_int(T - 1));
    SeqObs<double> obs2 = obs;
    obs2.p_tokens = obs.p_tokens.clone();
    obs2.p_tokens[((std::int64_t(1) * T + tstar) * 3 + 0) * 6 + 0] += 2.0;
    Graph<double> g2(false);
    auto o2 = enc->forward(g2, obs2);

    for (int t = 0; t < tstar; ++t) CHECK(step_diff(o1->value, o2->value, t) == 0.0);
    CHECK(step_diff(o1->value, o2->value, tstar) > 1e-9);
  }
}

TEST_CASE("scan: a length-1 sequence equals the unscanned block stack") {
  EncoderConfig cfg = tiny_cfg(SeqKind::scan);
  Rng r1(31), r2(31);
  ParamStore<double> ps1, ps2;
  auto with_scan = make_encoder<double>(ps1, "enc", cfg, r1);
  cfg.no_scan = true;
  auto without = make_encoder<double>(ps2, "enc", cfg, r2);

  Rng drng(32);
  auto obs = make_seq(drng, 2, 1, 3, 2, 6);
  Graph<double> ga(false), gb(false);
  CHECK(max_abs_diff(with_scan->forward(ga, obs)->value,
                     without->forward(gb, obs)->value) == 0.0);
}

TEST_CASE("scan: gamma=1 accumulates linearly, gamma=2 stays bounded") {
  for (double gamma : {1.0, 2.0}) {
    EncoderConfig cfg = tiny_cfg(SeqKind::scan);
    cfg.cycles = 1;
    cfg.gamma = gamma;
    Rng rng(33);
    ParamStore<double> ps;
    auto enc = make_encoder<double>(ps, "enc", cfg, rng);

    Rng drng(34);
    auto one = make_seq(drng, 1, 1, 3, 2, 6);  // the same observation every step
    auto p = one.step_p(0);
    auto e = one.step_e(0);
    auto state = enc->make_state(1);
    std::vector<double> norms;
    for (int t = 0; t < 32; ++t) {
      Graph<double> g(false);
      enc->step(g, *state, p, e);
      norms.push_back(l2_norm(dynamic_cast<ScanEncState<double>&>(*state).acc[0].acc));
    }
    const double ratio = norms[31] / norms[15];
    if (gamma == 1.0) {
      CHECK(ratio == doctest::Approx(2.0).epsilon(0.01));  // (t+1) growth
    } else {
      CHECK(ratio == doctest::Approx(1.0).epsilon(0.01));  // geometric ceiling
      CHECK(norms[31] < 2.01 * norms[0]);
    }
  }
}

TEST_CASE("incremental stepping matches the batch forward") {
  for (SeqKind k : {SeqKind::scan, SeqKind::st_transformer, SeqKind::rnn, SeqKind::gru,
                    SeqKind::lstm}) {
    INFO("kind ", seq_kind_name(k));
    Rng rng(41);
    ParamStore<double> ps;
    auto enc = make_encoder<double>(ps, "enc", tiny_cfg(k), rng);

    Rng drng(42);
    const int B = 2, T = 41;
    auto obs = make_seq(drng, B, T, 3, 2, 6, true, {5, 17});
    Graph<double> g(false);
    Tensor<double> batch = enc->forward(g, obs)->value;

    auto state = enc->make_state(B);
    double worst = 0;
    for (int t = 0; t < T; ++t) {
      Graph<double> gs(false);
      auto out = enc->step(gs, *state, obs.step_p(t), obs.step_e(t));
      Tensor<double> want = batch.clone().reshaped({B * T, 4 * 16});
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < 4 * 16; ++i)
          worst = std::max(worst,
                           std::abs(out->value[std::int64_t(b) * 4 * 16 + i] -
                                    want[(std::int64_t(b) * T + t) * 4 * 16 + i]));
    }
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("per-step work: scan stays flat, st transformer grows") {
  Rng rng(51);
  ParamStore<double> ps;
  auto scan = make_encoder<double>(ps, "scan", tiny_cfg(SeqKind::scan), rng);
  auto st = make_encoder<double>(ps, "st", tiny_cfg(SeqKind::st_transformer), rng);

  Rng drng(52);
  const int B = 2, T = 12;
  auto obs = make_seq(drng, B, T, 3, 2, 6);

  auto scan_state = scan->make_state(B);
  std::vector<std::int64_t> scan_work, scan_bytes;
  for (int t = 0; t < T; ++t) {
    attn_stats::reset();
    Graph<double> g(false);
    scan->step(g, *scan_state, obs.step_p(t), obs.step_e(t));
    scan_work.push_back(attn_stats::matrix_elements);
    scan_bytes.push_back(scan_state->byte_size());
  }
  for (int t = 1; t < T; ++t) {
    CHECK(scan_work[size_t(t)] == scan_work[0]);
    CHECK(scan_bytes[size_t(t)] == scan_bytes[0]);
  }

  auto st_state = st->make_state(B);
  std::vector<std::int64_t> st_work, st_bytes;
  for (int t = 0; t < T; ++t) {
    attn_stats::reset();
    Graph<double> g(false);
    st->step(g, *st_state, obs.step_p(t), obs.step_e(t));
    st_work.push_back(attn_stats::matrix_elements);
    st_bytes.push_back(st_state->byte_size());
  }
  const std::int64_t per_chunk = 2LL * 2 * B * 4 * 16 * sizeof(double);  // layers * k+v
  for (int t = 0; t < T; ++t) {
    if (t > 0) CHECK(st_work[size_t(t)] > st_work[size_t(t) - 1]);
    CHECK(st_bytes[size_t(t)] == per_chunk * (t + 1));
  }
}

TEST_CASE("scan variants reshape the cycle blocks") {
  EncoderConfig cfg = tiny_cfg(SeqKind::scan);

  SUBCASE("dropping latent self-attention removes those blocks") {
    cfg.skip_self_attn = true;
    Rng rng(61);
    ParamStore<double> ps;
    auto enc = make_encoder<double>(ps, "enc", cfg, rng);
    CHECK_FALSE(ps.contains("enc.cyc0.self.wq.w"));
    CHECK(ps.contains("enc.cyc0.xp.wq.w"));
    Rng drng(62);
    auto obs = make_seq(drng, 1, 3, 3, 2, 6);
    Graph<double> g(false);
    CHECK(enc->forward(g, obs)->value.all_finite());
  }

  SUBCASE("sampling the input once leaves later cycles self-only") {
    cfg.sample_input_once = true;
    Rng rng(63);
    ParamStore<double> ps;
    auto enc = make_encoder<double>(ps, "enc", cfg, rng);
    CHECK(ps.contains("enc.cyc0.xp.wq.w"));
    CHECK_FALSE(ps.contains("enc.cyc1.xp.wq.w"));
    CHECK(ps.contains("enc.cyc1.self.wq.w"));

    Rng drng(64);
    const int B = 1, T = 5;
    auto obs = make_seq(drng, B, T, 3, 2, 6);
    Graph<double> g(false);
    Tensor<double> batch = enc->forward(g, obs)->value;
    auto state = enc->make_state(B);
    double worst = 0;
    for (int t = 0; t < T; ++t) {
      Graph<double> gs(false);
      auto out = enc->step(gs, *state, obs.step_p(t), obs.step_e(t));
      worst = std::max(worst, step_diff(batch, batch, 0));  // placeholder keeps shape
      for (std::int64_t i = 0; i < out->value.size(); ++i)
        worst = std::max(worst, std::abs(out->value[i] -
                                         batch[(std::int64_t(0) * T + t) * 64 + i]));
    }
    CHECK(worst < 1e-9);
  }

  SUBCASE("invalid configurations are rejected") {
    EncoderConfig bad = cfg;
    bad.skip_self_attn = true;
    bad.sample_input_once = true;
    Rng rng(65);
    ParamStore<double> ps;
    CHECK_THROWS_AS(make_encoder<double>(ps, "enc", bad, rng), ValueError);
    bad = cfg;
    bad.cycles = 0;
    CHECK_THROWS_AS(make_encoder<double>(ps, "e2", bad, rng), ValueError);
    bad = cfg;
    bad.gamma = 0.5;
    CHECK_THROWS_AS(make_encoder<double>(ps, "e3", bad, rng), ValueError);
  }
}

TEST_CASE("parameter budgets at the reference configuration") {
  auto count = [](const EncoderConfig& cfg) {
    ParamStore<double> ps;
    Rng rng(71);
    make_encoder<double>(ps, "enc", cfg, rng);
    return ps.total_params();
  };
  EncoderConfig base;
  base.kind = SeqKind::scan;
  base.n_l = 8;
  base.d_l = 128;
  base.d_o = 48;
  base.n_heads = 4;
  base.ff_mult = 4;

  EncoderConfig scan2 = base, scan4 = base, scan6 = base, scan4once = base;
  scan2.cycles = 2;
  scan4.cycles = 4;
  scan6.cycles = 6;
  scan4once.cycles = 4;
  scan4once.sample_input_once = true;

  EncoderConfig st = base;
  st.kind = SeqKind::st_transformer;
  st.combine = CombineMode::piecewise;
  st.per_step = EncKind::xattn;
  st.per_step_layers = 2;
  st.temporal_layers = 4;
  st.max_timesteps = 64;

  const std::int64_t c2 = count(scan2), c4 = count(scan4), c6 = count(scan6);
  const std::int64_t c4o = count(scan4once), cst = count(st);
  CHECK(c2 == 669312);
  CHECK(c4 == 1331072);
  CHECK(c6 == 1992832);
  CHECK(c4o == 933248);
  CHECK(cst == 1779456);

  // Strict ordering, and each within 20% of its target budget (millions).
  CHECK(c2 < c4);
  CHECK(c4 < c6);
  CHECK(c4 < cst);
  auto within = [](std::int64_t n, double target_m) {
    return std::abs(n / 1e6 - target_m) / target_m <= 0.20;
  };
  CHECK(within(c2, 0.65));
  CHECK(within(c4, 1.31));
  CHECK(within(c6, 1.91));
  CHECK(within(c4o, 0.91));
  CHECK(within(cst, 2.10));
}

TEST_CASE("recurrent family: zero parameters and inputs hold hidden at zero") {
  for (SeqKind k : {SeqKind::rnn, SeqKind::gru, SeqKind::lstm}) {
    INFO("kind ", seq_kind_name(k));
    Rng rng(81);
    ParamStore<double> ps;
    auto enc = make_encoder<double>(ps, "enc", tiny_cfg(k), rng);
    for (auto& [name, p] : ps) p.value.fill(0);

    SeqObs<double> obs;
    obs.p_tokens = Tensor<double>::zeros({1, 4, 3, 6});
    obs.e_tokens = Tensor<double>::zeros({1, 4, 2, 6});
    obs.p_valid = Tensor<std::uint8_t>::full({1, 4, 3}, 1);
    obs.e_valid = Tensor<std::uint8_t>::full({1, 4, 2}, 1);
    Graph<double> g(false);
    auto out = enc->forward(g, obs);
    for (std::int64_t i = 0; i < out->value.size(); ++i) CHECK(out->value[i] == 0.0);
  }
}

TEST_CASE("recurrent cells match their direct equations") {
  const int d = 3, N = 2, T = 6;
  Rng rng(91);
  ParamStore<double> ps;
  RnnCell<double> rnn;
  GruCell<double> gru;
  LstmCell<double> lstm;
  rnn.init(ps, "rnn", d, rng);
  gru.init(ps, "gru", d, rng);
  lstm.init(ps, "lstm", d, rng);

  std::vector<Tensor<double>> xs;
  for (int t = 0; t < T; ++t) xs.push_back(random_normal<double>(rng, {N, d}, 0.7));
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  auto at = [&](const Parameter<double>* p, int r, int c, int width) {
    return p->value[std::int64_t(r) * width + c];
  };
  // gate(cell, which, x_row, h_row) = x W_ih[:, block] + b_ih + h W_hh[:, block] + b_hh
  auto gate = [&](const Linear<double>& ih, const Linear<double>& hh, int blocks,
                  int block, const double* x, const double* h, int j) {
    const int width = blocks * d;
    const int col = block * d + j;
    double v = ih.b->value[col] + hh.b->value[col];
    for (int i = 0; i < d; ++i) {
      v += x[i] * at(ih.w, i, col, width);
      v += h[i] * at(hh.w, i, col, width);
    }
    return v;
  };

  SUBCASE("elman") {
    Tensor<double> h = Tensor<double>::zeros({N, d});
    Graph<double> g(false);
    Var<double> hv = g.constant(h.clone());
    for (int t = 0; t < T; ++t) {
      hv = rnn(g, g.constant(xs[size_t(t)]), hv);
      Tensor<double> h2({N, d});
      for (int r = 0; r < N; ++r)
        for (int j = 0; j < d; ++j)
          h2[r * d + j] = std::tanh(gate(rnn.ih, rnn.hh, 1, 0, xs[size_t(t)].data() + r * d,
                                         h.data() + r * d, j));
      h = h2;
      CHECK(max_abs_diff(hv->value, h) < 1e-12);
    }
  }

  SUBCASE("gru") {
    Tensor<double> h = Tensor<double>::zeros({N, d});
    Graph<double> g(false);
    Var<double> hv = g.constant(h.clone());
    for (int t = 0; t < T; ++t) {
      hv = gru(g, g.constant(xs[size_t(t)]), hv);
      Tensor<double> h2({N, d});
      for (int r = 0; r < N; ++r)
        for (int j = 0; j < d; ++j) {
          const double* x = xs[size_t(t)].data() + r * d;
          const double* hp = h.data() + r * d;
          // r and z mix both inputs; the candidate gates the hidden half by r.
          const double rg = sig(gate(gru.ih, gru.hh, 3, 0, x, hp, j));
          const double zg = sig(gate(gru.ih, gru.hh, 3, 1, x, hp, j));
          double hn = gru.hh.b->value[2 * d + j];
          double xn = gru.ih.b->value[2 * d + j];
          for (int i = 0; i < d; ++i) {
            xn += x[i] * at(gru.ih.w, i, 2 * d + j, 3 * d);
            hn += hp[i] * at(gru.hh.w, i, 2 * d + j, 3 * d);
          }
          const double n = std::tanh(xn + rg * hn);
          h2[r * d + j] = (1.0 - zg) * n + zg * hp[j];
        }
      h = h2;
      CHECK(max_abs_diff(hv->value, h) < 1e-12);
    }
  }

  SUBCASE("lstm") {
    Tensor<double> h = Tensor<double>::zeros({N, d});
    Tensor<double> c = Tensor<double>::zeros({N, d});
    Graph<double> g(false);
    Var<double> hv = g.constant(h.clone());
    Var<double> cv = g.constant(c.clone());
    for (int t = 0; t < T; ++t) {
      auto [h2v, c2v] = lstm(g, g.constant(xs[size_t(t)]), hv, cv);
      hv = h2v;
      cv = c2v;
      Tensor<double> h2({N, d}), c2({N, d});
      for (int r = 0; r < N; ++r)
        for (int j = 0; j < d; ++j) {
          const double* x = xs[size_t(t)].data() + r * d;
          const double* hp = h.data() + r * d;
          const double ig = sig(gate(lstm.ih, lstm.hh, 4, 0, x, hp, j));
          const double fg = sig(gate(lstm.ih, lstm.hh, 4, 1, x, hp, j));
          const double gg = std::tanh(gate(lstm.ih, lstm.hh, 4, 2, x, hp, j));
          const double og = sig(gate(lstm.ih, lstm.hh, 4, 3, x, hp, j));
          c2[r * d + j] = fg * c[r * d + j] + ig * gg;
          h2[r * d + j] = og * std::tanh(c2[r * d + j]);
        }
      h = h2;
      c = c2;
      CHECK(max_abs_diff(hv->value, h) < 1e-12);
      CHECK(max_abs_diff(cv->value, c) < 1e-12);
    }
  }
}

TEST_CASE("recurrent start state: learned differs from zeros at the first step") {
  EncoderConfig learned = tiny_cfg(SeqKind::lstm);
  EncoderConfig zeros = learned;
  zeros.init = InitKind::zeros;
  Rng r1(95), r2(95);
  ParamStore<double> ps1, ps2;
  auto e1 = make_encoder<double>(ps1, "enc", learned, r1);
  auto e2 = make_encoder<double>(ps2, "enc", zeros, r2);
  CHECK(ps1.contains("enc.h0"));
  CHECK(ps1.contains("enc.c0"));
  CHECK_FALSE(ps2.contains("enc.h0"));

  Rng drng(96);
  auto obs = make_seq(drng, 1, 1, 3, 2, 6);
  Graph<double> ga(false), gb(false);
  CHECK(max_abs_diff(e1->forward(ga, obs)->value, e2->forward(gb, obs)->value) > 1e-9);
}

TEST_CASE("st transformer rejects sequences beyond the position table") {
  EncoderConfig cfg = tiny_cfg(SeqKind::st_transformer);
  cfg.max_timesteps = 4;
  Rng rng(97);
  ParamStore<double> ps;
  auto enc = make_encoder<double>(ps, "enc", cfg, rng);
  Rng drng(98);
  auto obs = make_seq(drng, 1, 5, 3, 2, 6);
  Graph<double> g(false);
  CHECK_THROWS_AS(enc->forward(g, obs), ValueError);

  auto state = enc->make_state(1);
  for (int t = 0; t < 4; ++t) {
    Graph<double> gs(false);
    enc->step(gs, *state, obs.step_p(t), obs.step_e(t));
  }
  Graph<double> gs(false);
  CHECK_THROWS_AS(enc->step(gs, *state, obs.step_p(4), obs.step_e(4)), ValueError);
}

TEST_CASE("st transformer: the time embedding separates identical observations") {
  EncoderConfig cfg = tiny_cfg(SeqKind::st_transformer);
  Rng rng(99);
  ParamStore<double> ps;
  auto enc = make_encoder<double>(ps, "enc", cfg, rng);
  Rng drng(100);
  auto one = make_seq(drng, 1, 1, 3, 2, 6);
  SeqObs<double> rep;
  const int T = 3;
  rep.p_tokens = Tensor<double>({1, T, 3, 6});
  rep.e_tokens = Tensor<double>({1, T, 2, 6});
  rep.p_valid = Tensor<std::uint8_t>::full({1, T, 3}, 1);
  rep.e_valid = Tensor<std::uint8_t>::full({1, T, 2}, 1);
  for (int t = 0; t < T; ++t) {
    std::memcpy(rep.p_tokens.data() + std::int64_t(t) * 18, one.p_tokens.data(),
                18 * sizeof(double));
    std::memcpy(rep.e_tokens.data() + std::int64_t(t) * 12, one.e_tokens.data(),
                12 * sizeof(double));
  }
  Graph<double> g(false);
  auto out = enc->forward(g, rep);
  CHECK(step_diff(out->value, out->value, 0) == 0.0);
  double diff01 = 0;
  for (int i = 0; i < 64; ++i)
    diff01 = std::max(diff01, std::abs(out->value[i] - out->value[64 + i]));
  CHECK(diff01 > 1e-9);
}

TEST_CASE("encoder parameter gradients agree with finite differences") {
  Rng drng(110);
  auto obs = make_seq(drng, 1, 3, 3, 2, 6);

  auto check_kind = [&](SeqKind k) {
    INFO("kind ", seq_kind_name(k));
    EncoderConfig cfg = tiny_cfg(k);
    cfg.n_l = 2;
    cfg.d_l = 8;
    cfg.n_heads = 2;
    cfg.cycles = 2;
    cfg.temporal_layers = 1;
    Rng rng(111);
    ParamStore<double> ps;
    auto enc = make_encoder<double>(ps, "enc", cfg, rng);
    fd_params(
        ps, [&](Graph<double>& g) { return project(g, enc->forward(g, obs)); }, 1e-5,
        1e-4, 6);
  };
  check_kind(SeqKind::scan);
  check_kind(SeqKind::st_transformer);
  check_kind(SeqKind::gru);
}
