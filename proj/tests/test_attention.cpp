// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "flexattn/attention.hpp"

using namespace flexattn;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.src_vocab = 8;
  cfg.tgt_vocab = 8;
  cfg.embed_dim = 2;
  cfg.hidden_dim = 3;
  cfg.preout_dim = 3;
  cfg.max_len = 32;
  cfg.attention = AttentionKind::kFlexible;
  return cfg;
}

std::vector<real> random_vec(Rng& rng, int n, real lo = -1, real hi = 1) {
  std::vector<real> v(static_cast<size_t>(n));
  for (real& x : v) x = rng.uniform(lo, hi);
  return v;
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Brute-force evaluation of one flexible step in plain double arithmetic,
// fully independent of the tape implementation.
struct BruteFlexible {
  std::vector<double> weights;  // full length, zeros outside the window
  int lo = 0, hi = 0;
  double g = 0;
  double p_t = 0;
  std::vector<double> context;
};

BruteFlexible brute_flexible(const ModelParams& params, const ModelConfig& cfg,
                             const std::vector<real>& h_prev,
                             const std::vector<std::vector<real>>& enc,
                             const std::vector<real>& i_emb, double p_prev, int t,
                             double tau) {
  int S = static_cast<int>(enc.size());
  int h = cfg.hidden_dim;
  const Tensor& wg = params.at("strength.W_g");
  const Tensor& vg = params.at("strength.v_g");
  double acc = 0;
  for (int i = 0; i < h; ++i) {
    double z = 0;
    for (int j = 0; j < h; ++j) z += wg.v[static_cast<size_t>(i * (h + cfg.embed_dim) + j)] * h_prev[static_cast<size_t>(j)];
    for (int j = 0; j < cfg.embed_dim; ++j)
      z += wg.v[static_cast<size_t>(i * (h + cfg.embed_dim) + h + j)] * i_emb[static_cast<size_t>(j)];
    acc += vg.v[static_cast<size_t>(i)] * std::tanh(z);
  }
  BruteFlexible out;
  out.g = sigmoid_d(acc + params.at("strength.b_g").v[0]);

  double sig = cfg.penalty_sigma;
  auto pen = [&](int s) {
    double d = (s - p_prev) * (s - p_prev) / (2 * sig * sig);
    return out.g * d;
  };
  out.lo = -1;
  out.hi = -1;
  if (t == 1 || std::isinf(tau)) {
    out.lo = 0;
    out.hi = S - 1;
  } else {
    for (int s = 0; s < S; ++s)
      if (pen(s) < tau) {
        if (out.lo < 0) out.lo = s;
        out.hi = s;
      }
    if (out.lo < 0) {
      int p = static_cast<int>(std::lround(p_prev));
      out.lo = out.hi = std::min(std::max(p, 0), S - 1);
    }
  }

  const Tensor& wa = params.at("att.W_a");
  const Tensor& va = params.at("att.v_a");
  int s2 = cfg.enc_state_dim();
  std::vector<double> logits;
  for (int s = out.lo; s <= out.hi; ++s) {
    double sc = 0;
    for (int i = 0; i < h; ++i) {
      double z = 0;
      for (int j = 0; j < h; ++j)
        z += wa.v[static_cast<size_t>(i * (h + s2) + j)] * h_prev[static_cast<size_t>(j)];
      for (int j = 0; j < s2; ++j)
        z += wa.v[static_cast<size_t>(i * (h + s2) + h + j)] * enc[static_cast<size_t>(s)][static_cast<size_t>(j)];
      sc += va.v[static_cast<size_t>(i)] * std::tanh(z);
    }
    logits.push_back(t == 1 ? sc : sc - pen(s));
  }
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  double z = 0;
  for (double x : logits) z += std::exp(x - mx);
  out.weights.assign(static_cast<size_t>(S), 0);
  out.context.assign(static_cast<size_t>(s2), 0);
  for (int s = out.lo; s <= out.hi; ++s) {
    double w = std::exp(logits[static_cast<size_t>(s - out.lo)] - mx) / z;
    out.weights[static_cast<size_t>(s)] = w;
    out.p_t += w * s;
    for (int j = 0; j < s2; ++j)
      out.context[static_cast<size_t>(j)] += w * enc[static_cast<size_t>(s)][static_cast<size_t>(j)];
  }
  return out;
}

struct StepFixture {
  ModelConfig cfg = tiny_config();
  ModelParams params;
  int S = 5;
  std::vector<real> h_prev_v, i_emb_v;
  std::vector<std::vector<real>> enc_rows;

  explicit StepFixture(uint64_t seed) : params(ModelParams::init(cfg, seed)) {
    Rng rng(seed + 100);
    h_prev_v = random_vec(rng, cfg.hidden_dim);
    i_emb_v = random_vec(rng, cfg.embed_dim);
    for (int s = 0; s < S; ++s) enc_rows.push_back(random_vec(rng, cfg.enc_state_dim()));
  }

  AttendOut run(Tape& tape, AttendMode mode, real tau, int t, real p_prev,
                Meter* meter = nullptr) {
    std::vector<real> flat;
    for (auto& row : enc_rows) flat.insert(flat.end(), row.begin(), row.end());
    AttendIn in;
    in.h_prev = tape.constant({cfg.hidden_dim}, h_prev_v);
    in.feedback_embed = tape.constant({cfg.embed_dim}, i_emb_v);
    in.enc_states = tape.constant({S, cfg.enc_state_dim()}, flat);
    in.keys = attention_keys(tape, params, cfg, in.enc_states);
    in.S = S;
    in.t = t;
    in.mode = mode;
    in.tau = tau;
    in.meter = meter;
    if (mode == AttendMode::kTrain && t > 1)
      in.p_prev_var = tape.scalar(p_prev);
    else
      in.p_prev_val = p_prev;
    return attend(tape, params, cfg, in);
  }
};

}  // namespace

TEST_CASE("distance") {
  CHECK(distance(7, 7, 1.5) == 0);
  CHECK(distance(10, 7, 1.5) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(distance(8.5, 7, 1.5) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("attention_center") {
  std::vector<real> onehot = {0, 0, 0, 1};
  CHECK(attention_center(onehot) == 3.0);
  std::vector<real> sym = {0.5, 0.5};
  CHECK(attention_center(sym) == doctest::Approx(0.5).epsilon(1e-15));
  std::vector<real> w = {0.2, 0.3, 0.5};
  CHECK(attention_center(w) == doctest::Approx(1.3).epsilon(1e-12));
}

TEST_CASE("score: zero parameter cases") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 1);
  std::fill(params.at("att.v_a").v.begin(), params.at("att.v_a").v.end(), real(0));
  Tape tape;
  Var h = tape.constant({3}, {0.3, -0.1, 0.7});
  Var e = tape.constant({6}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  CHECK(tape.scalar_val(score(tape, params, cfg, h, e)) == 0);

  ModelParams p2 = ModelParams::init(cfg, 2);
  Var z3 = tape.zeros({3});
  Var z6 = tape.zeros({6});
  CHECK(tape.scalar_val(score(tape, p2, cfg, z3, z6)) == 0);
}

TEST_CASE("score: hand-set parameters match hand arithmetic to 1e-12") {
  ModelConfig cfg = tiny_config();
  cfg.hidden_dim = 1;
  ModelParams params = ModelParams::init(cfg, 3);
  params.at("att.W_a").v = {0.2, -0.4, 0.6};  // [1 x (1+2)]
  params.at("att.v_a").v = {0.7};
  Tape tape;
  Var h = tape.constant({1}, {0.3});
  Var e = tape.constant({2}, {0.5, -0.2});
  double expect = 0.7 * std::tanh(0.2 * 0.3 - 0.4 * 0.5 + 0.6 * -0.2);
  CHECK(tape.scalar_val(score(tape, params, cfg, h, e)) ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("score_window agrees with the single-pair score everywhere") {
  StepFixture fx(11);
  Tape tape;
  std::vector<real> flat;
  for (auto& row : fx.enc_rows) flat.insert(flat.end(), row.begin(), row.end());
  Var enc = tape.constant({fx.S, fx.cfg.enc_state_dim()}, flat);
  Var keys = attention_keys(tape, fx.params, fx.cfg, enc);
  Var h = tape.constant({fx.cfg.hidden_dim}, fx.h_prev_v);
  Meter meter;
  Var sw = score_window(tape, fx.params, fx.cfg, keys, h, 0, fx.S - 1, &meter);
  CHECK(meter.score_evals == static_cast<uint64_t>(fx.S));
  for (int s = 0; s < fx.S; ++s) {
    Var e = tape.constant({fx.cfg.enc_state_dim()}, fx.enc_rows[static_cast<size_t>(s)]);
    real one = tape.scalar_val(score(tape, fx.params, fx.cfg, h, e));
    CHECK(tape.val(sw)[static_cast<size_t>(s)] == doctest::Approx(one).epsilon(1e-12));
  }
  Var part = score_window(tape, fx.params, fx.cfg, keys, h, 1, 3, nullptr);
  for (int s = 1; s <= 3; ++s)
    CHECK(tape.val(part)[static_cast<size_t>(s - 1)] ==
          doctest::Approx(tape.val(sw)[static_cast<size_t>(s)]).epsilon(1e-14));
}

TEST_CASE("global_alignment") {
  Tape tape;
  Var u = global_alignment(tape, tape.constant({4}, {2, 2, 2, 2}));
  for (real w : tape.val(u)) CHECK(w == doctest::Approx(0.25).epsilon(1e-14));

  Var sat = global_alignment(tape, tape.constant({3}, {50, 0, 0}));
  CHECK(tape.val(sat)[0] >= 1 - 1e-20);

  Var sm = global_alignment(tape, tape.constant({3}, {1, 2, 3}));
  CHECK(tape.val(sm)[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
  CHECK(tape.val(sm)[1] == doctest::Approx(0.24472847105479767).epsilon(1e-12));
  CHECK(tape.val(sm)[2] == doctest::Approx(0.66524095577482178).epsilon(1e-12));
}

TEST_CASE("context_vector") {
  Tape tape;
  Var enc = tape.constant({3, 2}, {1, 0, 0, 1, 2, 2});
  Var onehot = tape.constant({3}, {0, 0, 1});
  Var c = context_vector(tape, onehot, enc);
  CHECK(tape.val(c)[0] == 2);
  CHECK(tape.val(c)[1] == 2);

  Var same = tape.constant({2, 2}, {3, 4, 3, 4});
  Var uni = tape.constant({2}, {0.5, 0.5});
  Var c2 = context_vector(tape, uni, same);
  CHECK(tape.val(c2)[0] == doctest::Approx(3).epsilon(1e-15));
  CHECK(tape.val(c2)[1] == doctest::Approx(4).epsilon(1e-15));

  Var id = tape.constant({2, 2}, {1, 0, 0, 1});
  Var c3 = context_vector(tape, uni, id);
  CHECK(tape.val(c3)[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(tape.val(c3)[1] == doctest::Approx(0.5).epsilon(1e-15));

  CHECK_THROWS_AS(context_vector(tape, tape.constant({2}, {1, 0}), enc), ShapeError);
}

TEST_CASE("penalty_strength") {
  ModelConfig cfg = tiny_config();
  SUBCASE("all-zero parameters give 0.5") {
    ModelParams params = ModelParams::init(cfg, 1);
    for (auto* n : {"strength.W_g", "strength.v_g", "strength.b_g"})
      std::fill(params.at(n).v.begin(), params.at(n).v.end(), real(0));
    Tape tape;
    Var g = penalty_strength(tape, params, cfg, tape.zeros({3}), tape.zeros({2}));
    CHECK(tape.scalar_val(g) == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("saturates toward 1 as b_g grows") {
    ModelParams params = ModelParams::init(cfg, 2);
    params.at("strength.b_g").v[0] = 20;
    Tape tape;
    Var g = penalty_strength(tape, params, cfg, tape.zeros({3}), tape.zeros({2}));
    CHECK(tape.scalar_val(g) > 0.999);
  }
  SUBCASE("hand-set parameters match hand arithmetic") {
    ModelConfig c1 = cfg;
    c1.hidden_dim = 1;
    c1.embed_dim = 1;
    ModelParams params = ModelParams::init(c1, 3);
    params.at("strength.W_g").v = {0.3, -0.5};
    params.at("strength.v_g").v = {0.9};
    params.at("strength.b_g").v = {0.1};
    Tape tape;
    Var g = penalty_strength(tape, params, c1, tape.constant({1}, {0.2}),
                             tape.constant({1}, {0.4}));
    double expect = sigmoid_d(0.9 * std::tanh(0.3 * 0.2 - 0.5 * 0.4) + 0.1);
    CHECK(tape.scalar_val(g) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("flexible_alignment") {
  Tape tape;
  SUBCASE("zero penalties reduce to global alignment exactly") {
    Rng rng(77);
    for (int it = 0; it < 100; ++it) {
      int n = 2 + rng.uniform_int(7);
      std::vector<real> sc = random_vec(rng, n, -5, 5);
      Var s = tape.constant({n}, sc);
      Var zero = tape.zeros({n});
      Var f = flexible_alignment(tape, s, zero, std::vector<uint8_t>(static_cast<size_t>(n), 1));
      Var g = global_alignment(tape, s);
      for (int i = 0; i < n; ++i)
        CHECK(std::abs(tape.val(f)[static_cast<size_t>(i)] -
                       tape.val(g)[static_cast<size_t>(i)]) < 1e-12);
    }
  }
  SUBCASE("uniform scores with fixed penalties") {
    Var s = tape.zeros({3});
    Var pen = tape.constant({3}, {0, 0.5, 2.0});
    Var w = flexible_alignment(tape, s, pen, {1, 1, 1});
    // Brute-force softmax of [0, -0.5, -2].
    double e1 = 1, e2 = std::exp(-0.5), e3 = std::exp(-2.0);
    double z = e1 + e2 + e3;
    CHECK(tape.val(w)[0] == doctest::Approx(e1 / z).epsilon(1e-12));
    CHECK(tape.val(w)[1] == doctest::Approx(e2 / z).epsilon(1e-12));
    CHECK(tape.val(w)[2] == doctest::Approx(e3 / z).epsilon(1e-12));
    CHECK(tape.val(w)[0] == doctest::Approx(0.574096992967695).epsilon(1e-12));
    CHECK(tape.val(w)[1] == doctest::Approx(0.348207427883735).epsilon(1e-12));
    CHECK(tape.val(w)[2] == doctest::Approx(0.077695579148571).epsilon(1e-12));
  }
  SUBCASE("mask renormalizes over the kept positions") {
    Var s = tape.zeros({3});
    Var pen = tape.constant({3}, {0, 0.5, 2.0});
    Var w = flexible_alignment(tape, s, pen, {1, 0, 1});
    double e1 = 1, e3 = std::exp(-2.0);
    CHECK(tape.val(w)[0] == doctest::Approx(e1 / (e1 + e3)).epsilon(1e-12));
    CHECK(tape.val(w)[1] == 0);
    CHECK(tape.val(w)[2] == doctest::Approx(e3 / (e1 + e3)).epsilon(1e-12));
    CHECK(tape.val(w)[0] == doctest::Approx(0.8807970779778823).epsilon(1e-12));
    CHECK(tape.val(w)[2] == doctest::Approx(0.1192029220221176).epsilon(1e-12));
  }
  SUBCASE("empty mask is an error") {
    Var s = tape.zeros({2});
    CHECK_THROWS_AS(flexible_alignment(tape, s, tape.zeros({2}), {0, 0}), DomainError);
  }
}

TEST_CASE("vision_span examples") {
  auto w1 = vision_span(10, 1.0, 1.5, 1.2, 30);
  CHECK(w1.first == 8);
  CHECK(w1.second == 12);

  auto w2 = vision_span(10, 0.25, 1.5, 1.2, 30);
  CHECK(w2.first == 6);
  CHECK(w2.second == 14);

  auto w3 = vision_span(10, 0.7, 1.5, kInf, 30);
  CHECK(w3.first == 0);
  CHECK(w3.second == 29);

  // Tiny radius: no integer qualifies, fall back to round(p).
  auto w4 = vision_span(10.5, 1.0, 0.05, 0.5, 30);
  CHECK(w4.first == w4.second);
  CHECK(w4.first == 11);

  auto w5 = vision_span(-3.0, 1.0, 0.05, 0.5, 30);
  CHECK(w5.first == 0);
  CHECK(w5.second == 0);
}

TEST_CASE("vision_span equals the brute-force solution set on 1000 random tuples") {
  Rng rng(123);
  int nonempty_cases = 0, fallback_cases = 0, clamped = 0;
  for (int it = 0; it < 1000; ++it) {
    int S = 1 + rng.uniform_int(40);
    real p = rng.uniform(-3, static_cast<real>(S) + 3);
    real sigma = rng.uniform(0.2, 4.0);
    real tau = rng.uniform(0.05, 5.0);
    real g = rng.uniform(1e-3, 1.0);
    int blo = -1, bhi = -1;
    bool contiguous = true;
    bool in_prev = false;
    for (int s = 0; s < S; ++s) {
      bool in = g * distance(static_cast<real>(s), p, sigma) < tau;
      if (in) {
        if (blo < 0) blo = s;
        else if (!in_prev) contiguous = false;
        bhi = s;
      }
      in_prev = in;
    }
    CHECK(contiguous);  // the sub-threshold set is always an interval
    auto w = vision_span(p, g, sigma, tau, S);
    if (blo >= 0) {
      ++nonempty_cases;
      CHECK(w.first == blo);
      CHECK(w.second == bhi);
      if (blo == 0 || bhi == S - 1) ++clamped;
    } else {
      ++fallback_cases;
      CHECK(w.first == w.second);
      int expect = std::clamp(static_cast<int>(std::lround(p)), 0, S - 1);
      CHECK(w.first == expect);
    }
  }
  CHECK(nonempty_cases > 800);
  CHECK(fallback_cases > 0);
  CHECK(clamped > 50);
}

TEST_CASE("vision_span width is monotone in tau and in strength") {
  Rng rng(321);
  for (int it = 0; it < 200; ++it) {
    int S = 5 + rng.uniform_int(40);
    real p = rng.uniform(0, static_cast<real>(S - 1));
    real sigma = rng.uniform(0.5, 3.0);
    real tau1 = rng.uniform(0.05, 2.0);
    real tau2 = tau1 + rng.uniform(0.0, 3.0);
    real g = rng.uniform(1e-3, 1.0);
    auto a = vision_span(p, g, sigma, tau1, S);
    auto b = vision_span(p, g, sigma, tau2, S);
    CHECK(b.second - b.first >= a.second - a.first);

    real g2 = std::min(real(1), g + static_cast<real>(rng.uniform(0.0, 0.5)));
    auto c = vision_span(p, g2, sigma, tau1, S);
    CHECK(c.second - c.first <= a.second - a.first);
  }
}

TEST_CASE("penalty at the tracked focus stays below the rounding bound") {
  Rng rng(55);
  for (int it = 0; it < 200; ++it) {
    real p = rng.uniform(0, 30);
    real g = rng.uniform(0.0, 1.0);
    real sigma = rng.uniform(0.5, 3.0);
    real s = std::round(p);
    CHECK(g * distance(s, p, sigma) <= g * 0.25 / (2 * sigma * sigma) + 1e-15);
  }
}

TEST_CASE("local_p_center") {
  ModelConfig cfg = tiny_config();
  SUBCASE("zero parameters center the window") {
    ModelParams params = ModelParams::init(cfg, 1);
    for (auto* n : {"local.W_p", "local.v_p"})
      std::fill(params.at(n).v.begin(), params.at(n).v.end(), real(0));
    Tape tape;
    Var p = local_p_center(tape, params, cfg, tape.zeros({3}), 20);
    CHECK(tape.scalar_val(p) == doctest::Approx(10.0).epsilon(1e-15));
  }
  SUBCASE("stays strictly inside (0, S)") {
    Rng rng(9);
    for (int it = 0; it < 50; ++it) {
      ModelParams params = ModelParams::init(cfg, 100 + static_cast<uint64_t>(it));
      Tape tape;
      Var p = local_p_center(tape, params, cfg,
                             tape.constant({3}, random_vec(rng, 3, -3, 3)), 12);
      CHECK(tape.scalar_val(p) > 0);
      CHECK(tape.scalar_val(p) < 12);
    }
  }
  SUBCASE("hand-set parameters") {
    ModelConfig c1 = cfg;
    c1.hidden_dim = 1;
    ModelParams params = ModelParams::init(c1, 3);
    params.at("local.W_p").v = {0.8};
    params.at("local.v_p").v = {-0.6};
    Tape tape;
    Var p = local_p_center(tape, params, c1, tape.constant({1}, {0.5}), 7);
    double expect = 7 * sigmoid_d(-0.6 * std::tanh(0.8 * 0.5));
    CHECK(tape.scalar_val(p) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("local_alignment") {
  Tape tape;
  SUBCASE("gaussian factor at the center is 1") {
    Var sc = tape.constant({5}, {0.3, 0.1, -0.2, 0.8, 0.0});
    Var w = local_alignment(tape, sc, tape.scalar(2.0), 4, 5);
    Var plain = global_alignment(tape, sc);
    CHECK(tape.val(w)[2] == doctest::Approx(tape.val(plain)[2]).epsilon(1e-12));
  }
  SUBCASE("factor exp(-0.5) at distance D/2 * 1") {
    // D = 10 so sigma_local = 5; |s - p| = 5 damps by exp(-0.5).
    int S = 12;
    std::vector<real> sc(static_cast<size_t>(S), 0);
    Var w = local_alignment(tape, tape.constant({S}, sc), tape.scalar(5.0), 10, S);
    real center = tape.val(w)[5];
    real off = tape.val(w)[10];
    CHECK(off / center == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
    CHECK(off / center == doctest::Approx(0.6065306597126334).epsilon(1e-12));
  }
  SUBCASE("uniform scores, S=3, p=1, D=1: the documented non-normalized case") {
    Var w = local_alignment(tape, tape.zeros({3}), tape.scalar(1.0), 1, 3);
    real third = real(1) / 3;
    CHECK(tape.val(w)[0] == doctest::Approx(third * std::exp(-2.0)).epsilon(1e-9));
    CHECK(tape.val(w)[1] == doctest::Approx(third).epsilon(1e-9));
    CHECK(tape.val(w)[2] == doctest::Approx(third * std::exp(-2.0)).epsilon(1e-9));
    real sum = tape.val(w)[0] + tape.val(w)[1] + tape.val(w)[2];
    CHECK(sum < 1);
    CHECK(sum == doctest::Approx((1 + 2 * std::exp(-2.0)) / 3).epsilon(1e-12));
  }
  SUBCASE("positions outside the window are exactly zero") {
    int S = 9;
    Var w = local_alignment(tape, tape.zeros({S}), tape.scalar(4.0), 2, S);
    auto v = tape.val(w);
    CHECK(v[0] == 0);
    CHECK(v[1] == 0);
    for (int s = 2; s <= 6; ++s) CHECK(v[static_cast<size_t>(s)] > 0);
    CHECK(v[7] == 0);
    CHECK(v[8] == 0);
  }
}

TEST_CASE("flexible attend: test mode with tau=inf equals train mode exactly") {
  StepFixture fx(21);
  for (int t : {1, 2, 3}) {
    Tape t1, t2;
    t2.grad_enabled = false;
    AttendOut train_out = fx.run(t1, AttendMode::kTrain, kInf, t, 2.2);
    AttendOut test_out = fx.run(t2, AttendMode::kTest, kInf, t, 2.2);
    REQUIRE(train_out.step.weights.size() == test_out.step.weights.size());
    for (size_t i = 0; i < train_out.step.weights.size(); ++i)
      CHECK(train_out.step.weights[i] == test_out.step.weights[i]);
    CHECK(train_out.step.p_t == test_out.step.p_t);
    for (size_t i = 0; i < t1.val(train_out.context).size(); ++i)
      CHECK(t1.val(train_out.context)[i] == t2.val(test_out.context)[i]);
  }
}

TEST_CASE("flexible attend: strength forced to zero reduces to global attention") {
  StepFixture fx(31);
  fx.params.at("strength.b_g").v[0] = -40;  // sigmoid(-40) ~ 4e-18
  std::fill(fx.params.at("strength.v_g").v.begin(), fx.params.at("strength.v_g").v.end(),
            real(0));
  Tape tape;
  AttendOut flex = fx.run(tape, AttendMode::kTrain, kInf, 2, 1.7);

  ModelConfig gcfg = fx.cfg;
  gcfg.attention = AttentionKind::kGlobal;
  Tape tape2;
  std::vector<real> flat;
  for (auto& row : fx.enc_rows) flat.insert(flat.end(), row.begin(), row.end());
  AttendIn in;
  in.h_prev = tape2.constant({fx.cfg.hidden_dim}, fx.h_prev_v);
  in.feedback_embed = tape2.constant({fx.cfg.embed_dim}, fx.i_emb_v);
  in.enc_states = tape2.constant({fx.S, fx.cfg.enc_state_dim()}, flat);
  in.keys = attention_keys(tape2, fx.params, gcfg, in.enc_states);
  in.S = fx.S;
  in.t = 2;
  AttendOut glob = attend(tape2, fx.params, gcfg, in);
  for (size_t i = 0; i < flex.step.weights.size(); ++i)
    CHECK(std::abs(flex.step.weights[i] - glob.step.weights[i]) < 1e-12);
}

TEST_CASE("flexible attend matches the brute-force oracle to 1e-12") {
  for (uint64_t seed : {41u, 42u, 43u}) {
    StepFixture fx(seed);
    for (real tau : {real(0.3), real(1.2), real(5.0), kInf}) {
      for (real p_prev : {real(0.0), real(1.9), real(4.5)}) {
        Tape tape;
        tape.grad_enabled = false;
        Meter meter;
        AttendOut got = fx.run(tape, AttendMode::kTest, tau, 2, p_prev, &meter);
        BruteFlexible want =
            brute_flexible(fx.params, fx.cfg, fx.h_prev_v, fx.enc_rows, fx.i_emb_v,
                           p_prev, 2, tau);
        CHECK(got.step.lo == want.lo);
        CHECK(got.step.hi == want.hi);
        CHECK(got.step.strength == doctest::Approx(want.g).epsilon(1e-12));
        CHECK(meter.score_evals == static_cast<uint64_t>(want.hi - want.lo + 1));
        CHECK(got.step.score_evals == want.hi - want.lo + 1);
        for (size_t i = 0; i < want.weights.size(); ++i)
          CHECK(got.step.weights[i] == doctest::Approx(want.weights[i]).epsilon(1e-12));
        CHECK(got.step.p_t == doctest::Approx(want.p_t).epsilon(1e-12));
        for (size_t i = 0; i < want.context.size(); ++i)
          CHECK(tape.val(got.context)[i] ==
                doctest::Approx(want.context[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("flexible weights sum to 1 over the window; focus stays inside") {
  Rng rng(63);
  for (int it = 0; it < 40; ++it) {
    StepFixture fx(700 + static_cast<uint64_t>(it));
    Tape tape;
    tape.grad_enabled = false;
    real tau = rng.uniform(0.2, 3.0);
    real p_prev = rng.uniform(0, static_cast<real>(fx.S - 1));
    AttendOut got = fx.run(tape, AttendMode::kTest, tau, 2, p_prev);
    real sum = 0;
    for (real w : got.step.weights) sum += w;
    CHECK(std::abs(sum - 1) < 1e-9);
    CHECK(got.step.p_t >= got.step.lo);
    CHECK(got.step.p_t <= got.step.hi);
    CHECK(got.step.score_evals == got.step.hi - got.step.lo + 1);
    for (int s = 0; s < got.step.lo; ++s) CHECK(got.step.weights[static_cast<size_t>(s)] == 0);
    for (int s = got.step.hi + 1; s < fx.S; ++s)
      CHECK(got.step.weights[static_cast<size_t>(s)] == 0);
  }
}

TEST_CASE("adding a constant to all scores leaves alignments unchanged") {
  Rng rng(65);
  for (int it = 0; it < 30; ++it) {
    Tape tape;
    int n = 2 + rng.uniform_int(6);
    std::vector<real> sc = random_vec(rng, n, -4, 4);
    std::vector<real> shifted = sc;
    real c = rng.uniform(-7, 7);
    for (real& x : shifted) x += c;
    std::vector<real> pen = random_vec(rng, n, 0, 2);
    Var w0 = flexible_alignment(tape, tape.constant({n}, sc), tape.constant({n}, pen),
                                std::vector<uint8_t>(static_cast<size_t>(n), 1));
    Var w1 = flexible_alignment(tape, tape.constant({n}, shifted), tape.constant({n}, pen),
                                std::vector<uint8_t>(static_cast<size_t>(n), 1));
    for (int i = 0; i < n; ++i)
      CHECK(std::abs(tape.val(w0)[static_cast<size_t>(i)] -
                     tape.val(w1)[static_cast<size_t>(i)]) < 1e-12);
  }
}

TEST_CASE("flexible attend gradients pass finite differences, g and penalty included") {
  StepFixture fx(81);
  std::vector<Tensor*> leaves = {&fx.params.at("att.W_a"), &fx.params.at("att.v_a"),
                                 &fx.params.at("strength.W_g"), &fx.params.at("strength.v_g"),
                                 &fx.params.at("strength.b_g")};
  real err = grad_check(
      [&](Tape& t) {
        // Two chained steps so the focus recurrence contributes.
        AttendOut o1 = fx.run(t, AttendMode::kTrain, kInf, 1, 0);
        std::vector<real> flat;
        for (auto& row : fx.enc_rows) flat.insert(flat.end(), row.begin(), row.end());
        AttendIn in;
        in.h_prev = t.constant({fx.cfg.hidden_dim}, fx.h_prev_v);
        in.feedback_embed = t.constant({fx.cfg.embed_dim}, fx.i_emb_v);
        in.enc_states = t.constant({fx.S, fx.cfg.enc_state_dim()}, flat);
        in.keys = attention_keys(t, fx.params, fx.cfg, in.enc_states);
        in.S = fx.S;
        in.t = 2;
        in.mode = AttendMode::kTrain;
        in.p_prev_var = o1.p_var;
        AttendOut o2 = attend(t, fx.params, fx.cfg, in);
        return t.add(t.sum(t.tanh(o2.context)), t.mul(o2.g_var, o2.g_var));
      },
      leaves);
  CHECK(err < 1e-4);
}
