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

#include "flexattn/attention.hpp"

#include <algorithm>
#include <cmath>

namespace flexattn {

real distance(real s, real p_prev, real sigma) {
  real d = s - p_prev;
  return d * d / (2 * sigma * sigma);
}

real attention_center(std::span<const real> weights) {
  real c = 0;
  for (size_t i = 0; i < weights.size(); ++i) c += weights[i] * static_cast<real>(i);
  return c;
}

std::pair<int, int> vision_span(real p_prev, real g, real sigma, real tau, int S) {
  if (S < 1) throw DomainError("vision_span: S must be >= 1");
  auto fallback = [&]() {
    int p = static_cast<int>(std::lround(p_prev));
    p = std::clamp(p, 0, S - 1);
    return std::pair<int, int>{p, p};
  };
  if (std::isinf(tau)) return {0, S - 1};
  if (!(g > 0)) return {0, S - 1};  // zero strength disables the penalty
  auto inside = [&](int s) { return g * distance(static_cast<real>(s), p_prev, sigma) < tau; };
  real r = sigma * std::sqrt(2 * tau / g);
  if (!std::isfinite(r)) return {0, S - 1};
  // Smallest / largest integers strictly inside (p - r, p + r), then nudge
  // so the window is exactly the solution set of the strict inequality
  // (the closed form and the predicate can disagree by one ulp).
  int lo = static_cast<int>(std::floor(static_cast<double>(p_prev - r))) + 1;
  int hi = static_cast<int>(std::ceil(static_cast<double>(p_prev + r))) - 1;
  while (lo <= hi && !inside(lo)) ++lo;
  while (lo <= hi && !inside(hi)) --hi;
  while (inside(lo - 1)) --lo;
  while (inside(hi + 1)) ++hi;
  lo = std::max(lo, 0);
  hi = std::min(hi, S - 1);
  if (lo > hi) return fallback();
  return {lo, hi};
}

Var attention_keys(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                   Var enc_states) {
  Var wa = tape.leaf(params.at("att.W_a"));
  Var wa_enc = tape.slice(wa, 1, cfg.hidden_dim, cfg.hidden_dim + cfg.enc_state_dim());
  return tape.matmul_bt(enc_states, wa_enc);  // [S, att]
}

Var score_window(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                 Var keys, Var h_prev, int lo, int hi, Meter* meter) {
  int S = tape.dims_of(keys)[0];
  if (lo < 0 || hi >= S || lo > hi)
    throw ShapeError("score_window: bad window [" + std::to_string(lo) + "," +
                     std::to_string(hi) + "] for S=" + std::to_string(S));
  Var wa = tape.leaf(params.at("att.W_a"));
  Var wa_dec = tape.slice(wa, 1, 0, cfg.hidden_dim);
  Var q = tape.matmul(wa_dec, h_prev);  // [att]
  Var kw = (lo == 0 && hi == S - 1) ? keys : tape.slice(keys, 0, lo, hi + 1);
  Var u = tape.tanh(tape.add_row(kw, q));  // [w, att]
  if (meter) meter->score_evals += static_cast<uint64_t>(tape.dims_of(u)[0]);
  return tape.matmul(u, tape.leaf(params.at("att.v_a")));  // [w]
}

Var score(Tape& tape, ModelParams& params, const ModelConfig& cfg, Var h_prev,
          Var enc_state) {
  Var wa = tape.leaf(params.at("att.W_a"));
  Var u = tape.tanh(tape.matmul(wa, tape.concat(h_prev, enc_state, 0)));
  (void)cfg;
  return tape.dot(tape.leaf(params.at("att.v_a")), u);
}

Var global_alignment(Tape& tape, Var scores) { return tape.softmax(scores); }

Var context_vector(Tape& tape, Var weights, Var enc_states) {
  const std::vector<int>& dw = tape.dims_of(weights);
  const std::vector<int>& de = tape.dims_of(enc_states);
  if (dw.size() != 1 || de.size() != 2 || dw[0] != de[0])
    throw ShapeError("context_vector: weights " + shape_str(dw) + " vs states " +
                     shape_str(de));
  return tape.matmul(weights, enc_states);  // [2h]
}

Var penalty_strength(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                     Var h_prev, Var feedback_embed) {
  Var wg = tape.leaf(params.at("strength.W_g"));
  Var u = tape.tanh(tape.matmul(wg, tape.concat(h_prev, feedback_embed, 0)));
  (void)cfg;
  Var s = tape.dot(tape.leaf(params.at("strength.v_g")), u);
  return tape.sigmoid(tape.add(s, tape.leaf(params.at("strength.b_g"))));
}

Var flexible_alignment(Tape& tape, Var scores, Var penalties,
                       const std::vector<uint8_t>& mask) {
  if (tape.dims_of(scores) != tape.dims_of(penalties))
    throw ShapeError("flexible_alignment: scores " + shape_str(tape.dims_of(scores)) +
                     " vs penalties " + shape_str(tape.dims_of(penalties)));
  return tape.softmax_masked(tape.sub(scores, penalties), mask);
}

Var local_p_center(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                   Var h, int S) {
  if (S < 1) throw DomainError("local_p_center: S must be >= 1");
  Var u = tape.tanh(tape.matmul(tape.leaf(params.at("local.W_p")), h));
  (void)cfg;
  Var s = tape.sigmoid(tape.dot(tape.leaf(params.at("local.v_p")), u));
  return tape.scale(s, static_cast<real>(S));
}

Var local_alignment(Tape& tape, Var scores, Var p_t, int D, int S) {
  if (D < 1) throw DomainError("local_alignment: D must be >= 1");
  Var w_all = tape.softmax(scores);
  std::vector<real> pos(static_cast<size_t>(S));
  for (int s = 0; s < S; ++s) pos[static_cast<size_t>(s)] = static_cast<real>(s);
  Var diff = tape.sub_bcast(tape.constant({S}, pos), p_t);
  real sigma_local = static_cast<real>(D) / 2;
  Var gauss = tape.exp(tape.scale(tape.mul(diff, diff), -1 / (2 * sigma_local * sigma_local)));
  Var damped = tape.mul(w_all, gauss);
  // Cut to the window [p-D, p+D]; no renormalization afterwards.
  real p = tape.scalar_val(p_t);
  int lo = std::max(0, static_cast<int>(std::ceil(p - D)));
  int hi = std::min(S - 1, static_cast<int>(std::floor(p + D)));
  if (lo == 0 && hi == S - 1) return damped;
  std::vector<real> cut(static_cast<size_t>(S), 0);
  for (int s = lo; s <= hi; ++s) cut[static_cast<size_t>(s)] = 1;
  return tape.mul(damped, tape.constant({S}, cut));
}

namespace {

std::vector<real> position_values(int lo, int hi) {
  std::vector<real> pos(static_cast<size_t>(hi - lo + 1));
  for (int s = lo; s <= hi; ++s) pos[static_cast<size_t>(s - lo)] = static_cast<real>(s);
  return pos;
}

// penalty(s) = g * (s - p_prev)^2 / (2 sigma^2) over window positions.
Var penalty_vector(Tape& tape, Var pos, Var p_prev, Var g, real sigma) {
  Var diff = tape.sub_bcast(pos, p_prev);
  Var d = tape.scale(tape.mul(diff, diff), 1 / (2 * sigma * sigma));
  return tape.mul_bcast(d, g);
}

void fill_step_weights(AttentionStep& step, std::span<const real> window_weights, int S) {
  step.weights.assign(static_cast<size_t>(S), 0);
  for (int s = step.lo; s <= step.hi; ++s)
    step.weights[static_cast<size_t>(s)] = window_weights[static_cast<size_t>(s - step.lo)];
}

}  // namespace

AttendOut attend(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                 const AttendIn& in) {
  AttendOut out;
  out.step.t = in.t;
  int S = in.S;
  switch (cfg.attention) {
    case AttentionKind::kGlobal: {
      Var scores = score_window(tape, params, cfg, in.keys, in.h_prev, 0, S - 1, in.meter);
      Var weights = global_alignment(tape, scores);
      out.context = context_vector(tape, weights, in.enc_states);
      out.step.lo = 0;
      out.step.hi = S - 1;
      out.step.score_evals = S;
      fill_step_weights(out.step, tape.val(weights), S);
      out.step.p_t = attention_center(tape.val(weights));
      break;
    }
    case AttentionKind::kLocal: {
      // All positions are scored (the softmax normalizer spans them); the
      // Gaussian cut shows up in the weights, not in the metered span.
      Var p_var = local_p_center(tape, params, cfg, in.h_prev, S);
      Var scores = score_window(tape, params, cfg, in.keys, in.h_prev, 0, S - 1, in.meter);
      Var weights = local_alignment(tape, scores, p_var, cfg.local_half_window, S);
      out.context = context_vector(tape, weights, in.enc_states);
      out.p_var = p_var;
      out.step.lo = 0;
      out.step.hi = S - 1;
      out.step.score_evals = S;
      fill_step_weights(out.step, tape.val(weights), S);
      real wsum = 0;
      for (real w : tape.val(weights)) wsum += w;
      out.step.p_t = wsum > 0 ? attention_center(tape.val(weights)) / wsum
                              : tape.scalar_val(p_var);
      break;
    }
    case AttentionKind::kFlexible: {
      out.g_var = penalty_strength(tape, params, cfg, in.h_prev, in.feedback_embed);
      real g_val = tape.scalar_val(out.g_var);
      out.step.strength = g_val;
      out.step.p_prev = in.t == 1 ? 0 : (in.mode == AttendMode::kTrain
                                             ? tape.scalar_val(in.p_prev_var)
                                             : in.p_prev_val);
      int lo = 0, hi = S - 1;
      if (in.mode == AttendMode::kTest && in.t > 1) {
        auto span = vision_span(in.p_prev_val, g_val, cfg.penalty_sigma, in.tau, S);
        lo = span.first;
        hi = span.second;
      }
      Var scores = score_window(tape, params, cfg, in.keys, in.h_prev, lo, hi, in.meter);
      Var pos = tape.constant({hi - lo + 1}, position_values(lo, hi));
      Var logits = scores;
      if (in.t > 1) {
        Var p_prev = in.mode == AttendMode::kTrain ? in.p_prev_var
                                                   : tape.scalar(in.p_prev_val);
        logits = tape.sub(scores, penalty_vector(tape, pos, p_prev, out.g_var,
                                                 cfg.penalty_sigma));
      }
      Var weights = tape.softmax(logits);  // sums to 1 over the window
      Var enc = (lo == 0 && hi == S - 1) ? in.enc_states
                                         : tape.slice(in.enc_states, 0, lo, hi + 1);
      out.context = context_vector(tape, weights, enc);
      out.p_var = tape.dot(weights, pos);
      out.step.lo = lo;
      out.step.hi = hi;
      out.step.score_evals = hi - lo + 1;
      fill_step_weights(out.step, tape.val(weights), S);
      out.step.p_t = tape.scalar_val(out.p_var);
      break;
    }
  }
  return out;
}

}  // namespace flexattn
