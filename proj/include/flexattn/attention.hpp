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

#pragma once

#include <utility>
#include <vector>

#include "flexattn/model.hpp"

namespace flexattn {

/// Per-decoding-step record of what the attention mechanism looked at.
struct AttentionStep {
  int t = 0;            // 1-based decoding step
  real p_prev = 0;      // focus tracked from the previous step
  real strength = 0;    // g(t); meaningful for the flexible mechanism
  int lo = 0, hi = 0;   // inclusive window of scored positions
  std::vector<real> weights;  // length S, exactly 0 outside [lo, hi]
  real p_t = 0;         // focus implied by this step's weights
  int score_evals = 0;  // == hi - lo + 1

  int width() const { return hi - lo + 1; }
};

struct PenaltyConfig {
  real sigma = 1.5;
  real tau = kInf;  // infinity disables score skipping
  void validate() const {
    if (!(sigma > 0)) throw ConfigError("penalty: sigma must be > 0");
    if (!(tau > 0)) throw ConfigError("penalty: tau must be > 0 (or infinity)");
  }
};

/// Independent count of score-function invocations, incremented by the
/// scoring routine itself (one per scored position).
struct Meter {
  uint64_t score_evals = 0;
};

/// Positions whose penalty g*(s-p)^2/(2*sigma^2) stays below tau:
/// the integers inside (p - r, p + r) with r = sigma*sqrt(2*tau/g),
/// clamped to [0, S-1].  When no integer qualifies, falls back to the
/// single position round(p) clamped into range.  The returned window is
/// exactly the brute-force solution set of the strict inequality.
std::pair<int, int> vision_span(real p_prev, real g, real sigma, real tau, int S);

real distance(real s, real p_prev, real sigma);

/// Expected position under the weights, 0-based.
real attention_center(std::span<const real> weights);

// --- tape-level pieces -------------------------------------------------

/// Per-sentence cache of the encoder-side half of the score function.
Var attention_keys(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                   Var enc_states);

/// Scores for positions [lo, hi] given cached keys; the only place the
/// score function is evaluated, so the meter counts every invocation.
Var score_window(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                 Var keys, Var h_prev, int lo, int hi, Meter* meter);

/// Single-pair score: v_a' tanh(W_a [h_prev; enc_state]).
Var score(Tape& tape, ModelParams& params, const ModelConfig& cfg, Var h_prev,
          Var enc_state);

Var global_alignment(Tape& tape, Var scores);

/// c_t = sum_s weights(s) * enc_state_s.
Var context_vector(Tape& tape, Var weights, Var enc_states);

/// g(t) = sigmoid(v_g' tanh(W_g [h_prev; i_t]) + b_g).
Var penalty_strength(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                     Var h_prev, Var feedback_embed);

/// softmax(score - penalty) restricted to the mask; sums to 1 over kept
/// positions.
Var flexible_alignment(Tape& tape, Var scores, Var penalties,
                       const std::vector<uint8_t>& mask);

/// Predicted center S * sigmoid(v_p' tanh(W_p h)), a real in (0, S).
Var local_p_center(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                   Var h, int S);

/// Softmax over all positions damped by exp(-(s-p)^2/(2*(D/2)^2)) and cut
/// to zero outside [p-D, p+D]; deliberately not renormalized, so the
/// weights sum to at most 1.
Var local_alignment(Tape& tape, Var scores, Var p_t, int D, int S);

enum class AttendMode { kTrain, kTest };

struct AttendIn {
  Var h_prev;          // decoder hidden from the previous step
  Var feedback_embed;  // embedding of the feedback word
  Var enc_states;      // [S, 2h]
  Var keys;            // [S, att] from attention_keys
  int S = 0;
  int t = 1;            // 1-based step; step 1 runs with no penalty
  Var p_prev_var;       // tracked focus node (train mode, t > 1)
  real p_prev_val = 0;  // tracked focus value (test mode)
  AttendMode mode = AttendMode::kTrain;
  real tau = kInf;      // applied in test mode only
  Meter* meter = nullptr;
};

struct AttendOut {
  Var context;   // [2h]
  Var p_var;     // focus node (valid when the mechanism tracks focus on-tape)
  Var g_var;     // strength node (flexible only; for the fine-tuning loss)
  AttentionStep step;
};

/// One attention evaluation for the configured mechanism.  In train mode
/// the full window is always scored and the focus recurrence stays on the
/// tape; in test mode the flexible mechanism scores only the vision span
/// implied by (p_prev, g, sigma, tau).
AttendOut attend(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                 const AttendIn& in);

}  // namespace flexattn
