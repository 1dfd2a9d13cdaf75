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

#include "flexattn/attention.hpp"
#include "flexattn/data.hpp"

namespace flexattn {

/// Trace of one sentence decode.  Window statistics aggregate over every
/// active hypothesis at every step; `steps` holds the best hypothesis's
/// own per-step records (used for rendering and span analysis).
struct DecodeTrace {
  std::vector<int> tokens;            // best hypothesis, pre-EOS
  real logp = 0;                      // accumulated log-probability of `tokens`
  std::vector<AttentionStep> steps;   // best hypothesis lineage
  uint64_t score_evals = 0;           // sum of window widths, all hyps/steps
  int64_t hyp_steps = 0;              // number of (step, active hypothesis) pairs
  real sum_width = 0;                 // sum of window widths over the same set
  real sum_strength = 0;              // sum of g(t) over the same set
  double seconds = 0;

  real avg_window() const {
    return hyp_steps > 0 ? sum_width / static_cast<real>(hyp_steps) : 0;
  }
  real mean_strength() const {
    return hyp_steps > 0 ? sum_strength / static_cast<real>(hyp_steps) : 0;
  }
};

/// Beam search with per-hypothesis focus tracking.  Ties between equal
/// accumulated log-probabilities break toward the lower token id, then the
/// earlier beam index.  No length normalization.  max_out < 0 means
/// 2*S + 5.
DecodeTrace beam_search(ModelParams& params, const ModelConfig& cfg,
                        std::span<const int> src, int beam, real tau,
                        int max_out = -1, Meter* meter = nullptr);

/// Teacher-forced decode: the reference supplies every feedback token, so
/// the step count equals the reference length for any mechanism.
DecodeTrace forced_decode(ModelParams& params, const ModelConfig& cfg,
                          std::span<const int> src, std::span<const int> ref,
                          real tau, Meter* meter = nullptr);

struct CorpusSummary {
  std::vector<std::vector<int>> hypotheses;  // pre-EOS token sequences
  std::vector<DecodeTrace> traces;
  real avg_window = 0;           // mean over sentences of per-sentence averages
  real avg_window_weighted = 0;  // pooled over (step, hypothesis) pairs
  uint64_t score_evals = 0;
  real mean_strength = 0;        // pooled g(t) average (flexible models)
  double seconds = 0;
};

CorpusSummary corpus_metrics(ModelParams& params, const ModelConfig& cfg,
                             const Corpus& corpus, int beam, real tau);

}  // namespace flexattn
