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

#include <string>

#include "flexattn/decoding.hpp"

namespace flexattn {

/// Corpus-level BLEU in [0, 1]: exact unigram precision, add-one smoothed
/// numerator and denominator for n >= 2, geometric mean over n = 1..max_n,
/// brevity penalty exp(min(0, 1 - |ref|/|hyp|)).  Single reference.
real smoothed_bleu(const std::vector<std::vector<int>>& hyps,
                   const std::vector<std::vector<int>>& refs, int max_n = 4);

/// Fraction of exact matches (pre-EOS).
real sequence_accuracy(const std::vector<std::vector<int>>& hyps,
                       const std::vector<std::vector<int>>& refs);

struct EvalReport {
  real bleu = 0;
  real seq_accuracy = 0;
  real avg_window = 0;
  uint64_t score_evals = 0;
  real mean_g = 0;
  real tau = kInf;
};

/// Decode + score one corpus at one threshold.
EvalReport evaluate(ModelParams& params, const ModelConfig& cfg,
                    const Corpus& corpus, int beam, real tau);

struct SweepResult {
  std::vector<EvalReport> rows;  // finite taus ascending, infinity last
  const EvalReport& reference() const;  // the tau = infinity row
};

/// Default threshold list for the trade-off curve.
std::vector<real> default_tau_list();

SweepResult sweep_thresholds(ModelParams& params, const ModelConfig& cfg,
                             const Corpus& dev, std::vector<real> taus, int beam);

/// Smallest-window row whose dev BLEU stays within max_bleu_loss of the
/// tau = infinity reference.  Returns infinity (and sets *ok to false)
/// when no finite threshold qualifies.
real select_threshold(const SweepResult& sweep, real max_bleu_loss = 0.005,
                      bool* ok = nullptr);

/// One row per decoding step: '#' inside [lo, hi], '.' outside, right
/// margin with g(t) to two decimals and the emitted token.
std::string render_spans(const DecodeTrace& trace, int S, const Vocab* tgt_vocab);

/// Same layout as a standalone SVG document.
std::string render_spans_svg(const DecodeTrace& trace, int S, const Vocab* tgt_vocab);

std::string format_sweep_table(const SweepResult& sweep);

}  // namespace flexattn
