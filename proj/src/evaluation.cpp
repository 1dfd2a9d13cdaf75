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

#include "flexattn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace flexattn {

namespace {
std::vector<int> strip_eos(const std::vector<int>& seq) {
  std::vector<int> out = seq;
  while (!out.empty() && out.back() == Vocab::kEos) out.pop_back();
  return out;
}
}  // namespace

real smoothed_bleu(const std::vector<std::vector<int>>& hyps,
                   const std::vector<std::vector<int>>& refs, int max_n) {
  if (hyps.size() != refs.size())
    throw DomainError("smoothed_bleu: hypothesis/reference counts differ");
  if (refs.empty()) throw DomainError("smoothed_bleu: empty corpus");
  std::vector<int64_t> matches(static_cast<size_t>(max_n), 0);
  std::vector<int64_t> totals(static_cast<size_t>(max_n), 0);
  int64_t hyp_len = 0, ref_len = 0;
  for (size_t i = 0; i < hyps.size(); ++i) {
    std::vector<int> hyp = strip_eos(hyps[i]);
    std::vector<int> ref = strip_eos(refs[i]);
    hyp_len += static_cast<int64_t>(hyp.size());
    ref_len += static_cast<int64_t>(ref.size());
    for (int n = 1; n <= max_n; ++n) {
      if (static_cast<int>(hyp.size()) < n) continue;
      std::map<std::vector<int>, int> ref_counts;
      if (static_cast<int>(ref.size()) >= n)
        for (size_t s = 0; s + static_cast<size_t>(n) <= ref.size(); ++s)
          ++ref_counts[std::vector<int>(ref.begin() + static_cast<long>(s),
                                        ref.begin() + static_cast<long>(s) + n)];
      std::map<std::vector<int>, int> hyp_counts;
      for (size_t s = 0; s + static_cast<size_t>(n) <= hyp.size(); ++s)
        ++hyp_counts[std::vector<int>(hyp.begin() + static_cast<long>(s),
                                      hyp.begin() + static_cast<long>(s) + n)];
      for (const auto& [gram, count] : hyp_counts) {
        totals[static_cast<size_t>(n - 1)] += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end())
          matches[static_cast<size_t>(n - 1)] += std::min(count, it->second);
      }
    }
  }
  if (hyp_len == 0) return 0;
  double log_sum = 0;
  for (int n = 1; n <= max_n; ++n) {
    double m = static_cast<double>(matches[static_cast<size_t>(n - 1)]);
    double t = static_cast<double>(totals[static_cast<size_t>(n - 1)]);
    if (n >= 2) {  // add-one smoothing on numerator and denominator
      m += 1;
      t += 1;
    }
    if (m <= 0 || t <= 0) return 0;  // exact unigram precision of zero
    log_sum += std::log(m / t);
  }
  double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len) /
                                          static_cast<double>(hyp_len)));
  return static_cast<real>(bp * std::exp(log_sum / max_n));
}

real sequence_accuracy(const std::vector<std::vector<int>>& hyps,
                       const std::vector<std::vector<int>>& refs) {
  if (hyps.size() != refs.size())
    throw DomainError("sequence_accuracy: hypothesis/reference counts differ");
  if (refs.empty()) return 0;
  int64_t hits = 0;
  for (size_t i = 0; i < hyps.size(); ++i)
    if (strip_eos(hyps[i]) == strip_eos(refs[i])) ++hits;
  return static_cast<real>(hits) / static_cast<real>(hyps.size());
}

EvalReport evaluate(ModelParams& params, const ModelConfig& cfg,
                    const Corpus& corpus, int beam, real tau) {
  CorpusSummary sum = corpus_metrics(params, cfg, corpus, beam, tau);
  std::vector<std::vector<int>> refs;
  refs.reserve(corpus.size());
  for (const CorpusPair& p : corpus) refs.push_back(p.tgt);
  EvalReport r;
  r.bleu = smoothed_bleu(sum.hypotheses, refs);
  r.seq_accuracy = sequence_accuracy(sum.hypotheses, refs);
  r.avg_window = sum.avg_window;
  r.score_evals = sum.score_evals;
  r.mean_g = sum.mean_strength;
  r.tau = tau;
  return r;
}

const EvalReport& SweepResult::reference() const {
  for (const EvalReport& r : rows)
    if (std::isinf(r.tau)) return r;
  throw DomainError("sweep: no tau = infinity reference row");
}

std::vector<real> default_tau_list() {
  return {0.3, 0.5, 0.8, 1.0, 1.2, 1.4, 1.6, 5.0, 8.0, 999};
}

SweepResult sweep_thresholds(ModelParams& params, const ModelConfig& cfg,
                             const Corpus& dev, std::vector<real> taus, int beam) {
  if (cfg.attention != AttentionKind::kFlexible)
    throw UnsupportedModeError("sweep: threshold sweeps need a flexible model");
  if (taus.empty()) throw ConfigError("sweep: empty threshold list");
  std::sort(taus.begin(), taus.end());
  if (!std::isinf(taus.back())) taus.push_back(kInf);  // reference row
  SweepResult out;
  for (real tau : taus) out.rows.push_back(evaluate(params, cfg, dev, beam, tau));
  return out;
}

real select_threshold(const SweepResult& sweep, real max_bleu_loss, bool* ok) {
  const EvalReport& ref = sweep.reference();
  const EvalReport* best = &ref;
  for (const EvalReport& r : sweep.rows) {
    if (r.bleu + 1e-12 < ref.bleu - max_bleu_loss) continue;
    if (r.avg_window < best->avg_window ||
        (r.avg_window == best->avg_window && r.tau < best->tau))
      best = &r;
  }
  if (ok) *ok = !std::isinf(best->tau);
  return best->tau;
}

std::string render_spans(const DecodeTrace& trace, int S, const Vocab* tgt_vocab) {
  std::ostringstream os;
  char buf[32];
  for (size_t i = 0; i < trace.steps.size(); ++i) {
    const AttentionStep& st = trace.steps[i];
    for (int s = 0; s < S; ++s) os << (s >= st.lo && s <= st.hi ? '#' : '.');
    std::snprintf(buf, sizeof buf, "%.2f", static_cast<double>(st.strength));
    os << "  g=" << buf << "  ";
    if (i < trace.tokens.size())
      os << (tgt_vocab ? tgt_vocab->name_of(trace.tokens[i])
                       : std::to_string(trace.tokens[i]));
    else
      os << "<eos>";
    os << '\n';
  }
  return os.str();
}

std::string render_spans_svg(const DecodeTrace& trace, int S, const Vocab* tgt_vocab) {
  const int cell = 12, margin = 4, label_w = 140;
  int rows = static_cast<int>(trace.steps.size());
  int w = margin * 2 + S * cell + label_w;
  int h = margin * 2 + rows * cell;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\">\n";
  char buf[32];
  for (int r = 0; r < rows; ++r) {
    const AttentionStep& st = trace.steps[static_cast<size_t>(r)];
    for (int s = 0; s < S; ++s) {
      bool in = s >= st.lo && s <= st.hi;
      os << "<rect x=\"" << margin + s * cell << "\" y=\"" << margin + r * cell
         << "\" width=\"" << cell - 1 << "\" height=\"" << cell - 1 << "\" fill=\""
         << (in ? "#444444" : "#eeeeee") << "\"/>\n";
    }
    std::snprintf(buf, sizeof buf, "%.2f", static_cast<double>(st.strength));
    std::string tok =
        static_cast<size_t>(r) < trace.tokens.size()
            ? (tgt_vocab ? tgt_vocab->name_of(trace.tokens[static_cast<size_t>(r)])
                         : std::to_string(trace.tokens[static_cast<size_t>(r)]))
            : "<eos>";
    os << "<text x=\"" << margin + S * cell + 6 << "\" y=\""
       << margin + r * cell + cell - 3 << "\" font-size=\"10\" font-family=\"monospace\">g="
       << buf << " " << tok << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string format_sweep_table(const SweepResult& sweep) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%10s %12s %10s %10s %12s %10s\n", "tau", "window",
                "BLEU(%)", "seq_acc", "score_evals", "mean_g");
  os << line;
  for (const EvalReport& r : sweep.rows) {
    char tau_str[24];
    if (std::isinf(r.tau))
      std::snprintf(tau_str, sizeof tau_str, "inf");
    else
      std::snprintf(tau_str, sizeof tau_str, "%.2f", static_cast<double>(r.tau));
    std::snprintf(line, sizeof line, "%10s %12.3f %10.2f %10.4f %12llu %10.4f\n", tau_str,
                  static_cast<double>(r.avg_window), static_cast<double>(r.bleu) * 100,
                  static_cast<double>(r.seq_accuracy),
                  static_cast<unsigned long long>(r.score_evals),
                  static_cast<double>(r.mean_g));
    os << line;
  }
  return os.str();
}

}  // namespace flexattn
