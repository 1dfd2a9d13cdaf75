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

#include "flexattn/decoding.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>

namespace flexattn {

namespace {

// Step histories are shared between hypotheses via parent pointers so
// that extending a hypothesis costs O(1), not O(steps).
struct StepNode {
  AttentionStep step;
  std::shared_ptr<const StepNode> parent;
};

std::vector<AttentionStep> unwind(std::shared_ptr<const StepNode> tail) {
  std::vector<AttentionStep> steps;
  for (; tail; tail = tail->parent) steps.push_back(tail->step);
  std::reverse(steps.begin(), steps.end());
  return steps;
}

struct Hypothesis {
  std::vector<int> tokens;
  real logp = 0;
  DecoderState state;
  int feedback = Vocab::kBos;
  real p_prev = 0;
  std::shared_ptr<const StepNode> steps;
};

struct StepResult {
  DecoderState state;
  AttentionStep step;
  real p_t = 0;
  std::vector<real> logprobs;
};

// One decoder transition for one hypothesis; records window metering into
// the trace accumulators.
StepResult expand(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                  const EncoderStates& enc, Var keys, const Hypothesis& hyp, int t,
                  real tau, Meter* meter, DecodeTrace& trace) {
  StepResult out;
  Var emb = embed_tgt_token(tape, params, hyp.feedback);
  AttendIn in;
  in.h_prev = hyp.state.h;
  in.feedback_embed = emb;
  in.enc_states = enc.states;
  in.keys = keys;
  in.S = enc.length;
  in.t = t;
  in.mode = AttendMode::kTest;
  in.tau = tau;
  in.p_prev_val = hyp.p_prev;
  in.meter = meter;
  AttendOut att = attend(tape, params, cfg, in);
  out.state = decoder_step(tape, params, cfg, hyp.state, emb, att.context);
  Var logits = output_logits(tape, params, cfg, out.state);
  auto lv = tape.val(logits);
  real mx = lv[0];
  for (real x : lv) mx = std::max(mx, x);
  real z = 0;
  for (real x : lv) z += std::exp(x - mx);
  real lse = mx + std::log(z);
  out.logprobs.resize(lv.size());
  for (size_t i = 0; i < lv.size(); ++i) out.logprobs[i] = lv[i] - lse;
  out.step = att.step;
  out.p_t = att.step.p_t;
  trace.hyp_steps += 1;
  trace.sum_width += static_cast<real>(att.step.width());
  trace.score_evals += static_cast<uint64_t>(att.step.score_evals);
  trace.sum_strength += att.step.strength;
  return out;
}

}  // namespace

DecodeTrace beam_search(ModelParams& params, const ModelConfig& cfg,
                        std::span<const int> src, int beam, real tau, int max_out,
                        Meter* meter) {
  if (src.empty()) throw DomainError("beam_search: empty source");
  if (beam < 1) throw DomainError("beam_search: beam must be >= 1");
  auto t0 = std::chrono::steady_clock::now();
  int S = static_cast<int>(src.size());
  if (max_out < 0) max_out = 2 * S + 5;

  Tape tape;
  tape.grad_enabled = false;
  EncoderStates enc = encode(tape, params, cfg, src);
  Var keys = attention_keys(tape, params, cfg, enc.states);

  DecodeTrace trace;
  std::vector<Hypothesis> active(1);
  active[0].state = decoder_init(tape, cfg);
  std::vector<Hypothesis> completed;

  struct Candidate {
    real logp;
    int token;
    int beam_index;
  };

  for (int t = 1; t <= max_out && !active.empty(); ++t) {
    std::vector<StepResult> results;
    results.reserve(active.size());
    std::vector<Candidate> candidates;
    for (size_t bi = 0; bi < active.size(); ++bi) {
      results.push_back(expand(tape, params, cfg, enc, keys, active[bi], t, tau,
                               meter, trace));
      const StepResult& r = results.back();
      for (size_t tok = 0; tok < r.logprobs.size(); ++tok)
        candidates.push_back({active[bi].logp + r.logprobs[tok], static_cast<int>(tok),
                              static_cast<int>(bi)});
    }
    size_t keep = std::min(static_cast<size_t>(beam), candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(keep),
                      candidates.end(), [](const Candidate& a, const Candidate& b) {
                        if (a.logp != b.logp) return a.logp > b.logp;
                        if (a.token != b.token) return a.token < b.token;
                        return a.beam_index < b.beam_index;
                      });
    std::vector<Hypothesis> next;
    for (size_t ci = 0; ci < keep; ++ci) {
      const Candidate& c = candidates[ci];
      const Hypothesis& src_hyp = active[static_cast<size_t>(c.beam_index)];
      const StepResult& r = results[static_cast<size_t>(c.beam_index)];
      Hypothesis h;
      h.tokens = src_hyp.tokens;
      h.tokens.push_back(c.token);
      h.logp = c.logp;
      h.state = r.state;
      h.feedback = c.token;
      h.p_prev = r.p_t;
      h.steps = std::make_shared<const StepNode>(StepNode{r.step, src_hyp.steps});
      if (c.token == Vocab::kEos)
        completed.push_back(std::move(h));
      else
        next.push_back(std::move(h));
    }
    active = std::move(next);
  }

  const Hypothesis* best = nullptr;
  for (const Hypothesis& h : completed)
    if (!best || h.logp > best->logp) best = &h;
  if (!best)
    for (const Hypothesis& h : active)
      if (!best || h.logp > best->logp) best = &h;
  trace.tokens = best->tokens;
  if (!trace.tokens.empty() && trace.tokens.back() == Vocab::kEos) trace.tokens.pop_back();
  trace.logp = best->logp;
  trace.steps = unwind(best->steps);
  trace.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return trace;
}

DecodeTrace forced_decode(ModelParams& params, const ModelConfig& cfg,
                          std::span<const int> src, std::span<const int> ref,
                          real tau, Meter* meter) {
  if (src.empty()) throw DomainError("forced_decode: empty source");
  if (ref.empty()) throw DomainError("forced_decode: empty reference");
  auto t0 = std::chrono::steady_clock::now();
  Tape tape;
  tape.grad_enabled = false;
  EncoderStates enc = encode(tape, params, cfg, src);
  Var keys = attention_keys(tape, params, cfg, enc.states);

  DecodeTrace trace;
  Hypothesis hyp;
  hyp.state = decoder_init(tape, cfg);
  for (size_t t = 0; t < ref.size(); ++t) {
    StepResult r = expand(tape, params, cfg, enc, keys, hyp, static_cast<int>(t) + 1,
                          tau, meter, trace);
    int tok = ref[t];
    hyp.logp += r.logprobs[static_cast<size_t>(tok)];
    hyp.tokens.push_back(tok);
    hyp.state = r.state;
    hyp.feedback = tok;
    hyp.p_prev = r.p_t;
    hyp.steps = std::make_shared<const StepNode>(StepNode{r.step, hyp.steps});
  }
  trace.tokens = hyp.tokens;
  if (!trace.tokens.empty() && trace.tokens.back() == Vocab::kEos) trace.tokens.pop_back();
  trace.logp = hyp.logp;
  trace.steps = unwind(hyp.steps);
  trace.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return trace;
}

CorpusSummary corpus_metrics(ModelParams& params, const ModelConfig& cfg,
                             const Corpus& corpus, int beam, real tau) {
  if (corpus.empty()) throw DomainError("corpus_metrics: empty corpus");
  CorpusSummary out;
  real sent_window_sum = 0;
  real width_sum = 0, strength_sum = 0;
  int64_t steps_sum = 0;
  for (const CorpusPair& p : corpus) {
    DecodeTrace t = beam_search(params, cfg, p.src, beam, tau);
    out.seconds += t.seconds;
    out.score_evals += t.score_evals;
    sent_window_sum += t.avg_window();
    width_sum += t.sum_width;
    strength_sum += t.sum_strength;
    steps_sum += t.hyp_steps;
    out.hypotheses.push_back(t.tokens);
    out.traces.push_back(std::move(t));
  }
  out.avg_window = sent_window_sum / static_cast<real>(corpus.size());
  out.avg_window_weighted = steps_sum > 0 ? width_sum / static_cast<real>(steps_sum) : 0;
  out.mean_strength = steps_sum > 0 ? strength_sum / static_cast<real>(steps_sum) : 0;
  return out;
}

}  // namespace flexattn
