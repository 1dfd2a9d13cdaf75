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

#include "flexattn/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "flexattn/attention.hpp"
#include "flexattn/decoding.hpp"

namespace flexattn {

real TrainConfig::lr_at(int epoch) const {
  int halvings = std::max(0, epoch - halve_from_epoch + 1);
  return lr * std::pow(real(0.5), static_cast<real>(halvings));
}

void TrainConfig::validate() const {
  if (batch_size < 1 || epochs < 1 || finetune_epochs < 1)
    throw ConfigError("train: batch_size/epochs must be positive");
  if (!(lr > 0)) throw ConfigError("train: lr must be > 0");
  if (!(clip_norm > 0)) throw ConfigError("train: clip_norm must be > 0");
  if (halve_from_epoch < 1 || halve_from_epoch > epochs)
    throw ConfigError("train: need 1 <= halve_from_epoch <= epochs");
  if (beta < 0) throw ConfigError("train: beta must be >= 0");
  if (val_beam < 1) throw ConfigError("train: val_beam must be >= 1");
}

AdamState AdamState::init(const ModelParams& params) {
  AdamState st;
  for (const auto& [name, t] : params.tensors) {
    st.m.emplace(name, Tensor::zeros(t.dims));
    st.v.emplace(name, Tensor::zeros(t.dims));
  }
  return st;
}

std::vector<Batch> make_batches(const Corpus& corpus, int batch_size, uint64_t seed) {
  if (corpus.empty()) throw DomainError("make_batches: empty corpus");
  if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
  std::vector<size_t> order(corpus.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return corpus[a].src.size() < corpus[b].src.size();
  });
  std::vector<Batch> batches;
  for (size_t at = 0; at < order.size(); at += static_cast<size_t>(batch_size)) {
    size_t end = std::min(order.size(), at + static_cast<size_t>(batch_size));
    Batch b;
    for (size_t i = at; i < end; ++i) {
      const CorpusPair& p = corpus[order[i]];
      b.src.push_back(p.src);
      b.tgt.push_back(p.tgt);
      b.src_len.push_back(static_cast<int>(p.src.size()));
      b.tgt_len.push_back(static_cast<int>(p.tgt.size()));
      b.max_src = std::max(b.max_src, b.src_len.back());
      b.max_tgt = std::max(b.max_tgt, b.tgt_len.back());
    }
    for (auto& row : b.src) row.resize(static_cast<size_t>(b.max_src), Vocab::kPad);
    for (auto& row : b.tgt) row.resize(static_cast<size_t>(b.max_tgt), Vocab::kPad);
    batches.push_back(std::move(b));
  }
  Rng rng(seed);
  for (size_t i = batches.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int>(i)));
    std::swap(batches[i - 1], batches[j]);
  }
  return batches;
}

Var sample_objective(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                     std::span<const int> src, std::span<const int> tgt, real beta) {
  if (tgt.empty()) throw DomainError("objective: empty target");
  if (tgt.back() != Vocab::kEos) throw DomainError("objective: target must end with EOS");
  if (beta != 0 && cfg.attention != AttentionKind::kFlexible)
    throw UnsupportedModeError(
        "objective: the strength regularizer needs a flexible model");
  EncoderStates enc = encode(tape, params, cfg, src);
  Var keys = attention_keys(tape, params, cfg, enc.states);
  DecoderState state = decoder_init(tape, cfg);
  Var loss;
  std::vector<Var> strengths;
  Var p_prev;
  int feedback = Vocab::kBos;
  for (size_t t = 0; t < tgt.size(); ++t) {
    Var emb = embed_tgt_token(tape, params, feedback);
    AttendIn in;
    in.h_prev = state.h;
    in.feedback_embed = emb;
    in.enc_states = enc.states;
    in.keys = keys;
    in.S = enc.length;
    in.t = static_cast<int>(t) + 1;
    in.mode = AttendMode::kTrain;
    in.p_prev_var = p_prev;
    AttendOut att = attend(tape, params, cfg, in);
    if (att.p_var.valid()) p_prev = att.p_var;
    if (att.g_var.valid()) strengths.push_back(att.g_var);
    state = decoder_step(tape, params, cfg, state, emb, att.context);
    Var ce = tape.cross_entropy_logits(output_logits(tape, params, cfg, state), tgt[t]);
    loss = loss.valid() ? tape.add(loss, ce) : ce;
    feedback = tgt[t];
  }
  if (beta != 0) {
    Var g_all = tape.concat(strengths, 0);  // [T]
    Var mean_g = tape.scale(tape.sum(g_all), real(1) / static_cast<real>(strengths.size()));
    loss = tape.sub(loss, tape.scale(mean_g, beta));
  }
  return loss;
}

namespace {

// Sum of per-sample objectives; with `grad_scale` nonzero also accumulates
// grad_scale * d(objective_i)/d(params) for every sample.
real batch_objective(ModelParams& params, const ModelConfig& cfg, const Batch& batch,
                     real beta, real grad_scale, Tape& tape) {
  if (batch.size() == 0) throw DomainError("objective: empty batch");
  real total = 0;
  for (size_t i = 0; i < batch.size(); ++i) {
    tape.reset();
    tape.grad_enabled = grad_scale != 0;
    Var loss = sample_objective(tape, params, cfg, batch.src_view(i), batch.tgt_view(i),
                                beta);
    total += tape.scalar_val(loss);
    if (grad_scale != 0) tape.backward(loss, grad_scale);
  }
  return total;
}

}  // namespace

real cross_entropy(ModelParams& params, const ModelConfig& cfg, const Batch& batch) {
  Tape tape;
  return batch_objective(params, cfg, batch, 0, 0, tape);
}

real finetune_loss(ModelParams& params, const ModelConfig& cfg, const Batch& batch,
                   real beta) {
  if (cfg.attention != AttentionKind::kFlexible)
    throw UnsupportedModeError("finetune_loss: needs a flexible model");
  Tape tape;
  return batch_objective(params, cfg, batch, beta, 0, tape);
}

real clip_gradients(ModelParams& params, real clip_norm) {
  if (!(clip_norm > 0)) throw ConfigError("clip_gradients: clip_norm must be > 0");
  real sq = 0;
  for (auto& [name, t] : params.tensors)
    for (real g : t.g) sq += g * g;
  real norm = std::sqrt(sq);
  if (!std::isfinite(norm))
    throw NumericError("clip_gradients: non-finite gradient norm");
  if (norm > clip_norm) {
    real s = clip_norm / norm;
    for (auto& [name, t] : params.tensors)
      for (real& g : t.g) g *= s;
  }
  return norm;
}

void adam_step(ModelParams& params, AdamState& state, real lr) {
  state.step += 1;
  real bc1 = 1 - std::pow(state.beta1, static_cast<real>(state.step));
  real bc2 = 1 - std::pow(state.beta2, static_cast<real>(state.step));
  for (auto& [name, t] : params.tensors) {
    if (t.g.empty()) throw ShapeError("adam_step: missing gradient for " + name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (size_t i = 0; i < t.v.size(); ++i) {
      real g = t.g[i];
      m.v[i] = state.beta1 * m.v[i] + (1 - state.beta1) * g;
      v.v[i] = state.beta2 * v.v[i] + (1 - state.beta2) * g * g;
      real mhat = m.v[i] / bc1;
      real vhat = v.v[i] / bc2;
      t.v[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
      if (!std::isfinite(t.v[i]))
        throw NumericError("adam_step: parameter " + name + " became non-finite");
    }
  }
}

namespace {

EpochLog validate_epoch(ModelParams& params, const ModelConfig& cfg,
                        const Corpus& dev, int beam, int epoch, real lr,
                        real train_loss) {
  EpochLog log;
  log.epoch = epoch;
  log.lr = lr;
  log.train_loss = train_loss;
  if (!dev.empty()) {
    CorpusSummary sum = corpus_metrics(params, cfg, dev, beam, kInf);
    std::vector<std::vector<int>> refs;
    for (const CorpusPair& p : dev) refs.push_back(p.tgt);
    log.dev_bleu = smoothed_bleu(sum.hypotheses, refs);
    log.dev_seq_acc = sequence_accuracy(sum.hypotheses, refs);
    log.dev_mean_g = sum.mean_strength;
  }
  return log;
}

real run_epoch(ModelParams& params, const ModelConfig& cfg, const Corpus& corpus,
               const TrainConfig& tc, real beta, real lr, uint64_t batch_seed,
               AdamState& adam, Tape& tape) {
  std::vector<Batch> batches = make_batches(corpus, tc.batch_size, batch_seed);
  real loss_sum = 0;
  int64_t samples = 0;
  for (const Batch& batch : batches) {
    params.zero_grads();
    real bs = static_cast<real>(batch.size());
    real total = batch_objective(params, cfg, batch, beta, 1 / bs, tape);
    if (!std::isfinite(total))
      throw NumericError("train: loss diverged (non-finite batch loss)");
    loss_sum += total;
    samples += static_cast<int64_t>(batch.size());
    clip_gradients(params, tc.clip_norm);
    adam_step(params, adam, lr);
  }
  return loss_sum / static_cast<real>(samples);  // mean per-sample loss
}

}  // namespace

TrainResult train(const Corpus& train_corpus, const Corpus& dev_corpus,
                  const ModelConfig& cfg, const TrainConfig& tc,
                  const EpochCallback& on_epoch, const TrainState* resume) {
  cfg.validate();
  tc.validate();
  if (train_corpus.empty()) throw DomainError("train: empty corpus");
  TrainResult out;
  int start_epoch = 1;
  if (resume) {
    out.state = *resume;
    start_epoch = resume->completed_epochs + 1;
  } else {
    out.state.params = ModelParams::init(cfg, tc.seed);
    out.state.adam = AdamState::init(out.state.params);
  }
  out.state.params.ensure_grads();

  real best_bleu = -1, best_acc = -1;
  Tape tape;
  for (int epoch = start_epoch; epoch <= tc.epochs; ++epoch) {
    real lr = tc.lr_at(epoch);
    real train_loss =
        run_epoch(out.state.params, cfg, train_corpus, tc, 0, lr,
                  Rng::mix(tc.seed, static_cast<uint64_t>(epoch)), out.state.adam, tape);
    out.state.completed_epochs = epoch;
    EpochLog log = validate_epoch(out.state.params, cfg, dev_corpus, tc.val_beam, epoch,
                                  lr, train_loss);
    out.log.push_back(log);
    if (on_epoch) on_epoch(log);
    if (dev_corpus.empty() || log.dev_bleu > best_bleu ||
        (log.dev_bleu == best_bleu && log.dev_seq_acc > best_acc)) {
      best_bleu = log.dev_bleu;
      best_acc = log.dev_seq_acc;
      out.best = out.state.params;
      out.best_epoch = epoch;
    }
  }
  if (out.best.tensors.empty()) {  // no validation set: final params win
    out.best = out.state.params;
    out.best_epoch = out.state.completed_epochs;
  }
  return out;
}

real mean_strength_forced(ModelParams& params, const ModelConfig& cfg,
                          const Corpus& corpus) {
  if (corpus.empty()) throw DomainError("mean_strength_forced: empty corpus");
  real sum = 0;
  int64_t steps = 0;
  for (const CorpusPair& p : corpus) {
    DecodeTrace t = forced_decode(params, cfg, p.src, p.tgt, kInf);
    sum += t.sum_strength;
    steps += t.hyp_steps;
  }
  return sum / static_cast<real>(steps);
}

FinetuneResult finetune(const ModelParams& start, const Corpus& train_corpus,
                        const Corpus& dev_corpus, const ModelConfig& cfg,
                        const TrainConfig& tc, real lr,
                        const EpochCallback& on_epoch) {
  if (cfg.attention != AttentionKind::kFlexible)
    throw UnsupportedModeError("finetune: needs a flexible model");
  tc.validate();
  FinetuneResult out;
  out.params = start;
  out.params.ensure_grads();
  out.mean_g_before = dev_corpus.empty()
                          ? 0
                          : mean_strength_forced(out.params, cfg, dev_corpus);
  AdamState adam = AdamState::init(out.params);
  Tape tape;
  for (int epoch = 1; epoch <= tc.finetune_epochs; ++epoch) {
    real train_loss =
        run_epoch(out.params, cfg, train_corpus, tc, tc.beta, lr,
                  Rng::mix(tc.seed ^ 0x5eedf00dULL, static_cast<uint64_t>(epoch)), adam,
                  tape);
    EpochLog log =
        validate_epoch(out.params, cfg, dev_corpus, tc.val_beam, epoch, lr, train_loss);
    out.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  out.mean_g_after =
      dev_corpus.empty() ? 0 : mean_strength_forced(out.params, cfg, dev_corpus);
  return out;
}

// --- train-state io ----------------------------------------------------

void save_train_state(const TrainState& state, const ModelConfig& cfg,
                      const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("train_state: cannot open " + path + " for writing");
  out << "completed_epochs=" << state.completed_epochs << '\n';
  out << "adam_step=" << state.adam.step << '\n';
  out << "checkpoint\n";
  save_checkpoint(state.params, cfg, out);
  char buf[64];
  auto num = [&](real x) {
    std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(x));
    return std::string(buf);
  };
  out << "moments\n";
  for (const auto& [name, t] : state.adam.m)
    for (real x : t.v) out << num(x) << '\n';
  for (const auto& [name, t] : state.adam.v)
    for (real x : t.v) out << num(x) << '\n';
  if (!out) throw ParseError("train_state: write to " + path + " failed");
}

TrainState load_train_state(const std::string& path, ModelConfig* cfg_out) {
  std::ifstream in(path);
  if (!in) throw ParseError("train_state: cannot open " + path);
  TrainState state;
  std::string line;
  int line_no = 0;
  bool saw_checkpoint = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line == "checkpoint") {
      saw_checkpoint = true;
      break;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("train_state: line " + std::to_string(line_no) +
                       ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    if (key == "completed_epochs") state.completed_epochs = std::stoi(value);
    else if (key == "adam_step") state.adam.step = std::stoll(value);
    else
      throw ParseError("train_state: line " + std::to_string(line_no) +
                       ": unknown key '" + key + "'");
  }
  if (!saw_checkpoint) throw IntegrityError("train_state: missing checkpoint section");
  Checkpoint ck = load_checkpoint(in, line_no);
  state.params = std::move(ck.params);
  if (cfg_out) *cfg_out = ck.config;
  if (!std::getline(in, line) || line != "moments")
    throw IntegrityError("train_state: missing moments section");
  int64_t saved_step = state.adam.step;
  state.adam = AdamState::init(state.params);
  state.adam.step = saved_step;
  for (auto* group : {&state.adam.m, &state.adam.v}) {
    for (auto& [name, t] : *group) {
      for (real& x : t.v) {
        ++line_no;
        if (!std::getline(in, line))
          throw IntegrityError("train_state: truncated moments at line " +
                               std::to_string(line_no));
        x = static_cast<real>(std::stod(line));
      }
    }
  }
  return state;
}

}  // namespace flexattn
