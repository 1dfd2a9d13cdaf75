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

#include <functional>
#include <optional>

#include "flexattn/data.hpp"
#include "flexattn/evaluation.hpp"
#include "flexattn/model.hpp"

namespace flexattn {

struct TrainConfig {
  int batch_size = 16;
  real lr = 1e-4;
  int epochs = 30;
  int halve_from_epoch = 20;  // halve the rate each epoch from here on
  real clip_norm = 3.0;
  real beta = 0.1;  // fine-tuning strength-regularizer coefficient
  uint64_t seed = 1;
  int val_beam = 1;  // beam used for the per-epoch dev decode
  int finetune_epochs = 1;

  real lr_at(int epoch) const;  // 1-based
  void validate() const;
};

struct AdamState {
  std::map<std::string, Tensor> m, v;
  int64_t step = 0;
  real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState init(const ModelParams& params);
};

/// Length-sorted padded batch.  PAD ids fill both sides up to the batch
/// maximum; the true lengths are the loss/encode masks.
struct Batch {
  std::vector<std::vector<int>> src, tgt;  // padded to max_src / max_tgt
  std::vector<int> src_len, tgt_len;       // pre-padding lengths (tgt incl. EOS)
  int max_src = 0, max_tgt = 0;

  size_t size() const { return src.size(); }
  std::span<const int> src_view(size_t i) const {
    return {src[i].data(), static_cast<size_t>(src_len[i])};
  }
  std::span<const int> tgt_view(size_t i) const {
    return {tgt[i].data(), static_cast<size_t>(tgt_len[i])};
  }
};

/// Sort by source length (stable), group, shuffle the batch order.
std::vector<Batch> make_batches(const Corpus& corpus, int batch_size, uint64_t seed);

/// Teacher-forced objective graph for one sample: sum over target steps of
/// -log p(y_t | y_<t, x), minus beta times the mean strength g(t) when
/// beta is nonzero (flexible models only).
Var sample_objective(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                     std::span<const int> src, std::span<const int> tgt, real beta);

/// Sum over the batch of per-sample token-level cross-entropy.
real cross_entropy(ModelParams& params, const ModelConfig& cfg, const Batch& batch);

/// Sum over the batch of the fine-tuning objective (cross-entropy minus
/// beta times the per-sample mean strength).
real finetune_loss(ModelParams& params, const ModelConfig& cfg, const Batch& batch,
                   real beta);

/// Scales every gradient by clip_norm / norm when the global L2 norm
/// exceeds clip_norm.  Returns the pre-clip norm.
real clip_gradients(ModelParams& params, real clip_norm);

/// Standard bias-corrected update; iterates parameters in name order.
void adam_step(ModelParams& params, AdamState& state, real lr);

struct EpochLog {
  int epoch = 0;
  real lr = 0;
  real train_loss = 0;  // mean over batches of batch-mean loss
  real dev_bleu = 0;
  real dev_seq_acc = 0;
  real dev_mean_g = 0;
};

struct TrainState {
  ModelParams params;
  AdamState adam;
  int completed_epochs = 0;
};

struct TrainResult {
  ModelParams best;  // highest dev BLEU, sequence accuracy breaking ties
  int best_epoch = 0;
  TrainState state;  // final, for resuming
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Full run: batches -> forward -> backward -> clip -> Adam, with the
/// halving schedule and per-epoch dev validation.  `resume` continues a
/// previous run from its recorded epoch.  Aborts with NumericError when
/// the loss stops being finite.
TrainResult train(const Corpus& train_corpus, const Corpus& dev_corpus,
                  const ModelConfig& cfg, const TrainConfig& tc,
                  const EpochCallback& on_epoch = nullptr,
                  const TrainState* resume = nullptr);

/// Teacher-forced mean strength over a held-out set (full window).
real mean_strength_forced(ModelParams& params, const ModelConfig& cfg,
                          const Corpus& corpus);

struct FinetuneResult {
  ModelParams params;
  real mean_g_before = 0;
  real mean_g_after = 0;
  std::vector<EpochLog> log;
};

/// Strength-regularized tuning of an already-trained flexible model.
FinetuneResult finetune(const ModelParams& start, const Corpus& train_corpus,
                        const Corpus& dev_corpus, const ModelConfig& cfg,
                        const TrainConfig& tc, real lr,
                        const EpochCallback& on_epoch = nullptr);

void save_train_state(const TrainState& state, const ModelConfig& cfg,
                      const std::string& path);
TrainState load_train_state(const std::string& path, ModelConfig* cfg_out = nullptr);

}  // namespace flexattn
