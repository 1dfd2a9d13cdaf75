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

#include <map>
#include <span>
#include <string>
#include <vector>

#include "flexattn/tensor.hpp"

namespace flexattn {

enum class AttentionKind { kGlobal, kLocal, kFlexible };

AttentionKind attention_from_name(const std::string& name);
std::string attention_name(AttentionKind kind);

struct ModelConfig {
  int src_vocab = 0;  // full id space, reserved ids included
  int tgt_vocab = 0;
  int embed_dim = 32;
  int hidden_dim = 64;
  int preout_dim = 48;
  AttentionKind attention = AttentionKind::kGlobal;
  real penalty_sigma = 1.5;
  int local_half_window = 3;
  int max_len = 200;

  int enc_state_dim() const { return 2 * hidden_dim; }
  void validate() const;
};

/// All trainable arrays by name.  The full set exists for every attention
/// kind so that identically seeded models are comparable across kinds;
/// mechanisms simply ignore the parameters they do not use.
struct ModelParams {
  std::map<std::string, Tensor> tensors;

  static ModelParams init(const ModelConfig& cfg, uint64_t seed);
  static std::vector<std::string> names(const ModelConfig& cfg);

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  void ensure_grads();
  void zero_grads();
  int64_t value_count() const;
};

void save_checkpoint(const ModelParams& params, const ModelConfig& cfg,
                     const std::string& path);
void save_checkpoint(const ModelParams& params, const ModelConfig& cfg,
                     std::ostream& out);

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};
Checkpoint load_checkpoint(const std::string& path);
/// `line_no` carries the running line count for error positions.
Checkpoint load_checkpoint(std::istream& in, int& line_no);

/// Bidirectional encoder output: row s of `states` is [forward_s; backward_s].
struct EncoderStates {
  Var states;  // [S, 2*hidden_dim]
  int length = 0;
};

EncoderStates encode(Tape& tape, ModelParams& params,
                     const ModelConfig& cfg, std::span<const int> tokens);

struct DecoderState {
  Var h;  // [hidden_dim]
  Var c;  // [hidden_dim]
};

DecoderState decoder_init(Tape& tape, const ModelConfig& cfg);

/// One LSTM transition on the concatenated [feedback embedding; context].
DecoderState decoder_step(Tape& tape, ModelParams& params,
                          const ModelConfig& cfg, const DecoderState& prev,
                          Var feedback_embed, Var context);

/// hidden -> tanh pre-output layer -> affine vocabulary logits.
Var output_logits(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                  const DecoderState& state);

// Embedding helpers ([n, embed] for a sequence, [embed] for one token).
Var embed_src(Tape& tape, ModelParams& params, std::span<const int> ids);
Var embed_tgt_token(Tape& tape, ModelParams& params, int id);

}  // namespace flexattn
