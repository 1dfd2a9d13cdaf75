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
#include <unordered_map>
#include <vector>

#include "flexattn/common.hpp"

namespace flexattn {

/// Token <-> id map with fixed reserved ids.  File layout: one token per
/// line, id = line number + 4.
struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kReserved = 4;

  std::vector<std::string> tokens;  // non-reserved, id = kReserved + index
  std::unordered_map<std::string, int> index;

  int size() const { return kReserved + static_cast<int>(tokens.size()); }
  int add(const std::string& token);
  // Returns kUnk for unknown tokens.
  int id_of(const std::string& token) const;
  std::string name_of(int id) const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);
};

/// One parallel sample; tgt is EOS-terminated, src is raw.
struct CorpusPair {
  std::vector<int> src;
  std::vector<int> tgt;
};
using Corpus = std::vector<CorpusPair>;

enum class TaskKind { kCopy, kReverse, kBlockSwap };

TaskKind task_from_name(const std::string& name);
std::string task_name(TaskKind kind);

struct TaskSpec {
  TaskKind kind = TaskKind::kBlockSwap;
  int vocab_size = 200;  // lexical types per side
  int min_chunks = 3, max_chunks = 6;
  int min_chunk_len = 2, max_chunk_len = 4;
  double swap_prob = 0.3;
  bool long_mode = false;  // multiplies the chunk-length range by 6
  uint64_t seed = 1;
  int corpus_size = 11000;

  int chunk_len_lo() const { return min_chunk_len * (long_mode ? 6 : 1); }
  int chunk_len_hi() const { return max_chunk_len * (long_mode ? 6 : 1); }
  int max_sentence_len() const { return max_chunks * chunk_len_hi(); }
  void validate() const;
};

struct GeneratedCorpus {
  Corpus pairs;
  Vocab src_vocab;
  Vocab tgt_vocab;
};

/// Deterministic under (seed, pair index): regenerating any prefix or
/// shard yields identical pairs.  Tokens within one sentence are distinct
/// so the gold word alignment is unambiguous.
GeneratedCorpus generate(const TaskSpec& spec);

/// True when the target is the monotone token-wise mapping of the source
/// (i.e. no block was displaced).
bool is_monotone_pair(const CorpusPair& p);

void save_corpus(const Corpus& corpus, const Vocab& src_vocab,
                 const Vocab& tgt_vocab, const std::string& path);

struct LoadedCorpus {
  Corpus pairs;
  int unk_count = 0;
};
LoadedCorpus load_corpus(const std::string& path, const Vocab& src_vocab,
                         const Vocab& tgt_vocab);

struct SplitCorpus {
  Corpus train, dev, test;
};
/// Seeded disjoint partition; sizes are floor(ratio * n) with the
/// remainder going to train.
SplitCorpus split(const Corpus& corpus, double r_train, double r_dev,
                  double r_test, uint64_t seed);

double mean_source_length(const Corpus& corpus);

}  // namespace flexattn
