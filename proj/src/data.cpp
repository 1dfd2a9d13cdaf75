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

#include "flexattn/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace flexattn {

int Vocab::add(const std::string& token) {
  auto it = index.find(token);
  if (it != index.end()) return it->second;
  int id = size();
  tokens.push_back(token);
  index.emplace(token, id);
  return id;
}

int Vocab::id_of(const std::string& token) const {
  auto it = index.find(token);
  return it == index.end() ? kUnk : it->second;
}

std::string Vocab::name_of(int id) const {
  switch (id) {
    case kPad: return "<pad>";
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kUnk: return "<unk>";
    default: break;
  }
  int i = id - kReserved;
  if (i < 0 || i >= static_cast<int>(tokens.size()))
    throw DomainError("vocab: id " + std::to_string(id) + " outside [0," +
                      std::to_string(size()) + ")");
  return tokens[static_cast<size_t>(i)];
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ParseError("vocab: cannot open " + path + " for writing");
  for (const std::string& t : tokens) out << t << '\n';
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("vocab: cannot open " + path);
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    v.add(line);
  }
  return v;
}

TaskKind task_from_name(const std::string& name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "reverse") return TaskKind::kReverse;
  if (name == "block_swap") return TaskKind::kBlockSwap;
  throw ConfigError("unknown task '" + name + "' (expected copy|reverse|block_swap)");
}

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kBlockSwap: return "block_swap";
  }
  return "?";
}

void TaskSpec::validate() const {
  if (vocab_size < 1) throw ConfigError("task: vocab_size must be positive");
  if (min_chunks < 1 || max_chunks < min_chunks)
    throw ConfigError("task: need 1 <= min_chunks <= max_chunks");
  if (min_chunk_len < 1 || max_chunk_len < min_chunk_len)
    throw ConfigError("task: need 1 <= min_chunk_len <= max_chunk_len");
  if (swap_prob < 0 || swap_prob > 1) throw ConfigError("task: swap_prob outside [0,1]");
  if (corpus_size < 1) throw ConfigError("task: corpus_size must be positive");
  if (max_sentence_len() > vocab_size)
    throw ConfigError("task: vocab too small for requested lengths (need " +
                      std::to_string(max_sentence_len()) + " distinct tokens, have " +
                      std::to_string(vocab_size) + ")");
}

namespace {

// Distinct source ids for one sentence: partial Fisher-Yates over the
// non-reserved id range.
std::vector<int> sample_distinct_ids(Rng& rng, int vocab_size, int count) {
  std::vector<int> pool(static_cast<size_t>(vocab_size));
  std::iota(pool.begin(), pool.end(), Vocab::kReserved);
  for (int i = 0; i < count; ++i) {
    int j = i + rng.uniform_int(vocab_size - i);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(count));
  return pool;
}

CorpusPair generate_pair(const TaskSpec& spec, uint64_t pair_seed) {
  Rng rng(pair_seed);
  int k = spec.min_chunks + rng.uniform_int(spec.max_chunks - spec.min_chunks + 1);
  std::vector<int> chunk_len(static_cast<size_t>(k));
  int total = 0;
  for (int i = 0; i < k; ++i) {
    chunk_len[static_cast<size_t>(i)] =
        spec.chunk_len_lo() + rng.uniform_int(spec.chunk_len_hi() - spec.chunk_len_lo() + 1);
    total += chunk_len[static_cast<size_t>(i)];
  }
  CorpusPair pair;
  pair.src = sample_distinct_ids(rng, spec.vocab_size, total);

  // The token-wise mapping f is the identity on id space: source token
  // "sN" corresponds to target token "tN" with the same id.
  switch (spec.kind) {
    case TaskKind::kCopy:
      pair.tgt = pair.src;
      break;
    case TaskKind::kReverse:
      pair.tgt.assign(pair.src.rbegin(), pair.src.rend());
      break;
    case TaskKind::kBlockSwap: {
      bool swap = k >= 2 && rng.bernoulli(spec.swap_prob);
      if (!swap) {
        pair.tgt = pair.src;
      } else {
        int j = 1 + rng.uniform_int(k - 1);  // chunk index in {1..k-1} (0-based)
        std::vector<int> offs(static_cast<size_t>(k + 1), 0);
        for (int i = 0; i < k; ++i)
          offs[static_cast<size_t>(i + 1)] =
              offs[static_cast<size_t>(i)] + chunk_len[static_cast<size_t>(i)];
        auto append_chunk = [&](int c) {
          pair.tgt.insert(pair.tgt.end(), pair.src.begin() + offs[static_cast<size_t>(c)],
                          pair.src.begin() + offs[static_cast<size_t>(c + 1)]);
        };
        append_chunk(j);  // displaced block first
        for (int c = 0; c < k; ++c)
          if (c != j) append_chunk(c);
      }
      break;
    }
  }
  pair.tgt.push_back(Vocab::kEos);
  return pair;
}

}  // namespace

GeneratedCorpus generate(const TaskSpec& spec) {
  spec.validate();
  GeneratedCorpus out;
  for (int i = 0; i < spec.vocab_size; ++i) {
    out.src_vocab.add("s" + std::to_string(i + 1));
    out.tgt_vocab.add("t" + std::to_string(i + 1));
  }
  out.pairs.reserve(static_cast<size_t>(spec.corpus_size));
  for (int i = 0; i < spec.corpus_size; ++i)
    out.pairs.push_back(generate_pair(spec, Rng::mix(spec.seed, static_cast<uint64_t>(i))));
  return out;
}

bool is_monotone_pair(const CorpusPair& p) {
  if (p.tgt.size() != p.src.size() + 1) return false;
  for (size_t i = 0; i < p.src.size(); ++i)
    if (p.tgt[i] != p.src[i]) return false;
  return p.tgt.back() == Vocab::kEos;
}

void save_corpus(const Corpus& corpus, const Vocab& src_vocab,
                 const Vocab& tgt_vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("corpus: cannot open " + path + " for writing");
  for (const CorpusPair& p : corpus) {
    for (size_t i = 0; i < p.src.size(); ++i) {
      if (i) out << ' ';
      out << src_vocab.name_of(p.src[i]);
    }
    out << '\t';
    bool first = true;
    for (int id : p.tgt) {
      if (id == Vocab::kEos) break;  // EOS is implicit in the file format
      if (!first) out << ' ';
      out << tgt_vocab.name_of(id);
      first = false;
    }
    out << '\n';
  }
}

namespace {
std::vector<std::string> split_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}
}  // namespace

LoadedCorpus load_corpus(const std::string& path, const Vocab& src_vocab,
                         const Vocab& tgt_vocab) {
  std::ifstream in(path);
  if (!in) throw ParseError("corpus: cannot open " + path);
  LoadedCorpus out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw ParseError("corpus: line " + std::to_string(line_no) +
                       ": missing tab separator");
    if (line.find('\t', tab + 1) != std::string::npos)
      throw ParseError("corpus: line " + std::to_string(line_no) +
                       ": more than one tab separator");
    CorpusPair pair;
    for (const std::string& t : split_tokens(line.substr(0, tab))) {
      int id = src_vocab.id_of(t);
      if (id == Vocab::kUnk && src_vocab.index.find(t) == src_vocab.index.end())
        ++out.unk_count;
      pair.src.push_back(id);
    }
    for (const std::string& t : split_tokens(line.substr(tab + 1))) {
      int id = tgt_vocab.id_of(t);
      if (id == Vocab::kUnk && tgt_vocab.index.find(t) == tgt_vocab.index.end())
        ++out.unk_count;
      pair.tgt.push_back(id);
    }
    if (pair.src.empty() || pair.tgt.empty())
      throw ParseError("corpus: line " + std::to_string(line_no) + ": empty side");
    pair.tgt.push_back(Vocab::kEos);
    out.pairs.push_back(std::move(pair));
  }
  return out;
}

SplitCorpus split(const Corpus& corpus, double r_train, double r_dev,
                  double r_test, uint64_t seed) {
  if (std::abs(r_train + r_dev + r_test - 1.0) > 1e-9)
    throw ConfigError("split: ratios must sum to 1");
  if (r_train < 0 || r_dev < 0 || r_test < 0)
    throw ConfigError("split: negative ratio");
  size_t n = corpus.size();
  size_t n_dev = static_cast<size_t>(r_dev * static_cast<double>(n));
  size_t n_test = static_cast<size_t>(r_test * static_cast<double>(n));
  size_t n_train = n - n_dev - n_test;  // remainder goes to train
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(seed);
  for (size_t i = n; i > 1; --i) {
    size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int>(i)));
    std::swap(order[i - 1], order[j]);
  }
  SplitCorpus out;
  for (size_t i = 0; i < n; ++i) {
    const CorpusPair& p = corpus[order[i]];
    if (i < n_train)
      out.train.push_back(p);
    else if (i < n_train + n_dev)
      out.dev.push_back(p);
    else
      out.test.push_back(p);
  }
  return out;
}

double mean_source_length(const Corpus& corpus) {
  if (corpus.empty()) return 0;
  double s = 0;
  for (const CorpusPair& p : corpus) s += static_cast<double>(p.src.size());
  return s / static_cast<double>(corpus.size());
}

}  // namespace flexattn
