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

#include "flexattn/model.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "flexattn/data.hpp"

namespace flexattn {

AttentionKind attention_from_name(const std::string& name) {
  if (name == "global") return AttentionKind::kGlobal;
  if (name == "local") return AttentionKind::kLocal;
  if (name == "flexible") return AttentionKind::kFlexible;
  throw ConfigError("unknown attention '" + name + "' (expected global|local|flexible)");
}

std::string attention_name(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::kGlobal: return "global";
    case AttentionKind::kLocal: return "local";
    case AttentionKind::kFlexible: return "flexible";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (src_vocab <= Vocab::kReserved || tgt_vocab <= Vocab::kReserved)
    throw ConfigError("model: vocab sizes must exceed the reserved id range");
  if (embed_dim < 1 || hidden_dim < 1 || preout_dim < 1 || max_len < 1)
    throw ConfigError("model: all dims must be positive");
  if (local_half_window < 1) throw ConfigError("model: local_half_window must be >= 1");
  if (!(penalty_sigma > 0)) throw ConfigError("model: penalty_sigma must be > 0");
}

std::vector<std::string> ModelParams::names(const ModelConfig&) {
  return {
      "att.W_a",  "att.v_a",  "dec.W",     "dec.b",     "enc_bwd.W", "enc_bwd.b",
      "enc_fwd.W", "enc_fwd.b", "local.W_p", "local.v_p", "out.W",    "out.b",
      "preout.W", "preout.b", "src_embed", "strength.W_g", "strength.b_g",
      "strength.v_g", "tgt_embed",
  };
}

namespace {
std::map<std::string, std::vector<int>> shapes_of(const ModelConfig& cfg) {
  int e = cfg.embed_dim, h = cfg.hidden_dim, s2 = cfg.enc_state_dim();
  int att = h;  // alignment hidden size follows the decoder state size
  return {
      {"src_embed", {cfg.src_vocab, e}},
      {"tgt_embed", {cfg.tgt_vocab, e}},
      {"enc_fwd.W", {4 * h, e + h}},
      {"enc_fwd.b", {4 * h}},
      {"enc_bwd.W", {4 * h, e + h}},
      {"enc_bwd.b", {4 * h}},
      {"dec.W", {4 * h, e + s2 + h}},
      {"dec.b", {4 * h}},
      {"att.W_a", {att, h + s2}},
      {"att.v_a", {att}},
      {"strength.W_g", {h, h + e}},
      {"strength.v_g", {h}},
      {"strength.b_g", {1}},
      {"local.W_p", {h, h}},
      {"local.v_p", {h}},
      {"preout.W", {cfg.preout_dim, h}},
      {"preout.b", {cfg.preout_dim}},
      {"out.W", {cfg.tgt_vocab, cfg.preout_dim}},
      {"out.b", {cfg.tgt_vocab}},
  };
}

bool is_bias(const std::string& name) {
  return name == "enc_fwd.b" || name == "enc_bwd.b" || name == "dec.b" ||
         name == "preout.b" || name == "out.b" || name == "strength.b_g";
}
}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelParams p;
  auto shapes = shapes_of(cfg);
  Rng rng(seed);
  for (const std::string& name : names(cfg)) {
    Tensor t = Tensor::zeros(shapes.at(name));
    if (!is_bias(name))
      for (real& x : t.v) x = rng.uniform(real(-0.08), real(0.08));
    p.tensors.emplace(name, std::move(t));
  }
  // Forget-gate bias starts at 1 (gate layout: input, forget, cell, output).
  int h = cfg.hidden_dim;
  for (const char* b : {"enc_fwd.b", "enc_bwd.b", "dec.b"})
    for (int i = h; i < 2 * h; ++i) p.at(b).v[static_cast<size_t>(i)] = 1;
  return p;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("params: no parameter named '" + name + "'");
  return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("params: no parameter named '" + name + "'");
  return it->second;
}

void ModelParams::ensure_grads() {
  for (auto& [name, t] : tensors) t.ensure_grad();
}

void ModelParams::zero_grads() {
  for (auto& [name, t] : tensors) t.zero_grad();
}

int64_t ModelParams::value_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

// --- checkpoint io ---------------------------------------------------------

void save_checkpoint(const ModelParams& params, const ModelConfig& cfg,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("checkpoint: cannot open " + path + " for writing");
  save_checkpoint(params, cfg, out);
  if (!out) throw ParseError("checkpoint: write to " + path + " failed");
}

void save_checkpoint(const ModelParams& params, const ModelConfig& cfg,
                     std::ostream& out) {
  char buf[64];
  auto num = [&](real x) {
    std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(x));
    return std::string(buf);
  };
  out << "attention=" << attention_name(cfg.attention) << '\n';
  out << "src_vocab=" << cfg.src_vocab << '\n';
  out << "tgt_vocab=" << cfg.tgt_vocab << '\n';
  out << "embed_dim=" << cfg.embed_dim << '\n';
  out << "hidden_dim=" << cfg.hidden_dim << '\n';
  out << "preout_dim=" << cfg.preout_dim << '\n';
  out << "penalty_sigma=" << num(cfg.penalty_sigma) << '\n';
  out << "local_half_window=" << cfg.local_half_window << '\n';
  out << "max_len=" << cfg.max_len << '\n';
  for (const auto& [name, t] : params.tensors) {
    out << "param " << name << ' ' << t.rank();
    for (int d : t.dims) out << ' ' << d;
    out << ' ' << t.size() << '\n';
  }
  out << "values\n";
  for (const auto& [name, t] : params.tensors)
    for (real x : t.v) out << num(x) << '\n';
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("checkpoint: cannot open " + path);
  int line_no = 0;
  Checkpoint ck = load_checkpoint(in, line_no);
  std::string line;
  if (std::getline(in, line) && !line.empty())
    throw IntegrityError("checkpoint: trailing data after values");
  return ck;
}

Checkpoint load_checkpoint(std::istream& in, int& line_no) {
  Checkpoint ck;
  ModelConfig& cfg = ck.config;
  std::string line;
  struct Header {
    std::string name;
    std::vector<int> dims;
    int64_t count;
  };
  std::vector<Header> headers;
  bool saw_values = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line == "values") {
      saw_values = true;
      break;
    }
    if (line.rfind("param ", 0) == 0) {
      std::istringstream is(line);
      std::string tag, name;
      int rank;
      if (!(is >> tag >> name >> rank) || rank < 1 || rank > 2)
        throw ParseError("checkpoint: line " + std::to_string(line_no) + ": bad param line");
      Header h;
      h.name = name;
      h.dims.resize(static_cast<size_t>(rank));
      for (int i = 0; i < rank; ++i)
        if (!(is >> h.dims[static_cast<size_t>(i)]))
          throw ParseError("checkpoint: line " + std::to_string(line_no) + ": bad dims");
      if (!(is >> h.count))
        throw ParseError("checkpoint: line " + std::to_string(line_no) + ": missing count");
      if (shape_size(h.dims) != h.count)
        throw IntegrityError("checkpoint: line " + std::to_string(line_no) + ": param " +
                             name + " count " + std::to_string(h.count) +
                             " does not match shape " + shape_str(h.dims));
      headers.push_back(std::move(h));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("checkpoint: line " + std::to_string(line_no) + ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    try {
      if (key == "attention") cfg.attention = attention_from_name(value);
      else if (key == "src_vocab") cfg.src_vocab = std::stoi(value);
      else if (key == "tgt_vocab") cfg.tgt_vocab = std::stoi(value);
      else if (key == "embed_dim") cfg.embed_dim = std::stoi(value);
      else if (key == "hidden_dim") cfg.hidden_dim = std::stoi(value);
      else if (key == "preout_dim") cfg.preout_dim = std::stoi(value);
      else if (key == "penalty_sigma") cfg.penalty_sigma = static_cast<real>(std::stod(value));
      else if (key == "local_half_window") cfg.local_half_window = std::stoi(value);
      else if (key == "max_len") cfg.max_len = std::stoi(value);
      else throw ParseError("checkpoint: line " + std::to_string(line_no) +
                            ": unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ParseError("checkpoint: line " + std::to_string(line_no) + ": bad value for '" +
                       key + "'");
    }
  }
  if (!saw_values) throw IntegrityError("checkpoint: missing values section");
  cfg.validate();

  auto expected = shapes_of(cfg);
  if (headers.size() != expected.size())
    throw IntegrityError("checkpoint: " + std::to_string(headers.size()) +
                         " parameters, expected " + std::to_string(expected.size()));
  for (const Header& h : headers) {
    auto it = expected.find(h.name);
    if (it == expected.end())
      throw IntegrityError("checkpoint: unexpected parameter '" + h.name + "'");
    if (it->second != h.dims)
      throw IntegrityError("checkpoint: parameter '" + h.name + "' has shape " +
                           shape_str(h.dims) + ", config implies " + shape_str(it->second));
  }

  for (const Header& h : headers) {
    Tensor t = Tensor::zeros(h.dims);
    for (int64_t i = 0; i < h.count; ++i) {
      ++line_no;
      if (!std::getline(in, line))
        throw IntegrityError("checkpoint: truncated values for '" + h.name + "' at line " +
                             std::to_string(line_no));
      try {
        size_t pos = 0;
        t.v[static_cast<size_t>(i)] = static_cast<real>(std::stod(line, &pos));
        if (pos != line.size())
          throw ParseError("checkpoint: line " + std::to_string(line_no) +
                           ": trailing characters after value");
      } catch (const std::invalid_argument&) {
        throw ParseError("checkpoint: line " + std::to_string(line_no) + ": bad value");
      }
    }
    ck.params.tensors.emplace(h.name, std::move(t));
  }
  return ck;
}

// --- graph builders --------------------------------------------------------

namespace {

struct LstmCell {
  Var W, b;
  int hidden;
};

// One transition; gate layout along the 4h axis is [input, forget, cell, output].
void lstm_step(Tape& tape, const LstmCell& cell, Var x, Var& h, Var& c) {
  Var z = tape.add(tape.matmul(cell.W, tape.concat(x, h, 0)), cell.b);
  int hd = cell.hidden;
  Var gi = tape.sigmoid(tape.slice(z, 0, 0, hd));
  Var gf = tape.sigmoid(tape.slice(z, 0, hd, 2 * hd));
  Var gc = tape.tanh(tape.slice(z, 0, 2 * hd, 3 * hd));
  Var go = tape.sigmoid(tape.slice(z, 0, 3 * hd, 4 * hd));
  c = tape.add(tape.mul(gi, gc), tape.mul(gf, c));
  h = tape.mul(go, tape.tanh(c));
}

}  // namespace

Var embed_src(Tape& tape, ModelParams& params, std::span<const int> ids) {
  return tape.embed_rows(tape.leaf(params.at("src_embed")), ids);
}

Var embed_tgt_token(Tape& tape, ModelParams& params, int id) {
  Var row = tape.embed_rows(tape.leaf(params.at("tgt_embed")),
                            std::vector<int>{id});
  const Tensor& emb = params.at("tgt_embed");
  return tape.reshape(row, {emb.dims[1]});
}

EncoderStates encode(Tape& tape, ModelParams& params,
                     const ModelConfig& cfg, std::span<const int> tokens) {
  int S = static_cast<int>(tokens.size());
  if (S < 1) throw DomainError("encode: empty input");
  if (S > cfg.max_len)
    throw DomainError("encode: length " + std::to_string(S) + " exceeds max_len " +
                      std::to_string(cfg.max_len));
  for (int id : tokens)
    if (id < 0 || id >= cfg.src_vocab)
      throw DomainError("encode: token id " + std::to_string(id) + " outside [0," +
                        std::to_string(cfg.src_vocab) + ")");
  Var emb = embed_src(tape, params, tokens);  // [S, e]
  int e = cfg.embed_dim, h = cfg.hidden_dim;

  LstmCell fwd{tape.leaf(params.at("enc_fwd.W")),
               tape.leaf(params.at("enc_fwd.b")), h};
  LstmCell bwd{tape.leaf(params.at("enc_bwd.W")),
               tape.leaf(params.at("enc_bwd.b")), h};

  std::vector<Var> fwd_rows(static_cast<size_t>(S)), bwd_rows(static_cast<size_t>(S));
  Var hf = tape.zeros({h}), cf = tape.zeros({h});
  for (int s = 0; s < S; ++s) {
    Var x = tape.reshape(tape.slice(emb, 0, s, s + 1), {e});
    lstm_step(tape, fwd, x, hf, cf);
    fwd_rows[static_cast<size_t>(s)] = tape.reshape(hf, {1, h});
  }
  Var hb = tape.zeros({h}), cb = tape.zeros({h});
  for (int s = S - 1; s >= 0; --s) {
    Var x = tape.reshape(tape.slice(emb, 0, s, s + 1), {e});
    lstm_step(tape, bwd, x, hb, cb);
    bwd_rows[static_cast<size_t>(s)] = tape.reshape(hb, {1, h});
  }
  Var f = tape.concat(fwd_rows, 0);  // [S, h]
  Var b = tape.concat(bwd_rows, 0);  // [S, h]
  return {tape.concat(f, b, 1), S};
}

DecoderState decoder_init(Tape& tape, const ModelConfig& cfg) {
  return {tape.zeros({cfg.hidden_dim}), tape.zeros({cfg.hidden_dim})};
}

DecoderState decoder_step(Tape& tape, ModelParams& params,
                          const ModelConfig& cfg, const DecoderState& prev,
                          Var feedback_embed, Var context) {
  if (tape.dims_of(context) != std::vector<int>{cfg.enc_state_dim()})
    throw ShapeError("decoder_step: context must be " +
                     shape_str(std::vector<int>{cfg.enc_state_dim()}) + ", got " +
                     shape_str(tape.dims_of(context)));
  LstmCell cell{tape.leaf(params.at("dec.W")),
                tape.leaf(params.at("dec.b")), cfg.hidden_dim};
  Var h = prev.h, c = prev.c;
  lstm_step(tape, cell, tape.concat(feedback_embed, context, 0), h, c);
  return {h, c};
}

Var output_logits(Tape& tape, ModelParams& params, const ModelConfig& cfg,
                  const DecoderState& state) {
  Var pre = tape.tanh(
      tape.add(tape.matmul(tape.leaf(params.at("preout.W")), state.h),
               tape.leaf(params.at("preout.b"))));
  (void)cfg;
  return tape.add(tape.matmul(tape.leaf(params.at("out.W")), pre),
                  tape.leaf(params.at("out.b")));
}

}  // namespace flexattn
