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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "flexattn/data.hpp"
#include "flexattn/model.hpp"

using namespace flexattn;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.src_vocab = 8;
  cfg.tgt_vocab = 8;
  cfg.embed_dim = 3;
  cfg.hidden_dim = 4;
  cfg.preout_dim = 3;
  cfg.max_len = 16;
  return cfg;
}

void zero_params(ModelParams& p) {
  for (auto& [name, t] : p.tensors) std::fill(t.v.begin(), t.v.end(), real(0));
}

}  // namespace

TEST_CASE("encode shape contract") {
  ModelConfig cfg;
  cfg.src_vocab = 10;
  cfg.tgt_vocab = 10;
  cfg.hidden_dim = 64;
  ModelParams params = ModelParams::init(cfg, 1);
  Tape tape;
  tape.grad_enabled = false;
  std::vector<int> tokens = {4, 5, 6, 7, 8};
  EncoderStates enc = encode(tape, params, cfg, tokens);
  CHECK(enc.length == 5);
  CHECK(tape.dims_of(enc.states) == std::vector<int>{5, 128});
}

TEST_CASE("encode rejects bad inputs") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 1);
  Tape tape;
  CHECK_THROWS_AS(encode(tape, params, cfg, std::vector<int>{}), DomainError);
  CHECK_THROWS_AS(encode(tape, params, cfg, std::vector<int>{8}), DomainError);
  std::vector<int> too_long(cfg.max_len + 1, 4);
  CHECK_THROWS_AS(encode(tape, params, cfg, too_long), DomainError);
}

TEST_CASE("all-zero parameters give all-zero encoder states") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 1);
  zero_params(params);
  Tape tape;
  tape.grad_enabled = false;
  EncoderStates enc = encode(tape, params, cfg, std::vector<int>{4, 5, 6});
  for (real x : tape.val(enc.states)) CHECK(x == 0);
}

TEST_CASE("encoding is deterministic") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 3);
  std::vector<int> tokens = {4, 6, 5, 7};
  Tape t1, t2;
  t1.grad_enabled = t2.grad_enabled = false;
  EncoderStates a = encode(t1, params, cfg, tokens);
  EncoderStates b = encode(t2, params, cfg, tokens);
  auto va = t1.val(a.states);
  auto vb = t2.val(b.states);
  REQUIRE(va.size() == vb.size());
  for (size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);
}

TEST_CASE("encode gradient passes finite differences") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 5);
  std::vector<int> tokens = {4, 5, 6};
  std::vector<Tensor*> leaves = {&params.at("src_embed"), &params.at("enc_fwd.W"),
                                 &params.at("enc_bwd.W"), &params.at("enc_fwd.b")};
  real err = grad_check(
      [&](Tape& t) { return t.sum(encode(t, params, cfg, tokens).states); }, leaves);
  CHECK(err < 1e-4);
}

TEST_CASE("decoder_step zero params give zero state and fixed shape") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 1);
  zero_params(params);
  Tape tape;
  tape.grad_enabled = false;
  DecoderState st = decoder_init(tape, cfg);
  Var emb = embed_tgt_token(tape, params, Vocab::kBos);
  Var ctx = tape.zeros({cfg.enc_state_dim()});
  DecoderState next = decoder_step(tape, params, cfg, st, emb, ctx);
  CHECK(tape.dims_of(next.h) == std::vector<int>{cfg.hidden_dim});
  for (real x : tape.val(next.h)) CHECK(x == 0);

  Var bad_ctx = tape.zeros({cfg.enc_state_dim() + 1});
  CHECK_THROWS_AS(decoder_step(tape, params, cfg, st, emb, bad_ctx), ShapeError);
}

TEST_CASE("two chained decoder steps pass a gradient check") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 7);
  std::vector<Tensor*> leaves = {&params.at("dec.W"), &params.at("dec.b"),
                                 &params.at("tgt_embed"), &params.at("preout.W")};
  real err = grad_check(
      [&](Tape& t) {
        DecoderState st = decoder_init(t, cfg);
        Var ctx = t.constant({cfg.enc_state_dim()},
                             std::vector<real>(static_cast<size_t>(cfg.enc_state_dim()), 0.1));
        st = decoder_step(t, params, cfg, st, embed_tgt_token(t, params, Vocab::kBos), ctx);
        st = decoder_step(t, params, cfg, st, embed_tgt_token(t, params, 4), ctx);
        return t.cross_entropy_logits(output_logits(t, params, cfg, st), 5);
      },
      leaves);
  CHECK(err < 1e-4);
}

TEST_CASE("output_logits: zero params give a uniform distribution") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 1);
  zero_params(params);
  Tape tape;
  tape.grad_enabled = false;
  DecoderState st = decoder_init(tape, cfg);
  Var logits = output_logits(tape, params, cfg, st);
  CHECK(tape.dims_of(logits) == std::vector<int>{cfg.tgt_vocab});
  for (real x : tape.val(logits)) CHECK(x == 0);
  Var p = tape.softmax(logits);
  for (real x : tape.val(p))
    CHECK(x == doctest::Approx(1.0 / cfg.tgt_vocab).epsilon(1e-12));
}

TEST_CASE("checkpoint lists every parameter exactly once and round-trips") {
  ModelConfig cfg = tiny_config();
  cfg.attention = AttentionKind::kFlexible;
  ModelParams params = ModelParams::init(cfg, 11);
  std::string path = "/tmp/flexattn_model_ckpt.txt";
  save_checkpoint(params, cfg, path);

  // Expected names, each exactly once.
  std::ifstream in(path);
  std::string line;
  std::vector<std::string> seen;
  while (std::getline(in, line))
    if (line.rfind("param ", 0) == 0) {
      std::istringstream is(line);
      std::string tag, name;
      is >> tag >> name;
      seen.push_back(name);
    }
  std::vector<std::string> expected = ModelParams::names(cfg);
  CHECK(seen == expected);

  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.config.attention == AttentionKind::kFlexible);
  CHECK(ck.config.hidden_dim == cfg.hidden_dim);
  for (const auto& [name, t] : params.tensors) {
    const Tensor& u = ck.params.at(name);
    REQUIRE(u.dims == t.dims);
    for (size_t i = 0; i < t.v.size(); ++i) CHECK(u.v[i] == t.v[i]);
  }
  std::remove(path.c_str());
}

TEST_CASE("truncated checkpoint is an integrity error") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 13);
  std::string path = "/tmp/flexattn_model_trunc.txt";
  save_checkpoint(params, cfg, path);
  std::string all;
  {
    std::ifstream in(path);
    std::ostringstream os;
    os << in.rdbuf();
    all = os.str();
  }
  {
    std::ofstream out(path);
    out << all.substr(0, all.size() * 2 / 3);
  }
  CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
  std::remove(path.c_str());
}

TEST_CASE("malformed checkpoint line reports position") {
  std::string path = "/tmp/flexattn_model_bad.txt";
  {
    std::ofstream out(path);
    out << "attention=global\nthis line is wrong\n";
  }
  try {
    load_checkpoint(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("forget-gate bias initialized to one, other biases zero") {
  ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 17);
  const Tensor& b = params.at("dec.b");
  int h = cfg.hidden_dim;
  for (int i = 0; i < 4 * h; ++i) {
    if (i >= h && i < 2 * h)
      CHECK(b.v[static_cast<size_t>(i)] == 1);
    else
      CHECK(b.v[static_cast<size_t>(i)] == 0);
  }
  for (real x : params.at("out.b").v) CHECK(x == 0);
  for (real x : params.at("att.W_a").v) {
    CHECK(x >= -0.08);
    CHECK(x <= 0.08);
  }
}
