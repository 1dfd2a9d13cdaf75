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

#include "flexattn/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "flexattn/decoding.hpp"
#include "flexattn/evaluation.hpp"
#include "flexattn/training.hpp"

namespace flexattn {

namespace {

using nlohmann::json;

json tau_json(real tau) {
  if (std::isinf(tau)) return json("inf");
  return json(static_cast<double>(tau));
}

real parse_tau(const std::string& s) {
  if (s == "inf" || s == "infinity") return kInf;
  return static_cast<real>(std::stod(s));
}

/// Every setting a command can consume; flags beat config-file values,
/// which beat these defaults.
struct RunConfig {
  // task
  std::string task = "block_swap";
  int vocab_size = 200;
  int min_chunks = 3, max_chunks = 6;
  int min_chunk_len = 2, max_chunk_len = 4;
  double swap_prob = 0.3;
  bool long_mode = false;
  int train_size = 10000, dev_size = 500, test_size = 500;
  // model
  std::string attention = "flexible";
  int embed_dim = 32, hidden_dim = 64, preout_dim = 48;
  double sigma = 1.5;
  int local_window = 3;
  int max_len = 200;
  // training
  int batch_size = 16;
  double lr = 1e-4;
  int epochs = 30;
  int halve_from = 20;
  double clip_norm = 3.0;
  double beta = 0.1;
  int finetune_epochs = 1;
  int val_beam = 1;
  // decode / eval
  int beam = 5;
  std::string tau = "inf";
  int max_out = -1;
  double max_bleu_loss = 0.5;  // development BLEU points
  std::string taus;            // comma list; empty -> default sweep list
  // io
  std::string data, out, checkpoint, resume, split = "test", text, file, svg;
  uint64_t seed = 1;

  TaskSpec task_spec() const {
    TaskSpec ts;
    ts.kind = task_from_name(task);
    ts.vocab_size = vocab_size;
    ts.min_chunks = min_chunks;
    ts.max_chunks = max_chunks;
    ts.min_chunk_len = min_chunk_len;
    ts.max_chunk_len = max_chunk_len;
    ts.swap_prob = swap_prob;
    ts.long_mode = long_mode;
    ts.seed = seed;
    ts.corpus_size = train_size + dev_size + test_size;
    return ts;
  }

  ModelConfig model_config(int src_vocab_total, int tgt_vocab_total) const {
    ModelConfig mc;
    mc.src_vocab = src_vocab_total;
    mc.tgt_vocab = tgt_vocab_total;
    mc.embed_dim = embed_dim;
    mc.hidden_dim = hidden_dim;
    mc.preout_dim = preout_dim;
    mc.attention = attention_from_name(attention);
    mc.penalty_sigma = static_cast<real>(sigma);
    mc.local_half_window = local_window;
    mc.max_len = max_len;
    return mc;
  }

  TrainConfig train_config() const {
    TrainConfig tc;
    tc.batch_size = batch_size;
    tc.lr = static_cast<real>(lr);
    tc.epochs = epochs;
    tc.halve_from_epoch = halve_from;
    tc.clip_norm = static_cast<real>(clip_norm);
    tc.beta = static_cast<real>(beta);
    tc.seed = seed;
    tc.val_beam = val_beam;
    tc.finetune_epochs = finetune_epochs;
    return tc;
  }

  json to_json() const {
    return json{{"task", task},
                {"vocab_size", vocab_size},
                {"min_chunks", min_chunks},
                {"max_chunks", max_chunks},
                {"min_chunk_len", min_chunk_len},
                {"max_chunk_len", max_chunk_len},
                {"swap_prob", swap_prob},
                {"long_mode", long_mode},
                {"train_size", train_size},
                {"dev_size", dev_size},
                {"test_size", test_size},
                {"attention", attention},
                {"embed_dim", embed_dim},
                {"hidden_dim", hidden_dim},
                {"preout_dim", preout_dim},
                {"sigma", sigma},
                {"local_window", local_window},
                {"max_len", max_len},
                {"batch_size", batch_size},
                {"lr", lr},
                {"epochs", epochs},
                {"halve_from", halve_from},
                {"clip_norm", clip_norm},
                {"beta", beta},
                {"finetune_epochs", finetune_epochs},
                {"val_beam", val_beam},
                {"beam", beam},
                {"tau", tau},
                {"max_out", max_out},
                {"max_bleu_loss", max_bleu_loss},
                {"seed", seed},
                {"data", data},
                {"out", out},
                {"checkpoint", checkpoint},
                {"split", split}};
  }
};

void echo_config(const RunConfig& rc, const std::string& command, std::ostream& os) {
  json j = rc.to_json();
  j["event"] = "config";
  j["command"] = command;
  os << j.dump() << '\n';
}

struct Paths {
  std::string prefix;
  std::string corpus(const std::string& split) const { return prefix + "." + split + ".tsv"; }
  std::string src_vocab() const { return prefix + ".src.vocab"; }
  std::string tgt_vocab() const { return prefix + ".tgt.vocab"; }
  std::string meta() const { return prefix + ".meta.json"; }
};

struct LoadedData {
  Vocab src_vocab, tgt_vocab;
  Corpus corpus;
};

LoadedData load_split(const RunConfig& rc, const std::string& split) {
  if (rc.data.empty()) throw ConfigError("missing --data prefix");
  Paths paths{rc.data};
  LoadedData d;
  d.src_vocab = Vocab::load(paths.src_vocab());
  d.tgt_vocab = Vocab::load(paths.tgt_vocab());
  LoadedCorpus lc = load_corpus(paths.corpus(split), d.src_vocab, d.tgt_vocab);
  if (lc.unk_count > 0)
    std::cerr << "warning: " << lc.unk_count << " unknown tokens mapped to <unk>\n";
  d.corpus = std::move(lc.pairs);
  return d;
}

json stats_record(const std::string& split, const Corpus& corpus) {
  double mean_tgt = 0;
  for (const CorpusPair& p : corpus) mean_tgt += static_cast<double>(p.tgt.size()) - 1;
  if (!corpus.empty()) mean_tgt /= static_cast<double>(corpus.size());
  return json{{"event", "stats"},
              {"split", split},
              {"pairs", corpus.size()},
              {"mean_source_length", mean_source_length(corpus)},
              {"mean_target_length", mean_tgt}};
}

int cmd_gen(const RunConfig& rc) {
  if (rc.out.empty()) throw ConfigError("gen: missing --out prefix");
  TaskSpec spec = rc.task_spec();
  GeneratedCorpus g = generate(spec);
  Paths paths{rc.out};
  size_t n_train = static_cast<size_t>(rc.train_size);
  size_t n_dev = static_cast<size_t>(rc.dev_size);
  Corpus train(g.pairs.begin(), g.pairs.begin() + static_cast<long>(n_train));
  Corpus dev(g.pairs.begin() + static_cast<long>(n_train),
             g.pairs.begin() + static_cast<long>(n_train + n_dev));
  Corpus test(g.pairs.begin() + static_cast<long>(n_train + n_dev), g.pairs.end());
  g.src_vocab.save(paths.src_vocab());
  g.tgt_vocab.save(paths.tgt_vocab());
  save_corpus(train, g.src_vocab, g.tgt_vocab, paths.corpus("train"));
  save_corpus(dev, g.src_vocab, g.tgt_vocab, paths.corpus("dev"));
  save_corpus(test, g.src_vocab, g.tgt_vocab, paths.corpus("test"));
  echo_config(rc, "gen", std::cout);
  json meta = rc.to_json();
  meta["splits"] = json::array();
  for (const auto& [name, corpus] : {std::pair<std::string, const Corpus*>{"train", &train},
                                     {"dev", &dev},
                                     {"test", &test}}) {
    json s = stats_record(name, *corpus);
    std::cout << s.dump() << '\n';
    meta["splits"].push_back(s);
  }
  std::ofstream mf(paths.meta());
  mf << meta.dump(2) << '\n';
  return 0;
}

json epoch_json(const EpochLog& log) {
  return json{{"event", "epoch"},          {"epoch", log.epoch},
              {"lr", log.lr},              {"train_loss", log.train_loss},
              {"dev_bleu", log.dev_bleu},  {"dev_seq_acc", log.dev_seq_acc},
              {"dev_mean_g", log.dev_mean_g}};
}

int cmd_train(const RunConfig& rc) {
  if (rc.out.empty()) throw ConfigError("train: missing --out prefix");
  LoadedData train_data = load_split(rc, "train");
  LoadedData dev_data = load_split(rc, "dev");
  ModelConfig mc = rc.model_config(train_data.src_vocab.size(), train_data.tgt_vocab.size());
  TrainConfig tc = rc.train_config();
  echo_config(rc, "train", std::cout);
  std::ofstream log_file(rc.out + ".log.jsonl");
  echo_config(rc, "train", log_file);
  TrainState resume_state;
  const TrainState* resume = nullptr;
  if (!rc.resume.empty()) {
    ModelConfig saved_cfg;
    resume_state = load_train_state(rc.resume, &saved_cfg);
    mc = saved_cfg;  // a resumed run keeps its original architecture
    resume = &resume_state;
  }
  auto on_epoch = [&](const EpochLog& log) {
    json j = epoch_json(log);
    std::cout << j.dump() << '\n' << std::flush;
    log_file << j.dump() << '\n';
  };
  TrainResult result = train(train_data.corpus, dev_data.corpus, mc, tc, on_epoch, resume);
  save_checkpoint(result.best, mc, rc.out + ".ckpt");
  save_train_state(result.state, mc, rc.out + ".state");
  json done{{"event", "done"},
            {"best_epoch", result.best_epoch},
            {"checkpoint", rc.out + ".ckpt"},
            {"train_state", rc.out + ".state"}};
  std::cout << done.dump() << '\n';
  log_file << done.dump() << '\n';
  return 0;
}

int cmd_finetune(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("finetune: missing --checkpoint");
  if (rc.out.empty()) throw ConfigError("finetune: missing --out prefix");
  Checkpoint ck = load_checkpoint(rc.checkpoint);
  if (ck.config.attention != AttentionKind::kFlexible)
    throw UnsupportedModeError("finetune: checkpoint is not a flexible model");
  LoadedData train_data = load_split(rc, "train");
  LoadedData dev_data = load_split(rc, "dev");
  TrainConfig tc = rc.train_config();
  echo_config(rc, "finetune", std::cout);
  auto on_epoch = [&](const EpochLog& log) {
    std::cout << epoch_json(log).dump() << '\n' << std::flush;
  };
  FinetuneResult result = finetune(ck.params, train_data.corpus, dev_data.corpus,
                                   ck.config, tc, static_cast<real>(rc.lr), on_epoch);
  save_checkpoint(result.params, ck.config, rc.out + ".ckpt");
  json done{{"event", "done"},
            {"beta", tc.beta},
            {"mean_g_before", result.mean_g_before},
            {"mean_g_after", result.mean_g_after},
            {"checkpoint", rc.out + ".ckpt"}};
  std::cout << done.dump() << '\n';
  return 0;
}

json report_json(const EvalReport& r) {
  return json{{"event", "report"},
              {"tau", tau_json(r.tau)},
              {"bleu", r.bleu},
              {"seq_accuracy", r.seq_accuracy},
              {"avg_window", r.avg_window},
              {"score_evals", r.score_evals},
              {"mean_g", r.mean_g}};
}

int cmd_sweep(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("sweep: missing --checkpoint");
  Checkpoint ck = load_checkpoint(rc.checkpoint);
  LoadedData dev_data = load_split(rc, "dev");
  std::vector<real> taus;
  if (rc.taus.empty()) {
    taus = default_tau_list();
  } else {
    std::istringstream is(rc.taus);
    std::string item;
    while (std::getline(is, item, ',')) taus.push_back(parse_tau(item));
  }
  echo_config(rc, "sweep", std::cout);
  int beam = rc.beam;
  SweepResult sweep = sweep_thresholds(ck.params, ck.config, dev_data.corpus, taus, beam);
  for (const EvalReport& r : sweep.rows) std::cout << report_json(r).dump() << '\n';
  bool ok = false;
  real selected = select_threshold(
      sweep, static_cast<real>(rc.max_bleu_loss) / 100, &ok);
  const EvalReport& ref = sweep.reference();
  real window_at_selected = ref.avg_window;
  for (const EvalReport& r : sweep.rows)
    if (r.tau == selected) window_at_selected = r.avg_window;
  real reduction = ref.avg_window > 0 ? 1 - window_at_selected / ref.avg_window : 0;
  if (!ok)
    std::cerr << "warning: no finite threshold keeps BLEU within " << rc.max_bleu_loss
              << " points; falling back to infinity\n";
  json sel{{"event", "selected"},
           {"tau", tau_json(selected)},
           {"avg_window", window_at_selected},
           {"reference_window", ref.avg_window},
           {"window_reduction", reduction}};
  std::cout << sel.dump() << '\n';
  std::cout << format_sweep_table(sweep);
  if (!rc.out.empty()) {
    std::ofstream out(rc.out + ".sweep.jsonl");
    echo_config(rc, "sweep", out);
    for (const EvalReport& r : sweep.rows) out << report_json(r).dump() << '\n';
    out << sel.dump() << '\n';
  }
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("eval: missing --checkpoint");
  Checkpoint ck = load_checkpoint(rc.checkpoint);
  LoadedData data = load_split(rc, rc.split);
  echo_config(rc, "eval", std::cout);
  EvalReport r = evaluate(ck.params, ck.config, data.corpus, rc.beam, parse_tau(rc.tau));
  std::cout << report_json(r).dump() << '\n';
  return 0;
}

int cmd_visualize(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("visualize: missing --checkpoint");
  Checkpoint ck = load_checkpoint(rc.checkpoint);
  echo_config(rc, "visualize", std::cerr);
  real tau = parse_tau(rc.tau);

  struct Item {
    std::vector<int> src;
    std::vector<int> tgt;  // empty: free decoding
  };
  std::vector<Item> items;
  Vocab src_vocab, tgt_vocab;
  if (!rc.data.empty()) {
    Paths paths{rc.data};
    src_vocab = Vocab::load(paths.src_vocab());
    tgt_vocab = Vocab::load(paths.tgt_vocab());
  } else {
    throw ConfigError("visualize: missing --data prefix (for the vocabulary)");
  }
  if (!rc.text.empty()) {
    Item item;
    std::istringstream is(rc.text);
    std::string tok;
    while (is >> tok) item.src.push_back(src_vocab.id_of(tok));
    if (item.src.empty()) throw ConfigError("visualize: --text held no tokens");
    items.push_back(item);
  } else if (!rc.file.empty()) {
    LoadedCorpus lc = load_corpus(rc.file, src_vocab, tgt_vocab);
    for (const CorpusPair& p : lc.pairs) items.push_back({p.src, p.tgt});
  } else {
    throw ConfigError("visualize: need --text or --file");
  }

  std::string svg_all;
  for (size_t i = 0; i < items.size(); ++i) {
    const Item& item = items[i];
    DecodeTrace trace =
        item.tgt.empty()
            ? beam_search(ck.params, ck.config, item.src, 1, tau, rc.max_out)
            : forced_decode(ck.params, ck.config, item.src, item.tgt, tau);
    if (i) std::cout << '\n';
    std::cout << render_spans(trace, static_cast<int>(item.src.size()), &tgt_vocab);
    if (!rc.svg.empty())
      svg_all += render_spans_svg(trace, static_cast<int>(item.src.size()), &tgt_vocab);
  }
  if (!rc.svg.empty()) {
    std::ofstream out(rc.svg);
    out << svg_all;
  }
  return 0;
}

int cmd_bench(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("bench: missing --checkpoint");
  Checkpoint ck = load_checkpoint(rc.checkpoint);
  LoadedData data = load_split(rc, rc.split);
  echo_config(rc, "bench", std::cout);
  real tau = parse_tau(rc.tau);

  auto run = [&](real t) {
    Meter meter;
    double seconds = 0;
    int64_t steps = 0;
    for (const CorpusPair& p : data.corpus) {
      DecodeTrace trace = forced_decode(ck.params, ck.config, p.src, p.tgt, t, &meter);
      seconds += trace.seconds;
      steps += trace.hyp_steps;
    }
    return std::tuple<uint64_t, double, int64_t>{meter.score_evals, seconds, steps};
  };
  auto [evals_full, sec_full, steps_full] = run(kInf);
  auto [evals_tau, sec_tau, steps_tau] = run(tau);
  if (steps_full != steps_tau)
    throw DomainError("bench: forced decoding step counts diverged");
  double n = static_cast<double>(data.corpus.size());
  json j{{"event", "bench"},
         {"sentences", data.corpus.size()},
         {"steps", steps_full},
         {"tau", tau_json(tau)},
         {"mean_ms_full", 1000 * sec_full / n},
         {"mean_ms_tau", 1000 * sec_tau / n},
         {"score_evals_full", evals_full},
         {"score_evals_tau", evals_tau},
         {"score_evals_reduction",
          evals_full > 0
              ? 1 - static_cast<double>(evals_tau) / static_cast<double>(evals_full)
              : 0}};
  std::cout << j.dump() << '\n';
  return 0;
}

void add_task_options(CLI::App* cmd, RunConfig& rc) {
  cmd->add_option("--task", rc.task, "copy|reverse|block_swap");
  cmd->add_option("--vocab-size", rc.vocab_size);
  cmd->add_option("--min-chunks", rc.min_chunks);
  cmd->add_option("--max-chunks", rc.max_chunks);
  cmd->add_option("--min-chunk-len", rc.min_chunk_len);
  cmd->add_option("--max-chunk-len", rc.max_chunk_len);
  cmd->add_option("--swap-prob", rc.swap_prob);
  cmd->add_flag("--long-mode", rc.long_mode, "multiply chunk lengths by 6");
  cmd->add_option("--train-size", rc.train_size);
  cmd->add_option("--dev-size", rc.dev_size);
  cmd->add_option("--test-size", rc.test_size);
}

void add_model_options(CLI::App* cmd, RunConfig& rc) {
  cmd->add_option("--attention", rc.attention, "global|local|flexible");
  cmd->add_option("--embed-dim", rc.embed_dim);
  cmd->add_option("--hidden-dim", rc.hidden_dim);
  cmd->add_option("--preout-dim", rc.preout_dim);
  cmd->add_option("--sigma", rc.sigma, "penalty width");
  cmd->add_option("--local-window", rc.local_window, "half window D");
  cmd->add_option("--max-len", rc.max_len);
}

void add_train_options(CLI::App* cmd, RunConfig& rc) {
  cmd->add_option("--batch-size", rc.batch_size);
  cmd->add_option("--lr", rc.lr);
  cmd->add_option("--epochs", rc.epochs);
  cmd->add_option("--halve-from", rc.halve_from);
  cmd->add_option("--clip-norm", rc.clip_norm);
  cmd->add_option("--beta", rc.beta, "strength regularizer coefficient");
  cmd->add_option("--finetune-epochs", rc.finetune_epochs);
  cmd->add_option("--val-beam", rc.val_beam);
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  RunConfig rc;
  CLI::App app{"sequence-to-sequence attention lab"};
  app.require_subcommand(1);
  app.set_config("--config")->configurable(false);
  app.allow_config_extras(CLI::config_extras_mode::error);

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic parallel corpus");
  add_task_options(gen, rc);
  gen->add_option("--seed", rc.seed);
  gen->add_option("--out", rc.out, "output path prefix");

  CLI::App* train_cmd = app.add_subcommand("train", "train a model");
  add_model_options(train_cmd, rc);
  add_train_options(train_cmd, rc);
  train_cmd->add_option("--data", rc.data, "corpus path prefix");
  train_cmd->add_option("--out", rc.out);
  train_cmd->add_option("--seed", rc.seed);
  train_cmd->add_option("--resume", rc.resume, "train-state file to resume");

  CLI::App* ft = app.add_subcommand("finetune", "strength-regularized tuning");
  add_train_options(ft, rc);
  ft->add_option("--checkpoint", rc.checkpoint);
  ft->add_option("--data", rc.data);
  ft->add_option("--out", rc.out);
  ft->add_option("--seed", rc.seed);

  CLI::App* sweep = app.add_subcommand("sweep", "threshold sweep on the dev split");
  sweep->add_option("--checkpoint", rc.checkpoint);
  sweep->add_option("--data", rc.data);
  sweep->add_option("--taus", rc.taus, "comma-separated thresholds");
  sweep->add_option("--beam", rc.beam)->default_val(1);
  sweep->add_option("--max-bleu-loss", rc.max_bleu_loss, "tolerated BLEU points");
  sweep->add_option("--out", rc.out);

  CLI::App* eval = app.add_subcommand("eval", "decode and score a split");
  eval->add_option("--checkpoint", rc.checkpoint);
  eval->add_option("--data", rc.data);
  eval->add_option("--split", rc.split, "train|dev|test");
  eval->add_option("--tau", rc.tau);
  eval->add_option("--beam", rc.beam);
  eval->add_option("--max-out", rc.max_out);

  CLI::App* vis = app.add_subcommand("visualize", "render vision-span grids");
  vis->add_option("--checkpoint", rc.checkpoint);
  vis->add_option("--data", rc.data, "corpus prefix (for vocabularies)");
  vis->add_option("--text", rc.text, "space-separated source tokens");
  vis->add_option("--file", rc.file, "corpus file; lines with a target are forced");
  vis->add_option("--tau", rc.tau);
  vis->add_option("--svg", rc.svg, "also write an SVG");
  vis->add_option("--max-out", rc.max_out);

  CLI::App* bench = app.add_subcommand("bench", "forced-decoding timing comparison");
  bench->add_option("--checkpoint", rc.checkpoint);
  bench->add_option("--data", rc.data);
  bench->add_option("--split", rc.split);
  bench->add_option("--tau", rc.tau, "threshold to compare against infinity");

  std::vector<std::string> argv = args;
  std::reverse(argv.begin(), argv.end());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0) {
      std::cerr << "error: " << e.what() << '\n';
      return e.get_exit_code();
    }
    return app.exit(e);  // --help and friends
  }

  try {
    if (gen->parsed()) return cmd_gen(rc);
    if (train_cmd->parsed()) return cmd_train(rc);
    if (ft->parsed()) return cmd_finetune(rc);
    if (sweep->parsed()) return cmd_sweep(rc);
    if (eval->parsed()) return cmd_eval(rc);
    if (vis->parsed()) return cmd_visualize(rc);
    if (bench->parsed()) return cmd_bench(rc);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  std::cerr << "error: no command\n";
  return 1;
}

}  // namespace flexattn
