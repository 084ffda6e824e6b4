// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "vecrag/config.hpp"
#include "vecrag/eval.hpp"
#include "vecrag/retrieval.hpp"
#include "vecrag/trainer.hpp"

// The operator surface behind the CLI subcommands. Everything is a plain
// function over RunConfig so tests can drive the exact same paths.

namespace vecrag {

namespace cmd_detail {

inline std::vector<QAExample> load_examples(const std::string& path, const char* which) {
  if (path.empty()) {
    throw ConfigError(std::string("config: data.") + which + " path is not set");
  }
  return read_qa_jsonl(path);
}

/// Attaches BM25-ranked contexts to records that lack them. Records that
/// already carry ranked contexts pass through untouched.
inline void attach_contexts(std::vector<QAExample>& examples, const Bm25Index& index,
                            int count) {
  for (QAExample& ex : examples) {
    if (!ex.contexts.empty()) continue;
    for (const Retrieved& r : index.retrieve(ex.question, static_cast<std::size_t>(count))) {
      ex.contexts.push_back(r.text);
    }
  }
}

inline void maybe_attach_contexts(std::vector<QAExample>& examples, const RunConfig& cfg) {
  if (cfg.data.corpus.empty()) return;
  bool missing = false;
  for (const QAExample& ex : examples) missing = missing || ex.contexts.empty();
  if (!missing) return;
  const Bm25Index index(read_corpus_jsonl(cfg.data.corpus));
  attach_contexts(examples, index, cfg.data.retrieve_count);
}

inline std::string resolve_checkpoint(const RunConfig& cfg, const std::string& flag) {
  namespace fs = std::filesystem;
  if (!flag.empty()) {
    return fs::is_directory(flag) ? flag + "/params.ckpt" : flag;
  }
  const std::string best_path = cfg.out_dir + "/best.json";
  std::ifstream in(best_path);
  if (!in) {
    throw std::runtime_error("no checkpoint given and no best pointer at " + best_path);
  }
  nlohmann::json j;
  in >> j;
  return cfg.out_dir + "/step-" + std::to_string(j.at("step").get<long>()) + "/params.ckpt";
}

}  // namespace cmd_detail

/// prepare-data: attach ranked contexts (BM25 over the corpus unless records
/// already carry them) and write the prepared splits plus a handful of
/// rendered prompts for inspection.
inline void run_prepare_data(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  std::vector<QAExample> train = cmd_detail::load_examples(cfg.data.train, "train");
  std::vector<QAExample> dev = cmd_detail::load_examples(cfg.data.dev, "dev");
  std::vector<QAExample> test = cmd_detail::load_examples(cfg.data.test, "test");
  if (!cfg.data.corpus.empty()) {
    const Bm25Index index(read_corpus_jsonl(cfg.data.corpus));
    cmd_detail::attach_contexts(train, index, cfg.data.retrieve_count);
    cmd_detail::attach_contexts(dev, index, cfg.data.retrieve_count);
    cmd_detail::attach_contexts(test, index, cfg.data.retrieve_count);
  }
  const std::string dir = cfg.out_dir + "/prepared";
  fs::create_directories(dir);
  write_qa_jsonl(dir + "/train.jsonl", train);
  write_qa_jsonl(dir + "/dev.jsonl", dev);
  write_qa_jsonl(dir + "/test.jsonl", test);

  const CharTokenizer tok;
  const PromptSet prompts;
  std::ofstream samples(dir + "/samples.txt");
  const std::size_t n_show = std::min<std::size_t>(3, train.size());
  for (std::size_t i = 0; i < n_show; ++i) {
    const FormattedSample s = build_sample(train[i], i, train, cfg.pipeline(), prompts, tok, true);
    samples << "=== sample " << s.id << " (" << s.setting << ") ===\n" << s.text << "\n";
    for (const std::string& ctx : s.k_add) samples << "[additional context] " << ctx << "\n";
  }
  std::cout << "prepared " << train.size() << " train / " << dev.size() << " dev / "
            << test.size() << " test records under " << dir << "\n";
}

/// train: build supervised samples for the chosen setting and run the
/// training loop with the configured freeze policy.
inline TrainResult run_train(const RunConfig& cfg, const std::string& resume_from = "",
                             long max_steps = 0) {
  std::vector<QAExample> train = cmd_detail::load_examples(cfg.data.train, "train");
  std::vector<QAExample> dev = cmd_detail::load_examples(cfg.data.dev, "dev");
  cmd_detail::maybe_attach_contexts(train, cfg);
  cmd_detail::maybe_attach_contexts(dev, cfg);

  const CharTokenizer tok;
  const PromptSet prompts;
  const std::vector<FormattedSample> train_set =
      build_dataset(train, cfg.pipeline(), prompts, tok, true);
  const std::vector<FormattedSample> dev_set =
      build_dataset(dev, cfg.pipeline(), prompts, tok, true);

  TrainerOptions opts;
  opts.model = cfg.model;
  opts.train = cfg.train;
  opts.freeze = cfg.freeze;
  opts.out_dir = cfg.out_dir;
  opts.resume_from = resume_from;
  opts.model_seed = cfg.train.seed;
  opts.with_adapters = cfg.add_count > 0;
  opts.max_steps = max_steps;
  const TrainResult result = run_training(opts, train_set, dev_set);
  std::cout << "trained " << result.steps_run << " steps; best step " << result.best_step
            << " (dev loss " << result.best_dev_loss << ") under " << cfg.out_dir << "\n";
  return result;
}

/// eval: greedy-decode the test split at the chosen setting and report EM.
inline EMResult run_eval(const RunConfig& cfg, const std::string& checkpoint_flag = "") {
  const Checkpoint ck = load_checkpoint(cmd_detail::resolve_checkpoint(cfg, checkpoint_flag));
  if (cfg.add_count > ck.config.max_ctx_vectors) {
    throw ConfigError("eval: add_count " + std::to_string(cfg.add_count) +
                      " exceeds the checkpoint's max_ctx_vectors " +
                      std::to_string(ck.config.max_ctx_vectors));
  }
  if (cfg.add_count > 0 && !ck.params.has_adapters()) {
    throw ConfigError("eval: checkpoint has no adapters but add_count > 0");
  }
  std::vector<QAExample> test = cmd_detail::load_examples(cfg.data.test, "test");
  if (test.empty()) throw std::runtime_error("eval: test set is empty");
  cmd_detail::maybe_attach_contexts(test, cfg);

  PipelineConfig pc = cfg.pipeline();
  pc.max_seq_len = static_cast<std::size_t>(ck.config.max_seq_len);
  pc.enc_max_len = static_cast<std::size_t>(ck.config.enc_max_len);
  const EMResult r = evaluate_dataset(test, ck.params, ck.config, pc, PromptSet{},
                                      CharTokenizer{}, cfg.max_new);

  std::filesystem::create_directories(cfg.out_dir);
  const std::string report_path =
      cfg.out_dir + "/eval-" + setting_to_string(cfg.setting) + ".jsonl";
  std::ofstream out(report_path, std::ios::app);
  out << nlohmann::json{{"setting", setting_to_string(cfg.setting)},
                        {"n_examples", r.n_examples},
                        {"n_exact", r.n_exact},
                        {"em", r.em}}
             .dump()
      << "\n";
  std::cout << "EM " << r.em << " (" << r.n_exact << "/" << r.n_examples << ") ["
            << setting_to_string(cfg.setting) << "] -> " << report_path << "\n";
  return r;
}

/// generate: format one question, route contexts through the budget, decode.
inline std::string run_generate(const RunConfig& cfg, const std::string& checkpoint_flag,
                                const std::string& question,
                                const std::vector<std::string>& contexts) {
  const Checkpoint ck = load_checkpoint(cmd_detail::resolve_checkpoint(cfg, checkpoint_flag));
  QAExample ex;
  ex.id = "query";
  ex.question = question;
  ex.contexts = contexts;
  if (ex.contexts.empty() && !cfg.data.corpus.empty()) {
    const Bm25Index index(read_corpus_jsonl(cfg.data.corpus));
    const auto hits = index.retrieve(ex.question, static_cast<std::size_t>(cfg.data.retrieve_count));
    for (const Retrieved& r : hits) ex.contexts.push_back(r.text);
  }
  PipelineConfig pc = cfg.pipeline();
  pc.max_seq_len = static_cast<std::size_t>(ck.config.max_seq_len);
  pc.enc_max_len = static_cast<std::size_t>(ck.config.enc_max_len);
  const FormattedSample s =
      build_sample(ex, 0, {}, pc, PromptSet{}, CharTokenizer{}, false);
  const std::vector<int> out = generate_greedy(s.tokens, s.k_add_tokens, ck.params, ck.config,
                                               cfg.max_new, CharTokenizer::kEos);
  std::string answer = CharTokenizer{}.decode(out);
  // strip the leading space the format places after "A:"
  if (!answer.empty() && answer.front() == ' ') answer.erase(answer.begin());
  return answer;
}

/// bench: train and generate timings for the baseline and the +add_count
/// variant at equal decoder input length.
inline std::vector<TimingReport> run_bench(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const CharTokenizer tok;

  const int prefix_len =
      std::min(cfg.model.max_seq_len - cfg.max_new - 1, cfg.model.max_seq_len / 2);
  if (prefix_len < 4) throw ConfigError("bench: max_seq_len leaves no room for the workload");
  FormattedSample base_sample;
  const std::string payload = "benchmark workload text ";
  for (int i = 0; i < prefix_len; ++i) {
    base_sample.tokens.push_back(
        tok.encode(std::string(1, payload[static_cast<std::size_t>(i) % payload.size()]))[0]);
  }
  base_sample.loss_mask.assign(base_sample.tokens.size(), true);
  base_sample.loss_mask[0] = false;

  FormattedSample ctx_sample = base_sample;
  for (int c = 0; c < cfg.add_count; ++c) {
    ctx_sample.k_add_tokens.push_back(tok.encode("synthetic context number " +
                                                 std::to_string(c)));
  }

  ModelConfig mcfg = cfg.model;
  mcfg.vocab_size = tok.vocab_size();
  TrainConfig tcfg = cfg.train;

  std::vector<TimingReport> reports;
  {
    ModelParams base = init_model(mcfg, cfg.train.seed, /*with_adapters=*/false);
    AdamW opt(base);
    reports.push_back(bench_train_step("baseline", base_sample, base, opt, mcfg, tcfg));
    reports.push_back(bench_generate("baseline", base_sample, base, mcfg, cfg.max_new));
  }
  {
    const std::string label = "+" + std::to_string(cfg.add_count) + "vec";
    ModelParams variant = init_model(mcfg, cfg.train.seed, /*with_adapters=*/true);
    AdamW opt(variant);
    reports.push_back(bench_train_step(label, ctx_sample, variant, opt, mcfg, tcfg));
    reports.push_back(bench_generate(label, ctx_sample, variant, mcfg, cfg.max_new));
  }

  std::ofstream jsonl(cfg.out_dir + "/bench.jsonl");
  std::ofstream csv(cfg.out_dir + "/bench.csv");
  csv << "variant,phase,mean_s,raw1,raw2,raw3,raw4,raw5\n";
  for (const TimingReport& r : reports) {
    nlohmann::json line = {{"variant", r.variant},
                           {"phase", r.phase},
                           {"mean_s", r.mean_s},
                           {"raw_s", r.raw_s}};
    jsonl << line.dump() << "\n";
    csv << r.variant << "," << r.phase << "," << r.mean_s;
    for (double v : r.raw_s) csv << "," << v;
    csv << "\n";
  }
  std::cout << "variant      phase     mean_s      ratio\n";
  for (const TimingReport& r : reports) {
    double baseline_mean = 0.0;
    for (const TimingReport& b : reports) {
      if (b.variant == "baseline" && b.phase == r.phase) baseline_mean = b.mean_s;
    }
    std::printf("%-12s %-9s %10.6f %10.3f\n", r.variant.c_str(), r.phase.c_str(), r.mean_s,
                baseline_mean > 0 ? r.mean_s / baseline_mean : 0.0);
  }
  return reports;
}

}  // namespace vecrag
