// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cctype>
#include <chrono>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vecrag/model.hpp"
#include "vecrag/pipeline.hpp"
#include "vecrag/training.hpp"

// Exact-match scoring with SQuAD-style normalization, greedy evaluation over
// a dataset, and wall-clock step timing (mean over five consecutive steps
// after discarded warmup).

namespace vecrag {

/// lowercase -> drop punctuation -> drop the articles a/an/the -> collapse
/// whitespace.
inline std::string normalize_answer(const std::string& s) {
  std::string lowered;
  lowered.reserve(s.size());
  for (unsigned char c : s) {
    if (std::isalnum(c) || std::isspace(c)) {
      lowered.push_back(static_cast<char>(std::tolower(c)));
    }
    // punctuation disappears entirely
  }
  std::istringstream words(lowered);
  std::string word, out;
  while (words >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

/// 1 iff the normalized prediction equals any normalized gold.
inline int exact_match(const std::string& prediction, const std::vector<std::string>& golds) {
  if (golds.empty()) throw std::invalid_argument("exact_match: no gold answers");
  const std::string pred = normalize_answer(prediction);
  for (const std::string& g : golds) {
    if (pred == normalize_answer(g)) return 1;
  }
  return 0;
}

struct EMResult {
  long n_examples = 0;
  long n_exact = 0;
  double em = 0.0;  // percentage
};

/// Core aggregation over an arbitrary predictor; the model-backed overload
/// below plugs greedy decoding into it.
inline EMResult evaluate_dataset(const std::vector<QAExample>& examples,
                                 const std::function<std::string(const QAExample&, std::size_t)>&
                                     predict) {
  if (examples.empty()) throw std::invalid_argument("evaluate_dataset: empty dataset");
  EMResult r;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    r.n_exact += exact_match(predict(examples[i], i), examples[i].answers);
    ++r.n_examples;
  }
  r.em = 100.0 * static_cast<double>(r.n_exact) / static_cast<double>(r.n_examples);
  return r;
}

/// Greedy generation per example under the chosen setting, EM aggregated.
inline EMResult evaluate_dataset(const std::vector<QAExample>& examples,
                                 const ModelParams& params, const ModelConfig& cfg,
                                 const PipelineConfig& pc, const PromptSet& prompts,
                                 const CharTokenizer& tok, int max_new) {
  return evaluate_dataset(examples, [&](const QAExample& ex, std::size_t i) {
    const FormattedSample s = build_sample(ex, i, examples, pc, prompts, tok, false);
    const std::vector<int> out =
        generate_greedy(s.tokens, s.k_add_tokens, params, cfg, max_new, CharTokenizer::kEos);
    return tok.decode(out);
  });
}

struct TimingReport {
  std::string variant;
  std::string phase;  // "train" | "generate"
  double mean_s = 0.0;
  std::array<double, 5> raw_s{};
};

namespace detail {

template <typename Fn>
TimingReport time_steps(const std::string& variant, const std::string& phase, int warmup,
                        Fn&& step_fn) {
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i) step_fn();
  TimingReport r;
  r.variant = variant;
  r.phase = phase;
  for (int i = 0; i < 5; ++i) {
    const auto t0 = clock::now();
    step_fn();
    const auto t1 = clock::now();
    r.raw_s[static_cast<std::size_t>(i)] = std::chrono::duration<double>(t1 - t0).count();
  }
  r.mean_s = std::accumulate(r.raw_s.begin(), r.raw_s.end(), 0.0) / 5.0;
  return r;
}

}  // namespace detail

/// Five consecutive optimizer steps on a single-sample batch.
inline TimingReport bench_train_step(const std::string& variant, const FormattedSample& sample,
                                     ModelParams& params, AdamW& opt, const ModelConfig& mcfg,
                                     const TrainConfig& tcfg, int warmup = 2) {
  FreezePolicy policy{FreezeStrategy::frozen_encoder, -1};
  long step = 0;
  return detail::time_steps(variant, "train", warmup, [&]() {
    train_step({sample}, params, opt, policy, step++, 1000000, tcfg, mcfg);
  });
}

/// Five consecutive full generation calls of fixed length.
inline TimingReport bench_generate(const std::string& variant, const FormattedSample& sample,
                                   const ModelParams& params, const ModelConfig& mcfg,
                                   int max_new, int warmup = 2) {
  return detail::time_steps(variant, "generate", warmup, [&]() {
    generate_greedy(sample.tokens, sample.k_add_tokens, params, mcfg, max_new, -1);
  });
}

}  // namespace vecrag
