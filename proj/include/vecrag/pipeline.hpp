// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "vecrag/data.hpp"
#include "vecrag/tokenizer.hpp"

// Turns QA examples into model-ready samples for each evaluation setting:
//   held-in        prompt carries as many ranked contexts as fit
//   icl-ctx        demonstrations with one context each, target context
//   icl-noctx      bare query-answer demonstrations
//   contexts-only  no contexts in the text at all; evidence flows through
//                  the encoder route only
// In every setting the next add_count ranks are routed to the encoder.

namespace vecrag {

enum class Setting { held_in, icl_ctx, icl_noctx, contexts_only };

inline Setting setting_from_string(const std::string& s) {
  if (s == "held-in") return Setting::held_in;
  if (s == "icl-ctx") return Setting::icl_ctx;
  if (s == "icl-noctx") return Setting::icl_noctx;
  if (s == "contexts-only") return Setting::contexts_only;
  throw std::invalid_argument("unknown setting '" + s +
                              "' (expected held-in|icl-ctx|icl-noctx|contexts-only)");
}

inline std::string setting_to_string(Setting s) {
  switch (s) {
    case Setting::held_in: return "held-in";
    case Setting::icl_ctx: return "icl-ctx";
    case Setting::icl_noctx: return "icl-noctx";
    case Setting::contexts_only: return "contexts-only";
  }
  return "?";
}

struct PipelineConfig {
  Setting setting = Setting::held_in;
  std::size_t add_count = 0;
  std::size_t max_seq_len = 256;
  std::size_t enc_max_len = 64;
  std::size_t icl_examples = 2;  // upper bound; the token budget may pack fewer
  bool mask_prompt = true;
};

namespace detail {

inline std::size_t sample_token_count(const std::string& prompt, const std::string& answer,
                                      const CharTokenizer& tok) {
  std::size_t n = tok.encode(prompt).size();
  if (!answer.empty()) n += tok.encode(" " + answer).size() + 1;
  return n;
}

/// Demonstrations come from the pool at cyclic offsets after `index`, packed
/// greedily while the full supervised sequence still fits the budget.
inline std::vector<IclSample> pack_icl(const QAExample& ex, std::size_t index,
                                       const std::vector<QAExample>& pool, bool with_context,
                                       const std::vector<std::string>& target_ctx,
                                       const PipelineConfig& pc, const PromptSet& p,
                                       const CharTokenizer& tok) {
  const std::string answer = ex.answers.empty() ? "" : ex.answers.front();
  std::vector<IclSample> demos;
  std::size_t scanned = 0;
  while (demos.size() < pc.icl_examples && scanned + 1 < pool.size() + 1) {
    ++scanned;
    if (scanned > pool.size()) break;
    const QAExample& cand = pool[(index + scanned) % pool.size()];
    if (cand.id == ex.id || cand.answers.empty()) continue;
    if (with_context && cand.contexts.empty()) continue;
    IclSample demo{cand.question, cand.answers.front(),
                   with_context ? cand.contexts.front() : ""};
    demos.push_back(demo);
    const std::string prompt =
        with_context ? format_icl_with_contexts(ex.question, target_ctx, demos, p)
                     : format_icl_without_contexts(ex.question, demos, p);
    if (sample_token_count(prompt, answer, tok) > pc.max_seq_len) {
      demos.pop_back();
      break;
    }
  }
  return demos;
}

}  // namespace detail

/// Builds one sample. `supervised` appends the first gold answer and sets the
/// loss mask; otherwise the sample is a bare generation prompt.
inline FormattedSample build_sample(const QAExample& ex, std::size_t index,
                                    const std::vector<QAExample>& pool, const PipelineConfig& pc,
                                    const PromptSet& p, const CharTokenizer& tok,
                                    bool supervised) {
  if (supervised && ex.answers.empty()) {
    throw std::invalid_argument("build_sample: example '" + ex.id + "' has no gold answer");
  }
  const std::string answer = supervised ? ex.answers.front() : "";
  std::string prompt;
  std::vector<std::string> k_add;

  switch (pc.setting) {
    case Setting::held_in:
    case Setting::contexts_only: {
      const ContextBudget b =
          select_context_budget(ex, pc.add_count, tok, p, pc.max_seq_len,
                                pc.setting == Setting::contexts_only);
      prompt = format_held_in(ex.question, b.k_max, p);
      k_add = b.k_add;
      break;
    }
    case Setting::icl_ctx: {
      // Table-format target: its single best context in the text, the next
      // ranks through the encoder.
      const std::size_t m = ex.contexts.empty() ? 0 : 1;
      std::vector<std::string> target_ctx(ex.contexts.begin(), ex.contexts.begin() + m);
      const std::vector<IclSample> demos =
          detail::pack_icl(ex, index, pool, true, target_ctx, pc, p, tok);
      prompt = format_icl_with_contexts(ex.question, target_ctx, demos, p);
      const std::size_t add_end = std::min(ex.contexts.size(), m + pc.add_count);
      k_add.assign(ex.contexts.begin() + m, ex.contexts.begin() + add_end);
      break;
    }
    case Setting::icl_noctx: {
      const std::vector<IclSample> demos =
          detail::pack_icl(ex, index, pool, false, {}, pc, p, tok);
      prompt = format_icl_without_contexts(ex.question, demos, p);
      const std::size_t add_end = std::min(ex.contexts.size(), pc.add_count);
      k_add.assign(ex.contexts.begin(), ex.contexts.begin() + add_end);
      break;
    }
  }

  if (detail::sample_token_count(prompt, answer, tok) > pc.max_seq_len) {
    throw std::invalid_argument("build_sample: example '" + ex.id + "' does not fit " +
                                std::to_string(pc.max_seq_len) + " tokens even without contexts");
  }
  FormattedSample s = make_sample(prompt, answer, k_add, tok, pc.enc_max_len, pc.mask_prompt);
  s.id = ex.id;
  s.setting = setting_to_string(pc.setting);
  return s;
}

inline std::vector<FormattedSample> build_dataset(const std::vector<QAExample>& examples,
                                                  const PipelineConfig& pc, const PromptSet& p,
                                                  const CharTokenizer& tok, bool supervised) {
  std::vector<FormattedSample> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    out.push_back(build_sample(examples[i], i, examples, pc, p, tok, supervised));
  }
  return out;
}

}  // namespace vecrag
