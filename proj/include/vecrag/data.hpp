// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vecrag/tokenizer.hpp"

// QA records, the prompt templates, context budgeting between the text input
// (k_max) and the encoder route (k_add), and supervised sample assembly.

namespace vecrag {

struct QAExample {
  std::string id;
  std::string question;
  std::vector<std::string> answers;   // any is an acceptable gold
  std::vector<std::string> contexts;  // ranked, best first
};

struct PromptSet {
  std::string held_in_header = "Answer the question:";
  std::string knowledge_tag = "Knowledge:";
  std::string q_tag = "Q:";
  std::string a_tag = "A:";
  std::string icl_with_ctx_header = "Answer the following questions based on the Knowledge:";
  std::string icl_no_ctx_header = "Answer the following questions:";
};

struct IclSample {
  std::string question;
  std::string answer;
  std::string context;  // unused by the no-context format
};

// Token stream plus supervision mask. loss_mask[t] says whether token t is a
// supervised prediction target; position 0 is never one (nothing precedes it).
struct FormattedSample {
  std::string text;
  std::vector<int> tokens;
  std::vector<bool> loss_mask;
  std::vector<std::string> k_add;
  std::vector<std::vector<int>> k_add_tokens;
  std::string id;
  std::string setting;
};

inline std::string join_contexts(const std::vector<std::string>& ctx) {
  std::string out;
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    if (i) out += ' ';
    out += ctx[i];
  }
  return out;
}

/// Held-in / held-out prompt. The knowledge line carries all of k_max in rank
/// order with a closing period; with no contexts it reduces to the bare tag.
inline std::string format_held_in(const std::string& q, const std::vector<std::string>& k_max,
                                  const PromptSet& p) {
  std::string text = p.held_in_header + "\n" + p.knowledge_tag;
  if (!k_max.empty()) text += " " + join_contexts(k_max) + ".";
  text += "\n" + p.q_tag + " " + q + "\n" + p.a_tag;
  return text;
}

/// ICL prompt with one context per demonstration and the target's own
/// knowledge line (no closing period in this format).
inline std::string format_icl_with_contexts(const std::string& q,
                                            const std::vector<std::string>& target_ctx,
                                            const std::vector<IclSample>& samples,
                                            const PromptSet& p) {
  std::string text = p.icl_with_ctx_header;
  for (const IclSample& s : samples) {
    text += "\n" + p.knowledge_tag + " " + s.context;
    text += "\n" + p.q_tag + " " + s.question;
    text += "\n" + p.a_tag + " " + s.answer;
  }
  text += "\n" + p.knowledge_tag;
  if (!target_ctx.empty()) text += " " + join_contexts(target_ctx);
  text += "\n" + p.q_tag + " " + q + "\n" + p.a_tag;
  return text;
}

/// ICL prompt of bare query-answer pairs.
inline std::string format_icl_without_contexts(const std::string& q,
                                               const std::vector<IclSample>& pairs,
                                               const PromptSet& p) {
  std::string text = p.icl_no_ctx_header;
  for (const IclSample& s : pairs) {
    text += "\n" + p.q_tag + " " + s.question;
    text += "\n" + p.a_tag + " " + s.answer;
  }
  text += "\n" + p.q_tag + " " + q + "\n" + p.a_tag;
  return text;
}

/// Additional contexts go to the encoder verbatim: no prompt wrapping.
inline std::vector<std::string> format_additional_contexts(
    const std::vector<std::string>& k_add) {
  return k_add;
}

struct ContextBudget {
  std::vector<std::string> k_max;
  std::vector<std::string> k_add;
  std::size_t m = 0;
};

namespace detail {

inline std::size_t supervised_token_count(const std::string& prompt, const QAExample& ex,
                                          const CharTokenizer& tok) {
  std::size_t n = tok.encode(prompt).size();
  if (!ex.answers.empty()) n += tok.encode(" " + ex.answers.front()).size() + 1;  // + EOS
  return n;
}

}  // namespace detail

/// Splits the ranked contexts into the text route (k_max, filled greedily
/// while the whole supervised sequence still fits max_seq_len) and the
/// encoder route (the next add_count ranks). contexts_only forces m = 0.
inline ContextBudget select_context_budget(const QAExample& ex, std::size_t add_count,
                                           const CharTokenizer& tok, const PromptSet& p,
                                           std::size_t max_seq_len, bool contexts_only = false) {
  ContextBudget out;
  const std::size_t skeleton =
      detail::supervised_token_count(format_held_in(ex.question, {}, p), ex, tok);
  if (skeleton > max_seq_len) {
    throw std::invalid_argument("context budget: skeleton for '" + ex.id + "' needs " +
                                std::to_string(skeleton) + " tokens, budget is " +
                                std::to_string(max_seq_len));
  }
  std::size_t m = 0;
  if (!contexts_only) {
    while (m < ex.contexts.size()) {
      std::vector<std::string> trial(ex.contexts.begin(), ex.contexts.begin() + m + 1);
      const std::size_t need =
          detail::supervised_token_count(format_held_in(ex.question, trial, p), ex, tok);
      if (need > max_seq_len) break;
      ++m;
    }
  }
  out.m = m;
  out.k_max.assign(ex.contexts.begin(), ex.contexts.begin() + m);
  const std::size_t add_end = std::min(ex.contexts.size(), m + add_count);
  out.k_add.assign(ex.contexts.begin() + m, ex.contexts.begin() + add_end);
  return out;
}

/// Tokenizes a prompt (and optional gold answer), building the supervision
/// mask. mask_prompt=false keeps loss on every predictable position instead
/// of just the answer span.
inline FormattedSample make_sample(std::string prompt, const std::string& answer,
                                   std::vector<std::string> k_add, const CharTokenizer& tok,
                                   std::size_t enc_max_len, bool mask_prompt = true) {
  FormattedSample s;
  s.tokens = tok.encode(prompt);
  s.loss_mask.assign(s.tokens.size(), !mask_prompt);
  if (!answer.empty()) {
    prompt += " " + answer;
    const std::vector<int> ans = tok.encode(" " + answer);
    s.tokens.insert(s.tokens.end(), ans.begin(), ans.end());
    s.tokens.push_back(CharTokenizer::kEos);
    s.loss_mask.resize(s.tokens.size(), true);
  }
  if (!s.loss_mask.empty()) s.loss_mask[0] = false;
  s.text = std::move(prompt);
  s.k_add = std::move(k_add);
  for (const std::string& ctx : s.k_add) {
    std::vector<int> ids = tok.encode(ctx);
    if (ids.size() > enc_max_len - 1) ids.resize(enc_max_len - 1);  // room for CLS
    s.k_add_tokens.push_back(std::move(ids));
  }
  return s;
}

enum class ComqaMode { choice, seq2seq };

/// Multiple-choice items become plain QA: choice mode numbers the options
/// 1-5 (both the digit and the option text count as gold), seq2seq keeps the
/// bare question with the option text as the only gold.
inline QAExample reformat_commonsenseqa(const nlohmann::json& raw, ComqaMode mode) {
  if (!raw.contains("answerKey") || raw["answerKey"].get<std::string>().empty()) {
    throw std::invalid_argument("commonsenseqa: item is missing its answer key");
  }
  const std::string key = raw["answerKey"].get<std::string>();
  const auto& choices = raw.at("question").at("choices");
  if (choices.size() != 5) {
    throw std::invalid_argument("commonsenseqa: expected 5 choices, got " +
                                std::to_string(choices.size()));
  }
  QAExample ex;
  ex.id = raw.value("id", "");
  const std::string stem = raw.at("question").at("stem").get<std::string>();
  std::string gold_text;
  std::string numbered;
  int digit = 0;
  for (const auto& c : choices) {
    const std::string label = c.at("label").get<std::string>();
    const std::string text = c.at("text").get<std::string>();
    const int n = label[0] - 'A' + 1;
    numbered += "\n" + std::to_string(n) + ": " + text;
    if (label == key) {
      digit = n;
      gold_text = text;
    }
  }
  if (digit == 0) {
    throw std::invalid_argument("commonsenseqa: answer key '" + key + "' matches no choice");
  }
  if (mode == ComqaMode::choice) {
    ex.question = stem + " Choose from 1-5 given below." + numbered;
    ex.answers = {std::to_string(digit), gold_text};
  } else {
    ex.question = stem;
    ex.answers = {gold_text};
  }
  return ex;
}

// ---- line-delimited record files ----

inline std::vector<QAExample> read_qa_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  std::vector<QAExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    QAExample ex;
    ex.id = j.contains("id") && j["id"].is_string() ? j["id"].get<std::string>()
                                                    : std::to_string(lineno);
    ex.question = j.at("question").get<std::string>();
    for (const auto& a : j.at("answers")) ex.answers.push_back(a.get<std::string>());
    if (j.contains("contexts")) {
      for (const auto& c : j["contexts"]) ex.contexts.push_back(c.get<std::string>());
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline void write_qa_jsonl(const std::string& path, const std::vector<QAExample>& examples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  for (const QAExample& ex : examples) {
    nlohmann::json j{{"id", ex.id},
                     {"question", ex.question},
                     {"answers", ex.answers},
                     {"contexts", ex.contexts}};
    out << j.dump() << "\n";
  }
}

}  // namespace vecrag
