// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "vecrag/data.hpp"
#include "vecrag/rng.hpp"

// Synthetic key-value lookup task. Every item asks for the value of a fresh
// 3-letter key; exactly one of its ranked contexts states that value, at a
// seeded random rank, and the rest are other items' statements. With the
// contexts-only setting all of the evidence must travel through the encoder,
// so test EM directly measures how much the context vectors carry.

namespace vecrag {

struct SyntheticSpec {
  int n_train = 200;
  int n_test = 50;
  int n_contexts = 10;     // ranked list length per item
  int gold_max_rank = 10;  // gold lands uniformly in ranks 1..gold_max_rank
  int value_repeats = 1;   // times the value is stated per context
  int value_len = 1;       // characters per value
  std::string question_prefix = "value of ";
  std::uint64_t seed = 1234;
};

struct SyntheticData {
  std::vector<QAExample> train;
  std::vector<QAExample> test;
};

inline SyntheticData make_synthetic_kv(const SyntheticSpec& spec) {
  Rng rng(spec.seed);
  const int total = spec.n_train + spec.n_test;

  // distinct keys so test items are never seen in training
  std::set<std::string> seen;
  std::vector<std::string> names;
  while (static_cast<int>(names.size()) < total) {
    std::string name;
    for (int c = 0; c < 3; ++c) name.push_back(static_cast<char>('a' + rng.below(26)));
    if (seen.insert(name).second) names.push_back(name);
  }
  std::vector<std::string> values;
  for (int i = 0; i < total; ++i) {
    std::string v;
    for (int c = 0; c < std::max(1, spec.value_len); ++c) {
      v.push_back(static_cast<char>('b' + rng.below(25)));  // skip the article 'a'
    }
    values.push_back(v);
  }
  auto statement = [&](int i) {
    std::string s = names[static_cast<std::size_t>(i)] + " is";
    for (int r = 0; r < std::max(1, spec.value_repeats); ++r) {
      s += " " + values[static_cast<std::size_t>(i)];
    }
    return s;
  };

  SyntheticData out;
  for (int i = 0; i < total; ++i) {
    QAExample ex;
    ex.id = "kv" + std::to_string(i);
    ex.question = spec.question_prefix + names[static_cast<std::size_t>(i)];
    ex.answers = {values[static_cast<std::size_t>(i)]};
    const std::size_t gold_rank = rng.below(static_cast<std::uint64_t>(spec.gold_max_rank));
    for (int c = 0; c < spec.n_contexts; ++c) {
      if (static_cast<std::size_t>(c) == gold_rank) {
        ex.contexts.push_back(statement(i));
      } else {
        // the answer token must appear in the gold context only, so
        // distractors carry a different value (and a different key)
        int other = i;
        while (other == i ||
               values[static_cast<std::size_t>(other)] == values[static_cast<std::size_t>(i)]) {
          other = static_cast<int>(rng.below(static_cast<std::uint64_t>(total)));
        }
        ex.contexts.push_back(statement(other));
      }
    }
    (i < spec.n_train ? out.train : out.test).push_back(std::move(ex));
  }
  return out;
}

}  // namespace vecrag
