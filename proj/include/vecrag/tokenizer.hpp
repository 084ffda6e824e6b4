// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <vector>

namespace vecrag {

// Character-level tokenizer over newline + printable ASCII. The round trip
// decode(encode(s)) == s holds for any string over that alphabet; anything
// else becomes UNK (warned once per call). Special ids come first so token
// streams are stable regardless of alphabet growth.
class CharTokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kCls = 3;
  static constexpr int kUnk = 4;
  static constexpr int kFirstChar = 5;

  CharTokenizer() {
    char_to_id_.fill(-1);
    add_char('\n');
    for (int c = 32; c <= 126; ++c) add_char(static_cast<char>(c));
  }

  int vocab_size() const { return kFirstChar + static_cast<int>(id_to_char_.size()); }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    bool warned = false;
    for (unsigned char c : text) {
      const int id = char_to_id_[c];
      if (id < 0) {
        if (!warned) {
          std::fprintf(stderr, "tokenizer: character 0x%02x outside alphabet, using UNK\n", c);
          warned = true;
        }
        ids.push_back(kUnk);
      } else {
        ids.push_back(id);
      }
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id >= kFirstChar && id < vocab_size()) {
        out.push_back(id_to_char_[static_cast<std::size_t>(id - kFirstChar)]);
      }
      // special ids render as nothing
    }
    return out;
  }

 private:
  void add_char(char c) {
    char_to_id_[static_cast<unsigned char>(c)] = kFirstChar + static_cast<int>(id_to_char_.size());
    id_to_char_.push_back(c);
  }

  std::array<int, 256> char_to_id_{};
  std::vector<char> id_to_char_;
};

}  // namespace vecrag
