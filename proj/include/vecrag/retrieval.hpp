// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

// BM25 ranked retrieval over a small corpus. Stands in for whatever produced
// the ranked context lists; only the ranking interface matters downstream.

namespace vecrag {

struct CorpusDoc {
  std::string id;
  std::string text;
};

struct Retrieved {
  std::string doc_id;
  std::string text;
  double score = 0.0;
};

/// Lowercased terms with punctuation stripped; independent of the model
/// tokenizer on purpose.
inline std::vector<std::string> retrieval_terms(const std::string& text) {
  std::vector<std::string> terms;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      terms.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) terms.push_back(cur);
  return terms;
}

class Bm25Index {
 public:
  static constexpr double kK1 = 1.2;
  static constexpr double kB = 0.75;

  explicit Bm25Index(const std::vector<CorpusDoc>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("bm25: empty corpus");
    docs_ = corpus;
    // store docs sorted by id so score ties resolve to ascending doc_id
    std::sort(docs_.begin(), docs_.end(),
              [](const CorpusDoc& a, const CorpusDoc& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < docs_.size(); ++i) {
      if (docs_[i].id == docs_[i - 1].id) {
        throw std::invalid_argument("bm25: duplicate doc id '" + docs_[i].id + "'");
      }
    }
    doc_len_.resize(docs_.size());
    double total_len = 0.0;
    for (std::size_t d = 0; d < docs_.size(); ++d) {
      const std::vector<std::string> terms = retrieval_terms(docs_[d].text);
      doc_len_[d] = static_cast<double>(terms.size());
      total_len += doc_len_[d];
      std::map<std::string, double> counts;
      for (const std::string& t : terms) counts[t] += 1.0;
      for (const auto& [term, tf] : counts) postings_[term].push_back({d, tf});
    }
    avg_len_ = total_len / static_cast<double>(docs_.size());
  }

  std::size_t doc_count() const { return docs_.size(); }
  double avg_doc_len() const { return avg_len_; }

  const std::vector<std::pair<std::size_t, double>>* postings(const std::string& term) const {
    auto it = postings_.find(term);
    return it == postings_.end() ? nullptr : &it->second;
  }

  const CorpusDoc& doc(std::size_t idx) const { return docs_[idx]; }

  /// Okapi BM25 with the smoothed idf ln(1 + (N - df + 0.5)/(df + 0.5));
  /// each distinct query term contributes once. Descending score; ties break
  /// toward the ascending doc id. Only matching documents are returned.
  std::vector<Retrieved> retrieve(const std::string& query, std::size_t top_c) const {
    if (top_c < 1) throw std::invalid_argument("bm25: top_c must be >= 1");
    std::vector<std::string> terms = retrieval_terms(query);
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());

    const double n = static_cast<double>(docs_.size());
    std::vector<double> scores(docs_.size(), 0.0);
    std::vector<bool> matched(docs_.size(), false);
    for (const std::string& term : terms) {
      const auto* plist = postings(term);
      if (!plist) continue;
      const double df = static_cast<double>(plist->size());
      const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
      for (const auto& [d, tf] : *plist) {
        const double norm = kK1 * (1.0 - kB + kB * doc_len_[d] / avg_len_);
        scores[d] += idf * tf * (kK1 + 1.0) / (tf + norm);
        matched[d] = true;
      }
    }
    std::vector<std::size_t> order;
    for (std::size_t d = 0; d < docs_.size(); ++d) {
      if (matched[d]) order.push_back(d);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return a < b;  // docs_ already sorted by id
    });
    if (order.size() > top_c) order.resize(top_c);
    std::vector<Retrieved> out;
    for (std::size_t d : order) out.push_back({docs_[d].id, docs_[d].text, scores[d]});
    return out;
  }

 private:
  std::vector<CorpusDoc> docs_;
  std::vector<double> doc_len_;
  double avg_len_ = 0.0;
  std::map<std::string, std::vector<std::pair<std::size_t, double>>> postings_;
};

inline std::vector<CorpusDoc> read_corpus_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::vector<CorpusDoc> out;
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
    out.push_back({j.at("id").get<std::string>(), j.at("text").get<std::string>()});
  }
  return out;
}

}  // namespace vecrag
