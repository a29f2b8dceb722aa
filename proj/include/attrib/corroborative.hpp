#pragma once

// Corroborative evaluators: exact match, valid paraphrase (token-table
// proxy) and textual entailment (content-token overlap proxy). All three are
// pure functions of (unit, source) and return 0 or 1.

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "attrib/core.hpp"

namespace attrib {

// Mirrors data/stopwords.txt; a unit test keeps the two in sync.
inline const std::vector<std::string>& default_stopwords() {
  static const std::vector<std::string> words = {
      "a",    "an",    "and",  "are",  "as",   "at",   "be",   "been", "but",   "by",    "can",
      "did",  "do",    "does", "for",  "from", "had",  "has",  "have", "he",    "her",   "his",
      "how",  "i",     "if",   "in",   "into", "is",   "it",   "its",  "of",    "on",    "or",
      "s",    "she",   "so",   "that", "the",  "their", "them", "they", "this", "to",    "was",
      "we",   "were",  "what", "when", "where", "which", "who", "why",  "will",  "with",  "you"};
  return words;
}

inline std::vector<std::string> load_stopwords(std::istream& in) {
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    auto toks = tokenize(line);
    for (auto& t : toks) out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<std::string> load_stopwords(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parameter_error("cannot open stopword file '" + path + "'");
  return load_stopwords(in);
}

struct EntailmentConfig {
  std::unordered_set<std::string> stopwords{default_stopwords().begin(),
                                            default_stopwords().end()};
  double threshold = 1.0;   // fraction of claim tokens a window must contain
  std::size_t window = 16;  // window length in source tokens
  // Add the query's content tokens to the claim.
  bool augment_with_query = true;

  void validate() const {
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
      throw parameter_error("entailment threshold must lie in [0, 1]");
    }
    if (window < 1) throw parameter_error("entailment window must be at least 1 token");
  }
};

/// Symmetric token equivalence table. Each input line lists a head token
/// followed by its equivalents; `a b c` makes a<->b and a<->c.
class ParaphraseTable {
 public:
  ParaphraseTable() = default;

  explicit ParaphraseTable(const std::vector<std::pair<std::string, std::string>>& pairs) {
    for (const auto& [a, b] : pairs) add(a, b);
  }

  static ParaphraseTable load(std::istream& in) {
    ParaphraseTable t;
    std::string line;
    while (std::getline(in, line)) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      std::istringstream fields(line);
      std::string head, alt;
      if (!(fields >> head)) continue;
      while (fields >> alt) t.add(head, alt);
    }
    return t;
  }

  static ParaphraseTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw parameter_error("cannot open paraphrase table '" + path + "'");
    return load(in);
  }

  void add(const std::string& a, const std::string& b) {
    if (a == b) return;
    table_[a].insert(b);
    table_[b].insert(a);
  }

  bool equivalent(std::string_view a, std::string_view b) const {
    if (a == b) return true;
    auto it = table_.find(std::string(a));
    return it != table_.end() && it->second.count(std::string(b)) > 0;
  }

  bool empty() const noexcept { return table_.empty(); }
  const std::map<std::string, std::set<std::string>>& entries() const noexcept { return table_; }

 private:
  std::map<std::string, std::set<std::string>> table_;
};

namespace detail {

template <class Match>
bool contains_window(std::span<const std::string> needle, std::span<const std::string> hay,
                     Match match) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  for (std::size_t start = 0; start + needle.size() <= hay.size(); ++start) {
    bool ok = true;
    for (std::size_t k = 0; k < needle.size() && ok; ++k) ok = match(needle[k], hay[start + k]);
    if (ok) return true;
  }
  return false;
}

inline bool is_punctuation_token(std::string_view t) {
  return std::all_of(t.begin(), t.end(), [](char c) {
    auto uc = static_cast<unsigned char>(c);
    return uc < 0x80 && std::ispunct(uc);
  });
}

}  // namespace detail

/// Distinct non-stopword, non-punctuation tokens, sorted.
inline std::vector<std::string> content_tokens(std::span<const std::string> tokens,
                                               const EntailmentConfig& cfg) {
  std::set<std::string> out;
  for (const auto& t : tokens) {
    if (cfg.stopwords.count(t) || detail::is_punctuation_token(t)) continue;
    out.insert(t);
  }
  return {out.begin(), out.end()};
}

/// The claim v_TE must find in a source: content tokens of the span, plus
/// those of the query when `augment_with_query` is set.
inline std::vector<std::string> claim_tokens(const AttributableUnit& z, const EntailmentConfig& cfg) {
  std::vector<std::string> all(z.span_tokens().begin(), z.span_tokens().end());
  if (cfg.augment_with_query) all.insert(all.end(), z.query().text().begin(), z.query().text().end());
  return content_tokens(all, cfg);
}

/// 1 iff some window of at most `cfg.window` tokens of `source` contains at
/// least threshold * |claim| of the (distinct) claim tokens.
inline int window_entails(std::span<const std::string> claim, std::span<const std::string> source,
                          const EntailmentConfig& cfg) {
  if (claim.empty()) throw degenerate_claim_error("claim has no content tokens");
  if (source.empty()) return 0;
  const double needed = cfg.threshold * static_cast<double>(claim.size()) - 1e-12;
  const std::size_t len = std::min(cfg.window, source.size());

  std::unordered_map<std::string_view, int> in_window;
  for (const auto& c : claim) in_window.emplace(c, 0);
  std::size_t present = 0;
  auto push = [&](const std::string& t) {
    auto it = in_window.find(t);
    if (it != in_window.end() && it->second++ == 0) ++present;
  };
  auto pop = [&](const std::string& t) {
    auto it = in_window.find(t);
    if (it != in_window.end() && --it->second == 0) --present;
  };
  for (std::size_t k = 0; k < len; ++k) push(source[k]);
  if (static_cast<double>(present) >= needed) return 1;
  for (std::size_t k = len; k < source.size(); ++k) {
    push(source[k]);
    pop(source[k - len]);
    if (static_cast<double>(present) >= needed) return 1;
  }
  return 0;
}

/// 1 iff output[i:j] occurs word-for-word in s.
inline int eval_exact_match(const AttributableUnit& z, const Source& s) {
  return detail::contains_window(z.span_tokens(), s.text(),
                                 [](const std::string& a, const std::string& b) { return a == b; })
             ? 1
             : 0;
}

/// 1 iff some window of s of the span's length matches it token-wise, where
/// two tokens match when equal or listed as equivalents in `table`.
inline int eval_valid_paraphrase(const AttributableUnit& z, const Source& s,
                                 const ParaphraseTable& table) {
  return detail::contains_window(
             z.span_tokens(), s.text(),
             [&](const std::string& a, const std::string& b) { return table.equivalent(a, b); })
             ? 1
             : 0;
}

/// Lexical proxy for entailment; see window_entails. Not logical entailment.
inline int eval_textual_entailment(const AttributableUnit& z, const Source& s,
                                   const EntailmentConfig& cfg) {
  cfg.validate();
  auto claim = claim_tokens(z, cfg);
  if (claim.empty()) {
    throw degenerate_claim_error("unit span '" + join_tokens(z.span_tokens()) +
                                 "' carries no content tokens");
  }
  return window_entails(claim, s.text(), cfg);
}

// Function-object forms for use with build_attribution_set.

struct ExactMatch {
  static constexpr std::string_view name() { return "exact_match"; }
  double operator()(const AttributableUnit& z, const Source& s) const {
    return eval_exact_match(z, s);
  }
};

struct ValidParaphrase {
  ParaphraseTable table;
  static constexpr std::string_view name() { return "valid_paraphrase"; }
  double operator()(const AttributableUnit& z, const Source& s) const {
    return eval_valid_paraphrase(z, s, table);
  }
};

struct TextualEntailment {
  EntailmentConfig config;
  static constexpr std::string_view name() { return "textual_entailment"; }
  double operator()(const AttributableUnit& z, const Source& s) const {
    return eval_textual_entailment(z, s, config);
  }
};

}  // namespace attrib
