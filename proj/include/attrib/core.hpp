#pragma once

// Domain types of the interaction model: queries, outputs, attributable
// units, sources, attribution domains and attribution sets, plus the two
// set-construction operations (plain and relevance-thresholded).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "attrib/errors.hpp"

namespace attrib {

using TokenSeq = std::vector<std::string>;

inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kEosToken = "</s>";

namespace detail {

// 64-bit FNV-1a; stable across platforms, used for fingerprints and config hashes.
class Fnv1a {
 public:
  void add(std::string_view bytes) noexcept {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ULL;
    }
  }
  void add_field(std::string_view bytes) noexcept {
    add(bytes);
    add(std::string_view("\x1f", 1));
  }
  void add_u64(std::uint64_t v) noexcept { add_field(std::to_string(v)); }
  std::uint64_t value() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return out;
}

inline bool is_ascii_digit(char c) noexcept { return c >= '0' && c <= '9'; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Tokenization

enum class PunctuationMode {
  remove,    // punctuation characters are dropped
  separate,  // each punctuation character becomes its own token
};

struct TokenizerConfig {
  bool case_fold = true;
  PunctuationMode punctuation = PunctuationMode::remove;
  // Keep ',' and '.' when flanked by digits ("3,475", "2.5").
  bool keep_numeric_separators = true;
};

/// Lowercases, splits on whitespace and peels punctuation off words.
/// The reserved tokens <unk> and </s> pass through untouched so decoded
/// outputs survive a write/read cycle.
inline TokenSeq tokenize(std::string_view text, const TokenizerConfig& cfg = {}) {
  TokenSeq out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    std::size_t end = pos;
    while (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end]))) ++end;
    if (end == pos) break;
    std::string_view chunk = text.substr(pos, end - pos);
    pos = end;

    if (chunk == kUnkToken || chunk == kEosToken) {
      out.emplace_back(chunk);
      continue;
    }

    std::string word;
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      char c = chunk[k];
      auto uc = static_cast<unsigned char>(c);
      if (uc < 0x80 && std::ispunct(uc)) {
        bool numeric_sep = cfg.keep_numeric_separators && (c == ',' || c == '.') && k > 0 &&
                           k + 1 < chunk.size() && detail::is_ascii_digit(chunk[k - 1]) &&
                           detail::is_ascii_digit(chunk[k + 1]);
        if (numeric_sep) {
          word.push_back(c);
          continue;
        }
        if (!word.empty()) out.push_back(std::exchange(word, {}));
        if (cfg.punctuation == PunctuationMode::separate) out.emplace_back(1, c);
        continue;
      }
      word.push_back(cfg.case_fold && uc < 0x80 ? static_cast<char>(std::tolower(uc)) : c);
    }
    if (!word.empty()) out.push_back(std::move(word));
  }
  return out;
}

inline std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (k) out.push_back(' ');
    out += tokens[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Interaction model

/// The model input x. Carries the wall-clock time it was issued at.
class Query {
 public:
  Query(TokenSeq text, std::int64_t issued_at) : text_(std::move(text)), issued_at_(issued_at) {
    if (text_.empty()) throw parameter_error("query text must be non-empty");
  }

  const TokenSeq& text() const noexcept { return text_; }
  std::int64_t issued_at() const noexcept { return issued_at_; }
  const std::string& last_token() const noexcept { return text_.back(); }

  friend bool operator==(const Query&, const Query&) = default;

 private:
  TokenSeq text_;
  std::int64_t issued_at_;
};

/// The model output y.
struct ModelOutput {
  TokenSeq text;

  friend bool operator==(const ModelOutput&, const ModelOutput&) = default;
};

/// z = (x, y, i, j): the half-open token span [i, j) of y that needs attribution.
class AttributableUnit {
 public:
  AttributableUnit(Query query, ModelOutput output, std::size_t span_start, std::size_t span_end)
      : query_(std::move(query)),
        output_(std::move(output)),
        span_start_(span_start),
        span_end_(span_end) {
    if (!(span_start_ < span_end_ && span_end_ <= output_.text.size())) {
      throw parameter_error("span [" + std::to_string(span_start_) + ", " +
                            std::to_string(span_end_) + ") invalid for output of " +
                            std::to_string(output_.text.size()) + " tokens");
    }
  }

  const Query& query() const noexcept { return query_; }
  const ModelOutput& output() const noexcept { return output_; }
  std::size_t span_start() const noexcept { return span_start_; }
  std::size_t span_end() const noexcept { return span_end_; }
  std::size_t span_length() const noexcept { return span_end_ - span_start_; }

  std::span<const std::string> span_tokens() const noexcept {
    return std::span<const std::string>(output_.text).subspan(span_start_, span_length());
  }

  friend bool operator==(const AttributableUnit&, const AttributableUnit&) = default;

 private:
  Query query_;
  ModelOutput output_;
  std::size_t span_start_;
  std::size_t span_end_;
};

using Meta = std::map<std::string, std::string>;

/// A corpus element s.
class Source {
 public:
  Source(std::string id, TokenSeq text, Meta meta = {})
      : id_(std::move(id)), text_(std::move(text)), meta_(std::move(meta)) {
    if (id_.empty()) throw parameter_error("source id must be non-empty");
    if (text_.empty()) throw parameter_error("source '" + id_ + "' has empty text");
  }

  // A model output standing in as a source; may be empty.
  static Source from_output(const ModelOutput& output, std::string id = "counterfactual-output") {
    Source s;
    s.id_ = std::move(id);
    s.text_ = output.text;
    return s;
  }

  const std::string& id() const noexcept { return id_; }
  const TokenSeq& text() const noexcept { return text_; }
  const Meta& meta() const noexcept { return meta_; }

  friend bool operator==(const Source&, const Source&) = default;

 private:
  Source() = default;

  std::string id_;
  TokenSeq text_;
  Meta meta_;
};

enum class DomainKind { training, external };

inline std::string_view to_string(DomainKind k) noexcept {
  return k == DomainKind::training ? "training" : "external";
}

/// The attribution domain D: an ordered collection of sources with unique ids.
class AttributionDomain {
 public:
  AttributionDomain() = default;
  AttributionDomain(DomainKind kind, std::vector<Source> sources)
      : kind_(kind), sources_(std::move(sources)) {
    std::unordered_set<std::string> seen;
    for (const auto& s : sources_) {
      if (!seen.insert(s.id()).second) throw parameter_error("duplicate source id '" + s.id() + "'");
    }
  }

  DomainKind kind() const noexcept { return kind_; }
  const std::vector<Source>& sources() const noexcept { return sources_; }
  std::size_t size() const noexcept { return sources_.size(); }
  bool empty() const noexcept { return sources_.empty(); }

  const Source* find(std::string_view id) const noexcept {
    for (const auto& s : sources_)
      if (s.id() == id) return &s;
    return nullptr;
  }

  const Source& at(std::string_view id) const {
    if (const Source* s = find(id)) return *s;
    throw parameter_error("unknown source id '" + std::string(id) + "'");
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(sources_.size());
    for (const auto& s : sources_) out.push_back(s.id());
    return out;
  }

  /// Sources whose id is not in `excluded`, in original order.
  AttributionDomain without(std::span<const std::string> excluded) const {
    std::vector<Source> kept;
    for (const auto& s : sources_) {
      if (std::find(excluded.begin(), excluded.end(), s.id()) == excluded.end()) kept.push_back(s);
    }
    return AttributionDomain(kind_, std::move(kept));
  }

  /// Sources whose id is in `ids`, in original domain order.
  AttributionDomain restricted_to(std::span<const std::string> ids) const {
    std::vector<Source> kept;
    for (const auto& s : sources_) {
      if (std::find(ids.begin(), ids.end(), s.id()) != ids.end()) kept.push_back(s);
    }
    return AttributionDomain(kind_, std::move(kept));
  }

  void require_training(std::string_view op) const {
    if (kind_ != DomainKind::training) {
      throw parameter_error(std::string(op) + " requires a training attribution domain");
    }
  }

 private:
  DomainKind kind_ = DomainKind::training;
  std::vector<Source> sources_;
};

// ---------------------------------------------------------------------------
// Attribution sets

/// One admitted (unit, source) pair. Units are referenced by their position
/// in the unit list the set was built from.
struct Attribution {
  std::size_t unit_ref = 0;
  std::string source_id;
  double score = 0.0;

  friend bool operator==(const Attribution&, const Attribution&) = default;
};

/// Identifies the (units, domain) pair a set was built over; sets are only
/// comparable when their scopes agree.
inline std::uint64_t scope_fingerprint(std::span<const AttributableUnit> units,
                                       const AttributionDomain& domain) {
  detail::Fnv1a h;
  h.add_u64(units.size());
  for (const auto& u : units) {
    for (const auto& t : u.query().text()) h.add_field(t);
    h.add_u64(static_cast<std::uint64_t>(u.query().issued_at()));
    for (const auto& t : u.output().text) h.add_field(t);
    h.add_u64(u.span_start());
    h.add_u64(u.span_end());
  }
  h.add_u64(domain.size());
  for (const auto& s : domain.sources()) h.add_field(s.id());
  return h.value();
}

class AttributionSet {
 public:
  AttributionSet() = default;
  AttributionSet(std::vector<Attribution> attributions, std::string evaluator_name, double alpha,
                 std::optional<double> relevance_threshold, std::uint64_t scope)
      : attributions_(std::move(attributions)),
        evaluator_name_(std::move(evaluator_name)),
        alpha_(alpha),
        relevance_threshold_(relevance_threshold),
        scope_(scope) {
    std::sort(attributions_.begin(), attributions_.end(), [](const auto& a, const auto& b) {
      return std::tie(a.unit_ref, a.source_id) < std::tie(b.unit_ref, b.source_id);
    });
    for (std::size_t k = 0; k < attributions_.size(); ++k) {
      const auto& a = attributions_[k];
      if (!(a.score >= alpha_)) {
        throw parameter_error("attribution (unit " + std::to_string(a.unit_ref) + ", '" +
                              a.source_id + "') scores below alpha");
      }
      if (k > 0 && attributions_[k - 1].unit_ref == a.unit_ref &&
          attributions_[k - 1].source_id == a.source_id) {
        throw parameter_error("duplicate attribution (unit " + std::to_string(a.unit_ref) +
                              ", '" + a.source_id + "')");
      }
    }
  }

  const std::vector<Attribution>& attributions() const noexcept { return attributions_; }
  std::size_t size() const noexcept { return attributions_.size(); }
  bool empty() const noexcept { return attributions_.empty(); }
  const std::string& evaluator_name() const noexcept { return evaluator_name_; }
  double alpha() const noexcept { return alpha_; }
  std::optional<double> relevance_threshold() const noexcept { return relevance_threshold_; }
  std::uint64_t scope() const noexcept { return scope_; }

  bool contains(std::size_t unit_ref, std::string_view source_id) const noexcept {
    auto it = std::lower_bound(attributions_.begin(), attributions_.end(),
                               std::pair<std::size_t, std::string_view>(unit_ref, source_id),
                               [](const Attribution& a, const auto& key) {
                                 return std::pair<std::size_t, std::string_view>(
                                            a.unit_ref, a.source_id) < key;
                               });
    return it != attributions_.end() && it->unit_ref == unit_ref && it->source_id == source_id;
  }

  /// True when every member of this set is also in `other`.
  bool subset_of(const AttributionSet& other) const noexcept {
    return std::all_of(attributions_.begin(), attributions_.end(), [&](const Attribution& a) {
      return other.contains(a.unit_ref, a.source_id);
    });
  }

  std::vector<std::string> sources_for(std::size_t unit_ref) const {
    std::vector<std::string> out;
    for (const auto& a : attributions_)
      if (a.unit_ref == unit_ref) out.push_back(a.source_id);
    return out;
  }

 private:
  std::vector<Attribution> attributions_;
  std::string evaluator_name_;
  double alpha_ = 0.0;
  std::optional<double> relevance_threshold_;
  std::uint64_t scope_ = 0;
};

/// A scoring function v : units x sources -> reals.
template <class F>
concept Evaluator = std::invocable<const F&, const AttributableUnit&, const Source&> &&
                    std::convertible_to<std::invoke_result_t<const F&, const AttributableUnit&,
                                                             const Source&>,
                                        double>;

template <class F>
std::string evaluator_name(const F& f) {
  if constexpr (requires { f.name(); }) {
    return std::string(f.name());
  } else {
    return "custom";
  }
}

namespace detail {

template <Evaluator F>
double score_pair(const F& v, const AttributableUnit& z, std::size_t unit_ref, const Source& s,
                  std::string_view what) {
  double score;
  try {
    score = static_cast<double>(v(z, s));
  } catch (const std::exception& e) {
    throw scoring_error(std::string(what) + " failed on (unit " + std::to_string(unit_ref) +
                        ", source '" + s.id() + "'): " + e.what());
  }
  if (std::isnan(score)) {
    throw scoring_error(std::string(what) + " returned NaN on (unit " + std::to_string(unit_ref) +
                        ", source '" + s.id() + "')");
  }
  return score;
}

}  // namespace detail

/// { (z, s) : v(z, s) >= alpha } over every unit and source.
template <Evaluator F>
AttributionSet build_attribution_set(std::span<const AttributableUnit> units,
                                     const AttributionDomain& domain, const F& v, double alpha) {
  std::vector<Attribution> admitted;
  for (std::size_t u = 0; u < units.size(); ++u) {
    for (const auto& s : domain.sources()) {
      double score = detail::score_pair(v, units[u], u, s, "evaluator");
      if (score >= alpha) admitted.push_back({u, s.id(), score});
    }
  }
  return AttributionSet(std::move(admitted), evaluator_name(v), alpha, std::nullopt,
                        scope_fingerprint(units, domain));
}

/// The r-relevant attribution set: pairs passing the evaluator cutoff whose
/// relevance phi(z, s) is at least r.
template <Evaluator F, Evaluator Phi>
AttributionSet build_r_relevant_set(std::span<const AttributableUnit> units,
                                    const AttributionDomain& domain, const F& v, double alpha,
                                    const Phi& phi, double r) {
  if (!(r >= 0.0 && r <= 1.0)) {
    throw parameter_error("relevance threshold r must lie in [0, 1], got " + std::to_string(r));
  }
  std::vector<Attribution> admitted;
  for (std::size_t u = 0; u < units.size(); ++u) {
    for (const auto& s : domain.sources()) {
      double score = detail::score_pair(v, units[u], u, s, "evaluator");
      if (score < alpha) continue;
      double rel = detail::score_pair(phi, units[u], u, s, "relevance function");
      if (rel < 0.0 || rel > 1.0) {
        throw scoring_error("relevance " + std::to_string(rel) + " outside [0, 1] on (unit " +
                            std::to_string(u) + ", source '" + s.id() + "')");
      }
      if (rel >= r) admitted.push_back({u, s.id(), score});
    }
  }
  return AttributionSet(std::move(admitted), evaluator_name(v), alpha, r,
                        scope_fingerprint(units, domain));
}

/// Naive splitter: one unit per sentence, a sentence ending at a
/// '.', '?' or '!' token (inclusive) or at end of text.
inline std::vector<AttributableUnit> split_sentences(const Query& query,
                                                     const ModelOutput& output) {
  std::vector<AttributableUnit> units;
  std::size_t start = 0;
  const auto& toks = output.text;
  for (std::size_t k = 0; k < toks.size(); ++k) {
    if (toks[k] == "." || toks[k] == "?" || toks[k] == "!") {
      units.emplace_back(query, output, start, k + 1);
      start = k + 1;
    }
  }
  if (start < toks.size()) units.emplace_back(query, output, start, toks.size());
  return units;
}

}  // namespace attrib
