#pragma once

// Relevance functions phi : units x sources -> [0, 1].
//
// TF-IDF cosine keys on query + span tokens. idf uses the smoothed form
//   idf(t) = ln((1 + N) / (1 + df(t))) + 1
// so tokens missing from the index still get a finite weight.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrib/core.hpp"

namespace attrib {

class TfIdfIndex {
 public:
  TfIdfIndex() = default;

  explicit TfIdfIndex(const AttributionDomain& domain) : n_(domain.size()) {
    for (const auto& s : domain.sources()) add_source(s.id(), s.text());
    finish();
  }

  /// Index over arbitrary (id, tokens) pairs; empty texts are allowed and index as zero vectors.
  static TfIdfIndex from_documents(const std::vector<std::pair<std::string, TokenSeq>>& docs) {
    TfIdfIndex idx;
    idx.n_ = docs.size();
    for (const auto& [id, text] : docs) idx.add_source(id, text);
    idx.finish();
    return idx;
  }

  std::size_t document_count() const noexcept { return n_; }

  std::size_t df(const std::string& t) const {
    auto it = df_.find(t);
    return it == df_.end() ? 0 : it->second;
  }

  double idf(const std::string& t) const {
    return std::log((1.0 + static_cast<double>(n_)) / (1.0 + static_cast<double>(df(t)))) + 1.0;
  }

  bool contains(std::string_view id) const { return find(id) != nullptr; }

  const std::vector<std::string>& ids() const noexcept { return order_; }

  /// TF-IDF weights of an arbitrary token bag (raw term counts times idf).
  std::map<std::string, double> vectorize(std::span<const std::string> tokens) const {
    std::map<std::string, double> tf;
    for (const auto& t : tokens) tf[t] += 1.0;
    for (auto& [t, w] : tf) w *= idf(t);
    return tf;
  }

  /// Cosine between an arbitrary token bag and an indexed source, clamped to [0, 1].
  double cosine(std::span<const std::string> tokens, std::string_view id) const {
    const Doc* doc = find(id);
    if (!doc) throw parameter_error("source '" + std::string(id) + "' is not in the index");
    auto q = vectorize(tokens);
    double qn = 0.0;
    for (const auto& [t, w] : q) qn += w * w;
    if (qn == 0.0) throw degenerate_unit_error("query and span produce an empty TF-IDF vector");
    if (doc->norm == 0.0) return 0.0;
    double dot = 0.0;
    for (const auto& [t, w] : q) {
      if (auto it = doc->tf.find(t); it != doc->tf.end()) dot += w * it->second * idf(t);
    }
    return std::clamp(dot / (std::sqrt(qn) * doc->norm), 0.0, 1.0);
  }

  nlohmann::json to_json() const {
    nlohmann::json docs = nlohmann::json::array();
    for (const auto& id : order_) docs.push_back({{"id", id}, {"tf", find(id)->tf}});
    return {{"documents", n_}, {"df", df_}, {"sources", docs}};
  }

  static TfIdfIndex from_json(const nlohmann::json& j) {
    TfIdfIndex idx;
    idx.n_ = j.at("documents").get<std::size_t>();
    for (const auto& d : j.at("sources")) {
      idx.order_.push_back(d.at("id").get<std::string>());
      idx.docs_[idx.order_.back()].tf = d.at("tf").get<std::map<std::string, double>>();
    }
    idx.df_ = j.at("df").get<std::map<std::string, std::size_t>>();
    idx.compute_norms();
    return idx;
  }

 private:
  struct Doc {
    std::map<std::string, double> tf;
    double norm = 0.0;
  };

  const Doc* find(std::string_view id) const {
    auto it = docs_.find(std::string(id));
    return it == docs_.end() ? nullptr : &it->second;
  }

  void add_source(const std::string& id, const TokenSeq& text) {
    if (docs_.count(id)) throw parameter_error("duplicate document id '" + id + "'");
    order_.push_back(id);
    Doc& d = docs_[id];
    for (const auto& t : text) d.tf[t] += 1.0;
    for (const auto& [t, c] : d.tf) ++df_[t];
  }

  void finish() { compute_norms(); }

  void compute_norms() {
    for (auto& [id, d] : docs_) {
      double sq = 0.0;
      for (const auto& [t, c] : d.tf) {
        double w = c * idf(t);
        sq += w * w;
      }
      d.norm = std::sqrt(sq);
    }
  }

  std::size_t n_ = 0;
  std::map<std::string, std::size_t> df_;
  std::map<std::string, Doc> docs_;
  std::vector<std::string> order_;
};

inline TfIdfIndex build_index(const AttributionDomain& domain) {
  if (domain.empty()) throw empty_domain_error("cannot index an empty domain");
  return TfIdfIndex(domain);
}

inline TokenSeq query_and_span(const AttributableUnit& z) {
  TokenSeq out = z.query().text();
  out.insert(out.end(), z.span_tokens().begin(), z.span_tokens().end());
  return out;
}

/// Cosine similarity between TF-IDF vectors of (query + span) and s.
inline double tfidf_relevance(const TfIdfIndex& index, const AttributableUnit& z, const Source& s) {
  return index.cosine(query_and_span(z), s.id());
}

/// Weights per priority class, read from a source's meta entry (default key "priority").
class PriorityWeights {
 public:
  PriorityWeights(std::map<std::string, double> weights, double default_weight = 0.5,
                  std::string meta_key = "priority")
      : weights_(std::move(weights)), default_(default_weight), key_(std::move(meta_key)) {
    auto check = [](double w, const std::string& what) {
      if (!(w >= 0.0 && w <= 1.0)) {
        throw parameter_error("priority weight for " + what + " must lie in [0, 1]");
      }
    };
    for (const auto& [cls, w] : weights_) check(w, "'" + cls + "'");
    check(default_, "the default class");
  }

  double weight_for(const Source& s) const {
    auto m = s.meta().find(key_);
    if (m == s.meta().end()) return default_;
    auto it = weights_.find(m->second);
    return it == weights_.end() ? default_ : it->second;
  }

  const std::map<std::string, double>& weights() const noexcept { return weights_; }
  double default_weight() const noexcept { return default_; }
  const std::string& meta_key() const noexcept { return key_; }

 private:
  std::map<std::string, double> weights_;
  double default_;
  std::string key_;
};

/// Class weight of s; independent of the unit.
inline double priority_relevance(const AttributableUnit&, const Source& s,
                                 const PriorityWeights& weights) {
  return weights.weight_for(s);
}

/// The k most relevant indexed sources by TF-IDF, ties broken by ascending id.
inline std::vector<std::string> prefilter_topk(const TfIdfIndex& index, const AttributableUnit& z,
                                               std::size_t k) {
  if (k < 1) throw parameter_error("prefilter k must be at least 1");
  auto bag = query_and_span(z);
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& id : index.ids()) scored.emplace_back(index.cosine(bag, id), id);
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  if (scored.size() > k) scored.resize(k);
  std::vector<std::string> out;
  for (auto& [score, id] : scored) out.push_back(std::move(id));
  return out;
}

// Function-object forms.

struct TfIdfRelevance {
  const TfIdfIndex* index;
  static constexpr std::string_view name() { return "tfidf"; }
  double operator()(const AttributableUnit& z, const Source& s) const {
    return tfidf_relevance(*index, z, s);
  }
};

struct PriorityRelevance {
  PriorityWeights weights;
  static constexpr std::string_view name() { return "priority"; }
  double operator()(const AttributableUnit& z, const Source& s) const {
    return priority_relevance(z, s, weights);
  }
};

/// phi(z, s) = min(first(z, s), second(z, s)); passes r only when both do.
template <class A, class B>
struct MinRelevance {
  A first;
  B second;
  static constexpr std::string_view name() { return "min"; }
  double operator()(const AttributableUnit& z, const Source& s) const {
    return std::min<double>(first(z, s), second(z, s));
  }
};

}  // namespace attrib
