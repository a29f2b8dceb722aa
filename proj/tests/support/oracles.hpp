#pragma once

// Independent reference computations and seeded generators shared by the
// unit and acceptance tests. Nothing here calls into the library's scoring
// code paths; the oracles recount from raw token lists.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "attrib/core.hpp"

namespace oracle {

using attrib::AttributableUnit;
using attrib::AttributionDomain;
using attrib::Source;
using attrib::TokenSeq;

/// Bigram tallies recomputed from the raw token lists of `sources`.
/// Tokens outside `known` map to "<unk>"; `eos` appends the closing pair.
inline std::map<std::pair<std::string, std::string>, long> recount(
    const std::vector<Source>& sources, const std::set<std::string>& known, bool eos) {
  auto norm = [&](const std::string& t) { return known.count(t) ? t : std::string("<unk>"); };
  std::map<std::pair<std::string, std::string>, long> c;
  for (const auto& s : sources) {
    const auto& t = s.text();
    for (std::size_t k = 1; k < t.size(); ++k) ++c[{norm(t[k - 1]), norm(t[k])}];
    if (eos && !t.empty()) ++c[{norm(t.back()), "</s>"}];
  }
  return c;
}

/// Smoothed conditional probability (c_ab + lambda) / (c_a. + lambda V).
inline double smoothed_prob(const std::map<std::pair<std::string, std::string>, long>& c,
                            const std::string& a, const std::string& b, double lambda,
                            std::size_t vocab_size) {
  long row = 0;
  for (const auto& [k, n] : c)
    if (k.first == a) row += n;
  auto it = c.find({a, b});
  long ab = it == c.end() ? 0 : it->second;
  return (static_cast<double>(ab) + lambda) /
         (static_cast<double>(row) + lambda * static_cast<double>(vocab_size));
}

/// Mean NLL of the unit's span under the recounted smoothed model.
inline double recount_loss(const std::vector<Source>& sources, const AttributableUnit& z,
                           const std::set<std::string>& known, bool eos, double lambda,
                           std::size_t vocab_size) {
  auto c = recount(sources, known, eos);
  auto norm = [&](const std::string& t) { return known.count(t) ? t : std::string("<unk>"); };
  const auto& y = z.output().text;
  double nll = 0.0;
  for (std::size_t k = z.span_start(); k < z.span_end(); ++k) {
    std::string prev = k == 0 ? z.query().text().back() : y[k - 1];
    nll -= std::log(smoothed_prob(c, norm(prev), norm(y[k]), lambda, vocab_size));
  }
  return nll / static_cast<double>(z.span_length());
}

inline std::set<std::string> distinct_tokens(const AttributionDomain& d) {
  std::set<std::string> out;
  for (const auto& s : d.sources()) out.insert(s.text().begin(), s.text().end());
  return out;
}

/// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(average_ranks(a), average_ranks(b));
}

/// TF-IDF cosine recomputed by hand over plain token lists.
inline double tfidf_cosine(const std::vector<TokenSeq>& docs, const TokenSeq& query, std::size_t doc) {
  const double n = static_cast<double>(docs.size());
  auto df = [&](const std::string& t) {
    double c = 0;
    for (const auto& d : docs)
      if (std::find(d.begin(), d.end(), t) != d.end()) c += 1;
    return c;
  };
  auto vec = [&](const TokenSeq& toks) {
    std::map<std::string, double> v;
    for (const auto& t : toks) v[t] += 1;
    for (auto& [t, w] : v) w *= std::log((1 + n) / (1 + df(t))) + 1;
    return v;
  };
  auto q = vec(query);
  auto d = vec(docs[doc]);
  double dot = 0, nq = 0, nd = 0;
  for (auto& [t, w] : q) {
    nq += w * w;
    if (d.count(t)) dot += w * d[t];
  }
  for (auto& [t, w] : d) nd += w * w;
  if (nd == 0) return 0;
  return std::clamp(dot / std::sqrt(nq * nd), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Seeded generators

struct Rng {
  std::mt19937_64 eng;
  explicit Rng(std::uint64_t seed) : eng(seed) {}
  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng); }
  std::size_t between(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(eng);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(eng);
  }
  bool coin(double p = 0.5) { return uniform() < p; }
};

inline std::string word(std::size_t k) { return "t" + std::to_string(k); }

inline TokenSeq random_text(Rng& rng, std::size_t alphabet, std::size_t lo, std::size_t hi) {
  TokenSeq t;
  for (std::size_t n = rng.between(lo, hi); n > 0; --n) t.push_back(word(rng.below(alphabet)));
  return t;
}

inline AttributionDomain random_domain(Rng& rng, std::size_t n_sources, std::size_t alphabet,
                                       std::size_t lo = 2, std::size_t hi = 8,
                                       attrib::DomainKind kind = attrib::DomainKind::training) {
  std::vector<Source> s;
  for (std::size_t k = 0; k < n_sources; ++k) {
    attrib::Meta meta;
    if (rng.coin()) meta["priority"] = rng.coin() ? "primary" : "secondary";
    s.emplace_back("s" + std::to_string(k), random_text(rng, alphabet, lo, hi), meta);
  }
  return AttributionDomain(kind, std::move(s));
}

/// A unit whose span is, with probability 1/2, copied from a random source.
inline AttributableUnit random_unit(Rng& rng, const AttributionDomain& d, std::size_t alphabet) {
  TokenSeq y;
  if (!d.empty() && rng.coin()) {
    const auto& t = d.sources()[rng.below(d.size())].text();
    std::size_t i = rng.below(t.size());
    std::size_t j = rng.between(i + 1, std::min(t.size(), i + 3));
    y.assign(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(j));
  } else {
    y = random_text(rng, alphabet, 1, 3);
  }
  attrib::Query q(random_text(rng, alphabet, 1, 3), 1700000000);
  std::size_t len = y.size();
  return AttributableUnit(std::move(q), attrib::ModelOutput{std::move(y)}, 0, len);
}

}  // namespace oracle
