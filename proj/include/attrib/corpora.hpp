#pragma once

// Seeded synthetic corpora for fact tracing, counterfactual-output and
// memorization experiments.
//
// A fact is the chain "<subject> <number> <unit>" placed at the end of a
// source, after a few filler tokens. Subjects, numbers and units are unique
// per fact and never occur as fillers, so under the count backend the
// greedy continuation of a query ending in <subject> is exactly
// "<number> <unit>", and it disappears once every source carrying the
// fact is removed.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "attrib/core.hpp"

namespace attrib {

struct Corpus {
  AttributionDomain domain;
  std::vector<AttributableUnit> units;
  /// Per unit: ids of the sources that carry its fact.
  std::vector<std::vector<std::string>> fact_sources;
};

namespace detail {

inline const std::vector<std::string>& fact_subjects() {
  static const std::vector<std::string> v{"moon",  "mars",   "venus", "titan", "europa",
                                          "ceres", "pluto",  "vesta", "rhea",  "triton",
                                          "oberon", "ganymede", "callisto", "io", "eris", "makemake"};
  return v;
}

inline const std::vector<std::string>& fact_numbers() {
  static const std::vector<std::string> v{"3,475", "6,779", "12,104", "5,150", "3,122", "939",
                                          "2,377", "525",   "1,527",  "2,707", "1,523", "5,268",
                                          "4,821", "3,643", "2,326",  "1,430"};
  return v;
}

inline const std::vector<std::string>& fact_units() {
  static const std::vector<std::string> v{"kilometers", "miles",   "leagues", "furlongs",
                                          "versts",     "cubits",  "fathoms", "parsecs",
                                          "chains",     "spans",   "rods",    "links",
                                          "ells",       "hands",   "perches", "reeds"};
  return v;
}

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> v{"notes",  "entry",   "record", "archive", "catalog",
                                          "survey", "ledger",  "page",   "volume",  "chapter",
                                          "report", "summary", "list",   "column"};
  return v;
}

struct Fact {
  std::string subject;
  std::string number;
  std::string unit;
};

inline std::vector<Fact> draw_facts(std::mt19937_64& rng, std::size_t n) {
  if (n > fact_subjects().size()) throw parameter_error("too many facts requested");
  auto subjects = fact_subjects();
  auto numbers = fact_numbers();
  auto units = fact_units();
  std::shuffle(subjects.begin(), subjects.end(), rng);
  std::shuffle(numbers.begin(), numbers.end(), rng);
  std::shuffle(units.begin(), units.end(), rng);
  std::vector<Fact> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back({subjects[k], numbers[k], units[k]});
  return out;
}

inline TokenSeq filler(std::mt19937_64& rng) {
  const auto& pool = filler_words();
  std::uniform_int_distribution<std::size_t> len(3, 6);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  TokenSeq out;
  for (std::size_t k = len(rng); k > 0; --k) out.push_back(pool[pick(rng)]);
  return out;
}

inline TokenSeq fact_source_text(std::mt19937_64& rng, const Fact& f) {
  TokenSeq t = filler(rng);
  t.insert(t.end(), {f.subject, f.number, f.unit});
  return t;
}

inline AttributableUnit fact_unit(const Fact& f, std::int64_t issued_at) {
  Query q({"what", "is", "the", "diameter", "of", f.subject}, issued_at);
  return AttributableUnit(std::move(q), ModelOutput{{f.number, f.unit}}, 0, 2);
}

inline std::string source_id(std::size_t k) { return "src-" + std::to_string(k); }

}  // namespace detail

inline constexpr std::int64_t kCorpusEpoch = 1700000000;

/// n sources, each carrying one distinct fact; unit k asks for fact k.
inline Corpus unique_fact_corpus(std::uint64_t seed, std::size_t n = 5) {
  if (n < 1) throw parameter_error("corpus needs at least one source");
  std::mt19937_64 rng(seed);
  auto facts = detail::draw_facts(rng, n);
  std::vector<Source> sources;
  Corpus c;
  for (std::size_t k = 0; k < n; ++k) {
    sources.emplace_back(detail::source_id(k), detail::fact_source_text(rng, facts[k]));
    c.units.push_back(detail::fact_unit(facts[k], kCorpusEpoch + static_cast<std::int64_t>(k)));
    c.fact_sources.push_back({detail::source_id(k)});
  }
  c.domain = AttributionDomain(DomainKind::training, std::move(sources));
  return c;
}

/// Five sources: src-0 and src-1 both carry fact A (with different filler),
/// src-2..src-4 carry facts B..D once each. Unit 0 asks for A.
inline Corpus duplicated_fact_corpus(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto facts = detail::draw_facts(rng, 4);
  std::vector<Source> sources;
  sources.emplace_back(detail::source_id(0), detail::fact_source_text(rng, facts[0]));
  sources.emplace_back(detail::source_id(1), detail::fact_source_text(rng, facts[0]));
  for (std::size_t k = 1; k < 4; ++k)
    sources.emplace_back(detail::source_id(k + 1), detail::fact_source_text(rng, facts[k]));
  Corpus c;
  c.units.push_back(detail::fact_unit(facts[0], kCorpusEpoch));
  c.fact_sources.push_back({detail::source_id(0), detail::source_id(1)});
  for (std::size_t k = 1; k < 4; ++k) {
    c.units.push_back(detail::fact_unit(facts[k], kCorpusEpoch + static_cast<std::int64_t>(k)));
    c.fact_sources.push_back({detail::source_id(k + 1)});
  }
  c.domain = AttributionDomain(DomainKind::training, std::move(sources));
  return c;
}

/// A unique-fact corpus of n sources plus a verbatim copy of each
/// ("src-k-copy"), so every fact is carried twice.
inline Corpus redundancy_corpus(std::uint64_t seed, std::size_t n = 4) {
  Corpus base = unique_fact_corpus(seed, n);
  std::vector<Source> sources = base.domain.sources();
  for (const auto& s : base.domain.sources()) sources.emplace_back(s.id() + "-copy", s.text(), s.meta());
  for (auto& ids : base.fact_sources) ids.push_back(ids.front() + "-copy");
  base.domain = AttributionDomain(DomainKind::training, std::move(sources));
  return base;
}

/// Sources sampled from a random sparse Markov chain over tokens w00..w{V-1};
/// one unit whose span follows the same chain from a random start token.
inline Corpus random_markov_corpus(std::uint64_t seed, std::size_t vocab_size = 12,
                                   std::size_t n_sources = 32, std::size_t min_len = 4,
                                   std::size_t max_len = 9, std::size_t span_len = 3) {
  if (vocab_size < 2 || n_sources < 1 || min_len < 2 || max_len < min_len || span_len < 1) {
    throw parameter_error("invalid random corpus shape");
  }
  std::mt19937_64 rng(seed);
  auto name = [](std::size_t k) { return (k < 10 ? "w0" : "w") + std::to_string(k); };
  // Each token prefers three successors with random weights.
  std::vector<std::discrete_distribution<std::size_t>> next;
  std::uniform_int_distribution<std::size_t> tok(0, vocab_size - 1);
  std::uniform_real_distribution<double> unit(0.2, 1.0);
  for (std::size_t a = 0; a < vocab_size; ++a) {
    std::vector<double> w(vocab_size, 0.0);
    for (int k = 0; k < 3; ++k) w[tok(rng)] += unit(rng);
    next.emplace_back(w.begin(), w.end());
  }
  auto walk = [&](std::size_t start, std::size_t len) {
    TokenSeq t{name(start)};
    std::size_t cur = start;
    while (t.size() < len) {
      cur = next[cur](rng);
      t.push_back(name(cur));
    }
    return t;
  };
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::vector<Source> sources;
  for (std::size_t k = 0; k < n_sources; ++k) {
    sources.emplace_back("doc-" + std::string(k < 10 ? "0" : "") + std::to_string(k),
                         walk(tok(rng), len(rng)));
  }
  // The span starts after a query token that occurs in the corpus.
  const auto& pick = sources[std::uniform_int_distribution<std::size_t>(0, n_sources - 1)(rng)];
  std::size_t start = static_cast<std::size_t>(std::stoul(pick.text().front().substr(1)));
  TokenSeq path = walk(start, span_len + 1);
  Query q({"continue", path.front()}, kCorpusEpoch);
  TokenSeq y(path.begin() + 1, path.end());
  Corpus c;
  c.units.emplace_back(std::move(q), ModelOutput{std::move(y)}, 0, span_len);
  c.fact_sources.emplace_back();
  c.domain = AttributionDomain(DomainKind::training, std::move(sources));
  return c;
}

}  // namespace attrib
