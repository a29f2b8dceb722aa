#pragma once

// Properties of attribution sets and systems: coverage, precision, recall,
// r-relevancy, consistency (mean pairwise Jaccard distance) and efficiency
// counters.

#include <sys/resource.h>

#include <chrono>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrib/core.hpp"

namespace attrib {

/// Fraction of units with at least one attribution the oracle also accepts at alpha.
template <Evaluator F>
double coverage(const AttributionSet& candidate, std::span<const AttributableUnit> units,
                const AttributionDomain& domain, const F& oracle, double alpha) {
  if (units.empty()) throw undefined_metric_error("coverage is undefined over zero units");
  std::size_t covered = 0;
  for (std::size_t u = 0; u < units.size(); ++u) {
    for (const auto& id : candidate.sources_for(u)) {
      const Source* s = domain.find(id);
      if (!s) throw comparability_error("attribution names source '" + id + "' outside the domain");
      if (detail::score_pair(oracle, units[u], u, *s, "oracle") >= alpha) {
        ++covered;
        break;
      }
    }
  }
  return static_cast<double>(covered) / static_cast<double>(units.size());
}

/// Fraction of candidate pairs the oracle accepts at alpha; 1.0 for an empty candidate.
template <Evaluator F>
double precision(const AttributionSet& candidate, std::span<const AttributableUnit> units,
                 const AttributionDomain& domain, const F& oracle, double alpha) {
  if (candidate.empty()) return 1.0;
  std::size_t valid = 0;
  for (const auto& a : candidate.attributions()) {
    if (a.unit_ref >= units.size()) {
      throw comparability_error("attribution references unit " + std::to_string(a.unit_ref) +
                                " beyond the unit list");
    }
    const Source* s = domain.find(a.source_id);
    if (!s) {
      throw comparability_error("attribution names source '" + a.source_id +
                                "' outside the domain");
    }
    if (detail::score_pair(oracle, units[a.unit_ref], a.unit_ref, *s, "oracle") >= alpha) ++valid;
  }
  return static_cast<double>(valid) / static_cast<double>(candidate.size());
}

/// |{s : (z, s) in candidate}| / |S'(z)| with S'(z) = {s : oracle(z, s) >= alpha};
/// nullopt when S'(z) is empty.
template <Evaluator F>
std::optional<double> recall(const AttributionSet& candidate, std::size_t unit_ref,
                             const AttributableUnit& z, const AttributionDomain& domain,
                             const F& oracle, double alpha) {
  std::size_t relevant = 0;
  std::size_t found = 0;
  for (const auto& s : domain.sources()) {
    if (detail::score_pair(oracle, z, unit_ref, s, "oracle") >= alpha) {
      ++relevant;
      if (candidate.contains(unit_ref, s.id())) ++found;
    }
  }
  if (relevant == 0) return std::nullopt;
  return static_cast<double>(found) / static_cast<double>(relevant);
}

/// Fraction of candidate pairs with phi(z, s) >= r; nullopt for an empty candidate.
template <Evaluator Phi>
std::optional<double> r_relevancy(const AttributionSet& candidate,
                                  std::span<const AttributableUnit> units,
                                  const AttributionDomain& domain, const Phi& phi, double r) {
  if (!(r >= 0.0 && r <= 1.0)) throw parameter_error("relevance threshold r must lie in [0, 1]");
  if (candidate.empty()) return std::nullopt;
  std::size_t passing = 0;
  for (const auto& a : candidate.attributions()) {
    if (a.unit_ref >= units.size()) {
      throw comparability_error("attribution references unit " + std::to_string(a.unit_ref) +
                                " beyond the unit list");
    }
    const Source* s = domain.find(a.source_id);
    if (!s) {
      throw comparability_error("attribution names source '" + a.source_id +
                                "' outside the domain");
    }
    if (detail::score_pair(phi, units[a.unit_ref], a.unit_ref, *s, "relevance function") >= r)
      ++passing;
  }
  return static_cast<double>(passing) / static_cast<double>(candidate.size());
}

using PairKey = std::pair<std::size_t, std::string>;

inline std::set<PairKey> pair_keys(const AttributionSet& set) {
  std::set<PairKey> out;
  for (const auto& a : set.attributions()) out.emplace(a.unit_ref, a.source_id);
  return out;
}

/// 1 - |A n B| / |A u B|; two empty sets are at distance 0.
template <class T>
double jaccard_distance(const std::set<T>& a, const std::set<T>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& x : a)
    if (b.count(x)) ++inter;
  std::size_t uni = a.size() + b.size() - inter;
  return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

inline double jaccard_distance(const AttributionSet& a, const AttributionSet& b) {
  return jaccard_distance(pair_keys(a), pair_keys(b));
}

struct ConsistencyResult {
  double mean = 0.0;
  std::size_t runs = 0;
  struct Pair {
    std::size_t a;
    std::size_t b;
    double distance;
  };
  std::vector<Pair> pairs;
};

/// Mean Jaccard distance over all run pairs; runs must share their scope.
inline ConsistencyResult consistency(std::span<const AttributionSet> runs) {
  if (runs.size() < 2) throw parameter_error("consistency needs at least two runs");
  for (const auto& r : runs) {
    if (r.scope() != runs.front().scope()) {
      throw comparability_error("runs were built over different units or domains");
    }
  }
  ConsistencyResult out;
  out.runs = runs.size();
  std::vector<std::set<PairKey>> keys;
  for (const auto& r : runs) keys.push_back(pair_keys(r));
  double sum = 0.0;
  for (std::size_t a = 0; a < runs.size(); ++a) {
    for (std::size_t b = a + 1; b < runs.size(); ++b) {
      double d = jaccard_distance(keys[a], keys[b]);
      out.pairs.push_back({a, b, d});
      sum += d;
    }
  }
  out.mean = sum / static_cast<double>(out.pairs.size());
  return out;
}

// ---------------------------------------------------------------------------
// Efficiency

struct PhaseCounters {
  std::string label;
  double wall_seconds = 0.0;
  std::size_t entries = 0;
  long peak_rss_kb = 0;
};

inline long peak_rss_kb() {
  rusage usage{};
  if (::getrusage(RUSAGE_SELF, &usage) != 0) return 0;
  return usage.ru_maxrss;
}

/// Labelled phase counters in declaration order. Labels are declared on first
/// use (or up front with declare()); a declared but unentered phase stays at zero.
class EfficiencyRecorder {
 public:
  class Scope {
   public:
    Scope(EfficiencyRecorder& rec, std::size_t slot)
        : rec_(&rec), slot_(slot), start_(std::chrono::steady_clock::now()) {}
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    ~Scope() {
      auto& p = rec_->phases_[slot_];
      p.wall_seconds +=
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
      ++p.entries;
      p.peak_rss_kb = std::max(p.peak_rss_kb, peak_rss_kb());
    }

   private:
    EfficiencyRecorder* rec_;
    std::size_t slot_;
    std::chrono::steady_clock::time_point start_;
  };

  std::size_t declare(const std::string& label) {
    for (std::size_t k = 0; k < phases_.size(); ++k)
      if (phases_[k].label == label) return k;
    phases_.push_back({label});
    return phases_.size() - 1;
  }

  [[nodiscard]] Scope scope(const std::string& label) { return Scope(*this, declare(label)); }

  const std::vector<PhaseCounters>& phases() const noexcept { return phases_; }

  const PhaseCounters* find(const std::string& label) const {
    for (const auto& p : phases_)
      if (p.label == label) return &p;
    return nullptr;
  }

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : phases_) {
      out.push_back({{"phase", p.label},
                     {"wall_seconds", p.wall_seconds},
                     {"entries", p.entries},
                     {"peak_rss_kb", p.peak_rss_kb}});
    }
    return out;
  }

 private:
  std::vector<PhaseCounters> phases_;
};

// ---------------------------------------------------------------------------
// Report

struct MetricReport {
  std::optional<double> coverage;
  std::optional<double> precision;
  /// Per unit; nullopt marks a unit whose oracle-valid set is empty.
  std::vector<std::optional<double>> recall;
  std::optional<double> r_relevancy;
  std::optional<ConsistencyResult> consistency;
  std::vector<PhaseCounters> efficiency;

  nlohmann::json to_json(bool include_efficiency = true) const {
    auto opt = [](const std::optional<double>& v) -> nlohmann::json {
      return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    nlohmann::json j;
    j["coverage"] = opt(coverage);
    j["precision"] = opt(precision);
    nlohmann::json rec = nlohmann::json::array();
    for (const auto& r : recall) rec.push_back(opt(r));
    j["recall"] = rec;
    j["r_relevancy"] = opt(r_relevancy);
    if (consistency) {
      nlohmann::json pairs = nlohmann::json::array();
      for (const auto& p : consistency->pairs)
        pairs.push_back({{"a", p.a}, {"b", p.b}, {"distance", p.distance}});
      j["consistency"] = {{"mean_jaccard_distance", consistency->mean},
                          {"runs", consistency->runs},
                          {"pairs", pairs}};
    } else {
      j["consistency"] = nullptr;
    }
    if (include_efficiency) {
      nlohmann::json eff = nlohmann::json::array();
      for (const auto& p : efficiency) {
        eff.push_back({{"phase", p.label},
                       {"wall_seconds", p.wall_seconds},
                       {"entries", p.entries},
                       {"peak_rss_kb", p.peak_rss_kb}});
      }
      j["efficiency"] = eff;
    }
    j["conventions"] = {{"empty_candidate_precision", 1.0},
                        {"empty_valid_set_recall", "not-applicable"},
                        {"empty_candidate_r_relevancy", "not-applicable"}};
    return j;
  }
};

}  // namespace attrib
