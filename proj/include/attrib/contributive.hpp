#pragma once

// Contributive evaluators over a training domain:
//
//   ccl_loo            exact leave-one-out loss change (counterfactual contribution to loss)
//   influence_estimate first-order influence-function approximation of the same quantity
//   tracin_ideal/_dot  loss change accumulated over the training trajectory
//   shapley_exact/_mc  Data Shapley values under utility -L(M_S, z)
//   cco_*              counterfactual contribution to output: does the model retrained
//                      without s still produce (or entail) the span?
//
// Raw scores keep their native sign and scale; `normalized` maps them into
// [0, 1] by per-(unit, method) min-max scaling. CCO scores are already
// binary and are passed through unchanged.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "attrib/core.hpp"
#include "attrib/corroborative.hpp"
#include "attrib/tinylm.hpp"

namespace attrib {

enum class Method {
  loo,
  influence,
  tracin_ideal,
  tracin_dot,
  shapley_exact,
  shapley_mc,
  cco_exact_match,
  cco_textual_entailment,
};

inline std::string_view to_string(Method m) noexcept {
  switch (m) {
    case Method::loo: return "loo";
    case Method::influence: return "influence";
    case Method::tracin_ideal: return "tracin-ideal";
    case Method::tracin_dot: return "tracin-dot";
    case Method::shapley_exact: return "shapley-exact";
    case Method::shapley_mc: return "shapley-mc";
    case Method::cco_exact_match: return "cco-em";
    case Method::cco_textual_entailment: return "cco-te";
  }
  return "unknown";
}

inline Method method_from_string(std::string_view s) {
  for (auto m : {Method::loo, Method::influence, Method::tracin_ideal, Method::tracin_dot,
                 Method::shapley_exact, Method::shapley_mc, Method::cco_exact_match,
                 Method::cco_textual_entailment}) {
    if (to_string(m) == s) return m;
  }
  throw parameter_error("unknown contributive method '" + std::string(s) + "'");
}

inline bool is_binary(Method m) noexcept {
  return m == Method::cco_exact_match || m == Method::cco_textual_entailment;
}

struct ScoreEntry {
  std::string source_id;
  double raw = 0.0;
  double normalized = 0.0;
  std::optional<double> standard_error;
};

class ContributiveScoreTable {
 public:
  ContributiveScoreTable(std::size_t unit_ref, Method method,
                         const std::map<std::string, double>& raw,
                         const std::map<std::string, double>& standard_errors = {})
      : unit_ref_(unit_ref), method_(method) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& [id, r] : raw) {
      lo = std::min(lo, r);
      hi = std::max(hi, r);
    }
    for (const auto& [id, r] : raw) {
      ScoreEntry e{id, r, 0.0, std::nullopt};
      if (is_binary(method)) {
        e.normalized = r;
      } else if (hi > lo) {
        e.normalized = std::clamp((r - lo) / (hi - lo), 0.0, 1.0);
      } else {
        e.normalized = 0.5;
      }
      if (auto it = standard_errors.find(id); it != standard_errors.end()) e.standard_error = it->second;
      entries_.push_back(std::move(e));
    }
  }

  std::size_t unit_ref() const noexcept { return unit_ref_; }
  Method method() const noexcept { return method_; }
  const std::vector<ScoreEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  const ScoreEntry& at(std::string_view id) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), id,
                               [](const ScoreEntry& e, std::string_view k) { return e.source_id < k; });
    if (it == entries_.end() || it->source_id != id) {
      throw parameter_error("no score for source '" + std::string(id) + "'");
    }
    return *it;
  }
  double raw(std::string_view id) const { return at(id).raw; }
  double normalized(std::string_view id) const { return at(id).normalized; }

  double raw_sum() const {
    double s = 0.0;
    for (const auto& e : entries_) s += e.raw;
    return s;
  }

  /// Source ids by descending raw score, ties by ascending id.
  std::vector<std::string> ranking() const {
    std::vector<const ScoreEntry*> order;
    for (const auto& e : entries_) order.push_back(&e);
    std::stable_sort(order.begin(), order.end(),
                     [](const ScoreEntry* a, const ScoreEntry* b) { return a->raw > b->raw; });
    std::vector<std::string> out;
    for (const auto* e : order) out.push_back(e->source_id);
    return out;
  }

  std::string argmax() const {
    if (entries_.empty()) throw parameter_error("empty score table");
    return ranking().front();
  }

  std::optional<std::size_t> permutations;
  std::optional<std::uint64_t> seed;

 private:
  std::size_t unit_ref_;
  Method method_;
  std::vector<ScoreEntry> entries_;  // sorted by source id (std::map order)
};

inline std::vector<nlohmann::json> to_json_rows(const ContributiveScoreTable& t) {
  std::vector<nlohmann::json> rows;
  for (const auto& e : t.entries()) {
    nlohmann::json r = {{"unit_ref", t.unit_ref()},
                        {"method", to_string(t.method())},
                        {"source_id", e.source_id},
                        {"raw", e.raw},
                        {"normalized", e.normalized}};
    if (t.method() == Method::shapley_mc) {
      r["stderr"] = e.standard_error.value_or(0.0);
      r["permutations"] = t.permutations.value_or(0);
      r["seed"] = t.seed.value_or(0);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace detail {

inline std::vector<std::string> resolve_candidates(const AttributionDomain& domain,
                                                   std::span<const std::string> candidates) {
  if (candidates.empty()) return domain.ids();
  std::vector<std::string> out;
  for (const auto& id : candidates) {
    domain.at(id);
    if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
  }
  return out;
}

inline void require_counterfactual_domain(const AttributionDomain& domain, std::string_view op) {
  domain.require_training(op);
  if (domain.size() < 2) {
    throw empty_domain_error(std::string(op) +
                             ": removing the only source would leave an empty training set");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Counterfactual contribution to loss

/// raw(s) = L(M_{D\s}, z) - L(M_D, z), computed by actually refitting.
/// One table per unit; the counterfactual models are shared across units.
template <RetrainableBackend B>
std::vector<ContributiveScoreTable> ccl_loo(const B& backend, const typename B::model_type& full,
                                            const AttributionDomain& domain,
                                            std::span<const AttributableUnit> units,
                                            std::span<const std::string> candidates = {}) {
  detail::require_counterfactual_domain(domain, "ccl_loo");
  auto ids = detail::resolve_candidates(domain, candidates);
  std::vector<double> base;
  for (const auto& z : units) base.push_back(backend.loss(full, z));
  std::vector<std::map<std::string, double>> raw(units.size());
  for (const auto& id : ids) {
    std::vector<std::string> excluded{id};
    auto cf = backend.without(full, domain, excluded);
    for (std::size_t u = 0; u < units.size(); ++u) raw[u][id] = backend.loss(cf, units[u]) - base[u];
  }
  std::vector<ContributiveScoreTable> out;
  for (std::size_t u = 0; u < units.size(); ++u) out.emplace_back(u, Method::loo, raw[u]);
  return out;
}

template <RetrainableBackend B>
ContributiveScoreTable ccl_loo(const B& backend, const AttributionDomain& domain,
                               const AttributableUnit& z,
                               std::span<const std::string> candidates = {}) {
  detail::require_counterfactual_domain(domain, "ccl_loo");
  auto full = backend.fit(domain);
  return ccl_loo(backend, full, domain, std::span<const AttributableUnit>(&z, 1), candidates).front();
}

// ---------------------------------------------------------------------------
// Influence functions

/// raw(s) = grad L(z)^T (H + damping I)^{-1} grad L_s / N, where H is the
/// Hessian of the training objective at `model` and L_s the loss of source s.
/// Approximates the leave-one-out loss change.
inline std::vector<ContributiveScoreTable> influence_estimate(
    const SoftmaxBigramModel& model, const AttributionDomain& domain,
    std::span<const AttributableUnit> units, double damping,
    std::span<const std::string> candidates = {}, std::size_t dense_limit = kDefaultDenseLimit) {
  domain.require_training("influence_estimate");
  if (domain.empty()) throw empty_domain_error("influence_estimate needs training data");
  if (!(damping >= 0.0) || !std::isfinite(damping)) {
    throw parameter_error("damping must be a non-negative finite number");
  }
  auto ids = detail::resolve_candidates(domain, candidates);

  Eigen::MatrixXd h = hessian(model, domain, dense_limit);
  h.diagonal().array() += damping;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
  const Eigen::VectorXd d = ldlt.vectorD();
  const double scale = std::max(1.0, d.cwiseAbs().maxCoeff());
  if (ldlt.info() != Eigen::Success || d.minCoeff() <= 1e-12 * scale) {
    throw singular_system_error("Hessian system is singular at damping " + std::to_string(damping) +
                                "; use a positive damping");
  }

  const double inv_n = 1.0 / static_cast<double>(domain.size());
  std::vector<Eigen::VectorXd> source_grads;
  for (const auto& id : ids) {
    auto g = source_grad(model, domain.at(id));
    source_grads.push_back(Eigen::Map<Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(g.size())));
  }
  std::vector<ContributiveScoreTable> out;
  for (std::size_t u = 0; u < units.size(); ++u) {
    auto gz = grad(model, units[u]);
    Eigen::VectorXd solved =
        ldlt.solve(Eigen::Map<Eigen::VectorXd>(gz.data(), static_cast<Eigen::Index>(gz.size())));
    std::map<std::string, double> raw;
    for (std::size_t k = 0; k < ids.size(); ++k) raw[ids[k]] = inv_n * solved.dot(source_grads[k]);
    out.emplace_back(u, Method::influence, raw);
  }
  return out;
}

inline ContributiveScoreTable influence_estimate(const SoftmaxBigramModel& model,
                                                 const AttributionDomain& domain,
                                                 const AttributableUnit& z, double damping = 1e-3,
                                                 std::span<const std::string> candidates = {}) {
  return influence_estimate(model, domain, std::span<const AttributableUnit>(&z, 1), damping,
                            candidates)
      .front();
}

// ---------------------------------------------------------------------------
// TracIn

namespace detail {

inline void check_checkpoint_order(std::span<const Checkpoint> ckpts) {
  if (ckpts.empty()) throw parameter_error("no checkpoints");
  for (std::size_t k = 1; k < ckpts.size(); ++k) {
    if (ckpts[k].step <= ckpts[k - 1].step) throw parameter_error("checkpoint steps must increase");
  }
}

inline std::map<std::string, double> zero_scores(const SoftmaxBigramModel& model,
                                                 std::span<const std::string> candidates) {
  std::map<std::string, double> raw;
  if (candidates.empty()) {
    for (const auto& id : model.trained_on()) raw[id] = 0.0;
  } else {
    for (const auto& id : candidates) raw[id] = 0.0;
  }
  return raw;
}

}  // namespace detail

/// raw(s) = sum over steps t whose batch is {s} of L(theta_{t-1}, z) - L(theta_t, z).
/// Needs every step checkpointed with single-source batches.
inline std::vector<ContributiveScoreTable> tracin_ideal(const SoftmaxBigramModel& model,
                                                        std::span<const Checkpoint> ckpts,
                                                        std::span<const AttributableUnit> units,
                                                        std::span<const std::string> candidates = {}) {
  detail::check_checkpoint_order(ckpts);
  for (std::size_t k = 1; k < ckpts.size(); ++k) {
    if (ckpts[k].step != ckpts[k - 1].step + 1) {
      throw mode_error("tracin ideal mode needs a checkpoint at every step (stride 1)");
    }
    if (ckpts[k].batch.size() != 1) {
      throw mode_error("tracin ideal mode needs batch size 1");
    }
  }
  std::vector<std::map<std::string, double>> raw(units.size(), detail::zero_scores(model, candidates));
  std::vector<double> prev(units.size());
  {
    auto m0 = model.with_weights(ckpts.front().params);
    for (std::size_t u = 0; u < units.size(); ++u) prev[u] = loss(m0, units[u]);
  }
  for (std::size_t k = 1; k < ckpts.size(); ++k) {
    auto mt = model.with_weights(ckpts[k].params);
    const std::string& id = ckpts[k].batch.front();
    for (std::size_t u = 0; u < units.size(); ++u) {
      double cur = loss(mt, units[u]);
      if (auto it = raw[u].find(id); it != raw[u].end()) it->second += prev[u] - cur;
      prev[u] = cur;
    }
  }
  std::vector<ContributiveScoreTable> out;
  for (std::size_t u = 0; u < units.size(); ++u) out.emplace_back(u, Method::tracin_ideal, raw[u]);
  return out;
}

/// raw(s) = sum over saved checkpoints t with s in B_t of
/// eta_t * grad L(z; theta_t) . grad L_s(theta_t).
inline std::vector<ContributiveScoreTable> tracin_dot(const SoftmaxBigramModel& model,
                                                      std::span<const Checkpoint> ckpts,
                                                      const AttributionDomain& domain,
                                                      std::span<const AttributableUnit> units,
                                                      std::span<const std::string> candidates = {}) {
  detail::check_checkpoint_order(ckpts);
  std::vector<std::map<std::string, double>> raw(units.size(), detail::zero_scores(model, candidates));
  for (std::size_t k = 1; k < ckpts.size(); ++k) {
    auto mt = model.with_weights(ckpts[k].params);
    std::vector<std::vector<double>> gz;
    for (const auto& z : units) gz.push_back(grad(mt, z));
    for (const auto& id : ckpts[k].batch) {
      if (!raw.empty() && !raw.front().count(id)) continue;
      auto gs = source_grad(mt, domain.at(id));
      for (std::size_t u = 0; u < units.size(); ++u) {
        double dot = 0.0;
        for (std::size_t p = 0; p < gs.size(); ++p) dot += gz[u][p] * gs[p];
        raw[u][id] += ckpts[k].learning_rate * dot;
      }
    }
  }
  std::vector<ContributiveScoreTable> out;
  for (std::size_t u = 0; u < units.size(); ++u) out.emplace_back(u, Method::tracin_dot, raw[u]);
  return out;
}

// ---------------------------------------------------------------------------
// Data Shapley

inline constexpr std::size_t kShapleyExactCap = 12;

namespace detail {

// Model trained on background plus the chosen players; the empty coalition
// gets the backend's no-data (uniform) model.
template <RetrainableBackend B>
std::vector<double> coalition_losses(const B& backend, const AttributionDomain& domain,
                                     const std::vector<std::string>& background,
                                     const std::vector<std::string>& members,
                                     std::span<const AttributableUnit> units) {
  std::vector<std::string> ids = background;
  ids.insert(ids.end(), members.begin(), members.end());
  std::vector<double> out;
  if (ids.empty()) {
    auto m = backend.empty_model();
    for (const auto& z : units) out.push_back(backend.loss(m, z));
  } else {
    auto m = backend.fit(domain.restricted_to(ids));
    for (const auto& z : units) out.push_back(backend.loss(m, z));
  }
  return out;
}

inline std::vector<std::string> background_of(const AttributionDomain& domain,
                                              const std::vector<std::string>& players) {
  std::vector<std::string> bg;
  for (const auto& id : domain.ids())
    if (std::find(players.begin(), players.end(), id) == players.end()) bg.push_back(id);
  return bg;
}

}  // namespace detail

/// Exact Shapley values by enumerating all 2^n coalitions of the candidate
/// sources (non-candidates stay in every coalition):
///   phi(s) = sum_{S without s} [L(M_S, z) - L(M_{S+s}, z)] / (n * C(n-1, |S|)).
template <RetrainableBackend B>
std::vector<ContributiveScoreTable> shapley_exact(const B& backend, const AttributionDomain& domain,
                                                  std::span<const AttributableUnit> units,
                                                  std::span<const std::string> candidates = {}) {
  domain.require_training("shapley_exact");
  auto players = detail::resolve_candidates(domain, candidates);
  const std::size_t n = players.size();
  if (n == 0) throw empty_domain_error("shapley_exact needs at least one source");
  if (n > kShapleyExactCap) {
    throw mode_error("shapley_exact enumerates 2^n coalitions and is capped at n = " +
                     std::to_string(kShapleyExactCap) + "; use shapley_mc");
  }
  const auto background = detail::background_of(domain, players);
  const std::size_t masks = std::size_t{1} << n;
  std::vector<std::vector<double>> losses(masks);
  for (std::size_t mask = 0; mask < masks; ++mask) {
    std::vector<std::string> members;
    for (std::size_t k = 0; k < n; ++k)
      if (mask & (std::size_t{1} << k)) members.push_back(players[k]);
    losses[mask] = detail::coalition_losses(backend, domain, background, members, units);
  }
  // weight(k) = k! (n-k-1)! / n!
  std::vector<double> weight(n);
  for (std::size_t k = 0; k < n; ++k) {
    double binom = 1.0;
    for (std::size_t t = 1; t <= k; ++t)
      binom = binom * static_cast<double>(n - 1 - k + t) / static_cast<double>(t);
    weight[k] = 1.0 / (static_cast<double>(n) * binom);
  }
  std::vector<ContributiveScoreTable> out;
  for (std::size_t u = 0; u < units.size(); ++u) {
    std::map<std::string, double> raw;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t bit = std::size_t{1} << k;
      double phi = 0.0;
      for (std::size_t mask = 0; mask < masks; ++mask) {
        if (mask & bit) continue;
        phi += weight[static_cast<std::size_t>(std::popcount(mask))] *
               (losses[mask][u] - losses[mask | bit][u]);
      }
      raw[players[k]] = phi;
    }
    out.emplace_back(u, Method::shapley_exact, raw);
  }
  return out;
}

template <RetrainableBackend B>
ContributiveScoreTable shapley_exact(const B& backend, const AttributionDomain& domain,
                                     const AttributableUnit& z,
                                     std::span<const std::string> candidates = {}) {
  return shapley_exact(backend, domain, std::span<const AttributableUnit>(&z, 1), candidates).front();
}

/// Permutation-sampling Shapley estimate with per-source standard errors
/// (sample std-dev of marginal contributions / sqrt(permutations)).
template <RetrainableBackend B>
std::vector<ContributiveScoreTable> shapley_mc(const B& backend, const AttributionDomain& domain,
                                               std::span<const AttributableUnit> units,
                                               std::size_t permutations, std::uint64_t seed,
                                               std::span<const std::string> candidates = {}) {
  domain.require_training("shapley_mc");
  if (permutations < 2) throw parameter_error("shapley_mc needs at least 2 permutations");
  auto players = detail::resolve_candidates(domain, candidates);
  const std::size_t n = players.size();
  if (n == 0) throw empty_domain_error("shapley_mc needs at least one source");
  const auto background = detail::background_of(domain, players);
  const auto empty_losses = detail::coalition_losses(backend, domain, background, {}, units);

  // Welford accumulators per (unit, player).
  std::vector<std::vector<double>> mean(units.size(), std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> m2(units.size(), std::vector<double>(n, 0.0));
  detail::SplitRng rng(seed);
  std::vector<std::size_t> order(n);
  for (std::size_t p = 0; p < permutations; ++p) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::vector<std::string> members;
    auto prev = empty_losses;
    for (std::size_t k : order) {
      members.push_back(players[k]);
      auto cur = detail::coalition_losses(backend, domain, background, members, units);
      for (std::size_t u = 0; u < units.size(); ++u) {
        double x = prev[u] - cur[u];
        double delta = x - mean[u][k];
        mean[u][k] += delta / static_cast<double>(p + 1);
        m2[u][k] += delta * (x - mean[u][k]);
      }
      prev = std::move(cur);
    }
  }
  std::vector<ContributiveScoreTable> out;
  const double np = static_cast<double>(permutations);
  for (std::size_t u = 0; u < units.size(); ++u) {
    std::map<std::string, double> raw, se;
    for (std::size_t k = 0; k < n; ++k) {
      raw[players[k]] = mean[u][k];
      se[players[k]] = std::sqrt(m2[u][k] / (np - 1.0) / np);
    }
    ContributiveScoreTable t(u, Method::shapley_mc, raw, se);
    t.permutations = permutations;
    t.seed = seed;
    out.push_back(std::move(t));
  }
  return out;
}

template <RetrainableBackend B>
ContributiveScoreTable shapley_mc(const B& backend, const AttributionDomain& domain,
                                  const AttributableUnit& z, std::size_t permutations,
                                  std::uint64_t seed, std::span<const std::string> candidates = {}) {
  return shapley_mc(backend, domain, std::span<const AttributableUnit>(&z, 1), permutations, seed,
                    candidates)
      .front();
}

// ---------------------------------------------------------------------------
// Counterfactual contribution to output

namespace detail {

template <RetrainableBackend B, class Corroborates>
std::vector<ContributiveScoreTable> cco(const B& backend, const typename B::model_type& full,
                                        const AttributionDomain& domain,
                                        std::span<const AttributableUnit> units,
                                        std::size_t max_len, std::span<const std::string> candidates,
                                        Method method, Corroborates&& corroborates) {
  require_counterfactual_domain(domain, to_string(method));
  if (max_len < 1) throw parameter_error("max_len must be at least 1");
  auto ids = resolve_candidates(domain, candidates);
  std::vector<std::map<std::string, double>> raw(units.size());
  for (const auto& id : ids) {
    std::vector<std::string> excluded{id};
    auto cf = backend.without(full, domain, excluded);
    for (std::size_t u = 0; u < units.size(); ++u) {
      ModelOutput y_cf = backend.decode(cf, units[u].query(), max_len);
      raw[u][id] = corroborates(u, Source::from_output(y_cf)) ? 0.0 : 1.0;
    }
  }
  std::vector<ContributiveScoreTable> out;
  for (std::size_t u = 0; u < units.size(); ++u) out.emplace_back(u, method, raw[u]);
  return out;
}

}  // namespace detail

/// 1 iff the span is NOT reproduced word-for-word in the output decoded from
/// the same query by the model retrained without s.
template <RetrainableBackend B>
std::vector<ContributiveScoreTable> cco_exact_match(const B& backend,
                                                    const typename B::model_type& full,
                                                    const AttributionDomain& domain,
                                                    std::span<const AttributableUnit> units,
                                                    std::size_t max_len,
                                                    std::span<const std::string> candidates = {}) {
  return detail::cco(backend, full, domain, units, max_len, candidates, Method::cco_exact_match,
                     [&](std::size_t u, const Source& y_cf) {
                       return eval_exact_match(units[u], y_cf) == 1;
                     });
}

template <RetrainableBackend B>
ContributiveScoreTable cco_exact_match(const B& backend, const AttributionDomain& domain,
                                       const AttributableUnit& z, std::size_t max_len,
                                       std::span<const std::string> candidates = {}) {
  detail::require_counterfactual_domain(domain, "cco-em");
  auto full = backend.fit(domain);
  return cco_exact_match(backend, full, domain, std::span<const AttributableUnit>(&z, 1), max_len,
                         candidates)
      .front();
}

/// 1 iff the counterfactual output no longer passes the entailment proxy for
/// the span's content tokens. The counterfactual output answers the same
/// query, so the query is shared context and does not augment the claim.
template <RetrainableBackend B>
std::vector<ContributiveScoreTable> cco_textual_entailment(
    const B& backend, const typename B::model_type& full, const AttributionDomain& domain,
    std::span<const AttributableUnit> units, const EntailmentConfig& cfg, std::size_t max_len,
    std::span<const std::string> candidates = {}) {
  cfg.validate();
  std::vector<std::vector<std::string>> claims;
  for (const auto& z : units) {
    claims.push_back(content_tokens(z.span_tokens(), cfg));
    if (claims.back().empty()) {
      throw degenerate_claim_error("unit span '" + join_tokens(z.span_tokens()) +
                                   "' carries no content tokens");
    }
  }
  return detail::cco(backend, full, domain, units, max_len, candidates,
                     Method::cco_textual_entailment, [&](std::size_t u, const Source& y_cf) {
                       return window_entails(claims[u], y_cf.text(), cfg) == 1;
                     });
}

template <RetrainableBackend B>
ContributiveScoreTable cco_textual_entailment(const B& backend, const AttributionDomain& domain,
                                              const AttributableUnit& z, const EntailmentConfig& cfg,
                                              std::size_t max_len,
                                              std::span<const std::string> candidates = {}) {
  detail::require_counterfactual_domain(domain, "cco-te");
  auto full = backend.fit(domain);
  return cco_textual_entailment(backend, full, domain, std::span<const AttributableUnit>(&z, 1),
                                cfg, max_len, candidates)
      .front();
}

}  // namespace attrib
