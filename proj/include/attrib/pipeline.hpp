#pragma once

// Experiment orchestration: ingestion, corroborative and contributive runs,
// fact tracing, memorization audit, and run-directory output.
//
// A run directory holds
//   attributions.jsonl  the attribution set
//   scores.jsonl        contributive score rows (empty for corroborative runs)
//   metrics.json        metrics, provenance and per-run details
//   report.txt          plain-text summary

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrib/contributive.hpp"
#include "attrib/core.hpp"
#include "attrib/corroborative.hpp"
#include "attrib/external.hpp"
#include "attrib/metrics.hpp"
#include "attrib/relevance.hpp"
#include "attrib/serialize.hpp"
#include "attrib/tinylm.hpp"

namespace attrib {

// ---------------------------------------------------------------------------
// Configuration

enum class BackendKind { count, sgd };
enum class EvaluatorKind { exact_match, valid_paraphrase, textual_entailment, external };
enum class RelevanceKind { none, tfidf, priority, min };
enum class AuditCriterion { joint, em_only, cco_only };

inline std::string_view to_string(BackendKind k) noexcept { return k == BackendKind::count ? "count" : "sgd"; }

inline std::string_view to_string(EvaluatorKind k) noexcept {
  switch (k) {
    case EvaluatorKind::exact_match: return "exact_match";
    case EvaluatorKind::valid_paraphrase: return "valid_paraphrase";
    case EvaluatorKind::textual_entailment: return "textual_entailment";
    case EvaluatorKind::external: return "external";
  }
  return "unknown";
}

inline std::string_view to_string(RelevanceKind k) noexcept {
  switch (k) {
    case RelevanceKind::none: return "none";
    case RelevanceKind::tfidf: return "tfidf";
    case RelevanceKind::priority: return "priority";
    case RelevanceKind::min: return "min";
  }
  return "unknown";
}

inline std::string_view to_string(AuditCriterion c) noexcept {
  switch (c) {
    case AuditCriterion::joint: return "joint";
    case AuditCriterion::em_only: return "em-only";
    case AuditCriterion::cco_only: return "cco-only";
  }
  return "unknown";
}

namespace detail {

template <class E, std::size_t N>
E parse_enum(std::string_view s, const E (&values)[N], std::string_view what) {
  for (E v : values)
    if (to_string(v) == s) return v;
  throw parameter_error("unknown " + std::string(what) + " '" + std::string(s) + "'");
}

}  // namespace detail

inline BackendKind backend_from_string(std::string_view s) {
  static constexpr BackendKind all[] = {BackendKind::count, BackendKind::sgd};
  return detail::parse_enum(s, all, "backend");
}
inline EvaluatorKind evaluator_from_string(std::string_view s) {
  static constexpr EvaluatorKind all[] = {EvaluatorKind::exact_match, EvaluatorKind::valid_paraphrase,
                                          EvaluatorKind::textual_entailment, EvaluatorKind::external};
  return detail::parse_enum(s, all, "evaluator");
}
inline RelevanceKind relevance_from_string(std::string_view s) {
  static constexpr RelevanceKind all[] = {RelevanceKind::none, RelevanceKind::tfidf,
                                          RelevanceKind::priority, RelevanceKind::min};
  return detail::parse_enum(s, all, "relevance function");
}
inline AuditCriterion audit_criterion_from_string(std::string_view s) {
  static constexpr AuditCriterion all[] = {AuditCriterion::joint, AuditCriterion::em_only,
                                           AuditCriterion::cco_only};
  return detail::parse_enum(s, all, "audit criterion");
}

struct EvaluatorSpec {
  EvaluatorKind kind = EvaluatorKind::exact_match;
  std::string paraphrase_path;
  double entailment_threshold = 1.0;
  std::size_t entailment_window = 16;
  bool entailment_query_context = true;
  std::string stopwords_path;
  std::string plugin_command;
  double plugin_timeout_seconds = 30.0;
};

struct ExperimentConfig {
  std::string corpus_path;
  std::string queries_path;
  DomainKind domain_kind = DomainKind::training;
  TokenizerConfig tokenizer;

  BackendKind backend = BackendKind::count;
  double lambda = 0.1;
  TrainConfig train;

  EvaluatorSpec evaluator;
  double alpha = 1.0;
  /// Oracle used for coverage / precision / recall; unset disables those metrics.
  std::optional<EvaluatorSpec> oracle;
  std::optional<double> oracle_alpha;

  RelevanceKind relevance = RelevanceKind::none;
  double r = 0.0;
  std::map<std::string, double> priority_weights;
  double priority_default = 0.5;

  Method method = Method::loo;
  double damping = 1e-3;
  std::size_t permutations = 200;
  std::uint64_t mc_seed = 0;
  std::size_t max_len = 8;
  std::size_t prefilter_k = 0;  // 0: score every source
  std::size_t runs = 1;
  bool vary_seed = false;

  std::size_t recall_k = 1;
  std::size_t baseline_shuffles = 1000;
  std::uint64_t baseline_seed = 0;
  AuditCriterion audit_criterion = AuditCriterion::joint;

  std::string output_dir;
  bool stable_output = false;

  /// Range checks that do not need the data. Path existence is checked when
  /// `check_paths` is set.
  void validate(bool check_paths = true) const {
    namespace fs = std::filesystem;
    if (check_paths) {
      for (const auto* p : {&corpus_path, &queries_path}) {
        if (p->empty()) throw parameter_error("corpus and queries paths are required");
        if (!fs::exists(*p)) throw parameter_error("path '" + *p + "' does not exist");
      }
      for (const auto* e : {&evaluator, oracle ? &*oracle : nullptr}) {
        if (!e) continue;
        for (const auto* p : {&e->paraphrase_path, &e->stopwords_path}) {
          if (!p->empty() && !fs::exists(*p)) throw parameter_error("path '" + *p + "' does not exist");
        }
      }
    }
    if (!(lambda > 0.0)) throw parameter_error("lambda must be positive");
    train.validate();
    for (const auto* e : {&evaluator, oracle ? &*oracle : nullptr}) {
      if (!e) continue;
      if (!(e->entailment_threshold >= 0.0 && e->entailment_threshold <= 1.0))
        throw parameter_error("entailment threshold must lie in [0, 1]");
      if (e->entailment_window < 1) throw parameter_error("entailment window must be at least 1");
      if (e->kind == EvaluatorKind::external && e->plugin_command.empty())
        throw parameter_error("external evaluator needs a plugin command");
      if (!(e->plugin_timeout_seconds > 0.0)) throw parameter_error("plugin timeout must be positive");
    }
    if (!std::isfinite(alpha)) throw parameter_error("alpha must be finite");
    if (!(r >= 0.0 && r <= 1.0)) throw parameter_error("relevance threshold r must lie in [0, 1]");
    PriorityWeights(priority_weights, priority_default);
    if (!(damping >= 0.0) || !std::isfinite(damping)) throw parameter_error("damping must be >= 0");
    if (max_len < 1) throw parameter_error("max_len must be at least 1");
    if (runs < 1) throw parameter_error("runs must be at least 1");
    if (recall_k < 1) throw parameter_error("recall@k needs k >= 1");
    if (baseline_shuffles < 1) throw parameter_error("baseline needs at least one shuffle");
    if (method == Method::shapley_mc && permutations < 2)
      throw parameter_error("shapley_mc needs at least 2 permutations");
    if (method == Method::shapley_exact && prefilter_k > kShapleyExactCap) {
      throw mode_error("prefilter k = " + std::to_string(prefilter_k) + " exceeds the exact Shapley cap of " +
                       std::to_string(kShapleyExactCap) + "; use shapley-mc or a smaller k");
    }
    bool needs_sgd = method == Method::influence || method == Method::tracin_ideal ||
                     method == Method::tracin_dot;
    if (needs_sgd && backend != BackendKind::sgd) {
      throw mode_error(std::string(to_string(method)) + " needs the sgd backend");
    }
    if (method == Method::tracin_ideal && (train.batch_size != 1 || train.checkpoint_stride != 1)) {
      throw mode_error("tracin-ideal needs batch size 1 and checkpoint stride 1");
    }
  }

  nlohmann::json to_json() const {
    auto eval_json = [](const EvaluatorSpec& e) {
      return nlohmann::json{{"kind", to_string(e.kind)},
                            {"paraphrase_path", e.paraphrase_path},
                            {"entailment_threshold", e.entailment_threshold},
                            {"entailment_window", e.entailment_window},
                            {"entailment_query_context", e.entailment_query_context},
                            {"stopwords_path", e.stopwords_path},
                            {"plugin_command", e.plugin_command},
                            {"plugin_timeout_seconds", e.plugin_timeout_seconds}};
    };
    return {{"corpus_path", corpus_path},
            {"queries_path", queries_path},
            {"domain_kind", to_string(domain_kind)},
            {"tokenizer",
             {{"case_fold", tokenizer.case_fold},
              {"punctuation", tokenizer.punctuation == PunctuationMode::remove ? "remove" : "separate"},
              {"keep_numeric_separators", tokenizer.keep_numeric_separators}}},
            {"backend", to_string(backend)},
            {"lambda", lambda},
            {"train", attrib::to_json(train)},
            {"evaluator", eval_json(evaluator)},
            {"alpha", alpha},
            {"oracle", oracle ? eval_json(*oracle) : nlohmann::json(nullptr)},
            {"oracle_alpha", oracle_alpha ? nlohmann::json(*oracle_alpha) : nlohmann::json(nullptr)},
            {"relevance", to_string(relevance)},
            {"r", r},
            {"priority_weights", priority_weights},
            {"priority_default", priority_default},
            {"method", to_string(method)},
            {"damping", damping},
            {"permutations", permutations},
            {"mc_seed", mc_seed},
            {"max_len", max_len},
            {"prefilter_k", prefilter_k},
            {"runs", runs},
            {"vary_seed", vary_seed},
            {"recall_k", recall_k},
            {"baseline_shuffles", baseline_shuffles},
            {"baseline_seed", baseline_seed},
            {"audit_criterion", to_string(audit_criterion)}};
  }

  /// FNV-1a over the canonical JSON form (output location excluded).
  std::string hash() const {
    detail::Fnv1a h;
    h.add(to_json().dump());
    return detail::hex64(h.value());
  }
};

// ---------------------------------------------------------------------------
// Ingestion

struct Inputs {
  AttributionDomain domain;
  std::vector<AttributableUnit> units;
};

inline AttributionDomain ingest_corpus(std::istream& in, DomainKind kind, const TokenizerConfig& tok = {}) {
  std::vector<Source> sources;
  std::map<std::string, std::size_t> first_line;
  for_each_jsonl(in, [&](const json& j, std::size_t lineno) {
    Source s = source_from_json(j, tok);
    auto [it, fresh] = first_line.emplace(s.id(), lineno);
    if (!fresh) {
      throw ingestion_error("duplicate source id '" + s.id() + "' (first seen on line " +
                                std::to_string(it->second) + ")",
                            lineno);
    }
    sources.push_back(std::move(s));
  });
  return AttributionDomain(kind, std::move(sources));
}

inline Inputs ingest(const std::string& corpus_path, const std::string& queries_path,
                     DomainKind kind = DomainKind::training, const TokenizerConfig& tok = {}) {
  auto corpus = open_for_read(corpus_path);
  auto queries = open_for_read(queries_path);
  Inputs in;
  in.domain = ingest_corpus(corpus, kind, tok);
  in.units = read_units(queries, tok);
  return in;
}

inline Inputs ingest(const ExperimentConfig& cfg) {
  return ingest(cfg.corpus_path, cfg.queries_path, cfg.domain_kind, cfg.tokenizer);
}

// ---------------------------------------------------------------------------
// Runtime-selected evaluators

/// Type-erased scoring function carrying a display name.
struct DynamicEvaluator {
  std::string label;
  std::function<double(const AttributableUnit&, const Source&)> fn;

  std::string_view name() const { return label; }
  double operator()(const AttributableUnit& z, const Source& s) const { return fn(z, s); }
};

inline EntailmentConfig entailment_config(const EvaluatorSpec& spec) {
  EntailmentConfig cfg;
  if (!spec.stopwords_path.empty()) {
    auto words = load_stopwords(spec.stopwords_path);
    cfg.stopwords = std::unordered_set<std::string>(words.begin(), words.end());
  }
  cfg.threshold = spec.entailment_threshold;
  cfg.window = spec.entailment_window;
  cfg.augment_with_query = spec.entailment_query_context;
  cfg.validate();
  return cfg;
}

inline DynamicEvaluator make_evaluator(const EvaluatorSpec& spec) {
  switch (spec.kind) {
    case EvaluatorKind::exact_match:
      return {"exact_match", [](const AttributableUnit& z, const Source& s) {
                return static_cast<double>(eval_exact_match(z, s));
              }};
    case EvaluatorKind::valid_paraphrase: {
      auto table = std::make_shared<ParaphraseTable>(
          spec.paraphrase_path.empty() ? ParaphraseTable{} : ParaphraseTable::load(spec.paraphrase_path));
      return {"valid_paraphrase", [table](const AttributableUnit& z, const Source& s) {
                return static_cast<double>(eval_valid_paraphrase(z, s, *table));
              }};
    }
    case EvaluatorKind::textual_entailment: {
      auto cfg = entailment_config(spec);
      return {"textual_entailment", [cfg](const AttributableUnit& z, const Source& s) {
                return static_cast<double>(eval_textual_entailment(z, s, cfg));
              }};
    }
    case EvaluatorKind::external: {
      auto timeout = std::chrono::milliseconds(static_cast<long long>(spec.plugin_timeout_seconds * 1000.0));
      ExternalEvaluator plugin(spec.plugin_command, timeout);
      return {"external", [plugin](const AttributableUnit& z, const Source& s) { return plugin.score(z, s); }};
    }
  }
  throw parameter_error("unknown evaluator");
}

inline std::optional<DynamicEvaluator> make_relevance(const ExperimentConfig& cfg,
                                                      const AttributionDomain& domain) {
  if (cfg.relevance == RelevanceKind::none) return std::nullopt;
  std::shared_ptr<TfIdfIndex> index;
  if (cfg.relevance == RelevanceKind::tfidf || cfg.relevance == RelevanceKind::min) {
    index = std::make_shared<TfIdfIndex>(build_index(domain));
  }
  PriorityWeights weights(cfg.priority_weights, cfg.priority_default);
  switch (cfg.relevance) {
    case RelevanceKind::tfidf:
      return DynamicEvaluator{"tfidf", [index](const AttributableUnit& z, const Source& s) {
                                return tfidf_relevance(*index, z, s);
                              }};
    case RelevanceKind::priority:
      return DynamicEvaluator{"priority", [weights](const AttributableUnit& z, const Source& s) {
                                return priority_relevance(z, s, weights);
                              }};
    case RelevanceKind::min:
      return DynamicEvaluator{"min", [index, weights](const AttributableUnit& z, const Source& s) {
                                return std::min(tfidf_relevance(*index, z, s),
                                                priority_relevance(z, s, weights));
                              }};
    case RelevanceKind::none: break;
  }
  return std::nullopt;
}

/// Calls fn with the configured backend over the domain's vocabulary.
template <class Fn>
decltype(auto) with_backend(const ExperimentConfig& cfg, const AttributionDomain& domain, Fn&& fn) {
  Vocab vocab = Vocab::from_domain(domain, true);
  if (cfg.backend == BackendKind::count) return fn(CountBackend(std::move(vocab), cfg.lambda));
  return fn(SgdBackend(std::move(vocab), cfg.train));
}

// ---------------------------------------------------------------------------
// Provenance and metrics helpers

inline nlohmann::json provenance(const ExperimentConfig& cfg) {
  return {{"config_hash", cfg.hash()},
          {"config", cfg.to_json()},
          {"seeds",
           {{"train", cfg.train.seed},
            {"mc", cfg.mc_seed},
            {"baseline", cfg.baseline_seed},
            {"vary_seed", cfg.vary_seed}}},
          {"normalization",
           "per-(unit, method) min-max over raw scores; constant tables map to 0.5; "
           "binary counterfactual-output scores pass through"},
          {"idf", "ln((1 + N) / (1 + df)) + 1"},
          {"influence_damping", cfg.damping},
          {"vocab", "sorted distinct corpus tokens; <unk> = 0, </s> = 1"}};
}

namespace detail {

inline void fill_oracle_metrics(MetricReport& report, const ExperimentConfig& cfg,
                                const AttributionSet& set, std::span<const AttributableUnit> units,
                                const AttributionDomain& domain) {
  if (!cfg.oracle) return;
  auto oracle = make_evaluator(*cfg.oracle);
  double oa = cfg.oracle_alpha.value_or(cfg.alpha);
  if (!units.empty()) report.coverage = coverage(set, units, domain, oracle, oa);
  report.precision = precision(set, units, domain, oracle, oa);
  for (std::size_t u = 0; u < units.size(); ++u)
    report.recall.push_back(recall(set, u, units[u], domain, oracle, oa));
}

inline std::string fmt(std::optional<double> v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os.precision(6);
  os << *v;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Corroborative run

struct CorroborateResult {
  AttributionSet set;
  MetricReport report;
  nlohmann::json details;
};

inline CorroborateResult run_corroborate(const ExperimentConfig& cfg, const Inputs& in) {
  cfg.validate(false);
  EfficiencyRecorder eff;
  CorroborateResult out;
  auto v = make_evaluator(cfg.evaluator);
  std::optional<DynamicEvaluator> phi;
  {
    auto scope = eff.scope("relevance-index");
    phi = make_relevance(cfg, in.domain);
  }
  {
    auto scope = eff.scope("attribute");
    out.set = phi ? build_r_relevant_set(in.units, in.domain, v, cfg.alpha, *phi, cfg.r)
                  : build_attribution_set(in.units, in.domain, v, cfg.alpha);
  }
  {
    auto scope = eff.scope("metrics");
    detail::fill_oracle_metrics(out.report, cfg, out.set, in.units, in.domain);
    if (phi) out.report.r_relevancy = r_relevancy(out.set, in.units, in.domain, *phi, cfg.r);
  }
  out.report.efficiency = eff.phases();
  out.details = {{"attributions", out.set.size()},
                 {"units", in.units.size()},
                 {"sources", in.domain.size()},
                 {"evaluator", out.set.evaluator_name()},
                 {"alpha", cfg.alpha},
                 {"relevance", to_string(cfg.relevance)},
                 {"r", phi ? nlohmann::json(cfg.r) : nlohmann::json(nullptr)}};
  return out;
}

// ---------------------------------------------------------------------------
// Contributive run

struct ContributeResult {
  std::vector<ContributiveScoreTable> tables;  // first run
  AttributionSet set;                          // first run
  std::vector<AttributionSet> run_sets;
  MetricReport report;
  nlohmann::json identities = nlohmann::json::array();
  std::vector<std::vector<std::string>> candidates;  // per unit
};

namespace detail {

/// Per-unit candidate lists: every source, or the TF-IDF top k.
inline std::vector<std::vector<std::string>> candidate_lists(const ExperimentConfig& cfg,
                                                             const Inputs& in) {
  std::vector<std::vector<std::string>> out;
  if (cfg.prefilter_k == 0) {
    out.assign(in.units.size(), in.domain.ids());
    return out;
  }
  auto index = build_index(in.domain);
  for (const auto& z : in.units) out.push_back(prefilter_topk(index, z, cfg.prefilter_k));
  return out;
}

/// Runs the configured method for one unit. `seed_offset` shifts every seed.
template <RetrainableBackend B>
ContributiveScoreTable score_unit(const ExperimentConfig& cfg, const B& backend,
                                  const typename B::model_type& full,
                                  const std::vector<Checkpoint>* ckpts, const AttributionDomain& domain,
                                  const AttributableUnit& z, std::size_t unit_ref,
                                  std::span<const std::string> cands, std::uint64_t seed_offset,
                                  nlohmann::json& identities) {
  std::span<const AttributableUnit> one(&z, 1);
  auto relabel = [unit_ref](ContributiveScoreTable t) {
    std::map<std::string, double> raw, se;
    for (const auto& e : t.entries()) {
      raw[e.source_id] = e.raw;
      if (e.standard_error) se[e.source_id] = *e.standard_error;
    }
    ContributiveScoreTable r(unit_ref, t.method(), raw, se);
    r.permutations = t.permutations;
    r.seed = t.seed;
    return r;
  };
  switch (cfg.method) {
    case Method::loo:
      return relabel(ccl_loo(backend, full, domain, one, cands).front());
    case Method::shapley_exact: {
      auto t = relabel(shapley_exact(backend, domain, one, cands).front());
      auto background = detail::background_of(domain, {cands.begin(), cands.end()});
      double v_empty = detail::coalition_losses(backend, domain, background, {}, one).front();
      double v_full = backend.loss(full, z);
      double residual = std::abs(t.raw_sum() - (v_empty - v_full));
      identities.push_back({{"unit_ref", unit_ref},
                            {"identity", "shapley-efficiency"},
                            {"sum", t.raw_sum()},
                            {"expected", v_empty - v_full},
                            {"residual", residual},
                            {"holds", residual <= 1e-9}});
      return t;
    }
    case Method::shapley_mc:
      return relabel(shapley_mc(backend, domain, one, cfg.permutations, cfg.mc_seed + seed_offset, cands).front());
    case Method::cco_exact_match:
      return relabel(cco_exact_match(backend, full, domain, one, cfg.max_len, cands).front());
    case Method::cco_textual_entailment:
      return relabel(cco_textual_entailment(backend, full, domain, one, entailment_config(cfg.evaluator),
                                            cfg.max_len, cands)
                         .front());
    case Method::influence:
    case Method::tracin_ideal:
    case Method::tracin_dot:
      if constexpr (std::is_same_v<typename B::model_type, SoftmaxBigramModel>) {
        if (cfg.method == Method::influence)
          return relabel(influence_estimate(full, domain, one, cfg.damping, cands).front());
        if (cfg.method == Method::tracin_dot)
          return relabel(tracin_dot(full, *ckpts, domain, one, cands).front());
        auto t = relabel(tracin_ideal(full, *ckpts, one, cands).front());
        if (cands.size() == domain.size()) {
          double expected = loss(full.with_weights(ckpts->front().params), z) -
                            loss(full.with_weights(ckpts->back().params), z);
          double residual = std::abs(t.raw_sum() - expected);
          identities.push_back({{"unit_ref", unit_ref},
                                {"identity", "tracin-telescoping"},
                                {"sum", t.raw_sum()},
                                {"expected", expected},
                                {"residual", residual},
                                {"holds", residual <= 1e-9}});
        }
        return t;
      } else {
        throw mode_error(std::string(to_string(cfg.method)) + " needs the sgd backend");
      }
  }
  throw parameter_error("unknown method");
}

inline AttributionSet threshold_tables(const std::vector<ContributiveScoreTable>& tables, Method method,
                                       double alpha, std::span<const AttributableUnit> units,
                                       const AttributionDomain& domain) {
  std::vector<Attribution> admitted;
  for (const auto& t : tables)
    for (const auto& e : t.entries())
      if (e.normalized >= alpha) admitted.push_back({t.unit_ref(), e.source_id, e.normalized});
  return AttributionSet(std::move(admitted), std::string(to_string(method)), alpha, std::nullopt,
                        scope_fingerprint(units, domain));
}

}  // namespace detail

inline ContributeResult run_contribute(const ExperimentConfig& cfg, const Inputs& in) {
  cfg.validate(false);
  in.domain.require_training("run_contribute");
  if (cfg.method == Method::shapley_exact) {
    std::size_t n = cfg.prefilter_k == 0 ? in.domain.size() : std::min(cfg.prefilter_k, in.domain.size());
    if (n > kShapleyExactCap) {
      throw mode_error("exact Shapley over " + std::to_string(n) + " sources exceeds the cap of " +
                       std::to_string(kShapleyExactCap) + "; use shapley-mc or --prefilter-k");
    }
  }
  EfficiencyRecorder eff;
  ContributeResult out;
  {
    auto scope = eff.scope("prefilter");
    out.candidates = detail::candidate_lists(cfg, in);
  }
  for (std::size_t run = 0; run < cfg.runs; ++run) {
    const std::uint64_t offset = cfg.vary_seed ? run : 0;
    ExperimentConfig rc = cfg;
    rc.train.seed = cfg.train.seed + offset;
    std::vector<ContributiveScoreTable> tables;
    nlohmann::json identities = nlohmann::json::array();
    with_backend(rc, in.domain, [&](const auto& backend) {
      using B = std::decay_t<decltype(backend)>;
      std::optional<typename B::model_type> full;
      std::vector<Checkpoint> ckpts;
      {
        auto scope = eff.scope("fit");
        if constexpr (std::is_same_v<B, SgdBackend>) {
          auto res = backend.fit_with_checkpoints(in.domain);
          full.emplace(std::move(res.model));
          ckpts = std::move(res.checkpoints);
        } else {
          full.emplace(backend.fit(in.domain));
        }
      }
      auto scope = eff.scope("score");
      for (std::size_t u = 0; u < in.units.size(); ++u) {
        tables.push_back(detail::score_unit(rc, backend, *full, &ckpts, in.domain, in.units[u], u,
                                            out.candidates[u], offset, identities));
      }
    });
    auto set = detail::threshold_tables(tables, cfg.method, cfg.alpha, in.units, in.domain);
    if (run == 0) {
      out.tables = std::move(tables);
      out.set = set;
      out.identities = std::move(identities);
    }
    out.run_sets.push_back(std::move(set));
  }
  {
    auto scope = eff.scope("metrics");
    detail::fill_oracle_metrics(out.report, cfg, out.set, in.units, in.domain);
    if (out.run_sets.size() >= 2) out.report.consistency = consistency(out.run_sets);
  }
  out.report.efficiency = eff.phases();
  return out;
}

// ---------------------------------------------------------------------------
// Fact tracing

struct FactTraceUnit {
  std::size_t unit_ref;
  std::vector<std::string> ranking;
  std::vector<std::string> ground_truth;
  std::optional<double> reciprocal_rank;
  std::optional<double> recall_at_k;
};

struct FactTraceResult {
  std::vector<FactTraceUnit> units;
  std::optional<double> mrr;
  std::optional<double> mean_recall_at_k;
  std::optional<double> baseline_mrr;
  std::optional<double> baseline_recall_at_k;
  std::vector<std::size_t> excluded;
  ContributeResult contribute;
};

namespace detail {

inline double reciprocal_rank(const std::vector<std::string>& ranking, const std::set<std::string>& truth) {
  for (std::size_t k = 0; k < ranking.size(); ++k)
    if (truth.count(ranking[k])) return 1.0 / static_cast<double>(k + 1);
  return 0.0;
}

inline double recall_at(const std::vector<std::string>& ranking, const std::set<std::string>& truth,
                        std::size_t k) {
  std::size_t hit = 0;
  for (std::size_t p = 0; p < std::min(k, ranking.size()); ++p)
    if (truth.count(ranking[p])) ++hit;
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

}  // namespace detail

/// Ground truth per unit is the exact-match set over the whole domain and
/// does not depend on the contributive method.
inline std::vector<std::vector<std::string>> exact_match_ground_truth(std::span<const AttributableUnit> units,
                                                                      const AttributionDomain& domain) {
  std::vector<std::vector<std::string>> out;
  for (const auto& z : units) {
    std::vector<std::string> ids;
    for (const auto& s : domain.sources())
      if (eval_exact_match(z, s) == 1) ids.push_back(s.id());
    out.push_back(std::move(ids));
  }
  return out;
}

inline FactTraceResult run_facttrace(const ExperimentConfig& cfg, const Inputs& in) {
  FactTraceResult out;
  out.contribute = run_contribute(cfg, in);
  auto truth = exact_match_ground_truth(in.units, in.domain);
  double rr_sum = 0.0, rec_sum = 0.0;
  std::size_t counted = 0;
  std::vector<std::pair<std::vector<std::string>, std::set<std::string>>> included;
  for (std::size_t u = 0; u < in.units.size(); ++u) {
    FactTraceUnit fu{u, out.contribute.tables[u].ranking(), truth[u], std::nullopt, std::nullopt};
    if (truth[u].empty()) {
      out.excluded.push_back(u);
    } else {
      std::set<std::string> t(truth[u].begin(), truth[u].end());
      fu.reciprocal_rank = detail::reciprocal_rank(fu.ranking, t);
      fu.recall_at_k = detail::recall_at(fu.ranking, t, cfg.recall_k);
      rr_sum += *fu.reciprocal_rank;
      rec_sum += *fu.recall_at_k;
      ++counted;
      included.emplace_back(fu.ranking, std::move(t));
    }
    out.units.push_back(std::move(fu));
  }
  if (counted > 0) {
    out.mrr = rr_sum / static_cast<double>(counted);
    out.mean_recall_at_k = rec_sum / static_cast<double>(counted);
    // Random-score baseline: uniformly shuffled candidate rankings.
    std::mt19937_64 rng(cfg.baseline_seed);
    double b_rr = 0.0, b_rec = 0.0;
    for (std::size_t k = 0; k < cfg.baseline_shuffles; ++k) {
      for (const auto& [ranking, t] : included) {
        auto shuffled = ranking;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        b_rr += detail::reciprocal_rank(shuffled, t);
        b_rec += detail::recall_at(shuffled, t, cfg.recall_k);
      }
    }
    const double denom = static_cast<double>(cfg.baseline_shuffles * counted);
    out.baseline_mrr = b_rr / denom;
    out.baseline_recall_at_k = b_rec / denom;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Memorization audit

struct AuditRow {
  std::size_t unit_ref;
  std::string source_id;
  int exact_match;
  int cco;
  bool flagged;
};

struct AuditResult {
  std::vector<AttributableUnit> units;      // decoded, full-output spans
  std::vector<std::size_t> unit_origin;     // index into the input list
  std::vector<std::size_t> empty_outputs;   // inputs whose decode was empty
  std::vector<AuditRow> rows;
  AuditCriterion criterion = AuditCriterion::joint;

  std::vector<std::pair<std::size_t, std::string>> flagged() const {
    std::vector<std::pair<std::size_t, std::string>> out;
    for (const auto& r : rows)
      if (r.flagged) out.emplace_back(r.unit_ref, r.source_id);
    return out;
  }
};

/// Decodes each query, then flags (z, s) when s contains the decoded output
/// verbatim and removing s changes the decode (under the joint criterion).
inline AuditResult run_memorization_audit(const ExperimentConfig& cfg, const Inputs& in) {
  cfg.validate(false);
  in.domain.require_training("run_memorization_audit");
  AuditResult out;
  out.criterion = cfg.audit_criterion;
  with_backend(cfg, in.domain, [&](const auto& backend) {
    auto full = backend.fit(in.domain);
    for (std::size_t q = 0; q < in.units.size(); ++q) {
      ModelOutput y = backend.decode(full, in.units[q].query(), cfg.max_len);
      if (y.text.empty()) {
        out.empty_outputs.push_back(q);
        continue;
      }
      std::size_t len = y.text.size();
      out.units.emplace_back(in.units[q].query(), std::move(y), 0, len);
      out.unit_origin.push_back(q);
    }
    if (out.units.empty()) return;
    auto cco_tables = cco_exact_match(backend, full, in.domain, out.units, cfg.max_len);
    for (std::size_t u = 0; u < out.units.size(); ++u) {
      for (const auto& s : in.domain.sources()) {
        int em = eval_exact_match(out.units[u], s);
        int cco = static_cast<int>(cco_tables[u].raw(s.id()));
        bool flag = false;
        switch (cfg.audit_criterion) {
          case AuditCriterion::joint: flag = em == 1 && cco == 1; break;
          case AuditCriterion::em_only: flag = em == 1; break;
          case AuditCriterion::cco_only: flag = cco == 1; break;
        }
        out.rows.push_back({u, s.id(), em, cco, flag});
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Run-directory output

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  auto f = open_for_write(p);
  f << text;
}

inline std::string metric_lines(const MetricReport& m) {
  std::ostringstream os;
  os << "  coverage      " << fmt(m.coverage) << "\n";
  os << "  precision     " << fmt(m.precision) << "\n";
  for (std::size_t u = 0; u < m.recall.size(); ++u)
    os << "  recall[" << u << "]     " << fmt(m.recall[u]) << "\n";
  os << "  r-relevancy   " << fmt(m.r_relevancy) << "\n";
  if (m.consistency)
    os << "  consistency   " << fmt(m.consistency->mean) << " (" << m.consistency->runs << " runs)\n";
  return os.str();
}

inline std::string efficiency_lines(const MetricReport& m) {
  std::ostringstream os;
  for (const auto& p : m.efficiency)
    os << "  " << p.label << ": " << p.wall_seconds << " s, peak rss " << p.peak_rss_kb << " kB\n";
  return os.str();
}

inline void prepare_dir(const std::string& dir) {
  if (dir.empty()) throw parameter_error("an output directory is required");
  std::filesystem::create_directories(dir);
}

inline void write_score_rows(const std::filesystem::path& p, const std::vector<ContributiveScoreTable>& tables) {
  auto f = open_for_write(p);
  for (const auto& t : tables)
    for (const auto& row : to_json_rows(t)) f << row.dump() << '\n';
}

}  // namespace detail

inline nlohmann::json metrics_document(const ExperimentConfig& cfg, std::string_view command,
                                       const MetricReport& report, nlohmann::json details) {
  return {{"command", command},
          {"provenance", provenance(cfg)},
          {"metrics", report.to_json(!cfg.stable_output)},
          {"details", std::move(details)}};
}

inline void write_corroborate(const ExperimentConfig& cfg, const CorroborateResult& r) {
  namespace fs = std::filesystem;
  detail::prepare_dir(cfg.output_dir);
  fs::path dir(cfg.output_dir);
  {
    auto f = open_for_write(dir / "attributions.jsonl");
    write_attributions(f, r.set);
  }
  detail::write_text(dir / "scores.jsonl", "");
  auto doc = metrics_document(cfg, "corroborate", r.report, r.details);
  detail::write_text(dir / "metrics.json", doc.dump(2) + "\n");
  std::ostringstream os;
  os << "corroborative attribution\n"
     << "  evaluator     " << r.set.evaluator_name() << " (alpha " << cfg.alpha << ")\n"
     << "  relevance     " << to_string(cfg.relevance) << "\n"
     << "  attributions  " << r.set.size() << "\n"
     << detail::metric_lines(r.report);
  if (!cfg.stable_output) os << "efficiency\n" << detail::efficiency_lines(r.report);
  os << "config hash " << cfg.hash() << "\n";
  detail::write_text(dir / "report.txt", os.str());
}

inline nlohmann::json contribute_details(const ExperimentConfig& cfg, const ContributeResult& r) {
  return {{"method", to_string(cfg.method)},
          {"backend", to_string(cfg.backend)},
          {"alpha", cfg.alpha},
          {"attributions", r.set.size()},
          {"runs", r.run_sets.size()},
          {"candidates", r.candidates},
          {"identities", r.identities}};
}

inline void write_contribute(const ExperimentConfig& cfg, const ContributeResult& r,
                             std::string_view command = "contribute", nlohmann::json extra = {},
                             const std::string& extra_text = {}) {
  namespace fs = std::filesystem;
  detail::prepare_dir(cfg.output_dir);
  fs::path dir(cfg.output_dir);
  {
    auto f = open_for_write(dir / "attributions.jsonl");
    write_attributions(f, r.set);
  }
  detail::write_score_rows(dir / "scores.jsonl", r.tables);
  auto details = contribute_details(cfg, r);
  if (!extra.is_null()) details.update(extra);
  auto doc = metrics_document(cfg, command, r.report, details);
  detail::write_text(dir / "metrics.json", doc.dump(2) + "\n");
  std::ostringstream os;
  os << "contributive attribution\n"
     << "  method        " << to_string(cfg.method) << " on " << to_string(cfg.backend) << " backend\n"
     << "  alpha         " << cfg.alpha << " on normalized scores\n"
     << "  attributions  " << r.set.size() << "\n";
  for (const auto& t : r.tables) {
    os << "  unit " << t.unit_ref() << " ranking:";
    for (const auto& id : t.ranking()) os << ' ' << id << '=' << t.raw(id);
    os << "\n";
  }
  for (const auto& id : r.identities) {
    os << "  identity " << id["identity"].get<std::string>() << " unit " << id["unit_ref"].get<std::size_t>()
       << ": residual " << id["residual"].get<double>() << (id["holds"].get<bool>() ? " (holds)" : " (FAILS)")
       << "\n";
  }
  os << detail::metric_lines(r.report) << extra_text;
  if (!cfg.stable_output) os << "efficiency\n" << detail::efficiency_lines(r.report);
  os << "config hash " << cfg.hash() << "\n";
  detail::write_text(dir / "report.txt", os.str());
}

inline void write_facttrace(const ExperimentConfig& cfg, const FactTraceResult& r) {
  nlohmann::json units = nlohmann::json::array();
  for (const auto& u : r.units) {
    units.push_back({{"unit_ref", u.unit_ref},
                     {"ranking", u.ranking},
                     {"ground_truth", u.ground_truth},
                     {"reciprocal_rank", u.reciprocal_rank ? nlohmann::json(*u.reciprocal_rank) : nlohmann::json(nullptr)},
                     {"recall_at_k", u.recall_at_k ? nlohmann::json(*u.recall_at_k) : nlohmann::json(nullptr)}});
  }
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json extra = {{"facttrace",
                           {{"mrr", opt(r.mrr)},
                            {"k", cfg.recall_k},
                            {"mean_recall_at_k", opt(r.mean_recall_at_k)},
                            {"baseline_mrr", opt(r.baseline_mrr)},
                            {"baseline_recall_at_k", opt(r.baseline_recall_at_k)},
                            {"baseline_shuffles", cfg.baseline_shuffles},
                            {"excluded_units", r.excluded},
                            {"units", units}}}};
  std::ostringstream os;
  os << "fact tracing\n"
     << "  MRR           " << detail::fmt(r.mrr) << " (random baseline " << detail::fmt(r.baseline_mrr) << ")\n"
     << "  recall@" << cfg.recall_k << "      " << detail::fmt(r.mean_recall_at_k) << " (random baseline "
     << detail::fmt(r.baseline_recall_at_k) << ")\n";
  if (!r.excluded.empty()) {
    os << "  excluded units without an exact-match source:";
    for (auto u : r.excluded) os << ' ' << u;
    os << "\n";
  }
  write_contribute(cfg, r.contribute, "facttrace", extra, os.str());
}

inline void write_audit(const ExperimentConfig& cfg, const AuditResult& r, const AttributionDomain& domain) {
  namespace fs = std::filesystem;
  detail::prepare_dir(cfg.output_dir);
  fs::path dir(cfg.output_dir);
  std::vector<Attribution> flagged;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    if (row.flagged) flagged.push_back({row.unit_ref, row.source_id, 1.0});
    rows.push_back({{"unit_ref", row.unit_ref},
                    {"source_id", row.source_id},
                    {"exact_match", row.exact_match},
                    {"cco_exact_match", row.cco},
                    {"flagged", row.flagged}});
  }
  AttributionSet set(std::move(flagged), "memorization-" + std::string(to_string(r.criterion)), 1.0,
                     std::nullopt, scope_fingerprint(r.units, domain));
  {
    auto f = open_for_write(dir / "attributions.jsonl");
    write_attributions(f, set);
  }
  {
    auto f = open_for_write(dir / "scores.jsonl");
    for (const auto& row : rows) f << row.dump() << '\n';
  }
  nlohmann::json units = nlohmann::json::array();
  for (std::size_t u = 0; u < r.units.size(); ++u) {
    auto j = to_json(r.units[u]);
    j["input_ref"] = r.unit_origin[u];
    units.push_back(std::move(j));
  }
  nlohmann::json details = {{"criterion", to_string(r.criterion)},
                            {"decoded_units", units},
                            {"empty_outputs", r.empty_outputs},
                            {"flagged", set.size()},
                            {"rows", rows}};
  MetricReport none;
  auto doc = metrics_document(cfg, "audit", none, details);
  detail::write_text(dir / "metrics.json", doc.dump(2) + "\n");
  std::ostringstream os;
  os << "memorization audit (" << to_string(r.criterion) << ")\n";
  for (std::size_t u = 0; u < r.units.size(); ++u)
    os << "  unit " << u << " decoded: " << join_tokens(r.units[u].output().text) << "\n";
  os << "  flagged pairs " << set.size() << "\n";
  for (const auto& row : r.rows)
    if (row.flagged)
      os << "    unit " << row.unit_ref << " <- " << row.source_id << " (exact match " << row.exact_match
         << ", counterfactual " << row.cco << ")\n";
  os << "config hash " << cfg.hash() << "\n";
  detail::write_text(dir / "report.txt", os.str());
}

// Path-driven entry points: ingest, run, write.

inline CorroborateResult run_corroborate(const ExperimentConfig& cfg) {
  cfg.validate();
  auto in = ingest(cfg);
  auto r = run_corroborate(cfg, in);
  if (!cfg.output_dir.empty()) write_corroborate(cfg, r);
  return r;
}

inline ContributeResult run_contribute(const ExperimentConfig& cfg) {
  cfg.validate();
  auto in = ingest(cfg);
  auto r = run_contribute(cfg, in);
  if (!cfg.output_dir.empty()) write_contribute(cfg, r);
  return r;
}

inline FactTraceResult run_facttrace(const ExperimentConfig& cfg) {
  cfg.validate();
  auto in = ingest(cfg);
  auto r = run_facttrace(cfg, in);
  if (!cfg.output_dir.empty()) write_facttrace(cfg, r);
  return r;
}

inline AuditResult run_memorization_audit(const ExperimentConfig& cfg) {
  cfg.validate();
  auto in = ingest(cfg);
  auto r = run_memorization_audit(cfg, in);
  if (!cfg.output_dir.empty()) write_audit(cfg, r, in.domain);
  return r;
}

}  // namespace attrib
