// attrib: command-line front end for the attribution toolkit.
//
// Exit codes: 0 success, 2 validation error (bad flags, bad input files,
// unsupported mode), 3 runtime failure (training, scoring, plugin errors).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "attrib/attrib.hpp"

namespace fs = std::filesystem;
using namespace attrib;

namespace {

template <class E>
std::map<std::string, E> names_of(std::initializer_list<E> values) {
  std::map<std::string, E> out;
  for (E v : values) out.emplace(std::string(to_string(v)), v);
  return out;
}

const auto kBackends = names_of({BackendKind::count, BackendKind::sgd});
const auto kEvaluators = names_of({EvaluatorKind::exact_match, EvaluatorKind::valid_paraphrase,
                                   EvaluatorKind::textual_entailment, EvaluatorKind::external});
const auto kRelevance =
    names_of({RelevanceKind::none, RelevanceKind::tfidf, RelevanceKind::priority, RelevanceKind::min});
const auto kCriteria = names_of({AuditCriterion::joint, AuditCriterion::em_only, AuditCriterion::cco_only});
const auto kMethods = names_of({Method::loo, Method::influence, Method::tracin_ideal, Method::tracin_dot,
                                Method::shapley_exact, Method::shapley_mc, Method::cco_exact_match,
                                Method::cco_textual_entailment});
const std::map<std::string, DomainKind> kDomainKinds{{"training", DomainKind::training},
                                                     {"external", DomainKind::external}};
const std::map<std::string, PunctuationMode> kPunctuation{{"remove", PunctuationMode::remove},
                                                          {"separate", PunctuationMode::separate}};

// Binds a string option to an enum field through a name table.
template <class E>
CLI::Option* add_enum(CLI::App* app, const std::string& name, E& target, const std::map<std::string, E>& names,
                      const std::string& help) {
  std::vector<std::string> keys;
  for (const auto& kv : names) keys.push_back(kv.first);
  return app
      ->add_option_function<std::string>(
          name, [&target, &names](const std::string& s) { target = names.at(s); }, help)
      ->check(CLI::IsMember(keys));
}

// Flag state shared by the run subcommands; copied into an ExperimentConfig.
struct Flags {
  ExperimentConfig cfg;
  std::string oracle;
  double oracle_alpha = -1.0;
  std::vector<std::string> priority;
};

void add_inputs(CLI::App* app, Flags& f, bool queries = true) {
  app->add_option("--corpus", f.cfg.corpus_path, "corpus JSONL (id, text, meta)")->required();
  if (queries) app->add_option("--queries", f.cfg.queries_path, "units JSONL (query, issued_at, output, span)")->required();
  add_enum(app, "--domain-kind", f.cfg.domain_kind, kDomainKinds, "training or external");
  app->add_flag("--case-fold,!--no-case-fold", f.cfg.tokenizer.case_fold, "lower-case tokens");
  add_enum(app, "--punctuation", f.cfg.tokenizer.punctuation, kPunctuation, "remove or separate");
  app->add_flag("!--split-numbers", f.cfg.tokenizer.keep_numeric_separators,
                "split digits at ',' and '.' instead of keeping 3,475 whole");
}

void add_backend(CLI::App* app, Flags& f) {
  auto& t = f.cfg.train;
  add_enum(app, "--backend", f.cfg.backend, kBackends, "count or sgd");
  app->add_option("--lambda", f.cfg.lambda, "additive smoothing of the count backend");
  app->add_option("--seed", t.seed, "training seed");
  app->add_option("--epochs", t.epochs, "sgd epochs");
  app->add_option("--lr", t.learning_rate, "sgd learning rate");
  app->add_option("--batch-size", t.batch_size, "sources per sgd step (0: full batch)");
  app->add_option("--stride", t.checkpoint_stride, "checkpoint every n steps");
  app->add_option("--l2", t.l2, "weight decay");
  app->add_option("--init-scale", t.init_scale, "std-dev of the initial weights");
}

void add_evaluator(CLI::App* app, Flags& f) {
  auto& e = f.cfg.evaluator;
  add_enum(app, "--evaluator", e.kind, kEvaluators, "exact_match, valid_paraphrase, textual_entailment, external");
  app->add_option("--alpha", f.cfg.alpha, "evaluator cutoff");
  app->add_option("--paraphrases", e.paraphrase_path, "paraphrase table file");
  app->add_option("--te-threshold", e.entailment_threshold, "entailment overlap threshold");
  app->add_option("--te-window", e.entailment_window, "entailment window length");
  app->add_flag("!--te-no-query", e.entailment_query_context, "do not add query tokens to the claim");
  app->add_option("--stopwords", e.stopwords_path, "stopword list file");
  app->add_option("--plugin", e.plugin_command, "external evaluator command");
  app->add_option("--plugin-timeout", e.plugin_timeout_seconds, "seconds per plugin reply");
}

void add_oracle(CLI::App* app, Flags& f) {
  app->add_option("--oracle", f.oracle, "oracle evaluator for coverage/precision/recall")
      ->check(CLI::IsMember(kEvaluators));
  app->add_option("--oracle-alpha", f.oracle_alpha, "oracle cutoff (default: --alpha)");
}

void add_relevance(CLI::App* app, Flags& f) {
  add_enum(app, "--relevance", f.cfg.relevance, kRelevance, "none, tfidf, priority, min");
  app->add_option("--r", f.cfg.r, "relevance threshold");
  app->add_option("--priority", f.priority, "class=weight, repeatable");
  app->add_option("--priority-default", f.cfg.priority_default, "weight of unlisted classes");
}

void add_method(CLI::App* app, Flags& f) {
  auto& c = f.cfg;
  add_enum(app, "--method", c.method, kMethods, "loo, influence, tracin-ideal, tracin-dot, shapley-exact, shapley-mc, cco-em, cco-te");
  app->add_option("--damping", c.damping, "influence damping");
  app->add_option("--permutations", c.permutations, "shapley-mc permutations");
  app->add_option("--mc-seed", c.mc_seed, "shapley-mc seed");
  app->add_option("--max-len", c.max_len, "greedy decode length");
  app->add_option("--prefilter-k", c.prefilter_k, "score only the TF-IDF top k sources (0: all)");
  app->add_option("--runs", c.runs, "repeat runs for consistency");
  app->add_flag("--vary-seed", c.vary_seed, "shift seeds by the run index");
}

void add_output(CLI::App* app, Flags& f, bool required = true) {
  auto* o = app->add_option("--out", f.cfg.output_dir, "run directory");
  if (required) o->required();
  app->add_flag("--stable", f.cfg.stable_output, "omit timings so reports are byte-identical");
}

ExperimentConfig finish(Flags& f) {
  ExperimentConfig c = f.cfg;
  if (!f.oracle.empty()) {
    EvaluatorSpec o = c.evaluator;
    o.kind = kEvaluators.at(f.oracle);
    c.oracle = o;
    if (f.oracle_alpha >= 0.0) c.oracle_alpha = f.oracle_alpha;
  }
  for (const auto& kv : f.priority) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw parameter_error("--priority expects class=weight, got '" + kv + "'");
    double w;
    try {
      w = std::stod(kv.substr(eq + 1));
    } catch (const std::exception&) {
      throw parameter_error("--priority weight in '" + kv + "' is not a number");
    }
    c.priority_weights[kv.substr(0, eq)] = w;
  }
  return c;
}

std::string slurp(const fs::path& p) {
  auto in = open_for_read(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// gen ----------------------------------------------------------------------

struct GenFlags {
  std::string kind = "unique";
  std::uint64_t seed = 0;
  std::size_t n = 5;
  std::string out;
};

int run_gen(const GenFlags& g) {
  Corpus c;
  if (g.kind == "unique") c = unique_fact_corpus(g.seed, g.n);
  else if (g.kind == "duplicated") c = duplicated_fact_corpus(g.seed);
  else if (g.kind == "redundancy") c = redundancy_corpus(g.seed, g.n);
  else c = random_markov_corpus(g.seed, 12, g.n);
  fs::create_directories(g.out);
  {
    auto f = open_for_write(fs::path(g.out) / "corpus.jsonl");
    write_sources(f, c.domain.sources());
  }
  {
    auto f = open_for_write(fs::path(g.out) / "queries.jsonl");
    write_units(f, c.units);
  }
  {
    auto f = open_for_write(fs::path(g.out) / "facts.json");
    f << nlohmann::json{{"kind", g.kind}, {"seed", g.seed}, {"fact_sources", c.fact_sources}}.dump(2) << '\n';
  }
  std::cout << "wrote " << c.domain.size() << " sources and " << c.units.size() << " units to " << g.out << "\n";
  return 0;
}

// train --------------------------------------------------------------------

int run_train(Flags& f) {
  ExperimentConfig cfg = finish(f);
  cfg.validate(false);
  auto corpus = open_for_read(cfg.corpus_path);
  auto domain = ingest_corpus(corpus, DomainKind::training, cfg.tokenizer);
  if (domain.empty()) throw empty_domain_error("corpus has no sources");
  fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  Vocab vocab = Vocab::from_domain(domain, true);
  nlohmann::json summary{{"backend", to_string(cfg.backend)}, {"sources", domain.size()}, {"vocab", vocab.size()}};
  if (cfg.backend == BackendKind::count) {
    auto m = fit_counts(domain, vocab, cfg.lambda);
    auto out = open_for_write(dir / "model.json");
    out << to_json(m).dump() << '\n';
    double total = 0.0;
    for (const auto& s : domain.sources()) total += source_loss(m, s);
    summary["mean_source_loss"] = total / static_cast<double>(domain.size());
  } else {
    auto r = train_sgd(domain, vocab, cfg.train);
    {
      auto out = open_for_write(dir / "model.json");
      out << to_json(r.model).dump() << '\n';
    }
    {
      auto out = open_for_write(dir / "checkpoints.json");
      out << to_json(r.checkpoints).dump() << '\n';
    }
    summary["objective"] = training_objective(r.model, domain);
    summary["checkpoints"] = r.checkpoints.size();
  }
  {
    auto out = open_for_write(dir / "index.json");
    out << build_index(domain).to_json().dump() << '\n';
  }
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// metrics ------------------------------------------------------------------

struct MetricsFlags {
  Flags base;
  std::vector<std::string> attributions;
};

int run_metrics(MetricsFlags& m) {
  ExperimentConfig cfg = finish(m.base);
  cfg.validate();
  auto in = ingest(cfg);
  const auto scope = scope_fingerprint(in.units, in.domain);
  std::vector<AttributionSet> sets;
  for (const auto& path : m.attributions) {
    auto file = open_for_read(path);
    auto rows = read_attributions(file);
    double lo = 0.0;
    for (const auto& a : rows) lo = std::min(lo, a.score);
    sets.emplace_back(std::move(rows), "loaded", lo, std::nullopt, scope);
  }
  MetricReport report;
  if (!cfg.oracle) cfg.oracle = cfg.evaluator;
  detail::fill_oracle_metrics(report, cfg, sets.front(), in.units, in.domain);
  if (auto phi = make_relevance(cfg, in.domain)) report.r_relevancy = r_relevancy(sets.front(), in.units, in.domain, *phi, cfg.r);
  if (sets.size() >= 2) report.consistency = consistency(sets);
  auto doc = metrics_document(cfg, "metrics", report, {{"attribution_files", m.attributions}});
  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir);
    auto out = open_for_write(fs::path(cfg.output_dir) / "metrics.json");
    out << doc.dump(2) << '\n';
  }
  std::cout << report.to_json(false).dump(2) << "\n";
  return 0;
}

// report -------------------------------------------------------------------

int run_report(const std::string& dir, bool as_json) {
  fs::path p(dir);
  if (!fs::exists(p / "metrics.json")) throw parameter_error("'" + dir + "' holds no metrics.json");
  auto doc = nlohmann::json::parse(slurp(p / "metrics.json"));
  if (as_json) {
    std::cout << doc.dump(2) << "\n";
    return 0;
  }
  std::cout << "run       " << dir << "\n"
            << "command   " << doc.value("command", "?") << "\n"
            << "config    " << doc["provenance"].value("config_hash", "?") << "\n";
  const auto& m = doc["metrics"];
  auto show = [](const nlohmann::json& v) { return v.is_null() ? std::string("n/a") : v.dump(); };
  std::cout << "metric          value\n";
  for (const auto* key : {"coverage", "precision", "r_relevancy"})
    if (m.contains(key)) std::cout << "  " << std::left << std::setw(14) << key << show(m[key]) << "\n";
  if (m.contains("recall"))
    for (std::size_t u = 0; u < m["recall"].size(); ++u)
      std::cout << "  recall[" << u << "]" << std::string(u < 10 ? 5 : 4, ' ') << show(m["recall"][u]) << "\n";
  if (m.contains("consistency") && !m["consistency"].is_null())
    std::cout << "  consistency   " << show(m["consistency"]["mean_jaccard_distance"]) << "\n";
  if (fs::exists(p / "report.txt")) std::cout << "\n" << slurp(p / "report.txt");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attribution toolkit for tiny language models"};
  app.require_subcommand(1);

  GenFlags gen;
  auto* g = app.add_subcommand("gen", "write a seeded synthetic corpus and queries");
  g->add_option("--kind", gen.kind, "unique, duplicated, redundancy, markov")
      ->check(CLI::IsMember({"unique", "duplicated", "redundancy", "markov"}));
  g->add_option("--seed", gen.seed, "generator seed");
  g->add_option("--n", gen.n, "number of facts (markov: sources)");
  g->add_option("--out", gen.out, "output directory")->required();

  Flags train;
  auto* t = app.add_subcommand("train", "fit a backend and write model, checkpoints and TF-IDF index");
  t->set_config("--config");
  add_inputs(t, train, false);
  add_backend(t, train);
  add_output(t, train);

  Flags corr;
  auto* c = app.add_subcommand("corroborate", "build a corroborative attribution set");
  c->set_config("--config");
  add_inputs(c, corr);
  add_evaluator(c, corr);
  add_oracle(c, corr);
  add_relevance(c, corr);
  add_output(c, corr);

  Flags contrib, trace, audit;
  auto* k = app.add_subcommand("contribute", "score training sources with a contributive method");
  auto* ft = app.add_subcommand("facttrace", "rank training sources and score them against exact-match ground truth");
  auto* au = app.add_subcommand("audit", "flag memorized outputs (exact match and counterfactual evidence)");
  for (auto [sub, flags] : {std::pair{k, &contrib}, std::pair{ft, &trace}, std::pair{au, &audit}}) {
    sub->set_config("--config");
    add_inputs(sub, *flags);
    add_backend(sub, *flags);
    add_evaluator(sub, *flags);
    add_method(sub, *flags);
    add_output(sub, *flags);
  }
  add_oracle(k, contrib);
  add_oracle(ft, trace);
  ft->add_option("--recall-k", trace.cfg.recall_k, "k for recall@k");
  ft->add_option("--baseline-shuffles", trace.cfg.baseline_shuffles, "random baseline shuffles");
  ft->add_option("--baseline-seed", trace.cfg.baseline_seed, "random baseline seed");
  add_enum(au, "--criterion", audit.cfg.audit_criterion, kCriteria, "joint, em-only, cco-only");

  MetricsFlags met;
  auto* m = app.add_subcommand("metrics", "evaluate attribution files against an oracle");
  m->set_config("--config");
  add_inputs(m, met.base);
  add_evaluator(m, met.base);
  add_oracle(m, met.base);
  add_relevance(m, met.base);
  add_output(m, met.base, false);
  m->add_option("--attributions", met.attributions, "attributions.jsonl files (2+ adds consistency)")
      ->required()
      ->check(CLI::ExistingFile);

  std::string report_dir;
  bool report_json = false;
  auto* r = app.add_subcommand("report", "print the summary of a run directory");
  r->add_option("run", report_dir, "run directory")->required();
  r->add_flag("--json", report_json, "print metrics.json instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (g->parsed()) return run_gen(gen);
    if (t->parsed()) return run_train(train);
    if (c->parsed()) {
      auto res = run_corroborate(finish(corr));
      std::cout << "attributions " << res.set.size() << " -> " << corr.cfg.output_dir << "\n";
      return 0;
    }
    if (k->parsed()) {
      auto res = run_contribute(finish(contrib));
      std::cout << "attributions " << res.set.size() << " -> " << contrib.cfg.output_dir << "\n";
      for (const auto& id : res.identities)
        if (!id["holds"].get<bool>()) return 3;
      return 0;
    }
    if (ft->parsed()) {
      auto res = run_facttrace(finish(trace));
      std::cout << "MRR " << detail::fmt(res.mrr) << " (baseline " << detail::fmt(res.baseline_mrr) << ") -> "
                << trace.cfg.output_dir << "\n";
      return 0;
    }
    if (au->parsed()) {
      auto res = run_memorization_audit(finish(audit));
      std::cout << "flagged " << res.flagged().size() << " -> " << audit.cfg.output_dir << "\n";
      return 0;
    }
    if (m->parsed()) return run_metrics(met);
    if (r->parsed()) return run_report(report_dir, report_json);
  } catch (const validation_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const runtime_failure& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
