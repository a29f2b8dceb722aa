#include <catch_amalgamated.hpp>

#include <fstream>
#include <sstream>

#include "attrib/corpora.hpp"
#include "attrib/pipeline.hpp"
#include "oracles.hpp"

using namespace attrib;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("attrib-test-" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Writes corpus.jsonl and queries.jsonl and points cfg at them.
void stage(ExperimentConfig& cfg, const fs::path& dir, const Corpus& c) {
  {
    std::ofstream f(dir / "corpus.jsonl");
    write_sources(f, c.domain.sources());
  }
  {
    std::ofstream f(dir / "queries.jsonl");
    write_units(f, c.units);
  }
  cfg.corpus_path = (dir / "corpus.jsonl").string();
  cfg.queries_path = (dir / "queries.jsonl").string();
}

Inputs moon_inputs(DomainKind kind = DomainKind::external) {
  Inputs in;
  in.domain = AttributionDomain(kind, {Source("moon", tokenize("the moon s diameter is 3,475 kilometers")),
                                       Source("mars", tokenize("mars is a red planet")),
                                       Source("near", tokenize("the moon is 3,475,000 meters across"))});
  in.units.emplace_back(Query(tokenize("what is the diameter of the moon"), kCorpusEpoch),
                        ModelOutput{tokenize("3,475 kilometers")}, 0, 2);
  return in;
}

}  // namespace

TEST_CASE("ingest parses files in order and reports bad lines", "[pipeline][ingest]") {
  auto dir = scratch("ingest");
  write_file(dir / "c.jsonl",
             "{\"id\": \"b\", \"text\": \"two words\"}\n"
             "{\"id\": \"a\", \"text\": \"one\", \"meta\": {\"priority\": \"primary\"}}\n"
             "\n"
             "{\"id\": \"c\", \"text\": \"three more words\"}\n");
  write_file(dir / "q.jsonl", "{\"query\": \"say two\", \"issued_at\": 5, \"output\": \"two words\", \"span\": [0, 2]}\n");
  auto in = ingest((dir / "c.jsonl").string(), (dir / "q.jsonl").string());
  CHECK(in.domain.ids() == std::vector<std::string>{"b", "a", "c"});
  CHECK(in.domain.at("a").meta().at("priority") == "primary");
  REQUIRE(in.units.size() == 1);
  CHECK(join_tokens(in.units[0].span_tokens()) == "two words");

  write_file(dir / "dup.jsonl",
             "{\"id\": \"a\", \"text\": \"x\"}\n{\"id\": \"b\", \"text\": \"y\"}\n{\"id\": \"a\", \"text\": \"z\"}\n");
  try {
    ingest((dir / "dup.jsonl").string(), (dir / "q.jsonl").string());
    FAIL("expected an ingestion error");
  } catch (const ingestion_error& e) {
    CHECK(e.line() == 3);
    CHECK(std::string(e.what()).find("'a'") != std::string::npos);
  }

  write_file(dir / "badspan.jsonl",
             "{\"query\": \"q\", \"issued_at\": 0, \"output\": \"a b\", \"span\": [0, 2]}\n"
             "{\"query\": \"q\", \"issued_at\": 0, \"output\": \"a b\", \"span\": [1, 3]}\n");
  try {
    ingest((dir / "c.jsonl").string(), (dir / "badspan.jsonl").string());
    FAIL("expected an ingestion error");
  } catch (const ingestion_error& e) {
    CHECK(e.line() == 2);
  }

  write_file(dir / "garbage.jsonl", "{\"id\": \"a\", \"text\": \"x\"}\nnot json\n");
  CHECK_THROWS_AS(ingest((dir / "garbage.jsonl").string(), (dir / "q.jsonl").string()), ingestion_error);
  write_file(dir / "missing.jsonl", "{\"id\": \"a\"}\n");
  CHECK_THROWS_AS(ingest((dir / "missing.jsonl").string(), (dir / "q.jsonl").string()), ingestion_error);
  CHECK_THROWS_AS(ingest((dir / "nope.jsonl").string(), (dir / "q.jsonl").string()), validation_error);
}

TEST_CASE("config validation", "[pipeline][config]") {
  ExperimentConfig cfg;
  CHECK_NOTHROW(cfg.validate(false));
  CHECK_THROWS_AS(cfg.validate(true), parameter_error);

  auto bad = cfg;
  bad.method = Method::shapley_exact;
  bad.prefilter_k = 13;
  CHECK_THROWS_AS(bad.validate(false), mode_error);
  bad.prefilter_k = 12;
  CHECK_NOTHROW(bad.validate(false));

  bad = cfg;
  bad.method = Method::influence;
  CHECK_THROWS_AS(bad.validate(false), mode_error);
  bad.backend = BackendKind::sgd;
  CHECK_NOTHROW(bad.validate(false));
  bad.method = Method::tracin_ideal;
  bad.train.batch_size = 2;
  CHECK_THROWS_AS(bad.validate(false), mode_error);

  bad = cfg;
  bad.r = 1.5;
  CHECK_THROWS_AS(bad.validate(false), parameter_error);
  bad = cfg;
  bad.priority_weights = {{"x", 2.0}};
  CHECK_THROWS_AS(bad.validate(false), parameter_error);
  bad = cfg;
  bad.evaluator.kind = EvaluatorKind::external;
  CHECK_THROWS_AS(bad.validate(false), parameter_error);

  auto other = cfg;
  other.lambda = 0.2;
  CHECK(cfg.hash() == ExperimentConfig{}.hash());
  CHECK(cfg.hash() != other.hash());
  other = cfg;
  other.output_dir = "/somewhere/else";
  CHECK(cfg.hash() == other.hash());

  CHECK(backend_from_string("sgd") == BackendKind::sgd);
  CHECK(evaluator_from_string("textual_entailment") == EvaluatorKind::textual_entailment);
  CHECK(relevance_from_string("min") == RelevanceKind::min);
  CHECK(audit_criterion_from_string("cco-only") == AuditCriterion::cco_only);
  CHECK_THROWS_AS(backend_from_string("gpu"), parameter_error);
}

TEST_CASE("corroborate: moon example", "[pipeline][corroborate]") {
  auto in = moon_inputs();
  ExperimentConfig cfg;
  cfg.domain_kind = DomainKind::external;
  cfg.oracle = EvaluatorSpec{};
  auto r = run_corroborate(cfg, in);
  REQUIRE(r.set.size() == 1);
  CHECK(r.set.contains(0, "moon"));
  CHECK(r.report.coverage == 1.0);
  CHECK(r.report.precision == 1.0);
  CHECK(r.report.recall.at(0) == 1.0);

  cfg.alpha = 1.5;
  auto none = run_corroborate(cfg, in);
  CHECK(none.set.empty());
  CHECK(none.report.coverage == 0.0);
  CHECK(none.report.precision == 1.0);
}

TEST_CASE("corroborate: paraphrase-only sources fail a strict tfidf threshold", "[pipeline][corroborate]") {
  auto dir = scratch("paraphrase");
  write_file(dir / "table.txt", "kilometers km\n");
  Inputs in;
  in.domain = AttributionDomain(DomainKind::external, {Source("p1", tokenize("the moon spans 3,475 km")),
                                                       Source("p2", tokenize("3,475 km across is the moon"))});
  in.units.emplace_back(Query(tokenize("how wide is the moon"), 0), ModelOutput{tokenize("3,475 kilometers")}, 0, 2);
  ExperimentConfig cfg;
  cfg.domain_kind = DomainKind::external;
  cfg.evaluator.kind = EvaluatorKind::valid_paraphrase;
  cfg.evaluator.paraphrase_path = (dir / "table.txt").string();
  auto base = run_corroborate(cfg, in);
  CHECK(base.set.size() == 2);

  cfg.relevance = RelevanceKind::tfidf;
  cfg.r = 0.99;
  auto strict = run_corroborate(cfg, in);
  CHECK(strict.set.empty());
  CHECK_FALSE(strict.report.r_relevancy.has_value());
  auto idx = build_index(in.domain);
  std::vector<TokenSeq> docs{in.domain.sources()[0].text(), in.domain.sources()[1].text()};
  for (std::size_t k = 0; k < 2; ++k) CHECK(oracle::tfidf_cosine(docs, query_and_span(in.units[0]), k) < 0.99);

  cfg.r = 0.1;
  auto loose = run_corroborate(cfg, in);
  CHECK(loose.set.size() == 2);
  CHECK(loose.report.r_relevancy == 1.0);
}

TEST_CASE("contribute: loo on the unique-fact corpus", "[pipeline][contribute]") {
  auto c = unique_fact_corpus(11, 5);
  Inputs in{c.domain, c.units};
  ExperimentConfig cfg;
  cfg.oracle = EvaluatorSpec{};
  cfg.runs = 2;
  auto r = run_contribute(cfg, in);
  REQUIRE(r.tables.size() == 5);
  for (std::size_t u = 0; u < 5; ++u) {
    CHECK(r.tables[u].argmax() == c.fact_sources[u].front());
    CHECK(r.set.contains(u, c.fact_sources[u].front()));
  }
  CHECK(r.set.size() == 5);
  REQUIRE(r.report.consistency.has_value());
  CHECK(r.report.consistency->mean == 0.0);
  CHECK(r.report.precision == 1.0);
  CHECK(r.report.coverage == 1.0);
}

TEST_CASE("contribute: identities are reported", "[pipeline][contribute]") {
  auto c = unique_fact_corpus(2, 4);
  Inputs in{c.domain, c.units};
  ExperimentConfig cfg;
  cfg.backend = BackendKind::sgd;
  cfg.method = Method::tracin_ideal;
  cfg.train.epochs = 3;
  auto r = run_contribute(cfg, in);
  REQUIRE(r.identities.size() == 4);
  for (const auto& id : r.identities) {
    CHECK(id["identity"] == "tracin-telescoping");
    CHECK(id["holds"] == true);
  }

  ExperimentConfig sc;
  sc.method = Method::shapley_exact;
  auto s = run_contribute(sc, in);
  REQUIRE(s.identities.size() == 4);
  for (const auto& id : s.identities) CHECK(id["holds"] == true);

  ExperimentConfig big;
  big.method = Method::shapley_exact;
  auto many = unique_fact_corpus(2, 13);
  CHECK_THROWS_AS(run_contribute(big, Inputs{many.domain, many.units}), mode_error);
  big.prefilter_k = 4;
  auto pf = run_contribute(big, Inputs{many.domain, {many.units[0]}});
  CHECK(pf.tables[0].size() == 4);
  CHECK(pf.candidates[0].front() == many.fact_sources[0].front());
}

TEST_CASE("contribute rejects non-training domains", "[pipeline][contribute]") {
  auto in = moon_inputs(DomainKind::external);
  ExperimentConfig cfg;
  CHECK_THROWS_AS(run_contribute(cfg, in), parameter_error);
  CHECK_THROWS_AS(run_memorization_audit(cfg, in), parameter_error);
}

TEST_CASE("fact tracing on the unique-fact corpus", "[pipeline][facttrace]") {
  auto c = unique_fact_corpus(5, 5);
  Inputs in{c.domain, c.units};
  // A unit about something no source states.
  in.units.emplace_back(Query(tokenize("what is the diameter of atlantis"), kCorpusEpoch),
                        ModelOutput{tokenize("12 leagues")}, 0, 2);
  ExperimentConfig cfg;
  auto r = run_facttrace(cfg, in);
  CHECK(r.mrr == 1.0);
  CHECK(r.mean_recall_at_k == 1.0);
  REQUIRE(r.baseline_mrr.has_value());
  CHECK(*r.baseline_mrr <= 0.6);
  // Expected MRR of a uniform shuffle over 5 candidates with one target.
  CHECK(std::abs(*r.baseline_mrr - (1.0 + 0.5 + 1.0 / 3 + 0.25 + 0.2) / 5) < 0.03);
  CHECK(r.excluded == std::vector<std::size_t>{5});
  CHECK_FALSE(r.units[5].reciprocal_rank.has_value());

  auto again = run_facttrace(cfg, in);
  CHECK(again.baseline_mrr == r.baseline_mrr);

  for (auto m : {Method::shapley_exact, Method::cco_exact_match}) {
    ExperimentConfig other = cfg;
    other.method = m;
    auto o = run_facttrace(other, in);
    for (std::size_t u = 0; u < in.units.size(); ++u) CHECK(o.units[u].ground_truth == r.units[u].ground_truth);
  }
}

TEST_CASE("memorization audit", "[pipeline][audit]") {
  ExperimentConfig cfg;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto dup = duplicated_fact_corpus(seed);
    Inputs in{dup.domain, dup.units};
    auto joint = run_memorization_audit(cfg, in);
    REQUIRE(joint.units.size() == 4);
    // Decoded outputs reproduce each fact.
    for (std::size_t u = 0; u < 4; ++u) CHECK(joint.units[u].output() == dup.units[u].output());
    auto flagged = joint.flagged();
    std::vector<std::pair<std::size_t, std::string>> expected{{1, "src-2"}, {2, "src-3"}, {3, "src-4"}};
    CHECK(flagged == expected);
    for (const auto& row : joint.rows)
      if (row.unit_ref == 0 && (row.source_id == "src-0" || row.source_id == "src-1")) {
        CHECK(row.exact_match == 1);
        CHECK(row.cco == 0);
      }

    auto count = [](const AuditResult& r) {
      auto f = r.flagged();
      return std::set<std::pair<std::size_t, std::string>>(f.begin(), f.end());
    };
    auto jset = count(joint);
    for (auto crit : {AuditCriterion::em_only, AuditCriterion::cco_only}) {
      ExperimentConfig ab = cfg;
      ab.audit_criterion = crit;
      auto aset = count(run_memorization_audit(ab, in));
      CHECK(std::includes(aset.begin(), aset.end(), jset.begin(), jset.end()));
    }
  }

  auto uniq = unique_fact_corpus(9, 5);
  auto u = run_memorization_audit(cfg, Inputs{uniq.domain, uniq.units});
  CHECK(u.flagged().size() == 5);

  Inputs absent{uniq.domain, {}};
  absent.units.emplace_back(Query(tokenize("zebra quantum"), 0), ModelOutput{{"x"}}, 0, 1);
  auto a = run_memorization_audit(cfg, absent);
  CHECK(a.flagged().empty());
}

TEST_CASE("stable output is byte-identical across runs", "[pipeline][reproducible]") {
  auto dir = scratch("repro");
  auto c = unique_fact_corpus(4, 5);
  ExperimentConfig cfg;
  stage(cfg, dir, c);
  cfg.stable_output = true;
  cfg.oracle = EvaluatorSpec{};
  std::map<std::string, std::string> first;
  for (int run = 0; run < 2; ++run) {
    cfg.output_dir = (dir / ("run" + std::to_string(run))).string();
    run_contribute(cfg);
    for (const auto* name : {"attributions.jsonl", "scores.jsonl", "metrics.json", "report.txt"}) {
      auto text = read_file(fs::path(cfg.output_dir) / name);
      if (run == 0) first[name] = text;
      else CHECK(text == first[name]);
    }
  }
  auto doc = nlohmann::json::parse(first["metrics.json"]);
  CHECK(doc["provenance"]["config_hash"] == cfg.hash());
  CHECK_FALSE(doc["metrics"].contains("efficiency"));

  cfg.stable_output = false;
  cfg.output_dir = (dir / "timed").string();
  run_contribute(cfg);
  auto timed = nlohmann::json::parse(read_file(fs::path(cfg.output_dir) / "metrics.json"));
  CHECK(timed["metrics"]["efficiency"].size() >= 2);
}

TEST_CASE("path-driven runs write every report file", "[pipeline][files]") {
  auto dir = scratch("files");
  auto c = duplicated_fact_corpus(1);
  ExperimentConfig cfg;
  stage(cfg, dir, c);
  cfg.output_dir = (dir / "corr").string();
  cfg.domain_kind = DomainKind::training;
  run_corroborate(cfg);
  cfg.output_dir = (dir / "trace").string();
  auto ft = run_facttrace(cfg);
  cfg.output_dir = (dir / "audit").string();
  run_memorization_audit(cfg);
  for (const auto* sub : {"corr", "trace", "audit"})
    for (const auto* name : {"attributions.jsonl", "scores.jsonl", "metrics.json", "report.txt"})
      CHECK(fs::exists(dir / sub / name));
  auto doc = nlohmann::json::parse(read_file(dir / "trace" / "metrics.json"));
  CHECK(doc["details"]["facttrace"]["mrr"] == *ft.mrr);
  std::ifstream attrs(dir / "corr" / "attributions.jsonl");
  auto rows = read_attributions(attrs);
  CHECK(rows.size() == 5);
}
