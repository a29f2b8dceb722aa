#include <catch_amalgamated.hpp>

#include <chrono>

#include "attrib/corroborative.hpp"
#include "attrib/external.hpp"
#include "oracles.hpp"

using namespace attrib;
using namespace std::chrono_literals;

namespace {

std::string plugin(const std::string& script, const std::string& args = "") {
  return std::string(ATTRIB_PYTHON) + " " + ATTRIB_TEST_PLUGIN_DIR + "/" + script + " " + args;
}

AttributableUnit moon_unit() {
  return AttributableUnit(Query(tokenize("what is the diameter of the moon"), 1700000000),
                          ModelOutput{tokenize("3,475 kilometers")}, 0, 2);
}

}  // namespace

TEST_CASE("constant plugin scores every pair", "[external]") {
  ExternalEvaluator ev(plugin("constant.py", "1.0"));
  oracle::Rng rng(1);
  auto d = oracle::random_domain(rng, 5, 4);
  std::vector<AttributableUnit> units{moon_unit()};
  auto set = build_attribution_set(units, d, ev, 1.0);
  CHECK(set.size() == 5);
  CHECK(set.evaluator_name() == "external");
  for (const auto& a : set.attributions()) CHECK(a.score == 1.0);
  CHECK(eval_external(moon_unit(), d.sources()[0], ev) == 1.0);
}

TEST_CASE("out-of-range plugin scores are rejected with the payload", "[external]") {
  ExternalEvaluator ev(plugin("constant.py", "1.5"));
  try {
    ev(moon_unit(), Source("s", {"x"}));
    FAIL("expected an external evaluator error");
  } catch (const external_evaluator_error& e) {
    CHECK(e.payload().find("1.5") != std::string::npos);
  }
  ExternalEvaluator neg(plugin("constant.py", "-0.1"));
  CHECK_THROWS_AS(neg(moon_unit(), Source("s", {"x"})), external_evaluator_error);
}

TEST_CASE("malformed plugin replies raise errors", "[external]") {
  for (const char* mode : {"garbage", "missing", "string", "exit"}) {
    INFO(mode);
    ExternalEvaluator ev(plugin("misbehave.py", mode), 5s);
    CHECK_THROWS_AS(ev(moon_unit(), Source("s", {"x"})), external_evaluator_error);
  }
}

TEST_CASE("silent plugins time out", "[external]") {
  ExternalEvaluator ev(plugin("misbehave.py", "silent"), 300ms);
  auto t0 = std::chrono::steady_clock::now();
  CHECK_THROWS_AS(ev(moon_unit(), Source("s", {"x"})), external_evaluator_error);
  CHECK(std::chrono::steady_clock::now() - t0 < 5s);
}

TEST_CASE("exact-match plugin agrees with the built-in evaluator", "[external]") {
  ExternalEvaluator ev(plugin("exact_match.py"));
  oracle::Rng rng(3);
  auto d = oracle::random_domain(rng, 10, 4);
  auto z = oracle::random_unit(rng, d, 4);
  std::size_t hits = 0;
  for (const auto& s : d.sources()) {
    double expected = eval_exact_match(z, s);
    hits += expected == 1.0;
    CHECK(ev(z, s) == expected);
  }
  auto z2 = moon_unit();
  CHECK(ev(z2, Source("m", tokenize("the moon s diameter is 3,475 kilometers"))) == 1.0);
  CHECK(ev(z2, Source("n", tokenize("the moon is 3,475,000 meters across"))) == 0.0);
}

TEST_CASE("scoring errors from plugins propagate through set construction", "[external]") {
  ExternalEvaluator ev(plugin("misbehave.py", "garbage"), 5s);
  AttributionDomain d(DomainKind::external, {Source("s", {"x"})});
  std::vector<AttributableUnit> units{moon_unit()};
  CHECK_THROWS_AS(build_attribution_set(units, d, ev, 0.5), scoring_error);
}
