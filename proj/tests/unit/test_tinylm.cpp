#include <catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>

#include "attrib/tinylm.hpp"
#include "oracles.hpp"

using namespace attrib;
using Catch::Approx;

namespace {

AttributionDomain training(std::vector<Source> s) { return AttributionDomain(DomainKind::training, std::move(s)); }

AttributableUnit unit(TokenSeq query, TokenSeq output) {
  std::size_t n = output.size();
  return AttributableUnit(Query(std::move(query), 0), ModelOutput{std::move(output)}, 0, n);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

SoftmaxBigramModel random_softmax(oracle::Rng& rng, const Vocab& vocab, double scale, TrainConfig cfg = {}) {
  std::vector<double> w(vocab.size() * vocab.size());
  for (auto& x : w) x = rng.uniform(-scale, scale);
  return SoftmaxBigramModel(vocab, w, cfg, {});
}

}  // namespace

TEST_CASE("vocab layout and validation", "[tinylm][vocab]") {
  Vocab v({"a", "b"});
  CHECK(v.size() == 3);
  CHECK(v.index("<unk>") == 0);
  CHECK(v.index("a") == 1);
  CHECK(v.index("zzz") == Vocab::unk);
  CHECK_FALSE(v.eos().has_value());
  Vocab e({"a"}, true);
  CHECK(e.eos() == 1u);
  CHECK(e.index("a") == 2);
  CHECK_THROWS_AS(Vocab({"a", "a"}), parameter_error);
  CHECK_THROWS_AS(Vocab({"<unk>"}), parameter_error);
  CHECK_THROWS_AS(Vocab(std::vector<std::string>{}), parameter_error);
  auto d = training({Source("x", {"b", "a"}), Source("y", {"c"})});
  CHECK(Vocab::from_domain(d).tokens() == std::vector<std::string>{"<unk>", "</s>", "a", "b", "c"});
}

TEST_CASE("fit_counts examples", "[tinylm][count]") {
  Vocab v({"a", "b"});
  auto d = training({Source("s", {"a", "b", "a", "b"})});
  auto m = fit_counts(d, v, 1.0);
  std::size_t a = v.index("a"), b = v.index("b");
  CHECK(m.count(a, b) == 2);
  CHECK(m.count(b, a) == 1);
  CHECK(m.prob(a, b) == Approx(0.6).epsilon(1e-15));

  auto d2 = training({Source("s", {"a", "b", "a", "b"}), Source("t", {"a", "b", "a", "b"})});
  auto m2 = fit_counts(d2, v, 1.0);
  for (std::size_t x = 0; x < v.size(); ++x)
    for (std::size_t y = 0; y < v.size(); ++y) CHECK(m2.count(x, y) == 2 * m.count(x, y));

  auto single = fit_counts(training({Source("s", {"a"})}), v, 1.0);
  for (auto c : single.counts()) CHECK(c == 0);

  CHECK_THROWS_AS(fit_counts(training({}), v, 1.0), empty_domain_error);
  CHECK_THROWS_AS(fit_counts(AttributionDomain(DomainKind::external, {Source("s", {"a"})}), v, 1.0),
                  parameter_error);
  CHECK_THROWS_AS(fit_counts(d, v, 0.0), parameter_error);
}

TEST_CASE("count model matches the recount oracle and is row-stochastic", "[tinylm][count][property]") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    oracle::Rng rng(seed);
    auto d = oracle::random_domain(rng, rng.between(1, 8), 6);
    Vocab v = Vocab::from_domain(d);
    double lambda = rng.uniform(0.01, 2.0);
    auto m = fit_counts(d, v, lambda);
    auto known = oracle::distinct_tokens(d);
    auto c = oracle::recount(d.sources(), known, true);
    for (std::size_t a = 0; a < v.size(); ++a) {
      double row = 0.0;
      for (std::size_t b = 0; b < v.size(); ++b) {
        auto it = c.find({v.token(a), v.token(b)});
        CHECK(m.count(a, b) == (it == c.end() ? 0 : it->second));
        row += m.prob(a, b);
      }
      CHECK(std::abs(row - 1.0) <= 1e-12);
    }
    auto z = oracle::random_unit(rng, d, 7);
    CHECK(std::abs(loss(m, z) - oracle::recount_loss(d.sources(), z, known, true, lambda, v.size())) <= 1e-12);
  }
}

TEST_CASE("count fit is permutation invariant and additive", "[tinylm][count][property]") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    oracle::Rng rng(seed + 50);
    auto d = oracle::random_domain(rng, 6, 5);
    Vocab v = Vocab::from_domain(d);
    auto shuffled = d.sources();
    std::shuffle(shuffled.begin(), shuffled.end(), rng.eng);
    auto m1 = fit_counts(d, v, 0.5);
    auto m2 = fit_counts(training(shuffled), v, 0.5);
    CHECK(m1.counts() == m2.counts());
    auto z = oracle::random_unit(rng, d, 5);
    CHECK(loss(m1, z) == loss(m2, z));

    std::vector<Source> left(d.sources().begin(), d.sources().begin() + 3);
    std::vector<Source> right(d.sources().begin() + 3, d.sources().end());
    auto ml = fit_counts(training(left), v, 0.5);
    auto mr = fit_counts(training(right), v, 0.5);
    for (std::size_t k = 0; k < m1.counts().size(); ++k) CHECK(m1.counts()[k] == ml.counts()[k] + mr.counts()[k]);
  }
}

TEST_CASE("refit_without equals a full refit for every subset", "[tinylm][count][property]") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    oracle::Rng rng(seed + 200);
    auto d = oracle::random_domain(rng, rng.between(2, 8), 5, 1, 6);
    Vocab v = Vocab::from_domain(d);
    auto full = fit_counts(d, v, 0.3);
    auto ids = d.ids();
    auto z = oracle::random_unit(rng, d, 5);
    const std::size_t n = ids.size();
    for (std::size_t mask = 0; mask + 1 < (std::size_t{1} << n); ++mask) {
      std::vector<std::string> ex;
      for (std::size_t k = 0; k < n; ++k)
        if (mask & (std::size_t{1} << k)) ex.push_back(ids[k]);
      auto fast = refit_without(full, ex, d);
      auto slow = fit_counts(d.without(ex), v, 0.3);
      CHECK(fast == slow);
      CHECK(fast.trained_on() == slow.trained_on());
      CHECK(std::abs(loss(fast, z) - loss(slow, z)) <= 1e-12);
    }
  }
}

TEST_CASE("refit_without edge cases", "[tinylm][count]") {
  Vocab v({"a", "b"});
  auto d = training({Source("s", {"a", "b"}), Source("one", {"a"}), Source("t", {"b", "a"})});
  auto full = fit_counts(d, v, 1.0);
  CHECK(refit_without(full, {}, d) == full);
  std::vector<std::string> one{"one"};
  CHECK(refit_without(full, one, d).counts() == full.counts());
  std::vector<std::string> unknown{"nope"};
  CHECK_THROWS_AS(refit_without(full, unknown, d), parameter_error);
  std::vector<std::string> all{"s", "one", "t"};
  CHECK_THROWS_AS(refit_without(full, all, d), empty_domain_error);
}

TEST_CASE("loss conventions", "[tinylm][loss]") {
  Vocab v({"a", "b", "c"}, true);
  auto z = unit({"a"}, {"b", "c"});
  CHECK(loss(CountBigramModel::uniform(v, 1.0), z) == Approx(std::log(5.0)).epsilon(1e-15));
  CHECK(loss(SoftmaxBigramModel::uniform(v), z) == Approx(std::log(5.0)).epsilon(1e-15));
  // Large lambda approaches the uniform model.
  auto d = training({Source("s", {"a", "b", "c"})});
  CHECK(loss(fit_counts(d, v, 1e12), z) == Approx(std::log(5.0)).epsilon(1e-9));
  // Unknown tokens map to <unk>.
  auto zu = unit({"zzz"}, {"yyy"});
  CHECK(loss(fit_counts(d, v, 1.0), zu) == Approx(std::log(5.0)).epsilon(1e-12));
  // Span conditioning starts from the last query token.
  auto m = fit_counts(d, v, 1.0);
  AttributableUnit mid(Query({"q"}, 0), ModelOutput{{"a", "b", "c"}}, 1, 3);
  double expected = -(m.log_prob(v.index("a"), v.index("b")) + m.log_prob(v.index("b"), v.index("c"))) / 2;
  CHECK(loss(m, mid) == Approx(expected).epsilon(1e-15));
}

TEST_CASE("greedy decoding", "[tinylm][decode]") {
  auto d = training({Source("s", tokenize("the moon is 3,475 kilometers"))});
  Vocab v = Vocab::from_domain(d);
  auto m = fit_counts(d, v, 1.0);
  Query q(tokenize("how big is"), 0);
  auto y = greedy_decode(m, q, 5);
  CHECK(y.text == TokenSeq{"3,475", "kilometers"});
  CHECK(greedy_decode(m, q, 5) == y);
  CHECK(greedy_decode(m, q, 1).text == TokenSeq{"3,475"});
  CHECK_THROWS_AS(greedy_decode(m, q, 0), parameter_error);

  auto u = CountBigramModel::uniform(v, 1.0);
  CHECK(greedy_decode(u, q, 3).text == TokenSeq{"<unk>", "<unk>", "<unk>"});

  // Without an end token decoding runs to max_len.
  Vocab plain = Vocab::from_domain(d, false);
  auto mp = fit_counts(d, plain, 1.0);
  CHECK(greedy_decode(mp, q, 3).text.size() == 3);
}

TEST_CASE("sgd training is seeded and checkpointed", "[tinylm][sgd]") {
  oracle::Rng rng(4);
  auto d = oracle::random_domain(rng, 6, 5);
  Vocab v = Vocab::from_domain(d);
  TrainConfig cfg;
  cfg.seed = 11;
  cfg.epochs = 3;
  cfg.checkpoint_stride = 4;
  cfg.init_scale = 0.1;
  auto r1 = train_sgd(d, v, cfg);
  auto r2 = train_sgd(d, v, cfg);
  CHECK(r1.model.weights() == r2.model.weights());
  CHECK(r1.checkpoints == r2.checkpoints);
  // 6 sources x 3 epochs = 18 steps; snapshots at 0, 4, 8, 12, 16, 18.
  std::vector<std::size_t> steps;
  for (const auto& c : r1.checkpoints) steps.push_back(c.step);
  CHECK(steps == std::vector<std::size_t>{0, 4, 8, 12, 16, 18});
  CHECK(r1.checkpoints.back().params == r1.model.weights());
  auto ids = d.ids();
  for (const auto& c : r1.checkpoints)
    for (const auto& id : c.batch) CHECK(std::find(ids.begin(), ids.end(), id) != ids.end());

  cfg.seed = 12;
  CHECK(train_sgd(d, v, cfg).model.weights() != r1.model.weights());

  cfg.epochs = 0;
  auto r0 = train_sgd(d, v, cfg);
  REQUIRE(r0.checkpoints.size() == 1);
  CHECK(r0.checkpoints[0].step == 0);
  CHECK(r0.model.weights() == r0.checkpoints[0].params);
}

TEST_CASE("sgd learns a deterministic bigram corpus", "[tinylm][sgd]") {
  auto d = training({Source("s", {"a", "b", "a", "b", "a", "b", "a", "b"})});
  Vocab v({"a", "b"});
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.learning_rate = 0.5;
  auto r = train_sgd(d, v, cfg);
  CHECK(r.model.prob(v.index("a"), v.index("b")) >= 0.95);
  CHECK(loss(r.model, unit({"a"}, {"b", "a", "b"})) < 0.1);
}

TEST_CASE("full-batch training decreases the objective monotonically", "[tinylm][sgd][property]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    oracle::Rng rng(seed + 30);
    auto d = oracle::random_domain(rng, 8, 6);
    Vocab v = Vocab::from_domain(d);
    TrainConfig cfg;
    cfg.batch_size = 0;
    cfg.learning_rate = 0.5;
    cfg.epochs = 60;
    cfg.l2 = 1e-2;
    auto r = train_sgd(d, v, cfg);
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& c : r.checkpoints) {
      double j = training_objective(r.model.with_weights(c.params), d);
      CHECK(j <= prev + 1e-10);
      prev = j;
    }
  }
}

TEST_CASE("training divergence reports the step", "[tinylm][sgd]") {
  auto d = training({Source("s", {"a", "b"})});
  Vocab v({"a", "b"});
  TrainConfig cfg;
  cfg.learning_rate = 1e308;
  cfg.epochs = 5;
  try {
    train_sgd(d, v, cfg);
    FAIL("expected a training error");
  } catch (const training_error& e) {
    CHECK(e.step() >= 1);
  }
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(train_sgd(d, v, cfg), parameter_error);
}

TEST_CASE("softmax rows are stochastic", "[tinylm][softmax][property]") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    oracle::Rng rng(seed);
    Vocab v({"a", "b", "c", "d"}, true);
    auto m = random_softmax(rng, v, 30.0);
    for (std::size_t a = 0; a < v.size(); ++a) {
      double sum = 0;
      for (double p : m.row_probs(a)) sum += p;
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("analytic gradients match central differences", "[tinylm][grad][property]") {
  const double eps = 1e-4;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    oracle::Rng rng(seed + 70);
    auto d = oracle::random_domain(rng, 5, 4);
    Vocab v = Vocab::from_domain(d);
    TrainConfig cfg;
    cfg.l2 = 0.05;
    auto m = random_softmax(rng, v, 1.0, cfg);
    auto z = oracle::random_unit(rng, d, 4);
    auto gz = grad(m, z);
    auto gs = source_grad(m, d.sources()[0]);
    auto gj = training_gradient(m, d);
    for (std::size_t k = 0; k < gz.size(); ++k) {
      auto plus = m.weights(), minus = m.weights();
      plus[k] += eps;
      minus[k] -= eps;
      auto mp = m.with_weights(plus), mm = m.with_weights(minus);
      double fz = (loss(mp, z) - loss(mm, z)) / (2 * eps);
      double fs = (source_loss(mp, d.sources()[0]) - source_loss(mm, d.sources()[0])) / (2 * eps);
      double fj = (training_objective(mp, d) - training_objective(mm, d)) / (2 * eps);
      CHECK((rel_err(gz[k], fz) <= 1e-4 || std::abs(gz[k] - fz) <= 1e-9));
      CHECK((rel_err(gs[k], fs) <= 1e-4 || std::abs(gs[k] - fs) <= 1e-9));
      CHECK((rel_err(gj[k], fj) <= 1e-4 || std::abs(gj[k] - fj) <= 1e-9));
    }
  }
}

TEST_CASE("hessian is symmetric, PSD and matches gradient differences", "[tinylm][hessian][property]") {
  const double eps = 1e-5;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    oracle::Rng rng(seed + 90);
    auto d = oracle::random_domain(rng, 5, 4);
    Vocab v = Vocab::from_domain(d);
    TrainConfig cfg;
    cfg.l2 = 0.0;
    auto m = random_softmax(rng, v, 2.0, cfg);
    Eigen::MatrixXd h = hessian(m, d);
    CHECK((h - h.transpose()).cwiseAbs().maxCoeff() <= 1e-9);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    CHECK(es.eigenvalues().minCoeff() >= -1e-8);
    for (Eigen::Index k = 0; k < h.cols(); ++k) {
      auto plus = m.weights(), minus = m.weights();
      plus[static_cast<std::size_t>(k)] += eps;
      minus[static_cast<std::size_t>(k)] -= eps;
      auto gp = training_gradient(m.with_weights(plus), d);
      auto gm = training_gradient(m.with_weights(minus), d);
      for (Eigen::Index r = 0; r < h.rows(); ++r) {
        double fd = (gp[static_cast<std::size_t>(r)] - gm[static_cast<std::size_t>(r)]) / (2 * eps);
        CHECK(std::abs(fd - h(r, k)) <= 1e-6);
      }
    }
    std::vector<AttributableUnit> units{oracle::random_unit(rng, d, 4), oracle::random_unit(rng, d, 4)};
    Eigen::MatrixXd hu = hessian(m, units);
    CHECK((hu - hu.transpose()).cwiseAbs().maxCoeff() <= 1e-9);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eu(hu);
    CHECK(eu.eigenvalues().minCoeff() >= -1e-8);
  }
}

TEST_CASE("dense limit guards the hessian", "[tinylm][hessian]") {
  std::vector<std::string> toks;
  for (int k = 0; k < 70; ++k) toks.push_back("w" + std::to_string(k));
  Vocab v(toks);
  auto m = SoftmaxBigramModel::uniform(v);
  auto d = training({Source("s", {"w0", "w1"})});
  CHECK_THROWS_AS(hessian(m, d), capacity_error);
  CHECK_NOTHROW(hessian(m, d, 71 * 71));
}

TEST_CASE("converged model is stationary", "[tinylm][sgd]") {
  oracle::Rng rng(5);
  auto d = oracle::random_domain(rng, 6, 4);
  Vocab v = Vocab::from_domain(d);
  TrainConfig cfg;
  cfg.batch_size = 0;
  cfg.learning_rate = 1.5;
  cfg.l2 = 0.05;
  cfg.epochs = 600;
  auto r = train_sgd(d, v, cfg);
  double norm = 0;
  for (double g : training_gradient(r.model, d)) norm += g * g;
  CHECK(std::sqrt(norm) <= 1e-3);
}

TEST_CASE("models persist as json", "[tinylm][persist]") {
  oracle::Rng rng(8);
  auto d = oracle::random_domain(rng, 4, 5);
  Vocab v = Vocab::from_domain(d);
  auto cm = fit_counts(d, v, 0.25);
  auto cm2 = count_model_from_json(nlohmann::json::parse(to_json(cm).dump()));
  CHECK(cm2 == cm);
  CHECK(cm2.trained_on() == cm.trained_on());

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 3;
  auto r = train_sgd(d, v, cfg);
  auto sm = softmax_model_from_json(nlohmann::json::parse(to_json(r.model).dump()));
  CHECK(sm == r.model);
  CHECK(sm.config() == r.model.config());
  auto ck = checkpoints_from_json(nlohmann::json::parse(to_json(r.checkpoints).dump()));
  CHECK(ck == r.checkpoints);
}

TEST_CASE("sgd backend retrains without a source using the same schedule", "[tinylm][backend]") {
  oracle::Rng rng(12);
  auto d = oracle::random_domain(rng, 5, 4);
  Vocab v = Vocab::from_domain(d);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 2;
  SgdBackend b(v, cfg);
  auto full = b.fit(d);
  std::vector<std::string> ex{d.ids()[1]};
  auto cf = b.without(full, d, ex);
  CHECK(cf.weights() == train_sgd(d.without(ex), v, cfg).model.weights());
  std::vector<std::string> bad{"missing"};
  CHECK_THROWS_AS(b.without(full, d, bad), parameter_error);
}
