#pragma once

// Two bigram language models that play the role of M:
//
//  * CountBigramModel: additive-smoothed counts, fitted in closed form. Refits
//    are exact and cheap, which makes leave-one-out and subset retraining
//    usable as ground truth.
//  * SoftmaxBigramModel: one logit row per predecessor, trained by seeded
//    SGD with optional L2 decay. Provides analytic gradients, the dense
//    Hessian and training checkpoints for influence functions and TracIn.
//
// Parameters are stored row-major: entry (a, b) scores successor b after a.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "attrib/core.hpp"

namespace attrib {

// ---------------------------------------------------------------------------
// Vocabulary

/// Index 0 is always <unk>. When built with an end-of-text token, </s> sits
/// at index 1 and every source contributes a closing (last, </s>) bigram.
class Vocab {
 public:
  static constexpr std::size_t unk = 0;

  explicit Vocab(std::vector<std::string> tokens, bool with_eos = false) {
    tokens_.emplace_back(kUnkToken);
    if (with_eos) {
      eos_ = 1;
      tokens_.emplace_back(kEosToken);
    }
    for (auto& t : tokens) {
      if (t == kUnkToken || t == kEosToken) throw parameter_error("vocab lists reserved token " + t);
      tokens_.push_back(std::move(t));
    }
    for (std::size_t k = 0; k < tokens_.size(); ++k) {
      if (!index_.emplace(tokens_[k], k).second) {
        throw parameter_error("duplicate vocab token '" + tokens_[k] + "'");
      }
    }
    if (tokens_.size() < 2) throw parameter_error("vocab needs at least 2 entries");
  }

  /// Sorted distinct tokens of the domain, so the layout does not depend on source order.
  static Vocab from_domain(const AttributionDomain& domain, bool with_eos = true) {
    std::set<std::string> distinct;
    for (const auto& s : domain.sources())
      for (const auto& t : s.text())
        if (t != kUnkToken && t != kEosToken) distinct.insert(t);
    return Vocab({distinct.begin(), distinct.end()}, with_eos);
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  std::optional<std::size_t> eos() const noexcept { return eos_; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& token(std::size_t k) const { return tokens_.at(k); }

  std::size_t index(const std::string& t) const {
    auto it = index_.find(t);
    return it == index_.end() ? unk : it->second;
  }

  bool contains(const std::string& t) const { return index_.count(t) > 0; }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.tokens_ == b.tokens_ && a.eos_ == b.eos_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
  std::optional<std::size_t> eos_;
};

struct Bigram {
  std::size_t prev;
  std::size_t next;
};

/// Adjacent pairs of s (plus the closing </s> pair when the vocab has one).
inline std::vector<Bigram> source_bigrams(const Source& s, const Vocab& vocab) {
  std::vector<Bigram> out;
  const auto& t = s.text();
  for (std::size_t k = 1; k < t.size(); ++k) out.push_back({vocab.index(t[k - 1]), vocab.index(t[k])});
  if (auto eos = vocab.eos(); eos && !t.empty()) out.push_back({vocab.index(t.back()), *eos});
  return out;
}

/// (predecessor, token) pairs scored by the loss on unit z. The last query
/// token precedes y[0].
inline std::vector<Bigram> span_bigrams(const AttributableUnit& z, const Vocab& vocab) {
  std::vector<Bigram> out;
  const auto& y = z.output().text;
  for (std::size_t k = z.span_start(); k < z.span_end(); ++k) {
    const std::string& prev = k == 0 ? z.query().last_token() : y[k - 1];
    out.push_back({vocab.index(prev), vocab.index(y[k])});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Count backend

class CountBigramModel {
 public:
  CountBigramModel(Vocab vocab, double lambda, std::vector<std::int64_t> counts,
                   std::vector<std::string> trained_on)
      : vocab_(std::move(vocab)),
        lambda_(lambda),
        counts_(std::move(counts)),
        trained_on_(std::move(trained_on)) {
    const std::size_t v = vocab_.size();
    if (!(lambda_ > 0.0)) throw parameter_error("smoothing lambda must be positive");
    if (counts_.size() != v * v) throw parameter_error("count matrix does not match the vocab");
    row_totals_.assign(v, 0);
    for (std::size_t a = 0; a < v; ++a) {
      for (std::size_t b = 0; b < v; ++b) {
        if (counts_[a * v + b] < 0) throw parameter_error("negative bigram count");
        row_totals_[a] += counts_[a * v + b];
      }
    }
  }

  /// No training data: every conditional is uniform.
  static CountBigramModel uniform(Vocab vocab, double lambda) {
    std::size_t v = vocab.size();
    return CountBigramModel(std::move(vocab), lambda, std::vector<std::int64_t>(v * v, 0), {});
  }

  const Vocab& vocab() const noexcept { return vocab_; }
  double lambda() const noexcept { return lambda_; }
  const std::vector<std::int64_t>& counts() const noexcept { return counts_; }
  const std::vector<std::string>& trained_on() const noexcept { return trained_on_; }

  std::int64_t count(std::size_t a, std::size_t b) const { return counts_[a * vocab_.size() + b]; }
  std::int64_t row_total(std::size_t a) const { return row_totals_[a]; }

  double prob(std::size_t a, std::size_t b) const {
    const double v = static_cast<double>(vocab_.size());
    return (static_cast<double>(count(a, b)) + lambda_) /
           (static_cast<double>(row_total(a)) + lambda_ * v);
  }

  double log_prob(std::size_t a, std::size_t b) const { return std::log(prob(a, b)); }

  // Probabilities are monotone in counts within a row, so counts rank successors.
  double successor_score(std::size_t a, std::size_t b) const {
    return static_cast<double>(count(a, b));
  }

  friend bool operator==(const CountBigramModel& x, const CountBigramModel& y) {
    return x.vocab_ == y.vocab_ && x.lambda_ == y.lambda_ && x.counts_ == y.counts_;
  }

 private:
  friend CountBigramModel refit_without(const CountBigramModel&, std::span<const std::string>,
                                        const AttributionDomain&);

  Vocab vocab_;
  double lambda_;
  std::vector<std::int64_t> counts_;
  std::vector<std::int64_t> row_totals_;
  std::vector<std::string> trained_on_;
};

/// Exact bigram tallies over every source of a training domain.
inline CountBigramModel fit_counts(const AttributionDomain& domain, const Vocab& vocab,
                                   double lambda) {
  domain.require_training("fit_counts");
  if (domain.empty()) throw empty_domain_error("cannot fit a model on an empty domain");
  const std::size_t v = vocab.size();
  std::vector<std::int64_t> counts(v * v, 0);
  for (const auto& s : domain.sources())
    for (auto [a, b] : source_bigrams(s, vocab)) ++counts[a * v + b];
  return CountBigramModel(vocab, lambda, std::move(counts), domain.ids());
}

/// The model fitted on D minus `excluded`, obtained by subtracting the
/// excluded sources' tallies from `model`.
inline CountBigramModel refit_without(const CountBigramModel& model,
                                      std::span<const std::string> excluded,
                                      const AttributionDomain& domain) {
  const auto& trained = model.trained_on();
  std::vector<std::string> drop;
  for (const auto& id : excluded) {
    if (std::find(trained.begin(), trained.end(), id) == trained.end()) {
      throw parameter_error("source '" + id + "' is not part of the model's training data");
    }
    if (std::find(drop.begin(), drop.end(), id) == drop.end()) drop.push_back(id);
  }
  if (drop.size() == trained.size()) {
    throw empty_domain_error("excluding every training source leaves no training data");
  }
  CountBigramModel out = model;
  const std::size_t v = model.vocab().size();
  for (const auto& id : drop) {
    for (auto [a, b] : source_bigrams(domain.at(id), model.vocab())) {
      if (--out.counts_[a * v + b] < 0) {
        throw parameter_error("domain does not match the model's training data");
      }
      --out.row_totals_[a];
    }
  }
  std::erase_if(out.trained_on_, [&](const std::string& id) {
    return std::find(drop.begin(), drop.end(), id) != drop.end();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax backend

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 100;
  double learning_rate = 0.5;
  std::size_t batch_size = 1;  // sources per step; 0 means full batch
  std::size_t checkpoint_stride = 1;
  double l2 = 1e-3;          // weight decay; part of the training objective
  double init_scale = 0.0;   // std-dev of the seeded normal initialization

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw parameter_error("learning rate must be positive");
    }
    if (checkpoint_stride < 1) throw parameter_error("checkpoint stride must be at least 1");
    if (!(l2 >= 0.0)) throw parameter_error("l2 must be non-negative");
    if (!(init_scale >= 0.0)) throw parameter_error("init_scale must be non-negative");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

class SoftmaxBigramModel {
 public:
  SoftmaxBigramModel(Vocab vocab, std::vector<double> weights, TrainConfig config,
                     std::vector<std::string> trained_on)
      : vocab_(std::move(vocab)),
        weights_(std::move(weights)),
        config_(config),
        trained_on_(std::move(trained_on)) {
    if (weights_.size() != vocab_.size() * vocab_.size()) {
      throw parameter_error("weight matrix does not match the vocab");
    }
    refresh();
  }

  /// All-zero logits: the uniform model.
  static SoftmaxBigramModel uniform(Vocab vocab, TrainConfig config = {}) {
    std::size_t v = vocab.size();
    return SoftmaxBigramModel(std::move(vocab), std::vector<double>(v * v, 0.0), config, {});
  }

  const Vocab& vocab() const noexcept { return vocab_; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  const TrainConfig& config() const noexcept { return config_; }
  const std::vector<std::string>& trained_on() const noexcept { return trained_on_; }
  std::size_t parameter_count() const noexcept { return weights_.size(); }

  double weight(std::size_t a, std::size_t b) const { return weights_[a * vocab_.size() + b]; }
  double log_prob(std::size_t a, std::size_t b) const { return weight(a, b) - log_norm_[a]; }
  double prob(std::size_t a, std::size_t b) const { return std::exp(log_prob(a, b)); }
  double successor_score(std::size_t a, std::size_t b) const { return weight(a, b); }

  /// softmax(W[a]).
  std::vector<double> row_probs(std::size_t a) const {
    const std::size_t v = vocab_.size();
    std::vector<double> p(v);
    for (std::size_t b = 0; b < v; ++b) p[b] = std::exp(weight(a, b) - log_norm_[a]);
    return p;
  }

  /// Same model with replaced parameters (checkpoint snapshots).
  SoftmaxBigramModel with_weights(std::vector<double> weights) const {
    return SoftmaxBigramModel(vocab_, std::move(weights), config_, trained_on_);
  }

  friend bool operator==(const SoftmaxBigramModel& x, const SoftmaxBigramModel& y) {
    return x.vocab_ == y.vocab_ && x.weights_ == y.weights_;
  }

 private:
  void refresh() {
    const std::size_t v = vocab_.size();
    log_norm_.assign(v, 0.0);
    for (std::size_t a = 0; a < v; ++a) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t b = 0; b < v; ++b) mx = std::max(mx, weight(a, b));
      double sum = 0.0;
      for (std::size_t b = 0; b < v; ++b) sum += std::exp(weight(a, b) - mx);
      log_norm_[a] = mx + std::log(sum);
    }
  }

  Vocab vocab_;
  std::vector<double> weights_;
  TrainConfig config_;
  std::vector<std::string> trained_on_;
  std::vector<double> log_norm_;
};

/// Parameters after `step` updates. `batch` holds the sources of the update
/// that produced them (empty for the initial snapshot).
struct Checkpoint {
  std::size_t step = 0;
  std::vector<double> params;
  std::vector<std::string> batch;
  double learning_rate = 0.0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct TrainResult {
  SoftmaxBigramModel model;
  std::vector<Checkpoint> checkpoints;
};

namespace detail {

// Bigram tallies of one source with weight 1/n_s per occurrence, so that the
// per-source loss is the mean NLL over its bigrams.
struct SourceTally {
  std::string id;
  std::vector<std::pair<Bigram, double>> weighted;  // aggregated, weight = count / n_s
};

inline SourceTally tally_source(const Source& s, const Vocab& vocab) {
  std::vector<Bigram> bg = source_bigrams(s, vocab);
  std::vector<std::pair<Bigram, double>> agg;
  if (!bg.empty()) {
    std::sort(bg.begin(), bg.end(), [](const Bigram& x, const Bigram& y) {
      return std::tie(x.prev, x.next) < std::tie(y.prev, y.next);
    });
    const double w = 1.0 / static_cast<double>(bg.size());
    for (const auto& b : bg) {
      if (!agg.empty() && agg.back().first.prev == b.prev && agg.back().first.next == b.next) {
        agg.back().second += w;
      } else {
        agg.push_back({b, w});
      }
    }
  }
  return {s.id(), std::move(agg)};
}

// Seeded generator helpers with a fixed algorithm, so runs are reproducible
// across standard library implementations.
class SplitRng {
 public:
  explicit SplitRng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t k = v.size(); k > 1; --k) std::swap(v[k - 1], v[below(k)]);
  }

 private:
  std::mt19937_64 engine_;
};

// Accumulates W-shaped gradient pieces row by row: for a row with target
// weights T[a][.] summing to R[a], the gradient is R[a] softmax(W[a]) - T[a].
class RowAccumulator {
 public:
  explicit RowAccumulator(std::size_t v) : v_(v), targets_(v * v, 0.0), row_weight_(v, 0.0) {}

  void add(const Bigram& b, double w) {
    targets_[b.prev * v_ + b.next] += w;
    row_weight_[b.prev] += w;
  }

  // Adds the gradient into `grad` and returns the weighted NLL.
  double accumulate(const SoftmaxBigramModel& m, std::vector<double>& grad) const {
    double nll = 0.0;
    for (std::size_t a = 0; a < v_; ++a) {
      if (row_weight_[a] == 0.0) continue;
      auto p = m.row_probs(a);
      for (std::size_t b = 0; b < v_; ++b) {
        double t = targets_[a * v_ + b];
        grad[a * v_ + b] += row_weight_[a] * p[b] - t;
        if (t != 0.0) nll -= t * m.log_prob(a, b);
      }
    }
    return nll;
  }

  const std::vector<double>& row_weight() const noexcept { return row_weight_; }

 private:
  std::size_t v_;
  std::vector<double> targets_;
  std::vector<double> row_weight_;
};

}  // namespace detail

/// Seeded mini-batch SGD on next-token cross-entropy plus (l2/2)|W|^2.
/// Batches are groups of whole sources; each source counts through its
/// mean bigram NLL. Checkpoints are taken at step 0, every `stride` steps,
/// and at the final step.
inline TrainResult train_sgd(const AttributionDomain& domain, const Vocab& vocab,
                             const TrainConfig& config) {
  domain.require_training("train_sgd");
  if (domain.empty()) throw empty_domain_error("cannot train a model on an empty domain");
  config.validate();

  const std::size_t v = vocab.size();
  const std::size_t n = domain.size();
  std::vector<detail::SourceTally> tallies;
  tallies.reserve(n);
  for (const auto& s : domain.sources()) tallies.push_back(detail::tally_source(s, vocab));

  detail::SplitRng rng(config.seed);
  std::vector<double> w(v * v, 0.0);
  if (config.init_scale > 0.0)
    for (auto& x : w) x = config.init_scale * rng.normal();

  SoftmaxBigramModel model(vocab, w, config, domain.ids());
  std::vector<Checkpoint> checkpoints{{0, w, {}, config.learning_rate}};

  const bool full_batch = config.batch_size == 0 || config.batch_size >= n;
  const std::size_t batch = full_batch ? n : config.batch_size;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::size_t step = 0;
  std::vector<double> grad(v * v);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (!full_batch) rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(n, start + batch);
      const double scale = 1.0 / static_cast<double>(stop - start);
      detail::RowAccumulator acc(v);
      std::vector<std::string> batch_ids;
      for (std::size_t k = start; k < stop; ++k) {
        const auto& t = tallies[order[k]];
        batch_ids.push_back(t.id);
        for (const auto& [bg, wt] : t.weighted) acc.add(bg, wt * scale);
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      double nll = acc.accumulate(model, grad);
      ++step;
      if (!std::isfinite(nll)) throw training_error("loss became non-finite", step);
      for (std::size_t k = 0; k < w.size(); ++k) {
        w[k] -= config.learning_rate * (grad[k] + config.l2 * w[k]);
        if (!std::isfinite(w[k])) throw training_error("parameters became non-finite", step);
      }
      model = model.with_weights(w);
      if (step % config.checkpoint_stride == 0) {
        checkpoints.push_back({step, w, std::move(batch_ids), config.learning_rate});
      } else if (epoch + 1 == config.epochs && stop == n) {
        checkpoints.push_back({step, w, std::move(batch_ids), config.learning_rate});
      }
    }
  }
  return {std::move(model), std::move(checkpoints)};
}

// ---------------------------------------------------------------------------
// Losses, gradients, Hessians

template <class M>
concept BigramModel = requires(const M& m, std::size_t a, std::size_t b) {
  { m.vocab() } -> std::convertible_to<const Vocab&>;
  { m.log_prob(a, b) } -> std::convertible_to<double>;
  { m.successor_score(a, b) } -> std::convertible_to<double>;
};

/// Mean NLL of y[i:j] given predecessors (the last query token precedes y[0]).
template <BigramModel M>
double loss(const M& model, const AttributableUnit& z) {
  double total = 0.0;
  auto bigrams = span_bigrams(z, model.vocab());
  for (auto [a, b] : bigrams) total -= model.log_prob(a, b);
  return total / static_cast<double>(bigrams.size());
}

/// Mean NLL over a source's bigrams; zero for a source without bigrams.
template <BigramModel M>
double source_loss(const M& model, const Source& s) {
  auto bigrams = source_bigrams(s, model.vocab());
  if (bigrams.empty()) return 0.0;
  double total = 0.0;
  for (auto [a, b] : bigrams) total -= model.log_prob(a, b);
  return total / static_cast<double>(bigrams.size());
}

/// (1/N) sum_s L_s + (l2/2)|W|^2, the quantity train_sgd minimizes.
inline double training_objective(const SoftmaxBigramModel& model, const AttributionDomain& domain) {
  double total = 0.0;
  for (const auto& s : domain.sources()) total += source_loss(model, s);
  double sq = 0.0;
  for (double x : model.weights()) sq += x * x;
  return total / static_cast<double>(domain.size()) + 0.5 * model.config().l2 * sq;
}

/// Gradient of loss(model, z) with respect to W, flattened row-major.
inline std::vector<double> grad(const SoftmaxBigramModel& model, const AttributableUnit& z) {
  const std::size_t v = model.vocab().size();
  detail::RowAccumulator acc(v);
  auto bigrams = span_bigrams(z, model.vocab());
  for (const auto& b : bigrams) acc.add(b, 1.0 / static_cast<double>(bigrams.size()));
  std::vector<double> g(v * v, 0.0);
  acc.accumulate(model, g);
  return g;
}

/// Gradient of source_loss(model, s).
inline std::vector<double> source_grad(const SoftmaxBigramModel& model, const Source& s) {
  const std::size_t v = model.vocab().size();
  detail::RowAccumulator acc(v);
  for (const auto& [bg, wt] : detail::tally_source(s, model.vocab()).weighted) acc.add(bg, wt);
  std::vector<double> g(v * v, 0.0);
  acc.accumulate(model, g);
  return g;
}

/// Gradient of training_objective.
inline std::vector<double> training_gradient(const SoftmaxBigramModel& model,
                                             const AttributionDomain& domain) {
  const std::size_t v = model.vocab().size();
  detail::RowAccumulator acc(v);
  const double scale = 1.0 / static_cast<double>(domain.size());
  for (const auto& s : domain.sources())
    for (const auto& [bg, wt] : detail::tally_source(s, model.vocab()).weighted)
      acc.add(bg, wt * scale);
  std::vector<double> g(v * v, 0.0);
  acc.accumulate(model, g);
  for (std::size_t k = 0; k < g.size(); ++k) g[k] += model.config().l2 * model.weights()[k];
  return g;
}

inline constexpr std::size_t kDefaultDenseLimit = 4096;

namespace detail {

inline void check_dense_limit(const SoftmaxBigramModel& model, std::size_t limit) {
  if (model.parameter_count() > limit) {
    throw capacity_error("model has " + std::to_string(model.parameter_count()) +
                         " parameters, above the dense limit of " + std::to_string(limit) +
                         "; use a smaller vocabulary");
  }
}

// Block-diagonal Hessian: row a contributes R[a] (diag(p_a) - p_a p_a^T).
inline Eigen::MatrixXd hessian_from_rows(const SoftmaxBigramModel& model,
                                         const std::vector<double>& row_weight, double ridge) {
  const std::size_t v = model.vocab().size();
  const auto p_count = static_cast<Eigen::Index>(v * v);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(p_count, p_count);
  for (std::size_t a = 0; a < v; ++a) {
    if (row_weight[a] == 0.0) continue;
    auto p = model.row_probs(a);
    const auto base = static_cast<Eigen::Index>(a * v);
    for (std::size_t b = 0; b < v; ++b) {
      for (std::size_t c = 0; c < v; ++c) {
        double val = -p[b] * p[c];
        if (b == c) val += p[b];
        h(base + static_cast<Eigen::Index>(b), base + static_cast<Eigen::Index>(c)) =
            row_weight[a] * val;
      }
    }
  }
  if (ridge != 0.0) h.diagonal().array() += ridge;
  return h;
}

}  // namespace detail

/// Hessian of training_objective over `domain` (includes the l2 term).
inline Eigen::MatrixXd hessian(const SoftmaxBigramModel& model, const AttributionDomain& domain,
                               std::size_t dense_limit = kDefaultDenseLimit) {
  detail::check_dense_limit(model, dense_limit);
  const std::size_t v = model.vocab().size();
  detail::RowAccumulator acc(v);
  const double scale = 1.0 / static_cast<double>(domain.size());
  for (const auto& s : domain.sources())
    for (const auto& [bg, wt] : detail::tally_source(s, model.vocab()).weighted)
      acc.add(bg, wt * scale);
  return detail::hessian_from_rows(model, acc.row_weight(), model.config().l2);
}

/// Hessian of the mean unit loss over `units` (no l2 term).
inline Eigen::MatrixXd hessian(const SoftmaxBigramModel& model,
                               std::span<const AttributableUnit> units,
                               std::size_t dense_limit = kDefaultDenseLimit) {
  detail::check_dense_limit(model, dense_limit);
  const std::size_t v = model.vocab().size();
  detail::RowAccumulator acc(v);
  const double scale = 1.0 / static_cast<double>(units.size());
  for (const auto& z : units) {
    auto bigrams = span_bigrams(z, model.vocab());
    for (const auto& b : bigrams) acc.add(b, scale / static_cast<double>(bigrams.size()));
  }
  return detail::hessian_from_rows(model, acc.row_weight(), 0.0);
}

// ---------------------------------------------------------------------------
// Decoding

/// Greedy decoding from the last query token. Ties go to the lowest vocab
/// index; stops after max_len tokens or on </s> (which is not emitted).
template <BigramModel M>
ModelOutput greedy_decode(const M& model, const Query& query, std::size_t max_len) {
  if (max_len < 1) throw parameter_error("max_len must be at least 1");
  const Vocab& vocab = model.vocab();
  const std::size_t v = vocab.size();
  ModelOutput out;
  std::size_t cur = vocab.index(query.last_token());
  for (std::size_t k = 0; k < max_len; ++k) {
    std::size_t best = 0;
    double best_score = model.successor_score(cur, 0);
    for (std::size_t b = 1; b < v; ++b) {
      double s = model.successor_score(cur, b);
      if (s > best_score) {
        best = b;
        best_score = s;
      }
    }
    if (vocab.eos() && best == *vocab.eos()) break;
    out.text.push_back(vocab.token(best));
    cur = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retrainable backends used by the contributive evaluators

/// Closed-form count backend; counterfactual fits subtract tallies.
class CountBackend {
 public:
  using model_type = CountBigramModel;

  CountBackend(Vocab vocab, double lambda) : vocab_(std::move(vocab)), lambda_(lambda) {
    if (!(lambda_ > 0.0)) throw parameter_error("smoothing lambda must be positive");
  }

  static constexpr std::string_view name() { return "count"; }
  const Vocab& vocab() const noexcept { return vocab_; }
  double lambda() const noexcept { return lambda_; }

  model_type fit(const AttributionDomain& domain) const { return fit_counts(domain, vocab_, lambda_); }
  model_type empty_model() const { return CountBigramModel::uniform(vocab_, lambda_); }
  model_type without(const model_type& full, const AttributionDomain& domain,
                     std::span<const std::string> excluded) const {
    return refit_without(full, excluded, domain);
  }
  double loss(const model_type& m, const AttributableUnit& z) const { return attrib::loss(m, z); }
  ModelOutput decode(const model_type& m, const Query& q, std::size_t max_len) const {
    return greedy_decode(m, q, max_len);
  }

 private:
  Vocab vocab_;
  double lambda_;
};

/// SGD backend; counterfactual fits retrain from scratch with the same
/// seed and schedule.
class SgdBackend {
 public:
  using model_type = SoftmaxBigramModel;

  SgdBackend(Vocab vocab, TrainConfig config) : vocab_(std::move(vocab)), config_(config) {
    config_.validate();
  }

  static constexpr std::string_view name() { return "sgd"; }
  const Vocab& vocab() const noexcept { return vocab_; }
  const TrainConfig& config() const noexcept { return config_; }

  model_type fit(const AttributionDomain& domain) const {
    return train_sgd(domain, vocab_, config_).model;
  }
  TrainResult fit_with_checkpoints(const AttributionDomain& domain) const {
    return train_sgd(domain, vocab_, config_);
  }
  model_type empty_model() const { return SoftmaxBigramModel::uniform(vocab_, config_); }
  model_type without(const model_type& full, const AttributionDomain& domain,
                     std::span<const std::string> excluded) const {
    for (const auto& id : excluded) {
      const auto& t = full.trained_on();
      if (std::find(t.begin(), t.end(), id) == t.end()) {
        throw parameter_error("source '" + id + "' is not part of the model's training data");
      }
    }
    auto rest = domain.restricted_to(full.trained_on()).without(excluded);
    if (rest.empty()) throw empty_domain_error("excluding every training source leaves no training data");
    return fit(rest);
  }
  double loss(const model_type& m, const AttributableUnit& z) const { return attrib::loss(m, z); }
  ModelOutput decode(const model_type& m, const Query& q, std::size_t max_len) const {
    return greedy_decode(m, q, max_len);
  }

 private:
  Vocab vocab_;
  TrainConfig config_;
};

template <class B>
concept RetrainableBackend =
    requires(const B& b, const AttributionDomain& d, const typename B::model_type& m,
             const AttributableUnit& z, const Query& q, std::span<const std::string> ids) {
      { b.fit(d) } -> std::same_as<typename B::model_type>;
      { b.empty_model() } -> std::same_as<typename B::model_type>;
      { b.without(m, d, ids) } -> std::same_as<typename B::model_type>;
      { b.loss(m, z) } -> std::convertible_to<double>;
      { b.decode(m, q, std::size_t{1}) } -> std::same_as<ModelOutput>;
    };

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json to_json(const Vocab& vocab) {
  std::vector<std::string> plain;
  for (const auto& t : vocab.tokens())
    if (t != kUnkToken && t != kEosToken) plain.push_back(t);
  return {{"tokens", plain}, {"eos", vocab.eos().has_value()}};
}

inline Vocab vocab_from_json(const nlohmann::json& j) {
  return Vocab(j.at("tokens").get<std::vector<std::string>>(), j.at("eos").get<bool>());
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"checkpoint_stride", c.checkpoint_stride},
          {"l2", c.l2},
          {"init_scale", c.init_scale}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.checkpoint_stride = j.at("checkpoint_stride").get<std::size_t>();
  c.l2 = j.at("l2").get<double>();
  c.init_scale = j.at("init_scale").get<double>();
  return c;
}

inline nlohmann::json to_json(const CountBigramModel& m) {
  const std::size_t v = m.vocab().size();
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t a = 0; a < v; ++a) {
    rows.push_back(std::vector<std::int64_t>(m.counts().begin() + static_cast<std::ptrdiff_t>(a * v),
                                             m.counts().begin() + static_cast<std::ptrdiff_t>((a + 1) * v)));
  }
  return {{"backend", "count"},
          {"vocab", to_json(m.vocab())},
          {"lambda", m.lambda()},
          {"counts", rows},
          {"trained_on", m.trained_on()}};
}

inline nlohmann::json to_json(const SoftmaxBigramModel& m) {
  const std::size_t v = m.vocab().size();
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t a = 0; a < v; ++a) {
    rows.push_back(std::vector<double>(m.weights().begin() + static_cast<std::ptrdiff_t>(a * v),
                                       m.weights().begin() + static_cast<std::ptrdiff_t>((a + 1) * v)));
  }
  return {{"backend", "softmax"},
          {"vocab", to_json(m.vocab())},
          {"weights", rows},
          {"config", to_json(m.config())},
          {"trained_on", m.trained_on()}};
}

inline CountBigramModel count_model_from_json(const nlohmann::json& j) {
  if (j.at("backend") != "count") throw parameter_error("not a count model document");
  Vocab vocab = vocab_from_json(j.at("vocab"));
  std::vector<std::int64_t> counts;
  for (const auto& row : j.at("counts"))
    for (const auto& c : row) counts.push_back(c.get<std::int64_t>());
  return CountBigramModel(std::move(vocab), j.at("lambda").get<double>(), std::move(counts),
                          j.at("trained_on").get<std::vector<std::string>>());
}

inline SoftmaxBigramModel softmax_model_from_json(const nlohmann::json& j) {
  if (j.at("backend") != "softmax") throw parameter_error("not a softmax model document");
  Vocab vocab = vocab_from_json(j.at("vocab"));
  std::vector<double> w;
  for (const auto& row : j.at("weights"))
    for (const auto& x : row) w.push_back(x.get<double>());
  return SoftmaxBigramModel(std::move(vocab), std::move(w), train_config_from_json(j.at("config")),
                            j.at("trained_on").get<std::vector<std::string>>());
}

inline nlohmann::json to_json(const std::vector<Checkpoint>& checkpoints) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : checkpoints) {
    out.push_back({{"step", c.step},
                   {"params", c.params},
                   {"batch", c.batch},
                   {"learning_rate", c.learning_rate}});
  }
  return out;
}

inline std::vector<Checkpoint> checkpoints_from_json(const nlohmann::json& j) {
  std::vector<Checkpoint> out;
  for (const auto& c : j) {
    out.push_back({c.at("step").get<std::size_t>(), c.at("params").get<std::vector<double>>(),
                   c.at("batch").get<std::vector<std::string>>(),
                   c.at("learning_rate").get<double>()});
  }
  return out;
}

}  // namespace attrib
