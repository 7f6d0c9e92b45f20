#include "doctest.h"

#include <cmath>

#include "fixtures.hpp"
#include "killchain/error.hpp"
#include "killchain/gbdt.hpp"

using namespace killchain;
using doctest::Approx;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected killchain::Error");
  return ErrorKind::Io;
}

double accuracy(const GbdtModel& model, const TrainingData& data) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    auto p = model.predict_proba(data.features[i]);
    std::size_t best = argmax_with_ties(p, model.classes());
    hits += model.classes()[best] == data.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(data.features.size());
}

}  // namespace

TEST_CASE("log loss against hand-computed values") {
  ProbabilityMatrix p({"r0", "r1", "r2"}, {"a", "b", "c"}, {0.7, 0.2, 0.1, 0.1, 0.6, 0.3, 0.25, 0.25, 0.5});
  std::vector<std::string> truth{"a", "c", "c"};
  CHECK(multiclass_log_loss(p, truth) == Approx(0.7512649762748712).epsilon(1e-12));
  std::vector<double> w{1.0, 2.0, 0.5};
  CHECK(multiclass_log_loss(p, truth, std::span<const double>(w)) == Approx(0.8889126122487364).epsilon(1e-12));

  ProbabilityMatrix perfect({"r0", "r1"}, {"a", "b"}, {1.0, 0.0, 0.0, 1.0});
  CHECK(multiclass_log_loss(perfect, {"a", "b"}) == 0.0);
  ProbabilityMatrix uniform({"r0"}, {"a", "b", "c", "d"}, {0.25, 0.25, 0.25, 0.25});
  CHECK(multiclass_log_loss(uniform, {"c"}) == Approx(std::log(4.0)).epsilon(1e-15));
  // floored, not infinite
  CHECK(multiclass_log_loss(perfect, {"b", "a"}) == Approx(-std::log(1e-15)));
  CHECK(kind_of([&] { multiclass_log_loss(perfect, {"a", "z"}); }) == ErrorKind::Contract);
}

TEST_CASE("balanced class weights") {
  std::vector<std::string> labels(9, "A");
  labels.push_back("B");
  auto w = class_weights(labels);
  CHECK(w["A"] == Approx(10.0 / 18.0).epsilon(1e-15));
  CHECK(w["B"] == Approx(5.0).epsilon(1e-15));
  CHECK(kind_of([] { class_weights({}); }) == ErrorKind::EmptyInput);
}

TEST_CASE("config validation and json") {
  GbdtConfig c;
  c.validate();
  c.validate_tuning_range();
  c.num_leaves = 2;
  c.max_depth = 0;
  c.n_estimators = 1;
  c.validate();
  CHECK(kind_of([&] { c.validate_tuning_range(); }) == ErrorKind::Config);
  c.num_leaves = 1;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);

  GbdtConfig d;
  d.learning_rate = 0.1;
  d.seed = 7;
  GbdtConfig back = GbdtConfig::from_json(d.to_json());
  CHECK(back.to_json() == d.to_json());
  CHECK(kind_of([] { GbdtConfig::from_json(nlohmann::json{{"leaves", 3}}); }) == ErrorKind::Config);
}

TEST_CASE("quantile bin edges") {
  CHECK(quantile_bin_edges({1.0, 1.0, 1.0}, 8).empty());
  auto e = quantile_bin_edges({3.0, 1.0, 2.0, 2.0}, 8);
  CHECK(e == std::vector<double>{1.5, 2.5});
  std::vector<double> many;
  for (int i = 0; i < 1000; ++i) many.push_back(i);
  auto q = quantile_bin_edges(many, 10);
  CHECK(q.size() == 9);
  for (std::size_t i = 1; i < q.size(); ++i) CHECK(q[i] > q[i - 1]);
}

TEST_CASE("single split matches exhaustive search") {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 10 + rng.below(30), features = 1 + rng.below(3);
    std::vector<int> nbins(features);
    std::vector<std::vector<int>> binned(features, std::vector<int>(n));
    for (std::size_t f = 0; f < features; ++f) {
      nbins[f] = 2 + static_cast<int>(rng.below(6));
      for (auto& b : binned[f]) b = static_cast<int>(rng.below(static_cast<std::uint64_t>(nbins[f])));
    }
    std::vector<double> g(n), h(n);
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = rng.normal();
      h[i] = 0.05 + rng.uniform();
    }
    GbdtConfig cfg;
    cfg.num_leaves = 2;
    cfg.learning_rate = 0.3;
    cfg.l2_reg = 0.5;
    DecisionTree tree = fit_tree(binned, g, h, nbins, cfg);

    // reference: every feature and threshold, partitions computed per sample
    double best_gain = 0.0;
    int best_f = -1, best_t = -1;
    double G = 0, H = 0;
    for (std::size_t i = 0; i < n; ++i) G += g[i], H += h[i];
    auto obj = [&](double gs, double hs) { return gs * gs / (hs + cfg.l2_reg); };
    for (std::size_t f = 0; f < features; ++f) {
      for (int t = 0; t + 1 < nbins[f]; ++t) {
        double gl = 0, hl = 0;
        std::size_t cl = 0;
        for (std::size_t i = 0; i < n; ++i)
          if (binned[f][i] <= t) gl += g[i], hl += h[i], ++cl;
        if (cl == 0 || cl == n) continue;
        double gain = obj(gl, hl) + obj(G - gl, H - hl) - obj(G, H);
        if (gain > best_gain + 1e-12) best_gain = gain, best_f = static_cast<int>(f), best_t = t;
      }
    }
    if (best_f < 0) {
      CHECK(tree.node_count() == 1);
      continue;
    }
    REQUIRE(tree.node_count() == 3);
    CHECK(tree.feature[0] == best_f);
    CHECK(tree.threshold_bin[0] == best_t);
    double gl = 0, hl = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (binned[static_cast<std::size_t>(best_f)][i] <= best_t) gl += g[i], hl += h[i];
    CHECK(tree.value[static_cast<std::size_t>(tree.left[0])] ==
          Approx(cfg.learning_rate * -gl / (hl + cfg.l2_reg)).epsilon(1e-12));
    CHECK(tree.value[static_cast<std::size_t>(tree.right[0])] ==
          Approx(cfg.learning_rate * -(G - gl) / (H - hl + cfg.l2_reg)).epsilon(1e-12));
  }
}

TEST_CASE("tree growth respects leaf and depth limits") {
  Rng rng(5);
  const std::size_t n = 200;
  std::vector<std::vector<int>> binned(2, std::vector<int>(n));
  std::vector<double> g(n), h(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    binned[0][i] = static_cast<int>(rng.below(16));
    binned[1][i] = static_cast<int>(rng.below(16));
    g[i] = rng.normal() + binned[0][i] * 0.3;
  }
  GbdtConfig cfg;
  cfg.num_leaves = 6;
  cfg.max_depth = 8;
  DecisionTree t = fit_tree(binned, g, h, {16, 16}, cfg);
  CHECK(t.leaf_count() <= 6);
  cfg.num_leaves = 100;
  cfg.max_depth = 2;
  DecisionTree shallow = fit_tree(binned, g, h, {16, 16}, cfg);
  CHECK(shallow.depth() <= 2);
  CHECK(shallow.leaf_count() <= 4);
  cfg.max_depth = 0;
  CHECK(fit_tree(binned, g, h, {16, 16}, cfg).node_count() == 1);
}

TEST_CASE("gbdt learns separable clusters") {
  TrainingData train = testing::separable_clusters(50, 1);
  TrainingData valid = testing::separable_clusters(10, 2);
  GbdtConfig cfg;
  cfg.n_estimators = 50;
  cfg.learning_rate = 0.2;
  GbdtResult r = train_gbdt(train, cfg, &valid);
  CHECK(accuracy(r.model, train) >= 0.95);
  CHECK(r.model.classes() == std::vector<std::string>{"alpha", "beta", "gamma"});
  REQUIRE_FALSE(r.report.validation_loss.empty());
  double best = r.report.validation_loss.front();
  for (double v : r.report.validation_loss) best = std::min(best, v);
  CHECK(r.report.validation_loss[static_cast<std::size_t>(r.report.best_round - 1)] == best);
  CHECK(r.report.train_loss.size() == r.report.validation_loss.size());
  CHECK(r.report.train_loss.back() < r.report.train_loss.front());

  GbdtResult again = train_gbdt(train, cfg, &valid);
  CHECK(again.model.to_json().dump() == r.model.to_json().dump());

  GbdtModel loaded = GbdtModel::from_json(nlohmann::json::parse(r.model.to_json().dump()));
  CHECK(loaded.to_json() == r.model.to_json());
  for (const auto& x : valid.features) CHECK(loaded.predict_proba(x) == r.model.predict_proba(x));
}

TEST_CASE("two clusters are fitted exactly within 20 rounds") {
  TrainingData train = testing::two_clusters(50, 3);
  GbdtConfig cfg;
  cfg.n_estimators = 20;
  GbdtResult r = train_gbdt(train, cfg);
  CHECK(r.model.rounds().size() <= 20);
  CHECK(accuracy(r.model, train) == 1.0);

  // Reference: some bin edge on some feature separates the two labels.
  bool separable = false;
  for (std::size_t f = 0; f < 2; ++f) {
    std::vector<double> column;
    for (const auto& x : train.features) column.push_back(x[f]);
    for (double edge : quantile_bin_edges(column, cfg.max_bins)) {
      bool left_low = true, left_high = true;
      for (std::size_t i = 0; i < column.size(); ++i) {
        const bool low = column[i] < edge;
        left_low &= low == (train.labels[i] == "left");
        left_high &= low == (train.labels[i] == "right");
      }
      separable |= left_low || left_high;
    }
  }
  CHECK(separable);
}

TEST_CASE("early stopping truncates to the best round") {
  TrainingData train = testing::two_clusters(20, 3);
  // validation labels flipped: validation loss rises after the first rounds
  TrainingData valid = testing::two_clusters(10, 4);
  for (auto& l : valid.labels) l = l == "left" ? "right" : "left";
  GbdtConfig cfg;
  cfg.n_estimators = 100;
  cfg.learning_rate = 0.2;
  cfg.early_stopping_rounds = 5;
  GbdtResult r = train_gbdt(train, cfg, &valid);
  CHECK(r.report.stopping_reason == "early_stopping");
  CHECK(r.model.best_round() == r.report.best_round);
  CHECK(static_cast<int>(r.model.rounds().size()) == r.report.best_round);
  CHECK(r.report.validation_loss.size() == static_cast<std::size_t>(r.report.best_round + 5));

  GbdtResult none = train_gbdt(train, cfg);
  CHECK(none.report.stopping_reason == "no_validation");
  CHECK(none.model.rounds().size() == 100);
}

TEST_CASE("prior-only model and degenerate inputs") {
  TrainingData one;
  one.features = {{1.0}, {2.0}};
  one.labels = {"a", "a"};
  CHECK(kind_of([&] { train_gbdt(one, {}); }) == ErrorKind::Degenerate);
  TrainingData ragged;
  ragged.features = {{1.0}, {2.0, 3.0}};
  ragged.labels = {"a", "b"};
  CHECK(kind_of([&] { train_gbdt(ragged, {}); }) == ErrorKind::Contract);

  GbdtModel prior = GbdtModel::prior_only({"a", "b"}, {std::log(0.25), std::log(0.75)}, 2);
  std::vector<double> x{0.0, 0.0};
  auto p = prior.predict_proba(x);
  CHECK(p[0] == Approx(0.25).epsilon(1e-14));
  CHECK(kind_of([&] { prior.predict_proba(std::vector<double>{1.0}); }) == ErrorKind::Contract);
}

TEST_CASE("bin_of counts edges strictly below") {
  TrainingData d = testing::two_clusters(20, 9);
  GbdtConfig cfg;
  cfg.n_estimators = 1;
  GbdtResult r = train_gbdt(d, cfg);
  const auto& edges = r.model.bin_edges()[0];
  REQUIRE(edges.size() >= 2);
  CHECK(r.model.bin_of(0, edges[0]) == 0);
  CHECK(r.model.bin_of(0, std::nextafter(edges[0], 1e9)) == 1);
  CHECK(r.model.bin_of(0, -1e9) == 0);
  CHECK(r.model.bin_of(0, 1e9) == static_cast<int>(edges.size()));
}
