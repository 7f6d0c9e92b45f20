#include "doctest.h"

#include <cmath>

#include "fixtures.hpp"
#include "killchain/ensemble.hpp"
#include "killchain/error.hpp"

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

double accuracy_of(const std::vector<std::string>& pred, const std::vector<std::string>& truth) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace

TEST_CASE("evaluate agrees with a direct confusion count") {
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const std::vector<std::string> labels{"a", "b", "c", "d"};
    const std::size_t n = 1 + rng.below(40);
    std::vector<std::string> pred, truth;
    for (std::size_t i = 0; i < n; ++i) {
      truth.push_back(labels[rng.below(4)]);
      pred.push_back(rng.uniform() < 0.6 ? truth.back() : labels[rng.below(4)]);
    }
    EvaluationReport r = evaluate(pred, truth, labels);
    double p_sum = 0, r_sum = 0, f_sum = 0;
    for (const auto& l : labels) {
      double tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        tp += pred[i] == l && truth[i] == l;
        fp += pred[i] == l && truth[i] != l;
        fn += pred[i] != l && truth[i] == l;
      }
      double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
      double rc = tp + fn > 0 ? tp / (tp + fn) : 0.0;
      double f = p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0;
      p_sum += p, r_sum += rc, f_sum += f;
      CHECK(r.per_label.at(l).true_positive == static_cast<std::size_t>(tp));
    }
    CHECK(r.precision == Approx(p_sum / 4).epsilon(1e-12));
    CHECK(r.recall == Approx(r_sum / 4).epsilon(1e-12));
    CHECK(r.f1 == Approx(f_sum / 4).epsilon(1e-12));
    CHECK(r.accuracy == Approx(accuracy_of(pred, truth)).epsilon(1e-12));
  }
}

TEST_CASE("evaluate edge cases") {
  EvaluationReport r = evaluate({"a", "a"}, {"a", "a"}, {"a", "b"});
  CHECK(r.per_label.at("b").f1 == 0.0);  // 0/0 counts as 0
  CHECK(r.f1 == Approx(0.5));
  CHECK(kind_of([] { evaluate({}, {}, {"a"}); }) == ErrorKind::EmptyInput);
  CHECK(kind_of([] { evaluate({"a"}, {"a", "b"}, {"a", "b"}); }) == ErrorKind::Contract);
  CHECK(kind_of([] { evaluate({"z"}, {"a"}, {"a", "b"}); }) == ErrorKind::Contract);
}

TEST_CASE("F1-proportional weights") {
  EnsembleWeights w = fit_weights_from_f1(Phase::Delivery, {{"a", 0.9}, {"b", 0.6}, {"c", 0.3}});
  CHECK(std::abs(w.weights["a"] - 0.5) < 1e-12);
  CHECK(std::abs(w.weights["b"] - 1.0 / 3.0) < 1e-12);
  CHECK(std::abs(w.weights["c"] - 1.0 / 6.0) < 1e-12);
  CHECK(w.warnings.empty());

  EnsembleWeights z = fit_weights_from_f1(Phase::Delivery, {{"a", 0.0}, {"b", 0.0}});
  CHECK(z.weights["a"] == 0.5);
  CHECK(z.weights["b"] == 0.5);
  CHECK(z.warnings.size() == 1);

  EnsembleWeights back = EnsembleWeights::from_json(w.to_json());
  CHECK(back.weights == w.weights);
  CHECK(back.f1_provenance == w.f1_provenance);
  CHECK(back.phase == Phase::Delivery);
}

TEST_CASE("fit_weights reads macro F1 from reports") {
  std::map<std::string, EvaluationReport> reports;
  reports["good"] = evaluate({"a", "b"}, {"a", "b"}, {"a", "b"});
  reports["half"] = evaluate({"a", "a"}, {"a", "b"}, {"a", "b"});
  EnsembleWeights w = fit_weights(Phase::Installation, reports);
  double f_half = reports["half"].f1;
  CHECK(w.weights["good"] == Approx(1.0 / (1.0 + f_half)).epsilon(1e-12));
  CHECK(w.f1_provenance["half"] == f_half);
}

TEST_CASE("soft vote matches the weighted average") {
  ProbabilityMatrix a({"s"}, {"x", "y"}, {0.8, 0.2});
  ProbabilityMatrix b({"s"}, {"x", "y"}, {0.4, 0.6});
  EnsembleWeights w;
  w.weights = {{"a", 0.75}, {"b", 0.25}};
  VoteResult v = soft_vote({{"a", a}, {"b", b}}, w);
  CHECK(v.fused.at(0, 0) == Approx(0.7).epsilon(1e-15));
  CHECK(v.fused.at(0, 1) == Approx(0.3).epsilon(1e-15));

  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    auto inst = testing::random_vote_instance(rng);
    VoteResult r = soft_vote(inst.matrices, inst.weights);
    const auto& any = inst.matrices.begin()->second;
    for (std::size_t row = 0; row < any.rows(); ++row)
      for (std::size_t c = 0; c < any.cols(); ++c) {
        double expected = 0.0;
        for (const auto& [name, m] : inst.matrices) expected += inst.weights.weights[name] * m.at(row, c);
        CHECK(std::abs(r.fused.at(row, c) - expected) <= 1e-12);
      }
  }
}

TEST_CASE("one-hot weights reproduce the chosen scorer") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto inst = testing::random_vote_instance(rng);
    for (auto& [chosen, m] : inst.matrices) {
      EnsembleWeights w;
      for (const auto& [name, _] : inst.matrices) w.weights[name] = name == chosen ? 1.0 : 0.0;
      CHECK(soft_vote(inst.matrices, w).predictions == m.argmax_labels());
    }
  }
}

TEST_CASE("soft vote rejects misaligned inputs") {
  ProbabilityMatrix a({"s", "t"}, {"x", "y"}, {0.8, 0.2, 0.5, 0.5});
  ProbabilityMatrix swapped({"t", "s"}, {"x", "y"}, {0.8, 0.2, 0.5, 0.5});
  ProbabilityMatrix relabeled({"s", "t"}, {"y", "x"}, {0.8, 0.2, 0.5, 0.5});
  EnsembleWeights w;
  w.weights = {{"a", 0.5}, {"b", 0.5}};
  CHECK(kind_of([&] { soft_vote({{"a", a}, {"b", swapped}}, w); }) == ErrorKind::Contract);
  CHECK(kind_of([&] { soft_vote({{"a", a}, {"b", relabeled}}, w); }) == ErrorKind::Contract);
  w.weights["b"] = 0.4;
  CHECK(kind_of([&] { soft_vote({{"a", a}, {"b", a}}, w); }) == ErrorKind::Contract);
  w.weights = {{"a", 1.0}};
  CHECK(kind_of([&] { soft_vote({{"a", a}, {"b", a}}, w); }) == ErrorKind::Contract);
}

TEST_CASE("ensemble corrects disjoint scorer errors") {
  auto fx = testing::error_correction_fixture();
  for (const auto& [name, m] : fx.matrices) CHECK(accuracy_of(m.argmax_labels(), fx.truth) == Approx(2.0 / 3.0));
  EnsembleWeights w = fit_weights_from_f1(Phase::Exploitation, {{"scorer0", 1.0}, {"scorer1", 1.0}, {"scorer2", 1.0}});
  VoteResult v = soft_vote(fx.matrices, w);
  CHECK(accuracy_of(v.predictions, fx.truth) == 1.0);
}
