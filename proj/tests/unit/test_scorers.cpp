#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "fixtures.hpp"
#include "killchain/error.hpp"
#include "killchain/scorers.hpp"

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

// Loss recomputed from scratch, independent of SoftmaxObjective::loss.
double reference_loss(const TrainingData& data, const std::vector<std::string>& classes, std::span<const double> params,
                      double l2, bool weighted) {
  const std::size_t K = classes.size(), d = data.features.front().size();
  auto weights = weighted ? class_weights(data.labels) : std::map<std::string, double>{};
  double total = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    std::vector<double> z(K);
    for (std::size_t k = 0; k < K; ++k) {
      z[k] = params[K * d + k];
      for (std::size_t j = 0; j < d; ++j) z[k] += params[k * d + j] * data.features[i][j];
    }
    double m = *std::max_element(z.begin(), z.end()), s = 0.0;
    for (double v : z) s += std::exp(v - m);
    std::size_t y = static_cast<std::size_t>(std::find(classes.begin(), classes.end(), data.labels[i]) - classes.begin());
    double w = weighted ? weights[data.labels[i]] : 1.0;
    total += w * -(z[y] - m - std::log(s));
    wsum += w;
  }
  double reg = 0.0;
  for (std::size_t i = 0; i < K * d; ++i) reg += params[i] * params[i];
  return total / wsum + 0.5 * l2 * reg;
}

}  // namespace

TEST_CASE("softmax objective matches a reference and central differences") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    Rng rng(seed);
    TrainingData data = seed % 2 ? testing::separable_clusters(5, seed) : testing::two_clusters(6, seed);
    std::vector<std::string> classes = data.labels;
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    const bool weighted = seed % 3 != 0;
    SoftmaxObjective obj = make_softmax_objective(data, classes, 0.01, weighted);

    std::vector<double> params(classes.size() * 3);
    for (double& p : params) p = 0.5 * rng.normal();
    CHECK(obj.loss(params) == Approx(reference_loss(data, classes, params, 0.01, weighted)).epsilon(1e-12));

    std::vector<double> grad = obj.gradient(params);
    const double h = 1e-6;
    double num2 = 0.0, diff2 = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::vector<double> up = params, down = params;
      up[i] += h;
      down[i] -= h;
      double fd = (obj.loss(up) - obj.loss(down)) / (2.0 * h);
      diff2 += (fd - grad[i]) * (fd - grad[i]);
      num2 += fd * fd;
    }
    CHECK(std::sqrt(diff2) / std::max(std::sqrt(num2), 1e-12) < 1e-5);
  }
}

TEST_CASE("softmax regression training") {
  TrainingData data = testing::separable_clusters(30, 8);
  SoftmaxConfig cfg;
  cfg.epochs = 200;
  cfg.learning_rate = 0.5;
  cfg.seed = 3;
  SoftmaxRegressionModel m = train_softmax_regression(data, cfg);
  CHECK(m.loss_trace.size() == 201);
  CHECK(m.loss_trace.back() < m.loss_trace.front());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    auto p = m.predict_proba(data.features[i]);
    hits += m.classes[argmax_with_ties(p, m.classes)] == data.labels[i];
    double s = 0.0;
    for (double v : p) s += v;
    CHECK(s == Approx(1.0).epsilon(1e-12));
  }
  CHECK(hits >= 85);

  SoftmaxRegressionModel again = train_softmax_regression(data, cfg);
  CHECK(again.to_json().dump() == m.to_json().dump());
  SoftmaxRegressionModel back = SoftmaxRegressionModel::from_json(nlohmann::json::parse(m.to_json().dump()));
  CHECK(back.to_json() == m.to_json());

  cfg.learning_rate = 1e6;
  CHECK(kind_of([&] { train_softmax_regression(data, cfg); }) == ErrorKind::Divergence);
}

TEST_CASE("score reorders columns and validates") {
  TrainingData data = testing::two_clusters(10, 1);
  Scorer s{{"softmax", ScorerKind::NativeSoftmax, Phase::Delivery}, train_softmax_regression(data, {})};
  CHECK(s.classes() == std::vector<std::string>{"left", "right"});
  std::vector<ScoreInput> inputs = {{"a", {-2.0, -2.0}}, {"b", {2.0, 2.0}}};
  ProbabilityMatrix fwd = score(s, inputs, {"left", "right"});
  ProbabilityMatrix rev = score(s, inputs, {"right", "left"});
  CHECK(fwd.at(0, 0) == rev.at(0, 1));
  CHECK(fwd.argmax_labels() == std::vector<std::string>{"left", "right"});
  CHECK(kind_of([&] { score(s, inputs, {"left", "other"}); }) == ErrorKind::Contract);
}

TEST_CASE("external scorers look rows up by id") {
  ProbabilityMatrix ext({"x", "y"}, {"a", "b"}, {0.9, 0.1, 0.3, 0.7});
  Scorer s{{"llm", ScorerKind::External, Phase::Exploitation}, ExternalScores{ext}};
  ProbabilityMatrix out = score(s, {{"y", {}}, {"x", {}}}, {"b", "a"});
  CHECK(out.sample_ids() == std::vector<std::string>{"y", "x"});
  CHECK(out.at(0, 0) == 0.7);
  CHECK(out.at(1, 1) == 0.9);
  CHECK(kind_of([&] { score(s, {{"z", {}}}, {"a", "b"}); }) == ErrorKind::Lookup);
}

TEST_CASE("row ids stay unique") {
  std::vector<LabeledSample> samples = {{"T1", "a", "l", Phase::Delivery},
                                        {"T1", "b", "l", Phase::Delivery},
                                        {"T2", "c", "l", Phase::Delivery},
                                        {"T1", "d", "l", Phase::Delivery}};
  CHECK(sample_row_ids(samples) == std::vector<std::string>{"T1", "T1#2", "T2", "T1#3"});
}

TEST_CASE("scorer kinds") {
  CHECK(to_string(ScorerKind::NativeGbdt) == "native-gbdt");
  CHECK(parse_scorer_kind("external") == ScorerKind::External);
  CHECK(kind_of([] { parse_scorer_kind("svm"); }) == ErrorKind::Config);
}
