#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "killchain/corpus.hpp"
#include "killchain/gbdt.hpp"
#include "killchain/probability_matrix.hpp"

namespace killchain {

enum class ScorerKind { NativeGbdt, NativeSoftmax, External };

std::string_view to_string(ScorerKind kind) noexcept;
ScorerKind parse_scorer_kind(std::string_view text);

struct ScorerHandle {
  std::string name;
  ScorerKind kind = ScorerKind::NativeGbdt;
  Phase phase = Phase::Reconnaissance;
};

struct SoftmaxConfig {
  int epochs = 300;
  double learning_rate = 0.5;
  double l2 = 1e-4;
  bool class_weighting = true;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static SoftmaxConfig from_json(const nlohmann::json& doc);
};

/// Multinomial logistic regression, p = softmax(W x + b).
struct SoftmaxRegressionModel {
  std::vector<std::string> classes;
  std::size_t dim = 0;
  std::vector<double> weights;  // classes x dim, row-major
  std::vector<double> bias;     // classes
  std::vector<double> loss_trace;  // objective before each epoch, then the final value

  std::vector<double> predict_proba(std::span<const double> x) const;

  nlohmann::ordered_json to_json() const;
  static SoftmaxRegressionModel from_json(const nlohmann::json& doc);
};

/// Parameters flattened as [W row-major | b].
struct SoftmaxObjective {
  std::size_t num_classes;
  std::size_t dim;
  const std::vector<EmbeddingVector>* features;
  std::vector<std::size_t> targets;
  std::vector<double> sample_weights;
  double l2;

  /// Weighted mean log loss plus (l2 / 2) * |W|^2.
  double loss(std::span<const double> params) const;

  /// Analytic gradient of loss().
  std::vector<double> gradient(std::span<const double> params) const;
};

SoftmaxObjective make_softmax_objective(const TrainingData& data, const std::vector<std::string>& classes,
                                        double l2, bool class_weighting);

/// Full-batch gradient descent from small seeded Gaussian weights.
/// Throws Divergence when the loss turns non-finite.
SoftmaxRegressionModel train_softmax_regression(const TrainingData& train, const SoftmaxConfig& config);

/// An externally produced matrix keyed by sample id.
struct ExternalScores {
  ProbabilityMatrix matrix;
};

using ScorerModel = std::variant<GbdtModel, SoftmaxRegressionModel, ExternalScores>;

struct Scorer {
  ScorerHandle handle;
  ScorerModel model;

  const std::vector<std::string>& classes() const;
};

/// One item to score: the id becomes the matrix row id.
struct ScoreInput {
  std::string sample_id;
  EmbeddingVector embedding;  // ignored by external scorers
};

/// Rows follow the input order; columns follow `label_order` (which must be
/// a permutation of the scorer's classes). The result is revalidated.
ProbabilityMatrix score(const Scorer& scorer, const std::vector<ScoreInput>& inputs,
                        const std::vector<std::string>& label_order);

/// Embeds the samples with `embedder` and scores them; embedding failures
/// are rethrown naming the sample id.
ProbabilityMatrix score_samples(const Scorer& scorer, const std::vector<LabeledSample>& samples,
                                const EmbeddingProvider& embedder, const std::vector<std::string>& label_order);

}  // namespace killchain

namespace killchain {

/// Row ids for a sample list: the technique id, suffixed "#2", "#3", ...
/// for repeated ids so that ids stay unique.
std::vector<std::string> sample_row_ids(const std::vector<LabeledSample>& samples);

}  // namespace killchain
