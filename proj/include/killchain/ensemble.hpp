#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "killchain/phase.hpp"
#include "killchain/probability_matrix.hpp"

namespace killchain {

struct LabelMetrics {
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t false_negative = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct EvaluationReport {
  std::size_t samples = 0;
  double accuracy = 0.0;
  double precision = 0.0;  // macro
  double recall = 0.0;     // macro
  double f1 = 0.0;         // macro: mean of per-label F1
  std::vector<std::string> label_set;
  /// confusion[truth][predicted]
  std::map<std::string, std::map<std::string, std::size_t>> confusion;
  std::map<std::string, LabelMetrics> per_label;

  nlohmann::ordered_json to_json() const;
};

/// Accuracy plus macro precision/recall/F1 over `label_set`, with 0/0 := 0.
/// Throws EmptyInput for empty input and Contract for length mismatch or
/// labels outside the label set.
EvaluationReport evaluate(const std::vector<std::string>& predictions, const std::vector<std::string>& truth,
                          const std::vector<std::string>& label_set);

struct EnsembleWeights {
  Phase phase = Phase::Reconnaissance;
  std::map<std::string, double> weights;
  std::map<std::string, double> f1_provenance;
  std::vector<std::string> warnings;

  nlohmann::ordered_json to_json() const;
  static EnsembleWeights from_json(const nlohmann::json& doc);
};

/// w_i = F1_i / sum_j F1_j; uniform when every F1 is zero.
EnsembleWeights fit_weights(Phase phase, const std::map<std::string, EvaluationReport>& validation_reports);

/// Same rule on bare F1 values.
EnsembleWeights fit_weights_from_f1(Phase phase, const std::map<std::string, double>& f1_by_scorer);

struct VoteResult {
  ProbabilityMatrix fused;
  std::vector<std::string> predictions;
};

/// fused(s, c) = sum_i w_i p_i(c | s). Matrices must share sample ids and
/// labels in the same order, and the weights must name exactly these scorers.
VoteResult soft_vote(const std::map<std::string, ProbabilityMatrix>& matrices, const EnsembleWeights& weights);

}  // namespace killchain
