#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "killchain/corpus.hpp"
#include "killchain/embedding.hpp"
#include "killchain/probability_matrix.hpp"

namespace killchain {

/// Balanced class weights, n / (K * count(c)). Throws EmptyInput on an
/// empty label list.
std::map<std::string, double> class_weights(const std::vector<std::string>& labels);

/// Weighted mean of -ln P(true label), probabilities floored at 1e-15.
/// `truth[r]` is the true label of row r. Throws Contract when a label is not
/// a matrix column or the weight count differs from the row count.
double multiclass_log_loss(const ProbabilityMatrix& probabilities, const std::vector<std::string>& truth,
                           std::optional<std::span<const double>> weights = std::nullopt);

/// Same quantity over raw rows, for callers that have not built a matrix.
double multiclass_log_loss(std::span<const double> row_major_probs, std::size_t num_classes,
                           std::span<const std::size_t> truth_index,
                           std::optional<std::span<const double>> weights = std::nullopt);

struct GbdtConfig {
  int num_leaves = 31;
  double learning_rate = 0.05;
  int max_depth = 8;
  int n_estimators = 200;
  double l2_reg = 1e-8;
  int early_stopping_rounds = 20;  // 0 disables early stopping
  int max_bins = 64;
  bool class_weighting = true;
  std::uint64_t seed = 0;

  /// Structural limits the trainer needs (num_leaves >= 2, max_depth >= 0, ...).
  void validate() const;

  /// The tuning ranges the pipeline accepts: num_leaves 31..100,
  /// max_depth 5..25, n_estimators 100..400, learning_rate in
  /// {0.01, 0.05, 0.1, 0.2}.
  void validate_tuning_range() const;

  nlohmann::ordered_json to_json() const;
  static GbdtConfig from_json(const nlohmann::json& doc);
};

/// Binary tree over binned features. Node 0 is the root. A node with
/// feature < 0 is a leaf; otherwise samples with bin <= threshold_bin go left.
struct DecisionTree {
  std::vector<int> feature;
  std::vector<int> threshold_bin;
  std::vector<int> left;
  std::vector<int> right;
  std::vector<double> value;

  std::size_t node_count() const noexcept { return feature.size(); }
  std::size_t leaf_count() const noexcept;
  int depth() const;
};

struct TrainingData {
  std::vector<EmbeddingVector> features;
  std::vector<std::string> labels;
};

/// Embeds every sample of a dataset (key = technique_id, text = sample text).
TrainingData make_training_data(const PhaseDataset& dataset, const EmbeddingProvider& embedder);

struct TrainReport {
  std::vector<double> train_loss;       // class-weighted objective after each round
  std::vector<double> validation_loss;  // unweighted, empty when no validation data
  std::string stopping_reason;          // "early_stopping" | "max_rounds" | "no_validation"
  std::map<std::string, double> class_weights;
  int best_round = 0;
  std::vector<std::string> warnings;

  nlohmann::ordered_json to_json() const;
};

class GbdtModel {
 public:
  GbdtModel() = default;

  /// A model with no boosting rounds; predicts softmax(base_scores).
  static GbdtModel prior_only(std::vector<std::string> classes, std::vector<double> base_scores, std::size_t dim);

  const std::vector<std::string>& classes() const noexcept { return classes_; }
  const std::vector<double>& base_scores() const noexcept { return base_scores_; }
  const std::vector<std::vector<double>>& bin_edges() const noexcept { return bin_edges_; }
  const std::vector<std::vector<DecisionTree>>& rounds() const noexcept { return rounds_; }
  const GbdtConfig& config() const noexcept { return config_; }
  int best_round() const noexcept { return best_round_; }
  std::size_t dim() const noexcept { return dim_; }

  /// Bin index of value x on feature f: the number of edges strictly below x.
  int bin_of(std::size_t feature, double x) const;

  /// Accumulated raw scores through `rounds` (defaults to best_round).
  std::vector<double> raw_scores(std::span<const double> x, std::optional<int> rounds = std::nullopt) const;

  /// Max-subtracted softmax of raw_scores. Throws Contract on dimension mismatch.
  std::vector<double> predict_proba(std::span<const double> x) const;

  nlohmann::ordered_json to_json() const;
  static GbdtModel from_json(const nlohmann::json& doc);

  friend struct GbdtTrainer;

 private:
  GbdtConfig config_;
  std::size_t dim_ = 0;
  std::vector<std::string> classes_;
  std::vector<double> base_scores_;
  std::vector<std::vector<double>> bin_edges_;
  std::vector<std::vector<DecisionTree>> rounds_;  // rounds_[r][k]
  int best_round_ = 0;
};

struct GbdtResult {
  GbdtModel model;
  TrainReport report;
};

/// Quantile bin boundaries for one feature column (at most max_bins bins).
std::vector<double> quantile_bin_edges(std::vector<double> column, int max_bins);

/// Histogram gradient boosting with one tree per class per round, softmax
/// gradients, leaf-wise growth and early stopping on validation log loss.
/// Throws Degenerate for fewer than two labels, Contract for inconsistent
/// feature dimensions.
GbdtResult train_gbdt(const TrainingData& train, const GbdtConfig& config, const TrainingData* validation = nullptr);

/// Fits a single tree to fixed gradient statistics. Exposed so the split
/// search can be checked against an exhaustive reference.
DecisionTree fit_tree(const std::vector<std::vector<int>>& binned, std::span<const double> gradients,
                      std::span<const double> hessians, const std::vector<int>& bins_per_feature,
                      const GbdtConfig& config);

}  // namespace killchain
