#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "killchain/phase.hpp"

namespace killchain {

inline constexpr double kRowSumTolerance = 1e-6;

/// Sample x label grid of class probabilities. Rows are stored row-major.
class ProbabilityMatrix {
 public:
  ProbabilityMatrix() = default;

  /// Validates on construction: unique ids and labels, entries in [0, 1],
  /// every row summing to 1 within kRowSumTolerance. Nothing is renormalized.
  ProbabilityMatrix(std::vector<std::string> sample_ids, std::vector<std::string> labels,
                    std::vector<double> values);

  std::size_t rows() const noexcept { return sample_ids_.size(); }
  std::size_t cols() const noexcept { return labels_.size(); }
  const std::vector<std::string>& sample_ids() const noexcept { return sample_ids_; }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  const std::vector<double>& values() const noexcept { return values_; }

  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols(), cols()}; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::optional<std::size_t> label_index(std::string_view label) const;

  /// Column index of the row maximum; exact ties go to the lexicographically
  /// smallest label.
  std::size_t argmax(std::size_t r) const;
  std::vector<std::string> argmax_labels() const;

  friend bool operator==(const ProbabilityMatrix&, const ProbabilityMatrix&) = default;

 private:
  std::vector<std::string> sample_ids_;
  std::vector<std::string> labels_;
  std::vector<double> values_;
};

/// Argmax over a probability vector with the lexicographic tie rule.
std::size_t argmax_with_ties(std::span<const double> row, const std::vector<std::string>& labels);

/// Serializes as JSON Lines: header `{"labels": [...], "phase": "..."}`,
/// then one `{"sample_id": ..., "probs": {label: p, ...}}` per row.
std::string write_probability_matrix(const ProbabilityMatrix& matrix, Phase phase);

/// Strict reader. Rows are reordered to `expected_sample_ids` and columns to
/// `expected_labels`. Throws Validation for coverage gaps and bad row sums,
/// Format for unknown or missing labels and header mismatches.
ProbabilityMatrix parse_probability_matrix(std::string_view jsonl,
                                           const std::vector<std::string>& expected_labels,
                                           const std::vector<std::string>& expected_sample_ids);

ProbabilityMatrix load_probability_matrix(const std::filesystem::path& file,
                                          const std::vector<std::string>& expected_labels,
                                          const std::vector<std::string>& expected_sample_ids);

}  // namespace killchain
