#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "killchain/embedding.hpp"
#include "killchain/phase.hpp"
#include "killchain/text.hpp"

namespace killchain {

struct Technique {
  std::string technique_id;  // T1234 or T1234.001
  std::string name;
  std::string description;
  std::string combined_description;  // preprocess(name + ". " + description)
};

struct BundleWarnings {
  std::size_t skipped_revoked = 0;
  std::size_t skipped_deprecated = 0;
  std::size_t skipped_missing_reference = 0;
  std::size_t skipped_bad_id = 0;
  std::size_t skipped_duplicate_id = 0;
  std::size_t skipped_empty_text = 0;
  std::vector<std::string> messages;

  std::size_t total() const noexcept {
    return skipped_revoked + skipped_deprecated + skipped_missing_reference + skipped_bad_id +
           skipped_duplicate_id + skipped_empty_text;
  }
};

struct BundleParse {
  std::vector<Technique> techniques;
  BundleWarnings warnings;
};

/// Extracts non-revoked, non-deprecated `attack-pattern` objects from a
/// STIX 2.1 bundle. Malformed JSON throws Parse with the byte offset.
BundleParse parse_attack_bundle(std::string_view document);

bool is_valid_technique_id(std::string_view id) noexcept;

/// "T1566.001" -> "T1566"; parent ids are returned unchanged.
std::string parent_technique_id(std::string_view id);

struct LabeledSample {
  std::string technique_id;
  std::string text;
  std::string label;
  Phase phase = Phase::Reconnaissance;

  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

struct PhaseDataset {
  Phase phase = Phase::Reconnaissance;
  std::vector<LabeledSample> samples;
  std::vector<std::string> label_set;  // distinct labels, sorted

  /// Builds the dataset and derives label_set. Throws Contract when a sample
  /// belongs to a different phase.
  static PhaseDataset from_samples(Phase phase, std::vector<LabeledSample> samples);

  bool empty() const noexcept { return samples.empty(); }
  std::size_t size() const noexcept { return samples.size(); }
  std::map<std::string, std::size_t> label_counts() const;
};

/// One anchor paragraph per phase, in phase order.
using PhaseAnchors = std::array<std::string, kPhaseCount>;

PhaseAnchors parse_anchors(std::string_view json_text);
PhaseAnchors load_anchors(const std::filesystem::path& file);

struct PhaseScore {
  Phase phase;
  double similarity;
};

/// Cosine similarity of `embedding` to each anchor, ordered by descending
/// similarity with the lower phase index first on ties.
std::vector<PhaseScore> rank_phases(const EmbeddingVector& embedding,
                                    const std::array<EmbeddingVector, kPhaseCount>& anchors);

std::array<EmbeddingVector, kPhaseCount> embed_anchors(const EmbeddingProvider& embedder,
                                                       const PhaseAnchors& anchors);

struct LabelingOptions {
  /// Use the parent technique's name as the label for sub-techniques.
  bool collapse_subtechniques = false;
};

/// Assigns each technique to the phase whose anchor is most similar.
/// Throws Degenerate naming the technique id for zero-norm embeddings.
std::vector<LabeledSample> assign_phases(const std::vector<Technique>& techniques,
                                         const EmbeddingProvider& embedder,
                                         const PhaseAnchors& anchors,
                                         const LabelingOptions& options = {});

std::array<PhaseDataset, kPhaseCount> split_phase_datasets(const std::vector<LabeledSample>& samples);

struct SplitRatios {
  double train = 0.70;
  double validation = 0.10;
  double test = 0.20;
};

struct LabelAllocation {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;

  friend bool operator==(const LabelAllocation&, const LabelAllocation&) = default;
};

/// train = max(1, round(r_train c)), test = round(r_test c), validation gets
/// the rest; singletons go to train only.
LabelAllocation allocate_label(std::size_t count, const SplitRatios& ratios);

struct CorpusSplit {
  PhaseDataset train;
  PhaseDataset validation;
  PhaseDataset test;
  SplitRatios ratios;
  std::uint64_t seed = 0;
  std::map<std::string, LabelAllocation> allocation;
  std::vector<std::string> singleton_labels;
};

/// Per-label stratified split. Within a label, membership comes from a
/// seeded shuffle; each output split keeps the input order.
/// Throws EmptyInput for an empty dataset, Config for ratios not summing to 1.
CorpusSplit stratified_split(const PhaseDataset& dataset, const SplitRatios& ratios, std::uint64_t seed);

struct AugmentConfig {
  double tfidf_drop_fraction = 0.0;
  double reorder_probability = 0.0;
  std::size_t duplication_factor = 0;
  std::size_t minority_threshold = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AugmentResult {
  PhaseDataset dataset;
  std::size_t emitted = 0;
  std::size_t discarded_empty = 0;
};

/// Makes one variant of a token list: drops the floor(fraction * n) tokens
/// with the lowest tf-idf weight (earlier position first on ties), then swaps
/// each adjacent pair with probability `reorder_probability`.
std::vector<std::string> make_variant(const std::vector<std::string>& tokens, const TfidfModel& tfidf,
                                      double drop_fraction, double reorder_probability, Rng& rng);

/// Adds duplication_factor variants for every sample of a label with fewer
/// than minority_threshold samples. Originals are kept first, in order;
/// variants follow sorted by (technique_id, source position, variant index).
AugmentResult augment(const PhaseDataset& dataset, const TfidfModel& tfidf, const AugmentConfig& config);

// JSON Lines I/O --------------------------------------------------------------

nlohmann::ordered_json sample_to_json(const LabeledSample& sample);
LabeledSample sample_from_json(const nlohmann::json& obj);

std::string write_samples_jsonl(const std::vector<LabeledSample>& samples);
std::vector<LabeledSample> parse_samples_jsonl(std::string_view text);

nlohmann::ordered_json split_manifest(const CorpusSplit& split);

}  // namespace killchain
