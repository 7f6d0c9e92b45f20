#pragma once

// File-based stage handoff for the command-line tool: configuration,
// per-stage artifacts under a work directory and run manifests.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "killchain/chain_graph.hpp"
#include "killchain/corpus.hpp"
#include "killchain/ensemble.hpp"
#include "killchain/gbdt.hpp"
#include "killchain/narrative.hpp"
#include "killchain/scorers.hpp"

namespace killchain {

std::string_view engine_version() noexcept;

/// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

std::string read_file(const std::filesystem::path& file);

/// Writes through a temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& file, std::string_view contents);

struct ScorerSpec {
  std::string name;
  ScorerKind kind = ScorerKind::NativeGbdt;
  /// External scorers only: directory holding <Phase>/validation.jsonl and
  /// <Phase>/test.jsonl probability matrices.
  std::filesystem::path matrices;
};

struct PipelineConfig {
  std::filesystem::path bundle;
  std::filesystem::path anchors;
  std::filesystem::path embedding_table;  // empty: TF-IDF fitted at ingest
  std::filesystem::path work_dir;

  bool collapse_subtechniques = true;
  std::size_t tfidf_dim = 512;
  SplitRatios split;
  std::uint64_t split_seed = 0;
  AugmentConfig augment;
  GbdtConfig gbdt;
  SoftmaxConfig softmax;
  std::vector<ScorerSpec> scorers = {{"gbdt", ScorerKind::NativeGbdt, {}},
                                     {"softmax", ScorerKind::NativeSoftmax, {}}};
  std::vector<int> sweep_leaves = {31, 63, 100};
  double tau = kDefaultTau;
  std::size_t k_pred = kDefaultKPred;
  std::size_t max_paths = 10;
  double near_tie_gap = kNearTieGap;

  /// Throws Config naming the offending key.
  void validate() const;

  /// Relative paths in the document resolve against `base_dir`.
  static PipelineConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& file);
  nlohmann::ordered_json to_json() const;

  /// Sets the split, augment, gbdt and softmax seeds.
  void set_seed(std::uint64_t seed);

  NarrativeOptions narrative_options() const;
};

/// Hash of the configuration keys a stage depends on, cumulative over its
/// upstream stages.
std::string stage_fingerprint(const PipelineConfig& config, std::string_view stage);

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::map<std::string, std::string> inputs;   // path -> sha256
  std::map<std::string, std::string> outputs;  // path relative to the work dir -> sha256
  std::string started_at;
  std::string finished_at;
  std::string engine_version;
  std::vector<std::string> warnings;

  nlohmann::ordered_json to_json() const;
  static RunManifest from_json(const nlohmann::json& doc);
};

/// An upstream artifact is missing, modified, or was produced under a
/// different configuration. The message lists every mismatch.
class StaleArtifactError : public std::runtime_error {
 public:
  explicit StaleArtifactError(const std::string& message) : std::runtime_error(message) {}
};

struct LabelInfo {
  std::string description;
  std::string key;
};

/// Label catalog per phase: the representative description and technique id
/// of every label.
using LabelCatalog = std::map<Phase, std::map<std::string, LabelInfo>>;

struct IngestResult {
  BundleWarnings warnings;
  std::size_t technique_count = 0;
  TfidfModel tfidf;
  std::array<PhaseDataset, kPhaseCount> datasets;
  LabelCatalog labels;
};

struct PhaseModels {
  /// Native scorers by name.
  std::map<std::string, ScorerModel> native;
  /// Training report per native scorer.
  std::map<std::string, nlohmann::ordered_json> reports;
  /// Sweep runs keyed by num_leaves; empty unless sweeping.
  std::map<int, GbdtResult> sweep;
};

struct PhaseEvaluation {
  EnsembleWeights weights;
  std::map<std::string, EvaluationReport> validation;
  std::map<std::string, EvaluationReport> test;
  EvaluationReport ensemble;
  std::map<std::string, ProbabilityMatrix> test_matrices;  // includes "ensemble"
  std::string best_scorer;
  double delta_f1 = 0.0;

  nlohmann::ordered_json to_json(Phase phase) const;
};

struct VerifyReport {
  std::size_t checked = 0;
  std::vector<std::string> drift;
  bool ok() const noexcept { return drift.empty(); }
};

/// Stage runner bound to one configuration and work directory.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config, std::ostream* log = nullptr);

  const PipelineConfig& config() const noexcept { return config_; }

  /// Restricts split, augment, train and evaluate to one phase.
  void restrict_to(std::optional<Phase> phase) { only_ = phase; }

  RunManifest ingest();
  RunManifest split();
  RunManifest augment();
  RunManifest train(bool sweep = false);
  RunManifest evaluate();
  RunManifest predict(std::string_view narrative, const std::filesystem::path& out_dir);
  RunManifest chain(const std::filesystem::path& run_dir);

  /// Every stage in memory from the configuration; writes only the final
  /// run, graph and path files to `out_dir`.
  RunManifest narrative(std::string_view text, const std::filesystem::path& out_dir);

  VerifyReport verify() const;

  /// Default output directory of predict/chain.
  std::filesystem::path default_run_dir() const { return config_.work_dir / "run"; }

 private:
  void log(const std::string& message) const;
  bool selected(Phase p) const { return !only_ || *only_ == p; }

  PipelineConfig config_;
  std::ostream* log_;
  std::optional<Phase> only_;
};

// In-memory stages, shared by the staged commands and the monolithic run.

IngestResult run_ingest(const PipelineConfig& config, const EmbeddingTable* table);
EmbeddingProvider make_embedder(const TfidfModel& tfidf, const EmbeddingTable* table);
LabelCatalog build_label_catalog(const std::vector<LabeledSample>& samples, const std::vector<Technique>& techniques);
nlohmann::ordered_json label_catalog_to_json(const LabelCatalog& catalog);
LabelCatalog label_catalog_from_json(const nlohmann::json& doc);

PhaseModels train_phase(const PhaseDataset& train, const PhaseDataset& validation, const EmbeddingProvider& embedder,
                        const PipelineConfig& config, bool sweep);

/// External matrices, keyed by scorer name, for one split of one phase.
using ExternalMatrices = std::map<std::string, ProbabilityMatrix>;

PhaseEvaluation evaluate_phase(Phase phase, const PhaseModels& models, const CorpusSplit& split,
                               const EmbeddingProvider& embedder, const PipelineConfig& config,
                               const ExternalMatrices& external_validation, const ExternalMatrices& external_test);

/// Scorer bundle for narrative prediction. Weights are renormalized over the
/// native scorers when external scorers took part in fitting them.
PhaseBundle make_phase_bundle(Phase phase, const PhaseModels& models, const EnsembleWeights& weights,
                              const std::map<std::string, LabelInfo>& labels, std::vector<std::string>* warnings);

/// Text written for the graph and run artifacts.
struct ChainOutputs {
  std::string run_json;
  std::string graph_json;
  std::string graph_dot;
  std::string paths_table;
};

ChainOutputs render_chain(const ChainRun& run);

}  // namespace killchain
