#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "killchain/chain_graph.hpp"
#include "killchain/corpus.hpp"
#include "killchain/ensemble.hpp"
#include "killchain/scorers.hpp"

namespace killchain {

inline constexpr double kNearTieGap = 0.02;
inline constexpr std::size_t kDefaultKPred = 3;

/// Splits narrative text into clause-level units at . ! ? ; and , when the
/// terminator ends a token (followed by whitespace or end of text), so
/// "CVE-2017-0199.", "1.2" and "1,000" stay intact. Each unit is cleaned
/// with the corpus preprocessing; empty units are dropped.
/// Throws EmptyInput when nothing remains.
std::vector<std::string> segment(std::string_view text);

struct NarrativeSegment {
  std::size_t index = 0;  // position in segment() output
  std::string text;
  Phase phase = Phase::Reconnaissance;
  double similarity = 0.0;
};

struct SegmentRouting {
  std::vector<NarrativeSegment> routed;  // ordered by (segment index, rank)
  std::vector<std::size_t> unembeddable;  // only filled when skipping is enabled
};

/// Routes every segment to its most similar phase anchor (lowest phase index
/// on ties). When the two best similarities differ by less than
/// `near_tie_gap` the segment is also routed to the runner-up.
/// With `skip_unembeddable`, segments without any known token are reported
/// instead of raising Degenerate.
SegmentRouting assign_segment_phases(const std::vector<std::string>& segments, const EmbeddingProvider& embedder,
                                     const PhaseAnchors& anchors, double near_tie_gap = kNearTieGap,
                                     bool skip_unembeddable = false);

/// Everything needed to predict techniques for one phase.
struct PhaseBundle {
  Phase phase = Phase::Reconnaissance;
  std::vector<std::string> label_set;
  std::vector<Scorer> scorers;
  EnsembleWeights weights;
  std::map<std::string, std::string> label_descriptions;
  std::map<std::string, std::string> label_keys;  // representative technique id
};

struct NarrativeOptions {
  double tau = kDefaultTau;
  std::size_t k_pred = kDefaultKPred;
  double near_tie_gap = kNearTieGap;
  std::size_t max_paths = 10;
};

struct TechniquePrediction {
  Phase phase = Phase::Reconnaissance;
  std::string label;
  std::string description;
  std::string key;
  double probability = 0.0;      // fused ensemble probability
  std::size_t segment = 0;       // segment index that produced the probability
  std::map<std::string, double> scorer_probabilities;
};

struct ChainRun {
  std::string narrative;
  std::vector<std::string> segments;
  SegmentRouting routing;
  std::vector<TechniquePrediction> predictions;  // phase order, then rank
  ChainGraph graph;
  std::vector<AttackPath> paths;
  NarrativeOptions options;
  nlohmann::ordered_json provenance;  // seeds and model digests, filled by callers

  nlohmann::ordered_json to_json() const;
  static ChainRun from_json(const nlohmann::json& doc);
};

/// Per phase, each scorer's matrix over the routed segments plus the fused
/// matrix under the key "ensemble". Rows are "segment-<index>".
using PhaseMatrices = std::map<Phase, std::map<std::string, ProbabilityMatrix>>;

/// Segments, routes and scores the narrative; returns predictions without
/// building the graph.
ChainRun predict_narrative(std::string_view text, const std::map<Phase, PhaseBundle>& bundles,
                           const EmbeddingProvider& embedder, const PhaseAnchors& anchors,
                           const NarrativeOptions& options, PhaseMatrices* matrices_out = nullptr);

/// Builds the graph and paths from recorded predictions (replay).
void build_chain(ChainRun& run, const EmbeddingProvider& embedder);

/// predict_narrative followed by build_chain.
ChainRun run_narrative(std::string_view text, const std::map<Phase, PhaseBundle>& bundles,
                       const EmbeddingProvider& embedder, const PhaseAnchors& anchors,
                       const NarrativeOptions& options);

/// Paths printed as an aligned text table.
std::string format_paths_table(const ChainGraph& graph, const std::vector<AttackPath>& paths);

}  // namespace killchain
