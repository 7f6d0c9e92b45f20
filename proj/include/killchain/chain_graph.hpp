#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "killchain/embedding.hpp"
#include "killchain/phase.hpp"

namespace killchain {

inline constexpr double kDefaultTau = 0.8;

struct ChainNode {
  Phase phase = Phase::Reconnaissance;
  std::string label;
  std::string description;
  EmbeddingVector embedding;

  friend bool operator==(const ChainNode&, const ChainNode&) = default;
};

struct ChainEdge {
  std::size_t source = 0;  // index into ChainGraph::nodes
  std::size_t target = 0;
  double similarity = 0.0;

  friend bool operator==(const ChainEdge&, const ChainEdge&) = default;
};

/// Layered DAG: nodes sorted by (phase index, label), edges sorted by
/// (source, target) and only between adjacent phases.
struct ChainGraph {
  std::vector<ChainNode> nodes;
  std::vector<ChainEdge> edges;
  double tau = kDefaultTau;

  std::vector<std::size_t> layer(Phase phase) const;

  friend bool operator==(const ChainGraph&, const ChainGraph&) = default;
};

struct AttackPath {
  std::vector<std::size_t> nodes;
  double score = 0.0;  // sum of ln(similarity), accumulated from the last edge backwards
  Phase start_phase = Phase::Reconnaissance;
  Phase end_phase = Phase::Reconnaissance;

  friend bool operator==(const AttackPath&, const AttackPath&) = default;
};

struct PredictedTechnique {
  std::string label;
  std::string description;
  std::string key;  // optional table key; the description's content key is the fallback
};

/// Throws Config when tau is outside (0, 1].
void validate_tau(double tau);

/// Embeds each description and links every pair in adjacent phases whose
/// cosine similarity is >= tau. Throws Contract on duplicate (phase, label).
ChainGraph build_semantic_graph(const std::map<Phase, std::vector<PredictedTechnique>>& per_phase_predictions,
                                const EmbeddingProvider& embedder, double tau);

/// Same construction over nodes whose embeddings are already known.
ChainGraph build_semantic_graph(std::vector<ChainNode> nodes, double tau);

/// Score of a node sequence under the path-scoring rule.
double path_score(const ChainGraph& graph, const std::vector<std::size_t>& nodes);

/// Up to k maximal paths (at least one edge, no incoming edge at the start,
/// no outgoing edge at the end) by descending score, then by label sequence.
/// Exact k-best dynamic programming over the layers.
std::vector<AttackPath> extract_paths(const ChainGraph& graph, std::size_t k);

/// Graphviz digraph with one cluster per phase. Edges of `highlight` get
/// color="red" and penwidth=2.
std::string export_dot(const ChainGraph& graph, const AttackPath* highlight = nullptr);

nlohmann::ordered_json graph_to_json(const ChainGraph& graph, const std::vector<AttackPath>& paths);
std::string export_json(const ChainGraph& graph, const std::vector<AttackPath>& paths);

struct ImportedGraph {
  ChainGraph graph;
  std::vector<AttackPath> paths;
};

/// Parses export_json output and re-checks the layering invariants.
ImportedGraph import_json(std::string_view text);

}  // namespace killchain
