#include "killchain/chain_graph.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "killchain/error.hpp"

namespace killchain {

void validate_tau(double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) {
    std::ostringstream os;
    os << "tau must lie in (0, 1], got " << tau;
    fail(ErrorKind::Config, os.str());
  }
}

std::vector<std::size_t> ChainGraph::layer(Phase phase) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].phase == phase) out.push_back(i);
  }
  return out;
}

ChainGraph build_semantic_graph(std::vector<ChainNode> nodes, double tau) {
  validate_tau(tau);
  std::stable_sort(nodes.begin(), nodes.end(), [](const ChainNode& a, const ChainNode& b) {
    if (a.phase != b.phase) return phase_index(a.phase) < phase_index(b.phase);
    return a.label < b.label;
  });
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (l2_norm(nodes[i].embedding) == 0.0) {
      fail(ErrorKind::Degenerate, "node '" + nodes[i].label + "' has a zero-norm embedding");
    }
    if (i > 0 && nodes[i].phase == nodes[i - 1].phase && nodes[i].label == nodes[i - 1].label) {
      fail(ErrorKind::Contract, "duplicate node '" + nodes[i].label + "' in phase " +
                                    std::string(phase_name(nodes[i].phase)));
    }
  }

  ChainGraph graph;
  graph.tau = tau;
  graph.nodes = std::move(nodes);
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    for (std::size_t j = i + 1; j < graph.nodes.size(); ++j) {
      int gap = phase_index(graph.nodes[j].phase) - phase_index(graph.nodes[i].phase);
      if (gap > 1) break;
      if (gap != 1) continue;
      double s = cosine_similarity(graph.nodes[i].embedding, graph.nodes[j].embedding);
      if (s >= tau) graph.edges.push_back({i, j, s});
    }
  }
  return graph;
}

ChainGraph build_semantic_graph(const std::map<Phase, std::vector<PredictedTechnique>>& per_phase_predictions,
                                const EmbeddingProvider& embedder, double tau) {
  validate_tau(tau);
  std::vector<ChainNode> nodes;
  for (const auto& [phase, predictions] : per_phase_predictions) {
    for (const auto& p : predictions) {
      ChainNode node{phase, p.label, p.description, {}};
      try {
        node.embedding = embed(embedder, EmbedItem{p.key, p.description});
      } catch (const Error& e) {
        fail(e.kind(), "technique '" + p.label + "' (" + std::string(phase_name(phase)) + "): " + e.what());
      }
      nodes.push_back(std::move(node));
    }
  }
  return build_semantic_graph(std::move(nodes), tau);
}

// ---------------------------------------------------------------------------
// Paths

double path_score(const ChainGraph& graph, const std::vector<std::size_t>& nodes) {
  double score = 0.0;
  for (std::size_t i = nodes.size(); i-- > 1;) {
    auto it = std::find_if(graph.edges.begin(), graph.edges.end(), [&](const ChainEdge& e) {
      return e.source == nodes[i - 1] && e.target == nodes[i];
    });
    if (it == graph.edges.end()) fail(ErrorKind::Contract, "path_score: consecutive nodes are not connected");
    score = std::log(it->similarity) + score;
  }
  return score;
}

namespace {

struct PathOrder {
  const ChainGraph* graph;

  bool operator()(const AttackPath& a, const AttackPath& b) const {
    if (a.score != b.score) return a.score > b.score;
    std::size_t n = std::min(a.nodes.size(), b.nodes.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto& la = graph->nodes[a.nodes[i]];
      const auto& lb = graph->nodes[b.nodes[i]];
      if (la.label != lb.label) return la.label < lb.label;
    }
    if (a.nodes.size() != b.nodes.size()) return a.nodes.size() < b.nodes.size();
    for (std::size_t i = 0; i < n; ++i) {
      if (a.nodes[i] != b.nodes[i]) return a.nodes[i] < b.nodes[i];
    }
    return false;
  }
};

}  // namespace

std::vector<AttackPath> extract_paths(const ChainGraph& graph, std::size_t k) {
  if (k == 0) fail(ErrorKind::Contract, "extract_paths: k must be >= 1");
  const std::size_t n = graph.nodes.size();
  std::vector<std::vector<std::size_t>> out_edges(n);
  std::vector<std::size_t> in_degree(n, 0);
  for (std::size_t e = 0; e < graph.edges.size(); ++e) {
    out_edges[graph.edges[e].source].push_back(e);
    ++in_degree[graph.edges[e].target];
  }

  PathOrder order{&graph};
  // suffixes[v]: the best (up to k) paths from v to a sink.
  std::vector<std::vector<AttackPath>> suffixes(n);
  std::vector<std::size_t> by_layer_desc(n);
  for (std::size_t i = 0; i < n; ++i) by_layer_desc[i] = n - 1 - i;  // nodes are sorted by phase
  for (std::size_t v : by_layer_desc) {
    auto& mine = suffixes[v];
    if (out_edges[v].empty()) {
      mine.push_back({{v}, 0.0, graph.nodes[v].phase, graph.nodes[v].phase});
      continue;
    }
    for (std::size_t e : out_edges[v]) {
      const ChainEdge& edge = graph.edges[e];
      const double step = std::log(edge.similarity);
      for (const AttackPath& tail : suffixes[edge.target]) {
        AttackPath p;
        p.nodes.reserve(tail.nodes.size() + 1);
        p.nodes.push_back(v);
        p.nodes.insert(p.nodes.end(), tail.nodes.begin(), tail.nodes.end());
        p.score = step + tail.score;
        p.start_phase = graph.nodes[v].phase;
        p.end_phase = tail.end_phase;
        mine.push_back(std::move(p));
      }
    }
    std::sort(mine.begin(), mine.end(), order);
    if (mine.size() > k) mine.resize(k);
  }

  std::vector<AttackPath> all;
  for (std::size_t v = 0; v < n; ++v) {
    if (in_degree[v] != 0 || out_edges[v].empty()) continue;
    all.insert(all.end(), suffixes[v].begin(), suffixes[v].end());
  }
  std::sort(all.begin(), all.end(), order);
  if (all.size() > k) all.resize(k);
  return all;
}

// ---------------------------------------------------------------------------
// Export

namespace {

std::string dot_quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string fixed3(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << v;
  return os.str();
}

}  // namespace

std::string export_dot(const ChainGraph& graph, const AttackPath* highlight) {
  std::set<std::pair<std::size_t, std::size_t>> marked;
  if (highlight != nullptr) {
    for (std::size_t i = 1; i < highlight->nodes.size(); ++i) marked.insert({highlight->nodes[i - 1], highlight->nodes[i]});
  }
  std::ostringstream os;
  os << "digraph kill_chain {\n";
  os << "  rankdir=LR;\n";
  os << "  node [shape=box, style=rounded];\n";
  for (Phase p : kAllPhases) {
    os << "  subgraph cluster_" << phase_index(p) << " {\n";
    os << "    label=" << dot_quote(phase_display_name(p)) << ";\n";
    for (std::size_t i : graph.layer(p)) {
      os << "    n" << i << " [label=" << dot_quote(graph.nodes[i].label) << "];\n";
    }
    os << "  }\n";
  }
  for (const auto& e : graph.edges) {
    os << "  n" << e.source << " -> n" << e.target << " [label=\"" << fixed3(e.similarity) << "\"";
    if (marked.contains({e.source, e.target})) os << ", color=\"red\", penwidth=2";
    os << "];\n";
  }
  os << "}\n";
  return os.str();
}

nlohmann::ordered_json graph_to_json(const ChainGraph& graph, const std::vector<AttackPath>& paths) {
  nlohmann::ordered_json doc;
  doc["format"] = "killchain.chain_graph/1";
  doc["tau"] = graph.tau;
  auto& nodes = doc["nodes"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const auto& n = graph.nodes[i];
    nlohmann::ordered_json node;
    node["id"] = i;
    node["phase"] = std::string(phase_name(n.phase));
    node["label"] = n.label;
    node["description"] = n.description;
    node["embedding"] = n.embedding;
    nodes.push_back(std::move(node));
  }
  auto& edges = doc["edges"] = nlohmann::ordered_json::array();
  for (const auto& e : graph.edges) {
    nlohmann::ordered_json edge;
    edge["source"] = e.source;
    edge["target"] = e.target;
    edge["similarity"] = e.similarity;
    edges.push_back(std::move(edge));
  }
  auto& out_paths = doc["paths"] = nlohmann::ordered_json::array();
  for (const auto& p : paths) {
    nlohmann::ordered_json path;
    path["nodes"] = p.nodes;
    std::vector<std::string> labels;
    for (std::size_t i : p.nodes) labels.push_back(graph.nodes[i].label);
    path["labels"] = labels;
    path["score"] = p.score;
    path["start_phase"] = std::string(phase_name(p.start_phase));
    path["end_phase"] = std::string(phase_name(p.end_phase));
    out_paths.push_back(std::move(path));
  }
  return doc;
}

std::string export_json(const ChainGraph& graph, const std::vector<AttackPath>& paths) {
  return graph_to_json(graph, paths).dump(2) + "\n";
}

ImportedGraph import_json(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Parse, "chain graph JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != "killchain.chain_graph/1") {
    fail(ErrorKind::Format, "not a killchain.chain_graph/1 document");
  }
  ImportedGraph out;
  try {
    out.graph.tau = doc.at("tau").get<double>();
    validate_tau(out.graph.tau);
    for (const auto& n : doc.at("nodes")) {
      out.graph.nodes.push_back({parse_phase(n.at("phase").get<std::string>()), n.at("label").get<std::string>(),
                                 n.at("description").get<std::string>(),
                                 n.at("embedding").get<std::vector<double>>()});
    }
    for (const auto& e : doc.at("edges")) {
      out.graph.edges.push_back(
          {e.at("source").get<std::size_t>(), e.at("target").get<std::size_t>(), e.at("similarity").get<double>()});
    }
    for (const auto& p : doc.at("paths")) {
      out.paths.push_back({p.at("nodes").get<std::vector<std::size_t>>(), p.at("score").get<double>(),
                           parse_phase(p.at("start_phase").get<std::string>()),
                           parse_phase(p.at("end_phase").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("chain graph: ") + e.what());
  }
  const auto& g = out.graph;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& e : g.edges) {
    if (e.source >= g.nodes.size() || e.target >= g.nodes.size()) fail(ErrorKind::Format, "chain graph: edge endpoint out of range");
    if (phase_index(g.nodes[e.target].phase) != phase_index(g.nodes[e.source].phase) + 1) {
      fail(ErrorKind::Format, "chain graph: edge does not join adjacent phases");
    }
    if (e.similarity < g.tau) fail(ErrorKind::Format, "chain graph: edge similarity below tau");
    if (!seen.insert({e.source, e.target}).second) fail(ErrorKind::Format, "chain graph: duplicate edge");
  }
  for (const auto& p : out.paths) {
    for (std::size_t i : p.nodes) {
      if (i >= g.nodes.size()) fail(ErrorKind::Format, "chain graph: path node out of range");
    }
    for (std::size_t i = 1; i < p.nodes.size(); ++i) {
      if (!seen.contains({p.nodes[i - 1], p.nodes[i]})) fail(ErrorKind::Format, "chain graph: path uses a missing edge");
    }
  }
  return out;
}

}  // namespace killchain
