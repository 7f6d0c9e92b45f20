#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "killchain/chain_graph.hpp"
#include "killchain/ensemble.hpp"
#include "killchain/gbdt.hpp"
#include "killchain/text.hpp"

namespace killchain::testing {

/// Three well-separated 2-D clusters, `per_label` points each, labels
/// "alpha", "beta", "gamma" centred on (0,0), (6,0) and (3,6).
inline TrainingData separable_clusters(std::size_t per_label, std::uint64_t seed) {
  static const double centres[3][2] = {{0.0, 0.0}, {6.0, 0.0}, {3.0, 6.0}};
  static const char* names[3] = {"alpha", "beta", "gamma"};
  Rng rng(seed);
  TrainingData data;
  for (std::size_t i = 0; i < per_label; ++i) {
    for (int c = 0; c < 3; ++c) {
      data.features.push_back({centres[c][0] + 0.8 * rng.normal(), centres[c][1] + 0.8 * rng.normal()});
      data.labels.push_back(names[c]);
    }
  }
  return data;
}

/// Two clusters for the binary cases.
inline TrainingData two_clusters(std::size_t per_label, std::uint64_t seed) {
  Rng rng(seed);
  TrainingData data;
  for (std::size_t i = 0; i < per_label; ++i) {
    data.features.push_back({-2.0 + 0.5 * rng.normal(), -2.0 + 0.5 * rng.normal()});
    data.labels.push_back("left");
    data.features.push_back({2.0 + 0.5 * rng.normal(), 2.0 + 0.5 * rng.normal()});
    data.labels.push_back("right");
  }
  return data;
}

inline std::vector<double> random_unit_vector(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  do {
    n = 0.0;
    for (double& x : v) {
      x = rng.normal();
      n += x * x;
    }
  } while (n == 0.0);
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

/// Random probability row of length k (strictly positive entries).
inline std::vector<double> random_simplex_row(Rng& rng, std::size_t k) {
  std::vector<double> row(k);
  double sum = 0.0;
  for (double& x : row) {
    x = -std::log(1.0 - rng.uniform());
    sum += x;
  }
  for (double& x : row) x /= sum;
  return row;
}

/// Three scorers over two labels and six samples. Scorer i is wrong on
/// samples 2i and 2i+1 (probability 0.6 on the wrong label) and right
/// everywhere else with probability 0.9.
struct ErrorCorrectionFixture {
  std::vector<std::string> truth;
  std::map<std::string, ProbabilityMatrix> matrices;
};

inline ErrorCorrectionFixture error_correction_fixture() {
  ErrorCorrectionFixture fx;
  const std::vector<std::string> labels{"benign", "malicious"};
  std::vector<std::string> ids;
  for (int s = 0; s < 6; ++s) {
    ids.push_back("s" + std::to_string(s));
    fx.truth.push_back(labels[static_cast<std::size_t>(s % 2)]);
  }
  for (int i = 0; i < 3; ++i) {
    std::vector<double> values;
    for (int s = 0; s < 6; ++s) {
      const bool wrong = s / 2 == i;
      const double p_true = wrong ? 0.4 : 0.9;
      const double p_benign = s % 2 == 0 ? p_true : 1.0 - p_true;
      values.push_back(p_benign);
      values.push_back(1.0 - p_benign);
    }
    fx.matrices.emplace("scorer" + std::to_string(i), ProbabilityMatrix(ids, labels, values));
  }
  return fx;
}

/// Random soft-vote instance: up to 4 scorers, 6 labels, 50 samples, with
/// weights drawn from the simplex.
struct VoteInstance {
  std::map<std::string, ProbabilityMatrix> matrices;
  EnsembleWeights weights;
};

inline VoteInstance random_vote_instance(Rng& rng) {
  const std::size_t m = 1 + rng.below(4), k = 2 + rng.below(5), n = 1 + rng.below(50);
  std::vector<std::string> labels, ids;
  for (std::size_t c = 0; c < k; ++c) labels.push_back("label" + std::to_string(c));
  for (std::size_t r = 0; r < n; ++r) ids.push_back("row" + std::to_string(r));
  VoteInstance inst;
  std::vector<double> w = random_simplex_row(rng, m);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> values;
    for (std::size_t r = 0; r < n; ++r) {
      auto row = random_simplex_row(rng, k);
      values.insert(values.end(), row.begin(), row.end());
    }
    std::string name = "scorer" + std::to_string(i);
    inst.matrices.emplace(name, ProbabilityMatrix(ids, labels, values));
    inst.weights.weights[name] = w[i];
  }
  return inst;
}

/// Random layered node set: 0-3 nodes per phase with nearby 3-D unit
/// embeddings, so that similarities spread over the whole threshold range.
inline std::vector<ChainNode> random_layered_nodes(Rng& rng) {
  std::vector<ChainNode> nodes;
  const std::vector<double> centre = random_unit_vector(rng, 3);
  for (Phase p : kAllPhases) {
    const std::size_t count = rng.below(4);
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> v = centre;
      for (double& x : v) x += 0.45 * rng.normal();
      nodes.push_back({p, "tech" + std::to_string(rng.below(1000)) + "_" + std::to_string(i), "", v});
    }
  }
  return nodes;
}

/// All maximal paths by depth-first enumeration, scored with the same
/// backwards fold as the engine and sorted by the documented ranking.
inline std::vector<AttackPath> enumerate_paths(const ChainGraph& g) {
  const std::size_t n = g.nodes.size();
  std::vector<std::vector<const ChainEdge*>> out(n);
  std::vector<bool> has_in(n, false);
  for (const auto& e : g.edges) {
    out[e.source].push_back(&e);
    has_in[e.target] = true;
  }
  std::vector<AttackPath> paths;
  std::vector<std::size_t> stack;
  std::vector<double> sims;
  auto dfs = [&](auto&& self, std::size_t v) -> void {
    stack.push_back(v);
    if (out[v].empty()) {
      if (stack.size() > 1) {
        double score = 0.0;
        for (std::size_t i = sims.size(); i-- > 0;) score = std::log(sims[i]) + score;
        paths.push_back({stack, score, g.nodes[stack.front()].phase, g.nodes[v].phase});
      }
    } else {
      for (const ChainEdge* e : out[v]) {
        sims.push_back(e->similarity);
        self(self, e->target);
        sims.pop_back();
      }
    }
    stack.pop_back();
  };
  for (std::size_t v = 0; v < n; ++v)
    if (!has_in[v]) dfs(dfs, v);

  auto labels = [&](const AttackPath& p) {
    std::vector<std::string> out_labels;
    for (std::size_t i : p.nodes) out_labels.push_back(g.nodes[i].label);
    return out_labels;
  };
  std::sort(paths.begin(), paths.end(), [&](const AttackPath& a, const AttackPath& b) {
    if (a.score != b.score) return a.score > b.score;
    auto la = labels(a), lb = labels(b);
    std::size_t m = std::min(la.size(), lb.size());
    for (std::size_t i = 0; i < m; ++i)
      if (la[i] != lb[i]) return la[i] < lb[i];
    if (la.size() != lb.size()) return la.size() < lb.size();
    return a.nodes < b.nodes;
  });
  return paths;
}

/// The seven-phase, three-nodes-per-phase fixture behind the golden files
/// (tests/golden/make_golden.py holds the same table).
inline std::vector<ChainNode> golden_fixture_nodes() {
  return {
      {Phase::Reconnaissance, "Active Scanning", "scan victim hosts", {4.0, 1.0, 0.0, 0.0}},
      {Phase::Reconnaissance, "Gather Victim Identity Information", "collect staff emails", {1.0, 4.0, 0.0, 1.0}},
      {Phase::Reconnaissance, "Search Open Websites", "browse public sites", {0.0, 0.0, 4.0, 1.0}},
      {Phase::Weaponization, "Develop Capabilities", "build exploit kit", {4.0, 2.0, 0.0, 0.0}},
      {Phase::Weaponization, "Obtain Capabilities", "buy malware", {0.0, 1.0, 0.0, 4.0}},
      {Phase::Weaponization, "Stage Capabilities", "upload payloads", {1.0, 4.0, 1.0, 0.0}},
      {Phase::Delivery, "Drive-by Compromise", "watering hole", {0.0, 0.0, 4.0, 2.0}},
      {Phase::Delivery, "Phishing", "malicious attachment", {3.0, 3.0, 0.0, 0.0}},
      {Phase::Delivery, "Replication Through Removable Media", "usb drop", {0.0, 1.0, 1.0, 4.0}},
      {Phase::Exploitation, "Exploitation for Client Execution", "document exploit", {3.0, 4.0, 0.0, 0.0}},
      {Phase::Exploitation, "Exploit Public-Facing Application", "web exploit", {0.0, 0.0, 3.0, 4.0}},
      {Phase::Exploitation, "User Execution", "victim opens file", {4.0, 1.0, 1.0, 0.0}},
      {Phase::Installation, "Boot or Logon Autostart Execution", "registry run key", {2.0, 4.0, 0.0, 1.0}},
      {Phase::Installation, "Create Account", "new local account", {0.0, 0.0, 1.0, 4.0}},
      {Phase::Installation, "Scheduled Task", "cron job", {4.0, 0.0, 1.0, 0.0}},
      {Phase::CommandAndControl, "Application Layer Protocol", "https beacon", {1.0, 4.0, 0.0, 0.0}},
      {Phase::CommandAndControl, "Ingress Tool Transfer", "download tools", {4.0, 1.0, 0.0, 1.0}},
      {Phase::CommandAndControl, "Proxy", "relay traffic", {0.0, 1.0, 4.0, 0.0}},
      {Phase::ActionsOnObjectives, "Data Encrypted for Impact", "ransomware", {3.0, 1.0, 0.0, 0.0}},
      {Phase::ActionsOnObjectives, "Exfiltration Over C2 Channel", "steal data", {1.0, 3.0, 0.0, 0.0}},
      {Phase::ActionsOnObjectives, "Inhibit System Recovery", "delete backups", {0.0, 0.0, 1.0, 3.0}},
  };
}

}  // namespace killchain::testing
