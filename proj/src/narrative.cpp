#include "killchain/narrative.hpp"

#include <algorithm>
#include <cctype>
#include <iomanip>
#include <sstream>

#include "killchain/error.hpp"
#include "killchain/text.hpp"

namespace killchain {

namespace {

bool is_terminator(char c) { return c == '.' || c == '!' || c == '?' || c == ';' || c == ','; }

}  // namespace

std::vector<std::string> segment(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    bool cut = i == text.size();
    if (!cut && is_terminator(text[i])) {
      // Closing quotes/brackets may sit between the terminator and the space.
      std::size_t j = i + 1;
      while (j < text.size() && (text[j] == '"' || text[j] == '\'' || text[j] == ')' || text[j] == ']')) ++j;
      cut = j == text.size() || std::isspace(static_cast<unsigned char>(text[j])) || is_terminator(text[j]);
    }
    if (!cut) continue;
    std::string piece = clean_text(text.substr(start, i - start));
    if (!piece.empty()) out.push_back(std::move(piece));
    start = i + 1;
  }
  if (out.empty()) fail(ErrorKind::EmptyInput, "narrative yields no segments");
  return out;
}

SegmentRouting assign_segment_phases(const std::vector<std::string>& segments, const EmbeddingProvider& embedder,
                                     const PhaseAnchors& anchors, double near_tie_gap, bool skip_unembeddable) {
  auto anchor_vecs = embed_anchors(embedder, anchors);
  SegmentRouting routing;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    std::vector<PhaseScore> ranked;
    try {
      ranked = rank_phases(embed_text(embedder, segments[i]), anchor_vecs);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Degenerate) throw;
      if (skip_unembeddable) {
        routing.unembeddable.push_back(i);
        continue;
      }
      fail(ErrorKind::Degenerate, "segment " + std::to_string(i) + " has a degenerate embedding: " + e.what());
    }
    routing.routed.push_back({i, segments[i], ranked[0].phase, ranked[0].similarity});
    if (ranked[0].similarity - ranked[1].similarity < near_tie_gap) {
      routing.routed.push_back({i, segments[i], ranked[1].phase, ranked[1].similarity});
    }
  }
  return routing;
}

ChainRun predict_narrative(std::string_view text, const std::map<Phase, PhaseBundle>& bundles,
                           const EmbeddingProvider& embedder, const PhaseAnchors& anchors,
                           const NarrativeOptions& options, PhaseMatrices* matrices_out) {
  validate_tau(options.tau);
  if (options.k_pred == 0) fail(ErrorKind::Config, "k_pred must be >= 1");

  ChainRun run;
  run.narrative = std::string(text);
  run.options = options;
  run.segments = segment(text);
  run.routing = assign_segment_phases(run.segments, embedder, anchors, options.near_tie_gap, true);

  std::map<Phase, std::vector<const NarrativeSegment*>> by_phase;
  for (const auto& s : run.routing.routed) by_phase[s.phase].push_back(&s);

  for (const auto& [phase, segs] : by_phase) {
    auto bundle_it = bundles.find(phase);
    if (bundle_it == bundles.end() || bundle_it->second.scorers.empty()) {
      fail(ErrorKind::Contract, "segments were routed to " + std::string(phase_name(phase)) +
                                    " but no trained scorer bundle exists for that phase");
    }
    const PhaseBundle& bundle = bundle_it->second;

    std::vector<ScoreInput> inputs;
    for (const auto* s : segs) {
      inputs.push_back({"segment-" + std::to_string(s->index), embed_text(embedder, s->text)});
    }
    std::map<std::string, ProbabilityMatrix> matrices;
    for (const auto& scorer : bundle.scorers) {
      try {
        matrices.emplace(scorer.handle.name, score(scorer, inputs, bundle.label_set));
      } catch (const Error& e) {
        fail(e.kind(), std::string(phase_name(phase)) + ": " + e.what());
      }
    }
    VoteResult vote = soft_vote(matrices, bundle.weights);
    if (matrices_out != nullptr) {
      auto& slot = (*matrices_out)[phase];
      slot = matrices;
      slot.emplace("ensemble", vote.fused);
    }

    // Per label, the best fused probability over this phase's segments.
    std::vector<TechniquePrediction> candidates;
    for (std::size_t c = 0; c < bundle.label_set.size(); ++c) {
      TechniquePrediction p;
      p.phase = phase;
      p.label = bundle.label_set[c];
      std::size_t best_row = 0;
      for (std::size_t r = 0; r < vote.fused.rows(); ++r) {
        if (vote.fused.at(r, c) > vote.fused.at(best_row, c)) best_row = r;
      }
      p.probability = vote.fused.at(best_row, c);
      p.segment = segs[best_row]->index;
      for (const auto& [name, m] : matrices) p.scorer_probabilities[name] = m.at(best_row, c);
      if (auto d = bundle.label_descriptions.find(p.label); d != bundle.label_descriptions.end()) p.description = d->second;
      if (auto k = bundle.label_keys.find(p.label); k != bundle.label_keys.end()) p.key = k->second;
      if (p.description.empty()) fail(ErrorKind::Contract, "no description for label '" + p.label + "'");
      candidates.push_back(std::move(p));
    }
    std::stable_sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
      if (a.probability != b.probability) return a.probability > b.probability;
      return a.label < b.label;
    });
    if (candidates.size() > options.k_pred) candidates.resize(options.k_pred);
    for (auto& p : candidates) run.predictions.push_back(std::move(p));
  }
  return run;
}

void build_chain(ChainRun& run, const EmbeddingProvider& embedder) {
  std::map<Phase, std::vector<PredictedTechnique>> per_phase;
  for (const auto& p : run.predictions) per_phase[p.phase].push_back({p.label, p.description, p.key});
  run.graph = build_semantic_graph(per_phase, embedder, run.options.tau);
  run.paths = extract_paths(run.graph, std::max<std::size_t>(run.options.max_paths, 1));
}

ChainRun run_narrative(std::string_view text, const std::map<Phase, PhaseBundle>& bundles,
                       const EmbeddingProvider& embedder, const PhaseAnchors& anchors,
                       const NarrativeOptions& options) {
  ChainRun run = predict_narrative(text, bundles, embedder, anchors, options);
  build_chain(run, embedder);
  return run;
}

// ---------------------------------------------------------------------------

nlohmann::ordered_json ChainRun::to_json() const {
  nlohmann::ordered_json doc;
  doc["format"] = "killchain.chain_run/1";
  doc["options"] = {{"tau", options.tau},
                    {"k_pred", options.k_pred},
                    {"near_tie_gap", options.near_tie_gap},
                    {"max_paths", options.max_paths}};
  doc["provenance"] = provenance.is_null() ? nlohmann::ordered_json::object() : provenance;
  doc["narrative"] = narrative;
  doc["segments"] = segments;
  auto& routed = doc["routing"] = nlohmann::ordered_json::array();
  for (const auto& s : routing.routed) {
    routed.push_back({{"segment", s.index}, {"phase", std::string(phase_name(s.phase))}, {"similarity", s.similarity}});
  }
  doc["unembeddable_segments"] = routing.unembeddable;
  auto& preds = doc["predictions"] = nlohmann::ordered_json::array();
  for (const auto& p : predictions) {
    nlohmann::ordered_json j;
    j["phase"] = std::string(phase_name(p.phase));
    j["label"] = p.label;
    j["probability"] = p.probability;
    j["segment"] = p.segment;
    j["scorer_probabilities"] = p.scorer_probabilities;
    j["key"] = p.key;
    j["description"] = p.description;
    preds.push_back(std::move(j));
  }
  if (!graph.nodes.empty() || !paths.empty()) doc["graph"] = graph_to_json(graph, paths);
  return doc;
}

ChainRun ChainRun::from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || doc.value("format", "") != "killchain.chain_run/1") {
    fail(ErrorKind::Format, "not a killchain.chain_run/1 document");
  }
  ChainRun run;
  try {
    const auto& o = doc.at("options");
    run.options.tau = o.at("tau").get<double>();
    run.options.k_pred = o.at("k_pred").get<std::size_t>();
    run.options.near_tie_gap = o.at("near_tie_gap").get<double>();
    run.options.max_paths = o.at("max_paths").get<std::size_t>();
    run.provenance = doc.at("provenance");
    run.narrative = doc.at("narrative").get<std::string>();
    run.segments = doc.at("segments").get<std::vector<std::string>>();
    for (const auto& r : doc.at("routing")) {
      std::size_t idx = r.at("segment").get<std::size_t>();
      if (idx >= run.segments.size()) fail(ErrorKind::Format, "chain run: routing refers to a missing segment");
      run.routing.routed.push_back({idx, run.segments[idx], parse_phase(r.at("phase").get<std::string>()),
                                    r.at("similarity").get<double>()});
    }
    run.routing.unembeddable = doc.at("unembeddable_segments").get<std::vector<std::size_t>>();
    for (const auto& j : doc.at("predictions")) {
      TechniquePrediction p;
      p.phase = parse_phase(j.at("phase").get<std::string>());
      p.label = j.at("label").get<std::string>();
      p.probability = j.at("probability").get<double>();
      p.segment = j.at("segment").get<std::size_t>();
      p.scorer_probabilities = j.at("scorer_probabilities").get<std::map<std::string, double>>();
      p.key = j.at("key").get<std::string>();
      p.description = j.at("description").get<std::string>();
      run.predictions.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("chain run: ") + e.what());
  }
  if (doc.contains("graph")) {
    auto imported = import_json(doc["graph"].dump());
    run.graph = std::move(imported.graph);
    run.paths = std::move(imported.paths);
  }
  return run;
}

std::string format_paths_table(const ChainGraph& graph, const std::vector<AttackPath>& paths) {
  std::vector<std::array<std::string, 4>> rows;
  rows.push_back({"rank", "score", "span", "path"});
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const auto& p = paths[i];
    std::ostringstream score;
    score << std::fixed << std::setprecision(4) << p.score;
    std::string chain;
    for (std::size_t n : p.nodes) {
      if (!chain.empty()) chain += " -> ";
      chain += graph.nodes[n].label;
    }
    rows.push_back({std::to_string(i + 1), score.str(),
                    std::string(phase_name(p.start_phase)) + ".." + std::string(phase_name(p.end_phase)), chain});
  }
  std::array<std::size_t, 3> width{};
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < 3; ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < 3; ++c) os << std::left << std::setw(static_cast<int>(width[c])) << r[c] << "  ";
    os << r[3] << "\n";
  }
  return os.str();
}

}  // namespace killchain
