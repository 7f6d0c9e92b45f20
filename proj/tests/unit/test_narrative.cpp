#include "doctest.h"

#include <fstream>
#include <sstream>

#include "killchain/error.hpp"
#include "killchain/narrative.hpp"

using namespace killchain;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected killchain::Error");
  return ErrorKind::Io;
}

std::string demo_narrative() {
  std::ifstream in(std::string(KILLCHAIN_SOURCE_DIR) + "/data/mini_corpus/narrative.txt");
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

PhaseAnchors toy_anchors() {
  PhaseAnchors a;
  a[phase_slot(Phase::Reconnaissance)] = "scan ports hosts";
  a[phase_slot(Phase::Weaponization)] = "build payload macro";
  a[phase_slot(Phase::Delivery)] = "send email phishing";
  a[phase_slot(Phase::Exploitation)] = "run script shell";
  a[phase_slot(Phase::Installation)] = "install implant registry";
  a[phase_slot(Phase::CommandAndControl)] = "beacon server channel";
  a[phase_slot(Phase::ActionsOnObjectives)] = "exfiltrate data archive";
  return a;
}

TfidfModel toy_tfidf() {
  std::vector<std::string> corpus;
  for (const auto& a : toy_anchors()) corpus.push_back(a);
  corpus.push_back("scan ports quickly");
  corpus.push_back("scan hosts widely");
  corpus.push_back("send email with link");
  corpus.push_back("send phishing email attachment");
  return fit_tfidf(corpus, 64);
}

// Two-label softmax bundle for one phase, trained on the given texts.
PhaseBundle toy_bundle(Phase phase, const TfidfModel& tfidf, std::vector<std::pair<std::string, std::string>> rows) {
  TrainingData data;
  for (const auto& [label, text] : rows) {
    data.features.push_back(tfidf.embed(text));
    data.labels.push_back(label);
  }
  SoftmaxConfig cfg;
  cfg.epochs = 200;
  PhaseBundle b;
  b.phase = phase;
  SoftmaxRegressionModel m = train_softmax_regression(data, cfg);
  b.label_set = m.classes;
  b.scorers.push_back({{"softmax", ScorerKind::NativeSoftmax, phase}, m});
  b.weights.phase = phase;
  b.weights.weights = {{"softmax", 1.0}};
  for (const auto& [label, text] : rows) {
    b.label_descriptions[label] = text;
    b.label_keys[label] = "T" + std::to_string(1000 + label.size());
  }
  return b;
}

std::map<Phase, PhaseBundle> toy_bundles(const TfidfModel& tfidf) {
  std::map<Phase, PhaseBundle> bundles;
  bundles[Phase::Reconnaissance] =
      toy_bundle(Phase::Reconnaissance, tfidf, {{"Port Scan", "scan ports quickly"}, {"Host Sweep", "scan hosts widely"}});
  bundles[Phase::Delivery] =
      toy_bundle(Phase::Delivery, tfidf, {{"Link", "send email with link"}, {"Attachment", "send phishing email attachment"}});
  return bundles;
}

}  // namespace

TEST_CASE("segmentation of the demonstration narrative") {
  auto segs = segment(demo_narrative());
  REQUIRE(segs.size() == 11);
  CHECK(segs[0] == "the adversary performed reconnaissance via subdomain enumeration and dns zone transfers");
  CHECK(segs[3] == "containing a word document weaponized with a vba macro exploiting cve 2017 0199");
  CHECK(segs[4] == "upon opening");
  CHECK(segs[10] == "and exfiltrated sensitive financial data over encrypted sftp");
}

TEST_CASE("segmentation keeps tokens with inner punctuation") {
  CHECK(segment("Version 1.2 shipped. It had 1,000 users!") ==
            std::vector<std::string>{"version 1 2 shipped", "it had 1 000 users"});
  CHECK(segment("One; two? three") == std::vector<std::string>{"one", "two", "three"});
  CHECK(segment("He said \"stop.\" Then left") == std::vector<std::string>{"he said stop", "then left"});
  CHECK(kind_of([] { segment(" ... ;; "); }) == ErrorKind::EmptyInput);
}

TEST_CASE("segments route to their nearest anchor") {
  EmbeddingProvider tfidf = toy_tfidf();
  std::vector<std::string> segs = {"scan the ports", "send a phishing email", "zebra"};
  auto r = assign_segment_phases(segs, tfidf, toy_anchors(), kNearTieGap, true);
  REQUIRE(r.routed.size() == 2);
  CHECK(r.routed[0].phase == Phase::Reconnaissance);
  CHECK(r.routed[1].phase == Phase::Delivery);
  CHECK(r.unembeddable == std::vector<std::size_t>{2});
  CHECK(kind_of([&] { assign_segment_phases(segs, tfidf, toy_anchors()); }) == ErrorKind::Degenerate);

  // "scan email" sits between two anchors and is routed to both
  auto tie = assign_segment_phases({"scan email"}, tfidf, toy_anchors(), 0.5);
  REQUIRE(tie.routed.size() == 2);
  CHECK(tie.routed[0].index == tie.routed[1].index);
  CHECK(tie.routed[0].similarity >= tie.routed[1].similarity);
  CHECK(assign_segment_phases({"scan email"}, tfidf, toy_anchors(), 0.0).routed.size() == 1);
}

TEST_CASE("prediction per routed phase") {
  TfidfModel model = toy_tfidf();
  EmbeddingProvider tfidf = model;
  auto bundles = toy_bundles(model);
  NarrativeOptions opt;
  opt.tau = 0.1;
  opt.k_pred = 1;
  opt.near_tie_gap = 0.0;
  PhaseMatrices matrices;
  ChainRun run = predict_narrative("They scan ports quickly, then send email with link.", bundles, tfidf, toy_anchors(),
                                   opt, &matrices);
  REQUIRE(run.predictions.size() == 2);
  CHECK(run.predictions[0].phase == Phase::Reconnaissance);
  CHECK(run.predictions[0].label == "Port Scan");
  CHECK(run.predictions[1].label == "Link");
  CHECK(run.predictions[1].segment == 1);
  CHECK(run.predictions[1].scorer_probabilities.at("softmax") == run.predictions[1].probability);
  REQUIRE(matrices.contains(Phase::Delivery));
  CHECK(matrices[Phase::Delivery].contains("ensemble"));
  CHECK(matrices[Phase::Delivery].at("ensemble").sample_ids() == std::vector<std::string>{"segment-1"});
  CHECK(run.graph.nodes.empty());

  opt.k_pred = 5;  // more than the label set: everything is kept
  CHECK(predict_narrative("scan ports", bundles, tfidf, toy_anchors(), opt).predictions.size() == 2);

  bundles.erase(Phase::Delivery);
  CHECK(kind_of([&] { predict_narrative("send email with link", bundles, tfidf, toy_anchors(), opt); }) ==
        ErrorKind::Contract);
  opt.k_pred = 0;
  CHECK(kind_of([&] { predict_narrative("scan ports", bundles, tfidf, toy_anchors(), opt); }) == ErrorKind::Config);
}

TEST_CASE("a single-phase narrative yields one layer and no edges") {
  TfidfModel model = toy_tfidf();
  EmbeddingProvider tfidf = model;
  NarrativeOptions opt;
  opt.tau = 0.1;
  ChainRun run = run_narrative("scan ports quickly. scan hosts widely.", toy_bundles(model), tfidf, toy_anchors(), opt);
  CHECK(run.graph.nodes.size() == 2);
  for (const auto& n : run.graph.nodes) CHECK(n.phase == Phase::Reconnaissance);
  CHECK(run.graph.edges.empty());
  CHECK(run.paths.empty());
  CHECK(format_paths_table(run.graph, run.paths) == "rank  score  span  path\n");
}

TEST_CASE("chain runs round-trip through JSON") {
  TfidfModel model = toy_tfidf();
  EmbeddingProvider tfidf = model;
  NarrativeOptions opt;
  opt.tau = 0.05;
  ChainRun run = run_narrative("scan ports quickly, send phishing email attachment", toy_bundles(model), tfidf,
                               toy_anchors(), opt);
  run.provenance = {{"engine_version", "test"}};
  const std::string text = run.to_json().dump(2);
  ChainRun back = ChainRun::from_json(nlohmann::json::parse(text));
  CHECK(back.to_json().dump(2) == text);
  CHECK(back.graph == run.graph);

  // Replaying the chain from recorded predictions gives the same graph.
  ChainRun replay = ChainRun::from_json(nlohmann::json::parse(text));
  replay.graph = {};
  replay.paths.clear();
  build_chain(replay, tfidf);
  CHECK(replay.graph == run.graph);
  CHECK(replay.paths == run.paths);

  CHECK(kind_of([] { ChainRun::from_json(nlohmann::json{{"format", "other"}}); }) == ErrorKind::Format);
}
