#include "killchain/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "killchain/error.hpp"

namespace killchain {

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

EvaluationReport evaluate(const std::vector<std::string>& predictions, const std::vector<std::string>& truth,
                          const std::vector<std::string>& label_set) {
  if (predictions.empty() && truth.empty()) fail(ErrorKind::EmptyInput, "evaluate: no samples");
  if (predictions.size() != truth.size()) fail(ErrorKind::Contract, "evaluate: predictions and truth differ in length");
  std::set<std::string> known(label_set.begin(), label_set.end());
  for (const auto* list : {&predictions, &truth}) {
    for (const auto& l : *list) {
      if (!known.contains(l)) fail(ErrorKind::Contract, "evaluate: label '" + l + "' is not in the label set");
    }
  }

  EvaluationReport r;
  r.samples = truth.size();
  r.label_set.assign(known.begin(), known.end());
  for (const auto& l : r.label_set) r.per_label[l] = {};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++r.confusion[truth[i]][predictions[i]];
    if (truth[i] == predictions[i]) {
      ++correct;
      ++r.per_label[truth[i]].true_positive;
    } else {
      ++r.per_label[predictions[i]].false_positive;
      ++r.per_label[truth[i]].false_negative;
    }
  }
  r.accuracy = ratio(correct, truth.size());
  for (auto& [label, m] : r.per_label) {
    m.precision = ratio(m.true_positive, m.true_positive + m.false_positive);
    m.recall = ratio(m.true_positive, m.true_positive + m.false_negative);
    m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    r.precision += m.precision;
    r.recall += m.recall;
    r.f1 += m.f1;
  }
  const double k = static_cast<double>(r.per_label.size());
  r.precision /= k;
  r.recall /= k;
  r.f1 /= k;
  return r;
}

nlohmann::ordered_json EvaluationReport::to_json() const {
  nlohmann::ordered_json doc;
  doc["samples"] = samples;
  doc["accuracy"] = accuracy;
  doc["precision"] = precision;
  doc["recall"] = recall;
  doc["f1"] = f1;
  auto& per = doc["per_label"] = nlohmann::ordered_json::object();
  for (const auto& [label, m] : per_label) {
    per[label] = {{"tp", m.true_positive}, {"fp", m.false_positive}, {"fn", m.false_negative},
                  {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
  }
  auto& conf = doc["confusion"] = nlohmann::ordered_json::object();
  for (const auto& [t, row] : confusion) {
    auto& out = conf[t] = nlohmann::ordered_json::object();
    for (const auto& [p, c] : row) out[p] = c;
  }
  return doc;
}

// ---------------------------------------------------------------------------

EnsembleWeights fit_weights_from_f1(Phase phase, const std::map<std::string, double>& f1_by_scorer) {
  if (f1_by_scorer.empty()) fail(ErrorKind::Contract, "fit_weights: at least one scorer is required");
  EnsembleWeights w;
  w.phase = phase;
  double total = 0.0;
  for (const auto& [name, f1] : f1_by_scorer) {
    if (!(f1 >= 0.0 && f1 <= 1.0)) fail(ErrorKind::Contract, "fit_weights: F1 for '" + name + "' outside [0, 1]");
    total += f1;
  }
  w.f1_provenance = f1_by_scorer;
  if (total == 0.0) {
    w.warnings.push_back("every scorer has macro-F1 0; using uniform weights");
    for (const auto& [name, _] : f1_by_scorer) w.weights[name] = 1.0 / static_cast<double>(f1_by_scorer.size());
  } else {
    for (const auto& [name, f1] : f1_by_scorer) w.weights[name] = f1 / total;
  }
  return w;
}

EnsembleWeights fit_weights(Phase phase, const std::map<std::string, EvaluationReport>& validation_reports) {
  std::map<std::string, double> f1;
  for (const auto& [name, report] : validation_reports) f1[name] = report.f1;
  return fit_weights_from_f1(phase, f1);
}

nlohmann::ordered_json EnsembleWeights::to_json() const {
  nlohmann::ordered_json doc;
  doc["phase"] = std::string(phase_name(phase));
  doc["weights"] = weights;
  doc["f1_provenance"] = f1_provenance;
  if (!warnings.empty()) doc["warnings"] = warnings;
  return doc;
}

EnsembleWeights EnsembleWeights::from_json(const nlohmann::json& doc) {
  EnsembleWeights w;
  try {
    w.phase = parse_phase(doc.at("phase").get<std::string>());
    w.weights = doc.at("weights").get<std::map<std::string, double>>();
    w.f1_provenance = doc.at("f1_provenance").get<std::map<std::string, double>>();
    if (doc.contains("warnings")) w.warnings = doc["warnings"].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("ensemble weights: ") + e.what());
  }
  double sum = 0.0;
  for (const auto& [_, v] : w.weights) {
    if (!(v >= 0.0)) fail(ErrorKind::Format, "ensemble weights: negative weight");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail(ErrorKind::Format, "ensemble weights do not sum to 1");
  return w;
}

VoteResult soft_vote(const std::map<std::string, ProbabilityMatrix>& matrices, const EnsembleWeights& weights) {
  if (matrices.empty()) fail(ErrorKind::Contract, "soft_vote: no matrices");
  for (const auto& [name, _] : matrices) {
    if (!weights.weights.contains(name)) fail(ErrorKind::Contract, "soft_vote: no weight for scorer '" + name + "'");
  }
  for (const auto& [name, _] : weights.weights) {
    if (!matrices.contains(name)) fail(ErrorKind::Contract, "soft_vote: weight for unknown scorer '" + name + "'");
  }

  double wsum = 0.0;
  for (const auto& [_, w] : weights.weights) wsum += w;
  if (std::abs(wsum - 1.0) > 1e-9) fail(ErrorKind::Contract, "soft_vote: weights must sum to 1");

  const auto& [first_name, first] = *matrices.begin();
  for (const auto& [name, m] : matrices) {
    if (m.labels() != first.labels()) {
      for (std::size_t c = 0; c < std::max(m.cols(), first.cols()); ++c) {
        if (c >= m.cols() || c >= first.cols() || m.labels()[c] != first.labels()[c]) {
          fail(ErrorKind::Contract, "soft_vote: label column " + std::to_string(c) + " of '" + name +
                                        "' does not match '" + first_name + "'");
        }
      }
    }
    if (m.sample_ids() != first.sample_ids()) {
      for (std::size_t r = 0; r < std::max(m.rows(), first.rows()); ++r) {
        if (r >= m.rows() || r >= first.rows() || m.sample_ids()[r] != first.sample_ids()[r]) {
          fail(ErrorKind::Contract, "soft_vote: sample row " + std::to_string(r) + " of '" + name +
                                        "' does not match '" + first_name + "'");
        }
      }
    }
  }

  std::vector<double> fused(first.rows() * first.cols(), 0.0);
  for (const auto& [name, m] : matrices) {
    const double w = weights.weights.at(name);
    for (std::size_t i = 0; i < fused.size(); ++i) fused[i] += w * m.values()[i];
  }
  VoteResult result{ProbabilityMatrix(first.sample_ids(), first.labels(), std::move(fused)), {}};
  result.predictions = result.fused.argmax_labels();
  return result;
}

}  // namespace killchain
