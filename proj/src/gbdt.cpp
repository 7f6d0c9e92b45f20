#include "killchain/gbdt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "killchain/error.hpp"

namespace killchain {

namespace {

constexpr double kProbabilityFloor = 1e-15;
constexpr double kMinGain = 1e-12;
constexpr char kModelFormat[] = "killchain.gbdt/1";

void softmax_inplace(std::span<double> z) {
  double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : z) v /= sum;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses and weights

std::map<std::string, double> class_weights(const std::vector<std::string>& labels) {
  if (labels.empty()) fail(ErrorKind::EmptyInput, "class_weights: empty label list");
  std::map<std::string, std::size_t> counts;
  for (const auto& l : labels) ++counts[l];
  const double n = static_cast<double>(labels.size());
  const double k = static_cast<double>(counts.size());
  std::map<std::string, double> weights;
  for (const auto& [label, c] : counts) weights[label] = n / (k * static_cast<double>(c));
  return weights;
}

double multiclass_log_loss(std::span<const double> probs, std::size_t num_classes,
                           std::span<const std::size_t> truth_index,
                           std::optional<std::span<const double>> weights) {
  const std::size_t n = truth_index.size();
  if (probs.size() != n * num_classes) fail(ErrorKind::Contract, "log loss: probability shape mismatch");
  if (weights && weights->size() != n) fail(ErrorKind::Contract, "log loss: weight count does not match rows");
  if (n == 0) fail(ErrorKind::EmptyInput, "log loss: no rows");
  double total = 0.0;
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (truth_index[i] >= num_classes) fail(ErrorKind::Contract, "log loss: label index out of range");
    double p = std::max(probs[i * num_classes + truth_index[i]], kProbabilityFloor);
    double w = weights ? (*weights)[i] : 1.0;
    total += -w * std::log(p);
    weight_sum += w;
  }
  if (weight_sum <= 0.0) fail(ErrorKind::Contract, "log loss: weights sum to zero");
  return total / weight_sum;
}

double multiclass_log_loss(const ProbabilityMatrix& probabilities, const std::vector<std::string>& truth,
                           std::optional<std::span<const double>> weights) {
  if (truth.size() != probabilities.rows()) fail(ErrorKind::Contract, "log loss: truth count does not match rows");
  std::vector<std::size_t> idx;
  idx.reserve(truth.size());
  for (const auto& label : truth) {
    auto c = probabilities.label_index(label);
    if (!c) fail(ErrorKind::Contract, "log loss: label '" + label + "' is not a matrix column");
    idx.push_back(*c);
  }
  return multiclass_log_loss(probabilities.values(), probabilities.cols(), idx, weights);
}

// ---------------------------------------------------------------------------
// Config

void GbdtConfig::validate() const {
  if (num_leaves < 2) fail(ErrorKind::Config, "gbdt: num_leaves must be >= 2");
  if (max_depth < 0) fail(ErrorKind::Config, "gbdt: max_depth must be >= 0");
  if (n_estimators < 1) fail(ErrorKind::Config, "gbdt: n_estimators must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail(ErrorKind::Config, "gbdt: learning_rate must be >= 0");
  if (!(l2_reg >= 0.0) || !std::isfinite(l2_reg)) fail(ErrorKind::Config, "gbdt: l2_reg must be >= 0");
  if (early_stopping_rounds < 0) fail(ErrorKind::Config, "gbdt: early_stopping_rounds must be >= 0");
  if (max_bins < 2 || max_bins > 4096) fail(ErrorKind::Config, "gbdt: max_bins must lie in [2, 4096]");
}

void GbdtConfig::validate_tuning_range() const {
  validate();
  if (num_leaves < 31 || num_leaves > 100) fail(ErrorKind::Config, "gbdt: num_leaves must lie in [31, 100]");
  if (max_depth < 5 || max_depth > 25) fail(ErrorKind::Config, "gbdt: max_depth must lie in [5, 25]");
  if (n_estimators < 100 || n_estimators > 400) fail(ErrorKind::Config, "gbdt: n_estimators must lie in [100, 400]");
  static constexpr double kGrid[] = {0.01, 0.05, 0.1, 0.2};
  if (std::find(std::begin(kGrid), std::end(kGrid), learning_rate) == std::end(kGrid)) {
    fail(ErrorKind::Config, "gbdt: learning_rate must be one of 0.01, 0.05, 0.1, 0.2");
  }
}

nlohmann::ordered_json GbdtConfig::to_json() const {
  return {{"num_leaves", num_leaves},
          {"learning_rate", learning_rate},
          {"max_depth", max_depth},
          {"n_estimators", n_estimators},
          {"l2_reg", l2_reg},
          {"early_stopping_rounds", early_stopping_rounds},
          {"max_bins", max_bins},
          {"class_weighting", class_weighting},
          {"seed", seed}};
}

GbdtConfig GbdtConfig::from_json(const nlohmann::json& doc) {
  static const std::set<std::string> kKnown = {"num_leaves", "learning_rate", "max_depth",
                                               "n_estimators", "l2_reg", "early_stopping_rounds",
                                               "max_bins", "class_weighting", "seed"};
  if (!doc.is_object()) fail(ErrorKind::Config, "gbdt config must be an object");
  for (const auto& [key, _] : doc.items()) {
    if (!kKnown.contains(key)) fail(ErrorKind::Config, "gbdt config: unknown key '" + key + "'");
  }
  GbdtConfig c;
  try {
    c.num_leaves = doc.value("num_leaves", c.num_leaves);
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.max_depth = doc.value("max_depth", c.max_depth);
    c.n_estimators = doc.value("n_estimators", c.n_estimators);
    c.l2_reg = doc.value("l2_reg", c.l2_reg);
    c.early_stopping_rounds = doc.value("early_stopping_rounds", c.early_stopping_rounds);
    c.max_bins = doc.value("max_bins", c.max_bins);
    c.class_weighting = doc.value("class_weighting", c.class_weighting);
    c.seed = doc.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("gbdt config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Trees

std::size_t DecisionTree::leaf_count() const noexcept {
  return static_cast<std::size_t>(std::count(feature.begin(), feature.end(), -1));
}

int DecisionTree::depth() const {
  if (feature.empty()) return 0;
  int best = 0;
  std::vector<std::pair<int, int>> stack = {{0, 0}};
  while (!stack.empty()) {
    auto [node, d] = stack.back();
    stack.pop_back();
    best = std::max(best, d);
    if (feature[static_cast<std::size_t>(node)] >= 0) {
      stack.push_back({left[static_cast<std::size_t>(node)], d + 1});
      stack.push_back({right[static_cast<std::size_t>(node)], d + 1});
    }
  }
  return best;
}

std::vector<double> quantile_bin_edges(std::vector<double> column, int max_bins) {
  std::sort(column.begin(), column.end());
  std::vector<double> distinct = column;
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<double> edges;
  if (distinct.size() <= 1) return edges;
  auto midpoint_below = [&](double v) {
    auto it = std::lower_bound(distinct.begin(), distinct.end(), v);
    double prev = *(it - 1);
    return prev + (v - prev) / 2.0;
  };
  if (distinct.size() <= static_cast<std::size_t>(max_bins)) {
    for (std::size_t i = 1; i < distinct.size(); ++i) edges.push_back(midpoint_below(distinct[i]));
    return edges;
  }
  const std::size_t n = column.size();
  for (int j = 1; j < max_bins; ++j) {
    double v = column[static_cast<std::size_t>(j) * n / static_cast<std::size_t>(max_bins)];
    if (v == distinct.front()) continue;
    double e = midpoint_below(v);
    if (edges.empty() || e > edges.back()) edges.push_back(e);
  }
  return edges;
}

namespace {

struct SplitCandidate {
  double gain = 0.0;
  int feature = -1;
  int bin = -1;
};

struct Leaf {
  int node;
  int depth;
  std::vector<std::size_t> samples;
  double g;
  double h;
  SplitCandidate split;
};

double leaf_objective(double g, double h, double lambda) {
  double denom = h + lambda;
  return denom > 0.0 ? g * g / denom : 0.0;
}

SplitCandidate best_split(const Leaf& leaf, const std::vector<std::vector<int>>& binned,
                          std::span<const double> grad, std::span<const double> hess,
                          const std::vector<int>& bins_per_feature, double lambda) {
  SplitCandidate best;
  if (leaf.samples.size() < 2) return best;
  const double parent = leaf_objective(leaf.g, leaf.h, lambda);
  std::vector<double> hg, hh;
  std::vector<std::size_t> hc;
  for (std::size_t f = 0; f < binned.size(); ++f) {
    int nb = bins_per_feature[f];
    if (nb < 2) continue;
    hg.assign(static_cast<std::size_t>(nb), 0.0);
    hh.assign(static_cast<std::size_t>(nb), 0.0);
    hc.assign(static_cast<std::size_t>(nb), 0);
    const auto& col = binned[f];
    for (std::size_t i : leaf.samples) {
      auto b = static_cast<std::size_t>(col[i]);
      hg[b] += grad[i];
      hh[b] += hess[i];
      ++hc[b];
    }
    double gl = 0.0, hl = 0.0;
    std::size_t cl = 0;
    for (int b = 0; b + 1 < nb; ++b) {
      gl += hg[static_cast<std::size_t>(b)];
      hl += hh[static_cast<std::size_t>(b)];
      cl += hc[static_cast<std::size_t>(b)];
      std::size_t cr = leaf.samples.size() - cl;
      if (cl == 0) continue;
      if (cr == 0) break;
      double gain = leaf_objective(gl, hl, lambda) + leaf_objective(leaf.g - gl, leaf.h - hl, lambda) - parent;
      if (gain > best.gain) best = {gain, static_cast<int>(f), b};
    }
  }
  if (best.gain <= kMinGain) return {};
  return best;
}

}  // namespace

DecisionTree fit_tree(const std::vector<std::vector<int>>& binned, std::span<const double> grad,
                      std::span<const double> hess, const std::vector<int>& bins_per_feature,
                      const GbdtConfig& config) {
  const std::size_t n = grad.size();
  const double lambda = config.l2_reg;
  DecisionTree tree;
  auto add_node = [&] {
    tree.feature.push_back(-1);
    tree.threshold_bin.push_back(-1);
    tree.left.push_back(-1);
    tree.right.push_back(-1);
    tree.value.push_back(0.0);
    return static_cast<int>(tree.feature.size() - 1);
  };

  Leaf root{add_node(), 0, {}, 0.0, 0.0, {}};
  root.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    root.samples[i] = i;
    root.g += grad[i];
    root.h += hess[i];
  }
  std::vector<Leaf> leaves;
  leaves.push_back(std::move(root));
  auto evaluate = [&](Leaf& leaf) {
    leaf.split = leaf.depth < config.max_depth
                     ? best_split(leaf, binned, grad, hess, bins_per_feature, lambda)
                     : SplitCandidate{};
  };
  evaluate(leaves.front());

  while (static_cast<int>(leaves.size()) < config.num_leaves) {
    std::size_t pick = leaves.size();
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      if (leaves[i].split.feature < 0) continue;
      if (pick == leaves.size() || leaves[i].split.gain > leaves[pick].split.gain) pick = i;
    }
    if (pick == leaves.size()) break;

    Leaf parent = std::move(leaves[pick]);
    leaves.erase(leaves.begin() + static_cast<std::ptrdiff_t>(pick));
    const auto f = static_cast<std::size_t>(parent.split.feature);
    Leaf lo{add_node(), parent.depth + 1, {}, 0.0, 0.0, {}};
    Leaf hi{add_node(), parent.depth + 1, {}, 0.0, 0.0, {}};
    for (std::size_t i : parent.samples) {
      Leaf& dst = binned[f][i] <= parent.split.bin ? lo : hi;
      dst.samples.push_back(i);
      dst.g += grad[i];
      dst.h += hess[i];
    }
    auto pn = static_cast<std::size_t>(parent.node);
    tree.feature[pn] = parent.split.feature;
    tree.threshold_bin[pn] = parent.split.bin;
    tree.left[pn] = lo.node;
    tree.right[pn] = hi.node;
    evaluate(lo);
    evaluate(hi);
    leaves.push_back(std::move(lo));
    leaves.push_back(std::move(hi));
  }

  for (const auto& leaf : leaves) {
    double denom = leaf.h + lambda;
    tree.value[static_cast<std::size_t>(leaf.node)] = denom > 0.0 ? config.learning_rate * (-leaf.g / denom) : 0.0;
  }
  return tree;
}

// ---------------------------------------------------------------------------
// Model

GbdtModel GbdtModel::prior_only(std::vector<std::string> classes, std::vector<double> base_scores, std::size_t dim) {
  if (classes.size() != base_scores.size()) fail(ErrorKind::Contract, "prior_only: classes/base_scores mismatch");
  GbdtModel m;
  m.classes_ = std::move(classes);
  m.base_scores_ = std::move(base_scores);
  m.dim_ = dim;
  m.bin_edges_.assign(dim, {});
  return m;
}

int GbdtModel::bin_of(std::size_t feature, double x) const {
  const auto& edges = bin_edges_[feature];
  return static_cast<int>(std::lower_bound(edges.begin(), edges.end(), x) - edges.begin());
}

std::vector<double> GbdtModel::raw_scores(std::span<const double> x, std::optional<int> rounds) const {
  if (x.size() != dim_) {
    fail(ErrorKind::Contract, "gbdt: input has dimension " + std::to_string(x.size()) + ", model expects " +
                                  std::to_string(dim_));
  }
  int use = std::clamp(rounds.value_or(best_round_), 0, static_cast<int>(rounds_.size()));
  std::vector<double> z = base_scores_;
  for (int r = 0; r < use; ++r) {
    const auto& per_class = rounds_[static_cast<std::size_t>(r)];
    for (std::size_t k = 0; k < per_class.size(); ++k) {
      const DecisionTree& t = per_class[k];
      std::size_t node = 0;
      while (t.feature[node] >= 0) {
        auto f = static_cast<std::size_t>(t.feature[node]);
        node = static_cast<std::size_t>(bin_of(f, x[f]) <= t.threshold_bin[node] ? t.left[node] : t.right[node]);
      }
      z[k] += t.value[node];
    }
  }
  return z;
}

std::vector<double> GbdtModel::predict_proba(std::span<const double> x) const {
  auto z = raw_scores(x);
  softmax_inplace(z);
  return z;
}

namespace {

nlohmann::ordered_json tree_to_json(const DecisionTree& t) {
  return {{"feature", t.feature},
          {"threshold_bin", t.threshold_bin},
          {"left", t.left},
          {"right", t.right},
          {"value", t.value}};
}

DecisionTree tree_from_json(const nlohmann::json& j, std::size_t dim) {
  DecisionTree t;
  t.feature = j.at("feature").get<std::vector<int>>();
  t.threshold_bin = j.at("threshold_bin").get<std::vector<int>>();
  t.left = j.at("left").get<std::vector<int>>();
  t.right = j.at("right").get<std::vector<int>>();
  t.value = j.at("value").get<std::vector<double>>();
  const std::size_t n = t.feature.size();
  if (n == 0 || t.threshold_bin.size() != n || t.left.size() != n || t.right.size() != n || t.value.size() != n) {
    fail(ErrorKind::Format, "gbdt model: inconsistent tree arrays");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (t.feature[i] < 0) continue;
    if (static_cast<std::size_t>(t.feature[i]) >= dim || t.left[i] <= static_cast<int>(i) ||
        t.right[i] <= static_cast<int>(i) || static_cast<std::size_t>(t.left[i]) >= n ||
        static_cast<std::size_t>(t.right[i]) >= n) {
      fail(ErrorKind::Format, "gbdt model: malformed tree node " + std::to_string(i));
    }
  }
  return t;
}

}  // namespace

nlohmann::ordered_json GbdtModel::to_json() const {
  nlohmann::ordered_json doc;
  doc["format"] = kModelFormat;
  doc["config"] = config_.to_json();
  doc["dim"] = dim_;
  doc["classes"] = classes_;
  doc["base_scores"] = base_scores_;
  doc["bin_edges"] = bin_edges_;
  doc["best_round"] = best_round_;
  auto& rounds = doc["rounds"] = nlohmann::ordered_json::array();
  for (const auto& per_class : rounds_) {
    auto r = nlohmann::ordered_json::array();
    for (const auto& t : per_class) r.push_back(tree_to_json(t));
    rounds.push_back(std::move(r));
  }
  return doc;
}

GbdtModel GbdtModel::from_json(const nlohmann::json& doc) {
  if (doc.value("format", "") != kModelFormat) fail(ErrorKind::Format, "not a killchain.gbdt/1 model");
  GbdtModel m;
  try {
    m.config_ = GbdtConfig::from_json(doc.at("config"));
    m.dim_ = doc.at("dim").get<std::size_t>();
    m.classes_ = doc.at("classes").get<std::vector<std::string>>();
    m.base_scores_ = doc.at("base_scores").get<std::vector<double>>();
    m.bin_edges_ = doc.at("bin_edges").get<std::vector<std::vector<double>>>();
    m.best_round_ = doc.at("best_round").get<int>();
    for (const auto& r : doc.at("rounds")) {
      std::vector<DecisionTree> per_class;
      for (const auto& t : r) per_class.push_back(tree_from_json(t, m.dim_));
      if (per_class.size() != m.classes_.size()) fail(ErrorKind::Format, "gbdt model: round has wrong tree count");
      m.rounds_.push_back(std::move(per_class));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("gbdt model: ") + e.what());
  }
  if (m.base_scores_.size() != m.classes_.size() || m.bin_edges_.size() != m.dim_ ||
      m.best_round_ < 0 || m.best_round_ > static_cast<int>(m.rounds_.size())) {
    fail(ErrorKind::Format, "gbdt model: inconsistent header");
  }
  return m;
}

nlohmann::ordered_json TrainReport::to_json() const {
  nlohmann::ordered_json doc;
  doc["best_round"] = best_round;
  doc["stopping_reason"] = stopping_reason;
  doc["class_weights"] = class_weights;
  doc["train_loss"] = train_loss;
  doc["validation_loss"] = validation_loss;
  doc["warnings"] = warnings;
  return doc;
}

// ---------------------------------------------------------------------------
// Training

TrainingData make_training_data(const PhaseDataset& dataset, const EmbeddingProvider& embedder) {
  TrainingData data;
  data.features.reserve(dataset.size());
  for (const auto& s : dataset.samples) {
    try {
      data.features.push_back(embed(embedder, EmbedItem{s.technique_id, s.text}));
    } catch (const Error& e) {
      fail(e.kind(), "sample " + s.technique_id + " cannot be embedded: " + e.what());
    }
    data.labels.push_back(s.label);
  }
  return data;
}

struct GbdtTrainer {
  static GbdtResult run(const TrainingData& train, const GbdtConfig& config, const TrainingData* validation);
};

GbdtResult GbdtTrainer::run(const TrainingData& train, const GbdtConfig& config, const TrainingData* validation) {
  config.validate();
  const std::size_t n = train.features.size();
  if (n != train.labels.size()) fail(ErrorKind::Contract, "gbdt: features/labels length mismatch");
  std::set<std::string> label_set(train.labels.begin(), train.labels.end());
  if (label_set.size() < 2) fail(ErrorKind::Degenerate, "gbdt: training requires at least two distinct labels");
  const std::size_t dim = train.features.front().size();
  if (dim == 0) fail(ErrorKind::Contract, "gbdt: zero-dimensional features");
  for (const auto& x : train.features) {
    if (x.size() != dim) fail(ErrorKind::Contract, "gbdt: inconsistent feature dimensions");
  }

  GbdtResult result;
  GbdtModel& model = result.model;
  TrainReport& report = result.report;
  model.config_ = config;
  model.dim_ = dim;
  model.classes_.assign(label_set.begin(), label_set.end());
  const std::size_t K = model.classes_.size();

  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<std::size_t>(std::lower_bound(model.classes_.begin(), model.classes_.end(), train.labels[i]) -
                                    model.classes_.begin());
  }

  std::vector<double> w(n, 1.0);
  if (config.class_weighting) {
    report.class_weights = class_weights(train.labels);
    for (std::size_t i = 0; i < n; ++i) w[i] = report.class_weights[train.labels[i]];
  } else {
    for (const auto& c : model.classes_) report.class_weights[c] = 1.0;
  }

  std::vector<double> class_mass(K, 0.0);
  double total_mass = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    class_mass[y[i]] += w[i];
    total_mass += w[i];
  }
  model.base_scores_.resize(K);
  for (std::size_t k = 0; k < K; ++k) model.base_scores_[k] = std::log(class_mass[k] / total_mass);

  // Bin the training matrix column by column.
  model.bin_edges_.resize(dim);
  std::vector<std::vector<int>> binned(dim, std::vector<int>(n));
  std::vector<int> bins_per_feature(dim);
  for (std::size_t f = 0; f < dim; ++f) {
    std::vector<double> column(n);
    for (std::size_t i = 0; i < n; ++i) column[i] = train.features[i][f];
    model.bin_edges_[f] = quantile_bin_edges(column, config.max_bins);
    bins_per_feature[f] = static_cast<int>(model.bin_edges_[f].size()) + 1;
    for (std::size_t i = 0; i < n; ++i) binned[f][i] = model.bin_of(f, train.features[i][f]);
  }

  // Validation rows, mapped to class indices; unknown labels are dropped.
  std::vector<std::size_t> val_rows;
  std::vector<std::size_t> val_y;
  if (validation != nullptr) {
    for (std::size_t i = 0; i < validation->features.size(); ++i) {
      auto it = std::lower_bound(model.classes_.begin(), model.classes_.end(), validation->labels[i]);
      if (it == model.classes_.end() || *it != validation->labels[i]) continue;
      if (validation->features[i].size() != dim) fail(ErrorKind::Contract, "gbdt: validation dimension mismatch");
      val_rows.push_back(i);
      val_y.push_back(static_cast<std::size_t>(it - model.classes_.begin()));
    }
    if (val_rows.size() < validation->features.size()) {
      report.warnings.push_back("validation rows with labels unseen in training were ignored");
    }
  }
  const bool early_stopping = !val_rows.empty() && config.early_stopping_rounds > 0;
  if (val_rows.empty()) report.warnings.push_back("validation set empty; early stopping disabled");

  std::vector<double> F(n * K);
  for (std::size_t i = 0; i < n; ++i) std::copy(model.base_scores_.begin(), model.base_scores_.end(), F.begin() + static_cast<std::ptrdiff_t>(i * K));
  std::vector<double> Fv(val_rows.size() * K);
  for (std::size_t i = 0; i < val_rows.size(); ++i) std::copy(model.base_scores_.begin(), model.base_scores_.end(), Fv.begin() + static_cast<std::ptrdiff_t>(i * K));

  std::vector<double> P(n * K);
  std::vector<double> grad(n), hess(n);
  double best_loss = std::numeric_limits<double>::infinity();
  int best_round = 0;
  report.stopping_reason = val_rows.empty() ? "no_validation" : "max_rounds";

  for (int round = 1; round <= config.n_estimators; ++round) {
    P = F;
    for (std::size_t i = 0; i < n; ++i) softmax_inplace(std::span<double>(P.data() + i * K, K));

    std::vector<DecisionTree> trees;
    trees.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        double p = P[i * K + k];
        double target = y[i] == k ? 1.0 : 0.0;
        grad[i] = w[i] * (p - target);
        hess[i] = w[i] * std::max(p * (1.0 - p), 1e-16);
      }
      trees.push_back(fit_tree(binned, grad, hess, bins_per_feature, config));
    }
    model.rounds_.push_back(std::move(trees));
    const auto& added = model.rounds_.back();

    // Advance the running scores by the new trees.
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        const DecisionTree& t = added[k];
        std::size_t node = 0;
        while (t.feature[node] >= 0) {
          auto f = static_cast<std::size_t>(t.feature[node]);
          node = static_cast<std::size_t>(binned[f][i] <= t.threshold_bin[node] ? t.left[node] : t.right[node]);
        }
        F[i * K + k] += t.value[node];
      }
    }
    P = F;
    for (std::size_t i = 0; i < n; ++i) softmax_inplace(std::span<double>(P.data() + i * K, K));
    report.train_loss.push_back(multiclass_log_loss(P, K, y, std::span<const double>(w)));

    if (!val_rows.empty()) {
      std::vector<double> Pv(val_rows.size() * K);
      for (std::size_t j = 0; j < val_rows.size(); ++j) {
        const auto& x = validation->features[val_rows[j]];
        for (std::size_t k = 0; k < K; ++k) {
          const DecisionTree& t = added[k];
          std::size_t node = 0;
          while (t.feature[node] >= 0) {
            auto f = static_cast<std::size_t>(t.feature[node]);
            node = static_cast<std::size_t>(model.bin_of(f, x[f]) <= t.threshold_bin[node] ? t.left[node] : t.right[node]);
          }
          Fv[j * K + k] += t.value[node];
        }
        std::copy(Fv.begin() + static_cast<std::ptrdiff_t>(j * K), Fv.begin() + static_cast<std::ptrdiff_t>((j + 1) * K),
                  Pv.begin() + static_cast<std::ptrdiff_t>(j * K));
        softmax_inplace(std::span<double>(Pv.data() + j * K, K));
      }
      double loss = multiclass_log_loss(Pv, K, val_y);
      report.validation_loss.push_back(loss);
      if (loss < best_loss) {
        best_loss = loss;
        best_round = round;
      }
      if (early_stopping && round - best_round >= config.early_stopping_rounds) {
        report.stopping_reason = "early_stopping";
        break;
      }
    } else {
      best_round = round;
    }
  }

  model.best_round_ = best_round;
  model.rounds_.resize(static_cast<std::size_t>(best_round));
  report.best_round = best_round;
  return result;
}

GbdtResult train_gbdt(const TrainingData& train, const GbdtConfig& config, const TrainingData* validation) {
  if (train.features.empty()) fail(ErrorKind::EmptyInput, "gbdt: empty training set");
  return GbdtTrainer::run(train, config, validation);
}

}  // namespace killchain
