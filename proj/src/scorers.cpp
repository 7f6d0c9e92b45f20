#include "killchain/scorers.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "killchain/error.hpp"
#include "killchain/text.hpp"

namespace killchain {

std::string_view to_string(ScorerKind kind) noexcept {
  switch (kind) {
    case ScorerKind::NativeGbdt: return "native-gbdt";
    case ScorerKind::NativeSoftmax: return "native-softmax";
    case ScorerKind::External: return "external";
  }
  return "unknown";
}

ScorerKind parse_scorer_kind(std::string_view text) {
  if (text == "native-gbdt") return ScorerKind::NativeGbdt;
  if (text == "native-softmax") return ScorerKind::NativeSoftmax;
  if (text == "external") return ScorerKind::External;
  fail(ErrorKind::Config, "unknown scorer kind '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Softmax regression

void SoftmaxConfig::validate() const {
  if (epochs < 0) fail(ErrorKind::Config, "softmax: epochs must be >= 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail(ErrorKind::Config, "softmax: learning_rate must be >= 0");
  if (!(l2 >= 0.0) || !std::isfinite(l2)) fail(ErrorKind::Config, "softmax: l2 must be >= 0");
}

nlohmann::ordered_json SoftmaxConfig::to_json() const {
  return {{"epochs", epochs}, {"learning_rate", learning_rate}, {"l2", l2},
          {"class_weighting", class_weighting}, {"seed", seed}};
}

SoftmaxConfig SoftmaxConfig::from_json(const nlohmann::json& doc) {
  static const std::set<std::string> kKnown = {"epochs", "learning_rate", "l2", "class_weighting", "seed"};
  if (!doc.is_object()) fail(ErrorKind::Config, "softmax config must be an object");
  for (const auto& [key, _] : doc.items()) {
    if (!kKnown.contains(key)) fail(ErrorKind::Config, "softmax config: unknown key '" + key + "'");
  }
  SoftmaxConfig c;
  try {
    c.epochs = doc.value("epochs", c.epochs);
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.l2 = doc.value("l2", c.l2);
    c.class_weighting = doc.value("class_weighting", c.class_weighting);
    c.seed = doc.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("softmax config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

void softmax_row(std::vector<double>& z) {
  double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : z) v /= sum;
}

std::vector<double> linear_softmax(std::span<const double> params, std::size_t K, std::size_t d,
                                   std::span<const double> x) {
  std::vector<double> z(K);
  for (std::size_t k = 0; k < K; ++k) {
    double s = params[K * d + k];
    const double* wk = params.data() + k * d;
    for (std::size_t j = 0; j < d; ++j) s += wk[j] * x[j];
    z[k] = s;
  }
  softmax_row(z);
  return z;
}

}  // namespace

double SoftmaxObjective::loss(std::span<const double> params) const {
  const auto& X = *features;
  double total = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    auto p = linear_softmax(params, num_classes, dim, X[i]);
    total += -sample_weights[i] * std::log(std::max(p[targets[i]], 1e-15));
    wsum += sample_weights[i];
  }
  double reg = 0.0;
  for (std::size_t j = 0; j < num_classes * dim; ++j) reg += params[j] * params[j];
  return total / wsum + 0.5 * l2 * reg;
}

std::vector<double> SoftmaxObjective::gradient(std::span<const double> params) const {
  const auto& X = *features;
  std::vector<double> g(num_classes * dim + num_classes, 0.0);
  double wsum = 0.0;
  for (double w : sample_weights) wsum += w;
  for (std::size_t i = 0; i < X.size(); ++i) {
    auto p = linear_softmax(params, num_classes, dim, X[i]);
    const double scale = sample_weights[i] / wsum;
    for (std::size_t k = 0; k < num_classes; ++k) {
      double r = scale * (p[k] - (targets[i] == k ? 1.0 : 0.0));
      double* gk = g.data() + k * dim;
      for (std::size_t j = 0; j < dim; ++j) gk[j] += r * X[i][j];
      g[num_classes * dim + k] += r;
    }
  }
  for (std::size_t j = 0; j < num_classes * dim; ++j) g[j] += l2 * params[j];
  return g;
}

SoftmaxObjective make_softmax_objective(const TrainingData& data, const std::vector<std::string>& classes,
                                        double l2, bool class_weighting) {
  if (data.features.empty()) fail(ErrorKind::EmptyInput, "softmax: empty training set");
  SoftmaxObjective obj;
  obj.num_classes = classes.size();
  obj.dim = data.features.front().size();
  obj.features = &data.features;
  obj.l2 = l2;
  std::map<std::string, double> cw;
  if (class_weighting) cw = class_weights(data.labels);
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    if (data.features[i].size() != obj.dim) fail(ErrorKind::Contract, "softmax: inconsistent feature dimensions");
    auto it = std::lower_bound(classes.begin(), classes.end(), data.labels[i]);
    if (it == classes.end() || *it != data.labels[i]) fail(ErrorKind::Contract, "softmax: unknown label " + data.labels[i]);
    obj.targets.push_back(static_cast<std::size_t>(it - classes.begin()));
    obj.sample_weights.push_back(class_weighting ? cw[data.labels[i]] : 1.0);
  }
  return obj;
}

SoftmaxRegressionModel train_softmax_regression(const TrainingData& train, const SoftmaxConfig& config) {
  config.validate();
  std::set<std::string> label_set(train.labels.begin(), train.labels.end());
  if (label_set.size() < 2) fail(ErrorKind::Degenerate, "softmax: training requires at least two distinct labels");

  SoftmaxRegressionModel model;
  model.classes.assign(label_set.begin(), label_set.end());
  auto objective = make_softmax_objective(train, model.classes, config.l2, config.class_weighting);
  model.dim = objective.dim;
  const std::size_t K = model.classes.size();

  std::vector<double> params(K * model.dim + K, 0.0);
  Rng rng(derive_seed(config.seed, 0x50f7));
  for (std::size_t j = 0; j < K * model.dim; ++j) params[j] = 0.01 * rng.normal();

  double loss = objective.loss(params);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    model.loss_trace.push_back(loss);
    if (config.learning_rate == 0.0) continue;
    auto g = objective.gradient(params);
    for (std::size_t j = 0; j < params.size(); ++j) params[j] -= config.learning_rate * g[j];
    loss = objective.loss(params);
    if (!std::isfinite(loss)) {
      fail(ErrorKind::Divergence, "softmax regression diverged at epoch " + std::to_string(epoch + 1) +
                                      "; try a smaller learning_rate");
    }
  }
  model.loss_trace.push_back(loss);
  model.weights.assign(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(K * model.dim));
  model.bias.assign(params.begin() + static_cast<std::ptrdiff_t>(K * model.dim), params.end());
  return model;
}

std::vector<double> SoftmaxRegressionModel::predict_proba(std::span<const double> x) const {
  if (x.size() != dim) {
    fail(ErrorKind::Contract, "softmax: input has dimension " + std::to_string(x.size()) + ", model expects " +
                                  std::to_string(dim));
  }
  std::vector<double> params = weights;
  params.insert(params.end(), bias.begin(), bias.end());
  return linear_softmax(params, classes.size(), dim, x);
}

nlohmann::ordered_json SoftmaxRegressionModel::to_json() const {
  nlohmann::ordered_json doc;
  doc["format"] = "killchain.softmax/1";
  doc["classes"] = classes;
  doc["dim"] = dim;
  doc["weights"] = weights;
  doc["bias"] = bias;
  doc["loss_trace"] = loss_trace;
  return doc;
}

SoftmaxRegressionModel SoftmaxRegressionModel::from_json(const nlohmann::json& doc) {
  if (doc.value("format", "") != "killchain.softmax/1") fail(ErrorKind::Format, "not a killchain.softmax/1 model");
  SoftmaxRegressionModel m;
  try {
    m.classes = doc.at("classes").get<std::vector<std::string>>();
    m.dim = doc.at("dim").get<std::size_t>();
    m.weights = doc.at("weights").get<std::vector<double>>();
    m.bias = doc.at("bias").get<std::vector<double>>();
    m.loss_trace = doc.at("loss_trace").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("softmax model: ") + e.what());
  }
  if (m.weights.size() != m.classes.size() * m.dim || m.bias.size() != m.classes.size()) {
    fail(ErrorKind::Format, "softmax model: parameter shape mismatch");
  }
  for (double v : m.weights) {
    if (!std::isfinite(v)) fail(ErrorKind::Format, "softmax model: non-finite weight");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Scoring

const std::vector<std::string>& Scorer::classes() const {
  return std::visit(
      [](const auto& m) -> const std::vector<std::string>& {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GbdtModel>) {
          return m.classes();
        } else if constexpr (std::is_same_v<T, SoftmaxRegressionModel>) {
          return m.classes;
        } else {
          return m.matrix.labels();
        }
      },
      model);
}

ProbabilityMatrix score(const Scorer& scorer, const std::vector<ScoreInput>& inputs,
                        const std::vector<std::string>& label_order) {
  const auto& classes = scorer.classes();
  if (std::set<std::string>(classes.begin(), classes.end()) !=
          std::set<std::string>(label_order.begin(), label_order.end()) ||
      classes.size() != label_order.size()) {
    fail(ErrorKind::Contract, "scorer '" + scorer.handle.name + "' label set differs from the requested label order");
  }
  std::vector<std::size_t> column_of(label_order.size());
  for (std::size_t c = 0; c < label_order.size(); ++c) {
    column_of[c] = static_cast<std::size_t>(std::find(classes.begin(), classes.end(), label_order[c]) - classes.begin());
  }

  std::vector<std::string> ids;
  std::vector<double> values;
  values.reserve(inputs.size() * label_order.size());
  for (const auto& in : inputs) {
    std::vector<double> probs;
    try {
      probs = std::visit(
          [&](const auto& m) -> std::vector<double> {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, ExternalScores>) {
              const auto& ids_ext = m.matrix.sample_ids();
              auto it = std::find(ids_ext.begin(), ids_ext.end(), in.sample_id);
              if (it == ids_ext.end()) fail(ErrorKind::Lookup, "external matrix has no row for sample");
              auto row = m.matrix.row(static_cast<std::size_t>(it - ids_ext.begin()));
              return {row.begin(), row.end()};
            } else {
              return m.predict_proba(in.embedding);
            }
          },
          scorer.model);
    } catch (const Error& e) {
      fail(e.kind(), "scorer '" + scorer.handle.name + "' cannot score sample '" + in.sample_id + "': " + e.what());
    }
    ids.push_back(in.sample_id);
    for (std::size_t c = 0; c < label_order.size(); ++c) values.push_back(probs[column_of[c]]);
  }
  return ProbabilityMatrix(std::move(ids), label_order, std::move(values));
}

std::vector<std::string> sample_row_ids(const std::vector<LabeledSample>& samples) {
  std::map<std::string, int> seen;
  std::vector<std::string> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) {
    int n = ++seen[s.technique_id];
    ids.push_back(n == 1 ? s.technique_id : s.technique_id + "#" + std::to_string(n));
  }
  return ids;
}

ProbabilityMatrix score_samples(const Scorer& scorer, const std::vector<LabeledSample>& samples,
                                const EmbeddingProvider& embedder, const std::vector<std::string>& label_order) {
  auto ids = sample_row_ids(samples);
  std::vector<ScoreInput> inputs;
  inputs.reserve(samples.size());
  const bool external = std::holds_alternative<ExternalScores>(scorer.model);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ScoreInput in{ids[i], {}};
    if (!external) {
      try {
        in.embedding = embed(embedder, EmbedItem{samples[i].technique_id, samples[i].text});
      } catch (const Error& e) {
        fail(e.kind(), "sample '" + ids[i] + "' cannot be embedded: " + e.what());
      }
    }
    inputs.push_back(std::move(in));
  }
  return score(scorer, inputs, label_order);
}

}  // namespace killchain
