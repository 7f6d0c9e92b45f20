#include "killchain/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include "killchain/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace killchain {

std::string_view engine_version() noexcept { return KILLCHAIN_VERSION; }

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorKind::Io, "sha256 failed");
  }
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<int>(digest[i]);
  return os.str();
}

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + file.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file_atomic(const fs::path& file, std::string_view contents) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail(ErrorKind::Io, "short write to " + tmp.string());
  }
  fs::rename(tmp, file);
}

namespace {

std::string pretty(const ordered_json& doc) { return doc.dump(2) + "\n"; }

std::string utc_now() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute()) return p.lexically_normal();
  return (base / p).lexically_normal();
}

ScorerSpec parse_scorer_spec(const json& j, const fs::path& base) {
  ScorerSpec s;
  if (j.is_string()) {
    s.name = j.get<std::string>();
    if (s.name == "gbdt") s.kind = ScorerKind::NativeGbdt;
    else if (s.name == "softmax") s.kind = ScorerKind::NativeSoftmax;
    else fail(ErrorKind::Config, "scorers: '" + s.name + "' needs an object with a kind");
    return s;
  }
  if (!j.is_object()) fail(ErrorKind::Config, "scorers: entries must be strings or objects");
  for (const auto& [key, _] : j.items()) {
    if (key != "name" && key != "kind" && key != "matrices") fail(ErrorKind::Config, "scorers: unknown key '" + key + "'");
  }
  s.name = j.at("name").get<std::string>();
  s.kind = parse_scorer_kind(j.at("kind").get<std::string>());
  if (j.contains("matrices")) s.matrices = resolve(base, j.at("matrices").get<std::string>());
  return s;
}

const std::set<std::string> kConfigKeys = {
    "bundle", "anchors", "embedding_table", "work_dir", "collapse_subtechniques", "tfidf_dim", "split", "augment",
    "gbdt",   "softmax", "scorers",         "sweep_leaves", "tau", "k_pred", "max_paths", "near_tie_gap"};

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  if (bundle.empty()) fail(ErrorKind::Config, "config: 'bundle' is required");
  if (anchors.empty()) fail(ErrorKind::Config, "config: 'anchors' is required");
  if (work_dir.empty()) fail(ErrorKind::Config, "config: 'work_dir' is required");
  if (tfidf_dim == 0) fail(ErrorKind::Config, "config: 'tfidf_dim' must be >= 1");
  const double sum = split.train + split.validation + split.test;
  if (std::abs(sum - 1.0) > 1e-9) fail(ErrorKind::Config, "config: split ratios must sum to 1");
  for (double r : {split.train, split.validation, split.test}) {
    if (!(r >= 0.0 && r <= 1.0)) fail(ErrorKind::Config, "config: split ratios must lie in [0, 1]");
  }
  augment.validate();
  gbdt.validate();
  gbdt.validate_tuning_range();
  softmax.validate();
  validate_tau(tau);
  if (k_pred == 0) fail(ErrorKind::Config, "config: 'k_pred' must be >= 1");
  if (max_paths == 0) fail(ErrorKind::Config, "config: 'max_paths' must be >= 1");
  if (!(near_tie_gap >= 0.0 && near_tie_gap < 1.0)) fail(ErrorKind::Config, "config: 'near_tie_gap' must lie in [0, 1)");
  if (sweep_leaves.empty()) fail(ErrorKind::Config, "config: 'sweep_leaves' must not be empty");
  for (int leaves : sweep_leaves) {
    GbdtConfig c = gbdt;
    c.num_leaves = leaves;
    c.validate_tuning_range();
  }
  std::set<std::string> names;
  int gbdt_count = 0, softmax_count = 0;
  for (const auto& s : scorers) {
    if (s.name.empty()) fail(ErrorKind::Config, "config: scorer names must be non-empty");
    if (s.name == "ensemble") fail(ErrorKind::Config, "config: 'ensemble' is reserved");
    if (!names.insert(s.name).second) fail(ErrorKind::Config, "config: duplicate scorer '" + s.name + "'");
    gbdt_count += s.kind == ScorerKind::NativeGbdt;
    softmax_count += s.kind == ScorerKind::NativeSoftmax;
    if (s.kind == ScorerKind::External && s.matrices.empty()) {
      fail(ErrorKind::Config, "config: external scorer '" + s.name + "' needs a 'matrices' directory");
    }
  }
  if (gbdt_count + softmax_count == 0) fail(ErrorKind::Config, "config: at least one native scorer is required");
  if (gbdt_count > 1 || softmax_count > 1) fail(ErrorKind::Config, "config: at most one native scorer of each kind");
}

PipelineConfig PipelineConfig::from_json(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) fail(ErrorKind::Config, "config must be a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (!kConfigKeys.contains(key)) fail(ErrorKind::Config, "config: unknown key '" + key + "'");
  }
  PipelineConfig c;
  try {
    c.bundle = resolve(base_dir, doc.at("bundle").get<std::string>());
    c.anchors = resolve(base_dir, doc.at("anchors").get<std::string>());
    if (doc.contains("embedding_table") && !doc["embedding_table"].is_null()) {
      c.embedding_table = resolve(base_dir, doc["embedding_table"].get<std::string>());
    }
    c.work_dir = resolve(base_dir, doc.value("work_dir", std::string("work")));
    c.collapse_subtechniques = doc.value("collapse_subtechniques", c.collapse_subtechniques);
    c.tfidf_dim = doc.value("tfidf_dim", c.tfidf_dim);
    if (doc.contains("split")) {
      const auto& s = doc["split"];
      for (const auto& [key, _] : s.items()) {
        if (key != "train" && key != "validation" && key != "test" && key != "seed") {
          fail(ErrorKind::Config, "config: unknown key 'split." + key + "'");
        }
      }
      c.split.train = s.value("train", c.split.train);
      c.split.validation = s.value("validation", c.split.validation);
      c.split.test = s.value("test", c.split.test);
      c.split_seed = s.value("seed", c.split_seed);
    }
    if (doc.contains("augment")) {
      const auto& a = doc["augment"];
      for (const auto& [key, _] : a.items()) {
        static const std::set<std::string> known = {"tfidf_drop_fraction", "reorder_probability", "duplication_factor",
                                                    "minority_threshold", "seed"};
        if (!known.contains(key)) fail(ErrorKind::Config, "config: unknown key 'augment." + key + "'");
      }
      c.augment.tfidf_drop_fraction = a.value("tfidf_drop_fraction", c.augment.tfidf_drop_fraction);
      c.augment.reorder_probability = a.value("reorder_probability", c.augment.reorder_probability);
      c.augment.duplication_factor = a.value("duplication_factor", c.augment.duplication_factor);
      c.augment.minority_threshold = a.value("minority_threshold", c.augment.minority_threshold);
      c.augment.seed = a.value("seed", c.augment.seed);
    }
    if (doc.contains("gbdt")) c.gbdt = GbdtConfig::from_json(doc["gbdt"]);
    if (doc.contains("softmax")) c.softmax = SoftmaxConfig::from_json(doc["softmax"]);
    if (doc.contains("scorers")) {
      c.scorers.clear();
      for (const auto& s : doc["scorers"]) c.scorers.push_back(parse_scorer_spec(s, base_dir));
    }
    if (doc.contains("sweep_leaves")) c.sweep_leaves = doc["sweep_leaves"].get<std::vector<int>>();
    c.tau = doc.value("tau", c.tau);
    c.k_pred = doc.value("k_pred", c.k_pred);
    c.max_paths = doc.value("max_paths", c.max_paths);
    c.near_tie_gap = doc.value("near_tie_gap", c.near_tie_gap);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& file) {
  std::string text = read_file(file);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, "config " + file.string() + ": malformed JSON at byte " + std::to_string(e.byte));
  }
  return from_json(doc, fs::absolute(file).parent_path());
}

ordered_json PipelineConfig::to_json() const {
  ordered_json doc;
  doc["bundle"] = bundle.string();
  doc["anchors"] = anchors.string();
  doc["embedding_table"] = embedding_table.empty() ? ordered_json(nullptr) : ordered_json(embedding_table.string());
  doc["work_dir"] = work_dir.string();
  doc["collapse_subtechniques"] = collapse_subtechniques;
  doc["tfidf_dim"] = tfidf_dim;
  doc["split"] = {{"train", split.train}, {"validation", split.validation}, {"test", split.test}, {"seed", split_seed}};
  doc["augment"] = {{"tfidf_drop_fraction", augment.tfidf_drop_fraction},
                    {"reorder_probability", augment.reorder_probability},
                    {"duplication_factor", augment.duplication_factor},
                    {"minority_threshold", augment.minority_threshold},
                    {"seed", augment.seed}};
  doc["gbdt"] = gbdt.to_json();
  doc["softmax"] = softmax.to_json();
  auto& sc = doc["scorers"] = ordered_json::array();
  for (const auto& s : scorers) {
    ordered_json j{{"name", s.name}, {"kind", std::string(to_string(s.kind))}};
    if (!s.matrices.empty()) j["matrices"] = s.matrices.string();
    sc.push_back(std::move(j));
  }
  doc["sweep_leaves"] = sweep_leaves;
  doc["tau"] = tau;
  doc["k_pred"] = k_pred;
  doc["max_paths"] = max_paths;
  doc["near_tie_gap"] = near_tie_gap;
  return doc;
}

void PipelineConfig::set_seed(std::uint64_t seed) {
  split_seed = seed;
  augment.seed = seed;
  gbdt.seed = seed;
  softmax.seed = seed;
}

NarrativeOptions PipelineConfig::narrative_options() const {
  NarrativeOptions o;
  o.tau = tau;
  o.k_pred = k_pred;
  o.near_tie_gap = near_tie_gap;
  o.max_paths = max_paths;
  return o;
}

namespace {

const std::vector<std::string> kStages = {"ingest", "split", "augment", "train", "evaluate", "predict", "chain"};

}  // namespace

std::string stage_fingerprint(const PipelineConfig& config, std::string_view stage) {
  auto it = std::find(kStages.begin(), kStages.end(), stage);
  if (it == kStages.end()) fail(ErrorKind::Contract, "unknown stage '" + std::string(stage) + "'");
  const auto depth = it - kStages.begin();
  const ordered_json full = config.to_json();
  ordered_json fp;
  fp["bundle"] = full["bundle"];
  fp["anchors"] = full["anchors"];
  fp["embedding_table"] = full["embedding_table"];
  fp["collapse_subtechniques"] = full["collapse_subtechniques"];
  fp["tfidf_dim"] = full["tfidf_dim"];
  if (depth >= 1) fp["split"] = full["split"];
  if (depth >= 2) fp["augment"] = full["augment"];
  if (depth >= 3) {
    fp["gbdt"] = full["gbdt"];
    fp["softmax"] = full["softmax"];
    fp["sweep_leaves"] = full["sweep_leaves"];
  }
  if (depth >= 4) fp["scorers"] = full["scorers"];
  if (depth >= 5) {
    fp["k_pred"] = full["k_pred"];
    fp["near_tie_gap"] = full["near_tie_gap"];
  }
  if (depth >= 6) {
    fp["tau"] = full["tau"];
    fp["max_paths"] = full["max_paths"];
  }
  return sha256_hex(fp.dump());
}

// ---------------------------------------------------------------------------
// Manifests

ordered_json RunManifest::to_json() const {
  ordered_json doc;
  doc["command"] = command;
  doc["engine_version"] = engine_version;
  doc["config_hash"] = config_hash;
  doc["started_at"] = started_at;
  doc["finished_at"] = finished_at;
  doc["inputs"] = inputs;
  doc["outputs"] = outputs;
  doc["warnings"] = warnings;
  return doc;
}

RunManifest RunManifest::from_json(const json& doc) {
  RunManifest m;
  try {
    m.command = doc.at("command").get<std::string>();
    m.engine_version = doc.at("engine_version").get<std::string>();
    m.config_hash = doc.at("config_hash").get<std::string>();
    m.started_at = doc.at("started_at").get<std::string>();
    m.finished_at = doc.at("finished_at").get<std::string>();
    m.inputs = doc.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = doc.at("outputs").get<std::map<std::string, std::string>>();
    m.warnings = doc.value("warnings", std::vector<std::string>{});
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("manifest: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// In-memory stages

EmbeddingProvider make_embedder(const TfidfModel& tfidf, const EmbeddingTable* table) {
  if (table != nullptr) return *table;
  return tfidf;
}

LabelCatalog build_label_catalog(const std::vector<LabeledSample>& samples, const std::vector<Technique>& techniques) {
  std::map<std::string, const Technique*> by_id;
  for (const auto& t : techniques) by_id.emplace(t.technique_id, &t);
  LabelCatalog catalog;
  for (const auto& s : samples) {
    auto& slot = catalog[s.phase];
    auto it = slot.find(s.label);
    const Technique* t = by_id.at(s.technique_id);
    // Prefer the technique whose own name is the label (the parent when
    // sub-techniques are collapsed).
    if (it == slot.end()) {
      slot.emplace(s.label, LabelInfo{s.text, s.technique_id});
    } else if (t->name == s.label && by_id.at(it->second.key)->name != s.label) {
      it->second = LabelInfo{s.text, s.technique_id};
    }
  }
  return catalog;
}

ordered_json label_catalog_to_json(const LabelCatalog& catalog) {
  ordered_json doc;
  doc["format"] = "killchain.labels/1";
  auto& phases = doc["phases"] = ordered_json::object();
  for (const auto& [phase, labels] : catalog) {
    auto& p = phases[std::string(phase_name(phase))] = ordered_json::object();
    for (const auto& [label, info] : labels) p[label] = {{"key", info.key}, {"description", info.description}};
  }
  return doc;
}

LabelCatalog label_catalog_from_json(const json& doc) {
  if (doc.value("format", "") != "killchain.labels/1") fail(ErrorKind::Format, "not a killchain.labels/1 document");
  LabelCatalog catalog;
  try {
    for (const auto& [phase, labels] : doc.at("phases").items()) {
      auto& slot = catalog[parse_phase(phase)];
      for (const auto& [label, info] : labels.items()) {
        slot[label] = {info.at("description").get<std::string>(), info.at("key").get<std::string>()};
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("label catalog: ") + e.what());
  }
  return catalog;
}

namespace {

struct IngestInputs {
  BundleParse bundle;
  PhaseAnchors anchors;
};

IngestInputs read_ingest_inputs(const PipelineConfig& config) {
  return {parse_attack_bundle(read_file(config.bundle)), load_anchors(config.anchors)};
}

}  // namespace

IngestResult run_ingest(const PipelineConfig& config, const EmbeddingTable* table) {
  IngestInputs in = read_ingest_inputs(config);
  if (in.bundle.techniques.empty()) fail(ErrorKind::EmptyInput, "bundle contains no usable attack-pattern objects");

  std::vector<std::string> corpus;
  for (const auto& t : in.bundle.techniques) corpus.push_back(t.combined_description);
  for (const auto& a : in.anchors) {
    std::string cleaned = clean_text(a);
    if (!cleaned.empty()) corpus.push_back(cleaned);
  }

  IngestResult r;
  r.warnings = in.bundle.warnings;
  r.technique_count = in.bundle.techniques.size();
  r.tfidf = fit_tfidf(corpus, config.tfidf_dim);
  EmbeddingProvider embedder = make_embedder(r.tfidf, table);
  auto samples = assign_phases(in.bundle.techniques, embedder, in.anchors,
                               {.collapse_subtechniques = config.collapse_subtechniques});
  r.datasets = split_phase_datasets(samples);
  r.labels = build_label_catalog(samples, in.bundle.techniques);
  return r;
}

namespace {

std::string native_name(const PipelineConfig& config, ScorerKind kind) {
  for (const auto& s : config.scorers) {
    if (s.kind == kind) return s.name;
  }
  return {};
}

double best_validation_loss(const TrainReport& r) {
  if (r.validation_loss.empty() || r.best_round < 1) return std::numeric_limits<double>::infinity();
  return r.validation_loss[static_cast<std::size_t>(r.best_round - 1)];
}

}  // namespace

PhaseModels train_phase(const PhaseDataset& train, const PhaseDataset& validation, const EmbeddingProvider& embedder,
                        const PipelineConfig& config, bool sweep) {
  PhaseModels out;
  TrainingData train_data = make_training_data(train, embedder);
  TrainingData valid_data = make_training_data(validation, embedder);
  const TrainingData* valid = valid_data.features.empty() ? nullptr : &valid_data;

  if (std::string name = native_name(config, ScorerKind::NativeGbdt); !name.empty()) {
    if (sweep) {
      int chosen = -1;
      for (int leaves : config.sweep_leaves) {
        GbdtConfig c = config.gbdt;
        c.num_leaves = leaves;
        GbdtResult r = train_gbdt(train_data, c, valid);
        // Strict improvement: ties keep the smaller leaf count.
        if (chosen < 0 || best_validation_loss(r.report) < best_validation_loss(out.sweep.at(chosen).report)) {
          chosen = leaves;
        }
        out.sweep.emplace(leaves, std::move(r));
      }
      const GbdtResult& best = out.sweep.at(chosen);
      out.native.emplace(name, best.model);
      out.reports[name] = best.report.to_json();
      out.reports[name]["num_leaves"] = chosen;
    } else {
      GbdtResult r = train_gbdt(train_data, config.gbdt, valid);
      out.reports[name] = r.report.to_json();
      out.native.emplace(name, std::move(r.model));
    }
  }
  if (std::string name = native_name(config, ScorerKind::NativeSoftmax); !name.empty()) {
    SoftmaxRegressionModel m = train_softmax_regression(train_data, config.softmax);
    ordered_json report;
    report["epochs"] = config.softmax.epochs;
    report["initial_loss"] = m.loss_trace.front();
    report["final_loss"] = m.loss_trace.back();
    out.reports[name] = std::move(report);
    out.native.emplace(name, std::move(m));
  }
  return out;
}

namespace {

std::map<std::string, ProbabilityMatrix> score_split(Phase phase, const PhaseModels& models,
                                                     const PhaseDataset& data, const std::vector<std::string>& labels,
                                                     const EmbeddingProvider& embedder,
                                                     const ExternalMatrices& external) {
  std::map<std::string, ProbabilityMatrix> out;
  if (data.empty()) return out;
  for (const auto& [name, model] : models.native) {
    Scorer s{{name, std::holds_alternative<GbdtModel>(model) ? ScorerKind::NativeGbdt : ScorerKind::NativeSoftmax, phase},
             model};
    out.emplace(name, score_samples(s, data.samples, embedder, labels));
  }
  for (const auto& [name, m] : external) {
    Scorer s{{name, ScorerKind::External, phase}, ExternalScores{m}};
    std::vector<ScoreInput> inputs;
    for (const auto& id : sample_row_ids(data.samples)) inputs.push_back({id, {}});
    out.emplace(name, score(s, inputs, labels));
  }
  return out;
}

std::vector<std::string> truth_of(const PhaseDataset& d) {
  std::vector<std::string> t;
  for (const auto& s : d.samples) t.push_back(s.label);
  return t;
}

}  // namespace

PhaseEvaluation evaluate_phase(Phase phase, const PhaseModels& models, const CorpusSplit& split,
                               const EmbeddingProvider& embedder, const PipelineConfig& config,
                               const ExternalMatrices& external_validation, const ExternalMatrices& external_test) {
  (void)config;
  // Label order: the classes the native models were trained on.
  std::vector<std::string> labels;
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, GbdtModel>) labels = m.classes();
        else if constexpr (std::is_same_v<M, SoftmaxRegressionModel>) labels = m.classes;
      },
      models.native.begin()->second);
  const std::set<std::string> known(labels.begin(), labels.end());
  auto known_only = [&](const PhaseDataset& d) {
    std::vector<LabeledSample> kept;
    for (const auto& s : d.samples) {
      if (known.contains(s.label)) kept.push_back(s);
    }
    return PhaseDataset::from_samples(phase, std::move(kept));
  };
  const PhaseDataset validation = known_only(split.validation);
  const PhaseDataset test = known_only(split.test);

  PhaseEvaluation ev;
  auto val_matrices = score_split(phase, models, validation, labels, embedder, external_validation);
  if (val_matrices.empty()) {
    std::map<std::string, double> zeros;
    for (const auto& [name, _] : models.native) zeros[name] = 0.0;
    for (const auto& [name, _] : external_test) zeros[name] = 0.0;
    ev.weights = fit_weights_from_f1(phase, zeros);
    ev.weights.warnings = {"validation split is empty; using uniform weights"};
  } else {
    const auto truth = truth_of(validation);
    for (const auto& [name, m] : val_matrices) ev.validation[name] = evaluate(m.argmax_labels(), truth, labels);
    ev.weights = fit_weights(phase, ev.validation);
  }

  if (test.empty()) {
    ev.weights.warnings.push_back("test split is empty; no test metrics");
    return ev;
  }
  ev.test_matrices = score_split(phase, models, test, labels, embedder, external_test);
  const auto truth = truth_of(test);
  for (const auto& [name, m] : ev.test_matrices) ev.test[name] = evaluate(m.argmax_labels(), truth, labels);
  VoteResult vote = soft_vote(ev.test_matrices, ev.weights);
  ev.ensemble = evaluate(vote.predictions, truth, labels);
  ev.test_matrices.emplace("ensemble", vote.fused);

  double best = -1.0;
  for (const auto& [name, r] : ev.test) {
    if (r.f1 > best) {
      best = r.f1;
      ev.best_scorer = name;
    }
  }
  ev.delta_f1 = ev.ensemble.f1 - best;
  return ev;
}

ordered_json PhaseEvaluation::to_json(Phase phase) const {
  auto metrics = [](const EvaluationReport& r) {
    return ordered_json{{"accuracy", r.accuracy}, {"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1}};
  };
  ordered_json doc;
  doc["phase"] = std::string(phase_name(phase));
  doc["test_samples"] = ensemble.samples;
  doc["weights"] = weights.weights;
  auto& sc = doc["scorers"] = ordered_json::object();
  for (const auto& [name, r] : test) sc[name] = metrics(r);
  if (best_scorer.empty()) {
    doc["ensemble"] = nullptr;
    doc["best_individual"] = nullptr;
    doc["delta_f1"] = nullptr;
  } else {
    doc["ensemble"] = metrics(ensemble);
    doc["best_individual"] = {{"scorer", best_scorer}, {"f1", test.at(best_scorer).f1}};
    doc["delta_f1"] = delta_f1;
  }
  auto& val = doc["validation"] = ordered_json::object();
  for (const auto& [name, r] : validation) val[name] = metrics(r);
  doc["detail"] = ordered_json::object();
  if (!best_scorer.empty()) doc["detail"]["ensemble"] = ensemble.to_json();
  for (const auto& [name, r] : test) doc["detail"][name] = r.to_json();
  return doc;
}

PhaseBundle make_phase_bundle(Phase phase, const PhaseModels& models, const EnsembleWeights& weights,
                              const std::map<std::string, LabelInfo>& labels, std::vector<std::string>* warnings) {
  PhaseBundle b;
  b.phase = phase;
  b.weights.phase = phase;
  double native_sum = 0.0;
  for (const auto& [name, model] : models.native) {
    ScorerKind kind = std::holds_alternative<GbdtModel>(model) ? ScorerKind::NativeGbdt : ScorerKind::NativeSoftmax;
    b.scorers.push_back({{name, kind, phase}, model});
    auto it = weights.weights.find(name);
    if (it == weights.weights.end()) fail(ErrorKind::Contract, "no ensemble weight for scorer '" + name + "'");
    b.weights.weights[name] = it->second;
    native_sum += it->second;
  }
  if (b.weights.weights.size() != weights.weights.size()) {
    if (warnings != nullptr) {
      warnings->push_back(std::string(phase_name(phase)) +
                          ": external scorers cannot score narrative text; weights renormalized over native scorers");
    }
    for (auto& [name, w] : b.weights.weights) {
      w = native_sum > 0.0 ? w / native_sum : 1.0 / static_cast<double>(models.native.size());
    }
  }
  b.label_set = b.scorers.front().classes();
  for (const auto& label : b.label_set) {
    auto it = labels.find(label);
    if (it == labels.end()) fail(ErrorKind::Contract, "label catalog has no entry for '" + label + "'");
    b.label_descriptions[label] = it->second.description;
    b.label_keys[label] = it->second.key;
  }
  return b;
}

ChainOutputs render_chain(const ChainRun& run) {
  ChainOutputs out;
  out.run_json = pretty(run.to_json());
  out.graph_json = export_json(run.graph, run.paths);
  out.graph_dot = export_dot(run.graph, run.paths.empty() ? nullptr : &run.paths.front());
  out.paths_table = format_paths_table(run.graph, run.paths);
  return out;
}

// ---------------------------------------------------------------------------
// Staged commands

namespace {

const std::map<std::string, std::vector<std::string>> kUpstream = {
    {"ingest", {}},
    {"split", {"ingest"}},
    {"augment", {"split", "ingest"}},
    {"train", {"augment", "split", "ingest"}},
    {"evaluate", {"train", "split", "ingest"}},
    {"predict", {"evaluate", "train", "ingest"}},
    {"chain", {"predict"}},
};

std::string rel_phase_path(std::string_view dir, Phase p, std::string_view file) {
  std::string out(dir);
  out += "/";
  out += phase_name(p);
  if (!file.empty()) {
    out += "/";
    out += file;
  }
  return out;
}

/// Phase named by a work-dir relative path ("models/Delivery/gbdt.json",
/// "dataset/Delivery.jsonl"), if any.
std::optional<Phase> phase_of_path(const std::string& rel) {
  for (const auto& part : fs::path(rel)) {
    if (auto p = phase_from_name(part.string())) return p;
    if (auto p = phase_from_name(part.stem().string())) return p;
  }
  return std::nullopt;
}

class Recorder {
 public:
  Recorder(const PipelineConfig& config, std::string command)
      : config_(config) {
    manifest_.command = std::move(command);
    manifest_.engine_version = std::string(engine_version());
    manifest_.started_at = utc_now();
    manifest_.config_hash = manifest_.command == "narrative" ? stage_fingerprint(config, "chain")
                                                             : stage_fingerprint(config, manifest_.command);
  }

  std::string key(const fs::path& p) const {
    fs::path abs = fs::absolute(p).lexically_normal();
    fs::path rel = abs.lexically_relative(fs::absolute(config_.work_dir).lexically_normal());
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return abs.generic_string();
  }

  fs::path path(const std::string& rel) const { return config_.work_dir / rel; }

  std::string read_input(const fs::path& p) {
    std::string bytes = read_file(p);
    manifest_.inputs[key(p)] = sha256_hex(bytes);
    return bytes;
  }

  void write(const fs::path& p, const std::string& bytes) {
    write_file_atomic(p, bytes);
    manifest_.outputs[key(p)] = sha256_hex(bytes);
  }

  void write_rel(const std::string& rel, const std::string& bytes) { write(path(rel), bytes); }

  void warn(std::string message) { manifest_.warnings.push_back(std::move(message)); }

  /// Keeps entries of a previous manifest that belong to phases outside
  /// this run.
  void merge_previous(const std::optional<Phase>& only) {
    if (!only) return;
    fs::path file = config_.work_dir / "manifests" / (manifest_.command + ".json");
    if (!fs::exists(file)) return;
    RunManifest old = RunManifest::from_json(json::parse(read_file(file)));
    using Entries = std::map<std::string, std::string>;
    for (auto maps : {std::pair<Entries*, Entries*>{&old.inputs, &manifest_.inputs},
                      std::pair<Entries*, Entries*>{&old.outputs, &manifest_.outputs}}) {
      for (const auto& [k, v] : *maps.first) {
        auto p = phase_of_path(k);
        if (p && *p != *only && !maps.second->contains(k)) maps.second->emplace(k, v);
      }
    }
  }

  RunManifest finish() {
    manifest_.finished_at = utc_now();
    write_file_atomic(config_.work_dir / "manifests" / (manifest_.command + ".json"), pretty(manifest_.to_json()));
    return manifest_;
  }

  RunManifest& manifest() { return manifest_; }

 private:
  const PipelineConfig& config_;
  RunManifest manifest_;
};

std::optional<RunManifest> load_manifest(const PipelineConfig& config, const std::string& stage) {
  fs::path file = config.work_dir / "manifests" / (stage + ".json");
  if (!fs::exists(file)) return std::nullopt;
  return RunManifest::from_json(json::parse(read_file(file)));
}

/// Checks that `stage` and everything upstream of it is current.
void require_fresh(const PipelineConfig& config, const std::string& stage) {
  std::vector<std::string> problems;
  std::set<std::string> visited;
  std::function<void(const std::string&)> check = [&](const std::string& s) {
    if (!visited.insert(s).second) return;
    auto m = load_manifest(config, s);
    if (!m) {
      problems.push_back("stage '" + s + "' has not run (no manifests/" + s + ".json)");
      return;
    }
    if (m->config_hash != stage_fingerprint(config, s)) {
      problems.push_back("stage '" + s + "' ran under a different configuration");
    }
    for (const auto& [rel, hash] : m->outputs) {
      fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : config.work_dir / rel;
      if (!fs::exists(p)) {
        problems.push_back(s + ": missing " + rel);
      } else if (sha256_hex(read_file(p)) != hash) {
        problems.push_back(s + ": modified " + rel + " (recorded " + hash.substr(0, 12) + ")");
      }
    }
    // Inputs produced upstream must match what the producer recorded last.
    std::map<std::string, std::string> produced;
    for (const auto& up : kUpstream.at(s)) {
      if (auto um = load_manifest(config, up)) {
        for (const auto& [rel, hash] : um->outputs) produced[rel] = hash;
      }
    }
    for (const auto& [rel, hash] : m->inputs) {
      auto it = produced.find(rel);
      if (it != produced.end()) {
        if (it->second != hash) problems.push_back(s + ": input " + rel + " was regenerated upstream; rerun '" + s + "'");
        continue;
      }
      fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : config.work_dir / rel;
      if (fs::exists(p) && fs::path(rel).is_absolute() && sha256_hex(read_file(p)) != hash) {
        problems.push_back(s + ": input " + rel + " changed since the stage ran");
      }
    }
    for (const auto& up : kUpstream.at(s)) check(up);
  };
  check(stage);
  if (!problems.empty()) {
    std::string msg = "stale or missing artifacts:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw StaleArtifactError(msg);
  }
}

void require_upstream(const PipelineConfig& config, const std::string& stage) {
  for (const auto& up : kUpstream.at(stage)) require_fresh(config, up);
}

std::string model_text(const ScorerModel& model) {
  return std::visit(
      [](const auto& m) -> std::string {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, ExternalScores>) {
          fail(ErrorKind::Contract, "external scorers have no model file");
        } else {
          return pretty(m.to_json());
        }
      },
      model);
}

ScorerModel parse_model(const ScorerSpec& spec, const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Parse, "model " + spec.name + ": malformed JSON at byte " + std::to_string(e.byte));
  }
  if (spec.kind == ScorerKind::NativeGbdt) return GbdtModel::from_json(doc);
  return SoftmaxRegressionModel::from_json(doc);
}

std::string jsonl(const std::vector<LabeledSample>& samples) { return write_samples_jsonl(samples); }

ordered_json provenance_for(const PipelineConfig& config, const std::map<std::string, std::string>& artifacts,
                            const std::vector<std::string>& warnings) {
  // Keys in sorted order so the document survives a parse/dump cycle unchanged.
  ordered_json p;
  p["artifacts"] = artifacts;
  p["config_hash"] = stage_fingerprint(config, "predict");
  p["engine_version"] = std::string(engine_version());
  p["seeds"] = {{"augment", config.augment.seed},
                {"gbdt", config.gbdt.seed},
                {"softmax", config.softmax.seed},
                {"split", config.split_seed}};
  p["warnings"] = warnings;
  return p;
}

void write_chain_outputs(Recorder& rec, const fs::path& out_dir, const ChainOutputs& out) {
  rec.write(out_dir / "run.json", out.run_json);
  rec.write(out_dir / "graph.json", out.graph_json);
  rec.write(out_dir / "graph.dot", out.graph_dot);
  rec.write(out_dir / "paths.txt", out.paths_table);
}

}  // namespace

Pipeline::Pipeline(PipelineConfig config, std::ostream* log) : config_(std::move(config)), log_(log) {
  config_.validate();
}

void Pipeline::log(const std::string& message) const {
  if (log_ != nullptr) *log_ << message << "\n";
}

RunManifest Pipeline::ingest() {
  Recorder rec(config_, "ingest");
  rec.read_input(config_.bundle);
  rec.read_input(config_.anchors);
  std::optional<EmbeddingTable> table;
  if (!config_.embedding_table.empty()) {
    rec.read_input(config_.embedding_table);
    table = load_embedding_table(config_.embedding_table);
  }
  IngestResult r = run_ingest(config_, table ? &*table : nullptr);

  rec.write_rel("tfidf.json", pretty(r.tfidf.to_json()));
  rec.write_rel("labels.json", pretty(label_catalog_to_json(r.labels)));
  ordered_json report;
  report["techniques"] = r.technique_count;
  report["skipped"] = {{"revoked", r.warnings.skipped_revoked},
                       {"deprecated", r.warnings.skipped_deprecated},
                       {"missing_reference", r.warnings.skipped_missing_reference},
                       {"bad_id", r.warnings.skipped_bad_id},
                       {"duplicate_id", r.warnings.skipped_duplicate_id},
                       {"empty_text", r.warnings.skipped_empty_text}};
  auto& phases = report["phases"] = ordered_json::object();
  for (Phase p : kAllPhases) {
    const auto& ds = r.datasets[phase_slot(p)];
    rec.write_rel("dataset/" + std::string(phase_name(p)) + ".jsonl", jsonl(ds.samples));
    phases[std::string(phase_name(p))] = {{"samples", ds.size()}, {"labels", ds.label_counts()}};
    if (ds.label_set.size() < 2) rec.warn(std::string(phase_name(p)) + " has fewer than two labels");
  }
  rec.write_rel("reports/ingest.json", pretty(report));
  for (const auto& m : r.warnings.messages) rec.warn(m);
  log("[ingest] " + std::to_string(r.technique_count) + " techniques, " + std::to_string(r.warnings.total()) +
      " skipped");
  return rec.finish();
}

RunManifest Pipeline::split() {
  require_upstream(config_, "split");
  Recorder rec(config_, "split");
  for (Phase p : kAllPhases) {
    if (!selected(p)) continue;
    const std::string name(phase_name(p));
    auto samples = parse_samples_jsonl(rec.read_input(rec.path("dataset/" + name + ".jsonl")));
    if (samples.empty()) {
      rec.warn(name + ": empty dataset, nothing to split");
      continue;
    }
    CorpusSplit s = stratified_split(PhaseDataset::from_samples(p, samples), config_.split, config_.split_seed);
    rec.write_rel(rel_phase_path("split", p, "train.jsonl"), jsonl(s.train.samples));
    rec.write_rel(rel_phase_path("split", p, "validation.jsonl"), jsonl(s.validation.samples));
    rec.write_rel(rel_phase_path("split", p, "test.jsonl"), jsonl(s.test.samples));
    rec.write_rel(rel_phase_path("split", p, "summary.json"), pretty(split_manifest(s)));
    for (const auto& l : s.singleton_labels) rec.warn(name + ": label '" + l + "' has one sample (train only)");
    log("[split] " + name + ": " + std::to_string(s.train.size()) + "/" + std::to_string(s.validation.size()) + "/" +
        std::to_string(s.test.size()));
  }
  rec.merge_previous(only_);
  return rec.finish();
}

RunManifest Pipeline::augment() {
  require_upstream(config_, "augment");
  Recorder rec(config_, "augment");
  TfidfModel tfidf = TfidfModel::from_json(json::parse(rec.read_input(rec.path("tfidf.json"))));
  for (Phase p : kAllPhases) {
    if (!selected(p)) continue;
    const std::string name(phase_name(p));
    fs::path train_file = rec.path(rel_phase_path("split", p, "train.jsonl"));
    if (!fs::exists(train_file)) continue;
    auto samples = parse_samples_jsonl(rec.read_input(train_file));
    AugmentResult r = killchain::augment(PhaseDataset::from_samples(p, samples), tfidf, config_.augment);
    rec.write_rel(rel_phase_path("augment", p, "train.jsonl"), jsonl(r.dataset.samples));
    rec.write_rel(rel_phase_path("augment", p, "summary.json"),
                  pretty(ordered_json{{"original", samples.size()},
                                      {"emitted", r.emitted},
                                      {"discarded_empty", r.discarded_empty},
                                      {"labels", r.dataset.label_counts()}}));
    log("[augment] " + name + ": +" + std::to_string(r.emitted) + " variants");
  }
  rec.merge_previous(only_);
  return rec.finish();
}

namespace {

std::vector<const ScorerSpec*> native_specs(const PipelineConfig& config) {
  std::vector<const ScorerSpec*> out;
  for (const auto& s : config.scorers) {
    if (s.kind != ScorerKind::External) out.push_back(&s);
  }
  return out;
}

std::string model_rel(Phase p, const std::string& name) { return rel_phase_path("models", p, name + ".json"); }

bool phase_trained(const RunManifest& train, const PipelineConfig& config, Phase p) {
  for (const auto* s : native_specs(config)) {
    if (!train.outputs.contains(model_rel(p, s->name))) return false;
  }
  return true;
}

std::string no_models_warning(Phase p) { return std::string(phase_name(p)) + ": no trained models"; }

const std::vector<std::string>& classes_of(const PhaseModels& models) {
  const auto& first = models.native.begin()->second;
  if (const auto* g = std::get_if<GbdtModel>(&first)) return g->classes();
  return std::get<SoftmaxRegressionModel>(first).classes;
}

using Reader = std::function<std::string(const fs::path&)>;

EmbeddingProvider load_embedder(const PipelineConfig& config, const Reader& read) {
  TfidfModel tfidf = TfidfModel::from_json(json::parse(read(config.work_dir / "tfidf.json")));
  if (config.embedding_table.empty()) return tfidf;
  return parse_embedding_table(read(config.embedding_table), config.embedding_table.string());
}

PhaseModels load_phase_models(const PipelineConfig& config, Phase p, const Reader& read) {
  PhaseModels m;
  for (const auto* s : native_specs(config)) {
    m.native.emplace(s->name, parse_model(*s, read(config.work_dir / model_rel(p, s->name))));
  }
  return m;
}

std::pair<ExternalMatrices, ExternalMatrices> load_external(const PipelineConfig& config, Phase p,
                                                            const PhaseModels& models, const CorpusSplit& split,
                                                            const Reader& read) {
  ExternalMatrices validation, test;
  const auto& labels = classes_of(models);
  for (const auto& s : config.scorers) {
    if (s.kind != ScorerKind::External) continue;
    const fs::path dir = s.matrices / std::string(phase_name(p));
    if (!split.validation.empty()) {
      validation.emplace(s.name, parse_probability_matrix(read(dir / "validation.jsonl"), labels,
                                                          sample_row_ids(split.validation.samples)));
    }
    if (!split.test.empty()) {
      test.emplace(s.name, parse_probability_matrix(read(dir / "test.jsonl"), labels, sample_row_ids(split.test.samples)));
    }
  }
  return {std::move(validation), std::move(test)};
}

ordered_json loss_or_null(double loss) { return std::isfinite(loss) ? ordered_json(loss) : ordered_json(nullptr); }

ordered_json sweep_report(Phase p, const PhaseModels& models, const std::vector<int>& grid) {
  ordered_json doc;
  doc["phase"] = std::string(phase_name(p));
  doc["grid"] = grid;
  auto& cands = doc["candidates"] = ordered_json::array();
  for (const auto& [leaves, r] : models.sweep) {
    cands.push_back({{"num_leaves", leaves},
                     {"best_round", r.report.best_round},
                     {"validation_loss", loss_or_null(best_validation_loss(r.report))},
                     {"stopping_reason", r.report.stopping_reason},
                     {"model", rel_phase_path("models", p, "sweep/gbdt-leaves" + std::to_string(leaves) + ".json")}});
  }
  for (const auto& [name, report] : models.reports) {
    if (report.contains("num_leaves")) doc["chosen"] = report["num_leaves"];
  }
  return doc;
}

}  // namespace

RunManifest Pipeline::train(bool sweep) {
  require_upstream(config_, "train");
  Recorder rec(config_, "train");
  EmbeddingProvider embedder = load_embedder(config_, [&](const fs::path& p) { return rec.read_input(p); });
  for (Phase p : kAllPhases) {
    if (!selected(p)) continue;
    const std::string name(phase_name(p));
    fs::path train_file = rec.path(rel_phase_path("augment", p, "train.jsonl"));
    if (!fs::exists(train_file)) continue;
    auto train = PhaseDataset::from_samples(p, parse_samples_jsonl(rec.read_input(train_file)));
    auto valid = PhaseDataset::from_samples(
        p, parse_samples_jsonl(rec.read_input(rec.path(rel_phase_path("split", p, "validation.jsonl")))));
    if (train.label_set.size() < 2) {
      rec.warn(name + ": fewer than two training labels; no models trained");
      continue;
    }
    PhaseModels m = train_phase(train, valid, embedder, config_, sweep);
    for (const auto& [scorer, model] : m.native) {
      rec.write_rel(model_rel(p, scorer), model_text(model));
      rec.write_rel(rel_phase_path("models", p, scorer + ".report.json"), pretty(m.reports.at(scorer)));
    }
    if (sweep) {
      for (const auto& [leaves, r] : m.sweep) {
        rec.write_rel(rel_phase_path("models", p, "sweep/gbdt-leaves" + std::to_string(leaves) + ".json"),
                      pretty(r.model.to_json()));
      }
      rec.write_rel("reports/sweep/" + name + ".json", pretty(sweep_report(p, m, config_.sweep_leaves)));
    }
    log("[train] " + name + ": " + std::to_string(train.label_set.size()) + " labels, " +
        std::to_string(train.size()) + " samples");
  }
  rec.merge_previous(only_);

  if (sweep) {
    ordered_json summary;
    summary["format"] = "killchain.sweep_summary/1";
    summary["grid"] = config_.sweep_leaves;
    auto& phases = summary["phases"] = ordered_json::object();
    std::map<int, double> totals;
    for (Phase p : kAllPhases) {
      const std::string rel = "reports/sweep/" + std::string(phase_name(p)) + ".json";
      if (!rec.manifest().outputs.contains(rel)) continue;
      json doc = json::parse(read_file(rec.path(rel)));
      ordered_json entry;
      entry["chosen"] = doc.at("chosen");
      auto& losses = entry["validation_loss"] = ordered_json::object();
      for (const auto& c : doc.at("candidates")) {
        const int leaves = c.at("num_leaves").get<int>();
        losses[std::to_string(leaves)] = c.at("validation_loss");
        totals[leaves] += c.at("validation_loss").is_null() ? 0.0 : c.at("validation_loss").get<double>();
      }
      phases[std::string(phase_name(p))] = std::move(entry);
    }
    int best = config_.sweep_leaves.front();
    for (int leaves : config_.sweep_leaves) {
      if (totals[leaves] < totals[best]) best = leaves;
    }
    auto& total = summary["total_validation_loss"] = ordered_json::object();
    for (int leaves : config_.sweep_leaves) total[std::to_string(leaves)] = totals[leaves];
    summary["best_num_leaves"] = best;
    rec.write_rel("reports/sweep_summary.json", pretty(summary));
  }
  return rec.finish();
}

RunManifest Pipeline::evaluate() {
  require_upstream(config_, "evaluate");
  Recorder rec(config_, "evaluate");
  const Reader read = [&](const fs::path& p) { return rec.read_input(p); };
  const RunManifest train_manifest = *load_manifest(config_, "train");
  EmbeddingProvider embedder = load_embedder(config_, read);
  for (Phase p : kAllPhases) {
    if (!selected(p) || !phase_trained(train_manifest, config_, p)) continue;
    const std::string name(phase_name(p));
    PhaseModels models = load_phase_models(config_, p, read);
    CorpusSplit split;
    split.validation = PhaseDataset::from_samples(
        p, parse_samples_jsonl(read(rec.path(rel_phase_path("split", p, "validation.jsonl")))));
    split.test =
        PhaseDataset::from_samples(p, parse_samples_jsonl(read(rec.path(rel_phase_path("split", p, "test.jsonl")))));
    auto [ext_val, ext_test] = load_external(config_, p, models, split, read);
    PhaseEvaluation ev = evaluate_phase(p, models, split, embedder, config_, ext_val, ext_test);

    rec.write_rel("weights/" + name + ".json", pretty(ev.weights.to_json()));
    rec.write_rel("evaluation/" + name + ".json", pretty(ev.to_json(p)));
    for (const auto& [scorer, m] : ev.test_matrices) {
      rec.write_rel(rel_phase_path("evaluation", p, scorer + ".test.jsonl"), write_probability_matrix(m, p));
    }
    for (const auto& w : ev.weights.warnings) rec.warn(name + ": " + w);
    if (!ev.best_scorer.empty()) {
      std::ostringstream os;
      os << "[evaluate] " << name << ": ensemble F1 " << std::fixed << std::setprecision(3) << ev.ensemble.f1
         << " (best single " << ev.best_scorer << ", delta " << std::showpos << ev.delta_f1 << ")";
      log(os.str());
    }
  }
  rec.merge_previous(only_);

  ordered_json summary;
  summary["format"] = "killchain.evaluation/1";
  summary["metrics"] = {"accuracy", "precision", "recall", "f1"};
  auto& phases = summary["phases"] = ordered_json::object();
  for (Phase p : kAllPhases) {
    const std::string rel = "evaluation/" + std::string(phase_name(p)) + ".json";
    if (!rec.manifest().outputs.contains(rel)) continue;
    ordered_json doc = ordered_json::parse(read_file(rec.path(rel)));
    ordered_json entry;
    for (const char* key : {"test_samples", "weights", "scorers", "ensemble", "best_individual", "delta_f1"}) {
      entry[key] = doc.at(key);
    }
    phases[std::string(phase_name(p))] = std::move(entry);
  }
  rec.write_rel("reports/evaluation.json", pretty(summary));
  return rec.finish();
}

namespace {

struct PredictionSetup {
  EmbeddingProvider embedder;
  PhaseAnchors anchors;
  std::map<Phase, PhaseBundle> bundles;
  std::map<std::string, std::string> artifacts;
  std::vector<std::string> warnings;
};

ChainRun predict_with(const PredictionSetup& setup, const PipelineConfig& config, std::string_view text,
                      PhaseMatrices* matrices) {
  ChainRun run = predict_narrative(text, setup.bundles, setup.embedder, setup.anchors, config.narrative_options(),
                                   matrices);
  run.provenance = provenance_for(config, setup.artifacts, setup.warnings);
  return run;
}

}  // namespace

RunManifest Pipeline::predict(std::string_view narrative, const fs::path& out_dir) {
  require_upstream(config_, "predict");
  Recorder rec(config_, "predict");
  rec.manifest().inputs["<narrative>"] = sha256_hex(narrative);
  PredictionSetup setup;
  const Reader artifact = [&](const fs::path& p) {
    std::string bytes = rec.read_input(p);
    setup.artifacts[rec.key(p)] = sha256_hex(bytes);
    return bytes;
  };
  setup.embedder = load_embedder(config_, artifact);
  setup.anchors = parse_anchors(rec.read_input(config_.anchors));
  LabelCatalog catalog = label_catalog_from_json(json::parse(artifact(rec.path("labels.json"))));
  const RunManifest train_manifest = *load_manifest(config_, "train");
  for (Phase p : kAllPhases) {
    if (!phase_trained(train_manifest, config_, p)) {
      setup.warnings.push_back(no_models_warning(p));
      continue;
    }
    PhaseModels models = load_phase_models(config_, p, artifact);
    EnsembleWeights weights =
        EnsembleWeights::from_json(json::parse(artifact(rec.path("weights/" + std::string(phase_name(p)) + ".json"))));
    setup.bundles.emplace(p, make_phase_bundle(p, models, weights, catalog[p], &setup.warnings));
  }

  PhaseMatrices matrices;
  ChainRun run = predict_with(setup, config_, narrative, &matrices);
  rec.write(out_dir / "predictions.json", pretty(run.to_json()));
  for (const auto& [p, by_scorer] : matrices) {
    for (const auto& [scorer, m] : by_scorer) {
      rec.write(out_dir / "matrices" / std::string(phase_name(p)) / (scorer + ".jsonl"), write_probability_matrix(m, p));
    }
  }
  for (const auto& w : setup.warnings) rec.warn(w);
  log("[predict] " + std::to_string(run.segments.size()) + " segments, " + std::to_string(run.predictions.size()) +
      " predictions");
  return rec.finish();
}

RunManifest Pipeline::chain(const fs::path& run_dir) {
  require_upstream(config_, "chain");
  Recorder rec(config_, "chain");
  EmbeddingProvider embedder = load_embedder(config_, [&](const fs::path& p) { return rec.read_input(p); });
  ChainRun run = ChainRun::from_json(json::parse(rec.read_input(run_dir / "predictions.json")));
  run.options.tau = config_.tau;
  run.options.max_paths = config_.max_paths;
  build_chain(run, embedder);
  write_chain_outputs(rec, run_dir, render_chain(run));
  log("[chain] " + std::to_string(run.graph.nodes.size()) + " nodes, " + std::to_string(run.graph.edges.size()) +
      " edges, " + std::to_string(run.paths.size()) + " paths");
  return rec.finish();
}

RunManifest Pipeline::narrative(std::string_view text, const fs::path& out_dir) {
  Recorder rec(config_, "narrative");
  rec.manifest().inputs["<narrative>"] = sha256_hex(text);
  const Reader read = [&](const fs::path& p) { return rec.read_input(p); };
  read(config_.bundle);
  PredictionSetup setup;
  setup.anchors = parse_anchors(read(config_.anchors));
  std::optional<EmbeddingTable> table;
  if (!config_.embedding_table.empty()) {
    std::string bytes = read(config_.embedding_table);
    setup.artifacts[rec.key(config_.embedding_table)] = sha256_hex(bytes);
    table = parse_embedding_table(bytes, config_.embedding_table.string());
  }
  IngestResult ingest = run_ingest(config_, table ? &*table : nullptr);
  setup.artifacts["tfidf.json"] = sha256_hex(pretty(ingest.tfidf.to_json()));
  setup.artifacts["labels.json"] = sha256_hex(pretty(label_catalog_to_json(ingest.labels)));
  setup.embedder = make_embedder(ingest.tfidf, table ? &*table : nullptr);

  for (Phase p : kAllPhases) {
    const std::string name(phase_name(p));
    const PhaseDataset& ds = ingest.datasets[phase_slot(p)];
    if (ds.empty()) {
      setup.warnings.push_back(no_models_warning(p));
      continue;
    }
    CorpusSplit split = stratified_split(ds, config_.split, config_.split_seed);
    AugmentResult aug = killchain::augment(split.train, ingest.tfidf, config_.augment);
    if (aug.dataset.label_set.size() < 2) {
      setup.warnings.push_back(no_models_warning(p));
      continue;
    }
    PhaseModels models = train_phase(aug.dataset, split.validation, setup.embedder, config_, false);
    auto [ext_val, ext_test] = load_external(config_, p, models, split, read);
    PhaseEvaluation ev = evaluate_phase(p, models, split, setup.embedder, config_, ext_val, ext_test);
    for (const auto& [scorer, model] : models.native) {
      setup.artifacts[model_rel(p, scorer)] = sha256_hex(model_text(model));
    }
    setup.artifacts["weights/" + name + ".json"] = sha256_hex(pretty(ev.weights.to_json()));
    setup.bundles.emplace(p, make_phase_bundle(p, models, ev.weights, ingest.labels[p], &setup.warnings));
    log("[narrative] trained " + name);
  }

  ChainRun run = predict_with(setup, config_, text, nullptr);
  // The staged commands hand predictions over as JSON; take the same path.
  run = ChainRun::from_json(json::parse(pretty(run.to_json())));
  build_chain(run, setup.embedder);
  write_chain_outputs(rec, out_dir, render_chain(run));
  for (const auto& w : setup.warnings) rec.warn(w);
  log("[narrative] " + std::to_string(run.predictions.size()) + " predictions, " + std::to_string(run.paths.size()) +
      " paths");
  return rec.finish();
}

VerifyReport Pipeline::verify() const {
  VerifyReport report;
  const fs::path dir = config_.work_dir / "manifests";
  if (!fs::is_directory(dir)) {
    report.drift.push_back("no manifests under " + dir.string());
    return report;
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& file : files) {
    RunManifest m = RunManifest::from_json(json::parse(read_file(file)));
    const std::string stage = m.command == "narrative" ? "chain" : m.command;
    if (std::find(kStages.begin(), kStages.end(), stage) != kStages.end() &&
        m.config_hash != stage_fingerprint(config_, stage)) {
      report.drift.push_back(m.command + ": configuration changed since the run");
    }
    for (const auto& [rel, hash] : m.outputs) {
      ++report.checked;
      fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : config_.work_dir / rel;
      if (!fs::exists(p)) {
        report.drift.push_back(m.command + ": missing " + rel);
      } else if (sha256_hex(read_file(p)) != hash) {
        report.drift.push_back(m.command + ": hash mismatch for " + rel);
      }
    }
  }
  return report;
}

}  // namespace killchain
