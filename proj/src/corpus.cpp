#include "killchain/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

#include "killchain/error.hpp"

namespace killchain {

namespace {

std::string read_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

bool flag(const nlohmann::json& obj, const char* key) {
  auto it = obj.find(key);
  return it != obj.end() && it->is_boolean() && it->get<bool>();
}

}  // namespace

bool is_valid_technique_id(std::string_view id) noexcept {
  static const std::regex kPattern(R"(T\d{4}(\.\d{3})?)");
  return std::regex_match(id.begin(), id.end(), kPattern);
}

std::string parent_technique_id(std::string_view id) {
  auto dot = id.find('.');
  return std::string(dot == std::string_view::npos ? id : id.substr(0, dot));
}

BundleParse parse_attack_bundle(std::string_view document) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(document);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Parse, "malformed bundle JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("objects") || !doc["objects"].is_array()) {
    fail(ErrorKind::Format, "bundle must be a JSON object with an 'objects' array");
  }

  BundleParse out;
  auto& warn = out.warnings;
  std::set<std::string> seen;
  std::size_t index = 0;
  for (const auto& obj : doc["objects"]) {
    ++index;
    if (!obj.is_object() || obj.value("type", "") != "attack-pattern") continue;
    std::string stix_id = obj.value("id", "object #" + std::to_string(index));
    if (flag(obj, "revoked")) {
      ++warn.skipped_revoked;
      continue;
    }
    if (flag(obj, "x_mitre_deprecated")) {
      ++warn.skipped_deprecated;
      continue;
    }
    std::string external_id;
    if (auto refs = obj.find("external_references"); refs != obj.end() && refs->is_array()) {
      for (const auto& ref : *refs) {
        if (ref.is_object() && ref.value("source_name", "") == "mitre-attack" &&
            ref.contains("external_id") && ref["external_id"].is_string()) {
          external_id = ref["external_id"].get<std::string>();
          break;
        }
      }
    }
    if (external_id.empty()) {
      ++warn.skipped_missing_reference;
      warn.messages.push_back(stix_id + ": no mitre-attack external reference");
      continue;
    }
    if (!is_valid_technique_id(external_id)) {
      ++warn.skipped_bad_id;
      warn.messages.push_back(stix_id + ": malformed technique id '" + external_id + "'");
      continue;
    }
    if (!seen.insert(external_id).second) {
      ++warn.skipped_duplicate_id;
      warn.messages.push_back(stix_id + ": duplicate technique id " + external_id);
      continue;
    }
    Technique t;
    t.technique_id = external_id;
    t.name = obj.value("name", "");
    t.description = obj.value("description", "");
    t.combined_description = clean_text(t.name + ". " + t.description);
    if (t.combined_description.empty()) {
      ++warn.skipped_empty_text;
      warn.messages.push_back(external_id + ": empty description after preprocessing");
      continue;
    }
    out.techniques.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------

PhaseDataset PhaseDataset::from_samples(Phase phase, std::vector<LabeledSample> samples) {
  PhaseDataset ds;
  ds.phase = phase;
  std::set<std::string> labels;
  for (const auto& s : samples) {
    if (s.phase != phase) {
      fail(ErrorKind::Contract, "sample " + s.technique_id + " is in phase " +
                                    std::string(phase_name(s.phase)) + ", dataset is " +
                                    std::string(phase_name(phase)));
    }
    labels.insert(s.label);
  }
  ds.samples = std::move(samples);
  ds.label_set.assign(labels.begin(), labels.end());
  return ds;
}

std::map<std::string, std::size_t> PhaseDataset::label_counts() const {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : samples) ++counts[s.label];
  return counts;
}

PhaseAnchors parse_anchors(std::string_view json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Parse, "anchor file: malformed JSON at byte " + std::to_string(e.byte));
  }
  if (!doc.is_object()) fail(ErrorKind::Format, "anchor file must be a JSON object");
  PhaseAnchors anchors;
  for (const auto& [key, value] : doc.items()) {
    Phase p = parse_phase(key);
    if (!value.is_string()) fail(ErrorKind::Format, "anchor for " + key + " must be a string");
    std::string text = clean_text(value.get<std::string>());
    if (text.empty()) fail(ErrorKind::Format, "anchor for " + key + " is empty");
    anchors[phase_slot(p)] = std::move(text);
  }
  for (Phase p : kAllPhases) {
    if (anchors[phase_slot(p)].empty()) {
      fail(ErrorKind::Format, "anchor file is missing phase " + std::string(phase_name(p)));
    }
  }
  return anchors;
}

PhaseAnchors load_anchors(const std::filesystem::path& file) { return parse_anchors(read_file(file)); }

std::vector<PhaseScore> rank_phases(const EmbeddingVector& embedding,
                                    const std::array<EmbeddingVector, kPhaseCount>& anchors) {
  std::vector<PhaseScore> scores;
  scores.reserve(kPhaseCount);
  for (Phase p : kAllPhases) scores.push_back({p, cosine_similarity(embedding, anchors[phase_slot(p)])});
  std::stable_sort(scores.begin(), scores.end(),
                   [](const PhaseScore& a, const PhaseScore& b) { return a.similarity > b.similarity; });
  return scores;
}

std::array<EmbeddingVector, kPhaseCount> embed_anchors(const EmbeddingProvider& embedder,
                                                       const PhaseAnchors& anchors) {
  std::array<EmbeddingVector, kPhaseCount> out;
  for (Phase p : kAllPhases) {
    const auto& text = anchors[phase_slot(p)];
    if (text.empty()) fail(ErrorKind::Contract, "anchor for " + std::string(phase_name(p)) + " is empty");
    try {
      out[phase_slot(p)] = embed(embedder, EmbedItem{"anchor:" + std::string(phase_name(p)), text});
    } catch (const Error& e) {
      fail(e.kind(), "anchor " + std::string(phase_name(p)) + ": " + e.what());
    }
    if (l2_norm(out[phase_slot(p)]) == 0.0) {
      fail(ErrorKind::Degenerate, "anchor " + std::string(phase_name(p)) + " has a zero-norm embedding");
    }
  }
  return out;
}

std::vector<LabeledSample> assign_phases(const std::vector<Technique>& techniques,
                                         const EmbeddingProvider& embedder,
                                         const PhaseAnchors& anchors,
                                         const LabelingOptions& options) {
  auto anchor_vecs = embed_anchors(embedder, anchors);

  std::map<std::string, std::string> names;
  for (const auto& t : techniques) names.emplace(t.technique_id, t.name);

  std::vector<LabeledSample> out;
  out.reserve(techniques.size());
  for (const auto& t : techniques) {
    EmbeddingVector v;
    std::vector<PhaseScore> ranked;
    try {
      v = embed(embedder, EmbedItem{t.technique_id, t.combined_description});
      ranked = rank_phases(v, anchor_vecs);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Degenerate) {
        fail(ErrorKind::Degenerate, "technique " + t.technique_id + " has a degenerate embedding: " + e.what());
      }
      throw;
    }
    LabeledSample s;
    s.technique_id = t.technique_id;
    s.text = t.combined_description;
    s.label = t.name;
    if (options.collapse_subtechniques) {
      auto parent = names.find(parent_technique_id(t.technique_id));
      if (parent != names.end()) s.label = parent->second;
    }
    s.phase = ranked.front().phase;
    out.push_back(std::move(s));
  }
  return out;
}

std::array<PhaseDataset, kPhaseCount> split_phase_datasets(const std::vector<LabeledSample>& samples) {
  std::array<std::vector<LabeledSample>, kPhaseCount> buckets;
  for (const auto& s : samples) buckets[phase_slot(s.phase)].push_back(s);
  std::array<PhaseDataset, kPhaseCount> out;
  for (Phase p : kAllPhases) out[phase_slot(p)] = PhaseDataset::from_samples(p, std::move(buckets[phase_slot(p)]));
  return out;
}

// ---------------------------------------------------------------------------

LabelAllocation allocate_label(std::size_t count, const SplitRatios& ratios) {
  LabelAllocation a;
  if (count == 0) return a;
  if (count == 1) {
    a.train = 1;
    return a;
  }
  double c = static_cast<double>(count);
  a.train = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratios.train * c)));
  a.train = std::min(a.train, count);
  a.test = static_cast<std::size_t>(std::llround(ratios.test * c));
  a.test = std::min(a.test, count - a.train);
  a.validation = count - a.train - a.test;
  return a;
}

CorpusSplit stratified_split(const PhaseDataset& dataset, const SplitRatios& ratios, std::uint64_t seed) {
  if (dataset.empty()) {
    fail(ErrorKind::EmptyInput, "cannot split empty dataset for phase " + std::string(phase_name(dataset.phase)));
  }
  for (double r : {ratios.train, ratios.validation, ratios.test}) {
    if (!(r >= 0.0 && r <= 1.0)) fail(ErrorKind::Config, "split ratios must lie in [0, 1]");
  }
  if (std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    fail(ErrorKind::Config, "split ratios must sum to 1");
  }

  std::map<std::string, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) by_label[dataset.samples[i].label].push_back(i);

  // 0 = train, 1 = validation, 2 = test
  std::vector<int> destination(dataset.samples.size(), 0);
  CorpusSplit split;
  split.ratios = ratios;
  split.seed = seed;
  for (auto& [label, members] : by_label) {
    LabelAllocation a = allocate_label(members.size(), ratios);
    split.allocation[label] = a;
    if (members.size() == 1) split.singleton_labels.push_back(label);
    Rng rng(derive_seed(seed, fnv1a64(label)));
    rng.shuffle(members);
    for (std::size_t k = 0; k < members.size(); ++k) {
      destination[members[k]] = k < a.train ? 0 : (k < a.train + a.validation ? 1 : 2);
    }
  }

  std::array<std::vector<LabeledSample>, 3> parts;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    parts[static_cast<std::size_t>(destination[i])].push_back(dataset.samples[i]);
  }
  split.train = PhaseDataset::from_samples(dataset.phase, std::move(parts[0]));
  split.validation = PhaseDataset::from_samples(dataset.phase, std::move(parts[1]));
  split.test = PhaseDataset::from_samples(dataset.phase, std::move(parts[2]));
  return split;
}

// ---------------------------------------------------------------------------

void AugmentConfig::validate() const {
  if (!(tfidf_drop_fraction >= 0.0 && tfidf_drop_fraction < 1.0)) {
    fail(ErrorKind::Config, "augment: tfidf_drop_fraction must lie in [0, 1)");
  }
  if (!(reorder_probability >= 0.0 && reorder_probability <= 1.0)) {
    fail(ErrorKind::Config, "augment: reorder_probability must lie in [0, 1]");
  }
}

std::vector<std::string> make_variant(const std::vector<std::string>& tokens, const TfidfModel& tfidf,
                                      double drop_fraction, double reorder_probability, Rng& rng) {
  std::size_t n = tokens.size();
  auto drop = static_cast<std::size_t>(std::floor(drop_fraction * static_cast<double>(n)));

  std::vector<std::string> kept;
  if (drop == 0) {
    kept = tokens;
  } else {
    std::map<std::string_view, std::size_t> tf;
    for (const auto& t : tokens) ++tf[t];
    std::vector<double> weight(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (tfidf.contains(tokens[i])) weight[i] = static_cast<double>(tf[tokens[i]]) * tfidf.idf(tokens[i]);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return weight[a] < weight[b]; });
    std::vector<bool> removed(n, false);
    for (std::size_t k = 0; k < drop && k < n; ++k) removed[order[k]] = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (!removed[i]) kept.push_back(tokens[i]);
    }
  }

  if (reorder_probability > 0.0) {
    for (std::size_t i = 0; i + 1 < kept.size(); ++i) {
      if (rng.uniform() < reorder_probability) std::swap(kept[i], kept[i + 1]);
    }
  }
  return kept;
}

AugmentResult augment(const PhaseDataset& dataset, const TfidfModel& tfidf, const AugmentConfig& config) {
  config.validate();
  AugmentResult result;
  std::vector<LabeledSample> out = dataset.samples;
  if (config.duplication_factor == 0) {
    result.dataset = PhaseDataset::from_samples(dataset.phase, std::move(out));
    return result;
  }

  auto counts = dataset.label_counts();
  struct Variant {
    std::string technique_id;
    std::size_t position;
    std::size_t index;
    LabeledSample sample;
  };
  std::vector<Variant> variants;
  for (std::size_t pos = 0; pos < dataset.samples.size(); ++pos) {
    const auto& s = dataset.samples[pos];
    if (counts[s.label] >= config.minority_threshold) continue;
    auto tokens = tokenize(s.text);
    for (std::size_t v = 1; v <= config.duplication_factor; ++v) {
      Rng rng(derive_seed(derive_seed(config.seed, fnv1a64(s.technique_id)), pos * 1000003ULL + v));
      auto kept = make_variant(tokens, tfidf, config.tfidf_drop_fraction, config.reorder_probability, rng);
      if (kept.empty()) {
        ++result.discarded_empty;
        continue;
      }
      LabeledSample copy = s;
      copy.text = join_tokens(kept);
      variants.push_back({s.technique_id, pos, v, std::move(copy)});
    }
  }
  std::stable_sort(variants.begin(), variants.end(), [](const Variant& a, const Variant& b) {
    return std::tie(a.technique_id, a.position, a.index) < std::tie(b.technique_id, b.position, b.index);
  });
  for (auto& v : variants) out.push_back(std::move(v.sample));
  result.emitted = variants.size();
  result.dataset = PhaseDataset::from_samples(dataset.phase, std::move(out));
  return result;
}

// ---------------------------------------------------------------------------

nlohmann::ordered_json sample_to_json(const LabeledSample& sample) {
  nlohmann::ordered_json obj;
  obj["technique_id"] = sample.technique_id;
  obj["label"] = sample.label;
  obj["phase"] = std::string(phase_name(sample.phase));
  obj["text"] = sample.text;
  return obj;
}

LabeledSample sample_from_json(const nlohmann::json& obj) {
  for (const char* key : {"technique_id", "label", "phase", "text"}) {
    if (!obj.contains(key) || !obj[key].is_string()) {
      fail(ErrorKind::Format, std::string("sample is missing string field '") + key + "'");
    }
  }
  LabeledSample s;
  s.technique_id = obj["technique_id"].get<std::string>();
  s.label = obj["label"].get<std::string>();
  s.phase = parse_phase(obj["phase"].get<std::string>());
  s.text = obj["text"].get<std::string>();
  if (s.text.empty()) fail(ErrorKind::Format, "sample " + s.technique_id + " has empty text");
  return s;
}

std::string write_samples_jsonl(const std::vector<LabeledSample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    out += sample_to_json(s).dump();
    out.push_back('\n');
  }
  return out;
}

std::vector<LabeledSample> parse_samples_jsonl(std::string_view text) {
  std::vector<LabeledSample> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::Parse, "dataset line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      fail(e.kind(), "dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

nlohmann::ordered_json split_manifest(const CorpusSplit& split) {
  nlohmann::ordered_json doc;
  doc["phase"] = std::string(phase_name(split.train.phase));
  doc["seed"] = split.seed;
  doc["ratios"] = {split.ratios.train, split.ratios.validation, split.ratios.test};
  auto& labels = doc["labels"] = nlohmann::ordered_json::object();
  for (const auto& [label, a] : split.allocation) {
    labels[label] = {{"train", a.train}, {"validation", a.validation}, {"test", a.test}};
  }
  doc["singleton_labels"] = split.singleton_labels;
  doc["sizes"] = {{"train", split.train.size()},
                  {"validation", split.validation.size()},
                  {"test", split.test.size()}};
  return doc;
}

}  // namespace killchain
