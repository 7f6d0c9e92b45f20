#include "killchain/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "killchain/error.hpp"
#include "killchain/text.hpp"

namespace killchain {

double l2_norm(std::span<const double> v) noexcept {
  double sum = 0.0;
  for (double x : v) sum += x * x;
  return std::sqrt(sum);
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    fail(ErrorKind::Contract, "cosine_similarity: dimension mismatch (" +
                                  std::to_string(u.size()) + " vs " +
                                  std::to_string(v.size()) + ")");
  }
  double nu = l2_norm(u);
  double nv = l2_norm(v);
  if (nu == 0.0 || nv == 0.0) fail(ErrorKind::Degenerate, "cosine_similarity: zero-norm vector");
  double dot = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) dot += u[i] * v[i];
  return std::clamp(dot / (nu * nv), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// EmbeddingTable

EmbeddingTable::EmbeddingTable(std::size_t dim, std::string source)
    : dim_(dim), source_(std::move(source)) {
  if (dim_ == 0) fail(ErrorKind::Format, "embedding table dimension must be >= 1");
}

void EmbeddingTable::insert(std::string key, EmbeddingVector vector) {
  if (dim_ == 0) {
    if (vector.empty()) fail(ErrorKind::Format, "embedding vector for '" + key + "' is empty");
    dim_ = vector.size();
  }
  if (vector.size() != dim_) {
    fail(ErrorKind::Format, "embedding for '" + key + "' has dimension " +
                                std::to_string(vector.size()) + ", table has " +
                                std::to_string(dim_));
  }
  for (double x : vector) {
    if (!std::isfinite(x)) fail(ErrorKind::Format, "embedding for '" + key + "' has a non-finite value");
  }
  if (entries_.contains(key)) fail(ErrorKind::Format, "duplicate embedding key '" + key + "'");
  entries_.emplace(std::move(key), std::move(vector));
}

bool EmbeddingTable::contains(std::string_view key) const { return entries_.find(key) != entries_.end(); }

const EmbeddingVector& EmbeddingTable::at(std::string_view key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) fail(ErrorKind::Lookup, "no embedding for key '" + std::string(key) + "'");
  return it->second;
}

EmbeddingTable parse_embedding_table(std::string_view jsonl, std::string source) {
  EmbeddingTable table;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= jsonl.size()) {
    std::size_t end = jsonl.find('\n', pos);
    if (end == std::string_view::npos) end = jsonl.size();
    std::string_view line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == jsonl.size()) break;
      continue;
    }
    auto where = [&] { return "embedding table line " + std::to_string(line_no) + ": "; };
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::Parse, where() + e.what());
    }
    if (!obj.is_object() || !obj.contains("key") || !obj["key"].is_string() ||
        !obj.contains("vector") || !obj["vector"].is_array()) {
      fail(ErrorKind::Format, where() + "expected {\"key\": string, \"vector\": [number, ...]}");
    }
    EmbeddingVector vec;
    vec.reserve(obj["vector"].size());
    for (const auto& x : obj["vector"]) {
      if (!x.is_number()) fail(ErrorKind::Format, where() + "non-numeric vector entry");
      double v = x.get<double>();
      if (!std::isfinite(v)) fail(ErrorKind::Format, where() + "non-finite vector entry");
      vec.push_back(v);
    }
    if (table.size() > 0 && vec.size() != table.dim()) {
      fail(ErrorKind::Format, where() + "dimension " + std::to_string(vec.size()) +
                                  " does not match table dimension " + std::to_string(table.dim()));
    }
    try {
      table.insert(obj["key"].get<std::string>(), std::move(vec));
    } catch (const Error& e) {
      fail(ErrorKind::Format, where() + e.what());
    }
    if (end == jsonl.size()) break;
  }
  if (table.size() == 0) fail(ErrorKind::Format, "embedding table has no entries");
  table.set_source(std::move(source));
  return table;
}

EmbeddingTable load_embedding_table(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open embedding table " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_embedding_table(buf.str(), file.string());
}

std::string write_embedding_table(const EmbeddingTable& table) {
  std::string out;
  for (const auto& [key, vec] : table.entries()) {
    nlohmann::ordered_json line;
    line["key"] = key;
    line["vector"] = vec;
    out += line.dump();
    out.push_back('\n');
  }
  return out;
}

std::string content_key(std::string_view text) { return "sha:" + hex64(fnv1a64(text)); }

// ---------------------------------------------------------------------------
// TF-IDF

bool TfidfModel::contains(std::string_view token) const { return terms_.find(token) != terms_.end(); }

const TfidfModel::Term& TfidfModel::term(std::string_view token) const {
  auto it = terms_.find(token);
  if (it == terms_.end()) fail(ErrorKind::Lookup, "token '" + std::string(token) + "' not in vocabulary");
  return it->second;
}

EmbeddingVector TfidfModel::weigh(std::string_view text) const {
  EmbeddingVector out(dim_, 0.0);
  for (const auto& tok : tokenize(text)) {
    auto it = terms_.find(tok);
    if (it == terms_.end()) continue;
    out[it->second.slot] += it->second.idf;  // one idf per occurrence == tf * idf
  }
  return out;
}

EmbeddingVector TfidfModel::embed(std::string_view text) const {
  EmbeddingVector v = weigh(text);
  double n = l2_norm(v);
  if (n == 0.0) {
    fail(ErrorKind::Degenerate, "text has no in-vocabulary token: '" + std::string(text.substr(0, 60)) + "'");
  }
  for (double& x : v) x /= n;
  return v;
}

TfidfModel fit_tfidf(std::span<const std::string> corpus, std::size_t dim) {
  if (dim == 0) fail(ErrorKind::Config, "fit_tfidf: dim must be >= 1");
  if (corpus.empty()) fail(ErrorKind::EmptyInput, "fit_tfidf: corpus is empty");

  std::map<std::string, std::size_t, std::less<>> df;
  for (const auto& doc : corpus) {
    auto tokens = tokenize(doc);
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    for (auto& t : tokens) ++df[t];
  }
  if (df.empty()) fail(ErrorKind::EmptyInput, "fit_tfidf: corpus contains no tokens");

  std::vector<std::pair<std::string, std::size_t>> ranked(df.begin(), df.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  TfidfModel model;
  model.dim_ = dim;
  model.corpus_size_ = corpus.size();
  const double n = static_cast<double>(corpus.size());
  for (std::size_t rank = 0; rank < ranked.size(); ++rank) {
    const auto& [token, count] = ranked[rank];
    std::size_t slot = rank < dim ? rank : static_cast<std::size_t>(fnv1a64(token) % dim);
    double idf = std::log((1.0 + n) / (1.0 + static_cast<double>(count))) + 1.0;
    model.terms_.emplace(token, TfidfModel::Term{slot, count, idf});
  }
  return model;
}

nlohmann::ordered_json TfidfModel::to_json() const {
  nlohmann::ordered_json doc;
  doc["format"] = "killchain.tfidf/1";
  doc["dim"] = dim_;
  doc["corpus_size"] = corpus_size_;
  auto& terms = doc["terms"] = nlohmann::ordered_json::array();
  for (const auto& [token, t] : terms_) {
    terms.push_back({token, t.slot, t.df, t.idf});
  }
  return doc;
}

TfidfModel TfidfModel::from_json(const nlohmann::json& doc) {
  if (doc.value("format", "") != "killchain.tfidf/1") {
    fail(ErrorKind::Format, "not a killchain.tfidf/1 document");
  }
  TfidfModel model;
  model.dim_ = doc.at("dim").get<std::size_t>();
  model.corpus_size_ = doc.at("corpus_size").get<std::size_t>();
  for (const auto& row : doc.at("terms")) {
    Term t{row.at(1).get<std::size_t>(), row.at(2).get<std::size_t>(), row.at(3).get<double>()};
    if (t.slot >= model.dim_) fail(ErrorKind::Format, "tfidf term slot out of range");
    model.terms_.emplace(row.at(0).get<std::string>(), t);
  }
  return model;
}

// ---------------------------------------------------------------------------

EmbeddingVector embed(const EmbeddingProvider& provider, const EmbedItem& item) {
  if (const auto* table = std::get_if<EmbeddingTable>(&provider)) {
    if (!item.key.empty() && table->contains(item.key)) return table->at(item.key);
    if (!item.text.empty()) {
      std::string ck = content_key(item.text);
      if (table->contains(ck)) return table->at(ck);
    }
    fail(ErrorKind::Lookup, "no embedding for '" + (item.key.empty() ? content_key(item.text) : item.key) + "'");
  }
  const auto& tfidf = std::get<TfidfModel>(provider);
  if (item.text.empty()) fail(ErrorKind::Contract, "TF-IDF embedding requires text for '" + item.key + "'");
  return tfidf.embed(item.text);
}

EmbeddingVector embed_text(const EmbeddingProvider& provider, std::string_view text) {
  return embed(provider, EmbedItem{"", std::string(text)});
}

}  // namespace killchain
