#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace killchain {

using EmbeddingVector = std::vector<double>;

/// (u.v) / (|u| |v|), clamped to [-1, 1].
/// Throws Contract on dimension mismatch and Degenerate on a zero-norm input.
double cosine_similarity(std::span<const double> u, std::span<const double> v);

double l2_norm(std::span<const double> v) noexcept;

/// Precomputed vectors keyed by technique id or content key.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::size_t dim, std::string source);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::string& source() const noexcept { return source_; }
  void set_source(std::string source) { source_ = std::move(source); }

  /// Rejects duplicate keys, wrong dimensions and non-finite entries.
  void insert(std::string key, EmbeddingVector vector);

  bool contains(std::string_view key) const;
  const EmbeddingVector& at(std::string_view key) const;

  const std::map<std::string, EmbeddingVector, std::less<>>& entries() const noexcept {
    return entries_;
  }

 private:
  std::size_t dim_ = 0;
  std::string source_;
  std::map<std::string, EmbeddingVector, std::less<>> entries_;
};

/// JSON Lines, one `{"key": ..., "vector": [...]}` per line. Blank lines are
/// skipped. Errors carry the 1-based line number.
EmbeddingTable parse_embedding_table(std::string_view jsonl, std::string source = "");
EmbeddingTable load_embedding_table(const std::filesystem::path& file);
std::string write_embedding_table(const EmbeddingTable& table);

/// Key used for table lookups of texts that have no technique id, such as
/// augmented variants.
std::string content_key(std::string_view text);

/// TF-IDF over whitespace tokens with smooth idf, ln((1 + N) / (1 + df)) + 1.
///
/// Output slots: tokens are ranked by descending document frequency, then
/// lexicographically. The first `dim` ranked tokens own one slot each; any
/// token past capacity is folded into slot fnv1a64(token) % dim, so
/// colliding tokens add up in the same slot.
class TfidfModel {
 public:
  struct Term {
    std::size_t slot;
    std::size_t df;
    double idf;
  };

  TfidfModel() = default;

  std::size_t dim() const noexcept { return dim_; }
  std::size_t corpus_size() const noexcept { return corpus_size_; }
  std::size_t vocabulary_size() const noexcept { return terms_.size(); }

  bool contains(std::string_view token) const;
  const Term& term(std::string_view token) const;
  double idf(std::string_view token) const { return term(token).idf; }

  /// Raw tf·idf vector (not normalized); out-of-vocabulary tokens ignored.
  EmbeddingVector weigh(std::string_view text) const;

  /// L2-normalized tf·idf. Throws Degenerate when no token is in vocabulary.
  EmbeddingVector embed(std::string_view text) const;

  nlohmann::ordered_json to_json() const;
  static TfidfModel from_json(const nlohmann::json& doc);

  friend TfidfModel fit_tfidf(std::span<const std::string> corpus, std::size_t dim);

 private:
  std::size_t dim_ = 0;
  std::size_t corpus_size_ = 0;
  std::map<std::string, Term, std::less<>> terms_;
};

/// Fits on preprocessed documents. Throws EmptyInput if the corpus is empty
/// or contains no tokens at all, Config if dim is 0.
TfidfModel fit_tfidf(std::span<const std::string> corpus, std::size_t dim);

/// Either a table lookup or a text embedder.
using EmbeddingProvider = std::variant<EmbeddingTable, TfidfModel>;

/// An embedding request: table providers use `key`, falling back to
/// content_key(text); TF-IDF providers use `text`.
struct EmbedItem {
  std::string key;
  std::string text;
};

EmbeddingVector embed(const EmbeddingProvider& provider, const EmbedItem& item);
EmbeddingVector embed_text(const EmbeddingProvider& provider, std::string_view text);

}  // namespace killchain
