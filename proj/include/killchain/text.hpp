#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace killchain {

/// Lowercases, maps every character outside [a-z0-9] and whitespace to a
/// space, collapses whitespace runs and trims. Idempotent.
/// Throws ErrorKind::EmptyInput when nothing survives cleaning.
std::string preprocess(std::string_view raw);

/// Same cleaning as preprocess() but returns an empty string instead of
/// throwing.
std::string clean_text(std::string_view raw);

/// Whitespace tokenization (the input is expected to be preprocessed).
std::vector<std::string> tokenize(std::string_view text);

std::string join_tokens(const std::vector<std::string>& tokens);

/// 64-bit FNV-1a. Used for hash folding of TF-IDF vocabulary overflow,
/// content keys and seed derivation; the constants are fixed forever.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

std::string hex64(std::uint64_t value);

/// Mixes a base seed with a stream discriminator (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

/// Portable uniform draws on top of mt19937_64. The standard distributions
/// are implementation-defined, so the sequences they produce differ between
/// standard libraries; these do not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform integer in [0, bound) by rejection sampling. bound > 0.
  std::uint64_t below(std::uint64_t bound);

  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace killchain
