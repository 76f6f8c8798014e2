#pragma once

// Analytic language models and small fixtures shared by the test binaries.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctrlkit/ctrlkit.hpp"

namespace ctrlkit::testing {

/// Equal logits everywhere: perplexity equals the vocabulary size.
struct UniformModel {
  std::size_t vocab = 50;
  std::size_t context = 16;
  std::size_t vocab_size() const { return vocab; }
  std::size_t context_size() const { return context; }
  Matrix<double> logits(std::span<const TokenId> ids) const { return Matrix<double>(ids.size(), vocab, 0.0); }
};

/// Deterministic successor model: after token t it is certain of (t + 1) mod V.
struct SuccessorModel {
  std::size_t vocab = 50;
  std::size_t context = 16;
  std::size_t vocab_size() const { return vocab; }
  std::size_t context_size() const { return context; }
  Matrix<double> logits(std::span<const TokenId> ids) const {
    Matrix<double> m(ids.size(), vocab, -1e4);
    for (std::size_t i = 0; i < ids.size(); ++i) m(i, static_cast<std::size_t>(ids[i] + 1) % vocab) = 0.0;
    return m;
  }
};

/// Fixed logits for the next token, whatever the context.
struct ConstantModel {
  std::vector<double> row;
  std::size_t context = 16;
  std::size_t vocab_size() const { return row.size(); }
  std::size_t context_size() const { return context; }
  Matrix<double> logits(std::span<const TokenId> ids) const {
    Matrix<double> m(ids.size(), row.size());
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < row.size(); ++j) m(i, j) = row[j];
    return m;
  }
};

inline CategoryTable two_genre_table() {
  CategoryTable t;
  t.add("news", true);
  t.add("wiki", true);
  return t;
}

inline Document make_doc(std::int64_t id, std::string cat, std::string text) {
  Document d;
  d.id = id;
  d.category = std::move(cat);
  d.text = std::move(text);
  return d;
}

/// Random text over a small word list, with occasional newlines.
inline std::string random_text(std::mt19937_64& rng, const std::vector<std::string>& words, std::size_t min_words,
                               std::size_t max_words) {
  std::uniform_int_distribution<std::size_t> len(min_words, max_words), pick(0, words.size() - 1);
  std::uniform_int_distribution<int> sep(0, 9);
  std::string s;
  const std::size_t n = len(rng);
  for (std::size_t i = 0; i < n; ++i) {
    if (i) s += sep(rng) == 0 ? "\n" : " ";
    s += words[pick(rng)];
  }
  return s;
}

inline const std::vector<std::string> kSwedishWords = {
    "och", "att", "det", "är", "som", "en", "på", "för", "med", "av", "till", "den", "har", "de", "inte",
    "om", "ett", "man", "men", "så", "kan", "vi", "från", "när", "också", "år", "Stockholm", "nyheter",
    "regeringen", "säger", "över", "efter", "Göteborg", "världen", "människor", "måste", "2021", "är,", "ö.", "ÅÄÖ"};

}  // namespace ctrlkit::testing
