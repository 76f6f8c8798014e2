#pragma once

#include <concepts>
#include <cstddef>
#include <span>

#include "ctrlkit/tokenizer.hpp"

namespace ctrlkit {

/// Anything that maps a token sequence to a (positions x vocab) logits
/// matrix where row i scores the token after ids[i]. Checkpoints satisfy it;
/// tests plug in analytic models (uniform, oracle) through the same surface.
template <class M>
concept LanguageModel = requires(const M& m, std::span<const TokenId> ids) {
  { m.vocab_size() } -> std::convertible_to<std::size_t>;
  { m.context_size() } -> std::convertible_to<std::size_t>;
  { m.logits(ids).rows() } -> std::convertible_to<std::size_t>;
  { m.logits(ids).row(0) };
};

}  // namespace ctrlkit
