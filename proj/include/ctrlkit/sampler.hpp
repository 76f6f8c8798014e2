#pragma once

// Autoregressive decoding: repetition penalty, temperature and nucleus
// truncation, stopping at ending control codes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctrlkit/language_model.hpp"
#include "ctrlkit/tensor.hpp"
#include "ctrlkit/tokenizer.hpp"

namespace ctrlkit {

struct SamplingParams {
  double temperature = 1.0;  // 0 selects greedy decoding
  double top_p = 1.0;
  double repetition_penalty = 1.0;
  std::size_t max_new_tokens = 256;
  std::uint64_t rng_seed = 0;
  std::optional<TokenId> block_first_ecc;

  void validate() const {
    if (!(temperature >= 0.0 && temperature <= 1.0)) throw std::invalid_argument("temperature must be in [0,1]");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("nucleus p must be in (0,1]");
    if (!(repetition_penalty >= 1.0 && repetition_penalty <= 2.0))
      throw std::invalid_argument("repetition penalty must be in [1,2]");
  }

  bool greedy() const { return temperature == 0.0; }
};

enum class Preset { M1, M2, M3 };

/// Presets picked by the generation grid search; temperature stays 1.
inline SamplingParams preset_params(Preset p) {
  SamplingParams sp;
  switch (p) {
    case Preset::M1: sp.repetition_penalty = 1.6; sp.top_p = 0.8; break;
    case Preset::M2: sp.repetition_penalty = 1.4; sp.top_p = 0.9; break;
    case Preset::M3: sp.repetition_penalty = 1.0; sp.top_p = 0.9; break;
  }
  return sp;
}

inline std::optional<Preset> parse_preset(std::string_view name) {
  if (name == "M1") return Preset::M1;
  if (name == "M2") return Preset::M2;
  if (name == "M3") return Preset::M3;
  return std::nullopt;
}

/// Name of the preset whose (r, p) equals the params at T = 1, if any.
inline std::optional<std::string> preset_name(const SamplingParams& sp) {
  for (auto [p, name] : {std::pair{Preset::M1, "M1"}, {Preset::M2, "M2"}, {Preset::M3, "M3"}}) {
    auto q = preset_params(p);
    if (std::abs(sp.temperature - 1.0) < 1e-12 && std::abs(sp.top_p - q.top_p) < 1e-12 &&
        std::abs(sp.repetition_penalty - q.repetition_penalty) < 1e-12)
      return std::string(name);
  }
  return std::nullopt;
}

enum class StopReason { ecc_reached, max_length };

struct GenerationResult {
  std::vector<TokenId> prompt_ids;
  std::vector<TokenId> generated_ids;
  StopReason stop_reason = StopReason::max_length;
  std::optional<TokenId> stop_ecc;
};

/// Repetition penalty on context tokens (positive logits divided by r,
/// negative multiplied by r), then temperature.
template <class Range>
std::vector<double> penalized_logits(const Range& logits, const std::set<TokenId>& context, double r,
                                     double temperature) {
  std::vector<double> x(logits.begin(), logits.end());
  if (r != 1.0) {
    for (TokenId id : context) {
      auto i = static_cast<std::size_t>(id);
      if (i >= x.size()) continue;
      x[i] = x[i] > 0 ? x[i] / r : x[i] * r;
    }
  }
  if (temperature > 0 && temperature != 1.0)
    for (auto& v : x) v /= temperature;
  return x;
}

/// Keeps the smallest set of most probable tokens whose mass reaches p (the
/// top token always survives) and renormalizes. Ties sort by token id.
inline std::vector<double> nucleus(std::vector<double> probs, double p) {
  if (p >= 1.0) return probs;
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  double mass = 0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[order[keep]];
    ++keep;
    if (mass >= p - 1e-12) break;
  }
  std::vector<double> out(probs.size(), 0.0);
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / mass;
  return out;
}

/// penalty -> temperature -> softmax -> nucleus. Requires temperature > 0.
template <class Range>
std::vector<double> adjust_distribution(const Range& logits, const std::set<TokenId>& context,
                                        const SamplingParams& sp) {
  if (!(sp.temperature > 0)) throw std::invalid_argument("adjust_distribution: temperature must be positive");
  auto x = penalized_logits(logits, context, sp.repetition_penalty, sp.temperature);
  return nucleus(softmax(x), sp.top_p);
}

inline std::size_t argmax(std::span<const double> x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

/// Inverse-CDF draw from `probs` with u in [0,1).
inline std::size_t sample_index(const std::vector<double>& probs, double u) {
  double acc = 0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0) continue;
    last_nonzero = i;
    acc += probs[i];
    if (u < acc) return i;
  }
  return last_nonzero;
}

/// Core decoding loop over token ids. The context slides (keeping the most
/// recent tokens) once it exceeds the model's window; the repetition set is
/// every id in the current context. Decoding stops after an ECC id of `vocab`
/// or after max_new_tokens.
template <LanguageModel M>
GenerationResult generate_ids(const M& model, const Vocab& vocab, std::vector<TokenId> prompt_ids,
                              const SamplingParams& sp) {
  sp.validate();
  const std::size_t n = model.context_size();
  if (prompt_ids.empty()) throw std::invalid_argument("generate: empty prompt");
  if (prompt_ids.size() > n)
    throw std::invalid_argument("generate: prompt of " + std::to_string(prompt_ids.size()) +
                                " tokens exceeds context " + std::to_string(n));
  GenerationResult res;
  res.prompt_ids = prompt_ids;
  NormalStream rng(sp.rng_seed);
  std::vector<TokenId> ctx = std::move(prompt_ids);
  while (res.generated_ids.size() < sp.max_new_tokens) {
    if (ctx.size() >= n) ctx.erase(ctx.begin(), ctx.begin() + static_cast<std::ptrdiff_t>(ctx.size() - (n - 1)));
    auto logits = model.logits(std::span<const TokenId>(ctx));
    auto last = logits.row(logits.rows() - 1);
    std::set<TokenId> seen(ctx.begin(), ctx.end());
    TokenId next;
    if (sp.greedy()) {
      auto x = penalized_logits(last, seen, sp.repetition_penalty, 0.0);
      if (res.generated_ids.empty() && sp.block_first_ecc)
        x[static_cast<std::size_t>(*sp.block_first_ecc)] = -std::numeric_limits<double>::infinity();
      next = static_cast<TokenId>(argmax(x));
    } else {
      auto probs = adjust_distribution(last, seen, sp);
      if (res.generated_ids.empty() && sp.block_first_ecc) {
        probs[static_cast<std::size_t>(*sp.block_first_ecc)] = 0;
        double s = std::accumulate(probs.begin(), probs.end(), 0.0);
        if (s <= 0) throw std::runtime_error("generate: no probability mass left after blocking the ECC");
        for (auto& p : probs) p /= s;
      }
      next = static_cast<TokenId>(sample_index(probs, rng.uniform()));
    }
    res.generated_ids.push_back(next);
    ctx.push_back(next);
    if (vocab.is_ecc(next)) {
      res.stop_reason = StopReason::ecc_reached;
      res.stop_ecc = next;
      break;
    }
  }
  return res;
}

/// Generates a continuation of `prompt` under the OCC of `category`.
template <LanguageModel M>
GenerationResult generate(const M& model, const Vocab& vocab, std::string_view prompt, const std::string& category,
                          const SamplingParams& sp) {
  std::vector<TokenId> ids{vocab.control(category).occ};
  auto body = encode(vocab, prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  return generate_ids(model, vocab, std::move(ids), sp);
}

/// Argmax decoding for task answers: the task ECC may not be the first
/// generated token, and decoding stops at that ECC.
template <LanguageModel M>
GenerationResult greedy_answer(const M& model, std::vector<TokenId> prompt_ids, TokenId task_ecc,
                               std::size_t max_new_tokens) {
  const std::size_t n = model.context_size();
  if (prompt_ids.empty() || prompt_ids.size() > n) throw std::invalid_argument("greedy_answer: prompt does not fit");
  GenerationResult res;
  res.prompt_ids = prompt_ids;
  std::vector<TokenId> ctx = std::move(prompt_ids);
  while (res.generated_ids.size() < max_new_tokens) {
    if (ctx.size() >= n) ctx.erase(ctx.begin(), ctx.begin() + static_cast<std::ptrdiff_t>(ctx.size() - (n - 1)));
    auto logits = model.logits(std::span<const TokenId>(ctx));
    auto last = logits.row(logits.rows() - 1);
    std::vector<double> x(last.begin(), last.end());
    if (res.generated_ids.empty()) x[static_cast<std::size_t>(task_ecc)] = -std::numeric_limits<double>::infinity();
    auto next = static_cast<TokenId>(argmax(x));
    res.generated_ids.push_back(next);
    ctx.push_back(next);
    if (next == task_ecc) {
      res.stop_reason = StopReason::ecc_reached;
      res.stop_ecc = next;
      break;
    }
  }
  return res;
}

inline const char* stop_reason_name(StopReason r) {
  return r == StopReason::ecc_reached ? "ecc_reached" : "max_length";
}

}  // namespace ctrlkit
