#pragma once

// Automatic generation metrics (perplexity, sampling loops, ECC outcomes,
// self-BLEU-4, k-gram overlap) and the sampling hyper-parameter grid search.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlkit/language_model.hpp"
#include "ctrlkit/ngram_index.hpp"
#include "ctrlkit/parallel.hpp"
#include "ctrlkit/sampler.hpp"
#include "ctrlkit/text.hpp"
#include "ctrlkit/tokenizer.hpp"

namespace ctrlkit {

// ---------------------------------------------------------------- perplexity

struct PerplexityResult {
  double value = 0;
  std::size_t window = 0;
  std::size_t token_count = 0;  // number of predicted positions
};

/// exp of the mean negative log-likelihood, where token i (i >= 1) is
/// conditioned on the previous min(i, w-1) tokens. Stride 1.
template <LanguageModel M>
PerplexityResult sliding_perplexity(const M& model, std::span<const TokenId> ids, std::size_t w) {
  if (ids.size() < 2) throw std::invalid_argument("perplexity: text must encode to at least 2 tokens");
  if (w < 2 || w > model.context_size())
    throw std::invalid_argument("perplexity: window must be in [2, " + std::to_string(model.context_size()) + "]");
  const std::size_t T = ids.size();
  double nll = 0;
  const std::size_t head = std::min(T, w);
  {
    const auto logits = model.logits(ids.subspan(0, head));
    for (std::size_t i = 1; i < head; ++i) nll -= log_softmax(logits.row(i - 1))[static_cast<std::size_t>(ids[i])];
  }
  for (std::size_t i = w; i < T; ++i) {
    const auto logits = model.logits(ids.subspan(i - (w - 1), w - 1));
    nll -= log_softmax(logits.row(w - 2))[static_cast<std::size_t>(ids[i])];
  }
  PerplexityResult r;
  r.window = w;
  r.token_count = T - 1;
  r.value = std::exp(nll / static_cast<double>(T - 1));
  return r;
}

template <LanguageModel M>
PerplexityResult sliding_perplexity(const M& model, const Vocab& v, std::string_view text, std::size_t w) {
  auto ids = encode(v, text);
  return sliding_perplexity(model, std::span<const TokenId>(ids), w);
}

// ------------------------------------------------------------ sampling loops

struct Loop {
  std::vector<TokenId> phrase;
  std::size_t repeat_count = 0;
  std::size_t start = 0;

  std::size_t size() const { return phrase.size() * repeat_count; }
  bool operator==(const Loop&) const = default;
};

struct LoopReport {
  std::vector<Loop> loops;
  std::size_t numeral_excluded_count = 0;
};

/// Scans left to right. At each position the phrase length in [1, max_phrase]
/// whose contiguous repetition (at least twice) covers the most tokens is
/// taken, preferring the shorter phrase on ties; the scan then resumes after
/// the run. Runs whose phrase tokens are all numerals are counted separately.
inline LoopReport detect_loops(std::span<const TokenId> ids, const std::function<bool(TokenId)>& is_numeral,
                               std::size_t max_phrase = 5) {
  LoopReport rep;
  const std::size_t n = ids.size();
  std::size_t i = 0;
  while (i < n) {
    std::size_t best_len = 0, best_count = 0;
    for (std::size_t len = 1; len <= max_phrase && i + 2 * len <= n; ++len) {
      std::size_t count = 1;
      while (i + (count + 1) * len <= n &&
             std::equal(ids.begin() + static_cast<std::ptrdiff_t>(i), ids.begin() + static_cast<std::ptrdiff_t>(i + len),
                        ids.begin() + static_cast<std::ptrdiff_t>(i + count * len)))
        ++count;
      if (count >= 2 && count * len > best_len * best_count) {
        best_len = len;
        best_count = count;
      }
    }
    if (best_len == 0) {
      ++i;
      continue;
    }
    Loop loop{{ids.begin() + static_cast<std::ptrdiff_t>(i), ids.begin() + static_cast<std::ptrdiff_t>(i + best_len)},
              best_count, i};
    if (std::all_of(loop.phrase.begin(), loop.phrase.end(), is_numeral)) {
      ++rep.numeral_excluded_count;
    } else {
      rep.loops.push_back(std::move(loop));
    }
    i += best_len * best_count;
  }
  return rep;
}

/// Numeral test on token surfaces: only Unicode decimal digits after
/// trimming whitespace.
inline LoopReport detect_loops(std::span<const TokenId> ids, const Vocab& v, std::size_t max_phrase = 5) {
  return detect_loops(
      ids, [&v](TokenId id) { return text::is_numeral(v.token(id)); }, max_phrase);
}

// -------------------------------------------------------------- ECC outcome

enum class EccOutcomeKind { correct, wrong, none };

struct EccOutcome {
  EccOutcomeKind kind = EccOutcomeKind::none;
  std::string reached;  // category of the reached ECC, empty for none

  bool operator==(const EccOutcome&) const = default;
};

inline EccOutcome ecc_outcome(const GenerationResult& gr, const std::string& occ_category, const Vocab& v) {
  if (!v.has_category(occ_category)) throw std::invalid_argument("ecc_outcome: unregistered category " + occ_category);
  if (gr.stop_reason != StopReason::ecc_reached || !gr.stop_ecc) return {};
  auto cat = v.ecc_category(*gr.stop_ecc);
  if (!cat) throw std::invalid_argument("ecc_outcome: stop token is not an ECC");
  return {*cat == occ_category ? EccOutcomeKind::correct : EccOutcomeKind::wrong, *cat};
}

/// occ category -> (reached ECC category or "none") -> count.
using EccConfusion = std::map<std::string, std::map<std::string, std::size_t>>;

// ------------------------------------------------------------------- BLEU-4

namespace detail {

using NGramCounts = std::map<std::vector<std::string>, std::size_t>;

inline NGramCounts ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  NGramCounts c;
  for (std::size_t i = 0; i + n <= toks.size(); ++i)
    ++c[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                 toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return c;
}

}  // namespace detail

/// Sentence BLEU-4 over whitespace tokens with uniform weights and the
/// closest-reference brevity penalty. A zero clipped count for some order
/// n >= 2 is smoothed to 1/(total_n + 1); with no unigram match the score
/// is 0.
inline double sentence_bleu4(const std::vector<std::string>& candidate,
                             const std::vector<std::vector<std::string>>& references) {
  if (references.empty()) throw std::invalid_argument("bleu: no references");
  if (candidate.empty()) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    auto cand = detail::ngram_counts(candidate, n);
    std::map<std::vector<std::string>, std::size_t> max_ref;
    for (const auto& r : references)
      for (const auto& [g, c] : detail::ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    std::size_t clipped = 0, total = 0;
    for (const auto& [g, c] : cand) {
      total += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) clipped += std::min(c, it->second);
    }
    total = std::max<std::size_t>(total, 1);
    if (clipped == 0) {
      if (n == 1) return 0.0;
      log_sum += std::log(1.0 / static_cast<double>(total + 1));
    } else {
      log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
    }
  }
  const auto c = static_cast<double>(candidate.size());
  double r = 0, best_diff = std::numeric_limits<double>::infinity();
  for (const auto& ref : references) {
    const auto len = static_cast<double>(ref.size());
    const double diff = std::abs(len - c);
    if (diff < best_diff || (diff == best_diff && len < r)) {
      best_diff = diff;
      r = len;
    }
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / 4.0);
}

/// Each text scored against all other texts of the set as references.
inline std::vector<double> self_bleu4(const std::vector<std::string>& texts) {
  if (texts.size() < 2) throw std::invalid_argument("self_bleu4: need at least 2 texts");
  std::vector<std::vector<std::string>> toks;
  for (const auto& t : texts) toks.push_back(text::split_words(t));
  std::vector<double> scores;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    std::vector<std::vector<std::string>> refs;
    for (std::size_t j = 0; j < toks.size(); ++j)
      if (j != i) refs.push_back(toks[j]);
    scores.push_back(sentence_bleu4(toks[i], refs));
  }
  return scores;
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const std::size_t m = xs.size() / 2;
  return xs.size() % 2 ? xs[m] : 0.5 * (xs[m - 1] + xs[m]);
}

// -------------------------------------------------------------- grid search

struct GridCell {
  std::string category;
  double temperature = 1.0;
  double top_p = 1.0;
  double repetition_penalty = 1.0;

  auto key() const { return std::tie(category, temperature, top_p, repetition_penalty); }
  bool operator<(const GridCell& o) const { return key() < o.key(); }
  bool operator==(const GridCell& o) const { return key() == o.key(); }
};

struct GridAxes {
  std::vector<double> top_p = {0.7, 0.8, 0.9, 1.0};
  std::vector<double> temperature = {0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<double> repetition_penalty = {1.0, 1.2, 1.4, 1.6, 1.8, 2.0};
};

/// (p, r) pairs at T = 1 and (T, r) pairs at p = 1 for every category,
/// de-duplicated and sorted lexicographically.
inline std::vector<GridCell> grid_cells(const std::vector<std::string>& categories, const GridAxes& axes) {
  std::vector<GridCell> cells;
  for (const auto& c : categories) {
    for (double p : axes.top_p)
      for (double r : axes.repetition_penalty) cells.push_back({c, 1.0, p, r});
    for (double t : axes.temperature)
      for (double r : axes.repetition_penalty) cells.push_back({c, t, 1.0, r});
  }
  for (const auto& c : cells) {
    SamplingParams sp;
    sp.temperature = c.temperature;
    sp.top_p = c.top_p;
    sp.repetition_penalty = c.repetition_penalty;
    sp.validate();
  }
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  return cells;
}

struct GridText {
  std::uint64_t seed = 0;
  std::vector<TokenId> generated_ids;
  std::string text;  // decoded generation without the final ECC
  StopReason stop_reason = StopReason::max_length;
  EccOutcome outcome;
};

struct CellReport {
  GridCell cell;
  std::optional<std::string> preset;
  std::size_t ecc_correct = 0, ecc_wrong = 0, ecc_none = 0;
  std::map<std::string, std::size_t> reached;  // ECC category or "none" -> count
  double mean_loop_len = 0;  // mean of phrase_len * repeat_count over detected loops
  double mean_tokens = 0;
  double median_selfbleu4 = 0;
  std::optional<double> median_overlap13;  // over texts with >= k words
  std::vector<GridText> texts;
};

struct GridReport {
  std::vector<CellReport> cells;

  EccConfusion confusion() const {
    EccConfusion m;
    for (const auto& c : cells)
      for (const auto& [k, n] : c.reached) m[c.cell.category][k] += n;
    return m;
  }
};

/// Recomputes every aggregate of a cell from its generated texts.
inline void aggregate_cell(CellReport& rep, const Vocab& v, const NGramIndex* index) {
  rep.ecc_correct = rep.ecc_wrong = rep.ecc_none = 0;
  rep.reached.clear();
  std::vector<double> loop_sizes, overlaps;
  double tokens = 0;
  std::vector<std::string> texts;
  for (const auto& t : rep.texts) {
    switch (t.outcome.kind) {
      case EccOutcomeKind::correct: ++rep.ecc_correct; break;
      case EccOutcomeKind::wrong: ++rep.ecc_wrong; break;
      case EccOutcomeKind::none: ++rep.ecc_none; break;
    }
    ++rep.reached[t.outcome.kind == EccOutcomeKind::none ? "none" : t.outcome.reached];
    for (const auto& l : detect_loops(std::span<const TokenId>(t.generated_ids), v).loops)
      loop_sizes.push_back(static_cast<double>(l.size()));
    tokens += static_cast<double>(t.generated_ids.size());
    texts.push_back(t.text);
    if (index && text::split_words(t.text).size() >= index->k())
      overlaps.push_back(overlap({t.text}, *index, 1).overlap_percent);
  }
  double loop_sum = 0;
  for (double s : loop_sizes) loop_sum += s;
  rep.mean_loop_len = loop_sizes.empty() ? 0.0 : loop_sum / static_cast<double>(loop_sizes.size());
  rep.mean_tokens = rep.texts.empty() ? 0.0 : tokens / static_cast<double>(rep.texts.size());
  rep.median_selfbleu4 = texts.size() >= 2 ? median(self_bleu4(texts)) : std::numeric_limits<double>::quiet_NaN();
  rep.median_overlap13.reset();
  if (index) rep.median_overlap13 = median(overlaps);
}

struct GridOptions {
  std::size_t texts_per_cell = 10;
  std::size_t max_new_tokens = 256;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  const NGramIndex* index = nullptr;
};

/// Generates texts_per_cell texts per cell from the bare OCC and aggregates
/// the metrics. Text j of cell c uses rng seed `seed + c * texts_per_cell + j`.
template <LanguageModel M>
GridReport grid_search(const M& model, const Vocab& v, const std::vector<GridCell>& cells, const GridOptions& opt) {
  GridReport report;
  report.cells.resize(cells.size());
  parallel_for(cells.size(), opt.jobs, [&](std::size_t ci) {
    auto& rep = report.cells[ci];
    rep.cell = cells[ci];
    SamplingParams sp;
    sp.temperature = rep.cell.temperature;
    sp.top_p = rep.cell.top_p;
    sp.repetition_penalty = rep.cell.repetition_penalty;
    sp.max_new_tokens = opt.max_new_tokens;
    rep.preset = preset_name(sp);
    for (std::size_t j = 0; j < opt.texts_per_cell; ++j) {
      sp.rng_seed = opt.seed + ci * opt.texts_per_cell + j;
      auto gr = generate(model, v, "", rep.cell.category, sp);
      GridText t;
      t.seed = sp.rng_seed;
      t.generated_ids = gr.generated_ids;
      t.stop_reason = gr.stop_reason;
      t.outcome = ecc_outcome(gr, rep.cell.category, v);
      std::span<const TokenId> body(gr.generated_ids);
      if (gr.stop_reason == StopReason::ecc_reached) body = body.first(body.size() - 1);
      t.text = decode(v, body);
      rep.texts.push_back(std::move(t));
    }
    aggregate_cell(rep, v, opt.index);
  });
  return report;
}

inline const std::string kGridCsvHeader =
    "category,T,p,r,ecc_correct,ecc_wrong,ecc_none,mean_loop_len,mean_tokens,median_selfbleu4,median_overlap13";

inline void write_grid_csv(std::ostream& out, const GridReport& report) {
  out << kGridCsvHeader << '\n';
  for (const auto& c : report.cells) {
    out << c.cell.category << ',' << text::fixed(c.cell.temperature, 2) << ',' << text::fixed(c.cell.top_p, 2) << ','
        << text::fixed(c.cell.repetition_penalty, 2) << ',' << c.ecc_correct << ',' << c.ecc_wrong << ',' << c.ecc_none
        << ',' << text::fixed(c.mean_loop_len) << ',' << text::fixed(c.mean_tokens) << ','
        << text::fixed(c.median_selfbleu4) << ',' << (c.median_overlap13 ? text::fixed(*c.median_overlap13) : "NA")
        << '\n';
  }
}

inline std::string cell_file_name(const GridCell& c) {
  std::string cat;
  for (char ch : c.category) cat += ch == '/' ? '_' : ch;
  return cat + "__T" + text::fixed(c.temperature, 2) + "_p" + text::fixed(c.top_p, 2) + "_r" +
         text::fixed(c.repetition_penalty, 2) + ".jsonl";
}

inline nlohmann::ordered_json grid_text_json(const CellReport& c, const GridText& t) {
  nlohmann::ordered_json j;
  j["category"] = c.cell.category;
  j["T"] = c.cell.temperature;
  j["p"] = c.cell.top_p;
  j["r"] = c.cell.repetition_penalty;
  j["seed"] = t.seed;
  j["ids"] = t.generated_ids;
  j["text"] = t.text;
  j["stop_reason"] = stop_reason_name(t.stop_reason);
  j["ecc"] = t.outcome.kind == EccOutcomeKind::none ? "none" : t.outcome.reached;
  return j;
}

/// Writes one JSON-lines file per cell into `dir`.
inline void write_grid_dump(const std::filesystem::path& dir, const GridReport& report) {
  std::filesystem::create_directories(dir);
  for (const auto& c : report.cells) {
    std::ofstream out(dir / cell_file_name(c.cell), std::ios::binary);
    if (!out) throw std::runtime_error("cannot write grid dump in " + dir.string());
    for (const auto& t : c.texts) out << grid_text_json(c, t).dump() << '\n';
  }
}

/// Reads one dumped cell back (texts only; aggregates are not stored).
inline CellReport read_grid_cell(const std::filesystem::path& file, const Vocab& v) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open grid dump " + file.string());
  CellReport rep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    rep.cell = {j.at("category").get<std::string>(), j.at("T").get<double>(), j.at("p").get<double>(),
                j.at("r").get<double>()};
    GridText t;
    t.seed = j.at("seed").get<std::uint64_t>();
    t.generated_ids = j.at("ids").get<std::vector<TokenId>>();
    t.text = j.at("text").get<std::string>();
    t.stop_reason = j.at("stop_reason") == "ecc_reached" ? StopReason::ecc_reached : StopReason::max_length;
    GenerationResult gr;
    gr.generated_ids = t.generated_ids;
    gr.stop_reason = t.stop_reason;
    if (t.stop_reason == StopReason::ecc_reached) gr.stop_ecc = t.generated_ids.back();
    t.outcome = ecc_outcome(gr, rep.cell.category, v);
    rep.texts.push_back(std::move(t));
  }
  return rep;
}

}  // namespace ctrlkit
