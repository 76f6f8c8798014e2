#pragma once

// Prompt-based fine-tuning and scoring on text-level benchmark tasks:
// templates, prompt truncation budget, label parsing, agreement metrics and
// test-set baselines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <regex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlkit/corpus.hpp"
#include "ctrlkit/eval.hpp"
#include "ctrlkit/language_model.hpp"
#include "ctrlkit/model.hpp"
#include "ctrlkit/parallel.hpp"
#include "ctrlkit/sampler.hpp"
#include "ctrlkit/text.hpp"
#include "ctrlkit/tokenizer.hpp"
#include "ctrlkit/trainer.hpp"

namespace ctrlkit {

enum class LabelKind { finite, score, summary };
enum class Metric { alpha_nominal, alpha_interval, pseudo_alpha, spearman, accuracy, rouge_l };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::alpha_nominal:
    case Metric::alpha_interval: return "alpha";
    case Metric::pseudo_alpha: return "pseudo_alpha";
    case Metric::spearman: return "spearman";
    case Metric::accuracy: return "accuracy";
    case Metric::rouge_l: return "rouge_l";
  }
  return "?";
}

struct TaskSpec {
  std::string name;  // control-code stem, e.g. "swedn"
  std::string display_name;
  /// Prompt text with `{field}` placeholders filled from the datapoint.
  std::string prompt_template;
  LabelKind label_kind = LabelKind::finite;
  std::vector<std::string> labels;  // finite-label tasks only
  std::vector<Metric> metrics;
  std::optional<double> score_step;  // rounding granularity for score tasks
  bool has_training_data = true;
  std::size_t max_answer_tokens = 16;
  std::string label_field = "label";
  std::string group_field;  // answer-selection tasks: question id field

  std::string occ_text() const { return ":" + name + ":"; }
  std::string ecc_text() const { return ":" + name + ":$"; }

  void validate() const {
    if (name.empty()) throw std::invalid_argument("task: empty name");
    if (label_kind == LabelKind::finite && labels.size() < 2)
      throw std::invalid_argument("task " + name + ": finite-label tasks need at least 2 labels");
    if (metrics.empty()) throw std::invalid_argument("task " + name + ": no metrics");
  }
};

/// The eleven text-level tasks with their prompt formulations.
inline std::vector<TaskSpec> default_tasks() {
  const std::vector<std::string> yn = {"Ja", "Nej"};
  const std::vector<std::string> ynm = {"Ja", "Nej", "Kanske"};
  auto make = [](std::string name, std::string display, std::string tmpl, LabelKind kind,
                 std::vector<std::string> labels, std::vector<Metric> metrics) {
    TaskSpec s;
    s.name = std::move(name);
    s.display_name = std::move(display);
    s.prompt_template = std::move(tmpl);
    s.label_kind = kind;
    s.labels = std::move(labels);
    s.metrics = std::move(metrics);
    if (kind == LabelKind::score) s.max_answer_tokens = 8;
    if (kind == LabelKind::summary) s.max_answer_tokens = 128;
    return s;
  };
  std::vector<TaskSpec> t;
  t.push_back(make("absabank-imm", "ABSAbank-Imm", "{text} Känsloläge:", LabelKind::score, {},
                   {Metric::alpha_interval, Metric::spearman}));
  t.back().score_step = 1.0;
  t.push_back(make("swedn", "SweDN", "{text} Sammanfattning:", LabelKind::summary, {}, {Metric::rouge_l}));
  t.push_back(make("swewinograd", "SweWinograd", "{text} Fråga: Syftar '{w1}' till '{w2}'? Svar:", LabelKind::finite,
                   yn, {Metric::alpha_nominal}));
  t.push_back(make("swefracas", "SweFraCas", "Premiss: {premise} Fråga: {question} Svar:", LabelKind::finite,
                   {"Ja", "Nej", "Vet ej", "Jo"}, {Metric::alpha_nominal}));
  t.back().has_training_data = false;
  t.push_back(make("dalaj-ged", "DaLAJ-GED", "{text} Fråga: Är meningen grammatiskt korrekt?", LabelKind::finite, yn,
                   {Metric::alpha_nominal, Metric::accuracy}));
  t.push_back(make("swenli", "SweNLI", "Situation: {premise} Påstående: {hypothesis} Fråga: Stämmer? Svar:",
                   LabelKind::finite, ynm, {Metric::alpha_nominal, Metric::accuracy}));
  t.push_back(make("swefaq", "SweFAQ", "Fråga: {question} Svar: {answer} Passar?", LabelKind::finite, yn,
                   {Metric::pseudo_alpha, Metric::accuracy}));
  t.back().group_field = "group";
  t.push_back(make("sweparaphrase", "SweParaphrase",
                   "Mening 1: {sentence1} Mening 2: {sentence2} Likhet mellan meningar:", LabelKind::score, {},
                   {Metric::alpha_interval}));
  t.push_back(make("swewic", "SweWiC",
                   "Text 1: {text1} Text 2: {text2} Fråga: Betyder ordet '{word}' samma sak i båda fall? Svar:",
                   LabelKind::finite, yn, {Metric::accuracy}));
  t.push_back(make("swewinogender", "SweWinogender", "Situation: {premise} Påstående: {hypothesis} Fråga: Stämmer?",
                   LabelKind::finite, ynm, {Metric::alpha_nominal}));
  t.back().has_training_data = false;
  t.push_back(make("swediagnostics", "SweDiagnostics",
                   "Situation: {premise} Påstående: {hypothesis} Fråga: Stämmer?", LabelKind::finite, ynm,
                   {Metric::alpha_nominal}));
  t.back().has_training_data = false;
  return t;
}

inline TaskSpec find_task(std::string_view name) {
  for (auto& t : default_tasks())
    if (t.name == name || t.display_name == name) return t;
  throw std::invalid_argument("unknown task: " + std::string(name));
}

// ---------------------------------------------------------------- datapoints

using Datapoint = nlohmann::json;

inline std::string json_field_text(const Datapoint& dp, const std::string& field) {
  if (!dp.contains(field)) throw std::invalid_argument("datapoint lacks field '" + field + "'");
  const auto& v = dp.at(field);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number()) return v.dump();
  throw std::invalid_argument("datapoint field '" + field + "' is not a string or number");
}

/// Fills every `{field}` placeholder of the template.
inline std::string render_prompt(const Datapoint& dp, const TaskSpec& spec) {
  std::string out;
  const auto& t = spec.prompt_template;
  for (std::size_t i = 0; i < t.size();) {
    if (t[i] == '{') {
      auto close = t.find('}', i);
      if (close == std::string::npos) throw std::invalid_argument("task template: unbalanced '{'");
      out += json_field_text(dp, t.substr(i + 1, close - i - 1));
      i = close + 1;
    } else {
      out += t[i++];
    }
  }
  return out;
}

inline std::string label_text(const Datapoint& dp, const TaskSpec& spec) { return json_field_text(dp, spec.label_field); }

/// "[OCC] [Prompt] [Label] [ECC]" as one display string.
inline std::string render_datapoint(const Datapoint& dp, const TaskSpec& spec) {
  return spec.occ_text() + " " + render_prompt(dp, spec) + " " + label_text(dp, spec) + " " + spec.ecc_text();
}

inline std::vector<Datapoint> read_task_data(std::istream& in) {
  std::vector<Datapoint> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("task data line " + std::to_string(no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Datapoint> load_task_data(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open task data " + path);
  return read_task_data(in);
}

// -------------------------------------------------------------- prompt budget

struct PromptBudget {
  std::size_t context = 256;
  std::size_t reserve = 5;  // δ: tokens allowed for the separator
  std::string separator = "[...]";
};

/// Token budget for the prompt. At the default context the cap is 245.
inline std::size_t compute_hp(std::size_t prompt_len, std::size_t label_len, const PromptBudget& b) {
  const std::size_t n = b.context, d = b.reserve;
  if (label_len + d + 2 >= n) throw std::invalid_argument("prompt budget: label too long to fit the context");
  if (prompt_len + label_len + 2 <= n - d) {
    if (n < d + 6) throw std::invalid_argument("prompt budget: context too small");
    return n - d - 6;
  }
  return n - d - label_len - 2;
}

/// The label as it follows the prompt, with its leading blank.
inline std::vector<TokenId> label_ids(const Vocab& v, const std::string& label) { return encode(v, " " + label); }

/// OCC followed by the prompt, cut to head + separator + tail when it
/// exceeds the budget.
inline std::vector<TokenId> build_prompt(const std::vector<TokenId>& prompt, std::size_t label_len, TokenId occ,
                                         const Vocab& v, const PromptBudget& b) {
  const std::size_t hp = compute_hp(prompt.size(), label_len, b);
  std::vector<TokenId> out{occ};
  if (prompt.size() <= hp) {
    out.insert(out.end(), prompt.begin(), prompt.end());
    return out;
  }
  auto sep = encode(v, " " + b.separator);
  if (sep.size() > b.reserve)
    throw std::invalid_argument("prompt budget: separator takes " + std::to_string(sep.size()) + " tokens, more than " +
                                std::to_string(b.reserve));
  const std::size_t half = hp / 2;
  out.insert(out.end(), prompt.begin(), prompt.begin() + static_cast<std::ptrdiff_t>(half));
  out.insert(out.end(), sep.begin(), sep.end());
  out.insert(out.end(), prompt.end() - static_cast<std::ptrdiff_t>(half), prompt.end());
  return out;
}

inline std::vector<TokenId> build_prompt(const Datapoint& dp, const TaskSpec& spec, const Vocab& v,
                                         const PromptBudget& b) {
  const auto prompt = encode(v, render_prompt(dp, spec));
  std::size_t label_len = 0;
  if (dp.contains(spec.label_field)) label_len = label_ids(v, label_text(dp, spec)).size();
  return build_prompt(prompt, label_len, v.control(spec.name).occ, v, b);
}

/// Full training sequence: prompt ids, label ids, task ECC.
inline std::vector<TokenId> datapoint_ids(const Datapoint& dp, const TaskSpec& spec, const Vocab& v,
                                          const PromptBudget& b) {
  auto ids = build_prompt(dp, spec, v, b);
  auto lab = label_ids(v, label_text(dp, spec));
  ids.insert(ids.end(), lab.begin(), lab.end());
  ids.push_back(v.control(spec.name).ecc);
  return ids;
}

// ------------------------------------------------------------- label parsing

struct ParsedLabel {
  enum class Kind { missing, label, score, summary } kind = Kind::missing;
  std::string text;
  double score = 0;

  bool missing() const { return kind == Kind::missing; }
  bool operator==(const ParsedLabel&) const = default;
};

inline ParsedLabel parse_label(std::string_view generated, const TaskSpec& spec) {
  std::string cont(generated);
  if (auto p = cont.find(spec.ecc_text()); p != std::string::npos) cont.erase(p);
  const std::string body(text::trim(cont));
  ParsedLabel out;
  switch (spec.label_kind) {
    case LabelKind::finite: {
      const auto low = text::to_lower(body);
      std::size_t best = 0;
      for (const auto& l : spec.labels) {
        const auto ll = text::to_lower(l);
        if (low.rfind(ll, 0) == 0 && ll.size() > best) {
          best = ll.size();
          out = {ParsedLabel::Kind::label, l, 0};
        }
      }
      break;
    }
    case LabelKind::score: {
      static const std::regex number(R"(-?\d+(?:[.,]\d+)?)");
      std::smatch m;
      if (std::regex_search(body, m, number)) {
        auto s = m.str();
        std::replace(s.begin(), s.end(), ',', '.');
        out = {ParsedLabel::Kind::score, m.str(), std::stod(s)};
      }
      break;
    }
    case LabelKind::summary:
      if (!body.empty()) out = {ParsedLabel::Kind::summary, body, 0};
      break;
  }
  return out;
}

inline double round_to_step(double x, std::optional<double> step) {
  if (!step) return x;
  return std::round(x / *step) * *step;
}

// ------------------------------------------------------------------- metrics

/// Krippendorff's alpha for two annotators rating the same units, via the
/// coincidence matrix. Undefined (nullopt) when expected disagreement is 0.
/// `distance(c, k)` is over value indices into `values`.
namespace detail {

inline std::optional<double> alpha_from_codes(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                                              std::size_t nvalues,
                                              const std::function<double(std::size_t, std::size_t)>& distance) {
  if (a.size() != b.size()) throw std::invalid_argument("alpha: annotations are not aligned");
  if (a.size() < 2) throw std::invalid_argument("alpha: need at least 2 pairs");
  std::vector<double> o(nvalues * nvalues, 0.0), marg(nvalues, 0.0);
  for (std::size_t u = 0; u < a.size(); ++u) {
    o[a[u] * nvalues + b[u]] += 1;
    o[b[u] * nvalues + a[u]] += 1;
    marg[a[u]] += 1;
    marg[b[u]] += 1;
  }
  const double n = 2.0 * static_cast<double>(a.size());
  double d_o = 0, d_e = 0;
  for (std::size_t c = 0; c < nvalues; ++c)
    for (std::size_t k = 0; k < nvalues; ++k) {
      const double dist = distance(c, k);
      d_o += o[c * nvalues + k] * dist;
      d_e += marg[c] * marg[k] * dist;
    }
  d_o /= n;
  d_e /= n * (n - 1);
  if (d_e == 0) return std::nullopt;
  return 1.0 - d_o / d_e;
}

}  // namespace detail

inline std::optional<double> krippendorff_alpha_nominal(const std::vector<std::string>& gold,
                                                        const std::vector<std::string>& pred) {
  std::map<std::string, std::size_t> code;
  for (const auto& s : gold) code.emplace(s, 0);
  for (const auto& s : pred) code.emplace(s, 0);
  std::size_t i = 0;
  for (auto& [_, c] : code) c = i++;
  std::vector<std::size_t> a, b;
  for (const auto& s : gold) a.push_back(code.at(s));
  for (const auto& s : pred) b.push_back(code.at(s));
  return detail::alpha_from_codes(a, b, code.size(), [](std::size_t c, std::size_t k) { return c == k ? 0.0 : 1.0; });
}

inline std::optional<double> krippendorff_alpha_interval(const std::vector<double>& gold,
                                                         const std::vector<double>& pred) {
  std::vector<double> values(gold);
  values.insert(values.end(), pred.begin(), pred.end());
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  auto code = [&](double x) {
    return static_cast<std::size_t>(std::lower_bound(values.begin(), values.end(), x) - values.begin());
  };
  std::vector<std::size_t> a, b;
  for (double x : gold) a.push_back(code(x));
  for (double x : pred) b.push_back(code(x));
  return detail::alpha_from_codes(a, b, values.size(), [&](std::size_t c, std::size_t k) {
    const double d = values[c] - values[k];
    return d * d;
  });
}

/// Drops every pair where either side is missing.
template <class T>
std::pair<std::vector<T>, std::vector<T>> drop_missing(const std::vector<std::optional<T>>& a,
                                                       const std::vector<std::optional<T>>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("annotations are not aligned");
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] && b[i]) {
      out.first.push_back(*a[i]);
      out.second.push_back(*b[i]);
    }
  return out;
}

/// Rescales answer-selection accuracy so that chance level (109/2049) is 0.
inline double pseudo_alpha(double accuracy) {
  if (!(accuracy >= 0 && accuracy <= 1)) throw std::invalid_argument("pseudo_alpha: accuracy must be in [0,1]");
  return (accuracy - 109.0 / 2049.0) / (1940.0 / 2049.0);
}

/// 1-based ranks, ties get the mean of the ranks they span.
inline std::vector<double> fractional_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = rank;
    i = j + 1;
  }
  return r;
}

inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

/// Spearman's rho; undefined when either side is constant.
inline std::optional<double> spearman_rho(const std::vector<double>& gold, const std::vector<double>& pred) {
  if (gold.size() != pred.size()) throw std::invalid_argument("spearman: lists are not aligned");
  if (gold.size() < 2) throw std::invalid_argument("spearman: need at least 2 pairs");
  return pearson(fractional_ranks(gold), fractional_ranks(pred));
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// LCS F1 over whitespace tokens.
inline double rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = text::split_words(candidate), r = text::split_words(reference);
  if (c.empty() && r.empty()) return 1.0;
  if (c.empty() || r.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(c, r));
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(c.size()), rec = lcs / static_cast<double>(r.size());
  return 2 * p * rec / (p + rec);
}

inline double accuracy(const std::vector<std::optional<std::string>>& gold,
                       const std::vector<std::optional<std::string>>& pred) {
  if (gold.empty() || gold.size() != pred.size()) throw std::invalid_argument("accuracy: lists are not aligned");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (gold[i] && pred[i] && *gold[i] == *pred[i]) ++ok;
  return static_cast<double>(ok) / static_cast<double>(gold.size());
}

// ----------------------------------------------------------------- baselines

/// Most frequent label; ties go to the label seen first.
inline std::string majority_label(const std::vector<std::string>& labels) {
  if (labels.empty()) throw std::invalid_argument("majority baseline: no labels");
  std::map<std::string, std::size_t> count;
  for (const auto& l : labels) ++count[l];
  std::string best = labels.front();
  for (const auto& l : labels)
    if (count[l] > count[best]) best = l;
  return best;
}

inline std::vector<std::string> majority_baseline(const std::vector<std::string>& labels) {
  return std::vector<std::string>(labels.size(), majority_label(labels));
}

/// Prefix up to the first '.', '!' or '?' that is followed by whitespace and
/// an uppercase letter; the whole text when there is none.
inline std::string first_sentence_baseline(std::string_view s) {
  if (text::trim(s).empty()) throw std::invalid_argument("first sentence: empty text");
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '.' && s[i] != '!' && s[i] != '?') continue;
    std::size_t j = i + 1;
    if (j >= s.size() || !text::is_space(s[j])) continue;
    while (j < s.size() && text::is_space(s[j])) ++j;
    if (j >= s.size()) break;
    auto cps = text::decode_utf8(s.substr(j, std::min<std::size_t>(4, s.size() - j)));
    if (!cps.empty() && text::is_upper(cps.front())) return std::string(text::trim(s.substr(0, i + 1)));
  }
  return std::string(text::trim(s));
}

// ----------------------------------------------------------- fine-tuning

inline constexpr std::uint64_t kTaskCodeSeed = 87178291199ull;

/// Registers the task OCC/ECC (if new) and grows the embedding to match.
inline void add_task_codes(Checkpoint& ck, Vocab& v, const TaskSpec& spec, std::uint64_t seed = kTaskCodeSeed) {
  if (!v.has_category(spec.name)) v.append_control(spec.name);
  if (v.size() > ck.config.vocab_size) extend_vocab(ck, v.size(), seed);
  if (v.size() != ck.config.vocab_size)
    throw std::invalid_argument("finetune: vocabulary size does not match the model");
}

inline std::vector<TrainingWindow> task_windows(const std::vector<Datapoint>& data, const TaskSpec& spec,
                                                const Vocab& v, const PromptBudget& b) {
  if (!v.pad_id()) throw std::invalid_argument("finetune: vocabulary has no pad token");
  std::vector<TrainingWindow> out;
  for (const auto& dp : data) {
    auto ws = pack_ids(datapoint_ids(dp, spec, v, b), b.context, *v.pad_id());
    out.insert(out.end(), ws.begin(), ws.end());
  }
  return out;
}

/// Fine-tunes all weights on the task data; one report per epoch. `v` gains
/// the task control codes.
inline std::vector<EpochReport> finetune(Checkpoint ck, Vocab& v, const TaskSpec& spec,
                                         const std::vector<Datapoint>& data, const TrainingConfig& tc,
                                         std::size_t jobs = 1,
                                         const std::function<void(const EpochReport&)>& on_epoch = {}) {
  spec.validate();
  if (data.empty()) throw std::invalid_argument("finetune: no training data");
  add_task_codes(ck, v, spec, tc.seed);
  PromptBudget b;
  b.context = ck.config.context;
  return train_windows(std::move(ck), task_windows(data, spec, v, b), tc, jobs, on_epoch);
}

// ---------------------------------------------------------------- evaluation

struct MetricValue {
  std::string name;
  std::optional<double> value;  // nullopt prints as NaN
};

struct TaskEvaluation {
  std::vector<ParsedLabel> predictions;
  std::vector<std::string> raw_outputs;
  std::vector<MetricValue> metrics;
  double missing_percent = 0;
};

namespace detail {

inline std::optional<double> parse_gold_score(const std::string& s) {
  try {
    std::size_t pos = 0;
    double x = std::stod(s, &pos);
    return x;
  } catch (...) {
    return std::nullopt;
  }
}

}  // namespace detail

/// Scores predictions against gold labels with the task's metrics.
inline TaskEvaluation score_predictions(const TaskSpec& spec, const std::vector<Datapoint>& data,
                                        std::vector<ParsedLabel> preds) {
  if (data.size() != preds.size()) throw std::invalid_argument("score: predictions are not aligned");
  if (data.empty()) throw std::invalid_argument("score: empty test set");
  TaskEvaluation ev;
  std::size_t missing = 0;
  for (const auto& p : preds) missing += p.missing();
  ev.missing_percent = 100.0 * static_cast<double>(missing) / static_cast<double>(preds.size());
  auto safe = [](auto f) -> std::optional<double> {
    try {
      return f();
    } catch (const std::invalid_argument&) {
      return std::nullopt;
    }
  };
  std::vector<std::optional<std::string>> gold_l, pred_l;
  std::vector<std::optional<double>> gold_s, pred_s;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto g = label_text(data[i], spec);
    gold_l.push_back(g);
    pred_l.push_back(preds[i].missing() ? std::nullopt : std::optional<std::string>(preds[i].text));
    gold_s.push_back(detail::parse_gold_score(g));
    pred_s.push_back(preds[i].kind == ParsedLabel::Kind::score
                         ? std::optional<double>(round_to_step(preds[i].score, spec.score_step))
                         : std::nullopt);
  }
  for (Metric m : spec.metrics) {
    MetricValue mv{metric_name(m), std::nullopt};
    switch (m) {
      case Metric::alpha_nominal: {
        auto [a, b] = drop_missing(gold_l, pred_l);
        mv.value = safe([&] { return krippendorff_alpha_nominal(a, b); });
        break;
      }
      case Metric::alpha_interval: {
        auto [a, b] = drop_missing(gold_s, pred_s);
        mv.value = safe([&] { return krippendorff_alpha_interval(a, b); });
        break;
      }
      case Metric::spearman: {
        auto [a, b] = drop_missing(gold_s, pred_s);
        mv.value = safe([&] { return spearman_rho(a, b); });
        break;
      }
      case Metric::accuracy: mv.value = accuracy(gold_l, pred_l); break;
      case Metric::pseudo_alpha: mv.value = pseudo_alpha(accuracy(gold_l, pred_l)); break;
      case Metric::rouge_l: {
        std::vector<double> r;
        for (std::size_t i = 0; i < preds.size(); ++i) r.push_back(rouge_l(preds[i].text, *gold_l[i]));
        mv.name = "rouge_l_median";
        mv.value = median(r);
        ev.metrics.push_back(mv);
        mv.name = "rouge_l_mean";
        mv.value = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
        break;
      }
    }
    ev.metrics.push_back(mv);
  }
  ev.predictions = std::move(preds);
  return ev;
}

/// Answer-selection scoring: within each group the candidate with the
/// highest probability of continuing with the first "Ja" token is selected;
/// accuracy is the share of groups whose selected candidate is gold "Ja".
template <LanguageModel M>
TaskEvaluation score_answer_selection(const M& model, const Vocab& v, const TaskSpec& spec,
                                      const std::vector<Datapoint>& data, const PromptBudget& b, std::size_t jobs) {
  if (spec.group_field.empty()) throw std::invalid_argument("answer selection: task has no group field");
  const TokenId yes = label_ids(v, spec.labels.front()).front();
  std::vector<double> p_yes(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    auto ids = build_prompt(data[i], spec, v, b);
    auto logits = model.logits(std::span<const TokenId>(ids));
    p_yes[i] = log_softmax(logits.row(logits.rows() - 1))[static_cast<std::size_t>(yes)];
  });
  std::map<std::string, std::size_t> best;  // group -> datapoint index
  std::vector<std::string> group_order;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto g = json_field_text(data[i], spec.group_field);
    auto it = best.find(g);
    if (it == best.end()) {
      best.emplace(g, i);
      group_order.push_back(g);
    } else if (p_yes[i] > p_yes[it->second]) {
      it->second = i;
    }
  }
  std::size_t correct = 0;
  for (const auto& g : group_order)
    if (label_text(data[best[g]], spec) == spec.labels.front()) ++correct;
  const double a = static_cast<double>(correct) / static_cast<double>(group_order.size());
  TaskEvaluation ev;
  ev.metrics = {{"pseudo_alpha", pseudo_alpha(a)}, {"accuracy", a}};
  return ev;
}

/// Greedy answers for every test datapoint (the task ECC may not come
/// first), parsed and scored. Work fans out over `jobs` threads.
template <LanguageModel M>
TaskEvaluation evaluate_task(const M& model, const Vocab& v, const TaskSpec& spec, const std::vector<Datapoint>& data,
                             std::size_t jobs = 1) {
  spec.validate();
  if (data.empty()) throw std::invalid_argument("eval-task: empty test set");
  if (!v.has_category(spec.name)) throw std::invalid_argument("eval-task: vocabulary lacks codes for " + spec.name);
  PromptBudget b;
  b.context = model.context_size();
  if (!spec.group_field.empty()) return score_answer_selection(model, v, spec, data, b, jobs);
  const TokenId ecc = v.control(spec.name).ecc;
  std::vector<std::string> outputs(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    auto gr = greedy_answer(model, build_prompt(data[i], spec, v, b), ecc, spec.max_answer_tokens);
    std::span<const TokenId> body(gr.generated_ids);
    if (gr.stop_reason == StopReason::ecc_reached) body = body.first(body.size() - 1);
    outputs[i] = decode(v, body);
  });
  std::vector<ParsedLabel> preds;
  for (const auto& o : outputs) preds.push_back(parse_label(o, spec));
  auto ev = score_predictions(spec, data, std::move(preds));
  ev.raw_outputs = std::move(outputs);
  return ev;
}

/// Test-set majority label (or first sentence for summaries), scored like a
/// model prediction.
inline TaskEvaluation evaluate_baseline(const TaskSpec& spec, const std::vector<Datapoint>& data) {
  if (data.empty()) throw std::invalid_argument("baseline: empty test set");
  std::vector<ParsedLabel> preds;
  if (spec.label_kind == LabelKind::summary) {
    for (const auto& dp : data)
      preds.push_back({ParsedLabel::Kind::summary, first_sentence_baseline(json_field_text(dp, "text")), 0});
    return score_predictions(spec, data, std::move(preds));
  }
  std::vector<std::string> gold;
  for (const auto& dp : data) gold.push_back(label_text(dp, spec));
  const auto m = majority_label(gold);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (spec.label_kind == LabelKind::score)
      preds.push_back({ParsedLabel::Kind::score, m, std::stod(m)});
    else
      preds.push_back({ParsedLabel::Kind::label, m, 0});
  }
  if (!spec.group_field.empty()) {
    TaskSpec plain = spec;
    plain.group_field.clear();
    return score_predictions(plain, data, std::move(preds));
  }
  return score_predictions(spec, data, std::move(preds));
}

inline const std::string kTaskCsvHeader = "task,epoch,metric,value,N_missing%";

inline void write_task_rows(std::ostream& out, const TaskSpec& spec, const std::string& epoch,
                            const TaskEvaluation& ev) {
  for (const auto& m : ev.metrics)
    out << spec.name << ',' << epoch << ',' << m.name << ','
        << (m.value ? text::fixed(*m.value) : std::string("NaN")) << ',' << text::fixed(ev.missing_percent, 2)
        << '\n';
}

}  // namespace ctrlkit
