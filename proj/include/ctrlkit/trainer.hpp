#pragma once

// Language-model training on [OCC] text [ECC] windows with AdamW.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctrlkit/corpus.hpp"
#include "ctrlkit/language_model.hpp"
#include "ctrlkit/model.hpp"
#include "ctrlkit/parallel.hpp"
#include "ctrlkit/text.hpp"
#include "ctrlkit/tokenizer.hpp"

namespace ctrlkit {

/// Optimizer settings. Defaults are the task fine-tuning settings of the
/// released model (AdamW, lr 5e-5, clip 1, prime seed); weight decay is ours.
struct TrainingConfig {
  std::size_t batch_size = 4;
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip_norm = 1.0;
  double weight_decay = 0.01;
  std::size_t epochs = 1;
  std::uint64_t seed = 87178291199ull;

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("training config: batch_size must be positive");
    if (!(lr > 0)) throw std::invalid_argument("training config: lr must be positive");
    if (!(grad_clip_norm > 0)) throw std::invalid_argument("training config: grad_clip_norm must be positive");
    if (epochs == 0) throw std::invalid_argument("training config: epochs must be positive");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw std::invalid_argument("training config: betas must be in [0,1)");
  }
};

/// Parses `key=value` lines; '#' starts a comment. Unknown keys are errors.
inline TrainingConfig parse_training_config(std::istream& in, TrainingConfig tc = {}) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto t = text::trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string_view::npos)
      throw std::invalid_argument("training config line " + std::to_string(line_no) + ": expected key=value");
    std::string key(text::trim(t.substr(0, eq)));
    std::string value(text::trim(t.substr(eq + 1)));
    try {
      if (key == "batch_size") tc.batch_size = std::stoull(value);
      else if (key == "lr") tc.lr = std::stod(value);
      else if (key == "beta1") tc.beta1 = std::stod(value);
      else if (key == "beta2") tc.beta2 = std::stod(value);
      else if (key == "eps") tc.eps = std::stod(value);
      else if (key == "grad_clip_norm") tc.grad_clip_norm = std::stod(value);
      else if (key == "weight_decay") tc.weight_decay = std::stod(value);
      else if (key == "epochs") tc.epochs = std::stoull(value);
      else if (key == "seed") tc.seed = std::stoull(value);
      else throw std::invalid_argument("unknown key '" + key + "'");
    } catch (const std::logic_error& e) {
      throw std::invalid_argument("training config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  tc.validate();
  return tc;
}

inline TrainingConfig load_training_config(const std::string& path, TrainingConfig defaults = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open training config " + path);
  return parse_training_config(in, defaults);
}

/// One context-sized training sequence. `target[i]` marks ids[i] as a real
/// token to be predicted from ids[0..i-1]; position 0 and padding are never
/// targets.
struct TrainingWindow {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> target;

  std::size_t target_count() const {
    std::size_t n = 0;
    for (auto t : target) n += t;
    return n;
  }
};

/// Chunks a token sequence into windows of length n. Consecutive windows
/// overlap by one token so that every token after the first is a target
/// exactly once. The last window is padded to n with `pad`.
inline std::vector<TrainingWindow> pack_ids(const std::vector<TokenId>& seq, std::size_t n, TokenId pad) {
  if (n < 2) throw std::invalid_argument("pack: context must be at least 2");
  std::vector<TrainingWindow> windows;
  if (seq.size() < 2) return windows;
  std::size_t start = 0;
  while (true) {
    TrainingWindow w;
    std::size_t end = std::min(seq.size(), start + n);
    w.ids.assign(seq.begin() + static_cast<std::ptrdiff_t>(start), seq.begin() + static_cast<std::ptrdiff_t>(end));
    w.target.assign(w.ids.size(), 1);
    w.target[0] = 0;
    w.ids.resize(n, pad);
    w.target.resize(n, 0);
    windows.push_back(std::move(w));
    if (end == seq.size()) break;
    start = end - 1;
  }
  return windows;
}

/// occ + encode(text) + ecc, chunked into context-sized windows.
inline std::vector<TrainingWindow> pack_sequence(const Document& doc, const Vocab& v, std::size_t n) {
  if (!v.has_category(doc.category)) throw std::invalid_argument("pack_sequence: category without control codes: " + doc.category);
  if (!v.pad_id()) throw std::invalid_argument("pack_sequence: vocabulary has no pad token");
  const auto& cc = v.control(doc.category);
  std::vector<TokenId> seq;
  seq.push_back(cc.occ);
  auto body = encode(v, doc.text);
  seq.insert(seq.end(), body.begin(), body.end());
  seq.push_back(cc.ecc);
  return pack_ids(seq, n, *v.pad_id());
}

/// Mean next-token negative log-likelihood over the window's targets.
template <LanguageModel M>
double lm_loss(const M& model, const TrainingWindow& w) {
  if (w.ids.size() > model.context_size()) throw std::invalid_argument("lm_loss: window longer than context");
  if (w.target.size() != w.ids.size()) throw std::invalid_argument("lm_loss: mask length mismatch");
  std::size_t count = 0;
  // Trailing padding cannot influence earlier positions, so only the prefix
  // up to the last target is evaluated.
  std::size_t last = 0;
  for (std::size_t i = 0; i < w.target.size(); ++i)
    if (w.target[i]) last = i, ++count;
  if (count == 0) throw std::invalid_argument("lm_loss: all positions masked");
  std::span<const TokenId> prefix(w.ids.data(), last);
  auto logits = model.logits(prefix);
  double nll = 0;
  for (std::size_t i = 1; i <= last; ++i) {
    if (!w.target[i]) continue;
    auto lp = log_softmax(logits.row(i - 1));
    nll -= lp[static_cast<std::size_t>(w.ids[i])];
  }
  return nll / static_cast<double>(count);
}

/// Summed NLL over the window's targets; accumulates d(sum NLL * scale)/dθ.
template <class Real>
double accumulate_window_gradient(const BasicCheckpoint<Real>& ck, const TrainingWindow& w, Real scale,
                                  Weights<Real>& grads) {
  std::size_t last = 0;
  for (std::size_t i = 0; i < w.target.size(); ++i)
    if (w.target[i]) last = i;
  if (last == 0) return 0.0;
  ForwardCache<Real> cache;
  std::span<const TokenId> prefix(w.ids.data(), last);
  const auto& logits = forward(ck, prefix, cache);
  Matrix<Real> dlogits(logits.rows(), logits.cols());
  double nll = 0;
  for (std::size_t i = 1; i <= last; ++i) {
    if (!w.target[i]) continue;
    auto lp = log_softmax(logits.row(i - 1));
    const auto y = static_cast<std::size_t>(w.ids[i]);
    nll -= lp[y];
    auto drow = dlogits.row(i - 1);
    for (std::size_t v = 0; v < lp.size(); ++v) drow[v] = static_cast<Real>(std::exp(lp[v])) * scale;
    drow[y] -= scale;
  }
  backward(ck, cache, dlogits, grads);
  return nll;
}

template <class Real>
double global_norm(const ModelConfig& c, Weights<Real>& g) {
  double sq = 0;
  for_each_tensor(c, g, [&](const TensorInfo&, std::vector<Real>& t) {
    for (Real x : t) sq += static_cast<double>(x) * static_cast<double>(x);
  });
  return std::sqrt(sq);
}

/// Rescales gradients so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class Real>
double clip_grad_norm(const ModelConfig& c, Weights<Real>& g, double max_norm) {
  double norm = global_norm(c, g);
  if (norm > max_norm) {
    const auto s = static_cast<Real>(max_norm / norm);
    for_each_tensor(c, g, [&](const TensorInfo&, std::vector<Real>& t) {
      for (Real& x : t) x *= s;
    });
  }
  return norm;
}

/// AdamW with decoupled weight decay applied to matrices and embeddings only.
class AdamW {
 public:
  AdamW(const ModelConfig& c, const TrainingConfig& tc) : tc_(tc), m_(Weights<float>::zeros(c)), v_(Weights<float>::zeros(c)) {}

  void step(Checkpoint& ck, Weights<float>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(tc_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(tc_.beta2, static_cast<double>(t_));
    std::vector<std::vector<float>*> ms, vs, gs;
    for_each_tensor(ck.config, m_, [&](const TensorInfo&, std::vector<float>& t) { ms.push_back(&t); });
    for_each_tensor(ck.config, v_, [&](const TensorInfo&, std::vector<float>& t) { vs.push_back(&t); });
    for_each_tensor(ck.config, grads, [&](const TensorInfo&, std::vector<float>& t) { gs.push_back(&t); });
    std::size_t k = 0;
    for_each_tensor(ck.config, ck.weights, [&](const TensorInfo& info, std::vector<float>& p) {
      auto& m = *ms[k];
      auto& v = *vs[k];
      auto& g = *gs[k];
      ++k;
      const bool decay = info.shape.size() == 2;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        m[i] = static_cast<float>(tc_.beta1 * m[i] + (1 - tc_.beta1) * gi);
        v[i] = static_cast<float>(tc_.beta2 * v[i] + (1 - tc_.beta2) * gi * gi);
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        double pi = p[i];
        if (decay) pi -= tc_.lr * tc_.weight_decay * pi;
        pi -= tc_.lr * mhat / (std::sqrt(vhat) + tc_.eps);
        p[i] = static_cast<float>(pi);
      }
    });
  }

 private:
  TrainingConfig tc_;
  Weights<float> m_, v_;
  std::int64_t t_ = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(std::int64_t step)
      : std::runtime_error("non-finite loss at step " + std::to_string(step)), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct EpochReport {
  std::size_t epoch = 0;
  double mean_loss = 0;  // token-weighted mean NLL over the epoch
  Checkpoint checkpoint;
};

/// Deterministic Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  NormalStream rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next() % i]);
  return idx;
}

/// Trains on pre-packed windows. Each epoch visits the windows in a
/// seed-determined order; per-window gradients are computed on up to `jobs`
/// threads and summed in window order, so results do not depend on `jobs`.
inline std::vector<EpochReport> train_windows(Checkpoint ck, const std::vector<TrainingWindow>& windows,
                                              const TrainingConfig& tc, std::size_t jobs = 1,
                                              const std::function<void(const EpochReport&)>& on_epoch = {}) {
  tc.validate();
  if (windows.empty()) throw std::invalid_argument("train: no training windows");
  for (const auto& w : windows)
    if (w.ids.size() > ck.config.context) throw std::invalid_argument("train: window longer than context");
  AdamW opt(ck.config, tc);
  std::vector<EpochReport> reports;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    auto order = shuffled_indices(windows.size(), tc.seed + epoch);
    double epoch_nll = 0;
    std::size_t epoch_tokens = 0;
    for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
      const std::size_t bs = std::min(tc.batch_size, order.size() - b);
      std::size_t tokens = 0;
      for (std::size_t j = 0; j < bs; ++j) tokens += windows[order[b + j]].target_count();
      if (tokens == 0) continue;
      const float scale = 1.0f / static_cast<float>(tokens);
      std::vector<Weights<float>> partial(bs);
      std::vector<double> nll(bs, 0.0);
      parallel_for(bs, jobs, [&](std::size_t j) {
        partial[j] = Weights<float>::zeros(ck.config);
        nll[j] = accumulate_window_gradient(ck, windows[order[b + j]], scale, partial[j]);
      });
      Weights<float> grads = std::move(partial[0]);
      for (std::size_t j = 1; j < bs; ++j) {
        std::vector<std::vector<float>*> src;
        for_each_tensor(ck.config, partial[j], [&](const TensorInfo&, std::vector<float>& t) { src.push_back(&t); });
        std::size_t k = 0;
        for_each_tensor(ck.config, grads, [&](const TensorInfo&, std::vector<float>& t) {
          const auto& s = *src[k++];
          for (std::size_t i = 0; i < t.size(); ++i) t[i] += s[i];
        });
      }
      double batch_nll = 0;
      for (double x : nll) batch_nll += x;
      ++ck.step;
      if (!std::isfinite(batch_nll)) throw TrainingDiverged(ck.step);
      clip_grad_norm(ck.config, grads, tc.grad_clip_norm);
      opt.step(ck, grads);
      epoch_nll += batch_nll;
      epoch_tokens += tokens;
    }
    EpochReport r{epoch, epoch_tokens ? epoch_nll / static_cast<double>(epoch_tokens) : 0.0, ck};
    if (on_epoch) on_epoch(r);
    reports.push_back(std::move(r));
  }
  return reports;
}

/// Packs every document and trains; one report (with checkpoint) per epoch.
inline std::vector<EpochReport> train(const Checkpoint& ck, const std::vector<Document>& docs, const Vocab& v,
                                      const TrainingConfig& tc, std::size_t jobs = 1,
                                      const std::function<void(const EpochReport&)>& on_epoch = {}) {
  if (docs.empty()) throw std::invalid_argument("train: no documents");
  if (v.size() != ck.config.vocab_size)
    throw std::invalid_argument("train: vocabulary size " + std::to_string(v.size()) +
                                " does not match model vocab_size " + std::to_string(ck.config.vocab_size));
  std::vector<TrainingWindow> windows;
  for (const auto& d : docs) {
    auto ws = pack_sequence(d, v, ck.config.context);
    windows.insert(windows.end(), ws.begin(), ws.end());
  }
  return train_windows(ck, windows, tc, jobs, on_epoch);
}

}  // namespace ctrlkit
