#pragma once

// Word-level byte-pair encoding with control-code and special tokens
// appended on top of the learned vocabulary.
//
// Pre-tokenization splits text into segments of the form
// (whitespace*)(non-whitespace+), plus a trailing whitespace-only segment.
// Whitespace stays inside the segments, so decoding is plain concatenation.
// No lowercasing or Unicode normalization is applied.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctrlkit/corpus.hpp"
#include "ctrlkit/text.hpp"

namespace ctrlkit {

using TokenId = std::int32_t;

struct ControlIds {
  TokenId occ = -1;
  TokenId ecc = -1;
};

enum class AddedKind { occ, ecc, pad, unk };

struct AddedToken {
  TokenId id = -1;
  AddedKind kind = AddedKind::pad;
  std::string surface;
  std::string category;  // empty for pad/unk
};

struct PairHash {
  std::size_t operator()(const std::pair<std::string, std::string>& p) const noexcept {
    std::hash<std::string> h;
    return h(p.first) * 1000003u ^ h(p.second);
  }
};

class Vocab {
 public:
  Vocab() = default;

  /// Builds the base vocabulary from an alphabet (ids 0..A-1) and an ordered
  /// merge list. A merge whose output already exists does not get a new id.
  Vocab(std::vector<std::string> alphabet, std::vector<std::pair<std::string, std::string>> merges)
      : merges_(std::move(merges)) {
    for (auto& a : alphabet) add_base(std::move(a));
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [l, rgt] = merges_[r];
      if (!token_to_id_.count(l) || !token_to_id_.count(rgt))
        throw std::invalid_argument("merge operand not in vocabulary: " + l + " + " + rgt);
      merge_rank_.emplace(merges_[r], r);
      std::string out = l + rgt;
      if (!token_to_id_.count(out)) add_base(std::move(out));
    }
    base_size_ = id_to_token_.size();
  }

  std::size_t size() const { return id_to_token_.size(); }
  std::size_t base_size() const { return base_size_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const std::vector<AddedToken>& added() const { return added_; }
  std::optional<TokenId> pad_id() const { return pad_id_; }
  std::optional<TokenId> unk_id() const { return unk_id_; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw std::out_of_range("token id out of range: " + std::to_string(id));
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> find(const std::string& surface) const {
    auto it = token_to_id_.find(surface);
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }

  bool has_category(const std::string& name) const { return control_ids_.count(name) > 0; }

  const ControlIds& control(const std::string& category) const {
    auto it = control_ids_.find(category);
    if (it == control_ids_.end()) throw std::out_of_range("no control codes for category " + category);
    return it->second;
  }

  /// Category whose ECC is `id`, if any.
  std::optional<std::string> ecc_category(TokenId id) const {
    auto it = ecc_to_category_.find(id);
    if (it == ecc_to_category_.end()) return std::nullopt;
    return it->second;
  }

  bool is_ecc(TokenId id) const { return ecc_to_category_.count(id) > 0; }
  bool is_control(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) >= base_size_;
  }

  std::optional<std::size_t> merge_rank(const std::string& l, const std::string& r) const {
    auto it = merge_rank_.find({l, r});
    if (it == merge_rank_.end()) return std::nullopt;
    return it->second;
  }

  /// Appends OCC/ECC for `category` after all current ids.
  ControlIds append_control(const std::string& category) {
    if (control_ids_.count(category)) throw std::invalid_argument("control codes already present for " + category);
    ControlIds ids;
    ids.occ = append_added(AddedKind::occ, occ_surface(category), category);
    ids.ecc = append_added(AddedKind::ecc, ecc_surface(category), category);
    return ids;
  }

  TokenId append_special(AddedKind kind, const std::string& surface) {
    if (kind != AddedKind::pad && kind != AddedKind::unk) throw std::invalid_argument("not a special kind");
    if ((kind == AddedKind::pad && pad_id_) || (kind == AddedKind::unk && unk_id_))
      throw std::invalid_argument("special token already present: " + surface);
    return append_added(kind, surface, "");
  }

  /// Restores an added token at its recorded id (deserialization).
  void restore_added(const AddedToken& t) {
    if (static_cast<std::size_t>(t.id) != id_to_token_.size())
      throw std::invalid_argument("added token ids must be contiguous, got " + std::to_string(t.id));
    append_added(t.kind, t.surface, t.category);
  }

 private:
  void add_base(std::string tok) {
    auto id = static_cast<TokenId>(id_to_token_.size());
    if (!token_to_id_.emplace(tok, id).second) throw std::invalid_argument("duplicate token: " + tok);
    id_to_token_.push_back(std::move(tok));
  }

  TokenId append_added(AddedKind kind, const std::string& surface, const std::string& category) {
    if (token_to_id_.count(surface)) throw std::invalid_argument("token surface collision: " + surface);
    auto id = static_cast<TokenId>(id_to_token_.size());
    token_to_id_.emplace(surface, id);
    id_to_token_.push_back(surface);
    added_.push_back({id, kind, surface, category});
    switch (kind) {
      case AddedKind::occ: control_ids_[category].occ = id; break;
      case AddedKind::ecc:
        control_ids_[category].ecc = id;
        ecc_to_category_[id] = category;
        break;
      case AddedKind::pad: pad_id_ = id; break;
      case AddedKind::unk: unk_id_ = id; break;
    }
    return id;
  }

  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::pair<std::string, std::string>, std::size_t, PairHash> merge_rank_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::size_t base_size_ = 0;
  std::vector<AddedToken> added_;
  std::map<std::string, ControlIds> control_ids_;
  std::unordered_map<TokenId, std::string> ecc_to_category_;
  std::optional<TokenId> pad_id_;
  std::optional<TokenId> unk_id_;
};

inline const std::string kPadSurface = "<pad>";
inline const std::string kUnkSurface = "<unk>";

/// Splits text into BPE segments; concatenating the result gives `s` back.
inline std::vector<std::string> pretokenize(std::string_view s) {
  std::vector<std::string> segs;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t start = i;
    while (i < s.size() && text::is_space(s[i])) ++i;
    while (i < s.size() && !text::is_space(s[i])) ++i;
    segs.emplace_back(s.substr(start, i - start));
  }
  return segs;
}

namespace detail {

using Symbols = std::vector<std::string>;

inline void merge_pair(Symbols& syms, const std::string& l, const std::string& r) {
  Symbols out;
  out.reserve(syms.size());
  for (std::size_t i = 0; i < syms.size();) {
    if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
      out.push_back(l + r);
      i += 2;
    } else {
      out.push_back(std::move(syms[i]));
      ++i;
    }
  }
  syms = std::move(out);
}

}  // namespace detail

/// Learns a BPE vocabulary. Every ceil(1/fraction)-th document (starting at
/// the first) is used. Ties between equally frequent pairs are broken by the
/// lexicographically smallest (left, right) pair, so training is
/// deterministic. Stops at `vocab_size` base tokens or when no pair remains.
inline Vocab train_bpe(const std::vector<Document>& docs, double fraction, std::size_t vocab_size) {
  if (docs.empty()) throw std::invalid_argument("train_bpe: no documents");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("train_bpe: fraction must be in (0,1]");
  auto stride = static_cast<std::size_t>(std::ceil(1.0 / fraction - 1e-12));
  stride = std::max<std::size_t>(stride, 1);

  std::map<std::string, std::uint64_t> segment_freq;
  for (std::size_t i = 0; i < docs.size(); i += stride)
    for (auto& seg : pretokenize(docs[i].text)) ++segment_freq[seg];
  if (segment_freq.empty()) throw std::invalid_argument("train_bpe: sampled text is empty");

  std::vector<detail::Symbols> words;
  std::vector<std::uint64_t> freqs;
  std::map<std::string, bool> alphabet_set;
  for (const auto& [seg, f] : segment_freq) {
    words.push_back(text::utf8_chars(seg));
    freqs.push_back(f);
    for (const auto& c : words.back()) alphabet_set[c] = true;
  }
  // std::map orders by bytes, which for UTF-8 equals code point order.
  std::vector<std::string> alphabet;
  for (const auto& [c, _] : alphabet_set) alphabet.push_back(c);
  if (vocab_size < alphabet.size())
    throw std::invalid_argument("train_bpe: vocab_size " + std::to_string(vocab_size) +
                                " is smaller than the alphabet (" + std::to_string(alphabet.size()) + ")");

  std::vector<std::pair<std::string, std::string>> merges;
  std::unordered_map<std::string, bool> known(alphabet_set.begin(), alphabet_set.end());
  std::size_t size = alphabet.size();

  // Pair counts are maintained incrementally; `where` lists the words that
  // may contain each pair.
  std::map<std::pair<std::string, std::string>, std::int64_t> counts;
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> where;
  auto count_word = [&](std::size_t w, std::int64_t sign) {
    const auto& syms = words[w];
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto key = std::make_pair(syms[i], syms[i + 1]);
      counts[key] += sign * static_cast<std::int64_t>(freqs[w]);
      if (sign > 0) where[key].push_back(w);
    }
  };
  for (std::size_t w = 0; w < words.size(); ++w) count_word(w, +1);

  while (size < vocab_size) {
    const std::pair<std::string, std::string>* best = nullptr;
    std::int64_t best_count = 0;
    for (const auto& [pair, c] : counts) {
      if (c > best_count) {
        best = &pair;
        best_count = c;
      }
    }
    if (!best) break;
    auto pair = *best;
    merges.push_back(pair);
    std::string merged = pair.first + pair.second;
    if (!known.count(merged)) {
      known[merged] = true;
      ++size;
    }
    auto affected = where[pair];
    std::sort(affected.begin(), affected.end());
    affected.erase(std::unique(affected.begin(), affected.end()), affected.end());
    for (std::size_t w : affected) {
      count_word(w, -1);
      detail::merge_pair(words[w], pair.first, pair.second);
      count_word(w, +1);
    }
    for (auto it = counts.begin(); it != counts.end();) {
      if (it->second == 0) {
        where.erase(it->first);
        it = counts.erase(it);
      } else {
        ++it;
      }
    }
  }
  return Vocab(std::move(alphabet), std::move(merges));
}

/// Appends OCC/ECC for every category in `table` (table order), then pad and
/// unk. Base token ids are unchanged.
inline Vocab add_control_codes(Vocab v, const CategoryTable& table) {
  for (const auto& c : table.categories()) v.append_control(c.name);
  v.append_special(AddedKind::pad, kPadSurface);
  v.append_special(AddedKind::unk, kUnkSurface);
  return v;
}

/// Encodes one pre-tokenized segment by repeatedly merging the adjacent pair
/// with the lowest merge rank.
inline void encode_segment(const Vocab& v, const std::string& seg, std::vector<TokenId>& out) {
  auto syms = text::utf8_chars(seg);
  while (syms.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      if (auto r = v.merge_rank(syms[i], syms[i + 1]); r && *r < best_rank) best_rank = *r;
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const auto& [l, r] = v.merges()[best_rank];
    detail::merge_pair(syms, l, r);
  }
  for (const auto& s : syms) {
    auto id = v.find(s);
    if (id && !v.is_control(*id)) {
      out.push_back(*id);
    } else if (v.unk_id()) {
      out.push_back(*v.unk_id());
    } else {
      throw std::invalid_argument("symbol not in vocabulary and no unk token: " + s);
    }
  }
}

/// Encodes plain text. Control-code surfaces in the text are not recognized;
/// control ids are only inserted explicitly.
inline std::vector<TokenId> encode(const Vocab& v, std::string_view text) {
  std::vector<TokenId> ids;
  for (const auto& seg : pretokenize(text)) encode_segment(v, seg, ids);
  return ids;
}

inline std::string decode(const Vocab& v, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) out += v.token(id);
  return out;
}

inline const char* added_kind_name(AddedKind k) {
  switch (k) {
    case AddedKind::occ: return "occ";
    case AddedKind::ecc: return "ecc";
    case AddedKind::pad: return "pad";
    case AddedKind::unk: return "unk";
  }
  return "?";
}

/// Text serialization:
///   bpe-v1 <base_size>
///   alphabet <A>      then A lines, one escaped symbol each
///   merges <M>        then M lines "<left> <right>"
///   added <K>         then K lines "<id> <kind> <surface> [category]"
/// Symbols are escaped with \s for blanks so fields are space-separated.
inline void save_vocab(std::ostream& out, const Vocab& v) {
  std::size_t alphabet = v.base_size();
  // Alphabet = base ids not produced by any merge, which are always the first ids.
  std::size_t produced = 0;
  {
    std::unordered_map<std::string, bool> seen;
    for (const auto& [l, r] : v.merges()) {
      auto m = l + r;
      auto id = v.find(m);
      if (id && static_cast<std::size_t>(*id) < v.base_size() && !seen[m]) {
        seen[m] = true;
        ++produced;
      }
    }
  }
  alphabet = v.base_size() - produced;
  out << "bpe-v1 " << v.base_size() << '\n';
  out << "alphabet " << alphabet << '\n';
  for (std::size_t i = 0; i < alphabet; ++i) out << text::escape(v.token(static_cast<TokenId>(i)), true) << '\n';
  out << "merges " << v.merges().size() << '\n';
  for (const auto& [l, r] : v.merges()) out << text::escape(l, true) << ' ' << text::escape(r, true) << '\n';
  out << "added " << v.added().size() << '\n';
  for (const auto& a : v.added()) {
    out << a.id << ' ' << added_kind_name(a.kind) << ' ' << text::escape(a.surface, true);
    if (!a.category.empty()) out << ' ' << text::escape(a.category, true);
    out << '\n';
  }
}

inline Vocab read_vocab(std::istream& in) {
  auto expect_block = [&](const std::string& name) -> std::size_t {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("vocab: missing block '" + name + "'");
    std::istringstream ss(line);
    std::string tag;
    std::size_t n = 0;
    if (!(ss >> tag >> n) || tag != name) throw std::runtime_error("vocab: expected '" + name + " <n>', got '" + line + "'");
    return n;
  };
  std::size_t base_size = expect_block("bpe-v1");
  std::size_t a = expect_block("alphabet");
  std::vector<std::string> alphabet;
  std::string line;
  for (std::size_t i = 0; i < a; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("vocab: truncated alphabet");
    alphabet.push_back(text::unescape(line));
  }
  std::size_t m = expect_block("merges");
  std::vector<std::pair<std::string, std::string>> merges;
  for (std::size_t i = 0; i < m; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("vocab: truncated merges");
    auto parts = text::split(line, ' ');
    if (parts.size() != 2) throw std::runtime_error("vocab: bad merge line '" + line + "'");
    merges.emplace_back(text::unescape(parts[0]), text::unescape(parts[1]));
  }
  Vocab v(std::move(alphabet), std::move(merges));
  if (v.base_size() != base_size) throw std::runtime_error("vocab: base size mismatch");
  std::size_t k = expect_block("added");
  for (std::size_t i = 0; i < k; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("vocab: truncated added tokens");
    auto parts = text::split(line, ' ');
    if (parts.size() < 3) throw std::runtime_error("vocab: bad added line '" + line + "'");
    AddedToken t;
    t.id = static_cast<TokenId>(std::stol(parts[0]));
    const auto& kind = parts[1];
    if (kind == "occ") t.kind = AddedKind::occ;
    else if (kind == "ecc") t.kind = AddedKind::ecc;
    else if (kind == "pad") t.kind = AddedKind::pad;
    else if (kind == "unk") t.kind = AddedKind::unk;
    else throw std::runtime_error("vocab: unknown added kind '" + kind + "'");
    t.surface = text::unescape(parts[2]);
    if (parts.size() > 3) t.category = text::unescape(parts[3]);
    v.restore_added(t);
  }
  return v;
}

inline void save_vocab(const std::string& path, const Vocab& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocab file " + path);
  save_vocab(out, v);
}

inline Vocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocab file " + path);
  return read_vocab(in);
}

}  // namespace ctrlkit
