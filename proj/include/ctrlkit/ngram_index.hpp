#pragma once

// Word k-gram index over a training corpus: frequency and posting lists per
// k-gram, overlap statistics against evaluation texts, and substring search
// with provenance. Words are whitespace tokens, case-sensitive, with
// punctuation kept.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctrlkit/corpus.hpp"
#include "ctrlkit/text.hpp"

namespace ctrlkit {

struct DocMeta {
  std::string category;
  Provenance provenance = Provenance::automatic;
  std::optional<std::string> url;

  bool operator==(const DocMeta&) const = default;
};

struct NGramEntry {
  std::vector<std::string> words;
  std::uint64_t tf = 0;
  std::vector<std::int64_t> postings;  // ascending, unique
};

class NGramIndex {
 public:
  explicit NGramIndex(std::size_t k = 13) : k_(k) {
    if (k == 0) throw std::invalid_argument("n-gram index: k must be at least 1");
  }

  std::size_t k() const { return k_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<NGramEntry>& entries() const { return entries_; }
  const std::map<std::int64_t, DocMeta>& doc_meta() const { return doc_meta_; }

  /// Term frequency of a k-gram (0 if absent).
  std::uint64_t tf(const std::vector<std::string>& words) const {
    auto it = lookup_.find(text::join(words, " "));
    return it == lookup_.end() ? 0 : entries_[it->second].tf;
  }

  const NGramEntry* find(const std::vector<std::string>& words) const {
    auto it = lookup_.find(text::join(words, " "));
    return it == lookup_.end() ? nullptr : &entries_[it->second];
  }

  /// Adds a document. Documents must be added in ascending id order.
  void add_document(std::int64_t id, const std::vector<std::string>& words, DocMeta meta) {
    if (!doc_meta_.empty() && id <= doc_meta_.rbegin()->first)
      throw std::invalid_argument("n-gram index: document ids must be added in ascending order");
    doc_meta_.emplace(id, std::move(meta));
    if (words.size() < k_) return;
    for (std::size_t i = 0; i + k_ <= words.size(); ++i) {
      std::vector<std::string> gram(words.begin() + static_cast<std::ptrdiff_t>(i),
                                    words.begin() + static_cast<std::ptrdiff_t>(i + k_));
      auto key = text::join(gram, " ");
      auto it = lookup_.find(key);
      std::size_t idx;
      if (it == lookup_.end()) {
        idx = entries_.size();
        insert_entry({std::move(gram), 0, {}});
      } else {
        idx = it->second;
      }
      auto& e = entries_[idx];
      ++e.tf;
      if (e.postings.empty() || e.postings.back() != id) e.postings.push_back(id);
    }
  }

  /// Entry indices whose word sequence contains `query` contiguously.
  std::vector<std::size_t> containing(const std::vector<std::string>& query) const {
    std::vector<std::size_t> hits;
    if (query.empty() || query.size() > k_) return hits;
    auto it = word_positions_.find(query[0]);
    if (it == word_positions_.end()) return hits;
    for (const auto& [idx, pos] : it->second) {
      if (pos + query.size() > k_) continue;
      const auto& w = entries_[idx].words;
      if (std::equal(query.begin(), query.end(), w.begin() + static_cast<std::ptrdiff_t>(pos))) hits.push_back(idx);
    }
    std::sort(hits.begin(), hits.end());
    hits.erase(std::unique(hits.begin(), hits.end()), hits.end());
    return hits;
  }

 private:
  friend NGramIndex read_index(std::istream& in);

  void insert_entry(NGramEntry e) {
    const std::size_t idx = entries_.size();
    auto key = text::join(e.words, " ");
    if (!lookup_.emplace(std::move(key), idx).second) throw std::runtime_error("index: duplicate k-gram");
    for (std::size_t p = 0; p < e.words.size(); ++p) word_positions_[e.words[p]].push_back({idx, p});
    entries_.push_back(std::move(e));
  }

  struct Position {
    std::size_t entry;
    std::size_t pos;
  };
  std::size_t k_;
  std::vector<NGramEntry> entries_;
  std::unordered_map<std::string, std::size_t> lookup_;
  std::unordered_map<std::string, std::vector<Position>> word_positions_;
  std::map<std::int64_t, DocMeta> doc_meta_;
};

/// Indexes the word k-grams of every document (documents sorted by id).
inline NGramIndex build_index(std::vector<Document> docs, std::size_t k) {
  std::sort(docs.begin(), docs.end(), [](const Document& a, const Document& b) { return a.id < b.id; });
  NGramIndex idx(k);
  for (const auto& d : docs) idx.add_document(d.id, text::split_words(d.text), {d.category, d.provenance, d.source_url});
  return idx;
}

enum class OverlapCounting {
  occurrences,  // every k-gram occurrence in the evaluation set counts
  types,        // each distinct k-gram of the evaluation set counts once
};

struct OverlapResult {
  std::size_t k = 0;
  std::uint64_t threshold = 1;
  double overlap_percent = 0;  // over texts with at least k words
  double short_percent = 0;    // texts with fewer than k words
  std::uint64_t matched = 0;
  std::uint64_t total = 0;
};

/// Percentage of the evaluation k-grams whose training frequency is at least
/// `threshold`. Texts shorter than k words contribute only to short_percent.
/// With no eligible k-grams the overlap is 0.
inline OverlapResult overlap(const std::vector<std::string>& eval_texts, const NGramIndex& idx, std::uint64_t threshold,
                             OverlapCounting counting = OverlapCounting::occurrences) {
  if (threshold == 0) throw std::invalid_argument("overlap: threshold must be at least 1");
  const std::size_t k = idx.k();
  OverlapResult r;
  r.k = k;
  r.threshold = threshold;
  std::size_t short_texts = 0;
  std::map<std::string, std::uint64_t> seen_types;
  for (const auto& t : eval_texts) {
    auto words = text::split_words(t);
    if (words.size() < k) {
      ++short_texts;
      continue;
    }
    for (std::size_t i = 0; i + k <= words.size(); ++i) {
      std::vector<std::string> gram(words.begin() + static_cast<std::ptrdiff_t>(i),
                                    words.begin() + static_cast<std::ptrdiff_t>(i + k));
      const std::uint64_t tf = idx.tf(gram);
      if (counting == OverlapCounting::types) {
        seen_types.emplace(text::join(gram, " "), tf);
      } else {
        ++r.total;
        if (tf >= threshold) ++r.matched;
      }
    }
  }
  if (counting == OverlapCounting::types) {
    r.total = seen_types.size();
    for (const auto& [_, tf] : seen_types)
      if (tf >= threshold) ++r.matched;
  }
  r.overlap_percent = r.total ? 100.0 * static_cast<double>(r.matched) / static_cast<double>(r.total) : 0.0;
  r.short_percent =
      eval_texts.empty() ? 0.0 : 100.0 * static_cast<double>(short_texts) / static_cast<double>(eval_texts.size());
  return r;
}

struct SearchHit {
  std::vector<std::string> words;
  std::uint64_t tf = 0;
  std::int64_t doc_id = 0;  // representative posting (smallest id)
  DocMeta meta;
};

/// Every indexed k-gram containing the query's words contiguously, in index
/// order, with the metadata of its first document.
inline std::vector<SearchHit> search(const NGramIndex& idx, std::string_view query) {
  auto q = text::split_words(query);
  if (q.empty()) throw std::invalid_argument("search: empty query");
  std::vector<SearchHit> hits;
  for (std::size_t i : idx.containing(q)) {
    const auto& e = idx.entries()[i];
    SearchHit h;
    h.words = e.words;
    h.tf = e.tf;
    h.doc_id = e.postings.front();
    h.meta = idx.doc_meta().at(h.doc_id);
    hits.push_back(std::move(h));
  }
  return hits;
}

/// Text serialization `ngram-index-v1`:
///   ngram-index-v1 k=<k>
///   docs <N>            then "<id>\t<category>\t<m|a>\t<url or ->"
///   entries <E>         then "<tf>\t<id,id,...>\t<k-gram words>"
inline void save_index(std::ostream& out, const NGramIndex& idx) {
  out << "ngram-index-v1 k=" << idx.k() << '\n';
  out << "docs " << idx.doc_meta().size() << '\n';
  for (const auto& [id, m] : idx.doc_meta())
    out << id << '\t' << m.category << '\t' << provenance_code(m.provenance) << '\t' << m.url.value_or("-") << '\n';
  out << "entries " << idx.size() << '\n';
  for (const auto& e : idx.entries()) {
    out << e.tf << '\t';
    for (std::size_t i = 0; i < e.postings.size(); ++i) out << (i ? "," : "") << e.postings[i];
    out << '\t' << text::join(e.words, " ") << '\n';
  }
}

inline NGramIndex read_index(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("ngram-index-v1 k=", 0) != 0)
    throw std::runtime_error("index: bad header");
  const std::size_t k = std::stoull(line.substr(17));
  auto block = [&](const std::string& tag) {
    if (!std::getline(in, line) || line.rfind(tag + " ", 0) != 0) throw std::runtime_error("index: expected " + tag);
    return std::stoull(line.substr(tag.size() + 1));
  };
  std::size_t ndocs = block("docs");
  std::vector<std::pair<std::int64_t, DocMeta>> metas;
  for (std::size_t i = 0; i < ndocs; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("index: truncated docs");
    auto f = text::split(line, '\t');
    if (f.size() != 4) throw std::runtime_error("index: bad doc line");
    DocMeta m{f[1], f[2] == "m" ? Provenance::manual : Provenance::automatic,
              f[3] == "-" ? std::nullopt : std::optional<std::string>(f[3])};
    metas.emplace_back(std::stoll(f[0]), std::move(m));
  }
  std::size_t nentries = block("entries");
  std::vector<NGramEntry> saved;
  for (std::size_t i = 0; i < nentries; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("index: truncated entries");
    auto f = text::split(line, '\t');
    if (f.size() != 3) throw std::runtime_error("index: bad entry line");
    NGramEntry s;
    s.tf = std::stoull(f[0]);
    for (const auto& p : text::split(f[1], ',')) s.postings.push_back(std::stoll(p));
    s.words = text::split_words(f[2]);
    if (s.words.size() != k) throw std::runtime_error("index: entry with wrong arity");
    saved.push_back(std::move(s));
  }
  NGramIndex out(k);
  for (auto& [id, meta] : metas) out.doc_meta_.emplace(id, std::move(meta));
  for (auto& sv : saved) out.insert_entry({std::move(sv.words), sv.tf, std::move(sv.postings)});
  return out;
}

inline void save_index(const std::string& path, const NGramIndex& idx) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write index " + path);
  save_index(out, idx);
}

inline NGramIndex load_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open index " + path);
  return read_index(in);
}

}  // namespace ctrlkit
