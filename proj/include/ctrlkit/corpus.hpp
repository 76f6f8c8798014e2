#pragma once

// Categorized training documents and the control-code taxonomy.

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctrlkit/text.hpp"

namespace ctrlkit {

struct ControlCategory {
  std::string name;
  std::string occ_text;
  std::string ecc_text;
  bool is_major = false;
  std::optional<std::string> parent;
};

/// Opening control code surface: ":name:" with '/' replaced by '_'.
inline std::string occ_surface(std::string_view name) {
  std::string s = ":";
  for (char c : name) s += (c == '/') ? '_' : c;
  s += ':';
  return s;
}

inline std::string ecc_surface(std::string_view name) { return occ_surface(name) + "$"; }

inline ControlCategory make_category(std::string name, bool is_major) {
  ControlCategory c;
  c.occ_text = occ_surface(name);
  c.ecc_text = c.occ_text + "$";
  c.is_major = is_major;
  if (auto slash = name.find('/'); slash != std::string::npos) c.parent = name.substr(0, slash);
  c.name = std::move(name);
  return c;
}

struct CategoryCounts {
  std::uint64_t documents = 0;
  std::uint64_t tokens = 0;
  std::uint64_t characters = 0;
};

class CategoryTable {
 public:
  CategoryTable() = default;

  /// Registers a category. Throws on a duplicate name or control surface,
  /// or on a minor category whose parent is not registered yet.
  void add(ControlCategory category, CategoryCounts counts = {}) {
    if (index_.count(category.name)) throw std::invalid_argument("duplicate category: " + category.name);
    for (const auto& c : categories_) {
      if (c.occ_text == category.occ_text || c.ecc_text == category.ecc_text)
        throw std::invalid_argument("control code collision: " + category.name + " vs " + c.name);
    }
    if (category.parent && !index_.count(*category.parent))
      throw std::invalid_argument("unknown parent category for " + category.name);
    index_.emplace(category.name, categories_.size());
    categories_.push_back(std::move(category));
    counts_.push_back(counts);
  }

  void add(std::string name, bool is_major, CategoryCounts counts = {}) {
    add(make_category(std::move(name), is_major), counts);
  }

  const std::vector<ControlCategory>& categories() const { return categories_; }
  std::size_t size() const { return categories_.size(); }
  bool empty() const { return categories_.empty(); }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  const ControlCategory& at(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw std::out_of_range("unregistered category: " + std::string(name));
    return categories_[it->second];
  }

  const CategoryCounts& counts(std::string_view name) const {
    at(name);
    return counts_[index_.at(std::string(name))];
  }

  /// Categories registered with control codes but no training documents.
  bool is_orphan(std::string_view name) const { return counts(name).documents == 0; }

  /// Sub-table with the named categories, in the order given. Parents of
  /// minor categories must be included.
  CategoryTable subset(const std::vector<std::string>& names) const {
    CategoryTable t;
    for (const auto& n : names) t.add(at(n), counts(n));
    return t;
  }

 private:
  std::vector<ControlCategory> categories_;
  std::vector<CategoryCounts> counts_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// The 37 categories of the released model with their document, token and
/// character counts. Bold rows of the published table are major.
inline CategoryTable default_category_table() {
  struct Row {
    const char* name;
    bool major;
    std::uint64_t docs, tokens, chars;
  };
  // Parents first so that every minor category can reference its parent.
  static const Row rows[] = {
      {"news", true, 1629526, 635179726, 4060209799},
      {"wiki", true, 412421, 151181708, 1095556624},
      {"forum", true, 316664, 212420326, 1244181506},
      {"blogs", true, 297258, 205834053, 1179533133},
      {"ads", true, 260959, 84948629, 587084926},
      {"admin", true, 136495, 169036110, 1185927529},
      {"debate", true, 67831, 68290441, 468393340},
      {"info", true, 34035, 12650622, 82901241},
      {"review", true, 24017, 11614089, 71752874},
      {"literature", true, 297, 1992736, 12274721},
      {"simple", true, 25, 9618, 56865},
      {"news/sport", false, 358016, 149461664, 903154064},
      {"news/pressrelease", false, 277017, 88914953, 621764444},
      {"news/opinion", false, 221010, 113723324, 730484523},
      {"news/culture", false, 150241, 66817491, 419183009},
      {"news/economy", false, 76421, 26637789, 174005712},
      {"info/medical", false, 42952, 18829692, 122089820},
      {"news/tech", false, 30004, 8083200, 49342576},
      {"info/travel", false, 21528, 7713750, 46624552},
      {"forum/law", false, 20982, 13007375, 79398374},
      {"news/lifestyle", false, 20978, 13022322, 78661676},
      {"blogs/sport", false, 13134, 9613961, 58007976},
      {"info/lifestyle", false, 13056, 5780355, 35801351},
      {"news/sustainability", false, 12975, 3951222, 26320596},
      {"forum/sport", false, 12649, 9747421, 56947940},
      {"forum/tech", false, 12286, 4899979, 30984736},
      {"news/travel", false, 10118, 6555937, 41146765},
      {"info/business", false, 8793, 4649150, 28408960},
      {"news/politics", false, 7683, 1870196, 12544739},
      {"news/science", false, 7295, 2849480, 17981928},
      {"news/food", false, 5893, 2415800, 14831815},
      {"forum/travel", false, 3844, 1632462, 10272658},
      {"news/fashion", false, 3278, 1665669, 9610223},
      {"news/weather", false, 841, 477327, 2928822},
      {"blogs/economy", false, 672, 343747, 2214424},
      {"forum/economy", false, 340, 329584, 2051113},
      {"blogs/tech", false, 0, 0, 0},
  };
  CategoryTable table;
  for (const auto& r : rows) table.add(r.name, r.major, {r.docs, r.tokens, r.chars});
  return table;
}

enum class Provenance { manual, automatic };

inline char provenance_code(Provenance p) { return p == Provenance::manual ? 'm' : 'a'; }

struct Document {
  std::int64_t id = 0;
  std::string text;
  std::string category;
  Provenance provenance = Provenance::automatic;
  std::optional<std::string> source_url;
};

class CorpusFormatError : public std::runtime_error {
 public:
  CorpusFormatError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Parses one corpus record: category \t m|a \t url-or-dash \t escaped text.
inline Document parse_corpus_record(std::string_view line, std::size_t line_no, std::int64_t id,
                                    const CategoryTable& table) {
  auto fields = text::split(line, '\t');
  if (fields.size() != 4) throw CorpusFormatError(line_no, "expected 4 tab-separated fields, got " +
                                                               std::to_string(fields.size()));
  Document doc;
  doc.id = id;
  if (!table.contains(fields[0])) throw CorpusFormatError(line_no, "unregistered category '" + fields[0] + "'");
  doc.category = fields[0];
  if (fields[1] == "m") {
    doc.provenance = Provenance::manual;
  } else if (fields[1] == "a") {
    doc.provenance = Provenance::automatic;
  } else {
    throw CorpusFormatError(line_no, "provenance must be 'm' or 'a', got '" + fields[1] + "'");
  }
  if (fields[2] != "-") doc.source_url = fields[2];
  try {
    doc.text = text::unescape(fields[3]);
  } catch (const std::invalid_argument& e) {
    throw CorpusFormatError(line_no, e.what());
  }
  if (doc.text.empty()) throw CorpusFormatError(line_no, "empty document text");
  return doc;
}

inline std::vector<Document> read_corpus(std::istream& in, const CategoryTable& table) {
  std::vector<Document> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    docs.push_back(parse_corpus_record(line, line_no, static_cast<std::int64_t>(docs.size()), table));
  }
  return docs;
}

/// Loads a corpus file. Document ids are assigned in file order from 0.
inline std::vector<Document> load_corpus(const std::string& path, const CategoryTable& table) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file " + path);
  return read_corpus(in, table);
}

inline std::string format_corpus_record(const Document& doc) {
  std::string line = doc.category;
  line += '\t';
  line += provenance_code(doc.provenance);
  line += '\t';
  line += doc.source_url.value_or("-");
  line += '\t';
  line += text::escape(doc.text);
  return line;
}

inline void write_corpus(std::ostream& out, const std::vector<Document>& docs) {
  for (const auto& d : docs) out << format_corpus_record(d) << '\n';
}

}  // namespace ctrlkit
