#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "ctrlkit/corpus.hpp"

using namespace ctrlkit;

TEST(CategoryTable, DefaultHas37CategoriesWithTableCounts) {
  const auto t = default_category_table();
  EXPECT_EQ(t.size(), 37u);
  EXPECT_EQ(t.counts("news").documents, 1629526u);
  EXPECT_EQ(t.counts("news").tokens, 635179726u);
  EXPECT_EQ(t.counts("blogs/tech").documents, 0u);
  EXPECT_TRUE(t.is_orphan("blogs/tech"));
  EXPECT_FALSE(t.is_orphan("simple"));
  EXPECT_EQ(t.counts("simple").characters, 56865u);
  EXPECT_EQ(t.at("wiki").ecc_text, ":wiki:$");
}

TEST(CategoryTable, BoldRowsAreMajor) {
  const auto t = default_category_table();
  std::set<std::string> major;
  for (const auto& c : t.categories())
    if (c.is_major) major.insert(c.name);
  const std::set<std::string> bold = {"news",   "wiki", "forum",  "blogs",      "ads",   "admin",
                                      "debate", "info", "review", "literature", "simple"};
  EXPECT_EQ(major, bold);
  EXPECT_EQ(t.size() - major.size(), 26u);
}

TEST(CategoryTable, ControlSurfacesAreBijective) {
  const auto t = default_category_table();
  std::set<std::string> surfaces;
  for (const auto& c : t.categories()) {
    EXPECT_EQ(c.ecc_text, c.occ_text + "$");
    EXPECT_TRUE(surfaces.insert(c.occ_text).second);
    EXPECT_TRUE(surfaces.insert(c.ecc_text).second);
    if (c.parent) {
      EXPECT_EQ(c.name.substr(0, c.name.find('/')), *c.parent);
      EXPECT_TRUE(t.contains(*c.parent));
    }
  }
  EXPECT_EQ(t.at("news/sport").occ_text, ":news_sport:");
}

TEST(CategoryTable, RejectsDuplicatesAndUnknownParents) {
  CategoryTable t;
  t.add("news", true);
  EXPECT_THROW(t.add("news", true), std::invalid_argument);
  EXPECT_THROW(t.add("blogs/tech", false), std::invalid_argument);
  // "a/b" and "a_b" would share the surface ":a_b:".
  t.add("a", true);
  t.add("a/b", false);
  EXPECT_THROW(t.add("a_b", true), std::invalid_argument);
}

TEST(Corpus, EmptyFileGivesNoDocuments) {
  std::istringstream in("");
  EXPECT_TRUE(read_corpus(in, default_category_table()).empty());
}

TEST(Corpus, ReadsFixtureRecords) {
  auto docs = load_corpus(CTRLKIT_FIXTURES "/two_records.corpus", default_category_table());
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(docs[0].category, "news");
  EXPECT_EQ(docs[0].text, "Första raden\nAndra raden");
  EXPECT_EQ(docs[0].provenance, Provenance::automatic);
  EXPECT_EQ(docs[0].source_url, "https://example.se/a");
  EXPECT_EQ(docs[1].category, "wiki");
  EXPECT_EQ(docs[1].provenance, Provenance::manual);
  EXPECT_FALSE(docs[1].source_url);
  EXPECT_EQ(docs[1].id, 1);
}

TEST(Corpus, UnknownCategoryNamesTheCategoryAndLine) {
  std::istringstream in("news\ta\t-\tok\nnonsense\ta\t-\ttext\n");
  try {
    read_corpus(in, default_category_table());
    FAIL() << "expected an error";
  } catch (const CorpusFormatError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("nonsense"), std::string::npos);
  }
}

TEST(Corpus, MalformedRecordsAreRejected) {
  const auto t = default_category_table();
  for (std::string bad : {"news\ta\t-", "news\tx\t-\ttext", "news\ta\t-\t", "news\ta\t-\tbad\\q"}) {
    std::istringstream in(bad + "\n");
    EXPECT_THROW(read_corpus(in, t), CorpusFormatError) << bad;
  }
}

TEST(Corpus, WriteReadRoundTrip) {
  std::vector<Document> docs(2);
  docs[0].category = "forum/law";
  docs[0].text = "tab\there\\ and\nnewline";
  docs[0].source_url = "http://x";
  docs[1].id = 1;
  docs[1].category = "simple";
  docs[1].text = "ä";
  docs[1].provenance = Provenance::manual;
  std::stringstream ss;
  write_corpus(ss, docs);
  auto back = read_corpus(ss, default_category_table());
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].text, docs[i].text);
    EXPECT_EQ(back[i].category, docs[i].category);
    EXPECT_EQ(back[i].source_url, docs[i].source_url);
    EXPECT_EQ(back[i].provenance, docs[i].provenance);
  }
}
