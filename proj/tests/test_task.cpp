#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "ctrlkit/task.hpp"
#include "test_util.hpp"

using namespace ctrlkit;
using nlohmann::json;

namespace {

// Vocabulary whose BPE keeps " [...]" within a few tokens.
Vocab task_vocab() {
  std::vector<Document> docs{ctrlkit::testing::make_doc(0, "news", "ord [...] text [...] mer ord och fler ord"),
                             ctrlkit::testing::make_doc(1, "news", "Ja Nej Kanske 1 2 3 4 5 . ,")};
  return add_control_codes(train_bpe(docs, 1.0, 120), ctrlkit::testing::two_genre_table());
}

std::vector<TokenId> fake_prompt(std::size_t n) {
  std::vector<TokenId> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<TokenId>(i % 7);
  return p;
}

}  // namespace

// ------------------------------------------------------------------ budget

TEST(PromptBudget, FirstBranchIs245) {
  PromptBudget b;
  EXPECT_EQ(compute_hp(100, 5, b), 245u);
  EXPECT_EQ(compute_hp(244, 5, b), 245u);  // 244 + 5 + 2 = 251 = n - δ
}

TEST(PromptBudget, SecondBranchReservesLabel) {
  PromptBudget b;
  EXPECT_EQ(compute_hp(300, 20, b), 229u);
  EXPECT_EQ(compute_hp(245, 5, b), 244u);
  EXPECT_THROW(compute_hp(10, 249, b), std::invalid_argument);
}

TEST(PromptBudget, TruncationKeepsHeadAndTail) {
  auto v = task_vocab();
  PromptBudget b;
  const auto sep = encode(v, " " + b.separator);
  ASSERT_LE(sep.size(), b.reserve);
  const TokenId occ = v.control("news").occ;

  auto small = build_prompt(fake_prompt(100), 5, occ, v, b);
  EXPECT_EQ(small.size(), 101u);
  EXPECT_EQ(small[0], occ);

  auto p = fake_prompt(400);
  auto out = build_prompt(p, 20, occ, v, b);
  ASSERT_EQ(out.size(), 1 + 114 + sep.size() + 114);
  EXPECT_EQ(out[0], occ);
  EXPECT_TRUE(std::equal(p.begin(), p.begin() + 114, out.begin() + 1));
  EXPECT_TRUE(std::equal(sep.begin(), sep.end(), out.begin() + 115));
  EXPECT_TRUE(std::equal(p.end() - 114, p.end(), out.end() - 114));
  // Prompt + label + both control codes always fit the context.
  EXPECT_LE(out.size() + 20 + 1, 256u);
}

TEST(PromptBudget, EverythingFitsForRandomLengths) {
  auto v = task_vocab();
  PromptBudget b;
  std::mt19937_64 rng(4);
  for (int i = 0; i < 300; ++i) {
    const std::size_t P = rng() % 600, L = 1 + rng() % 200;
    auto out = build_prompt(fake_prompt(P), L, 0, v, b);
    EXPECT_LE(out.size() + L + 1, b.context) << P << " " << L;
    if (P <= compute_hp(P, L, b)) EXPECT_EQ(out.size(), P + 1);
  }
}

// --------------------------------------------------------------- rendering

TEST(Rendering, SweDnOrdering) {
  auto spec = find_task("swedn");
  json dp = {{"text", "Regeringen presenterade budgeten i dag."}, {"label", "Budgeten presenterades."}};
  EXPECT_EQ(render_datapoint(dp, spec),
            ":swedn: Regeringen presenterade budgeten i dag. Sammanfattning: Budgeten presenterades. :swedn:$");
}

TEST(Rendering, TemplatesFillEveryPlaceholder) {
  json dp = {{"text", "T"},        {"w1", "han"},     {"w2", "Per"},     {"premise", "P"},       {"question", "Q"},
             {"hypothesis", "H"},  {"answer", "A"},   {"group", "g1"},   {"sentence1", "S1"},    {"sentence2", "S2"},
             {"text1", "T1"},      {"text2", "T2"},   {"word", "ord"},   {"label", "Ja"}};
  auto tasks = default_tasks();
  EXPECT_EQ(tasks.size(), 11u);
  for (const auto& t : tasks) {
    EXPECT_NO_THROW(t.validate()) << t.name;
    auto s = render_prompt(dp, t);
    EXPECT_EQ(s.find('{'), std::string::npos) << t.name;
    EXPECT_EQ(t.ecc_text(), t.occ_text() + "$");
  }
  EXPECT_THROW(render_prompt(json{{"x", 1}}, find_task("swewic")), std::invalid_argument);
  EXPECT_THROW(find_task("nope"), std::invalid_argument);
}

TEST(Rendering, DatapointIdsEndWithLabelAndEcc) {
  auto v = task_vocab();
  Checkpoint ck = init_model<float>(ModelConfig{1, 1, 4, 4, 256, v.size()}, 1);
  auto spec = find_task("dalaj-ged");
  add_task_codes(ck, v, spec);
  EXPECT_EQ(ck.config.vocab_size, v.size());
  json dp = {{"text", "mer ord"}, {"label", "Nej"}};
  auto ids = datapoint_ids(dp, spec, v, PromptBudget{});
  EXPECT_EQ(ids.front(), v.control("dalaj-ged").occ);
  EXPECT_EQ(ids.back(), v.control("dalaj-ged").ecc);
  auto lab = label_ids(v, "Nej");
  EXPECT_TRUE(std::equal(lab.begin(), lab.end(), ids.end() - 1 - static_cast<long>(lab.size())));
}

// ---------------------------------------------------------------- parsing

TEST(ParseLabel, FiniteScoreAndSummary) {
  auto yn = find_task("swewinograd");
  EXPECT_EQ(parse_label("Ja, det stämmer", yn).text, "Ja");
  EXPECT_EQ(parse_label(" nej :swewinograd:$ junk", yn).text, "Nej");
  EXPECT_TRUE(parse_label("kanske", yn).missing());
  auto fracas = find_task("swefracas");
  EXPECT_EQ(parse_label("Vet ej riktigt", fracas).text, "Vet ej");

  auto absa = find_task("absabank-imm");
  EXPECT_TRUE(parse_label("kanske imorgon", absa).missing());
  auto s = parse_label("Känsloläge: 3.5", absa);
  EXPECT_EQ(s.kind, ParsedLabel::Kind::score);
  EXPECT_DOUBLE_EQ(s.score, 3.5);
  EXPECT_DOUBLE_EQ(parse_label("-2,25 poäng", absa).score, -2.25);

  auto swedn = find_task("swedn");
  EXPECT_EQ(parse_label(" En kort text. :swedn:$", swedn).text, "En kort text.");
  EXPECT_TRUE(parse_label("  :swedn:$", swedn).missing());
}

TEST(ParseLabel, RoundingStep) {
  EXPECT_DOUBLE_EQ(round_to_step(3.4, 1.0), 3.0);
  EXPECT_DOUBLE_EQ(round_to_step(3.6, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(round_to_step(3.37, std::nullopt), 3.37);
}

// ---------------------------------------------------------------- metrics

TEST(PseudoAlpha, ClosedFormValues) {
  EXPECT_NEAR(pseudo_alpha(0.9457), 0.9426, 1e-4);
  EXPECT_NEAR(pseudo_alpha(0.9457), 0.94264912371134024, 1e-12);
  EXPECT_EQ(pseudo_alpha(109.0 / 2049.0), 0.0);
  EXPECT_DOUBLE_EQ(pseudo_alpha(1.0), 1.0);
  EXPECT_THROW(pseudo_alpha(1.2), std::invalid_argument);
}

// Frozen from an independent pairwise-disagreement implementation.
TEST(Alpha, NominalMatchesOracle) {
  EXPECT_NEAR(*krippendorff_alpha_nominal({"Ja", "Ja", "Nej", "Nej", "Ja", "Kanske", "Nej", "Ja", "Kanske", "Nej"},
                                          {"Ja", "Nej", "Nej", "Nej", "Ja", "Ja", "Nej", "Ja", "Kanske", "Ja"}),
              0.53658536585365857, 1e-9);
  EXPECT_NEAR(*krippendorff_alpha_nominal({"a", "a", "a", "b", "b", "b"}, {"a", "a", "b", "b", "b", "a"}),
              0.38888888888888884, 1e-9);
  EXPECT_NEAR(*krippendorff_alpha_nominal({"Ja", "Nej", "Ja", "Nej", "Ja", "Nej", "Ja", "Nej"},
                                          std::vector<std::string>(8, "Ja")),
              -0.25, 1e-9);
}

TEST(Alpha, IntervalMatchesOracle) {
  EXPECT_NEAR(*krippendorff_alpha_interval({1, 2, 3, 4, 5, 3, 2}, {1, 3, 3, 5, 4, 2, 2}), 0.82894736842105265, 1e-9);
  EXPECT_NEAR(*krippendorff_alpha_interval({0.5, 1.2, 3.3, 4.0, 2.2}, {0.7, 1.0, 3.9, 3.5, 2.5}), 0.95780235633565758,
              1e-9);
  EXPECT_NEAR(*krippendorff_alpha_interval({1, 1, 2, 2, 3, 3}, std::vector<double>(6, 2)), 0.08333333333333337, 1e-9);
}

TEST(Alpha, PerfectAgreementAndDegenerateCases) {
  EXPECT_DOUBLE_EQ(*krippendorff_alpha_nominal({"a", "b", "c", "a"}, {"a", "b", "c", "a"}), 1.0);
  EXPECT_DOUBLE_EQ(*krippendorff_alpha_interval({1, 5, 2.5}, {1, 5, 2.5}), 1.0);
  EXPECT_FALSE(krippendorff_alpha_nominal({"a", "a"}, {"a", "a"}).has_value());
  EXPECT_THROW(krippendorff_alpha_nominal({"a"}, {"a"}), std::invalid_argument);
  EXPECT_THROW(krippendorff_alpha_nominal({"a", "b"}, {"a"}), std::invalid_argument);
}

TEST(Alpha, NeverExceedsOne) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> a(2 + rng() % 20), b(a.size());
    for (auto& x : a) x = static_cast<double>(rng() % 5);
    for (auto& x : b) x = static_cast<double>(rng() % 5);
    if (auto al = krippendorff_alpha_interval(a, b)) EXPECT_LE(*al, 1.0 + 1e-12);
  }
}

TEST(Spearman, MatchesOracleAndExtremes) {
  EXPECT_NEAR(*spearman_rho({1, 2, 3, 4, 5}, {5, 6, 7, 8, 7}), 0.82078268166812329, 1e-9);
  EXPECT_NEAR(*spearman_rho({1, 2, 2, 3, 4}, {2, 2, 3, 3, 5}), 0.86518091269740016, 1e-9);
  EXPECT_NEAR(*spearman_rho({3.5, 1.0, 2.2, 4.8, 0.1, 2.2}, {3, 1, 2, 5, 1, 3}), 0.94040325859178808, 1e-9);
  EXPECT_DOUBLE_EQ(*spearman_rho({1, 2, 3}, {10, 20, 30}), 1.0);
  EXPECT_DOUBLE_EQ(*spearman_rho({1, 2, 3}, {3, 2, 1}), -1.0);
  EXPECT_FALSE(spearman_rho({1, 1, 1}, {1, 2, 3}).has_value());
}

TEST(RougeL, MatchesOracleAndExtremes) {
  EXPECT_NEAR(rouge_l("police killed the gunman", "police kill the gunman"), 0.75, 1e-12);
  EXPECT_NEAR(rouge_l("the gunman was shot by police", "police killed the gunman"), 0.40000000000000002, 1e-12);
  EXPECT_NEAR(rouge_l("a b c d e f g", "a x c y e z g q"), 0.53333333333333333, 1e-12);
  EXPECT_DOUBLE_EQ(rouge_l("same text here", "same text here"), 1.0);
  EXPECT_DOUBLE_EQ(rouge_l("a b", "c d"), 0.0);
}

// -------------------------------------------------------------- baselines

TEST(Baselines, MajorityAndFirstSentence) {
  EXPECT_EQ(majority_baseline({"Ja", "Ja", "Nej"}), (std::vector<std::string>{"Ja", "Ja", "Ja"}));
  EXPECT_EQ(majority_label({"Nej", "Ja", "Ja", "Nej"}), "Nej");
  EXPECT_EQ(first_sentence_baseline("A b c. D e."), "A b c.");
  EXPECT_EQ(first_sentence_baseline("inga punkter här"), "inga punkter här");
  EXPECT_EQ(first_sentence_baseline("Det kostar ca. tio kr. Sedan hände det."), "Det kostar ca. tio kr.");
  EXPECT_EQ(first_sentence_baseline("Vad? Är det Åsa! Ja."), "Vad?");
  EXPECT_THROW(first_sentence_baseline("  "), std::invalid_argument);
}

TEST(Baselines, BalancedMajorityIsChanceWithNegativeAlpha) {
  auto spec = find_task("dalaj-ged");
  std::vector<Datapoint> data;
  for (int i = 0; i < 400; ++i) data.push_back(json{{"text", "x"}, {"label", i % 2 ? "Nej" : "Ja"}});
  auto ev = evaluate_baseline(spec, data);
  ASSERT_EQ(ev.metrics.size(), 2u);
  EXPECT_EQ(ev.metrics[0].name, "alpha");
  EXPECT_LT(*ev.metrics[0].value, 0.0);
  EXPECT_DOUBLE_EQ(*ev.metrics[1].value, 0.5);
  EXPECT_DOUBLE_EQ(ev.missing_percent, 0.0);
}

TEST(Scoring, MissingPredictionsAreDroppedFromAlpha) {
  auto spec = find_task("swenli");
  std::vector<Datapoint> data{json{{"label", "Ja"}}, json{{"label", "Nej"}}, json{{"label", "Kanske"}},
                              json{{"label", "Ja"}}};
  std::vector<ParsedLabel> preds{{ParsedLabel::Kind::label, "Ja", 0},
                                 {ParsedLabel::Kind::label, "Nej", 0},
                                 {},
                                 {ParsedLabel::Kind::label, "Ja", 0}};
  auto ev = score_predictions(spec, data, preds);
  EXPECT_DOUBLE_EQ(ev.missing_percent, 25.0);
  EXPECT_DOUBLE_EQ(*ev.metrics[0].value, 1.0);   // alpha over 3 agreeing pairs
  EXPECT_DOUBLE_EQ(*ev.metrics[1].value, 0.75);  // accuracy counts the miss
  std::ostringstream out;
  write_task_rows(out, spec, "3", ev);
  EXPECT_EQ(out.str(), "swenli,3,alpha,1.000000,25.00\nswenli,3,accuracy,0.750000,25.00\n");
}

TEST(Scoring, SummaryReportsMedianAndMeanRouge) {
  auto spec = find_task("swedn");
  std::vector<Datapoint> data{json{{"text", "x"}, {"label", "a b c"}}, json{{"text", "y"}, {"label", "d e"}}};
  auto ev = score_predictions(spec, data,
                              {{ParsedLabel::Kind::summary, "a b c", 0}, {ParsedLabel::Kind::summary, "x y", 0}});
  ASSERT_EQ(ev.metrics.size(), 2u);
  EXPECT_EQ(ev.metrics[0].name, "rouge_l_median");
  EXPECT_DOUBLE_EQ(*ev.metrics[0].value, 0.5);
  EXPECT_DOUBLE_EQ(*ev.metrics[1].value, 0.5);
}

TEST(TaskData, ReadsJsonLines) {
  std::stringstream in("{\"text\":\"a\",\"label\":\"Ja\"}\n\n{\"text\":\"b\",\"label\":3}\n");
  auto d = read_task_data(in);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(json_field_text(d[1], "label"), "3");
  std::stringstream bad("{oops\n");
  EXPECT_THROW(read_task_data(bad), std::invalid_argument);
}
