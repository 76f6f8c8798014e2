#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "ctrlkit/checkpoint_io.hpp"
#include "ctrlkit/model.hpp"
#include "ctrlkit/trainer.hpp"

using namespace ctrlkit;

namespace {

std::string fixture(const std::string& name) { return std::string(CTRLKIT_FIXTURES) + "/" + name; }

std::uint64_t tensor_sum(const ModelConfig& c) {
  auto w = Weights<float>::zeros(c);
  std::uint64_t n = 0;
  for_each_tensor(c, w, [&](const TensorInfo& info, std::vector<float>& t) {
    std::uint64_t prod = 1;
    for (auto s : info.shape) prod *= s;
    EXPECT_EQ(prod, t.size()) << info.name;
    n += t.size();
  });
  return n;
}

}  // namespace

// Frozen from torch meta-device modules with the same layout.
TEST(ParamCount, MatchesTorchOracle) {
  EXPECT_EQ(param_count(ModelConfig::swectrl_mini(256037)), 494895525u);
  EXPECT_EQ(param_count(ModelConfig::ctrl_original(256037)), 1650137893u);
  EXPECT_EQ(param_count(ModelConfig{}), 1666u);
}

TEST(ParamCount, RoughlyAThirdOfOriginal) {
  const double ratio = static_cast<double>(param_count(ModelConfig::swectrl_mini(256037))) /
                       static_cast<double>(param_count(ModelConfig::ctrl_original(256037)));
  EXPECT_GE(ratio, 0.28);
  EXPECT_LE(ratio, 0.40);
}

TEST(ParamCount, EqualsStoredTensorSizes) {
  for (const ModelConfig& c : {ModelConfig{}, ModelConfig{3, 4, 16, 24, 32, 77}, ModelConfig{1, 1, 2, 3, 2, 5}})
    EXPECT_EQ(param_count(c), tensor_sum(c));
}

TEST(ModelConfig, RejectsBadShapes) {
  EXPECT_THROW((ModelConfig{2, 3, 8, 16, 16, 50}.validate()), std::invalid_argument);
  EXPECT_THROW((ModelConfig{2, 2, 8, 16, 1, 50}.validate()), std::invalid_argument);
  EXPECT_THROW((ModelConfig{0, 2, 8, 16, 16, 50}.validate()), std::invalid_argument);
}

TEST(Forward, MatchesTorchOracleLogits) {
  auto ck = load_checkpoint(fixture("tiny.ckpt"));
  std::ifstream in(fixture("tiny_logits.txt"));
  ASSERT_TRUE(in);
  std::string header;
  std::getline(in, header);
  auto ids_at = header.find("ids=");
  ASSERT_NE(ids_at, std::string::npos);
  std::vector<TokenId> ids;
  std::stringstream ss(header.substr(ids_at + 4));
  for (std::string tok; std::getline(ss, tok, ',');) ids.push_back(static_cast<TokenId>(std::stoi(tok)));
  ASSERT_EQ(ids.size(), 16u);

  auto logits = forward(ck, std::span<const TokenId>(ids));
  ASSERT_EQ(logits.rows(), 16u);
  ASSERT_EQ(logits.cols(), 50u);
  double worst = 0;
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t v = 0; v < 50; ++v) {
      double expect;
      ASSERT_TRUE(in >> expect);
      worst = std::max(worst, std::abs(expect - static_cast<double>(logits(t, v))));
    }
  EXPECT_LT(worst, 2e-5);
}

TEST(Forward, IsCausal) {
  auto ck = init_model<double>(ModelConfig{}, 3);
  std::vector<TokenId> a{1, 2, 3, 4, 5, 6}, b{1, 2, 3, 9, 9, 9};
  auto la = forward(ck, std::span<const TokenId>(a));
  auto lb = forward(ck, std::span<const TokenId>(b));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t v = 0; v < 50; ++v) EXPECT_DOUBLE_EQ(la(t, v), lb(t, v));
}

TEST(Forward, RejectsOutOfRangeInput) {
  auto ck = init_model<float>(ModelConfig{}, 3);
  std::vector<TokenId> bad{1, 50};
  EXPECT_ANY_THROW(forward(ck, std::span<const TokenId>(bad)));
  std::vector<TokenId> too_long(17, 1);
  EXPECT_ANY_THROW(forward(ck, std::span<const TokenId>(too_long)));
}

TEST(Init, SeedDeterminesWeights) {
  auto a = init_model<float>(ModelConfig{}, 5), b = init_model<float>(ModelConfig{}, 5),
       c = init_model<float>(ModelConfig{}, 6);
  EXPECT_EQ(a.weights.tok_emb, b.weights.tok_emb);
  EXPECT_NE(a.weights.tok_emb, c.weights.tok_emb);
}

TEST(Init, TiedProjectionAliasesEmbedding) {
  auto ck = init_model<float>(ModelConfig{}, 5);
  EXPECT_EQ(&ck.tensor(kTiedOutputName), &ck.tensor(kEmbeddingName));
  EXPECT_THROW(ck.tensor("nope"), std::out_of_range);
}

// Central differences on the summed NLL in double precision.
TEST(Backward, MatchesFiniteDifferences) {
  auto ck = load_checkpoint(fixture("tiny.ckpt")).cast<double>();
  TrainingWindow w;
  w.ids = {4, 17, 3, 3, 42, 8, 0, 21, 11, 5, 49, 2};
  w.target.assign(w.ids.size(), 1);
  w.target[0] = 0;
  w.target[5] = 0;

  auto grads = Weights<double>::zeros(ck.config);
  accumulate_window_gradient(ck, w, 1.0, grads);
  auto loss = [&](const BasicCheckpoint<double>& m) { return lm_loss(m, w) * static_cast<double>(w.target_count()); };

  std::vector<std::pair<std::string, std::vector<double>*>> gs;
  for_each_tensor(ck.config, grads, [&](const TensorInfo& info, std::vector<double>& t) { gs.emplace_back(info.name, &t); });
  std::mt19937_64 rng(1);
  std::size_t checked = 0;
  for (auto& [name, g] : gs) {
    auto& p = ck.tensor(name);
    std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
    for (int s = 0; s < 6; ++s) {
      const std::size_t i = pick(rng);
      const double h = 1e-5, orig = p[i];
      p[i] = orig + h;
      const double up = loss(ck);
      p[i] = orig - h;
      const double down = loss(ck);
      p[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = (*g)[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-4});
      EXPECT_LT(std::abs(numeric - analytic) / denom, 1e-4) << name << "[" << i << "] " << numeric << " vs " << analytic;
      ++checked;
    }
  }
  EXPECT_EQ(checked, gs.size() * 6);
}

TEST(CheckpointIo, RoundTripIsBitExact) {
  auto ck = init_model<float>(ModelConfig{1, 2, 4, 6, 8, 11}, 9);
  ck.step = 42;
  std::stringstream buf;
  write_checkpoint(buf, ck);
  auto back = read_checkpoint(buf);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.step, 42);
  EXPECT_EQ(back.seed, 9u);
  for_each_tensor(ck.config, ck.weights, [&](const TensorInfo& info, std::vector<float>& t) {
    EXPECT_EQ(back.tensor(info.name), t) << info.name;
  });
  std::stringstream again;
  write_checkpoint(again, back);
  std::stringstream first;
  write_checkpoint(first, ck);
  EXPECT_EQ(first.str(), again.str());
}

TEST(CheckpointIo, RejectsCorruptInput) {
  auto ck = init_model<float>(ModelConfig{1, 2, 4, 6, 8, 11}, 9);
  std::stringstream buf;
  write_checkpoint(buf, ck);
  const std::string good = buf.str();
  {
    std::stringstream bad("not-a-checkpoint\n");
    EXPECT_THROW(read_checkpoint(bad), std::runtime_error);
  }
  {
    std::stringstream bad(good.substr(0, good.size() - 7));
    EXPECT_THROW(read_checkpoint(bad), std::runtime_error);
  }
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), std::runtime_error);
}

TEST(ExtendVocab, KeepsExistingRowsAndGrows) {
  auto ck = init_model<float>(ModelConfig{}, 2);
  auto before = ck.weights.tok_emb;
  extend_vocab(ck, 53, 77);
  EXPECT_EQ(ck.config.vocab_size, 53u);
  EXPECT_EQ(ck.weights.tok_emb.size(), 53u * 8);
  EXPECT_EQ(ck.weights.out_bias.size(), 53u);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), ck.weights.tok_emb.begin()));
  EXPECT_EQ(param_count(ck.config), tensor_sum(ck.config));
  EXPECT_THROW(extend_vocab(ck, 10, 1), std::invalid_argument);
  std::vector<TokenId> ids{52, 1};
  EXPECT_NO_THROW(forward(ck, std::span<const TokenId>(ids)));
}
