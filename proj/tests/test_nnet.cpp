// Copyright 2026 The CAR Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "car/error.hpp"
#include "car/nnet.hpp"
#include "support.hpp"

namespace car {
namespace {

using testing::random_params;
using testing::tiny_config;

// [BOS, chunk(a), chunk(b)] for the tiny layout.
std::vector<TokenId> two_chunks(const VocabLayout& layout, const std::vector<SidTuple>& sids,
                                std::int32_t a, std::int32_t b) {
  std::vector<TokenId> out{kBosToken};
  for (auto item : {a, b}) {
    const auto c = build_chunk(item, sids[item], layout);
    out.insert(out.end(), c.sid_tokens.begin(), c.sid_tokens.end());
    out.push_back(c.uid_token);
  }
  return out;
}

TEST(FuseInputs, FirstChunkTokenIsItsOwnEmbedding) {
  const auto cfg = tiny_config(2, 4, 6);
  const auto p = random_params<double>(cfg, 1);
  const auto layout = cfg.layout();
  const auto sids = testing::random_sids(6, 2, 4, 2);
  const auto tokens = two_chunks(layout, sids, 1, 4);
  const auto fused = fuse_inputs<double>(tokens, layout, p, true);
  ASSERT_EQ(fused.rows(), 7);
  EXPECT_TRUE(fused.row(0) == p.token_embedding.row(kBosToken));
  EXPECT_TRUE(fused.row(1) == p.token_embedding.row(tokens[1]));
  EXPECT_TRUE(fused.row(4) == p.token_embedding.row(tokens[4]));
}

TEST(FuseInputs, UidPositionSumsChunkPrefix) {
  const auto cfg = tiny_config(2, 4, 6);
  const auto p = random_params<double>(cfg, 3);
  const auto layout = cfg.layout();
  const auto sids = testing::random_sids(6, 2, 4, 4);
  const auto tokens = two_chunks(layout, sids, 2, 5);
  const auto fused = fuse_inputs<double>(tokens, layout, p, true);
  const auto& E = p.token_embedding;
  for (int base : {0, 3}) {
    EXPECT_LT((fused.row(base + 2) - (E.row(tokens[base + 2]) + E.row(tokens[base + 1]))).norm(), 1e-12);
    EXPECT_LT((fused.row(base + 3) - (E.row(tokens[base + 3]) + E.row(tokens[base + 1]) +
                                      E.row(tokens[base + 2])))
                  .norm(),
              1e-12);
  }
  const auto plain = fuse_inputs<double>(tokens, layout, p, false);
  for (Eigen::Index r = 0; r < plain.rows(); ++r) EXPECT_TRUE(plain.row(r) == E.row(tokens[r]));
}

TEST(FuseInputs, ZeroEmbeddingsFuseToZero) {
  const auto cfg = tiny_config(2, 4, 6);
  auto p = random_params<double>(cfg, 5);
  p.token_embedding.setZero();
  const auto sids = testing::random_sids(6, 2, 4, 6);
  const auto tokens = two_chunks(cfg.layout(), sids, 0, 3);
  EXPECT_TRUE(fuse_inputs<double>(tokens, cfg.layout(), p, true).isZero(0.0));
}

TEST(Forward, ShapesForSingleBos) {
  ModelConfig cfg;
  cfg.levels = 4;
  cfg.k = 256;
  cfg.num_items = 100;
  cfg.dropout = 0.0;
  const auto p = init_params<float>(cfg, 1);
  const std::vector<TokenId> bos{kBosToken};
  const auto trace = forward<float>(bos, p, cfg, HeadRequest::all(1, 4), ForwardMode::kEval);
  EXPECT_EQ(trace.hidden.rows(), 1);
  EXPECT_EQ(trace.hidden.cols(), 128);
  ASSERT_EQ(trace.logits.size(), 5u);
  for (int l = 0; l < 4; ++l) {
    EXPECT_EQ(trace.logits[l].rows(), 1);
    EXPECT_EQ(trace.logits[l].cols(), 256);
  }
  EXPECT_EQ(trace.logits[4].cols(), 100);
}

TEST(Forward, ZeroHeadsGiveZeroLogits) {
  const auto cfg = tiny_config(2, 4, 6);
  auto p = random_params<double>(cfg, 7);
  for (auto& w : p.think_w) w.setZero();
  for (auto& b : p.think_b) b.setZero();
  p.act_w.setZero();
  p.act_b.setZero();
  const auto tokens = two_chunks(cfg.layout(), testing::random_sids(6, 2, 4, 8), 1, 2);
  const auto trace = forward<double>(tokens, p, cfg, HeadRequest::all(tokens.size(), 2),
                                     ForwardMode::kEval);
  for (const auto& l : trace.logits) EXPECT_TRUE(l.isZero(0.0));
}

TEST(Forward, AttentionRowsSumToOneOverCausalPrefix) {
  const auto cfg = tiny_config(2, 4, 6);
  const auto p = random_params<double>(cfg, 9);
  const auto tokens = two_chunks(cfg.layout(), testing::random_sids(6, 2, 4, 10), 0, 5);
  const auto trace = forward<double>(tokens, p, cfg, HeadRequest::none(2), ForwardMode::kEval);
  for (const auto& probs : trace.blocks[0].probs) {
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      EXPECT_NEAR(probs.row(i).sum(), 1.0, 1e-12);
      for (Eigen::Index j = i + 1; j < probs.cols(); ++j) EXPECT_EQ(probs(i, j), 0.0);
    }
  }
}

TEST(Forward, Causality) {
  auto cfg = tiny_config(2, 4, 6);
  cfg.layers = 2;
  const auto p = random_params<double>(cfg, 11);
  const auto sids = testing::random_sids(6, 2, 4, 12);
  const auto tokens = two_chunks(cfg.layout(), sids, 0, 1);
  const auto all = HeadRequest::all(tokens.size(), 2);
  const auto base = forward<double>(tokens, p, cfg, all, ForwardMode::kEval);
  for (std::size_t pos = 1; pos < tokens.size(); ++pos) {
    auto changed = tokens;
    changed[pos] = changed[pos] == kBosToken + 1 ? kBosToken + 2 : kBosToken + 1;
    const auto t = forward<double>(changed, p, cfg, all, ForwardMode::kEval);
    for (std::size_t q = 0; q < pos; ++q) {
      EXPECT_TRUE(t.hidden.row(q) == base.hidden.row(q)) << "pos " << pos << " row " << q;
      for (std::size_t h = 0; h < t.logits.size(); ++h) {
        EXPECT_TRUE(t.logits[h].row(q) == base.logits[h].row(q));
      }
    }
    EXPECT_FALSE(t.hidden.row(pos) == base.hidden.row(pos));
  }
}

TEST(Forward, LengthOverflowIsAnError) {
  auto cfg = tiny_config(2, 4, 6);
  cfg.max_chunks = 2;
  const auto p = random_params<float>(cfg, 13);
  const std::vector<TokenId> tokens(cfg.max_positions() + 1, kBosToken);
  EXPECT_THROW(forward<float>(tokens, p, cfg, HeadRequest::none(2), ForwardMode::kEval), Error);
}

std::vector<Mat<double>> unit_logit_grads(const ForwardTrace<double>& trace, std::uint64_t seed,
                                          double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, 1);
  std::vector<Mat<double>> out;
  for (const auto& l : trace.logits) {
    Mat<double> g(l.rows(), l.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = scale * d(rng);
    out.push_back(g);
  }
  return out;
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const auto cfg = tiny_config(2, 4, 6);
  const auto p = random_params<double>(cfg, 14);
  const auto tokens = two_chunks(cfg.layout(), testing::random_sids(6, 2, 4, 15), 3, 4);
  const auto trace = forward<double>(tokens, p, cfg, HeadRequest::all(tokens.size(), 2),
                                     ForwardMode::kEval);
  auto grads = zero_params<double>(cfg);
  backward<double>(trace, p, cfg, unit_logit_grads(trace, 0, 0.0), grads);
  grads.for_each([](const std::string& name, const Mat<double>& m) {
    EXPECT_TRUE(m.isZero(0.0)) << name;
  });
}

TEST(Backward, DuplicateExampleDoublesGradient) {
  const auto cfg = tiny_config(2, 4, 6);
  const auto p = random_params<double>(cfg, 16);
  const auto tokens = two_chunks(cfg.layout(), testing::random_sids(6, 2, 4, 17), 2, 0);
  const auto trace = forward<double>(tokens, p, cfg, HeadRequest::all(tokens.size(), 2),
                                     ForwardMode::kEval);
  const auto upstream = unit_logit_grads(trace, 18, 1.0);
  auto once = zero_params<double>(cfg);
  backward<double>(trace, p, cfg, upstream, once);
  auto twice = zero_params<double>(cfg);
  backward<double>(trace, p, cfg, upstream, twice);
  backward<double>(trace, p, cfg, upstream, twice);
  std::vector<const Mat<double>*> a, b;
  once.for_each([&](const std::string&, const Mat<double>& m) { a.push_back(&m); });
  twice.for_each([&](const std::string&, const Mat<double>& m) { b.push_back(&m); });
  // Equal up to summation order inside the accumulating backward pass.
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_LE((*b[i] - 2.0 * *a[i]).cwiseAbs().maxCoeff(), 1e-12 * (1.0 + a[i]->cwiseAbs().maxCoeff()));
  }
}

TEST(Params, InitIsSeededAndShaped) {
  const auto cfg = tiny_config(3, 8, 10);
  const auto a = init_params<float>(cfg, 42);
  const auto b = init_params<float>(cfg, 42);
  EXPECT_TRUE(a.token_embedding == b.token_embedding);
  EXPECT_EQ(a.token_embedding.rows(), cfg.layout().vocab_size());
  EXPECT_EQ(a.position_embedding.rows(), static_cast<Eigen::Index>(cfg.max_positions()));
  EXPECT_EQ(a.think_w.size(), 3u);
  EXPECT_EQ(a.act_w.cols(), 10);
  EXPECT_TRUE(a.lnf_gain.isOnes(0.0));
  const auto z = zero_params<float>(cfg);
  EXPECT_TRUE(z.lnf_gain.isZero(0.0));
}

class CheckpointTest : public ::testing::Test {
 protected:
  std::filesystem::path path_ = std::filesystem::temp_directory_path() / "car_nnet_test.ckpt";
  void TearDown() override { std::filesystem::remove(path_); }
};

TEST_F(CheckpointTest, RoundTripIsExact) {
  const auto cfg = tiny_config(2, 4, 6);
  const auto p = random_params<float>(cfg, 19);
  save_checkpoint(path_, cfg, p);
  const auto model = load_checkpoint(path_);
  EXPECT_EQ(model.config(), cfg);
  std::vector<Mat<float>> a, b;
  p.for_each([&](const std::string&, const Mat<float>& m) { a.push_back(m); });
  model.params().for_each([&](const std::string&, const Mat<float>& m) { b.push_back(m); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i] == b[i]);
}

TEST_F(CheckpointTest, GarbageAndTruncationAreIncompatible) {
  {
    std::ofstream out(path_);
    out << "not a checkpoint\n";
  }
  try {
    load_checkpoint(path_);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIncompatibleCheckpoint);
  }

  const auto cfg = tiny_config(2, 4, 6);
  save_checkpoint(path_, cfg, random_params<float>(cfg, 20));
  const auto size = std::filesystem::file_size(path_);
  std::filesystem::resize_file(path_, size - 8);
  try {
    load_checkpoint(path_);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIncompatibleCheckpoint);
  }
}

}  // namespace
}  // namespace car
