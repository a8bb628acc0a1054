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
#include <numeric>
#include <random>

#include "car/error.hpp"
#include "car/infer.hpp"
#include "support.hpp"

namespace car {
namespace {

using testing::random_params;
using testing::tiny_config;

Model<float> tiny_model(int levels, int k, std::int32_t items, std::uint64_t seed) {
  const auto cfg = tiny_config(levels, k, items);
  return Model<float>(cfg, random_params<float>(cfg, seed));
}

std::vector<TokenId> history_of(const ChunkTable& table, std::vector<std::int32_t> items) {
  return table.flatten(items).tokens;
}

TEST(Softmax, SumsToOne) {
  const std::vector<double> logits{1.0, -3.0, 700.0, 699.0};
  const auto p = softmax(logits);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-14);
  EXPECT_NEAR(p[2] / p[3], std::exp(1.0), 1e-12);
}

TEST(CarDecode, OneForwardAndNormalizedHeads) {
  const auto model = tiny_model(3, 5, 9, 1);
  const ChunkTable table(model.config().layout(), testing::random_sids(9, 3, 5, 2));
  const auto hist = history_of(table, {1, 4, 2});
  model.reset_forward_count();
  const auto dist = car_decode(model, hist);
  EXPECT_EQ(model.forward_count(), 1u);
  ASSERT_EQ(dist.levels.size(), 3u);
  for (const auto& l : dist.levels) {
    EXPECT_EQ(l.size(), 5u);
    EXPECT_NEAR(std::accumulate(l.begin(), l.end(), 0.0), 1.0, 1e-9);
  }
  EXPECT_EQ(dist.act.size(), 9u);
  EXPECT_NEAR(std::accumulate(dist.act.begin(), dist.act.end(), 0.0), 1.0, 1e-9);
}

TEST(CarDecode, ZeroHeadsAreUniform) {
  auto model = tiny_model(2, 4, 7, 3);
  auto& p = model.mutable_params();
  for (auto& w : p.think_w) w.setZero();
  for (auto& b : p.think_b) b.setZero();
  p.act_w.setZero();
  p.act_b.setZero();
  const std::vector<TokenId> bos{kBosToken};
  const auto dist = car_decode(model, bos);
  for (const auto& l : dist.levels) {
    for (double v : l) EXPECT_NEAR(v, 0.25, 1e-12);
  }
  for (double v : dist.act) EXPECT_NEAR(v, 1.0 / 7, 1e-12);
}

TEST(CarDecode, MisalignedHistoryIsAnError) {
  const auto model = tiny_model(2, 4, 7, 4);
  const std::vector<TokenId> ragged{kBosToken, 2};
  EXPECT_THROW(car_decode(model, ragged), Error);
  const std::vector<TokenId> no_bos{2, 6, 10};
  EXPECT_THROW(car_decode(model, no_bos), Error);
}

TEST(RankScores, SmallCases) {
  const std::vector<double> p{0.1, 0.7, 0.2};
  EXPECT_EQ(rank_scores(p, 2).items, (std::vector<std::int32_t>{1, 2}));
  const std::vector<double> flat(6, 0.5);
  EXPECT_EQ(rank_scores(flat, 3).items, (std::vector<std::int32_t>{0, 1, 2}));
  const std::vector<std::int32_t> excl{1};
  EXPECT_EQ(rank_scores(p, 2, excl).items, (std::vector<std::int32_t>{2, 0}));
  EXPECT_EQ(target_rank(p, 1, excl), 0u);
  EXPECT_EQ(target_rank(p, 0, excl), 2u);
}

TEST(RankScores, MatchesFullSortOracle) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> size(1, 60), bucket(0, 9);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> scores(static_cast<std::size_t>(size(rng)));
    // Coarse buckets force plenty of ties.
    for (auto& s : scores) s = bucket(rng) / 10.0;
    const auto order = testing::oracle_argsort(scores);
    const std::size_t k = std::min<std::size_t>(5, scores.size());
    const auto ranked = rank_scores(scores, k);
    EXPECT_TRUE(std::equal(ranked.items.begin(), ranked.items.end(), order.begin()));
    const auto target = static_cast<std::int32_t>(trial % scores.size());
    EXPECT_EQ(target_rank(scores, target), testing::oracle_rank(scores, target));
  }
}

TEST(RankItems, InvariantUnderMonotoneTransform) {
  const auto model = tiny_model(2, 4, 30, 6);
  const std::vector<TokenId> bos{kBosToken};
  auto dist = car_decode(model, bos);
  const auto before = rank_items(dist, 10).items;
  for (auto& v : dist.act) v = std::log(v) * 3.0 + 1.0;
  EXPECT_EQ(rank_items(dist, 10).items, before);
}

TEST(RankItems, TopFiveMatchesArgsort) {
  const auto model = tiny_model(2, 4, 40, 7);
  const ChunkTable table(model.config().layout(), testing::random_sids(40, 2, 4, 8));
  const auto dist = car_decode(model, history_of(table, {3, 9}));
  const auto order = testing::oracle_argsort(dist.act);
  const auto top = rank_items(dist, 5).items;
  EXPECT_TRUE(std::equal(top.begin(), top.end(), order.begin()));
}

TEST(BeamDecode, SingleBeamIsGreedy) {
  const auto model = tiny_model(2, 4, 6, 9);
  const auto layout = model.config().layout();
  const ChunkTable table(layout, testing::random_sids(6, 2, 4, 10));
  auto seq = history_of(table, {2, 5});
  const auto beams = beam_decode(model, seq, 1);
  ASSERT_EQ(beams.size(), 1u);
  for (int slot = 0; slot <= 2; ++slot) {
    HeadRequest req = HeadRequest::none(2);
    req.positions[slot].push_back(seq.size() - 1);
    const auto trace = model.forward(seq, req);
    const auto& row = trace.logits[slot];
    Eigen::Index arg = 0;
    row.row(0).maxCoeff(&arg);
    const TokenId base = slot == 2 ? layout.uid_base() : layout.sid_base(slot);
    EXPECT_EQ(beams[0].tokens[slot], base + static_cast<TokenId>(arg)) << "slot " << slot;
    seq.push_back(base + static_cast<TokenId>(arg));
  }
}

TEST(BeamDecode, SortedAndCountsForwards) {
  const auto model = tiny_model(2, 4, 6, 11);
  const std::vector<TokenId> bos{kBosToken};
  model.reset_forward_count();
  const auto beams = beam_decode(model, bos, 5);
  // One forward for slot 0, then one per live hypothesis at each later slot.
  EXPECT_EQ(model.forward_count(), 1u + 4u + 5u);
  ASSERT_EQ(beams.size(), 5u);
  for (std::size_t i = 1; i < beams.size(); ++i) {
    EXPECT_GE(beams[i - 1].log_prob, beams[i].log_prob);
  }
  for (const auto& b : beams) EXPECT_EQ(b.tokens.size(), 3u);
}

SplitCorpus random_split(std::int32_t users, std::int32_t items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> item(0, items - 1), len(3, 8);
  std::vector<UserSequence> seqs;
  for (std::int32_t u = 0; u < users; ++u) {
    UserSequence s{u, {}};
    for (int t = len(rng); t > 0; --t) s.items.push_back(item(rng));
    seqs.push_back(std::move(s));
  }
  return leave_one_out_split(seqs, items);
}

TEST(SplitQueries, TargetsAndHistories) {
  SplitCorpus split;
  split.num_items = 10;
  split.users.push_back({0, {1, 2, 3}, 4, 5});
  const auto train = split_queries(split, SplitKind::kTrain, 19);
  EXPECT_EQ(train[0].target, 3);
  EXPECT_EQ(train[0].history, (std::vector<std::int32_t>{1, 2}));
  const auto valid = split_queries(split, SplitKind::kValid, 19);
  EXPECT_EQ(valid[0].target, 4);
  EXPECT_EQ(valid[0].history, (std::vector<std::int32_t>{1, 2, 3}));
  const auto test = split_queries(split, SplitKind::kTest, 2);
  EXPECT_EQ(test[0].target, 5);
  EXPECT_EQ(test[0].history, (std::vector<std::int32_t>{3, 4}));
}

TEST(EvaluateSplit, MatchesPerUserRecomputation) {
  const auto model = tiny_model(2, 4, 25, 12);
  const ChunkTable table(model.config().layout(), testing::random_sids(25, 2, 4, 13));
  const auto split = random_split(60, 25, 14);
  EvalOptions opts;
  opts.ks = {1, 5, 10};
  const auto report = evaluate_split(model, table, split, SplitKind::kTest, opts);
  std::vector<double> recall(3, 0.0), ndcg(3, 0.0);
  for (const auto& q : split_queries(split, SplitKind::kTest, opts.history_items)) {
    const auto dist = car_decode(model, table.flatten(q.history).tokens);
    const auto rank = testing::oracle_rank(dist.act, q.target);
    for (std::size_t i = 0; i < 3; ++i) {
      recall[i] += testing::oracle_recall(rank, opts.ks[i]);
      ndcg[i] += testing::oracle_ndcg(rank, opts.ks[i]);
    }
  }
  EXPECT_EQ(report.users, split.users.size());
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(report.recall[i], recall[i] / split.users.size(), 1e-9);
    EXPECT_NEAR(report.ndcg[i], ndcg[i] / split.users.size(), 1e-9);
  }
}

TEST(EvaluateSplit, ExcludingHistoryNeverHurtsFreshTargets) {
  const auto model = tiny_model(2, 4, 25, 15);
  const ChunkTable table(model.config().layout(), testing::random_sids(25, 2, 4, 16));
  const auto split = random_split(40, 25, 17);
  EvalOptions plain, excl;
  excl.exclude_history = true;
  const auto a = split_ranks(model, table, split, SplitKind::kTest, plain);
  const auto b = split_ranks(model, table, split, SplitKind::kTest, excl);
  const auto queries = split_queries(split, SplitKind::kTest, plain.history_items);
  for (std::size_t u = 0; u < a.size(); ++u) {
    const auto& h = queries[u].history;
    if (std::find(h.begin(), h.end(), queries[u].target) == h.end()) {
      EXPECT_LE(b[u], a[u]);
      EXPECT_GE(b[u], 1u);
    } else {
      EXPECT_EQ(b[u], 0u);
    }
  }
}

}  // namespace
}  // namespace car
