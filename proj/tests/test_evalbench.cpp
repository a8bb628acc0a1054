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

#include <nlohmann/json.hpp>
#include <random>

#include "car/bench.hpp"
#include "car/error.hpp"
#include "car/metrics.hpp"
#include "support.hpp"

namespace car {
namespace {

TEST(Metrics, RecallExamples) {
  EXPECT_EQ(recall_at_k(1, 5), 1.0);
  EXPECT_EQ(recall_at_k(6, 5), 0.0);
  EXPECT_EQ(recall_at_k(10, 10), 1.0);
  EXPECT_THROW(recall_at_k(0, 5), Error);
}

TEST(Metrics, NdcgExamples) {
  EXPECT_EQ(ndcg_at_k(1, 5), 1.0);
  EXPECT_DOUBLE_EQ(ndcg_at_k(3, 5), 0.5);
  EXPECT_EQ(ndcg_at_k(7, 5), 0.0);
}

TEST(Metrics, RandomCasesMatchClosedForm) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> rank(1, 50), k(1, 20);
  for (int i = 0; i < 1000; ++i) {
    const auto r = static_cast<std::size_t>(rank(rng));
    const int kk = k(rng);
    EXPECT_EQ(recall_at_k(r, kk), testing::oracle_recall(r, kk));
    EXPECT_NEAR(ndcg_at_k(r, kk), testing::oracle_ndcg(r, kk), 1e-15);
  }
}

TEST(Metrics, SummaryOfConstantRanks) {
  const auto ones = summarize_ranks(std::vector<std::size_t>(20, 1), {5}, "test");
  EXPECT_EQ(ones.recall_at(5), 1.0);
  EXPECT_EQ(ones.ndcg_at(5), 1.0);
  const auto threes = summarize_ranks(std::vector<std::size_t>(20, 3), {5}, "test");
  EXPECT_EQ(threes.recall_at(5), 1.0);
  EXPECT_DOUBLE_EQ(threes.ndcg_at(5), 0.5);
  const auto misses = summarize_ranks({0, 0, 1, 0}, {5}, "valid");
  EXPECT_DOUBLE_EQ(misses.recall_at(5), 0.25);
}

TEST(Metrics, JsonShape) {
  auto report = summarize_ranks({1, 2, 7}, {5, 10}, "test");
  report.checkpoint_id = "abc";
  report.config_hash = "def";
  const auto j = nlohmann::json::parse(metrics_json(report));
  EXPECT_EQ(j["split"], "test");
  EXPECT_EQ(j["users_evaluated"], 3);
  EXPECT_DOUBLE_EQ(j["K"]["5"]["recall"].get<double>(), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(j["K"]["10"]["recall"].get<double>(), 1.0);
  EXPECT_EQ(j["checkpoint_id"], "abc");
}

TEST(Bench, RatioColumnAndForwardCounts) {
  const auto cfg = testing::tiny_config(2, 4, 8);
  const Model<float> model(cfg, init_params<float>(cfg, 3));
  std::vector<std::vector<TokenId>> histories(6, std::vector<TokenId>{kBosToken});
  BenchOptions opts;
  opts.beams = {1, 3};
  opts.samples = 6;
  opts.warmup = 1;
  const auto table = bench_inference(model, histories, opts);
  ASSERT_EQ(table.rows.size(), 2u);
  for (const auto& row : table.rows) {
    EXPECT_DOUBLE_EQ(row.ratio, row.ar_seconds / row.car_seconds);
    EXPECT_EQ(row.car_forwards, 6u);
  }
  // Beam 1 runs one forward per token; beam 3 fans out after the first.
  EXPECT_EQ(table.rows[0].ar_forwards, 6u * 3u);
  EXPECT_EQ(table.rows[1].ar_forwards, 6u * (1u + 3u + 3u));
  EXPECT_NE(latency_table_text(table).find("num_beams"), std::string::npos);
  const auto j = nlohmann::json::parse(latency_table_json(table));
  EXPECT_EQ(j["rows"].size(), 2u);
}

TEST(Bench, TooFewHistoriesIsAnError) {
  const auto cfg = testing::tiny_config(2, 4, 8);
  const Model<float> model(cfg, init_params<float>(cfg, 3));
  std::vector<std::vector<TokenId>> histories(2, std::vector<TokenId>{kBosToken});
  BenchOptions opts;
  opts.samples = 3;
  EXPECT_THROW(bench_inference(model, histories, opts), Error);
}

}  // namespace
}  // namespace car
