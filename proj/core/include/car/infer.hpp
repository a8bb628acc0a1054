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

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "car/corpus.hpp"
#include "car/metrics.hpp"
#include "car/nnet.hpp"

namespace car {

// Next-chunk distributions read off the final history position.
struct ChunkDistribution {
  std::vector<std::vector<double>> levels;  // per level, k probabilities
  std::vector<double> act;                  // N probabilities
};

struct RankedList {
  std::vector<std::int32_t> items;
  std::vector<double> scores;
};

struct BeamHypothesis {
  std::vector<TokenId> tokens;  // partial or complete chunk
  double log_prob = 0.0;
};

// Softmax in double precision.
std::vector<double> softmax(std::span<const double> logits);

/// Single forward over `history` (which must end at BOS or a chunk-final
/// token); every head reads the last position.
template <typename T>
ChunkDistribution car_decode(const Model<T>& model, std::span<const TokenId> history);

/// Top-K by score, ties to the lower item index. Excluded items are dropped
/// before truncation.
RankedList rank_scores(std::span<const double> scores, std::size_t k,
                       std::span<const std::int32_t> exclude = {});
RankedList rank_items(const ChunkDistribution& dist, std::size_t k,
                      std::span<const std::int32_t> exclude = {});

// 1-based rank of `target` under the same ordering, computed in O(N);
// 0 when the target is excluded.
std::size_t target_rank(std::span<const double> scores, std::int32_t target,
                        std::span<const std::int32_t> exclude = {});

/// Sequential beam search over the n+1 tokens of the next chunk. Each
/// extension step re-runs the model on history + partial chunk. Returned
/// hypotheses are complete chunks sorted by joint log-probability, ties
/// broken by token sequence.
template <typename T>
std::vector<BeamHypothesis> beam_decode(const Model<T>& model, std::span<const TokenId> history,
                                        std::size_t num_beams);

enum class SplitKind { kTrain, kValid, kTest };
const char* split_name(SplitKind kind);

struct EvalOptions {
  std::vector<int> ks{5, 10};
  bool exclude_history = false;
  // Conditioning items per user; leaves room in the context for one more chunk.
  std::size_t history_items = kMaxHistoryChunks - 1;
  // > 0: rank by beam-decoded UIDs (AR objective) instead of the act marginal.
  std::size_t ar_beams = 0;
};

// Per-user (history, target) pairs of a split. The train split uses the last
// item of the train prefix as target.
struct EvalQuery {
  std::vector<std::int32_t> history;
  std::int32_t target = -1;
};
std::vector<EvalQuery> split_queries(const SplitCorpus& split, SplitKind kind,
                                     std::size_t history_items);

// Per-user 1-based target ranks (0: not retrieved).
std::vector<std::size_t> split_ranks(const Model<float>& model, const ChunkTable& table,
                                     const SplitCorpus& split, SplitKind kind,
                                     const EvalOptions& options);

MetricsReport evaluate_split(const Model<float>& model, const ChunkTable& table,
                             const SplitCorpus& split, SplitKind kind,
                             const EvalOptions& options = {});

}  // namespace car
