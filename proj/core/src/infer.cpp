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

#include "car/infer.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "car/error.hpp"

namespace car {
namespace {

void check_history(std::span<const TokenId> history, const ModelConfig& config,
                   std::size_t room) {
  const VocabLayout layout = config.layout();
  if (history.empty() || history.front() != kBosToken) {
    throw Error(ErrorKind::kInvalidArgument, "history must start with BOS");
  }
  if ((history.size() - 1) % static_cast<std::size_t>(layout.chunk_len()) != 0) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("history of length {} does not end at a chunk boundary",
                            history.size()));
  }
  if (history.size() + room > config.max_positions()) {
    throw Error(ErrorKind::kOutOfRange,
                fmt::format("history of length {} leaves no room for a chunk (max positions {})",
                            history.size(), config.max_positions()));
  }
}

template <typename T>
std::vector<double> row_to_double(const Mat<T>& m, Eigen::Index row) {
  std::vector<double> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(c)] = m(row, c);
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<bool> exclusion_mask(std::size_t n, std::span<const std::int32_t> exclude) {
  std::vector<bool> mask(n, false);
  for (auto item : exclude) {
    if (item >= 0 && static_cast<std::size_t>(item) < n) mask[static_cast<std::size_t>(item)] = true;
  }
  return mask;
}

bool hypothesis_before(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

}  // namespace

std::vector<double> softmax(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += out[i] = std::exp(logits[i] - mx);
  for (double& v : out) v /= sum;
  return out;
}

template <typename T>
ChunkDistribution car_decode(const Model<T>& model, std::span<const TokenId> history) {
  const ModelConfig& config = model.config();
  check_history(history, config, static_cast<std::size_t>(config.layout().chunk_len()));
  const std::size_t last = history.size() - 1;
  const std::size_t pos[] = {last};
  const ForwardTrace<T> trace = model.forward(history, HeadRequest::same(pos, config.levels));
  ChunkDistribution dist;
  for (int l = 0; l < config.levels; ++l) {
    dist.levels.push_back(softmax(row_to_double(trace.logits[static_cast<std::size_t>(l)], 0)));
  }
  dist.act = softmax(row_to_double(trace.logits[static_cast<std::size_t>(config.act_head())], 0));
  return dist;
}

RankedList rank_scores(std::span<const double> scores, std::size_t k,
                       std::span<const std::int32_t> exclude) {
  const auto mask = exclusion_mask(scores.size(), exclude);
  std::vector<std::int32_t> idx;
  idx.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!mask[i]) idx.push_back(static_cast<std::int32_t>(i));
  }
  const std::size_t take = std::min(k, idx.size());
  auto before = [&](std::int32_t a, std::int32_t b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                    before);
  idx.resize(take);
  RankedList out;
  out.items = std::move(idx);
  for (auto i : out.items) out.scores.push_back(scores[static_cast<std::size_t>(i)]);
  return out;
}

RankedList rank_items(const ChunkDistribution& dist, std::size_t k,
                      std::span<const std::int32_t> exclude) {
  return rank_scores(dist.act, k, exclude);
}

std::size_t target_rank(std::span<const double> scores, std::int32_t target,
                        std::span<const std::int32_t> exclude) {
  if (target < 0 || static_cast<std::size_t>(target) >= scores.size()) {
    throw Error(ErrorKind::kOutOfRange, fmt::format("target item {} out of range", target));
  }
  const auto mask = exclusion_mask(scores.size(), exclude);
  const auto t = static_cast<std::size_t>(target);
  if (mask[t]) return 0;
  const double st = scores[t];
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (mask[i]) continue;
    if (scores[i] > st || (scores[i] == st && i < t)) ++ahead;
  }
  return ahead + 1;
}

template <typename T>
std::vector<BeamHypothesis> beam_decode(const Model<T>& model, std::span<const TokenId> history,
                                        std::size_t num_beams) {
  if (num_beams == 0) throw Error(ErrorKind::kInvalidArgument, "num_beams must be >= 1");
  const ModelConfig& config = model.config();
  const VocabLayout layout = config.layout();
  check_history(history, config, static_cast<std::size_t>(layout.chunk_len()));

  std::vector<BeamHypothesis> beams(1);
  std::vector<TokenId> seq;
  for (int slot = 0; slot <= config.levels; ++slot) {
    const bool is_act = slot == config.levels;
    const TokenId base = is_act ? layout.uid_base() : layout.sid_base(slot);
    std::vector<BeamHypothesis> candidates;
    for (const auto& hyp : beams) {
      seq.assign(history.begin(), history.end());
      seq.insert(seq.end(), hyp.tokens.begin(), hyp.tokens.end());
      HeadRequest req = HeadRequest::none(config.levels);
      req.positions[static_cast<std::size_t>(slot)].push_back(seq.size() - 1);
      const ForwardTrace<T> trace = model.forward(seq, req);
      const auto lp = log_softmax(row_to_double(trace.logits[static_cast<std::size_t>(slot)], 0));
      // Only the best num_beams extensions of one hypothesis can survive.
      const RankedList top = rank_scores(lp, num_beams);
      for (std::size_t r = 0; r < top.items.size(); ++r) {
        BeamHypothesis next;
        next.tokens = hyp.tokens;
        next.tokens.push_back(base + top.items[r]);
        next.log_prob = hyp.log_prob + top.scores[r];
        candidates.push_back(std::move(next));
      }
    }
    std::sort(candidates.begin(), candidates.end(), hypothesis_before);
    if (candidates.size() > num_beams) candidates.resize(num_beams);
    beams = std::move(candidates);
  }
  return beams;
}

const char* split_name(SplitKind kind) {
  switch (kind) {
    case SplitKind::kTrain:
      return "train";
    case SplitKind::kValid:
      return "valid";
    case SplitKind::kTest:
      return "test";
  }
  return "?";
}

std::vector<EvalQuery> split_queries(const SplitCorpus& split, SplitKind kind,
                                     std::size_t history_items) {
  std::vector<EvalQuery> out;
  out.reserve(split.users.size());
  for (const auto& u : split.users) {
    EvalQuery q;
    switch (kind) {
      case SplitKind::kTrain: {
        if (u.train.empty()) continue;
        q.target = u.train.back();
        const std::size_t end = u.train.size() - 1;
        const std::size_t begin = end > history_items ? end - history_items : 0;
        q.history.assign(u.train.begin() + static_cast<std::ptrdiff_t>(begin),
                         u.train.begin() + static_cast<std::ptrdiff_t>(end));
        break;
      }
      case SplitKind::kValid:
        q.target = u.valid;
        q.history = u.valid_history(history_items);
        break;
      case SplitKind::kTest:
        q.target = u.test;
        q.history = u.test_history(history_items);
        break;
    }
    out.push_back(std::move(q));
  }
  return out;
}

std::vector<std::size_t> split_ranks(const Model<float>& model, const ChunkTable& table,
                                     const SplitCorpus& split, SplitKind kind,
                                     const EvalOptions& options) {
  const std::size_t max_items =
      std::min(options.history_items, model.config().max_chunks - 1);
  const auto queries = split_queries(split, kind, max_items);
  std::vector<std::size_t> ranks;
  ranks.reserve(queries.size());
  for (const auto& q : queries) {
    const auto tokens = table.flatten(q.history, max_items).tokens;
    std::span<const std::int32_t> exclude;
    if (options.exclude_history) exclude = q.history;
    if (options.ar_beams > 0) {
      const auto beams = beam_decode(model, tokens, options.ar_beams);
      const auto mask = exclusion_mask(static_cast<std::size_t>(split.num_items), exclude);
      std::vector<bool> seen(static_cast<std::size_t>(split.num_items), false);
      std::size_t rank = 0;
      std::size_t position = 0;
      for (const auto& b : beams) {
        const auto item = table.layout().decode(b.tokens.back()).value;
        const auto i = static_cast<std::size_t>(item);
        if (seen[i] || mask[i]) continue;
        seen[i] = true;
        ++position;
        if (item == q.target) {
          rank = position;
          break;
        }
      }
      ranks.push_back(rank);
    } else {
      const auto dist = car_decode(model, tokens);
      ranks.push_back(target_rank(dist.act, q.target, exclude));
    }
  }
  return ranks;
}

MetricsReport evaluate_split(const Model<float>& model, const ChunkTable& table,
                             const SplitCorpus& split, SplitKind kind,
                             const EvalOptions& options) {
  return summarize_ranks(split_ranks(model, table, split, kind, options), options.ks,
                         split_name(kind));
}

#define CAR_INSTANTIATE_INFER(T)                                                              \
  template ChunkDistribution car_decode<T>(const Model<T>&, std::span<const TokenId>);        \
  template std::vector<BeamHypothesis> beam_decode<T>(const Model<T>&, std::span<const TokenId>, \
                                                      std::size_t);

CAR_INSTANTIATE_INFER(float)
CAR_INSTANTIATE_INFER(double)

}  // namespace car
