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

// Shared fixtures and independent reference implementations for the tests.
// Oracles here deliberately avoid the library's own helpers (no rank_scores,
// no summarize_ranks) so they can catch regressions in those.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "car/chunkvocab.hpp"
#include "car/nnet.hpp"
#include "car/semtok.hpp"

namespace car::testing {

inline ModelConfig tiny_config(int levels, int k, std::int32_t items, int embed = 16,
                               int heads = 2, int hidden = 32) {
  ModelConfig c;
  c.layers = 1;
  c.heads = heads;
  c.embed_dim = embed;
  c.mlp_hidden = hidden;
  c.dropout = 0.0;
  c.levels = levels;
  c.k = k;
  c.num_items = items;
  return c;
}

// Dense random parameters: large enough that attention and GELU leave their
// near-linear regimes, which a 0.02-std init would not.
template <typename T>
ModelParams<T> random_params(const ModelConfig& config, std::uint64_t seed, double scale = 0.5) {
  ModelParams<T> p = zero_params<T>(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  p.for_each([&](const std::string& name, Mat<T>& m) {
    const bool gain = name.find("gain") != std::string::npos;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<T>(gain ? 1.0 + 0.2 * dist(rng) : dist(rng));
    }
  });
  return p;
}

inline std::vector<SidTuple> random_sids(std::int32_t items, int levels, int k,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> code(0, k - 1);
  std::vector<SidTuple> out(static_cast<std::size_t>(items));
  for (auto& s : out) {
    for (int l = 0; l < levels; ++l) s.codes.push_back(code(rng));
  }
  return out;
}

// ---------------------------------------------------------------- oracles

inline double oracle_recall(std::size_t rank, int k) {
  return static_cast<int>(rank) <= k ? 1.0 : 0.0;
}

inline double oracle_ndcg(std::size_t rank, int k) {
  if (static_cast<int>(rank) > k) return 0.0;
  // DCG of one relevant item over an ideal DCG of 1.
  return std::log(2.0) / std::log(static_cast<double>(rank) + 1.0);
}

// Full argsort by (score desc, index asc); returns item order.
inline std::vector<std::int32_t> oracle_argsort(const std::vector<double>& scores) {
  std::vector<std::pair<double, std::int32_t>> keyed;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    keyed.emplace_back(-scores[i], static_cast<std::int32_t>(i));
  }
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::int32_t> out;
  for (const auto& [s, i] : keyed) out.push_back(i);
  return out;
}

// 1-based position of `target` in the full argsort.
inline std::size_t oracle_rank(const std::vector<double>& scores, std::int32_t target) {
  const auto order = oracle_argsort(scores);
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), target) - order.begin()) + 1;
}

// Reference Adam update of one scalar, t is 1-based.
struct ScalarAdam {
  double lr, b1, b2, eps;
  double m = 0.0, v = 0.0;
  int t = 0;

  double step(double param, double grad) {
    ++t;
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    return param - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

// Log-softmax of one row, computed independently of the library.
template <typename T>
std::vector<double> oracle_log_softmax(const Mat<T>& logits, Eigen::Index row) {
  std::vector<double> out(static_cast<std::size_t>(logits.cols()));
  double mx = logits(row, 0);
  for (Eigen::Index c = 1; c < logits.cols(); ++c) mx = std::max(mx, double(logits(row, c)));
  double z = 0.0;
  for (Eigen::Index c = 0; c < logits.cols(); ++c) z += std::exp(double(logits(row, c)) - mx);
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    out[static_cast<std::size_t>(c)] = double(logits(row, c)) - mx - std::log(z);
  }
  return out;
}

}  // namespace car::testing
