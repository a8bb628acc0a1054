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

#include <cstddef>
#include <string>
#include <vector>

namespace car {

// Single held-out target per user. `rank` is 1-based.
double recall_at_k(std::size_t rank, int k);
double ndcg_at_k(std::size_t rank, int k);

struct MetricsReport {
  std::string split;
  std::vector<int> ks;
  std::vector<double> recall;  // parallel to ks
  std::vector<double> ndcg;
  std::size_t users = 0;
  std::string checkpoint_id;
  std::string config_hash;

  double recall_at(int k) const;
  double ndcg_at(int k) const;
};

// Averages recall/ndcg over the given per-user target ranks
// (rank 0 = target absent from the candidate list).
MetricsReport summarize_ranks(const std::vector<std::size_t>& ranks, const std::vector<int>& ks,
                              std::string split);

// `{split, K: {"5": {recall, ndcg}, ...}, users_evaluated, checkpoint_id, config_hash}`
std::string metrics_json(const MetricsReport& report);

}  // namespace car
