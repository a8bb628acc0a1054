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

#include "car/metrics.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "car/error.hpp"

namespace car {

double recall_at_k(std::size_t rank, int k) {
  if (rank < 1) throw Error(ErrorKind::kInvalidArgument, "rank must be >= 1");
  return rank <= static_cast<std::size_t>(k) ? 1.0 : 0.0;
}

double ndcg_at_k(std::size_t rank, int k) {
  if (rank < 1) throw Error(ErrorKind::kInvalidArgument, "rank must be >= 1");
  if (rank > static_cast<std::size_t>(k)) return 0.0;
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

double MetricsReport::recall_at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == k) return recall[i];
  }
  throw Error(ErrorKind::kInvalidArgument, "metrics report lacks K=" + std::to_string(k));
}

double MetricsReport::ndcg_at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == k) return ndcg[i];
  }
  throw Error(ErrorKind::kInvalidArgument, "metrics report lacks K=" + std::to_string(k));
}

MetricsReport summarize_ranks(const std::vector<std::size_t>& ranks, const std::vector<int>& ks,
                              std::string split) {
  MetricsReport report;
  report.split = std::move(split);
  report.ks = ks;
  report.users = ranks.size();
  report.recall.assign(ks.size(), 0.0);
  report.ndcg.assign(ks.size(), 0.0);
  if (ranks.empty()) return report;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    double r = 0.0;
    double n = 0.0;
    for (auto rank : ranks) {
      if (rank == 0) continue;
      r += recall_at_k(rank, ks[i]);
      n += ndcg_at_k(rank, ks[i]);
    }
    report.recall[i] = r / static_cast<double>(ranks.size());
    report.ndcg[i] = n / static_cast<double>(ranks.size());
  }
  return report;
}

std::string metrics_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["split"] = report.split;
  nlohmann::ordered_json per_k = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < report.ks.size(); ++i) {
    per_k[std::to_string(report.ks[i])] = {{"recall", report.recall[i]},
                                           {"ndcg", report.ndcg[i]}};
  }
  j["K"] = per_k;
  j["users_evaluated"] = report.users;
  j["checkpoint_id"] = report.checkpoint_id;
  j["config_hash"] = report.config_hash;
  return j.dump(2);
}

}  // namespace car
