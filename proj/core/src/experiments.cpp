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

#include "car/experiments.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <nlohmann/json.hpp>

#include "car/error.hpp"
#include "car/log.hpp"

namespace car {

std::vector<VariantSpec> ablation_variants() {
  return {
      {"AR", Objective::kAr, true, true},
      {"CAR w/o F&T", Objective::kCar, false, false},
      {"CAR w/o F", Objective::kCar, false, true},
      {"CAR w/o T", Objective::kCar, true, false},
      {"CAR", Objective::kCar, true, true},
  };
}

ExperimentRow run_variant(const ExperimentSetup& setup, const VariantSpec& variant,
                          const std::string& label, TrainResult* result_out) {
  for (const auto& s : setup.sids) {
    if (s.codes.size() < static_cast<std::size_t>(setup.levels)) {
      throw Error(ErrorKind::kDimensionMismatch,
                  fmt::format("SID map has {} levels, {} requested", s.codes.size(),
                              setup.levels));
    }
  }
  const VocabLayout layout(setup.levels, setup.k, setup.split.num_items);
  const ChunkTable table(layout, setup.sids);

  TrainConfig train = setup.train;
  train.objective = variant.objective;
  train.fusion_enabled = variant.fusion;
  train.think_loss_enabled = variant.think_loss;

  log_info(fmt::format("training variant '{}'", label));
  TrainResult result = train_loop(setup.split, table, setup.model, train);
  const Model<float> model(result.model_config, result.best_params);

  EvalOptions eval = setup.eval;
  if (variant.objective == Objective::kAr && eval.ar_beams == 0) {
    eval.ar_beams = static_cast<std::size_t>(*std::max_element(eval.ks.begin(), eval.ks.end()));
  }
  ExperimentRow row;
  row.label = label;
  row.metrics = evaluate_split(model, table, setup.split, setup.report_split, eval);
  row.steps = result.steps.empty() ? 0 : result.steps.back().step;
  row.final_loss = result.steps.empty() ? 0.0 : result.steps.back().total;
  if (result_out != nullptr) *result_out = std::move(result);
  return row;
}

namespace {

void emit(ExperimentReport& report, const ExperimentSetup& setup, const VariantSpec& variant,
          const std::string& label, const RowCallback& on_row) {
  TrainResult result;
  report.rows.push_back(run_variant(setup, variant, label, on_row ? &result : nullptr));
  if (on_row) on_row(report.rows.back(), result);
}

}  // namespace

ExperimentReport run_ablation(const ExperimentSetup& setup, const RowCallback& on_row) {
  ExperimentReport report;
  report.title = "Ablation of fusion (F) and think loss (T)";
  report.row_header = "Variant";
  for (const auto& v : ablation_variants()) emit(report, setup, v, v.name, on_row);
  return report;
}

ExperimentReport run_level_sweep(const ExperimentSetup& setup, std::span<const int> levels,
                                 const RowCallback& on_row) {
  ExperimentReport report;
  report.title = "Semantic ID levels";
  report.row_header = "Levels";
  const VariantSpec car{"CAR", Objective::kCar, setup.train.fusion_enabled,
                        setup.train.think_loss_enabled};
  for (int l : levels) {
    if (l < 1) throw Error(ErrorKind::kInvalidArgument, "levels must be >= 1");
    ExperimentSetup s = setup;
    s.levels = l;
    s.model.levels = l;
    emit(report, s, car, std::to_string(l), on_row);
  }
  return report;
}

ExperimentReport run_tokenizer_comparison(ExperimentSetup setup,
                                          const EmbeddingMatrix& embeddings,
                                          const TokenizerConfig& tokenizer,
                                          const RowCallback& on_row) {
  if (embeddings.rows() != setup.split.num_items) {
    throw Error(ErrorKind::kDimensionMismatch,
                fmt::format("{} embeddings for {} items", embeddings.rows(),
                            setup.split.num_items));
  }
  ExperimentReport report;
  report.title = "Tokenizer comparison";
  report.row_header = "Tokenizer";
  const VariantSpec car{"CAR", Objective::kCar, setup.train.fusion_enabled,
                        setup.train.think_loss_enabled};
  setup.levels = tokenizer.levels;
  setup.k = tokenizer.k;
  setup.model.levels = tokenizer.levels;

  setup.sids = assign_all_sids(embeddings, fit_residual_kmeans(embeddings, tokenizer));
  emit(report, setup, car, "res-kmeans", on_row);

  const LshPlanes planes = fit_lsh(embeddings, tokenizer);
  setup.sids.clear();
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    setup.sids.push_back(assign_lsh(
        std::span<const float>(embeddings.row(i).data(), static_cast<std::size_t>(embeddings.cols())),
        planes));
  }
  emit(report, setup, car, "lsh", on_row);
  return report;
}

std::string ExperimentReport::text() const {
  std::vector<int> ks;
  if (!rows.empty()) ks = rows.front().metrics.ks;
  std::size_t width = row_header.size();
  for (const auto& r : rows) width = std::max(width, r.label.size());
  std::string out = fmt::format("{}\n{:<{}}", title, row_header, width);
  for (int k : ks) out += fmt::format("  {:>9}  {:>9}", fmt::format("Recall@{}", k), fmt::format("NDCG@{}", k));
  out += '\n';
  for (const auto& r : rows) {
    out += fmt::format("{:<{}}", r.label, width);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      out += fmt::format("  {:>9.4f}  {:>9.4f}", r.metrics.recall[i], r.metrics.ndcg[i]);
    }
    out += '\n';
  }
  return out;
}

std::string ExperimentReport::json() const {
  nlohmann::ordered_json j;
  j["title"] = title;
  j["row_header"] = row_header;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["label"] = r.label;
    row["split"] = r.metrics.split;
    row["users_evaluated"] = r.metrics.users;
    for (std::size_t i = 0; i < r.metrics.ks.size(); ++i) {
      const auto k = std::to_string(r.metrics.ks[i]);
      row["recall@" + k] = r.metrics.recall[i];
      row["ndcg@" + k] = r.metrics.ndcg[i];
    }
    row["steps"] = r.steps;
    row["final_loss"] = r.final_loss;
    j["rows"].push_back(row);
  }
  return j.dump(2);
}

}  // namespace car
