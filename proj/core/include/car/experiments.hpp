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

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "car/corpus.hpp"
#include "car/infer.hpp"
#include "car/semtok.hpp"
#include "car/train.hpp"

namespace car {

// Everything a grid row needs besides its own overrides.
struct ExperimentSetup {
  SplitCorpus split;
  std::vector<SidTuple> sids;  // may carry more levels than the model uses
  int levels = 4;
  int k = 256;
  ModelConfig model;
  TrainConfig train;
  EvalOptions eval;
  SplitKind report_split = SplitKind::kTest;
};

struct VariantSpec {
  std::string name;
  Objective objective = Objective::kCar;
  bool fusion = true;
  bool think_loss = true;
};

// AR, CAR w/o F&T, CAR w/o F, CAR w/o T, CAR.
std::vector<VariantSpec> ablation_variants();

struct ExperimentRow {
  std::string label;
  MetricsReport metrics;
  std::int64_t steps = 0;
  double final_loss = 0.0;
};

struct ExperimentReport {
  std::string title;
  std::string row_header;
  std::vector<ExperimentRow> rows;

  std::string text() const;
  std::string json() const;
};

using RowCallback = std::function<void(const ExperimentRow&, const TrainResult&)>;

// Trains and evaluates one configuration; AR objectives are ranked through
// beam decoding.
ExperimentRow run_variant(const ExperimentSetup& setup, const VariantSpec& variant,
                          const std::string& label, TrainResult* result_out = nullptr);

ExperimentReport run_ablation(const ExperimentSetup& setup, const RowCallback& on_row = {});

// Reuses the SID prefix of a deeper tokenization for each level count.
ExperimentReport run_level_sweep(const ExperimentSetup& setup, std::span<const int> levels,
                                 const RowCallback& on_row = {});

// Same training setup over residual k-means and LSH codes of `embeddings`.
ExperimentReport run_tokenizer_comparison(ExperimentSetup setup,
                                          const EmbeddingMatrix& embeddings,
                                          const TokenizerConfig& tokenizer,
                                          const RowCallback& on_row = {});

}  // namespace car
