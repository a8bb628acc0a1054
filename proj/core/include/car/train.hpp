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
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "car/corpus.hpp"
#include "car/metrics.hpp"
#include "car/nnet.hpp"

namespace car {

enum class Objective { kCar, kAr };

const char* objective_name(Objective objective);
Objective parse_objective(const std::string& name);

struct TrainConfig {
  double alpha = 1.0;
  double learning_rate = 1e-5;
  std::size_t batch_size = 256;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int max_epochs = 200;
  std::int64_t max_steps = -1;  // -1: unbounded
  int patience = 10;            // epochs without validation improvement; 0 disables
  std::uint64_t seed = 0;
  Objective objective = Objective::kCar;
  bool fusion_enabled = true;
  bool think_loss_enabled = true;
  bool sliding_window = false;
  bool validate_each_epoch = true;

  void validate() const;
};

struct LossReport {
  std::int64_t step = 0;
  double alpha = 1.0;
  double total = 0.0;
  double think = 0.0;
  double act = 0.0;
  std::vector<double> per_level;  // mean NLL of each think head
  std::size_t positions = 0;      // supervised positions in the batch
};

// Next-chunk target attached to a loss position. `item < 0` marks a
// position that carries no chunk loss.
struct ChunkTarget {
  std::vector<std::int32_t> codes;
  std::int32_t item = -1;

  bool active() const { return item >= 0; }
};

struct CarExample {
  std::vector<TokenId> input;         // [BOS, c_1, ..., c_{m-1}]
  std::vector<ChunkTarget> targets;   // one per input position
  std::vector<std::size_t> loss_positions;
};

// Builds the chunk-level example for `items` (m >= 1): BOS predicts c_1 and
// the final token of chunk j predicts c_{j+1}.
CarExample make_car_example(const ChunkTable& table, std::span<const std::int32_t> items);

struct ArExample {
  std::vector<TokenId> input;    // [BOS, c_1, ..., c_m]
  std::vector<TokenId> targets;  // targets[p] = input[p + 1]; PAD at the end
};

ArExample make_ar_example(const ChunkTable& table, std::span<const std::int32_t> items);

// BOS plus chunk-final positions with an active target.
std::vector<std::size_t> car_loss_positions(std::span<const ChunkTarget> targets,
                                            const VocabLayout& layout);

// Head that scores `target` (SID level or the act head); -1 for PAD/BOS.
int ar_head_for(TokenId target, const VocabLayout& layout);
HeadRequest ar_head_request(std::span<const TokenId> targets, const VocabLayout& layout);

/// Dual-branch chunk loss over a batch. Loss positions are recomputed from the
/// targets and layout, so target entries elsewhere are ignored. When `grads` is
/// non-null it receives, per trace and head, the gradient of `total` with
/// respect to that trace's logit rows.
template <typename T>
LossReport chunk_loss(std::span<const ForwardTrace<T>> traces,
                      std::span<const std::vector<ChunkTarget>> targets, const ModelConfig& config,
                      double alpha, bool think_enabled,
                      std::vector<std::vector<Mat<T>>>* grads = nullptr);

/// Next-token NLL averaged over every non-PAD target.
template <typename T>
LossReport ar_loss(std::span<const ForwardTrace<T>> traces,
                   std::span<const std::vector<TokenId>> targets, const ModelConfig& config,
                   std::vector<std::vector<Mat<T>>>* grads = nullptr);

template <typename T>
class Adam {
 public:
  Adam(const ModelParams<T>& like, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void step(ModelParams<T>& params, const ModelParams<T>& grads);
  std::int64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  ModelParams<T> m_, v_;
};

struct EpochRecord {
  int epoch = 0;
  std::int64_t step = 0;
  double mean_loss = 0.0;
  MetricsReport valid;
};

struct TrainResult {
  ModelConfig model_config;
  TrainConfig train_config;
  ModelParams<float> best_params;
  ModelParams<float> final_params;
  std::vector<LossReport> steps;
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_valid_recall = -1.0;
  bool early_stopped = false;
};

struct TrainHooks {
  std::function<void(const LossReport&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Training examples for every user; one per user unless sliding windows are on.
std::vector<std::vector<std::int32_t>> training_windows(const SplitCorpus& split,
                                                        bool sliding_window);

/// Adam training over shuffled mini-batches. Model parameters are seeded
/// from `train.seed`; `model.fusion_enabled` is taken from `train`.
TrainResult train_loop(const SplitCorpus& split, const ChunkTable& table, ModelConfig model,
                       const TrainConfig& train, const TrainHooks& hooks = {});

// One gradient step's worth of work, exposed for tests: forward in training
// mode, loss, backward. Accumulates into `grads` (not zeroed here).
template <typename T>
LossReport batch_gradients(const ModelParams<T>& params, const ModelConfig& config,
                           const TrainConfig& train,
                           std::span<const std::vector<std::int32_t>> batch,
                           const ChunkTable& table, std::mt19937_64& dropout_rng,
                           ModelParams<T>& grads);

std::string loss_report_json(const LossReport& report);
std::string epoch_record_json(const EpochRecord& record);
// JSON-lines: one record per step, then one per epoch in order of occurrence.
void write_train_log(const std::filesystem::path& path, const TrainResult& result);

}  // namespace car
