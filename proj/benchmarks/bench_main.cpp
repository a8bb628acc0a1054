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

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "car/infer.hpp"
#include "car/semtok.hpp"
#include "car/train.hpp"

namespace {

car::ModelConfig bench_config() {
  car::ModelConfig c;  // default sizes: 1 layer, 8 heads, D=128, 4 levels x 256 codes
  c.num_items = 1000;
  c.dropout = 0.0;
  return c;
}

// 19 random item chunks after BOS, the longest history the decoders accept.
std::vector<car::TokenId> bench_history(const car::ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> code(0, config.k - 1);
  std::uniform_int_distribution<std::int32_t> item(0, config.num_items - 1);
  const auto layout = config.layout();
  std::vector<car::TokenId> out{car::kBosToken};
  for (std::size_t c = 0; c + 1 < config.max_chunks; ++c) {
    for (int l = 0; l < config.levels; ++l) out.push_back(layout.sid_token(l, code(rng)));
    out.push_back(layout.uid_token(item(rng)));
  }
  return out;
}

void BM_CarDecode(benchmark::State& state) {
  const auto config = bench_config();
  const car::Model<float> model(config, car::init_params<float>(config, 1));
  const auto history = bench_history(config, 2);
  for (auto _ : state) benchmark::DoNotOptimize(car::car_decode(model, history));
}
BENCHMARK(BM_CarDecode)->Unit(benchmark::kMicrosecond);

void BM_BeamDecode(benchmark::State& state) {
  const auto config = bench_config();
  const car::Model<float> model(config, car::init_params<float>(config, 1));
  const auto history = bench_history(config, 2);
  const auto beams = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(car::beam_decode(model, history, beams));
}
BENCHMARK(BM_BeamDecode)->Arg(5)->Arg(10)->Arg(15)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_ResidualKmeans(benchmark::State& state) {
  const auto rows = state.range(0);
  std::mt19937_64 rng(3);
  std::normal_distribution<float> gauss(0.f, 1.f);
  car::EmbeddingMatrix x(rows, 32);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = gauss(rng);
  car::TokenizerConfig cfg;
  cfg.levels = 4;
  cfg.k = 32;
  cfg.kmeans_max_iters = 25;
  for (auto _ : state) benchmark::DoNotOptimize(car::fit_residual_kmeans(x, cfg));
}
BENCHMARK(BM_ResidualKmeans)->Arg(1000)->Arg(4000)->Unit(benchmark::kMillisecond);

// One optimizer step's worth of forward + backward on a batch of full-length
// examples.
void BM_BatchGradients(benchmark::State& state) {
  auto config = bench_config();
  config.dropout = 0.1;
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> code(0, config.k - 1);
  std::vector<car::SidTuple> sids(static_cast<std::size_t>(config.num_items));
  for (auto& s : sids) {
    for (int l = 0; l < config.levels; ++l) s.codes.push_back(code(rng));
  }
  const car::ChunkTable table(config.layout(), sids);
  std::uniform_int_distribution<std::int32_t> item(0, config.num_items - 1);
  std::vector<std::vector<std::int32_t>> batch(static_cast<std::size_t>(state.range(0)));
  for (auto& ex : batch) {
    for (int t = 0; t < 20; ++t) ex.push_back(item(rng));
  }
  const auto params = car::init_params<float>(config, 5);
  car::TrainConfig train;
  auto grads = car::zero_params<float>(config);
  for (auto _ : state) {
    grads.set_zero();
    benchmark::DoNotOptimize(
        car::batch_gradients<float>(params, config, train, batch, table, rng, grads));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_BatchGradients)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
