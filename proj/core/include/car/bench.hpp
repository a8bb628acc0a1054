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
#include <string>
#include <vector>

#include "car/nnet.hpp"

namespace car {

struct LatencyRow {
  int num_beams = 0;
  double ar_seconds = 0.0;   // mean wall-clock seconds per sample
  double car_seconds = 0.0;
  double ratio = 0.0;        // ar / car
  std::uint64_t ar_forwards = 0;   // model forwards over the measured samples
  std::uint64_t car_forwards = 0;
};

struct LatencyTable {
  std::vector<LatencyRow> rows;
  std::size_t warmup = 0;
  std::size_t samples = 0;
  std::string hardware_note;
};

struct BenchOptions {
  std::vector<int> beams{5, 10, 15, 20};
  std::size_t samples = 500;
  std::size_t warmup = 20;
};

// CPU model, thread count and batch size of the timing loop.
std::string hardware_note();

/// Times beam decoding against chunk decoding on the same histories. Each
/// history must end at a chunk boundary. Single-threaded, batch size 1.
LatencyTable bench_inference(const Model<float>& model,
                             std::span<const std::vector<TokenId>> histories,
                             const BenchOptions& options = {});

std::string latency_table_text(const LatencyTable& table);
std::string latency_table_json(const LatencyTable& table);

}  // namespace car
