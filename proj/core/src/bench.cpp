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

#include "car/bench.hpp"

#include <fmt/core.h>

#include <chrono>
#include <fstream>
#include <nlohmann/json.hpp>
#include <thread>

#include "car/error.hpp"
#include "car/infer.hpp"

namespace car {
namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
double seconds_per_sample(std::size_t samples, F&& fn) {
  const auto start = Clock::now();
  for (std::size_t i = 0; i < samples; ++i) fn(i);
  const std::chrono::duration<double> elapsed = Clock::now() - start;
  return elapsed.count() / static_cast<double>(samples);
}

}  // namespace

std::string hardware_note() {
  std::string cpu = "unknown cpu";
  std::ifstream info("/proc/cpuinfo");
  std::string line;
  while (std::getline(info, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  return fmt::format("{}; {} hw threads; timing loop single-threaded, batch size 1", cpu,
                     std::thread::hardware_concurrency());
}

LatencyTable bench_inference(const Model<float>& model,
                             std::span<const std::vector<TokenId>> histories,
                             const BenchOptions& options) {
  if (options.samples == 0) throw Error(ErrorKind::kInvalidArgument, "samples must be >= 1");
  if (histories.size() < options.samples) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("{} evaluation users available, {} samples requested",
                            histories.size(), options.samples));
  }
  LatencyTable table;
  table.warmup = options.warmup;
  table.samples = options.samples;
  table.hardware_note = hardware_note();

  for (int beams : options.beams) {
    if (beams < 1) throw Error(ErrorKind::kInvalidArgument, "beam counts must be >= 1");
    const auto b = static_cast<std::size_t>(beams);
    for (std::size_t i = 0; i < options.warmup; ++i) {
      const auto& h = histories[i % histories.size()];
      (void)beam_decode(model, h, b);
      (void)car_decode(model, h);
    }
    LatencyRow row;
    row.num_beams = beams;
    model.reset_forward_count();
    row.ar_seconds = seconds_per_sample(options.samples, [&](std::size_t i) {
      (void)beam_decode(model, histories[i], b);
    });
    row.ar_forwards = model.forward_count();
    model.reset_forward_count();
    row.car_seconds = seconds_per_sample(options.samples, [&](std::size_t i) {
      (void)car_decode(model, histories[i]);
    });
    row.car_forwards = model.forward_count();
    row.ratio = row.ar_seconds / row.car_seconds;
    table.rows.push_back(row);
  }
  return table;
}

std::string latency_table_text(const LatencyTable& table) {
  std::string out = fmt::format("{:>9}  {:>12}  {:>12}  {:>8}  {:>11}  {:>12}\n", "num_beams",
                                "AR (s)", "CAR (s)", "Ratio", "AR fwd", "CAR fwd");
  for (const auto& r : table.rows) {
    out += fmt::format("{:>9}  {:>12.6f}  {:>12.6f}  {:>8.1f}  {:>11}  {:>12}\n", r.num_beams,
                       r.ar_seconds, r.car_seconds, r.ratio, r.ar_forwards, r.car_forwards);
  }
  out += fmt::format("# samples={} warmup={}\n# {}\n", table.samples, table.warmup,
                     table.hardware_note);
  return out;
}

std::string latency_table_json(const LatencyTable& table) {
  nlohmann::ordered_json j;
  j["samples"] = table.samples;
  j["warmup"] = table.warmup;
  j["hardware"] = table.hardware_note;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : table.rows) {
    j["rows"].push_back({{"num_beams", r.num_beams},
                         {"ar_seconds_per_sample", r.ar_seconds},
                         {"car_seconds_per_sample", r.car_seconds},
                         {"ratio", r.ratio},
                         {"ar_forwards", r.ar_forwards},
                         {"car_forwards", r.car_forwards}});
  }
  return j.dump(2);
}

}  // namespace car
