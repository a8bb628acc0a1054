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

#include "car/log.hpp"

#include <fmt/core.h>

#include <atomic>
#include <cstdio>

#include "car/error.hpp"

namespace car {
namespace {

std::atomic<LogLevel> g_level{LogLevel::kWarning};

const char* level_tag(LogLevel level) {
  switch (level) {
    case LogLevel::kDebug: return "debug";
    case LogLevel::kInfo: return "info";
    case LogLevel::kWarning: return "warning";
    case LogLevel::kError: return "error";
    case LogLevel::kOff: break;
  }
  return "";
}

}  // namespace

void set_log_level(LogLevel level) { g_level.store(level); }
LogLevel log_level() { return g_level.load(); }

void log_message(LogLevel level, std::string_view message) {
  if (level < g_level.load() || level == LogLevel::kOff) return;
  fmt::print(stderr, "[car:{}] {}\n", level_tag(level), message);
}

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kParse: return "parse_error";
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kCorpusEliminated: return "corpus_eliminated";
    case ErrorKind::kDimensionMismatch: return "dimension_mismatch";
    case ErrorKind::kOutOfRange: return "out_of_range";
    case ErrorKind::kIo: return "io_error";
    case ErrorKind::kIncompatibleCheckpoint: return "incompatible_checkpoint";
    case ErrorKind::kDivergence: return "divergence";
  }
  return "unknown";
}

}  // namespace car
