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
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace car::cli {

// Serialized next to every command's outputs as manifest.json.
struct RunManifest {
  std::string command;
  std::string variant;                        // training variant, when relevant
  std::map<std::string, std::string> config;  // every option, defaults materialized
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, digest
  std::vector<std::string> outputs;

  std::string json() const;
};

// Names the ablation cell selected by the objective and ablation flags.
std::string variant_name(bool ar_objective, bool fusion, bool think_loss);

// Parses `key=value` lines ('#' comments, blank lines allowed).
std::vector<std::pair<std::string, std::string>> read_config_file(
    const std::filesystem::path& path);

/// Runs one command line (argv[0] is the program name). Returns the process
/// exit code; failures print a single `error: <category>: <message>` line.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace car::cli
