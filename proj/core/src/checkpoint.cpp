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

#include <fmt/core.h>

#include <bit>
#include <fstream>
#include <map>
#include <sstream>

#include "car/error.hpp"
#include "car/nnet.hpp"

namespace car {
namespace {

constexpr int kCheckpointVersion = 1;

ModelConfig parse_config_fields(std::istringstream& header) {
  std::map<std::string, std::string> fields;
  std::string kv;
  while (header >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::kIncompatibleCheckpoint, "malformed header field '" + kv + "'");
    }
    fields[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = fields.find(key);
    if (it == fields.end()) {
      throw Error(ErrorKind::kIncompatibleCheckpoint,
                  fmt::format("checkpoint header lacks '{}'", key));
    }
    return it->second;
  };
  ModelConfig c;
  c.layers = std::stoi(need("layers"));
  c.heads = std::stoi(need("heads"));
  c.embed_dim = std::stoi(need("embed_dim"));
  c.mlp_hidden = std::stoi(need("mlp_hidden"));
  c.dropout = std::stod(need("dropout"));
  c.max_chunks = std::stoul(need("max_chunks"));
  c.levels = std::stoi(need("levels"));
  c.k = std::stoi(need("k"));
  c.num_items = std::stoi(need("items"));
  c.fusion_enabled = need("fusion") == "1";
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams<float>& params) {
  static_assert(std::endian::native == std::endian::little);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << "CKPT " << kCheckpointVersion << ' ' << config.describe() << '\n';
  params.for_each([&](const std::string& name, const Mat<float>& m) {
    out << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(float) * m.size()));
  });
  if (!out) throw Error(ErrorKind::kIo, "failed writing " + path.string());
}

Model<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::istringstream header(line);
  std::string tag;
  int version = 0;
  header >> tag >> version;
  if (tag != "CKPT") throw Error(ErrorKind::kIncompatibleCheckpoint, "not a checkpoint file");
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kIncompatibleCheckpoint,
                fmt::format("unsupported checkpoint version {}", version));
  }
  const ModelConfig config = parse_config_fields(header);
  config.validate();
  ModelParams<float> params = zero_params<float>(config);
  params.for_each([&](const std::string& name, Mat<float>& m) {
    std::string got_name;
    long rows = -1;
    long cols = -1;
    std::getline(in, line);
    std::istringstream tensor_header(line);
    tensor_header >> got_name >> rows >> cols;
    if (got_name != name || rows != m.rows() || cols != m.cols()) {
      throw Error(ErrorKind::kIncompatibleCheckpoint,
                  fmt::format("tensor '{}' [{}x{}] does not match expected '{}' [{}x{}]",
                              got_name, rows, cols, name, m.rows(), m.cols()));
    }
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(float) * m.size()));
    if (!in) throw Error(ErrorKind::kIncompatibleCheckpoint, "truncated tensor " + name);
  });
  return Model<float>(config, std::move(params));
}

}  // namespace car
