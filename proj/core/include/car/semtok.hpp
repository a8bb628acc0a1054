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
#include <span>
#include <vector>

#include "car/corpus.hpp"

namespace car {

struct TokenizerConfig {
  int levels = 4;
  int k = 256;
  int kmeans_max_iters = 100;
  double kmeans_tol = 1e-6;  // relative SSE change
  std::uint64_t seed = 0;
};

// Semantic ID of one item: one code per level, codes may collide across items.
struct SidTuple {
  std::vector<std::int32_t> codes;

  bool operator==(const SidTuple&) const = default;
};

struct Codebooks {
  int levels = 0;
  int k = 0;
  int dim = 0;
  std::uint64_t seed = 0;
  std::vector<EmbeddingMatrix> centroids;  // per level, k x dim
  std::vector<double> level_sse;           // training SSE after each level

  bool operator==(const Codebooks&) const = default;
};

/// Residual k-means: level l clusters the residuals left by levels < l.
/// k is clamped to the sample count (with a warning) when there are fewer
/// embeddings than codes.
Codebooks fit_residual_kmeans(const EmbeddingMatrix& embeddings, const TokenizerConfig& config);

SidTuple assign_sids(std::span<const float> embedding, const Codebooks& codebooks);
std::vector<SidTuple> assign_all_sids(const EmbeddingMatrix& embeddings,
                                      const Codebooks& codebooks);

/// Mean over items of the squared distance between an embedding and the sum
/// of its assigned centroids through `upto_level` (0 = empty reconstruction).
double reconstruction_error(const EmbeddingMatrix& embeddings, const Codebooks& codebooks,
                            int upto_level);

// Random-hyperplane LSH baseline: log2(k) sign bits per level, one
// independent hyperplane bank per level.
struct LshPlanes {
  int levels = 0;
  int k = 0;
  int dim = 0;
  std::uint64_t seed = 0;
  std::vector<EmbeddingMatrix> planes;  // per level, bits x dim

  int bits() const;
};

LshPlanes fit_lsh(const EmbeddingMatrix& embeddings, const TokenizerConfig& config);
SidTuple assign_lsh(std::span<const float> embedding, const LshPlanes& planes);

// File formats.
void write_codebooks(const std::filesystem::path& path, const Codebooks& codebooks);
// 16-byte header (`CBKB`, u32 levels, k, dim) then level-major LE f32; seed not stored.
void write_codebooks_binary(const std::filesystem::path& path, const Codebooks& codebooks);
// Accepts both the text and binary layouts.
Codebooks read_codebooks(const std::filesystem::path& path);
void write_sid_map(const std::filesystem::path& path, std::span<const SidTuple> sids);
std::vector<SidTuple> read_sid_map(const std::filesystem::path& path);

}  // namespace car
