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

#include "car/semtok.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "car/error.hpp"
#include "car/hashing.hpp"
#include "car/log.hpp"

namespace car {
namespace {

using ResidualMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::array<char, 4> kBinaryCodebookMagic = {'C', 'B', 'K', 'B'};

double squared_distance(const double* x, const float* c, Eigen::Index dim) {
  double acc = 0.0;
  for (Eigen::Index d = 0; d < dim; ++d) {
    const double diff = x[d] - static_cast<double>(c[d]);
    acc += diff * diff;
  }
  return acc;
}

// Lowest index wins ties.
std::int32_t nearest(const double* x, const EmbeddingMatrix& centroids, double* best_dist) {
  std::int32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double d = squared_distance(x, centroids.row(c).data(), centroids.cols());
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::int32_t>(c);
    }
  }
  if (best_dist) *best_dist = best_d;
  return best;
}

struct KMeansResult {
  EmbeddingMatrix centroids;
  std::vector<std::int32_t> assignment;
  double sse = 0.0;
};

EmbeddingMatrix kmeans_plus_plus(const ResidualMatrix& points, int k, std::mt19937_64& rng) {
  const Eigen::Index n = points.rows();
  const Eigen::Index dim = points.cols();
  EmbeddingMatrix centroids(k, dim);
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());

  auto take = [&](Eigen::Index idx, int slot) {
    chosen[idx] = 1;
    centroids.row(slot) = points.row(idx).cast<float>();
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(points.row(i).data(),
                                               centroids.row(slot).data(), dim));
    }
  };

  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  take(first(rng), 0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int slot = 1; slot < k; ++slot) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Eigen::Index pick = -1;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double run = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        run += d2[i];
        pick = i;
        if (run > target) break;
      }
    } else {
      // Every point coincides with a centroid already: take the first unused one.
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!chosen[i]) {
          pick = i;
          break;
        }
      }
      if (pick < 0) pick = 0;
    }
    take(pick, slot);
  }
  return centroids;
}

KMeansResult run_kmeans(const ResidualMatrix& points, int k, int max_iters, double tol,
                        std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  const Eigen::Index dim = points.cols();
  std::mt19937_64 rng(seed);
  KMeansResult res;
  res.centroids = kmeans_plus_plus(points, k, rng);
  res.assignment.assign(static_cast<std::size_t>(n), -1);
  std::vector<double> dist(static_cast<std::size_t>(n), 0.0);

  double prev_sse = std::numeric_limits<double>::infinity();
  for (int iter = 0;; ++iter) {
    bool changed = false;
    double sse = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto a = nearest(points.row(i).data(), res.centroids, &dist[i]);
      changed |= a != res.assignment[i];
      res.assignment[i] = a;
      sse += dist[i];
    }
    res.sse = sse;
    const bool converged =
        iter > 0 && (!changed || std::abs(prev_sse - sse) <= tol * std::max(prev_sse, 1e-300));
    if (iter >= max_iters || converged) break;
    prev_sse = sse;

    // Lloyd update: centroid = mean of assigned residuals.
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, dim);
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(res.assignment[i]) += points.row(i);
      ++counts[res.assignment[i]];
    }
    std::vector<Eigen::Index> far_order;
    std::size_t far_next = 0;
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        res.centroids.row(c) = (sums.row(c) / static_cast<double>(counts[c])).cast<float>();
        continue;
      }
      // Empty cluster: reseed at the point farthest from its own centroid.
      if (far_order.empty()) {
        far_order.resize(static_cast<std::size_t>(n));
        std::iota(far_order.begin(), far_order.end(), Eigen::Index{0});
        std::stable_sort(far_order.begin(), far_order.end(),
                         [&](Eigen::Index a, Eigen::Index b) { return dist[a] > dist[b]; });
      }
      const Eigen::Index p = far_order[std::min(far_next++, far_order.size() - 1)];
      res.centroids.row(c) = points.row(p).cast<float>();
    }
  }
  return res;
}

void check_finite(const EmbeddingMatrix& embeddings) {
  if (!embeddings.allFinite()) {
    throw Error(ErrorKind::kInvalidArgument, "embeddings contain non-finite values");
  }
}

void check_dim(std::size_t got, int want) {
  if (static_cast<int>(got) != want) {
    throw Error(ErrorKind::kDimensionMismatch,
                fmt::format("embedding dim {} does not match tokenizer dim {}", got, want));
  }
}

}  // namespace

Codebooks fit_residual_kmeans(const EmbeddingMatrix& embeddings, const TokenizerConfig& config) {
  if (config.levels < 1 || config.k < 1) {
    throw Error(ErrorKind::kInvalidArgument, "tokenizer needs levels >= 1 and k >= 1");
  }
  if (embeddings.rows() == 0) throw Error(ErrorKind::kInvalidArgument, "no embeddings to fit");
  check_finite(embeddings);

  int k = config.k;
  if (embeddings.rows() < k) {
    log_warning(fmt::format("residual k-means: k={} exceeds {} samples; clamping", k,
                            embeddings.rows()));
    k = static_cast<int>(embeddings.rows());
  }

  Codebooks books;
  books.levels = config.levels;
  books.k = k;
  books.dim = static_cast<int>(embeddings.cols());
  books.seed = config.seed;

  ResidualMatrix residual = embeddings.cast<double>();
  for (int level = 1; level <= config.levels; ++level) {
    auto fit = run_kmeans(residual, k, config.kmeans_max_iters, config.kmeans_tol,
                          config.seed + static_cast<std::uint64_t>(level));
    for (Eigen::Index i = 0; i < residual.rows(); ++i) {
      residual.row(i) -= fit.centroids.row(fit.assignment[i]).cast<double>();
    }
    books.level_sse.push_back(fit.sse);
    books.centroids.push_back(std::move(fit.centroids));
  }
  return books;
}

SidTuple assign_sids(std::span<const float> embedding, const Codebooks& codebooks) {
  check_dim(embedding.size(), codebooks.dim);
  std::vector<double> residual(embedding.begin(), embedding.end());
  SidTuple sid;
  sid.codes.reserve(static_cast<std::size_t>(codebooks.levels));
  for (const auto& centroids : codebooks.centroids) {
    const auto code = nearest(residual.data(), centroids, nullptr);
    const float* c = centroids.row(code).data();
    for (std::size_t d = 0; d < residual.size(); ++d) residual[d] -= static_cast<double>(c[d]);
    sid.codes.push_back(code);
  }
  return sid;
}

std::vector<SidTuple> assign_all_sids(const EmbeddingMatrix& embeddings,
                                      const Codebooks& codebooks) {
  std::vector<SidTuple> out;
  out.reserve(static_cast<std::size_t>(embeddings.rows()));
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    out.push_back(assign_sids({embeddings.row(i).data(), static_cast<std::size_t>(embeddings.cols())},
                              codebooks));
  }
  return out;
}

double reconstruction_error(const EmbeddingMatrix& embeddings, const Codebooks& codebooks,
                            int upto_level) {
  if (upto_level < 0 || upto_level > codebooks.levels) {
    throw Error(ErrorKind::kOutOfRange, "reconstruction_error: level out of range");
  }
  if (embeddings.rows() == 0) return 0.0;
  check_dim(static_cast<std::size_t>(embeddings.cols()), codebooks.dim);
  double total = 0.0;
  std::vector<double> residual(static_cast<std::size_t>(embeddings.cols()));
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    for (Eigen::Index d = 0; d < embeddings.cols(); ++d) residual[d] = embeddings(i, d);
    for (int level = 0; level < upto_level; ++level) {
      const auto& centroids = codebooks.centroids[level];
      const float* c = centroids.row(nearest(residual.data(), centroids, nullptr)).data();
      for (std::size_t d = 0; d < residual.size(); ++d) residual[d] -= static_cast<double>(c[d]);
    }
    for (double r : residual) total += r * r;
  }
  return total / static_cast<double>(embeddings.rows());
}

// ---------------------------------------------------------------------------

int LshPlanes::bits() const { return std::countr_zero(static_cast<unsigned>(k)); }

LshPlanes fit_lsh(const EmbeddingMatrix& embeddings, const TokenizerConfig& config) {
  if (config.levels < 1 || config.k < 1) {
    throw Error(ErrorKind::kInvalidArgument, "tokenizer needs levels >= 1 and k >= 1");
  }
  if (!std::has_single_bit(static_cast<unsigned>(config.k))) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("LSH needs k to be a power of two, got {}", config.k));
  }
  check_finite(embeddings);
  LshPlanes planes;
  planes.levels = config.levels;
  planes.k = config.k;
  planes.dim = static_cast<int>(embeddings.cols());
  planes.seed = config.seed;
  const int bits = planes.bits();
  for (int level = 0; level < config.levels; ++level) {
    std::mt19937_64 rng(mix_seed(config.seed, static_cast<std::uint64_t>(level)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    EmbeddingMatrix bank(bits, planes.dim);
    for (int b = 0; b < bits; ++b) {
      for (int d = 0; d < planes.dim; ++d) bank(b, d) = static_cast<float>(gauss(rng));
    }
    planes.planes.push_back(std::move(bank));
  }
  return planes;
}

SidTuple assign_lsh(std::span<const float> embedding, const LshPlanes& planes) {
  check_dim(embedding.size(), planes.dim);
  SidTuple sid;
  for (const auto& bank : planes.planes) {
    std::int32_t code = 0;
    for (Eigen::Index b = 0; b < bank.rows(); ++b) {
      double dot = 0.0;
      for (std::size_t d = 0; d < embedding.size(); ++d) {
        dot += static_cast<double>(bank(b, static_cast<Eigen::Index>(d))) * embedding[d];
      }
      if (dot > 0.0) code |= 1 << b;
    }
    sid.codes.push_back(code);
  }
  return sid;
}

// ---------------------------------------------------------------------------

void write_codebooks(const std::filesystem::path& path, const Codebooks& codebooks) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << "CB " << codebooks.levels << ' ' << codebooks.k << ' ' << codebooks.dim << ' '
      << codebooks.seed << '\n';
  for (const auto& level : codebooks.centroids) {
    for (Eigen::Index r = 0; r < level.rows(); ++r) {
      for (Eigen::Index c = 0; c < level.cols(); ++c) {
        if (c) out << ' ';
        out << fmt::format("{}", level(r, c));
      }
      out << '\n';
    }
  }
}

void write_codebooks_binary(const std::filesystem::path& path, const Codebooks& codebooks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(kBinaryCodebookMagic.data(), kBinaryCodebookMagic.size());
  const std::array<std::uint32_t, 3> header = {static_cast<std::uint32_t>(codebooks.levels),
                                               static_cast<std::uint32_t>(codebooks.k),
                                               static_cast<std::uint32_t>(codebooks.dim)};
  out.write(reinterpret_cast<const char*>(header.data()), sizeof(header));
  for (const auto& level : codebooks.centroids) {
    out.write(reinterpret_cast<const char*>(level.data()),
              static_cast<std::streamsize>(sizeof(float) * level.size()));
  }
}

Codebooks read_codebooks(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  Codebooks books;
  if (in.gcount() == 4 && magic == kBinaryCodebookMagic) {
    std::array<std::uint32_t, 3> header{};
    in.read(reinterpret_cast<char*>(header.data()), sizeof(header));
    books.levels = static_cast<int>(header[0]);
    books.k = static_cast<int>(header[1]);
    books.dim = static_cast<int>(header[2]);
    for (int l = 0; l < books.levels; ++l) {
      EmbeddingMatrix level(books.k, books.dim);
      in.read(reinterpret_cast<char*>(level.data()),
              static_cast<std::streamsize>(sizeof(float) * level.size()));
      books.centroids.push_back(std::move(level));
    }
    if (!in) throw Error(ErrorKind::kParse, "truncated binary codebook file");
    return books;
  }
  in.clear();
  in.seekg(0);
  std::string tag;
  in >> tag >> books.levels >> books.k >> books.dim >> books.seed;
  if (tag != "CB" || !in || books.levels < 1 || books.k < 1 || books.dim < 1) {
    throw ParseError(1, "expected 'CB <levels> <k> <dim> <seed>'");
  }
  for (int l = 0; l < books.levels; ++l) {
    EmbeddingMatrix level(books.k, books.dim);
    for (Eigen::Index i = 0; i < level.size(); ++i) {
      if (!(in >> level.data()[i])) throw Error(ErrorKind::kParse, "truncated codebook file");
    }
    books.centroids.push_back(std::move(level));
  }
  return books;
}

void write_sid_map(const std::filesystem::path& path, std::span<const SidTuple> sids) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  for (std::size_t i = 0; i < sids.size(); ++i) {
    out << i << '\t';
    for (std::size_t l = 0; l < sids[i].codes.size(); ++l) {
      if (l) out << ' ';
      out << sids[i].codes[l];
    }
    out << '\n';
  }
}

std::vector<SidTuple> read_sid_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<SidTuple> sids;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (raw.empty()) continue;
    const auto tab = raw.find('\t');
    if (tab == std::string::npos) throw ParseError(line_no, "expected 'item <TAB> codes'");
    const auto index = std::stol(raw.substr(0, tab));
    if (index != static_cast<long>(sids.size())) {
      throw ParseError(line_no, "sid map rows must be in item-index order");
    }
    std::istringstream codes(raw.substr(tab + 1));
    SidTuple sid;
    std::int32_t code = 0;
    while (codes >> code) sid.codes.push_back(code);
    if (!sids.empty() && sid.codes.size() != sids.front().codes.size()) {
      throw ParseError(line_no, "inconsistent SID length");
    }
    sids.push_back(std::move(sid));
  }
  return sids;
}

}  // namespace car
