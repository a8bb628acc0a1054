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

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "car/chunkvocab.hpp"

namespace car {

struct ModelConfig {
  int layers = 1;
  int heads = 8;
  int embed_dim = 128;
  int mlp_hidden = 1024;
  double dropout = 0.1;
  std::size_t max_chunks = kMaxHistoryChunks;
  int levels = 4;
  int k = 256;
  std::int32_t num_items = 0;
  bool fusion_enabled = true;

  VocabLayout layout() const { return VocabLayout(levels, k, num_items); }
  std::size_t max_positions() const { return layout().max_positions(max_chunks); }
  int act_head() const { return levels; }
  int num_heads_out() const { return levels + 1; }
  void validate() const;
  // Stable one-line rendering; also the checkpoint header payload.
  std::string describe() const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct BlockParams {
  Mat<T> ln1_gain, ln1_bias;  // 1 x D
  Mat<T> attn_w, attn_b;      // D x 3D, 1 x 3D  (q | k | v)
  Mat<T> proj_w, proj_b;      // D x D, 1 x D
  Mat<T> ln2_gain, ln2_bias;  // 1 x D
  Mat<T> fc_w, fc_b;          // D x H, 1 x H
  Mat<T> out_w, out_b;        // H x D, 1 x D
};

template <typename T>
struct ModelParams {
  Mat<T> token_embedding;     // vocab x D
  Mat<T> position_embedding;  // max_positions x D
  std::vector<BlockParams<T>> blocks;
  Mat<T> lnf_gain, lnf_bias;
  std::vector<Mat<T>> think_w, think_b;  // per level: D x k, 1 x k
  Mat<T> act_w, act_b;                   // D x N, 1 x N

  // Visits every tensor with a stable name, in a fixed order.
  template <typename F>
  void for_each(F&& fn) {
    visit(*this, fn);
  }
  template <typename F>
  void for_each(F&& fn) const {
    visit(*this, fn);
  }

  void set_zero() {
    for_each([](const std::string&, auto& m) { m.setZero(); });
  }

  template <typename U>
  ModelParams<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit(Self& p, F& fn) {
    fn(std::string("tok_emb"), p.token_embedding);
    fn(std::string("pos_emb"), p.position_embedding);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      auto& blk = p.blocks[b];
      fn(pre + "ln1.gain", blk.ln1_gain);
      fn(pre + "ln1.bias", blk.ln1_bias);
      fn(pre + "attn.w", blk.attn_w);
      fn(pre + "attn.b", blk.attn_b);
      fn(pre + "proj.w", blk.proj_w);
      fn(pre + "proj.b", blk.proj_b);
      fn(pre + "ln2.gain", blk.ln2_gain);
      fn(pre + "ln2.bias", blk.ln2_bias);
      fn(pre + "fc.w", blk.fc_w);
      fn(pre + "fc.b", blk.fc_b);
      fn(pre + "out.w", blk.out_w);
      fn(pre + "out.b", blk.out_b);
    }
    fn(std::string("lnf.gain"), p.lnf_gain);
    fn(std::string("lnf.bias"), p.lnf_bias);
    for (std::size_t l = 0; l < p.think_w.size(); ++l) {
      fn("think" + std::to_string(l) + ".w", p.think_w[l]);
      fn("think" + std::to_string(l) + ".b", p.think_b[l]);
    }
    fn(std::string("act.w"), p.act_w);
    fn(std::string("act.b"), p.act_b);
  }
};

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  auto c = [](const Mat<T>& m) -> Mat<U> { return m.template cast<U>(); };
  ModelParams<U> out;
  out.token_embedding = c(token_embedding);
  out.position_embedding = c(position_embedding);
  for (const auto& b : blocks) {
    out.blocks.push_back({c(b.ln1_gain), c(b.ln1_bias), c(b.attn_w), c(b.attn_b), c(b.proj_w),
                          c(b.proj_b), c(b.ln2_gain), c(b.ln2_bias), c(b.fc_w), c(b.fc_b),
                          c(b.out_w), c(b.out_b)});
  }
  out.lnf_gain = c(lnf_gain);
  out.lnf_bias = c(lnf_bias);
  for (const auto& w : think_w) out.think_w.push_back(c(w));
  for (const auto& b : think_b) out.think_b.push_back(c(b));
  out.act_w = c(act_w);
  out.act_b = c(act_b);
  return out;
}

// All-zero tensors with the shapes fixed by `config`; doubles as a gradient
// accumulator.
template <typename T>
ModelParams<T> zero_params(const ModelConfig& config);

// GPT-2 style init: N(0, 0.02) weights, zero biases, unit layer-norm gains;
// residual output projections scaled by 1/sqrt(2 * layers).
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

enum class ForwardMode { kEval, kTrain };

// Which positions each output head is evaluated at. Head index l < levels is
// the level-l think head; index `levels` is the act head.
struct HeadRequest {
  std::vector<std::vector<std::size_t>> positions;

  static HeadRequest all(std::size_t length, int levels);
  static HeadRequest same(std::span<const std::size_t> positions, int levels);
  static HeadRequest none(int levels) { return HeadRequest{std::vector<std::vector<std::size_t>>(levels + 1)}; }
};

template <typename T>
struct BlockTrace {
  Mat<T> x_in;
  Mat<T> ln1_hat, ln1_out;
  Eigen::Matrix<T, Eigen::Dynamic, 1> ln1_rstd;
  Mat<T> qkv;
  std::vector<Mat<T>> probs;       // per head, post-softmax
  std::vector<Mat<T>> probs_mask;  // per head dropout scale (empty: identity)
  Mat<T> ctx;
  Mat<T> proj_mask;
  Mat<T> x_mid;
  Mat<T> ln2_hat, ln2_out;
  Eigen::Matrix<T, Eigen::Dynamic, 1> ln2_rstd;
  Mat<T> fc, act;
  Mat<T> mlp_mask;
};

template <typename T>
struct ForwardTrace {
  std::vector<TokenId> tokens;
  ForwardMode mode = ForwardMode::kEval;
  Mat<T> embed_mask;
  std::vector<BlockTrace<T>> blocks;
  Mat<T> x_final;
  Mat<T> lnf_hat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> lnf_rstd;
  Mat<T> hidden;  // length x D, after the final layer norm
  HeadRequest heads;
  std::vector<Mat<T>> logits;  // per head: rows follow heads.positions[h]

  std::size_t length() const { return tokens.size(); }
};

/// Input layer. Each token's embedding plus, when fusion is enabled, the
/// embeddings of the SID tokens that precede it inside the same chunk.
/// BOS/PAD positions get their own embedding only. Position embeddings are
/// not included.
template <typename T>
Mat<T> fuse_inputs(std::span<const TokenId> tokens, const VocabLayout& layout,
                   const ModelParams<T>& params, bool fusion_enabled);

/// Pre-norm decoder forward pass with causal masking; PAD keys are never
/// attended by other positions. `rng` drives dropout in training mode and
/// may be null otherwise.
template <typename T>
ForwardTrace<T> forward(std::span<const TokenId> tokens, const ModelParams<T>& params,
                        const ModelConfig& config, const HeadRequest& heads, ForwardMode mode,
                        std::mt19937_64* rng = nullptr);

/// Accumulates (+=) parameter gradients of a scalar loss whose gradient with
/// respect to each requested head logit row is `logit_grads[h]`.
template <typename T>
void backward(const ForwardTrace<T>& trace, const ModelParams<T>& params,
              const ModelConfig& config, std::span<const Mat<T>> logit_grads,
              ModelParams<T>& grads);

// Parameters plus an instrumented forward counter.
template <typename T>
class Model {
 public:
  Model() = default;
  Model(ModelConfig config, ModelParams<T> params)
      : config_(std::move(config)), params_(std::move(params)) {}
  Model(const Model& other) : config_(other.config_), params_(other.params_) {}
  Model& operator=(const Model& other) {
    config_ = other.config_;
    params_ = other.params_;
    return *this;
  }

  const ModelConfig& config() const { return config_; }
  const ModelParams<T>& params() const { return params_; }
  ModelParams<T>& mutable_params() { return params_; }

  ForwardTrace<T> forward(std::span<const TokenId> tokens, const HeadRequest& heads,
                          ForwardMode mode = ForwardMode::kEval,
                          std::mt19937_64* rng = nullptr) const {
    forward_count_.fetch_add(1, std::memory_order_relaxed);
    return car::forward(tokens, params_, config_, heads, mode, rng);
  }

  std::uint64_t forward_count() const { return forward_count_.load(); }
  void reset_forward_count() const { forward_count_.store(0); }

 private:
  ModelConfig config_;
  ModelParams<T> params_;
  mutable std::atomic<std::uint64_t> forward_count_{0};
};

// Checkpoint: text header line `CKPT <version> <config...>` followed by
// `name rows cols` lines, each followed by rows*cols little-endian f32.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams<float>& params);
Model<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace car
