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

#include "car/nnet.hpp"

#include <fmt/core.h>

#include <cmath>
#include <limits>

#include "car/error.hpp"

namespace car {
namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
Mat<T> normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

// Inverted dropout scale mask; empty when dropout is inactive.
template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, ForwardMode mode,
                    std::mt19937_64* rng) {
  if (mode != ForwardMode::kTrain || p <= 0.0) return {};
  if (rng == nullptr) {
    throw Error(ErrorKind::kInvalidArgument, "training-mode dropout needs an rng");
  }
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*rng) ? scale : T(0);
  return m;
}

template <typename T>
void apply_mask(Mat<T>& x, const Mat<T>& mask) {
  if (mask.size() != 0) x.array() *= mask.array();
}

template <typename T>
void layer_norm(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias, Mat<T>& hat,
                ColVec<T>& rstd, Mat<T>& out) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  hat.resize(rows, cols);
  rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd(r) = inv;
    hat.row(r) = (x.row(r).array() - mean) * inv;
  }
  out = (hat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

// dx for y = hat * g + b; accumulates dg, db.
template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& hat, const ColVec<T>& rstd,
                           const Mat<T>& gain, Mat<T>& dgain, Mat<T>& dbias) {
  dgain.row(0) += (dy.array() * hat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  const Mat<T> dhat = (dy.array().rowwise() * gain.row(0).array()).matrix();
  Mat<T> dx(dy.rows(), dy.cols());
  const T inv_n = T(1) / static_cast<T>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T mean_dhat = dhat.row(r).sum() * inv_n;
    const T mean_dhat_hat = (dhat.row(r).array() * hat.row(r).array()).sum() * inv_n;
    dx.row(r) = rstd(r) * (dhat.row(r).array() - mean_dhat - hat.row(r).array() * mean_dhat_hat);
  }
  return dx;
}

template <typename T>
constexpr T gelu_c() {
  return static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
}

template <typename T>
T gelu(T x) {
  const T inner = gelu_c<T>() * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
T gelu_grad(T x) {
  const T inner = gelu_c<T>() * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(inner);
  const T dinner = gelu_c<T>() * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * dinner;
}

void check_tokens(std::span<const TokenId> tokens, const ModelConfig& config) {
  if (tokens.empty()) throw Error(ErrorKind::kInvalidArgument, "forward: empty token sequence");
  if (tokens.size() > config.max_positions()) {
    throw Error(ErrorKind::kOutOfRange,
                fmt::format("sequence length {} exceeds max positions {}", tokens.size(),
                            config.max_positions()));
  }
  const auto vocab = config.layout().vocab_size();
  for (auto t : tokens) {
    if (t < 0 || t >= vocab) {
      throw Error(ErrorKind::kOutOfRange, fmt::format("token {} outside vocabulary", t));
    }
  }
}

template <typename T>
const Mat<T>& head_weight(const ModelParams<T>& p, const ModelConfig& c, int h) {
  return h == c.act_head() ? p.act_w : p.think_w[static_cast<std::size_t>(h)];
}
template <typename T>
const Mat<T>& head_bias(const ModelParams<T>& p, const ModelConfig& c, int h) {
  return h == c.act_head() ? p.act_b : p.think_b[static_cast<std::size_t>(h)];
}
template <typename T>
Mat<T>& head_weight(ModelParams<T>& p, const ModelConfig& c, int h) {
  return h == c.act_head() ? p.act_w : p.think_w[static_cast<std::size_t>(h)];
}
template <typename T>
Mat<T>& head_bias(ModelParams<T>& p, const ModelConfig& c, int h) {
  return h == c.act_head() ? p.act_b : p.think_b[static_cast<std::size_t>(h)];
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (layers < 1 || heads < 1 || embed_dim < 1 || mlp_hidden < 1) {
    throw Error(ErrorKind::kInvalidArgument, "model dimensions must be positive");
  }
  if (embed_dim % heads != 0) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("embed_dim {} not divisible by heads {}", embed_dim, heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw Error(ErrorKind::kInvalidArgument, "dropout must be in [0, 1)");
  }
  if (max_chunks < 1) throw Error(ErrorKind::kInvalidArgument, "max_chunks must be >= 1");
  (void)layout();  // validates levels / k / items
}

std::string ModelConfig::describe() const {
  return fmt::format(
      "layers={} heads={} embed_dim={} mlp_hidden={} dropout={} max_chunks={} levels={} k={} "
      "items={} fusion={}",
      layers, heads, embed_dim, mlp_hidden, dropout, max_chunks, levels, k, num_items,
      fusion_enabled ? 1 : 0);
}

HeadRequest HeadRequest::all(std::size_t length, int levels) {
  std::vector<std::size_t> pos(length);
  for (std::size_t i = 0; i < length; ++i) pos[i] = i;
  return same(pos, levels);
}

HeadRequest HeadRequest::same(std::span<const std::size_t> positions, int levels) {
  HeadRequest req;
  req.positions.assign(static_cast<std::size_t>(levels) + 1,
                       std::vector<std::size_t>(positions.begin(), positions.end()));
  return req;
}

template <typename T>
ModelParams<T> zero_params(const ModelConfig& config) {
  config.validate();
  const auto d = config.embed_dim;
  const auto h = config.mlp_hidden;
  ModelParams<T> p;
  p.token_embedding = Mat<T>::Zero(config.layout().vocab_size(), d);
  p.position_embedding = Mat<T>::Zero(static_cast<Eigen::Index>(config.max_positions()), d);
  for (int b = 0; b < config.layers; ++b) {
    BlockParams<T> blk;
    blk.ln1_gain = Mat<T>::Zero(1, d);
    blk.ln1_bias = Mat<T>::Zero(1, d);
    blk.attn_w = Mat<T>::Zero(d, 3 * d);
    blk.attn_b = Mat<T>::Zero(1, 3 * d);
    blk.proj_w = Mat<T>::Zero(d, d);
    blk.proj_b = Mat<T>::Zero(1, d);
    blk.ln2_gain = Mat<T>::Zero(1, d);
    blk.ln2_bias = Mat<T>::Zero(1, d);
    blk.fc_w = Mat<T>::Zero(d, h);
    blk.fc_b = Mat<T>::Zero(1, h);
    blk.out_w = Mat<T>::Zero(h, d);
    blk.out_b = Mat<T>::Zero(1, d);
    p.blocks.push_back(std::move(blk));
  }
  p.lnf_gain = Mat<T>::Zero(1, d);
  p.lnf_bias = Mat<T>::Zero(1, d);
  for (int l = 0; l < config.levels; ++l) {
    p.think_w.push_back(Mat<T>::Zero(d, config.k));
    p.think_b.push_back(Mat<T>::Zero(1, config.k));
  }
  p.act_w = Mat<T>::Zero(d, config.num_items);
  p.act_b = Mat<T>::Zero(1, config.num_items);
  return p;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<T> p = zero_params<T>(config);
  std::mt19937_64 rng(seed);
  constexpr double kStd = 0.02;
  const double resid_std = kStd / std::sqrt(2.0 * config.layers);
  p.token_embedding = normal_matrix<T>(p.token_embedding.rows(), p.token_embedding.cols(), kStd, rng);
  p.position_embedding =
      normal_matrix<T>(p.position_embedding.rows(), p.position_embedding.cols(), 0.01, rng);
  p.lnf_gain.setOnes();
  for (auto& blk : p.blocks) {
    blk.ln1_gain.setOnes();
    blk.ln2_gain.setOnes();
    blk.attn_w = normal_matrix<T>(blk.attn_w.rows(), blk.attn_w.cols(), kStd, rng);
    blk.proj_w = normal_matrix<T>(blk.proj_w.rows(), blk.proj_w.cols(), resid_std, rng);
    blk.fc_w = normal_matrix<T>(blk.fc_w.rows(), blk.fc_w.cols(), kStd, rng);
    blk.out_w = normal_matrix<T>(blk.out_w.rows(), blk.out_w.cols(), resid_std, rng);
  }
  for (auto& w : p.think_w) w = normal_matrix<T>(w.rows(), w.cols(), kStd, rng);
  p.act_w = normal_matrix<T>(p.act_w.rows(), p.act_w.cols(), kStd, rng);
  return p;
}

template <typename T>
Mat<T> fuse_inputs(std::span<const TokenId> tokens, const VocabLayout& layout,
                   const ModelParams<T>& params, bool fusion_enabled) {
  const auto dim = params.token_embedding.cols();
  Mat<T> fused(static_cast<Eigen::Index>(tokens.size()), dim);
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    const auto row = static_cast<Eigen::Index>(p);
    fused.row(row) = params.token_embedding.row(tokens[p]);
    if (!fusion_enabled || tokens[p] == kPadToken || tokens[p] == kBosToken) continue;
    const int slot = layout.slot_of(p);
    for (int s = 0; s < slot; ++s) {
      const TokenId prev = tokens[p - static_cast<std::size_t>(slot - s)];
      if (layout.is_sid(prev)) fused.row(row) += params.token_embedding.row(prev);
    }
  }
  return fused;
}

template <typename T>
ForwardTrace<T> forward(std::span<const TokenId> tokens, const ModelParams<T>& params,
                        const ModelConfig& config, const HeadRequest& heads, ForwardMode mode,
                        std::mt19937_64* rng) {
  check_tokens(tokens, config);
  if (static_cast<int>(heads.positions.size()) != config.num_heads_out()) {
    throw Error(ErrorKind::kInvalidArgument, "head request must cover levels + 1 heads");
  }
  const auto len = static_cast<Eigen::Index>(tokens.size());
  const auto dim = static_cast<Eigen::Index>(config.embed_dim);
  const int nh = config.heads;
  const auto dh = dim / nh;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const double p_drop = config.dropout;

  ForwardTrace<T> tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.mode = mode;
  tr.heads = heads;

  Mat<T> x = fuse_inputs(tokens, config.layout(), params, config.fusion_enabled);
  x += params.position_embedding.topRows(len);
  tr.embed_mask = dropout_mask<T>(len, dim, p_drop, mode, rng);
  apply_mask(x, tr.embed_mask);

  // Key j is visible to query i iff j <= i and (token j is not PAD or j == i).
  std::vector<char> key_pad(static_cast<std::size_t>(len));
  for (Eigen::Index j = 0; j < len; ++j) key_pad[j] = tokens[j] == kPadToken;

  tr.blocks.resize(params.blocks.size());
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    const auto& w = params.blocks[b];
    auto& bt = tr.blocks[b];
    bt.x_in = x;
    layer_norm(x, w.ln1_gain, w.ln1_bias, bt.ln1_hat, bt.ln1_rstd, bt.ln1_out);
    bt.qkv.noalias() = bt.ln1_out * w.attn_w;
    bt.qkv.rowwise() += w.attn_b.row(0);

    bt.ctx.setZero(len, dim);
    bt.probs.resize(static_cast<std::size_t>(nh));
    bt.probs_mask.resize(static_cast<std::size_t>(nh));
    for (int h = 0; h < nh; ++h) {
      const auto q = bt.qkv.middleCols(h * dh, dh);
      const auto k = bt.qkv.middleCols(dim + h * dh, dh);
      const auto v = bt.qkv.middleCols(2 * dim + h * dh, dh);
      Mat<T> scores = (q * k.transpose()) * scale;
      Mat<T>& probs = bt.probs[static_cast<std::size_t>(h)];
      probs.setZero(len, len);
      for (Eigen::Index i = 0; i < len; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j) {
          if (key_pad[j] && j != i) continue;
          mx = std::max(mx, scores(i, j));
        }
        T sum = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          if (key_pad[j] && j != i) continue;
          const T e = std::exp(scores(i, j) - mx);
          probs(i, j) = e;
          sum += e;
        }
        probs.row(i) /= sum;
      }
      Mat<T>& mask = bt.probs_mask[static_cast<std::size_t>(h)];
      mask = dropout_mask<T>(len, len, p_drop, mode, rng);
      if (mask.size() != 0) {
        const Mat<T> dropped = probs.cwiseProduct(mask);
        bt.ctx.middleCols(h * dh, dh).noalias() = dropped * v;
      } else {
        bt.ctx.middleCols(h * dh, dh).noalias() = probs * v;
      }
    }
    Mat<T> attn_out = bt.ctx * w.proj_w;
    attn_out.rowwise() += w.proj_b.row(0);
    bt.proj_mask = dropout_mask<T>(len, dim, p_drop, mode, rng);
    apply_mask(attn_out, bt.proj_mask);
    bt.x_mid = x + attn_out;

    layer_norm(bt.x_mid, w.ln2_gain, w.ln2_bias, bt.ln2_hat, bt.ln2_rstd, bt.ln2_out);
    bt.fc.noalias() = bt.ln2_out * w.fc_w;
    bt.fc.rowwise() += w.fc_b.row(0);
    bt.act = bt.fc.unaryExpr([](T v) { return gelu(v); });
    Mat<T> mlp_out = bt.act * w.out_w;
    mlp_out.rowwise() += w.out_b.row(0);
    bt.mlp_mask = dropout_mask<T>(len, dim, p_drop, mode, rng);
    apply_mask(mlp_out, bt.mlp_mask);
    x = bt.x_mid + mlp_out;
  }
  tr.x_final = x;
  layer_norm(x, params.lnf_gain, params.lnf_bias, tr.lnf_hat, tr.lnf_rstd, tr.hidden);

  tr.logits.resize(heads.positions.size());
  for (int h = 0; h < config.num_heads_out(); ++h) {
    const auto& pos = heads.positions[static_cast<std::size_t>(h)];
    Mat<T> rows(static_cast<Eigen::Index>(pos.size()), dim);
    for (std::size_t r = 0; r < pos.size(); ++r) {
      if (pos[r] >= tokens.size()) {
        throw Error(ErrorKind::kOutOfRange, "head position beyond sequence length");
      }
      rows.row(static_cast<Eigen::Index>(r)) = tr.hidden.row(static_cast<Eigen::Index>(pos[r]));
    }
    Mat<T>& out = tr.logits[static_cast<std::size_t>(h)];
    out.noalias() = rows * head_weight(params, config, h);
    out.rowwise() += head_bias(params, config, h).row(0);
  }
  return tr;
}

template <typename T>
void backward(const ForwardTrace<T>& tr, const ModelParams<T>& params, const ModelConfig& config,
              std::span<const Mat<T>> logit_grads, ModelParams<T>& grads) {
  if (static_cast<int>(logit_grads.size()) != config.num_heads_out()) {
    throw Error(ErrorKind::kInvalidArgument, "backward: need one gradient block per head");
  }
  const auto len = static_cast<Eigen::Index>(tr.length());
  const auto dim = static_cast<Eigen::Index>(config.embed_dim);
  const int nh = config.heads;
  const auto dh = dim / nh;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  // Heads.
  Mat<T> dhidden = Mat<T>::Zero(len, dim);
  for (int h = 0; h < config.num_heads_out(); ++h) {
    const auto& g = logit_grads[static_cast<std::size_t>(h)];
    const auto& pos = tr.heads.positions[static_cast<std::size_t>(h)];
    if (g.rows() != static_cast<Eigen::Index>(pos.size())) {
      throw Error(ErrorKind::kInvalidArgument, "backward: gradient rows do not match positions");
    }
    if (pos.empty()) continue;
    Mat<T> rows(static_cast<Eigen::Index>(pos.size()), dim);
    for (std::size_t r = 0; r < pos.size(); ++r) {
      rows.row(static_cast<Eigen::Index>(r)) = tr.hidden.row(static_cast<Eigen::Index>(pos[r]));
    }
    head_weight(grads, config, h).noalias() += rows.transpose() * g;
    head_bias(grads, config, h).row(0) += g.colwise().sum();
    const Mat<T> drows = g * head_weight(params, config, h).transpose();
    for (std::size_t r = 0; r < pos.size(); ++r) {
      dhidden.row(static_cast<Eigen::Index>(pos[r])) += drows.row(static_cast<Eigen::Index>(r));
    }
  }

  Mat<T> dx = layer_norm_backward(dhidden, tr.lnf_hat, tr.lnf_rstd, params.lnf_gain,
                                  grads.lnf_gain, grads.lnf_bias);

  for (std::size_t bi = params.blocks.size(); bi-- > 0;) {
    const auto& w = params.blocks[bi];
    auto& gw = grads.blocks[bi];
    const auto& bt = tr.blocks[bi];

    // MLP branch.
    Mat<T> dm = dx;
    apply_mask(dm, bt.mlp_mask);
    gw.out_b.row(0) += dm.colwise().sum();
    gw.out_w.noalias() += bt.act.transpose() * dm;
    Mat<T> dfc = dm * w.out_w.transpose();
    dfc.array() *= bt.fc.unaryExpr([](T v) { return gelu_grad(v); }).array();
    gw.fc_b.row(0) += dfc.colwise().sum();
    gw.fc_w.noalias() += bt.ln2_out.transpose() * dfc;
    const Mat<T> dln2 = dfc * w.fc_w.transpose();
    Mat<T> dx_mid = dx + layer_norm_backward(dln2, bt.ln2_hat, bt.ln2_rstd, w.ln2_gain,
                                             gw.ln2_gain, gw.ln2_bias);

    // Attention branch.
    Mat<T> da = dx_mid;
    apply_mask(da, bt.proj_mask);
    gw.proj_b.row(0) += da.colwise().sum();
    gw.proj_w.noalias() += bt.ctx.transpose() * da;
    const Mat<T> dctx = da * w.proj_w.transpose();

    Mat<T> dqkv = Mat<T>::Zero(len, 3 * dim);
    for (int h = 0; h < nh; ++h) {
      const auto q = bt.qkv.middleCols(h * dh, dh);
      const auto k = bt.qkv.middleCols(dim + h * dh, dh);
      const auto v = bt.qkv.middleCols(2 * dim + h * dh, dh);
      const auto dctx_h = dctx.middleCols(h * dh, dh);
      const Mat<T>& probs = bt.probs[static_cast<std::size_t>(h)];
      const Mat<T>& mask = bt.probs_mask[static_cast<std::size_t>(h)];

      Mat<T> dprobs = dctx_h * v.transpose();
      if (mask.size() != 0) {
        const Mat<T> dropped = probs.cwiseProduct(mask);
        dqkv.middleCols(2 * dim + h * dh, dh).noalias() = dropped.transpose() * dctx_h;
        dprobs.array() *= mask.array();
      } else {
        dqkv.middleCols(2 * dim + h * dh, dh).noalias() = probs.transpose() * dctx_h;
      }
      // Softmax backward, row-wise.
      Mat<T> dscores(len, len);
      for (Eigen::Index i = 0; i < len; ++i) {
        const T dot = (dprobs.row(i).array() * probs.row(i).array()).sum();
        dscores.row(i) = probs.row(i).array() * (dprobs.row(i).array() - dot);
      }
      dscores *= scale;
      dqkv.middleCols(h * dh, dh).noalias() = dscores * k;
      dqkv.middleCols(dim + h * dh, dh).noalias() = dscores.transpose() * q;
    }
    gw.attn_b.row(0) += dqkv.colwise().sum();
    gw.attn_w.noalias() += bt.ln1_out.transpose() * dqkv;
    const Mat<T> dln1 = dqkv * w.attn_w.transpose();
    dx = dx_mid + layer_norm_backward(dln1, bt.ln1_hat, bt.ln1_rstd, w.ln1_gain, gw.ln1_gain,
                                      gw.ln1_bias);
  }

  apply_mask(dx, tr.embed_mask);
  grads.position_embedding.topRows(len) += dx;

  const auto layout = config.layout();
  for (std::size_t p = 0; p < tr.tokens.size(); ++p) {
    const auto row = static_cast<Eigen::Index>(p);
    const TokenId tok = tr.tokens[p];
    grads.token_embedding.row(tok) += dx.row(row);
    if (!config.fusion_enabled || tok == kPadToken || tok == kBosToken) continue;
    const int slot = layout.slot_of(p);
    for (int s = 0; s < slot; ++s) {
      const TokenId prev = tr.tokens[p - static_cast<std::size_t>(slot - s)];
      if (layout.is_sid(prev)) grads.token_embedding.row(prev) += dx.row(row);
    }
  }
}

#define CAR_INSTANTIATE_NNET(T)                                                              \
  template ModelParams<T> zero_params<T>(const ModelConfig&);                                \
  template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                 \
  template Mat<T> fuse_inputs<T>(std::span<const TokenId>, const VocabLayout&,               \
                                 const ModelParams<T>&, bool);                               \
  template ForwardTrace<T> forward<T>(std::span<const TokenId>, const ModelParams<T>&,       \
                                      const ModelConfig&, const HeadRequest&, ForwardMode,   \
                                      std::mt19937_64*);                                     \
  template void backward<T>(const ForwardTrace<T>&, const ModelParams<T>&,                   \
                            const ModelConfig&, std::span<const Mat<T>>, ModelParams<T>&);

CAR_INSTANTIATE_NNET(float)
CAR_INSTANTIATE_NNET(double)

#undef CAR_INSTANTIATE_NNET

}  // namespace car
