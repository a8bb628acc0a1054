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

#include "car/train.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>

#include "car/error.hpp"
#include "car/hashing.hpp"
#include "car/infer.hpp"
#include "car/log.hpp"

namespace car {
namespace {

// position -> row of trace.logits[h], or -1.
std::vector<std::vector<int>> head_rows(const HeadRequest& req, std::size_t length) {
  std::vector<std::vector<int>> rows(req.positions.size(), std::vector<int>(length, -1));
  for (std::size_t h = 0; h < req.positions.size(); ++h) {
    for (std::size_t r = 0; r < req.positions[h].size(); ++r) {
      rows[h][req.positions[h][r]] = static_cast<int>(r);
    }
  }
  return rows;
}

int require_row(const std::vector<std::vector<int>>& rows, int head, std::size_t position) {
  const int row = rows[static_cast<std::size_t>(head)][position];
  if (row < 0) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("head {} was not evaluated at loss position {}", head, position));
  }
  return row;
}

// NLL of `target` under softmax(logits.row(row)); when `grad` is non-null
// adds weight * (softmax - onehot) to grad.row(row).
template <typename T>
double softmax_nll(const Mat<T>& logits, int row, std::int32_t target, double weight,
                   Mat<T>* grad) {
  const Eigen::Index cols = logits.cols();
  if (target < 0 || target >= cols) {
    throw Error(ErrorKind::kOutOfRange,
                fmt::format("target {} outside head range [0, {})", target, cols));
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(logits(row, c)));
  double sum = 0.0;
  for (Eigen::Index c = 0; c < cols; ++c) sum += std::exp(static_cast<double>(logits(row, c)) - mx);
  const double lse = mx + std::log(sum);
  if (grad != nullptr) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      const double p = std::exp(static_cast<double>(logits(row, c)) - lse);
      (*grad)(row, c) += static_cast<T>(weight * (p - (c == target ? 1.0 : 0.0)));
    }
  }
  return lse - static_cast<double>(logits(row, target));
}

template <typename T>
void zero_logit_grads(const ForwardTrace<T>& trace, std::vector<Mat<T>>& out) {
  out.resize(trace.logits.size());
  for (std::size_t h = 0; h < trace.logits.size(); ++h) {
    out[h] = Mat<T>::Zero(trace.logits[h].rows(), trace.logits[h].cols());
  }
}

template <typename T>
std::vector<Mat<T>*> tensor_list(ModelParams<T>& p) {
  std::vector<Mat<T>*> out;
  p.for_each([&](const std::string&, Mat<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::vector<const Mat<T>*> tensor_list(const ModelParams<T>& p) {
  std::vector<const Mat<T>*> out;
  p.for_each([&](const std::string&, const Mat<T>& m) { out.push_back(&m); });
  return out;
}

}  // namespace

const char* objective_name(Objective objective) {
  return objective == Objective::kCar ? "car" : "ar";
}

Objective parse_objective(const std::string& name) {
  if (name == "car") return Objective::kCar;
  if (name == "ar") return Objective::kAr;
  throw Error(ErrorKind::kInvalidArgument, "unknown objective '" + name + "' (car|ar)");
}

void TrainConfig::validate() const {
  if (!(alpha >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "alpha must be >= 0");
  if (batch_size < 1) throw Error(ErrorKind::kInvalidArgument, "batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) {
    throw Error(ErrorKind::kInvalidArgument, "learning_rate must be >= 0");
  }
  if (max_epochs < 1) throw Error(ErrorKind::kInvalidArgument, "max_epochs must be >= 1");
  if (patience < 0) throw Error(ErrorKind::kInvalidArgument, "patience must be >= 0");
}

CarExample make_car_example(const ChunkTable& table, std::span<const std::int32_t> items) {
  if (items.empty()) throw Error(ErrorKind::kInvalidArgument, "training example needs an item");
  const VocabLayout& layout = table.layout();
  const auto context = items.first(items.size() - 1);
  CarExample ex;
  ex.input = table.flatten(context, context.size() + 1).tokens;
  ex.targets.resize(ex.input.size());
  const auto stride = static_cast<std::size_t>(layout.chunk_len());
  for (std::size_t j = 0; j < items.size(); ++j) {
    const std::int32_t item = items[j];
    ChunkTarget& t = ex.targets[j * stride];
    const auto& codes = table.sid(item).codes;
    t.codes.assign(codes.begin(), codes.begin() + layout.levels());
    t.item = item;
  }
  ex.loss_positions = car_loss_positions(ex.targets, layout);
  return ex;
}

ArExample make_ar_example(const ChunkTable& table, std::span<const std::int32_t> items) {
  if (items.empty()) throw Error(ErrorKind::kInvalidArgument, "training example needs an item");
  ArExample ex;
  ex.input = table.flatten(items, items.size()).tokens;
  ex.targets.assign(ex.input.size(), kPadToken);
  for (std::size_t p = 0; p + 1 < ex.input.size(); ++p) ex.targets[p] = ex.input[p + 1];
  return ex;
}

std::vector<std::size_t> car_loss_positions(std::span<const ChunkTarget> targets,
                                            const VocabLayout& layout) {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < targets.size(); ++p) {
    if ((p == 0 || layout.is_chunk_final(p)) && targets[p].active()) out.push_back(p);
  }
  return out;
}

int ar_head_for(TokenId target, const VocabLayout& layout) {
  const DecodedToken d = layout.decode(target);
  switch (d.kind) {
    case TokenKind::kSid:
      return d.level;
    case TokenKind::kItem:
      return layout.levels();
    default:
      return -1;
  }
}

HeadRequest ar_head_request(std::span<const TokenId> targets, const VocabLayout& layout) {
  HeadRequest req = HeadRequest::none(layout.levels());
  for (std::size_t p = 0; p < targets.size(); ++p) {
    const int h = ar_head_for(targets[p], layout);
    if (h >= 0) req.positions[static_cast<std::size_t>(h)].push_back(p);
  }
  return req;
}

template <typename T>
LossReport chunk_loss(std::span<const ForwardTrace<T>> traces,
                      std::span<const std::vector<ChunkTarget>> targets, const ModelConfig& config,
                      double alpha, bool think_enabled, std::vector<std::vector<Mat<T>>>* grads) {
  if (traces.size() != targets.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "one target list per trace required");
  }
  const VocabLayout layout = config.layout();
  const int n = config.levels;
  std::vector<std::vector<std::size_t>> positions(traces.size());
  std::size_t total_positions = 0;
  for (std::size_t b = 0; b < traces.size(); ++b) {
    if (targets[b].size() != traces[b].length()) {
      throw Error(ErrorKind::kDimensionMismatch, "targets must align with trace positions");
    }
    positions[b] = car_loss_positions(targets[b], layout);
    total_positions += positions[b].size();
  }
  if (total_positions == 0) throw Error(ErrorKind::kInvalidArgument, "no loss positions in batch");

  const double inv_p = 1.0 / static_cast<double>(total_positions);
  const double think_weight = alpha * inv_p / n;
  std::vector<double> level_sum(static_cast<std::size_t>(n), 0.0);
  double act_sum = 0.0;
  if (grads != nullptr) grads->resize(traces.size());

  for (std::size_t b = 0; b < traces.size(); ++b) {
    const ForwardTrace<T>& tr = traces[b];
    const auto rows = head_rows(tr.heads, tr.length());
    std::vector<Mat<T>>* g = nullptr;
    if (grads != nullptr) {
      g = &(*grads)[b];
      zero_logit_grads(tr, *g);
    }
    for (std::size_t p : positions[b]) {
      const ChunkTarget& t = targets[b][p];
      if (think_enabled) {
        if (t.codes.size() < static_cast<std::size_t>(n)) {
          throw Error(ErrorKind::kDimensionMismatch, "chunk target lacks SID codes");
        }
        for (int l = 0; l < n; ++l) {
          const auto h = static_cast<std::size_t>(l);
          level_sum[h] += softmax_nll(tr.logits[h], require_row(rows, l, p), t.codes[h],
                                      think_weight, g ? &(*g)[h] : nullptr);
        }
      }
      const int act = config.act_head();
      act_sum += softmax_nll(tr.logits[static_cast<std::size_t>(act)], require_row(rows, act, p),
                             t.item, inv_p, g ? &(*g)[static_cast<std::size_t>(act)] : nullptr);
    }
  }

  LossReport report;
  report.alpha = alpha;
  report.positions = total_positions;
  report.act = act_sum * inv_p;
  if (think_enabled) {
    double think_sum = 0.0;
    for (double s : level_sum) {
      report.per_level.push_back(s * inv_p);
      think_sum += s;
    }
    report.think = think_sum * inv_p / n;
  }
  report.total = alpha * report.think + report.act;
  return report;
}

template <typename T>
LossReport ar_loss(std::span<const ForwardTrace<T>> traces,
                   std::span<const std::vector<TokenId>> targets, const ModelConfig& config,
                   std::vector<std::vector<Mat<T>>>* grads) {
  if (traces.size() != targets.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "one target list per trace required");
  }
  const VocabLayout layout = config.layout();
  std::size_t total_positions = 0;
  for (std::size_t b = 0; b < traces.size(); ++b) {
    if (targets[b].size() != traces[b].length()) {
      throw Error(ErrorKind::kDimensionMismatch, "targets must align with trace positions");
    }
    for (TokenId t : targets[b]) total_positions += ar_head_for(t, layout) >= 0 ? 1 : 0;
  }
  if (total_positions == 0) {
    throw Error(ErrorKind::kInvalidArgument, "no supervised positions in batch");
  }
  const double inv_p = 1.0 / static_cast<double>(total_positions);
  const auto n = static_cast<std::size_t>(config.levels);
  std::vector<double> level_sum(n, 0.0);
  std::vector<std::size_t> level_count(n, 0);
  double act_sum = 0.0;
  if (grads != nullptr) grads->resize(traces.size());

  for (std::size_t b = 0; b < traces.size(); ++b) {
    const ForwardTrace<T>& tr = traces[b];
    const auto rows = head_rows(tr.heads, tr.length());
    std::vector<Mat<T>>* g = nullptr;
    if (grads != nullptr) {
      g = &(*grads)[b];
      zero_logit_grads(tr, *g);
    }
    for (std::size_t p = 0; p < targets[b].size(); ++p) {
      const TokenId target = targets[b][p];
      const int head = ar_head_for(target, layout);
      if (head < 0) continue;
      const auto h = static_cast<std::size_t>(head);
      const double nll = softmax_nll(tr.logits[h], require_row(rows, head, p),
                                     layout.decode(target).value, inv_p, g ? &(*g)[h] : nullptr);
      if (h < n) {
        level_sum[h] += nll;
        ++level_count[h];
      } else {
        act_sum += nll;
      }
    }
  }

  LossReport report;
  report.alpha = 1.0;
  report.positions = total_positions;
  double think_sum = 0.0;
  for (std::size_t l = 0; l < n; ++l) {
    think_sum += level_sum[l];
    report.per_level.push_back(level_count[l] ? level_sum[l] / level_count[l] : 0.0);
  }
  report.think = think_sum * inv_p;
  report.act = act_sum * inv_p;
  report.total = report.think + report.act;
  return report;
}

template <typename T>
Adam<T>::Adam(const ModelParams<T>& like, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(like), v_(like) {
  m_.set_zero();
  v_.set_zero();
}

template <typename T>
void Adam<T>::step(ModelParams<T>& params, const ModelParams<T>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto p = tensor_list(params);
  auto g = tensor_list(grads);
  auto m = tensor_list(m_);
  auto v = tensor_list(v_);
  if (p.size() != g.size() || p.size() != m.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "optimizer state does not match parameters");
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    T* pd = p[i]->data();
    const T* gd = g[i]->data();
    T* md = m[i]->data();
    T* vd = v[i]->data();
    const Eigen::Index size = p[i]->size();
    if (g[i]->size() != size) {
      throw Error(ErrorKind::kDimensionMismatch, "gradient shape does not match parameter");
    }
    for (Eigen::Index j = 0; j < size; ++j) {
      const double gj = gd[j];
      const double mj = beta1_ * md[j] + (1.0 - beta1_) * gj;
      const double vj = beta2_ * vd[j] + (1.0 - beta2_) * gj * gj;
      md[j] = static_cast<T>(mj);
      vd[j] = static_cast<T>(vj);
      const double update = lr_ * (mj / c1) / (std::sqrt(vj / c2) + eps_);
      pd[j] = static_cast<T>(pd[j] - update);
    }
  }
}

template <typename T>
LossReport batch_gradients(const ModelParams<T>& params, const ModelConfig& config,
                           const TrainConfig& train,
                           std::span<const std::vector<std::int32_t>> batch,
                           const ChunkTable& table, std::mt19937_64& dropout_rng,
                           ModelParams<T>& grads) {
  const VocabLayout& layout = table.layout();
  const int n = config.levels;
  const bool car = train.objective == Objective::kCar;

  // Pass 1: examples and supervised-position counts; the batch loss is a
  // mean over all positions, so each example is weighted by its share.
  std::vector<CarExample> car_ex;
  std::vector<ArExample> ar_ex;
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  for (const auto& items : batch) {
    std::size_t c = 0;
    if (car) {
      car_ex.push_back(make_car_example(table, items));
      c = car_ex.back().loss_positions.size();
    } else {
      ar_ex.push_back(make_ar_example(table, items));
      for (TokenId t : ar_ex.back().targets) c += ar_head_for(t, layout) >= 0 ? 1 : 0;
    }
    counts.push_back(c);
    total += c;
  }
  if (total == 0) throw Error(ErrorKind::kInvalidArgument, "no loss positions in batch");

  LossReport out;
  out.alpha = car ? train.alpha : 1.0;
  out.positions = total;
  out.per_level.assign(car && !train.think_loss_enabled ? 0 : static_cast<std::size_t>(n), 0.0);
  std::vector<double> level_weight(out.per_level.size(), 0.0);

  std::vector<std::vector<Mat<T>>> logit_grads;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (counts[b] == 0) continue;
    const double share = static_cast<double>(counts[b]) / static_cast<double>(total);
    LossReport r;
    ForwardTrace<T> trace;
    if (car) {
      const CarExample& ex = car_ex[b];
      HeadRequest req = HeadRequest::same(ex.loss_positions, n);
      if (!train.think_loss_enabled) {
        for (int l = 0; l < n; ++l) req.positions[static_cast<std::size_t>(l)].clear();
      }
      trace = forward(std::span<const TokenId>(ex.input), params, config, req, ForwardMode::kTrain,
                      &dropout_rng);
      const std::vector<ChunkTarget>* tp = &ex.targets;
      r = chunk_loss<T>(std::span<const ForwardTrace<T>>(&trace, 1),
                        std::span<const std::vector<ChunkTarget>>(tp, 1), config, train.alpha,
                        train.think_loss_enabled, &logit_grads);
    } else {
      const ArExample& ex = ar_ex[b];
      trace = forward(std::span<const TokenId>(ex.input), params, config,
                      ar_head_request(ex.targets, layout), ForwardMode::kTrain, &dropout_rng);
      const std::vector<TokenId>* tp = &ex.targets;
      r = ar_loss<T>(std::span<const ForwardTrace<T>>(&trace, 1),
                     std::span<const std::vector<TokenId>>(tp, 1), config, &logit_grads);
    }
    for (auto& g : logit_grads[0]) g *= static_cast<T>(share);
    backward(trace, params, config, std::span<const Mat<T>>(logit_grads[0]), grads);
    out.think += share * r.think;
    out.act += share * r.act;
    for (std::size_t l = 0; l < out.per_level.size() && l < r.per_level.size(); ++l) {
      out.per_level[l] += share * r.per_level[l];
      level_weight[l] += share;
    }
  }
  for (std::size_t l = 0; l < out.per_level.size(); ++l) {
    if (level_weight[l] > 0) out.per_level[l] /= level_weight[l];
  }
  out.total = out.alpha * out.think + out.act;
  return out;
}

std::vector<std::vector<std::int32_t>> training_windows(const SplitCorpus& split,
                                                        bool sliding_window) {
  const std::size_t h = split.max_history;
  std::vector<std::vector<std::int32_t>> out;
  for (const auto& u : split.users) {
    if (u.train.empty()) continue;
    if (!sliding_window || u.train.size() <= h) {
      out.push_back(u.training_history(h));
      continue;
    }
    for (std::size_t end = h; end <= u.train.size(); ++end) {
      out.emplace_back(u.train.begin() + static_cast<std::ptrdiff_t>(end - h),
                       u.train.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return out;
}

TrainResult train_loop(const SplitCorpus& split, const ChunkTable& table, ModelConfig model,
                       const TrainConfig& train, const TrainHooks& hooks) {
  train.validate();
  model.levels = table.layout().levels();
  model.k = table.layout().k();
  model.num_items = table.layout().num_items();
  model.fusion_enabled = train.fusion_enabled;
  model.validate();
  if (split.max_history > model.max_chunks) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("history cap {} exceeds the model's {} chunks", split.max_history,
                            model.max_chunks));
  }

  const auto windows = training_windows(split, train.sliding_window);
  if (windows.empty()) throw Error(ErrorKind::kInvalidArgument, "no training examples");

  TrainResult result;
  result.model_config = model;
  result.train_config = train;
  ModelParams<float> params = init_params<float>(model, mix_seed(train.seed, 1));
  ModelParams<float> grads = zero_params<float>(model);
  Adam<float> adam(params, train.learning_rate, train.beta1, train.beta2, train.adam_eps);
  std::mt19937_64 dropout_rng(mix_seed(train.seed, 2));
  std::mt19937_64 shuffle_rng(mix_seed(train.seed, 3));

  EvalOptions eval;
  eval.ks = {5, 10};
  if (train.objective == Objective::kAr) eval.ar_beams = 10;

  std::vector<std::size_t> order(windows.size());
  std::vector<std::vector<std::int32_t>> batch;
  std::int64_t step = 0;
  int since_best = 0;
  double best_ndcg = -1.0;
  bool stop = false;
  for (int epoch = 1; epoch <= train.max_epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += train.batch_size) {
      const std::size_t end = std::min(order.size(), start + train.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(windows[order[i]]);
      grads.set_zero();
      LossReport report = batch_gradients<float>(params, model, train, batch, table,
                                                 dropout_rng, grads);
      report.step = ++step;
      if (!std::isfinite(report.total)) {
        throw Error(ErrorKind::kDivergence,
                    fmt::format("non-finite loss at step {} (epoch {}): think={} act={}", step,
                                epoch, report.think, report.act));
      }
      adam.step(params, grads);
      loss_sum += report.total;
      ++batches;
      if (hooks.on_step) hooks.on_step(report);
      result.steps.push_back(std::move(report));
      if (train.max_steps > 0 && step >= train.max_steps) {
        stop = true;
        break;
      }
    }

    EpochRecord record;
    record.epoch = epoch;
    record.step = step;
    record.mean_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    if (train.validate_each_epoch) {
      Model<float> snapshot(model, params);
      record.valid = evaluate_split(snapshot, table, split, SplitKind::kValid, eval);
      const double recall = record.valid.recall_at(10);
      const double ndcg = record.valid.ndcg_at(10);
      // Ties on Recall@10 fall back to NDCG@10.
      if (recall > result.best_valid_recall ||
          (recall == result.best_valid_recall && ndcg > best_ndcg)) {
        result.best_valid_recall = recall;
        best_ndcg = ndcg;
        result.best_epoch = epoch;
        result.best_params = params;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    log_info(fmt::format("epoch {} step {} loss {:.5f}", epoch, step, record.mean_loss));
    if (hooks.on_epoch) hooks.on_epoch(record);
    result.epochs.push_back(std::move(record));
    if (train.patience > 0 && train.validate_each_epoch && since_best >= train.patience) {
      result.early_stopped = true;
      stop = true;
    }
  }
  result.final_params = std::move(params);
  if (result.best_epoch < 0) result.best_params = result.final_params;
  return result;
}

std::string loss_report_json(const LossReport& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["total"] = r.total;
  j["think"] = r.think;
  j["act"] = r.act;
  j["per_level"] = r.per_level;
  return j.dump();
}

std::string epoch_record_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["step"] = r.step;
  j["mean_loss"] = r.mean_loss;
  nlohmann::ordered_json valid;
  valid["users"] = r.valid.users;
  for (std::size_t i = 0; i < r.valid.ks.size(); ++i) {
    const auto k = std::to_string(r.valid.ks[i]);
    valid["recall@" + k] = r.valid.recall[i];
    valid["ndcg@" + k] = r.valid.ndcg[i];
  }
  j["valid"] = valid;
  return j.dump();
}

void write_train_log(const std::filesystem::path& path, const TrainResult& result) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  std::size_t e = 0;
  for (const auto& s : result.steps) {
    out << loss_report_json(s) << '\n';
    while (e < result.epochs.size() && result.epochs[e].step == s.step) {
      out << epoch_record_json(result.epochs[e++]) << '\n';
    }
  }
  for (; e < result.epochs.size(); ++e) out << epoch_record_json(result.epochs[e]) << '\n';
}

#define CAR_INSTANTIATE_TRAIN(T)                                                               \
  template LossReport chunk_loss<T>(std::span<const ForwardTrace<T>>,                          \
                                    std::span<const std::vector<ChunkTarget>>,                 \
                                    const ModelConfig&, double, bool,                          \
                                    std::vector<std::vector<Mat<T>>>*);                        \
  template LossReport ar_loss<T>(std::span<const ForwardTrace<T>>,                             \
                                 std::span<const std::vector<TokenId>>, const ModelConfig&,    \
                                 std::vector<std::vector<Mat<T>>>*);                           \
  template class Adam<T>;                                                                      \
  template LossReport batch_gradients<T>(const ModelParams<T>&, const ModelConfig&,            \
                                         const TrainConfig&,                                   \
                                         std::span<const std::vector<std::int32_t>>,           \
                                         const ChunkTable&, std::mt19937_64&, ModelParams<T>&);

CAR_INSTANTIATE_TRAIN(float)
CAR_INSTANTIATE_TRAIN(double)

}  // namespace car
