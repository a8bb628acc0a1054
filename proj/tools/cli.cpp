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

#include "cli.hpp"

#include <CLI11.hpp>
#include <fmt/core.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>

#include "car/bench.hpp"
#include "car/chunkvocab.hpp"
#include "car/corpus.hpp"
#include "car/error.hpp"
#include "car/experiments.hpp"
#include "car/hashing.hpp"
#include "car/infer.hpp"
#include "car/log.hpp"
#include "car/nnet.hpp"
#include "car/semtok.hpp"
#include "car/train.hpp"

namespace car::cli {

namespace fs = std::filesystem;

std::string RunManifest::json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  if (!variant.empty()) j["variant"] = variant;
  j["seed"] = seed;
  j["config"] = config;
  j["inputs"] = nlohmann::ordered_json::array();
  for (const auto& [path, digest] : inputs) {
    j["inputs"].push_back({{"path", path}, {"fnv1a64", digest}});
  }
  j["outputs"] = outputs;
  return j.dump(2);
}

std::string variant_name(bool ar_objective, bool fusion, bool think_loss) {
  if (ar_objective) return "AR";
  if (!fusion && !think_loss) return "CAR w/o F&T";
  if (!fusion) return "CAR w/o F";
  if (!think_loss) return "CAR w/o T";
  return "CAR";
}

std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config file " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t number = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(number, "expected key=value");
    std::string key = trim(line.substr(0, eq));
    if (key.rfind("--", 0) == 0) key = key.substr(2);
    if (key.empty()) throw ParseError(number, "empty key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

namespace {

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw Error(ErrorKind::kInvalidArgument, fmt::format("bad {} list '{}'", what, text));
    }
  }
  if (out.empty()) throw Error(ErrorKind::kInvalidArgument, fmt::format("empty {} list", what));
  return out;
}

std::string slug(const std::string& label) {
  std::string out;
  for (char c : label) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, fmt::format("cannot create {}: {}", dir.string(), ec.message()));
}

std::map<std::string, std::string> resolved_config(const CLI::App* sub) {
  std::map<std::string, std::string> out;
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name == "format") continue;
    std::string value;
    if (opt->count() > 0) {
      value = opt->results().empty() ? "true" : opt->results().back();
    } else {
      value = opt->get_default_str();
      if (value.empty() && opt->get_expected_min() == 0) value = "false";
    }
    out[name] = value;
  }
  return out;
}

void add_model_options(CLI::App* sub, ModelConfig& m) {
  sub->add_option("--layers", m.layers, "Transformer blocks");
  sub->add_option("--heads", m.heads, "Attention heads per block");
  sub->add_option("--embed-dim", m.embed_dim, "Model width");
  sub->add_option("--mlp-hidden", m.mlp_hidden, "MLP hidden width");
  sub->add_option("--dropout", m.dropout, "Dropout probability");
}

struct TrainFlags {
  TrainConfig config;
  std::string objective = "car";
  bool no_fusion = false;
  bool no_think_loss = false;

  TrainConfig resolve() const {
    TrainConfig t = config;
    t.objective = parse_objective(objective);
    t.fusion_enabled = !no_fusion;
    t.think_loss_enabled = !no_think_loss;
    return t;
  }
};

void add_train_options(CLI::App* sub, TrainFlags& f) {
  TrainConfig& t = f.config;
  sub->add_option("--alpha", t.alpha, "Weight of the think loss");
  sub->add_option("--objective", f.objective, "Training objective")
      ->check(CLI::IsMember({"car", "ar"}));
  sub->add_flag("--no-fusion", f.no_fusion, "Disable intra-chunk input fusion");
  sub->add_flag("--no-think-loss", f.no_think_loss, "Drop the SID (think) loss term");
  sub->add_option("--seed", t.seed, "Seed for initialization, dropout and shuffling");
  sub->add_option("--lr", t.learning_rate, "Adam learning rate");
  sub->add_option("--batch-size", t.batch_size, "Examples per step");
  sub->add_option("--epochs", t.max_epochs, "Maximum epochs");
  sub->add_option("--max-steps", t.max_steps, "Stop after this many steps (-1: no limit)");
  sub->add_option("--patience", t.patience, "Early-stop patience in epochs (0 disables)");
  sub->add_flag("--sliding-window", t.sliding_window, "One example per window of the train prefix");
}

// Loaded split + SID map with consistency checks.
struct TokenizedData {
  SplitCorpus split;
  std::vector<SidTuple> sids;
};

TokenizedData load_tokenized(const fs::path& split_path, const fs::path& sid_path, int levels,
                             int k, RunManifest& manifest) {
  TokenizedData d;
  d.split = read_split(split_path);
  d.sids = read_sid_map(sid_path);
  manifest.inputs.emplace_back(split_path.string(), file_digest_hex(split_path));
  manifest.inputs.emplace_back(sid_path.string(), file_digest_hex(sid_path));
  if (d.sids.size() != static_cast<std::size_t>(d.split.num_items)) {
    throw Error(ErrorKind::kDimensionMismatch,
                fmt::format("SID map covers {} items, split has {}", d.sids.size(),
                            d.split.num_items));
  }
  for (std::size_t i = 0; i < d.sids.size(); ++i) {
    const auto& codes = d.sids[i].codes;
    if (codes.size() < static_cast<std::size_t>(levels)) {
      throw Error(ErrorKind::kDimensionMismatch,
                  fmt::format("item {} has {} SID levels, {} requested", i, codes.size(), levels));
    }
    for (int l = 0; l < levels; ++l) {
      if (codes[static_cast<std::size_t>(l)] >= k) {
        throw Error(ErrorKind::kDimensionMismatch,
                    fmt::format("item {} level {} code {} does not fit k={}", i, l,
                                codes[static_cast<std::size_t>(l)], k));
      }
    }
  }
  return d;
}

Model<float> load_model_for(const fs::path& ckpt, const SplitCorpus& split,
                            RunManifest& manifest) {
  Model<float> model = load_checkpoint(ckpt);
  manifest.inputs.emplace_back(ckpt.string(), file_digest_hex(ckpt));
  if (model.config().num_items != split.num_items) {
    throw Error(ErrorKind::kIncompatibleCheckpoint,
                fmt::format("checkpoint has {} items, split has {}", model.config().num_items,
                            split.num_items));
  }
  return model;
}

std::string metrics_text(const MetricsReport& r) {
  std::string out = fmt::format("split={} users={}\n{:>4}  {:>8}  {:>8}\n", r.split, r.users, "K",
                                "Recall", "NDCG");
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    out += fmt::format("{:>4}  {:>8.4f}  {:>8.4f}\n", r.ks[i], r.recall[i], r.ndcg[i]);
  }
  return out;
}

SplitKind parse_split_kind(const std::string& s) {
  if (s == "train") return SplitKind::kTrain;
  if (s == "valid") return SplitKind::kValid;
  return SplitKind::kTest;
}

class Cli {
 public:
  Cli(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(const std::vector<std::string>& raw_args);

 private:
  struct Command {
    CLI::App* app = nullptr;
    fs::path out_dir;
    std::function<void(RunManifest&)> body;
  };

  Command& add_command(const std::string& name, const std::string& help,
                       std::function<void(RunManifest&)> body);
  void print(const std::string& text_form, const std::string& json_form) {
    out_ << (format_ == "json" ? json_form : text_form);
    if (format_ == "json") out_ << '\n';
  }
  void setup();

  std::ostream& out_;
  std::ostream& err_;
  CLI::App app_{"Chunk-level autoregressive generative recommendation", "car"};
  std::vector<std::unique_ptr<Command>> commands_;
  std::string format_ = "text";
  bool verbose_ = false;

  // Option storage; one instance per command.
  struct {
    fs::path interactions, embeddings;
    int min_count = 5;
    std::size_t max_history = kMaxHistoryChunks;
  } ingest_;
  struct {
    SynthSpec spec;
    std::string transition = "deterministic";
    std::uint64_t seed = 0;
  } synth_;
  struct {
    fs::path embeddings, items;
    std::string method = "res-kmeans";
    TokenizerConfig config;
    bool binary = false;
  } tokenize_;
  struct {
    fs::path split, sid_map;
    int levels = 4;
    int k = 256;
    ModelConfig model;
    TrainFlags train;
  } train_;
  struct {
    fs::path checkpoint, split, sid_map;
    std::string which = "test";
    std::string ks = "5,10";
    bool exclude_history = false;
    std::string decoder = "car";
    std::size_t beams = 10;
  } eval_;
  struct {
    fs::path checkpoint, split, sid_map;
    std::string beams = "5,10,15,20";
    std::size_t samples = 500;
    std::size_t warmup = 20;
  } bench_;
  struct Grid {
    fs::path split, sid_map, embeddings;
    int levels = 4;
    int k = 256;
    ModelConfig model;
    TrainFlags train;
    std::string ks = "5,10";
    std::string which = "test";
    std::string levels_list = "1,2,3,4";
    int max_iters = 100;
  };
  Grid ablate_, sweep_, compare_;
};

Cli::Command& Cli::add_command(const std::string& name, const std::string& help,
                               std::function<void(RunManifest&)> body) {
  auto cmd = std::make_unique<Command>();
  cmd->app = app_.add_subcommand(name, help);
  cmd->app->add_option("--out-dir", cmd->out_dir, "Directory for outputs and manifest.json")
      ->required();
  cmd->app->add_option("--config", "key=value file; command-line flags take precedence");
  cmd->app->add_option("--format", format_, "Report format")
      ->check(CLI::IsMember({"text", "json"}));
  cmd->body = std::move(body);
  commands_.push_back(std::move(cmd));
  return *commands_.back();
}

void add_grid_options(CLI::App* sub, auto& g, bool needs_sid_map) {
  sub->add_option("--split", g.split, "Split file from ingest")->required();
  if (needs_sid_map) sub->add_option("--sid-map", g.sid_map, "SID map from tokenize")->required();
  sub->add_option("--levels", g.levels, "SID levels used by the model");
  sub->add_option("--k", g.k, "Codes per level");
  sub->add_option("--ks", g.ks, "Comma-separated cutoffs");
  sub->add_option("--which", g.which, "Split to report")
      ->check(CLI::IsMember({"train", "valid", "test"}));
  add_model_options(sub, g.model);
  add_train_options(sub, g.train);
}

void Cli::setup() {
  app_.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app_.option_defaults()->always_capture_default();
  app_.require_subcommand(1);
  app_.add_flag("-v,--verbose", verbose_, "Log progress to stderr");

  // ---------------------------------------------------------------- ingest
  {
    auto& c = add_command("ingest", "Filter, sequence and split an interaction log",
                          [this](RunManifest& m) {
      auto& o = ingest_;
      const fs::path dir = commands_[0]->out_dir;
      const auto interactions = ingest_interactions(o.interactions);
      m.inputs.emplace_back(o.interactions.string(), file_digest_hex(o.interactions));
      const FilteredCorpus filtered = five_core_filter(interactions, o.min_count);
      const auto sequences = build_sequences(filtered);
      const SplitCorpus split =
          leave_one_out_split(sequences, filtered.items.size(), o.max_history);
      write_id_map(dir / "users.idmap", filtered.users);
      write_id_map(dir / "items.idmap", filtered.items);
      write_split(dir / "split.tsv", split);
      m.outputs = {"users.idmap", "items.idmap", "split.tsv"};
      if (!o.embeddings.empty()) {
        const EmbeddingFile emb = read_embeddings(o.embeddings);
        m.inputs.emplace_back(o.embeddings.string(), file_digest_hex(o.embeddings));
        write_embeddings_binary(dir / "embeddings.bin", align_embeddings(emb, filtered.items));
        m.outputs.push_back("embeddings.bin");
      }
      nlohmann::ordered_json j{{"users", filtered.users.size()},
                               {"items", filtered.items.size()},
                               {"interactions", filtered.interactions.size()},
                               {"split_users", split.users.size()},
                               {"excluded_short", split.excluded}};
      print(fmt::format("users={} items={} interactions={} split_users={} excluded_short={}\n",
                        filtered.users.size(), filtered.items.size(),
                        filtered.interactions.size(), split.users.size(), split.excluded),
            j.dump(2));
    });
    auto* s = c.app;
    s->add_option("--interactions", ingest_.interactions, "TSV of user, item, timestamp")
        ->required();
    s->add_option("--embeddings", ingest_.embeddings, "Item embeddings to align to the item map");
    s->add_option("--min-count", ingest_.min_count, "k-core threshold");
    s->add_option("--max-history", ingest_.max_history, "Training history cap in items");
  }

  // ----------------------------------------------------------------- synth
  {
    auto& c = add_command("synth", "Generate a planted-pattern corpus", [this](RunManifest& m) {
      auto& o = synth_;
      const fs::path dir = commands_[1]->out_dir;
      o.spec.transition =
          o.transition == "deterministic" ? Transition::kDeterministic : Transition::kClusterMarkov;
      m.seed = o.seed;
      const SynthCorpus corpus = synth_corpus(o.spec, o.seed);
      const auto interactions = corpus.to_interactions();
      write_interactions(dir / "interactions.tsv", interactions);
      const auto ids = corpus.item_ids();
      write_embeddings_text(dir / "embeddings.txt", ids, corpus.embeddings);
      m.outputs = {"interactions.tsv", "embeddings.txt"};
      print(fmt::format("users={} items={} interactions={}\n", corpus.sequences.size(),
                        corpus.embeddings.rows(), interactions.size()),
            nlohmann::ordered_json{{"users", corpus.sequences.size()},
                                   {"items", corpus.embeddings.rows()},
                                   {"interactions", interactions.size()}}
                .dump(2));
    });
    auto* s = c.app;
    auto& sp = synth_.spec;
    s->add_option("--users", sp.users);
    s->add_option("--items", sp.items);
    s->add_option("--dim", sp.dim);
    s->add_option("--clusters", sp.clusters);
    s->add_option("--sub-clusters", sp.sub_clusters);
    s->add_option("--transition", synth_.transition)
        ->check(CLI::IsMember({"deterministic", "cluster-markov"}));
    s->add_option("--noise", sp.noise, "Probability of a random next item");
    s->add_option("--min-length", sp.min_length);
    s->add_option("--max-length", sp.max_length);
    s->add_option("--seed", synth_.seed);
  }

  // -------------------------------------------------------------- tokenize
  {
    auto& c = add_command("tokenize", "Assign semantic IDs to item embeddings",
                          [this](RunManifest& m) {
      auto& o = tokenize_;
      const fs::path dir = commands_[2]->out_dir;
      m.seed = o.config.seed;
      const EmbeddingFile file = read_embeddings(o.embeddings);
      m.inputs.emplace_back(o.embeddings.string(), file_digest_hex(o.embeddings));
      EmbeddingMatrix emb = file.vectors;
      if (!o.items.empty()) {
        emb = align_embeddings(file, read_id_map(o.items));
        m.inputs.emplace_back(o.items.string(), file_digest_hex(o.items));
      }
      std::vector<SidTuple> sids;
      std::string text;
      nlohmann::ordered_json j;
      j["method"] = o.method;
      if (o.method == "res-kmeans") {
        const Codebooks books = fit_residual_kmeans(emb, o.config);
        sids = assign_all_sids(emb, books);
        const char* name = o.binary ? "codebooks.bin" : "codebooks.txt";
        if (o.binary) {
          write_codebooks_binary(dir / name, books);
        } else {
          write_codebooks(dir / name, books);
        }
        m.outputs.push_back(name);
        j["level_sse"] = books.level_sse;
        for (std::size_t l = 0; l < books.level_sse.size(); ++l) {
          text += fmt::format("level {} sse {:.6g}\n", l + 1, books.level_sse[l]);
        }
      } else {
        const LshPlanes planes = fit_lsh(emb, o.config);
        for (Eigen::Index i = 0; i < emb.rows(); ++i) {
          sids.push_back(assign_lsh(
              std::span<const float>(emb.row(i).data(), static_cast<std::size_t>(emb.cols())),
              planes));
        }
        std::ofstream p(dir / "lsh_planes.txt");
        p << "LSH " << planes.levels << ' ' << planes.k << ' ' << planes.dim << ' ' << planes.seed
          << '\n';
        for (const auto& bank : planes.planes) {
          for (Eigen::Index r = 0; r < bank.rows(); ++r) {
            for (Eigen::Index d = 0; d < bank.cols(); ++d) {
              p << (d ? " " : "") << fmt::format("{:.9g}", bank(r, d));
            }
            p << '\n';
          }
        }
        if (!p) throw Error(ErrorKind::kIo, "cannot write lsh_planes.txt");
        m.outputs.push_back("lsh_planes.txt");
      }
      write_sid_map(dir / "sid_map.tsv", sids);
      m.outputs.push_back("sid_map.tsv");
      text += fmt::format("items={} levels={}\n", sids.size(), o.config.levels);
      j["items"] = sids.size();
      print(text, j.dump(2));
    });
    auto* s = c.app;
    s->add_option("--embeddings", tokenize_.embeddings, "Item embeddings (text or binary)")
        ->required();
    s->add_option("--items", tokenize_.items, "Item id map used to align text embeddings");
    s->add_option("--method", tokenize_.method)->check(CLI::IsMember({"res-kmeans", "lsh"}));
    s->add_option("--levels", tokenize_.config.levels);
    s->add_option("--k", tokenize_.config.k);
    s->add_option("--max-iters", tokenize_.config.kmeans_max_iters);
    s->add_option("--tol", tokenize_.config.kmeans_tol);
    s->add_option("--seed", tokenize_.config.seed);
    s->add_flag("--binary", tokenize_.binary, "Write binary codebooks");
  }

  // ----------------------------------------------------------------- train
  {
    auto& c = add_command("train", "Train a model on a tokenized split", [this](RunManifest& m) {
      auto& o = train_;
      const fs::path dir = commands_[3]->out_dir;
      const TrainConfig tc = o.train.resolve();
      m.seed = tc.seed;
      m.variant = variant_name(tc.objective == Objective::kAr, tc.fusion_enabled,
                               tc.think_loss_enabled);
      const TokenizedData data = load_tokenized(o.split, o.sid_map, o.levels, o.k, m);
      const ChunkTable table(VocabLayout(o.levels, o.k, data.split.num_items), data.sids);
      ModelConfig mc = o.model;
      mc.levels = o.levels;
      mc.k = o.k;
      mc.num_items = data.split.num_items;
      TrainHooks hooks;
      if (verbose_) {
        hooks.on_step = [](const LossReport& r) {
          log_info(fmt::format("step {} loss {:.5f}", r.step, r.total));
        };
      }
      const TrainResult result = train_loop(data.split, table, mc, tc, hooks);
      save_checkpoint(dir / "model.ckpt", result.model_config, result.best_params);
      save_checkpoint(dir / "model_final.ckpt", result.model_config, result.final_params);
      write_train_log(dir / "train_log.jsonl", result);
      m.outputs = {"model.ckpt", "model_final.ckpt", "train_log.jsonl"};
      const double last = result.steps.empty() ? 0.0 : result.steps.back().total;
      nlohmann::ordered_json j{{"variant", m.variant},
                               {"steps", result.steps.size()},
                               {"epochs", result.epochs.size()},
                               {"best_epoch", result.best_epoch},
                               {"best_valid_recall@10", result.best_valid_recall},
                               {"final_loss", last},
                               {"early_stopped", result.early_stopped}};
      print(fmt::format("variant={} steps={} epochs={} best_epoch={} best_valid_recall@10={:.4f} "
                        "final_loss={:.5f}\n",
                        m.variant, result.steps.size(), result.epochs.size(), result.best_epoch,
                        result.best_valid_recall, last),
            j.dump(2));
    });
    auto* s = c.app;
    s->add_option("--split", train_.split, "Split file from ingest")->required();
    s->add_option("--sid-map", train_.sid_map, "SID map from tokenize")->required();
    s->add_option("--levels", train_.levels, "SID levels used by the model");
    s->add_option("--k", train_.k, "Codes per level");
    add_model_options(s, train_.model);
    add_train_options(s, train_.train);
  }

  // ------------------------------------------------------------------ eval
  {
    auto& c = add_command("eval", "Score a checkpoint on a split", [this](RunManifest& m) {
      auto& o = eval_;
      const fs::path dir = commands_[4]->out_dir;
      SplitCorpus split = read_split(o.split);
      Model<float> model = load_model_for(o.checkpoint, split, m);
      const ModelConfig& mc = model.config();
      const TokenizedData data = load_tokenized(o.split, o.sid_map, mc.levels, mc.k, m);
      const ChunkTable table(mc.layout(), data.sids);
      EvalOptions options;
      options.ks = parse_int_list(o.ks, "K");
      options.exclude_history = o.exclude_history;
      if (o.decoder == "beam") options.ar_beams = o.beams;
      MetricsReport report =
          evaluate_split(model, table, data.split, parse_split_kind(o.which), options);
      report.checkpoint_id = file_digest_hex(o.checkpoint);
      report.config_hash = digest_hex(mc.describe());
      write_text(dir / "metrics.json", metrics_json(report));
      m.outputs = {"metrics.json"};
      print(metrics_text(report), metrics_json(report));
    });
    auto* s = c.app;
    s->add_option("--checkpoint", eval_.checkpoint)->required();
    s->add_option("--split", eval_.split)->required();
    s->add_option("--sid-map", eval_.sid_map)->required();
    s->add_option("--which", eval_.which)->check(CLI::IsMember({"train", "valid", "test"}));
    s->add_option("--ks", eval_.ks, "Comma-separated cutoffs");
    s->add_flag("--exclude-history", eval_.exclude_history, "Drop history items from rankings");
    s->add_option("--decoder", eval_.decoder, "car: act marginal; beam: beam-decoded chunks")
        ->check(CLI::IsMember({"car", "beam"}));
    s->add_option("--beams", eval_.beams, "Beam width for --decoder beam");
  }

  // ----------------------------------------------------------------- bench
  {
    auto& c = add_command("bench", "Time beam decoding against chunk decoding",
                          [this](RunManifest& m) {
      auto& o = bench_;
      const fs::path dir = commands_[5]->out_dir;
      SplitCorpus split = read_split(o.split);
      Model<float> model = load_model_for(o.checkpoint, split, m);
      const ModelConfig& mc = model.config();
      const TokenizedData data = load_tokenized(o.split, o.sid_map, mc.levels, mc.k, m);
      const ChunkTable table(mc.layout(), data.sids);
      std::vector<std::vector<TokenId>> histories;
      for (const auto& q : split_queries(data.split, SplitKind::kTest, mc.max_chunks - 1)) {
        histories.push_back(table.flatten(q.history, mc.max_chunks - 1).tokens);
      }
      BenchOptions options;
      options.beams = parse_int_list(o.beams, "beam");
      options.samples = o.samples;
      options.warmup = o.warmup;
      const LatencyTable latency = bench_inference(model, histories, options);
      write_text(dir / "latency.txt", latency_table_text(latency));
      write_text(dir / "latency.json", latency_table_json(latency));
      m.outputs = {"latency.txt", "latency.json"};
      print(latency_table_text(latency), latency_table_json(latency));
    });
    auto* s = c.app;
    s->add_option("--checkpoint", bench_.checkpoint)->required();
    s->add_option("--split", bench_.split)->required();
    s->add_option("--sid-map", bench_.sid_map)->required();
    s->add_option("--beams", bench_.beams, "Comma-separated beam widths");
    s->add_option("--samples", bench_.samples, "Measured queries per row");
    s->add_option("--warmup", bench_.warmup, "Untimed queries per row");
  }

  // --------------------------------------------------- experiment grids
  auto grid_runner = [this](Grid& g, std::size_t index, const std::string& kind) {
    return [this, &g, index, kind](RunManifest& m) {
      const fs::path dir = commands_[index]->out_dir;
      const TrainConfig tc = g.train.resolve();
      m.seed = tc.seed;
      ExperimentSetup setup;
      setup.levels = g.levels;
      setup.k = g.k;
      setup.model = g.model;
      setup.train = tc;
      setup.eval.ks = parse_int_list(g.ks, "K");
      setup.report_split = parse_split_kind(g.which);
      auto on_row = [&](const ExperimentRow& row, const TrainResult&) {
        MetricsReport r = row.metrics;
        r.config_hash = digest_hex(setup.model.describe() + " " + row.label);
        const std::string name =
            "metrics_" + (kind == "sweep" ? "levels" + row.label : slug(row.label)) + ".json";
        write_text(dir / name, metrics_json(r));
        m.outputs.push_back(name);
      };
      ExperimentReport report;
      if (kind == "compare") {
        setup.split = read_split(g.split);
        m.inputs.emplace_back(g.split.string(), file_digest_hex(g.split));
        const EmbeddingFile emb = read_embeddings(g.embeddings);
        m.inputs.emplace_back(g.embeddings.string(), file_digest_hex(g.embeddings));
        TokenizerConfig tok;
        tok.levels = g.levels;
        tok.k = g.k;
        tok.seed = tc.seed;
        tok.kmeans_max_iters = g.max_iters;
        report = run_tokenizer_comparison(setup, emb.vectors, tok, on_row);
      } else {
        const std::vector<int> levels = kind == "sweep"
                                            ? parse_int_list(g.levels_list, "levels")
                                            : std::vector<int>{g.levels};
        const int deepest = *std::max_element(levels.begin(), levels.end());
        TokenizedData data = load_tokenized(g.split, g.sid_map, deepest, g.k, m);
        setup.split = std::move(data.split);
        setup.sids = std::move(data.sids);
        report = kind == "sweep" ? run_level_sweep(setup, levels, on_row)
                                 : run_ablation(setup, on_row);
      }
      write_text(dir / "report.txt", report.text());
      write_text(dir / "report.json", report.json());
      m.outputs.push_back("report.txt");
      m.outputs.push_back("report.json");
      print(report.text(), report.json());
    };
  };
  {
    auto& c = add_command("ablate", "Train and score the fusion/think-loss ablation grid",
                          grid_runner(ablate_, 6, "ablate"));
    add_grid_options(c.app, ablate_, true);
  }
  {
    auto& c = add_command("sweep-levels", "Train and score one model per SID depth",
                          grid_runner(sweep_, 7, "sweep"));
    add_grid_options(c.app, sweep_, true);
    c.app->add_option("--levels-list", sweep_.levels_list, "Comma-separated level counts");
  }
  {
    auto& c = add_command("compare-tokenizers", "Residual k-means against LSH semantic IDs",
                          grid_runner(compare_, 8, "compare"));
    add_grid_options(c.app, compare_, false);
    c.app->add_option("--embeddings", compare_.embeddings, "Item embeddings in item-index order")
        ->required();
    c.app->add_option("--max-iters", compare_.max_iters, "Lloyd iterations per level");
  }
}

// Splices `--key=value` pairs from a --config file right after the
// subcommand so explicit flags, parsed later, win under TakeLast.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  fs::path config;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
  }
  if (config.empty() || args.size() < 2) return args;
  std::size_t sub = 1;
  while (sub < args.size() && args[sub].rfind('-', 0) == 0) ++sub;
  std::vector<std::string> out(args.begin(), args.begin() + static_cast<std::ptrdiff_t>(sub + 1));
  for (const auto& [key, value] : read_config_file(config)) out.push_back("--" + key + "=" + value);
  out.insert(out.end(), args.begin() + static_cast<std::ptrdiff_t>(sub + 1), args.end());
  return out;
}

int Cli::run(const std::vector<std::string>& raw_args) {
  try {
    setup();
    const auto args = expand_config(raw_args);
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
      app_.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
      out_ << app_.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out_ << app_.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      err_ << "error: usage: " << msg << '\n';
      return 2;
    }
    if (verbose_) set_log_level(LogLevel::kInfo);
    for (auto& cmd : commands_) {
      if (!cmd->app->parsed()) continue;
      ensure_dir(cmd->out_dir);
      RunManifest manifest;
      manifest.command = cmd->app->get_name();
      cmd->body(manifest);
      manifest.config = resolved_config(cmd->app);
      manifest.outputs.insert(manifest.outputs.begin(), "manifest.json");
      write_text(cmd->out_dir / "manifest.json", manifest.json());
    }
    return 0;
  } catch (const Error& e) {
    err_ << "error: " << error_kind_name(e.kind()) << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err_ << "error: internal: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Cli cli(out, err);
  return cli.run(args);
}

}  // namespace car::cli
