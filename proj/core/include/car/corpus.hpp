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

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace car {

// Row-major so that each item's vector is contiguous.
using EmbeddingMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

// Dense string -> index mapping in first-appearance order.
class IdMap {
 public:
  std::int32_t intern(const std::string& id);
  std::int32_t find(const std::string& id) const;  // -1 when absent
  const std::string& name(std::int32_t index) const { return names_.at(index); }
  std::int32_t size() const { return static_cast<std::int32_t>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }

  bool operator==(const IdMap& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct FilteredCorpus {
  IdMap users;
  IdMap items;
  std::vector<Interaction> interactions;  // surviving rows, input order
};

struct UserSequence {
  std::int32_t user = 0;
  std::vector<std::int32_t> items;  // ascending timestamp, input-order ties

  bool operator==(const UserSequence&) const = default;
};

struct UserSplit {
  std::int32_t user = 0;
  std::vector<std::int32_t> train;  // full prefix items[..n-2]
  std::int32_t valid = -1;
  std::int32_t test = -1;

  // Most recent `max_items` of the train prefix.
  std::vector<std::int32_t> training_history(std::size_t max_items) const;
  // Conditioning history for the validation target.
  std::vector<std::int32_t> valid_history(std::size_t max_items) const;
  // Conditioning history for the test target (train prefix + valid item).
  std::vector<std::int32_t> test_history(std::size_t max_items) const;

  bool operator==(const UserSplit&) const = default;
};

struct SplitCorpus {
  std::vector<UserSplit> users;
  std::int32_t num_items = 0;
  std::size_t excluded = 0;  // sequences shorter than 3
  std::size_t max_history = 20;
};

std::vector<Interaction> parse_interactions(std::istream& in);
std::vector<Interaction> ingest_interactions(const std::filesystem::path& path);

FilteredCorpus five_core_filter(std::span<const Interaction> interactions,
                                int min_count = 5);

std::vector<UserSequence> build_sequences(const FilteredCorpus& corpus);

SplitCorpus leave_one_out_split(std::span<const UserSequence> sequences,
                                std::int32_t num_items,
                                std::size_t max_history = 20);

// ---------------------------------------------------------------------------
// Embedding files.

struct EmbeddingFile {
  std::vector<std::string> ids;  // empty for the binary variant (positional)
  EmbeddingMatrix vectors;
};

EmbeddingFile read_embeddings(const std::filesystem::path& path);
void write_embeddings_text(const std::filesystem::path& path,
                           std::span<const std::string> ids,
                           const EmbeddingMatrix& vectors);
void write_embeddings_binary(const std::filesystem::path& path,
                             const EmbeddingMatrix& vectors);

// Reorders embeddings into item-index order. Every item must be covered.
EmbeddingMatrix align_embeddings(const EmbeddingFile& file, const IdMap& items);

void write_id_map(const std::filesystem::path& path, const IdMap& map);
IdMap read_id_map(const std::filesystem::path& path);

void write_interactions(const std::filesystem::path& path,
                        std::span<const Interaction> interactions);

// Split file: `user_index <TAB> valid <TAB> test <TAB> train items...`
void write_split(const std::filesystem::path& path, const SplitCorpus& split);
SplitCorpus read_split(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic corpora with planted cluster structure.

enum class Transition {
  // Successor item is a fixed function of the current item.
  kDeterministic,
  // Successor group is fixed; the item inside that group is uniform.
  kClusterMarkov,
};

struct SynthSpec {
  std::int32_t users = 50;
  std::int32_t items = 20;
  std::int32_t dim = 16;
  std::int32_t clusters = 4;
  std::int32_t sub_clusters = 1;  // sub-groups per cluster
  Transition transition = Transition::kDeterministic;
  double noise = 0.0;  // probability of a uniformly random next item
  std::int32_t min_length = 5;
  std::int32_t max_length = 12;
  double cluster_scale = 10.0;
  double sub_scale = 3.0;
  double jitter = 0.1;
};

struct SynthCorpus {
  std::vector<UserSequence> sequences;
  EmbeddingMatrix embeddings;           // items x dim
  std::vector<std::int32_t> cluster_of;  // planted level-1 label per item
  std::vector<std::int32_t> sub_of;      // planted level-2 label per item

  // Interactions with ids `u<k>` / `i<k>` and increasing timestamps.
  std::vector<Interaction> to_interactions() const;
  std::vector<std::string> item_ids() const;
};

SynthCorpus synth_corpus(const SynthSpec& spec, std::uint64_t seed);

}  // namespace car
