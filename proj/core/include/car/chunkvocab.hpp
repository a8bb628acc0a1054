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

#include "car/semtok.hpp"

namespace car {

using TokenId = std::int32_t;

inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kBosToken = 1;
inline constexpr std::size_t kMaxHistoryChunks = 20;

enum class TokenKind { kPad, kBos, kSid, kItem };

struct DecodedToken {
  TokenKind kind = TokenKind::kPad;
  std::int32_t level = -1;  // 0-based SID level, kSid only
  std::int32_t value = -1;  // SID code or item index

  bool operator==(const DecodedToken&) const = default;
};

// Shared vocabulary with disjoint ranges:
//   [PAD, BOS] [level 0 codes] ... [level n-1 codes] [item UIDs]
// Levels are 0-based here.
class VocabLayout {
 public:
  VocabLayout() = default;
  VocabLayout(int levels, int k, std::int32_t num_items);

  int levels() const { return levels_; }
  int k() const { return k_; }
  std::int32_t num_items() const { return num_items_; }
  int chunk_len() const { return levels_ + 1; }
  TokenId vocab_size() const { return 2 + levels_ * k_ + num_items_; }

  TokenId sid_token(int level, std::int32_t code) const;
  TokenId uid_token(std::int32_t item) const;
  TokenId sid_base(int level) const { return 2 + level * k_; }
  TokenId uid_base() const { return 2 + levels_ * k_; }

  DecodedToken decode(TokenId token) const;
  bool is_sid(TokenId token) const { return token >= 2 && token < uid_base(); }

  // Slot of position p (p >= 1) inside its chunk, 0..levels; -1 for p = 0.
  int slot_of(std::size_t position) const {
    return position == 0 ? -1 : static_cast<int>((position - 1) % chunk_len());
  }
  bool is_chunk_final(std::size_t position) const { return slot_of(position) == levels_; }
  std::size_t max_positions(std::size_t max_chunks = kMaxHistoryChunks) const {
    return 1 + max_chunks * static_cast<std::size_t>(chunk_len());
  }

  bool operator==(const VocabLayout&) const = default;

 private:
  int levels_ = 0;
  int k_ = 0;
  std::int32_t num_items_ = 0;
};

struct Chunk {
  std::vector<TokenId> sid_tokens;  // one per level, level order
  TokenId uid_token = kPadToken;

  bool operator==(const Chunk&) const = default;
};

struct ChunkSequence {
  std::vector<TokenId> tokens;                // [BOS, chunk_1..., chunk_m]
  std::vector<std::size_t> uid_positions;     // chunk-final positions
  std::size_t chunks = 0;
};

Chunk build_chunk(std::int32_t item, const SidTuple& sid, const VocabLayout& layout);

// Keeps the most recent `max_chunks` chunks.
ChunkSequence flatten_history(std::span<const Chunk> chunks, const VocabLayout& layout,
                              std::size_t max_chunks = kMaxHistoryChunks);

DecodedToken decode_token(TokenId token, const VocabLayout& layout);

// Per-item chunk lookup built once from the SID map. Uses the first
// `layout.levels()` codes of each SID, so a deeper tokenization can be
// reused at fewer levels.
class ChunkTable {
 public:
  ChunkTable() = default;
  ChunkTable(const VocabLayout& layout, std::span<const SidTuple> sids);

  const VocabLayout& layout() const { return layout_; }
  const Chunk& chunk(std::int32_t item) const { return chunks_.at(static_cast<std::size_t>(item)); }
  const SidTuple& sid(std::int32_t item) const { return sids_.at(static_cast<std::size_t>(item)); }

  ChunkSequence flatten(std::span<const std::int32_t> items,
                        std::size_t max_chunks = kMaxHistoryChunks) const;

 private:
  VocabLayout layout_;
  std::vector<SidTuple> sids_;
  std::vector<Chunk> chunks_;
};

// Tokenized corpus file: `user_index <TAB> t1 t2 ...`.
struct TokenizedUser {
  std::int32_t user = 0;
  std::vector<TokenId> tokens;

  bool operator==(const TokenizedUser&) const = default;
};

void write_tokenized_corpus(const std::filesystem::path& path,
                            std::span<const TokenizedUser> users);
std::vector<TokenizedUser> read_tokenized_corpus(const std::filesystem::path& path);

}  // namespace car
