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

#include "car/chunkvocab.hpp"

#include <fmt/core.h>

#include <fstream>
#include <sstream>

#include "car/error.hpp"

namespace car {

VocabLayout::VocabLayout(int levels, int k, std::int32_t num_items)
    : levels_(levels), k_(k), num_items_(num_items) {
  if (levels < 1 || k < 1 || num_items < 1) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("invalid vocab layout levels={} k={} items={}", levels, k, num_items));
  }
}

TokenId VocabLayout::sid_token(int level, std::int32_t code) const {
  if (level < 0 || level >= levels_ || code < 0 || code >= k_) {
    throw Error(ErrorKind::kOutOfRange,
                fmt::format("SID code {} at level {} outside layout", code, level));
  }
  return sid_base(level) + code;
}

TokenId VocabLayout::uid_token(std::int32_t item) const {
  if (item < 0 || item >= num_items_) {
    throw Error(ErrorKind::kOutOfRange, fmt::format("item index {} outside layout", item));
  }
  return uid_base() + item;
}

DecodedToken VocabLayout::decode(TokenId token) const {
  if (token < 0 || token >= vocab_size()) {
    throw Error(ErrorKind::kOutOfRange,
                fmt::format("token {} outside vocabulary of size {}", token, vocab_size()));
  }
  if (token == kPadToken) return {TokenKind::kPad, -1, -1};
  if (token == kBosToken) return {TokenKind::kBos, -1, -1};
  if (token < uid_base()) {
    const auto off = token - 2;
    return {TokenKind::kSid, off / k_, off % k_};
  }
  return {TokenKind::kItem, -1, token - uid_base()};
}

Chunk build_chunk(std::int32_t item, const SidTuple& sid, const VocabLayout& layout) {
  if (static_cast<int>(sid.codes.size()) < layout.levels()) {
    throw Error(ErrorKind::kOutOfRange,
                fmt::format("SID has {} levels, layout needs {}", sid.codes.size(),
                            layout.levels()));
  }
  Chunk chunk;
  chunk.sid_tokens.reserve(static_cast<std::size_t>(layout.levels()));
  for (int l = 0; l < layout.levels(); ++l) {
    chunk.sid_tokens.push_back(layout.sid_token(l, sid.codes[static_cast<std::size_t>(l)]));
  }
  chunk.uid_token = layout.uid_token(item);
  return chunk;
}

ChunkSequence flatten_history(std::span<const Chunk> chunks, const VocabLayout& layout,
                              std::size_t max_chunks) {
  if (chunks.size() > max_chunks) chunks = chunks.last(max_chunks);
  ChunkSequence seq;
  seq.chunks = chunks.size();
  seq.tokens.reserve(1 + chunks.size() * static_cast<std::size_t>(layout.chunk_len()));
  seq.tokens.push_back(kBosToken);
  for (const auto& c : chunks) {
    seq.tokens.insert(seq.tokens.end(), c.sid_tokens.begin(), c.sid_tokens.end());
    seq.tokens.push_back(c.uid_token);
    seq.uid_positions.push_back(seq.tokens.size() - 1);
  }
  return seq;
}

DecodedToken decode_token(TokenId token, const VocabLayout& layout) {
  return layout.decode(token);
}

ChunkTable::ChunkTable(const VocabLayout& layout, std::span<const SidTuple> sids)
    : layout_(layout), sids_(sids.begin(), sids.end()) {
  if (static_cast<std::int32_t>(sids.size()) != layout.num_items()) {
    throw Error(ErrorKind::kDimensionMismatch,
                fmt::format("SID map has {} items, layout expects {}", sids.size(),
                            layout.num_items()));
  }
  chunks_.reserve(sids.size());
  for (std::size_t i = 0; i < sids.size(); ++i) {
    chunks_.push_back(build_chunk(static_cast<std::int32_t>(i), sids[i], layout));
  }
}

ChunkSequence ChunkTable::flatten(std::span<const std::int32_t> items,
                                  std::size_t max_chunks) const {
  if (items.size() > max_chunks) items = items.last(max_chunks);
  std::vector<Chunk> chunks;
  chunks.reserve(items.size());
  for (auto item : items) chunks.push_back(chunk(item));
  return flatten_history(chunks, layout_, max_chunks);
}

void write_tokenized_corpus(const std::filesystem::path& path,
                            std::span<const TokenizedUser> users) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  for (const auto& u : users) {
    out << u.user << '\t';
    for (std::size_t i = 0; i < u.tokens.size(); ++i) {
      if (i) out << ' ';
      out << u.tokens[i];
    }
    out << '\n';
  }
}

std::vector<TokenizedUser> read_tokenized_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<TokenizedUser> users;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (raw.empty()) continue;
    const auto tab = raw.find('\t');
    if (tab == std::string::npos) throw ParseError(line_no, "expected 'user <TAB> tokens'");
    TokenizedUser u;
    u.user = std::stoi(raw.substr(0, tab));
    std::istringstream toks(raw.substr(tab + 1));
    TokenId t = 0;
    while (toks >> t) u.tokens.push_back(t);
    users.push_back(std::move(u));
  }
  return users;
}

}  // namespace car
