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

#include "car/corpus.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "car/error.hpp"
#include "car/hashing.hpp"
#include "car/log.hpp"

namespace car {
namespace {

constexpr std::array<char, 4> kBinaryEmbeddingMagic = {'E', 'M', 'B', 'B'};

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

std::string_view strip_cr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

template <typename Int>
bool parse_int(std::string_view text, Int& out) {
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::vector<std::int32_t> last_n(std::span<const std::int32_t> items, std::size_t n) {
  const std::size_t start = items.size() > n ? items.size() - n : 0;
  return {items.begin() + static_cast<std::ptrdiff_t>(start), items.end()};
}

std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path, bool binary = false) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  return in;
}

}  // namespace

// ---------------------------------------------------------------------------

std::int32_t IdMap::intern(const std::string& id) {
  auto [it, inserted] = index_.try_emplace(id, static_cast<std::int32_t>(names_.size()));
  if (inserted) names_.push_back(id);
  return it->second;
}

std::int32_t IdMap::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? -1 : it->second;
}

std::vector<std::int32_t> UserSplit::training_history(std::size_t max_items) const {
  return last_n(train, max_items);
}

std::vector<std::int32_t> UserSplit::valid_history(std::size_t max_items) const {
  return last_n(train, max_items);
}

std::vector<std::int32_t> UserSplit::test_history(std::size_t max_items) const {
  std::vector<std::int32_t> full = last_n(train, max_items);
  full.push_back(valid);
  return last_n(full, max_items);
}

// ---------------------------------------------------------------------------

std::vector<Interaction> parse_interactions(std::istream& in) {
  std::vector<Interaction> rows;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string_view line = strip_cr(raw);
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 3) {
      throw ParseError(line_no, fmt::format("expected 3 tab-separated fields, got {}",
                                            fields.size()));
    }
    if (fields[0].empty() || fields[1].empty()) {
      throw ParseError(line_no, "empty user or item id");
    }
    std::int64_t ts = 0;
    if (!parse_int(fields[2], ts)) {
      throw ParseError(line_no, fmt::format("bad timestamp '{}'", fields[2]));
    }
    if (ts < 0) throw ParseError(line_no, "negative timestamp");
    rows.push_back({std::string(fields[0]), std::string(fields[1]), ts});
  }
  return rows;
}

std::vector<Interaction> ingest_interactions(const std::filesystem::path& path) {
  auto in = open_in(path);
  return parse_interactions(in);
}

FilteredCorpus five_core_filter(std::span<const Interaction> interactions, int min_count) {
  if (interactions.empty()) {
    throw Error(ErrorKind::kInvalidArgument, "five_core_filter: empty input");
  }
  // Work on dense ids of the raw input; alive flags per row.
  IdMap raw_users;
  IdMap raw_items;
  std::vector<std::int32_t> row_user(interactions.size());
  std::vector<std::int32_t> row_item(interactions.size());
  for (std::size_t r = 0; r < interactions.size(); ++r) {
    row_user[r] = raw_users.intern(interactions[r].user_id);
    row_item[r] = raw_items.intern(interactions[r].item_id);
  }
  std::vector<int> user_deg(raw_users.size(), 0);
  std::vector<int> item_deg(raw_items.size(), 0);
  for (std::size_t r = 0; r < interactions.size(); ++r) {
    ++user_deg[row_user[r]];
    ++item_deg[row_item[r]];
  }
  std::vector<char> alive(interactions.size(), 1);
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t r = 0; r < interactions.size(); ++r) {
      if (!alive[r]) continue;
      if (user_deg[row_user[r]] < min_count || item_deg[row_item[r]] < min_count) {
        alive[r] = 0;
        --user_deg[row_user[r]];
        --item_deg[row_item[r]];
        changed = true;
      }
    }
  }

  FilteredCorpus out;
  for (std::size_t r = 0; r < interactions.size(); ++r) {
    if (!alive[r]) continue;
    out.users.intern(interactions[r].user_id);
    out.items.intern(interactions[r].item_id);
    out.interactions.push_back(interactions[r]);
  }
  if (out.interactions.empty()) {
    throw Error(ErrorKind::kCorpusEliminated,
                fmt::format("{}-core filtering removed every interaction", min_count));
  }
  return out;
}

std::vector<UserSequence> build_sequences(const FilteredCorpus& corpus) {
  struct Row {
    std::int64_t timestamp;
    std::int32_t item;
  };
  std::vector<std::vector<Row>> per_user(corpus.users.size());
  for (const auto& x : corpus.interactions) {
    const auto u = corpus.users.find(x.user_id);
    const auto i = corpus.items.find(x.item_id);
    if (u < 0 || i < 0) {
      throw Error(ErrorKind::kInvalidArgument, "interaction outside the filtered id maps");
    }
    per_user[u].push_back({x.timestamp, i});
  }
  std::vector<UserSequence> out;
  out.reserve(per_user.size());
  for (std::int32_t u = 0; u < static_cast<std::int32_t>(per_user.size()); ++u) {
    auto& rows = per_user[u];
    std::stable_sort(rows.begin(), rows.end(),
                     [](const Row& a, const Row& b) { return a.timestamp < b.timestamp; });
    UserSequence seq{u, {}};
    seq.items.reserve(rows.size());
    for (const auto& r : rows) seq.items.push_back(r.item);
    out.push_back(std::move(seq));
  }
  return out;
}

SplitCorpus leave_one_out_split(std::span<const UserSequence> sequences,
                                std::int32_t num_items, std::size_t max_history) {
  SplitCorpus split;
  split.num_items = num_items;
  split.max_history = max_history;
  for (const auto& seq : sequences) {
    const auto n = seq.items.size();
    if (n < 3) {
      ++split.excluded;
      continue;
    }
    UserSplit us;
    us.user = seq.user;
    us.train.assign(seq.items.begin(), seq.items.end() - 2);
    us.valid = seq.items[n - 2];
    us.test = seq.items[n - 1];
    split.users.push_back(std::move(us));
  }
  if (split.excluded > 0) {
    log_warning(fmt::format("leave_one_out_split: excluded {} sequences shorter than 3",
                            split.excluded));
  }
  return split;
}

// ---------------------------------------------------------------------------

EmbeddingFile read_embeddings(const std::filesystem::path& path) {
  auto in = open_in(path, /*binary=*/true);
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  EmbeddingFile out;
  if (in.gcount() == 4 && magic == kBinaryEmbeddingMagic) {
    // 16-byte header: magic, u32 count, u32 dim, u32 reserved; then row-major LE f32.
    std::array<std::uint32_t, 3> header{};
    in.read(reinterpret_cast<char*>(header.data()), sizeof(header));
    if (!in) throw Error(ErrorKind::kParse, "truncated binary embedding header");
    static_assert(std::endian::native == std::endian::little);
    const auto count = static_cast<Eigen::Index>(header[0]);
    const auto dim = static_cast<Eigen::Index>(header[1]);
    out.vectors.resize(count, dim);
    in.read(reinterpret_cast<char*>(out.vectors.data()),
            static_cast<std::streamsize>(sizeof(float) * count * dim));
    if (!in) throw Error(ErrorKind::kParse, "truncated binary embedding payload");
    return out;
  }

  in.clear();
  in.seekg(0);
  std::string raw;
  std::size_t line_no = 1;
  if (!std::getline(in, raw)) throw ParseError(1, "missing EMB header");
  std::istringstream header(std::string(strip_cr(raw)));
  std::string tag;
  long long count = -1;
  long long dim = -1;
  header >> tag >> count >> dim;
  if (tag != "EMB" || count < 0 || dim <= 0) {
    throw ParseError(1, "expected 'EMB <item_count> <dim>'");
  }
  out.vectors.resize(count, dim);
  out.ids.reserve(static_cast<std::size_t>(count));
  for (long long row = 0; row < count; ++row) {
    if (!std::getline(in, raw)) {
      throw ParseError(line_no + 1, fmt::format("expected {} rows, got {}", count, row));
    }
    ++line_no;
    const std::string_view line = strip_cr(raw);
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw ParseError(line_no, "missing tab after item id");
    out.ids.emplace_back(line.substr(0, tab));
    const std::string rest(line.substr(tab + 1));
    const char* p = rest.c_str();
    for (long long d = 0; d < dim; ++d) {
      char* end = nullptr;
      const float v = std::strtof(p, &end);
      if (end == p) throw ParseError(line_no, fmt::format("expected {} floats", dim));
      out.vectors(row, d) = v;
      p = end;
    }
    while (*p == ' ' || *p == '\t') ++p;
    if (*p != '\0') throw ParseError(line_no, "trailing data after embedding");
  }
  return out;
}

void write_embeddings_text(const std::filesystem::path& path, std::span<const std::string> ids,
                           const EmbeddingMatrix& vectors) {
  if (static_cast<Eigen::Index>(ids.size()) != vectors.rows()) {
    throw Error(ErrorKind::kDimensionMismatch, "id count does not match embedding rows");
  }
  auto out = open_out(path);
  out << "EMB " << vectors.rows() << ' ' << vectors.cols() << '\n';
  for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
    out << ids[static_cast<std::size_t>(r)] << '\t';
    for (Eigen::Index c = 0; c < vectors.cols(); ++c) {
      if (c) out << ' ';
      out << fmt::format("{}", vectors(r, c));  // shortest round-trip form
    }
    out << '\n';
  }
}

void write_embeddings_binary(const std::filesystem::path& path, const EmbeddingMatrix& vectors) {
  auto out = open_out(path, /*binary=*/true);
  out.write(kBinaryEmbeddingMagic.data(), kBinaryEmbeddingMagic.size());
  const std::array<std::uint32_t, 3> header = {static_cast<std::uint32_t>(vectors.rows()),
                                               static_cast<std::uint32_t>(vectors.cols()), 0};
  out.write(reinterpret_cast<const char*>(header.data()), sizeof(header));
  out.write(reinterpret_cast<const char*>(vectors.data()),
            static_cast<std::streamsize>(sizeof(float) * vectors.size()));
}

EmbeddingMatrix align_embeddings(const EmbeddingFile& file, const IdMap& items) {
  if (file.ids.empty()) {
    if (file.vectors.rows() != items.size()) {
      throw Error(ErrorKind::kDimensionMismatch,
                  fmt::format("binary embeddings have {} rows for {} items",
                              file.vectors.rows(), items.size()));
    }
    return file.vectors;
  }
  std::unordered_map<std::string, Eigen::Index> row_of;
  for (std::size_t r = 0; r < file.ids.size(); ++r) row_of.emplace(file.ids[r], r);
  EmbeddingMatrix out(items.size(), file.vectors.cols());
  for (std::int32_t i = 0; i < items.size(); ++i) {
    auto it = row_of.find(items.name(i));
    if (it == row_of.end()) {
      throw Error(ErrorKind::kInvalidArgument, "no embedding for item " + items.name(i));
    }
    out.row(i) = file.vectors.row(it->second);
  }
  return out;
}

void write_id_map(const std::filesystem::path& path, const IdMap& map) {
  auto out = open_out(path);
  for (std::int32_t i = 0; i < map.size(); ++i) out << map.name(i) << '\t' << i << '\n';
}

IdMap read_id_map(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<std::pair<std::int32_t, std::string>> rows;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = strip_cr(raw);
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    std::int32_t idx = 0;
    if (fields.size() != 2 || !parse_int(fields[1], idx)) {
      throw ParseError(line_no, "expected 'string_id <TAB> integer_index'");
    }
    rows.emplace_back(idx, std::string(fields[0]));
  }
  std::sort(rows.begin(), rows.end());
  IdMap map;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].first != static_cast<std::int32_t>(r)) {
      throw Error(ErrorKind::kParse, "id map indices are not dense 0..n-1");
    }
    map.intern(rows[r].second);
  }
  return map;
}

void write_interactions(const std::filesystem::path& path,
                        std::span<const Interaction> interactions) {
  auto out = open_out(path);
  for (const auto& x : interactions) {
    out << x.user_id << '\t' << x.item_id << '\t' << x.timestamp << '\n';
  }
}

void write_split(const std::filesystem::path& path, const SplitCorpus& split) {
  auto out = open_out(path);
  out << "SPLIT " << split.users.size() << ' ' << split.num_items << ' ' << split.max_history
      << ' ' << split.excluded << '\n';
  for (const auto& u : split.users) {
    out << u.user << '\t' << u.valid << '\t' << u.test << '\t';
    for (std::size_t i = 0; i < u.train.size(); ++i) {
      if (i) out << ' ';
      out << u.train[i];
    }
    out << '\n';
  }
}

SplitCorpus read_split(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string raw;
  if (!std::getline(in, raw)) throw ParseError(1, "missing SPLIT header");
  std::istringstream header{std::string(strip_cr(raw))};
  std::string tag;
  std::size_t users = 0;
  SplitCorpus split;
  header >> tag >> users >> split.num_items >> split.max_history >> split.excluded;
  if (tag != "SPLIT" || !header) {
    throw ParseError(1, "expected 'SPLIT <users> <items> <max_history> <excluded>'");
  }
  std::size_t line_no = 1;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = strip_cr(raw);
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    UserSplit u;
    if (fields.size() != 4 || !parse_int(fields[0], u.user) || !parse_int(fields[1], u.valid) ||
        !parse_int(fields[2], u.test)) {
      throw ParseError(line_no, "expected 'user <TAB> valid <TAB> test <TAB> train...'");
    }
    std::istringstream items{std::string(fields[3])};
    std::int32_t item = 0;
    while (items >> item) u.train.push_back(item);
    for (auto i : u.train) {
      if (i < 0 || i >= split.num_items) throw ParseError(line_no, "item index out of range");
    }
    split.users.push_back(std::move(u));
  }
  if (split.users.size() != users) {
    throw Error(ErrorKind::kParse, "split file user count does not match header");
  }
  return split;
}

// ---------------------------------------------------------------------------

std::vector<Interaction> SynthCorpus::to_interactions() const {
  std::vector<Interaction> rows;
  std::int64_t ts = 0;
  for (const auto& seq : sequences) {
    for (auto item : seq.items) {
      rows.push_back({"u" + std::to_string(seq.user), "i" + std::to_string(item), ts++});
    }
  }
  return rows;
}

std::vector<std::string> SynthCorpus::item_ids() const {
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(embeddings.rows()));
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) ids.push_back("i" + std::to_string(i));
  return ids;
}

SynthCorpus synth_corpus(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.clusters < 1 || spec.sub_clusters < 1) {
    throw Error(ErrorKind::kInvalidArgument, "synth: clusters and sub_clusters must be >= 1");
  }
  if (spec.items < spec.clusters) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("synth: item count {} < cluster count {}", spec.items,
                            spec.clusters));
  }
  if (spec.users < 1 || spec.min_length < 3 || spec.max_length < spec.min_length) {
    throw Error(ErrorKind::kInvalidArgument, "synth: invalid user count or length range");
  }
  if (spec.noise < 0.0 || spec.noise > 1.0) {
    throw Error(ErrorKind::kInvalidArgument, "synth: noise must be in [0, 1]");
  }
  const int cluster_axes = (spec.clusters + 1) / 2;
  const int sub_axes = spec.sub_clusters > 1 ? (spec.sub_clusters + 1) / 2 : 0;
  if (spec.dim < cluster_axes + sub_axes) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("synth: dim must be >= {}", cluster_axes + sub_axes));
  }

  const std::int32_t groups = spec.clusters * spec.sub_clusters;
  SynthCorpus out;
  out.cluster_of.resize(spec.items);
  out.sub_of.resize(spec.items);
  std::vector<std::vector<std::int32_t>> members(groups);
  for (std::int32_t i = 0; i < spec.items; ++i) {
    const std::int32_t g = i % groups;
    out.cluster_of[i] = g / spec.sub_clusters;
    out.sub_of[i] = g % spec.sub_clusters;
    members[g].push_back(i);
  }

  // Cluster c sits at +/- scale along axis c/2; sub-group offsets use the next axes.
  std::mt19937_64 emb_rng(mix_seed(seed, 1));
  std::normal_distribution<double> gauss(0.0, 1.0);
  out.embeddings.setZero(spec.items, spec.dim);
  for (std::int32_t i = 0; i < spec.items; ++i) {
    const int c = out.cluster_of[i];
    out.embeddings(i, c / 2) += static_cast<float>((c % 2 == 0 ? 1.0 : -1.0) * spec.cluster_scale);
    if (sub_axes > 0) {
      const int s = out.sub_of[i];
      out.embeddings(i, cluster_axes + s / 2) +=
          static_cast<float>((s % 2 == 0 ? 1.0 : -1.0) * spec.sub_scale);
    }
    for (int d = 0; d < spec.dim; ++d) {
      out.embeddings(i, d) += static_cast<float>(spec.jitter * gauss(emb_rng));
    }
  }

  auto next_group = [&](std::int32_t g) {
    const std::int32_t c = g / spec.sub_clusters;
    const std::int32_t s = g % spec.sub_clusters;
    return ((c + 1) % spec.clusters) * spec.sub_clusters + (s + 1) % spec.sub_clusters;
  };
  std::vector<std::int32_t> rank_in_group(spec.items);
  for (const auto& m : members) {
    for (std::size_t r = 0; r < m.size(); ++r) rank_in_group[m[r]] = static_cast<std::int32_t>(r);
  }

  std::mt19937_64 seq_rng(mix_seed(seed, 2));
  std::uniform_int_distribution<std::int32_t> length_dist(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::int32_t> item_dist(0, spec.items - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  out.sequences.reserve(spec.users);
  for (std::int32_t u = 0; u < spec.users; ++u) {
    UserSequence seq{u, {}};
    const auto len = length_dist(seq_rng);
    std::int32_t cur = item_dist(seq_rng);
    seq.items.push_back(cur);
    while (static_cast<std::int32_t>(seq.items.size()) < len) {
      std::int32_t g = next_group(cur % groups);
      // Skip empty groups (items < groups).
      for (int guard = 0; members[g].empty() && guard < groups; ++guard) g = next_group(g);
      const auto& pool = members[g];
      if (spec.noise > 0.0 && unit(seq_rng) < spec.noise) {
        cur = item_dist(seq_rng);
      } else if (spec.transition == Transition::kDeterministic) {
        cur = pool[static_cast<std::size_t>(rank_in_group[cur]) % pool.size()];
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        cur = pool[pick(seq_rng)];
      }
      seq.items.push_back(cur);
    }
    out.sequences.push_back(std::move(seq));
  }
  return out;
}

}  // namespace car
