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

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "car/corpus.hpp"
#include "car/error.hpp"

namespace car {
namespace {

std::vector<Interaction> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_interactions(in);
}

TEST(ParseInteractions, KeepsFileOrder) {
  const auto rows = parse("u1\ti1\t5\nu2\ti2\t3\nu1\ti3\t9\n");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (Interaction{"u1", "i1", 5}));
  EXPECT_EQ(rows[1], (Interaction{"u2", "i2", 3}));
  EXPECT_EQ(rows[2], (Interaction{"u1", "i3", 9}));
}

TEST(ParseInteractions, EmptyInputGivesEmptyList) { EXPECT_TRUE(parse("").empty()); }

TEST(ParseInteractions, DuplicateTriplesAreKept) {
  EXPECT_EQ(parse("u\ti\t1\nu\ti\t1\n").size(), 2u);
}

TEST(ParseInteractions, ShortLineReportsLineNumber) {
  try {
    parse("u1\ti1\t5\nu2\ti2\n");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_EQ(e.kind(), ErrorKind::kParse);
  }
}

// Grid of users x items where every cell is one interaction.
std::vector<Interaction> complete_bipartite(int users, int items, const std::string& prefix = "") {
  std::vector<Interaction> rows;
  std::int64_t ts = 0;
  for (int u = 0; u < users; ++u) {
    for (int i = 0; i < items; ++i) {
      rows.push_back({prefix + "u" + std::to_string(u), prefix + "i" + std::to_string(i), ts++});
    }
  }
  return rows;
}

TEST(FiveCoreFilter, DenseCoreUnchanged) {
  const auto rows = complete_bipartite(6, 6);
  const auto out = five_core_filter(rows);
  EXPECT_EQ(out.interactions, rows);
  EXPECT_EQ(out.users.size(), 6);
  EXPECT_EQ(out.items.size(), 6);
}

TEST(FiveCoreFilter, SparseUserRemoved) {
  auto rows = complete_bipartite(6, 6);
  for (int i = 0; i < 4; ++i) rows.push_back({"light", "i" + std::to_string(i), 100 + i});
  const auto out = five_core_filter(rows);
  EXPECT_EQ(out.users.find("light"), -1);
  EXPECT_EQ(out.interactions.size(), 36u);
}

TEST(FiveCoreFilter, EverythingRemovedIsAnError) {
  try {
    five_core_filter(complete_bipartite(3, 3));
    FAIL() << "expected corpus-eliminated error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCorpusEliminated);
  }
}

// Naive fixpoint: rescan and drop every row touching a light user or item
// until nothing changes.
std::vector<Interaction> naive_core(std::vector<Interaction> rows, int min_count) {
  for (;;) {
    std::map<std::string, int> ud, id;
    for (const auto& r : rows) {
      ++ud[r.user_id];
      ++id[r.item_id];
    }
    std::vector<Interaction> keep;
    for (const auto& r : rows) {
      if (ud[r.user_id] >= min_count && id[r.item_id] >= min_count) keep.push_back(r);
    }
    if (keep.size() == rows.size()) return keep;
    rows = std::move(keep);
  }
}

TEST(FiveCoreFilter, CascadeMatchesNaiveFixpoint) {
  // A 5x5 core plus users c0..c4 that each touch four core items and a
  // side item x. c4 misses one core item, so it falls below 5, which drops x
  // below 5, which drops c0..c3 in turn.
  auto rows = complete_bipartite(5, 5);
  std::int64_t ts = 1000;
  for (int u = 0; u <= 4; ++u) {
    const std::string user = "c" + std::to_string(u);
    for (int i = 0; i < (u == 4 ? 3 : 4); ++i) rows.push_back({user, "i" + std::to_string(i), ts++});
    rows.push_back({user, "x", ts++});
  }
  const auto out = five_core_filter(rows);
  EXPECT_EQ(out.interactions, naive_core(rows, 5));
  EXPECT_EQ(out.interactions.size(), 25u);

  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Interaction> random_rows;
    std::uniform_int_distribution<int> u(0, 11), i(0, 9);
    for (int r = 0; r < 120; ++r) {
      random_rows.push_back({"u" + std::to_string(u(rng)), "i" + std::to_string(i(rng)), r});
    }
    const auto expect = naive_core(random_rows, 5);
    if (expect.empty()) {
      EXPECT_THROW(five_core_filter(random_rows), Error);
    } else {
      EXPECT_EQ(five_core_filter(random_rows).interactions, expect) << "trial " << trial;
    }
  }
}

TEST(BuildSequences, SortsByTimestampWithStableTies) {
  FilteredCorpus c;
  c.interactions = {{"u", "a", 5}, {"u", "b", 3}, {"u", "c", 9}, {"u", "d", 3}};
  for (const auto& r : c.interactions) {
    c.users.intern(r.user_id);
    c.items.intern(r.item_id);
  }
  const auto seqs = build_sequences(c);
  ASSERT_EQ(seqs.size(), 1u);
  // b and d tie at 3 and keep input order.
  EXPECT_EQ(seqs[0].items, (std::vector<std::int32_t>{1, 3, 0, 2}));
}

TEST(BuildSequences, MatchesReferenceSort) {
  std::mt19937_64 rng(11);
  FilteredCorpus c;
  std::uniform_int_distribution<int> ts(0, 30);
  for (int r = 0; r < 100; ++r) {
    c.interactions.push_back({"u", "i" + std::to_string(r), ts(rng)});
    c.users.intern("u");
    c.items.intern("i" + std::to_string(r));
  }
  std::vector<std::pair<std::int64_t, int>> ref;
  for (int r = 0; r < 100; ++r) ref.emplace_back(c.interactions[r].timestamp, r);
  std::sort(ref.begin(), ref.end());  // (ts, input index) is a total order
  std::vector<std::int32_t> expect;
  for (const auto& [t, r] : ref) expect.push_back(r);
  EXPECT_EQ(build_sequences(c)[0].items, expect);
}

TEST(LeaveOneOut, SplitsLastTwoItems) {
  const std::vector<UserSequence> seqs{{0, {10, 11, 12, 13, 14}}};
  const auto split = leave_one_out_split(seqs, 20);
  ASSERT_EQ(split.users.size(), 1u);
  EXPECT_EQ(split.users[0].train, (std::vector<std::int32_t>{10, 11, 12}));
  EXPECT_EQ(split.users[0].valid, 13);
  EXPECT_EQ(split.users[0].test, 14);
}

TEST(LeaveOneOut, ShortSequencesExcluded) {
  const std::vector<UserSequence> seqs{{0, {1, 2}}, {1, {1, 2, 3}}};
  const auto split = leave_one_out_split(seqs, 5);
  EXPECT_EQ(split.excluded, 1u);
  ASSERT_EQ(split.users.size(), 1u);
  EXPECT_EQ(split.users[0].user, 1);
}

TEST(LeaveOneOut, HistoryKeepsMostRecentTwenty) {
  UserSequence seq{0, {}};
  for (int i = 0; i < 25; ++i) seq.items.push_back(i);
  const auto split = leave_one_out_split(std::span(&seq, 1), 25);
  const auto& u = split.users[0];
  const auto hist = u.training_history(20);
  ASSERT_EQ(hist.size(), 20u);
  EXPECT_EQ(hist.front(), 3);
  EXPECT_EQ(hist.back(), 22);
  EXPECT_EQ(u.valid_history(20), hist);
  const auto test_hist = u.test_history(20);
  EXPECT_EQ(test_hist.back(), 23);
  EXPECT_EQ(test_hist.front(), 4);
}

TEST(Synth, ShapeAndDeterminism) {
  SynthSpec spec;
  const auto a = synth_corpus(spec, 5);
  const auto b = synth_corpus(spec, 5);
  EXPECT_EQ(a.sequences.size(), 50u);
  EXPECT_EQ(a.embeddings.rows(), 20);
  std::set<std::int32_t> seen;
  for (const auto& s : a.sequences) {
    for (auto i : s.items) {
      ASSERT_GE(i, 0);
      ASSERT_LT(i, 20);
      seen.insert(i);
    }
  }
  EXPECT_GT(seen.size(), 1u);
  EXPECT_EQ(a.sequences, b.sequences);
  EXPECT_TRUE(a.embeddings == b.embeddings);
  EXPECT_EQ(a.cluster_of, b.cluster_of);
}

TEST(Synth, FewerItemsThanClustersIsAnError) {
  SynthSpec spec;
  spec.items = 3;
  spec.clusters = 4;
  EXPECT_THROW(synth_corpus(spec, 0), Error);
}

TEST(Synth, DeterministicTransitionsAreAFunction) {
  SynthSpec spec;
  spec.transition = Transition::kDeterministic;
  const auto c = synth_corpus(spec, 3);
  std::map<std::int32_t, std::int32_t> next;
  for (const auto& s : c.sequences) {
    for (std::size_t t = 0; t + 1 < s.items.size(); ++t) {
      auto [it, inserted] = next.emplace(s.items[t], s.items[t + 1]);
      EXPECT_EQ(it->second, s.items[t + 1]);
    }
  }
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("car_corpus_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

using CorpusFiles = TempDir;

TEST_F(CorpusFiles, EmbeddingTextAndBinaryRoundTrip) {
  EmbeddingMatrix m(3, 2);
  m << 1.5f, -2.f, 0.25f, 3.f, -7.125f, 1e-3f;
  const std::vector<std::string> ids{"b", "a", "c"};
  write_embeddings_text(dir_ / "e.txt", ids, m);
  write_embeddings_binary(dir_ / "e.bin", m);

  const auto text = read_embeddings(dir_ / "e.txt");
  EXPECT_EQ(text.ids, ids);
  EXPECT_TRUE(text.vectors == m);
  const auto bin = read_embeddings(dir_ / "e.bin");
  EXPECT_TRUE(bin.ids.empty());
  EXPECT_TRUE(bin.vectors == m);

  IdMap items;
  items.intern("a");
  items.intern("b");
  items.intern("c");
  const auto aligned = align_embeddings(text, items);
  EXPECT_TRUE(aligned.row(0) == m.row(1));
  EXPECT_TRUE(aligned.row(1) == m.row(0));
}

TEST_F(CorpusFiles, SplitAndIdMapRoundTrip) {
  std::vector<UserSequence> seqs{{0, {0, 1, 2, 3}}, {1, {2, 2, 1}}, {2, {0, 1}}};
  const auto split = leave_one_out_split(seqs, 4);
  write_split(dir_ / "s.tsv", split);
  const auto back = read_split(dir_ / "s.tsv");
  EXPECT_EQ(back.users, split.users);
  EXPECT_EQ(back.num_items, 4);
  EXPECT_EQ(back.excluded, 1u);

  IdMap m;
  m.intern("x");
  m.intern("y");
  write_id_map(dir_ / "ids", m);
  EXPECT_EQ(read_id_map(dir_ / "ids"), m);
}

TEST_F(CorpusFiles, MissingFileIsIoError) {
  try {
    ingest_interactions(dir_ / "nope.tsv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
}

}  // namespace
}  // namespace car
