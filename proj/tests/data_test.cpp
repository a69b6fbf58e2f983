#include "laser/data.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace laser {
namespace {

namespace fs = std::filesystem;

GenConfig small_config(std::uint64_t seed = 1) {
  GenConfig c;
  c.n_keys = 60;
  c.n_relations = 3;
  c.n_train = 300;
  c.n_eval = 40;
  c.corpus_size = 150;
  c.seed = seed;
  return c;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("laser_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(GenConfig, DefaultsAreValidAndSized) {
  GenConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.vocab_size, 512);
  EXPECT_EQ(c.hops, 2);
  EXPECT_EQ(c.n_train, 2000);
  EXPECT_EQ(c.n_eval, 200);
  EXPECT_EQ(c.corpus_size, 1000);
}

TEST(GenConfig, RejectsInfeasibleSettings) {
  auto bad = [](auto mutate) {
    GenConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](GenConfig& c) { c.hops = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](GenConfig& c) { c.vocab_size = 60; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](GenConfig& c) { c.corpus_size = 10; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](GenConfig& c) { c.hops = 40; c.n_keys = 100; }).validate(),
               std::invalid_argument);
  EXPECT_THROW(bad([](GenConfig& c) { c.segment_style = "free"; }).validate(),
               std::invalid_argument);
  // More training chains than the chain space holds.
  GenConfig tiny = small_config();
  tiny.n_train = 100000;
  EXPECT_THROW(gen_multihop(tiny), std::invalid_argument);
}

TEST(GenConfig, JsonRoundTrip) {
  GenConfig c = small_config(99);
  nlohmann::json j = c;
  EXPECT_EQ(j.get<GenConfig>(), c);
}

TEST(GenMultihop, SizesAndLayout) {
  const auto cfg = small_config();
  const auto ds = gen_multihop(cfg);
  EXPECT_EQ(ds.train.size(), 300u);
  EXPECT_EQ(ds.eval.size(), 40u);
  ASSERT_EQ(ds.corpus.size(), 150u);
  for (std::size_t i = 0; i < ds.corpus.size(); ++i) EXPECT_EQ(ds.corpus[i].doc_id, static_cast<int>(i));
  std::set<TokenSeq> unique;
  for (const auto& d : ds.corpus) unique.insert(d.tokens);
  EXPECT_EQ(unique.size(), ds.corpus.size());
}

TEST(GenMultihop, EveryExampleSatisfiesGroundTruth) {
  const auto cfg = small_config();
  const auto ds = gen_multihop(cfg);
  for (const auto* split : {&ds.train, &ds.eval}) {
    for (std::size_t i = 0; i < split->size(); ++i) {
      EXPECT_EQ(check_ground_truth((*split)[i], cfg), "") << "example " << i;
      EXPECT_EQ(ds.corpus[(*split)[i].meta.positive_doc].tokens, (*split)[i].positive);
    }
  }
}

TEST(GenMultihop, SingleHopHasOneSegment) {
  auto cfg = small_config();
  cfg.hops = 1;
  cfg.n_train = 100;
  cfg.n_eval = 20;
  const auto ds = gen_multihop(cfg);
  EXPECT_EQ(ds.eval.size(), 20u);
  for (const auto& ex : ds.train) {
    ASSERT_EQ(ex.segments.size(), 1u);
    EXPECT_NE(std::find(ex.positive.begin(), ex.positive.end(), ex.meta.chain_keys[1]),
              ex.positive.end());
  }
}

TEST(GenMultihop, DeterministicPerSeed) {
  EXPECT_EQ(gen_multihop(small_config(5)), gen_multihop(small_config(5)));
  EXPECT_NE(gen_multihop(small_config(5)).train, gen_multihop(small_config(6)).train);
}

TEST(GenMultihop, TrainAndEvalChainsDisjoint) {
  const auto ds = gen_multihop(small_config());
  EXPECT_TRUE(chains_disjoint(ds.train, ds.eval));
  EXPECT_FALSE(chains_disjoint(ds.train, ds.train));
}

TEST(GenMultihop, SymbolicOracleSolvesEveryEvalQuery) {
  const auto cfg = small_config();
  const auto ds = gen_multihop(cfg);
  const auto pred = symbolic_solve(ds.train, ds.corpus, ds.eval, cfg);
  ASSERT_EQ(pred.size(), ds.eval.size());
  for (std::size_t i = 0; i < pred.size(); ++i) EXPECT_EQ(pred[i], ds.eval[i].meta.positive_doc);
}

TEST(GenMultihop, SurfaceMatchPointsAtHardNegative) {
  // The only key in the query belongs to a hard negative, never the answer.
  const auto cfg = small_config();
  const auto ds = gen_multihop(cfg);
  for (const auto& ex : ds.eval) {
    EXPECT_EQ(ex.query.front(), ex.meta.chain_keys.front());
    EXPECT_EQ(ex.hard_negatives.front(), ds.corpus[ex.meta.hard_negative_docs.front()].tokens);
  }
}

TEST(GroundTruth, DetectsViolations) {
  const auto cfg = small_config();
  auto ex = gen_multihop(cfg).train.front();
  auto leak = ex;
  leak.query.push_back(leak.meta.chain_keys.back());
  EXPECT_NE(check_ground_truth(leak, cfg), "");
  auto dup = ex;
  dup.hard_negatives.push_back(dup.positive);
  EXPECT_NE(check_ground_truth(dup, cfg), "");
  auto empty = ex;
  empty.segments.clear();
  EXPECT_NE(check_ground_truth(empty, cfg), "");
}

TEST(MakeBatch, SingleQueryOneHardNegative) {
  const auto ds = gen_multihop(small_config());
  std::mt19937_64 rng(1);
  const std::size_t idx[] = {0};
  const auto b = make_batch(ds.train, idx, 1, rng);
  EXPECT_EQ(b.docs.size(), 2u);
  EXPECT_EQ(b.positive_index, std::vector<std::size_t>{0});
  EXPECT_EQ(b.docs[0], ds.train[0].positive);
}

TEST(MakeBatch, PoolsAllCandidates) {
  const auto ds = gen_multihop(small_config());
  std::mt19937_64 rng(2);
  // Pick four examples with pairwise distinct document content.
  std::vector<std::size_t> idx;
  std::set<TokenSeq> docs;
  for (std::size_t i = 0; i < ds.train.size() && idx.size() < 4; ++i) {
    const auto& ex = ds.train[i];
    if (docs.count(ex.positive) || docs.count(ex.hard_negatives[0]) ||
        docs.count(ex.hard_negatives[1]))
      continue;
    docs.insert(ex.positive);
    docs.insert(ex.hard_negatives.begin(), ex.hard_negatives.end());
    idx.push_back(i);
  }
  ASSERT_EQ(idx.size(), 4u);
  const auto b = make_batch(ds.train, idx, 1, rng);
  EXPECT_EQ(b.docs.size(), 8u);
  EXPECT_TRUE(b.resampled.empty());
}

TEST(MakeBatch, PositivesPointAtTheirContent) {
  const auto ds = gen_multihop(small_config());
  std::mt19937_64 rng(3);
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto b = make_batch(ds.train, idx, 2, rng);
  ASSERT_EQ(b.positive_index.size(), 16u);
  std::set<TokenSeq> unique(b.docs.begin(), b.docs.end());
  EXPECT_EQ(unique.size(), b.docs.size());
  std::set<TokenSeq> positives;
  for (std::size_t q = 0; q < 16; ++q) {
    const auto& ex = ds.train[b.example_indices[q]];
    EXPECT_EQ(b.docs[b.positive_index[q]], ex.positive);
    EXPECT_TRUE(positives.insert(ex.positive).second) << "duplicate positive survived";
    for (auto n : b.hard_negative_index[q]) {
      EXPECT_NE(std::find(ex.hard_negatives.begin(), ex.hard_negatives.end(), b.docs[n]),
                ex.hard_negatives.end());
    }
  }
}

TEST(MakeBatch, ResamplesDuplicatePositive) {
  const auto ds = gen_multihop(small_config());
  std::size_t a = 0, b = 0;
  for (std::size_t j = 1; j < ds.train.size() && b == 0; ++j)
    if (ds.train[j].positive == ds.train[0].positive) b = j;
  ASSERT_NE(b, 0u);
  std::mt19937_64 rng(4);
  const std::size_t idx[] = {a, b};
  const auto batch = make_batch(ds.train, idx, 1, rng);
  ASSERT_EQ(batch.resampled.size(), 1u);
  EXPECT_EQ(batch.resampled[0].first, b);
  EXPECT_NE(ds.train[batch.example_indices[1]].positive, ds.train[0].positive);
}

TEST(MakeBatch, RejectsBadIndices) {
  const auto ds = gen_multihop(small_config());
  std::mt19937_64 rng(5);
  const std::size_t dup[] = {3, 3};
  const std::size_t out[] = {100000};
  const std::size_t one[] = {0};
  EXPECT_THROW(make_batch(ds.train, dup, 1, rng), std::invalid_argument);
  EXPECT_THROW(make_batch(ds.train, out, 1, rng), std::out_of_range);
  EXPECT_THROW(make_batch(ds.train, one, 3, rng), std::invalid_argument);
}

TEST(DatasetFile, RoundTripIsExact) {
  auto cfg = small_config();
  cfg.n_train = 1000;
  cfg.n_keys = 200;
  cfg.corpus_size = 400;
  const auto ds = gen_multihop(cfg);
  const auto dir = temp_dir("roundtrip");
  save_dataset(dir, ds);
  EXPECT_EQ(load_dataset(dir), ds);
}

TEST(DatasetFile, EmptyDatasetIsHeaderOnly) {
  const auto dir = temp_dir("empty");
  save_examples(dir / "e.jsonl", {}, GenConfig{});
  std::ifstream in(dir / "e.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 1);
  GenConfig loaded;
  EXPECT_TRUE(load_examples(dir / "e.jsonl", &loaded).empty());
  EXPECT_EQ(loaded, GenConfig{});
}

TEST(DatasetFile, TruncatedFileNamesLastGoodLine) {
  const auto ds = gen_multihop(small_config());
  const auto dir = temp_dir("truncated");
  save_examples(dir / "t.jsonl", {ds.train.begin(), ds.train.begin() + 5}, ds.config);
  auto size = fs::file_size(dir / "t.jsonl");
  fs::resize_file(dir / "t.jsonl", size - 10);
  try {
    load_examples(dir / "t.jsonl");
    FAIL() << "expected DataFormatError";
  } catch (const DataFormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(":6:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("last good line 5"), std::string::npos) << msg;
  }
}

TEST(DatasetFile, VersionAndKindChecked) {
  const auto dir = temp_dir("version");
  {
    std::ofstream out(dir / "v.jsonl");
    out << R"({"format":"laser-ds","version":2,"kind":"examples","gen_config":{}})" << '\n';
  }
  EXPECT_THROW(load_examples(dir / "v.jsonl"), DataFormatError);
  save_corpus(dir / "c.jsonl", {{0, {5, 6}}}, GenConfig{});
  EXPECT_THROW(load_examples(dir / "c.jsonl"), DataFormatError);
  EXPECT_EQ(load_corpus(dir / "c.jsonl").front().tokens, (TokenSeq{5, 6}));
  EXPECT_THROW(load_examples(dir / "missing.jsonl"), std::runtime_error);
}

}  // namespace
}  // namespace laser
