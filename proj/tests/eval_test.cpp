#include "laser/eval.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace laser {
namespace {

namespace fs = std::filesystem;
using ad::Graph;

// Ideal DCG by exhaustive search over orderings of the relevant set.
double brute_force_ndcg(const std::vector<int>& ranking, const Relevance& rel, int k) {
  auto dcg = [&](const std::vector<int>& order) {
    double s = 0;
    for (int i = 0; i < k && i < static_cast<int>(order.size()); ++i) {
      auto it = rel.find(order[i]);
      if (it != rel.end()) s += (it->second) / std::log2(i + 2.0);
    }
    return s;
  };
  std::vector<int> ids;
  for (const auto& [id, g] : rel) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  double best = 0;
  do {
    best = std::max(best, dcg(ids));
  } while (std::next_permutation(ids.begin(), ids.end()));
  return dcg(ranking) / best;
}

TEST(Ndcg, SingleRelevantDocument) {
  const std::vector<int> first{7, 1, 2}, second{1, 7, 2}, missing{1, 2, 3};
  const Relevance rel{{7, 1.0}};
  EXPECT_DOUBLE_EQ(ndcg_at_k(first, rel, 10), 1.0);
  EXPECT_NEAR(ndcg_at_k(second, rel, 10), 1.0 / std::log2(3.0), 1e-15);
  EXPECT_EQ(ndcg_at_k(second, rel, 1), 0.0);
  EXPECT_EQ(ndcg_at_k(missing, rel, 10), 0.0);
  EXPECT_EQ(ndcg_at_k(first, Relevance{}, 10), 0.0);
}

TEST(Ndcg, GradedRelevanceMatchesExhaustiveIdeal) {
  const Relevance rel{{3, 3.0}, {5, 2.0}, {9, 1.0}};
  const std::vector<std::vector<int>> rankings{
      {9, 5, 3, 0, 1}, {0, 3, 1, 5, 9}, {3, 5, 9}, {1, 2, 4, 9}, {5, 0, 2, 3}};
  for (const auto& r : rankings) {
    for (int k : {1, 2, 3, 5, 10}) {
      EXPECT_NEAR(ndcg_at_k(r, rel, k), brute_force_ndcg(r, rel, k), 1e-12) << "k=" << k;
    }
  }
  EXPECT_DOUBLE_EQ(ndcg_at_k(std::vector<int>{3, 5, 9}, rel, 3), 1.0);
}

TEST(Metrics, RejectBadInput) {
  const std::vector<int> dup{1, 2, 1};
  const Relevance rel{{1, 1.0}};
  EXPECT_THROW(ndcg_at_k(dup, rel, 10), std::invalid_argument);
  EXPECT_THROW(recall_at_k(dup, rel, 10), std::invalid_argument);
  EXPECT_THROW(mrr(dup, rel), std::invalid_argument);
  const std::vector<int> ok{1, 2};
  EXPECT_THROW(ndcg_at_k(ok, rel, 0), std::invalid_argument);
  EXPECT_THROW(recall_at_k(ok, rel, 0), std::invalid_argument);
  EXPECT_THROW(mrr(ok, rel, -1), std::invalid_argument);
}

TEST(Metrics, RecallAndReciprocalRank) {
  const std::vector<int> r{4, 8, 15, 16, 23, 42};
  const Relevance rel{{15, 1.0}, {42, 1.0}};
  EXPECT_EQ(recall_at_k(r, rel, 1), 0.0);
  EXPECT_EQ(recall_at_k(r, rel, 3), 0.5);
  EXPECT_EQ(recall_at_k(r, rel, 10), 1.0);
  EXPECT_DOUBLE_EQ(mrr(r, rel), 1.0 / 3);
  EXPECT_EQ(mrr(r, rel, 2), 0.0);
  EXPECT_EQ(mrr(r, Relevance{{99, 1.0}}), 0.0);
}

TEST(RankDocuments, DescendingScoreTiesByAscendingId) {
  CorpusIndex idx;
  idx.doc_ids = {30, 10, 20, 40};
  idx.vectors = ad::Matrix<float>::from_rows({{1, 0}, {0, 1}, {1, 0}, {-1, 0}});
  const std::vector<float> q{1, 0};
  EXPECT_EQ(rank_documents(idx, q), (std::vector<int>{20, 30, 10, 40}));
  const std::vector<float> wrong{1, 0, 0};
  EXPECT_THROW(rank_documents(idx, wrong), ad::ShapeError);
}

TEST(RankDocuments, OneHotOracleGivesPerfectScores) {
  const int n = 12;
  CorpusIndex idx;
  idx.vectors = ad::Matrix<float>(n, n);
  for (int i = 0; i < n; ++i) {
    idx.doc_ids.push_back(100 + i);
    idx.vectors(i, i) = 1;
  }
  for (int i = 0; i < n; ++i) {
    std::vector<float> q(n, 0.0f);
    q[i] = 1;
    const auto r = rank_documents(idx, q);
    const Relevance rel{{100 + i, 1.0}};
    EXPECT_EQ(ndcg_at_k(r, rel, 10), 1.0);
    EXPECT_EQ(recall_at_k(r, rel, 1), 1.0);
    EXPECT_EQ(mrr(r, rel), 1.0);
  }
}

struct Small {
  GenConfig gen = [] {
    GenConfig g;
    g.vocab_size = 96;
    g.n_keys = 30;
    g.n_relations = 3;
    g.n_train = 40;
    g.n_eval = 20;
    g.corpus_size = 60;
    g.max_seq_len = 32;
    g.seed = 5;
    return g;
  }();
  BackboneConfig model_cfg = [] {
    BackboneConfig b;
    b.vocab_size = 96;
    b.model_dim = 16;
    b.n_layers = 2;
    b.n_heads = 2;
    b.mlp_mult = 2;
    b.max_seq_len = 96;
    b.seed = 5;
    return b;
  }();
  Dataset ds = gen_multihop(gen);
  Backbone<float> model{model_cfg};
};

TEST(Evaluate, MatchesDirectReimplementation) {
  Small s;
  ASSERT_EQ(s.ds.eval.size(), 20u);
  const auto index = build_index(s.model, s.ds.corpus, EncodeMode::plain(), 1);
  const QueryMode mode{EncodeKind::kLatent, 2};
  const auto res = evaluate(s.model, s.ds.eval, index, mode, 1);
  ASSERT_EQ(res.n_queries, 20u);

  double ndcg = 0, r1 = 0, r10 = 0, rr = 0;
  for (const auto& ex : s.ds.eval) {
    Graph<float> g;
    BackboneView<float> view(g, s.model);
    const auto q = encode_latent(view, ex.query, 2).v.value();
    std::vector<std::pair<double, int>> scored;
    for (const auto& d : s.ds.corpus) {
      Graph<float> h;
      BackboneView<float> dv(h, s.model);
      const auto v = encode_plain(dv, d.tokens).value();
      double dot = 0;
      for (std::size_t c = 0; c < v.data.size(); ++c) dot += double(v.data[c]) * q.data[c];
      scored.emplace_back(-dot, d.doc_id);
    }
    std::sort(scored.begin(), scored.end());
    int rank = 0;
    for (std::size_t i = 0; i < scored.size(); ++i) {
      if (scored[i].second == ex.meta.positive_doc) rank = static_cast<int>(i) + 1;
    }
    ASSERT_GT(rank, 0);
    if (rank <= 10) ndcg += 1.0 / std::log2(rank + 1.0);
    r1 += rank == 1;
    r10 += rank <= 10;
    rr += 1.0 / rank;
  }
  EXPECT_NEAR(res.ndcg_at_10, ndcg / 20, 1e-5);
  EXPECT_NEAR(res.recall_at_1, r1 / 20, 1e-12);
  EXPECT_NEAR(res.recall_at_10, r10 / 20, 1e-12);
  EXPECT_NEAR(res.mrr, rr / 20, 1e-5);
}

TEST(Evaluate, WorkerCountDoesNotChangeResults) {
  Small s;
  const auto index = build_index(s.model, s.ds.corpus, EncodeMode::plain(), 1);
  const auto index3 = build_index(s.model, s.ds.corpus, EncodeMode::plain(), 3);
  EXPECT_EQ(index.vectors, index3.vectors);
  const QueryMode mode{EncodeKind::kLatent, 3};
  const auto a = evaluate(s.model, s.ds.eval, index, mode, 1);
  const auto b = evaluate(s.model, s.ds.eval, index, mode, 4);
  EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
}

TEST(Evaluate, OneIndexServesEveryInferenceDepth) {
  Small s;
  const auto index = build_index(s.model, s.ds.corpus, EncodeMode::plain(), 1);
  const auto snapshot = index.vectors;
  std::vector<EvalResult> results;
  for (int k : {1, 3, 6}) results.push_back(evaluate(s.model, s.ds.eval, index, {EncodeKind::kLatent, k}, 1));
  EXPECT_EQ(index.vectors, snapshot);
  EXPECT_EQ(results[0].mode.K_infer, 1);
  EXPECT_EQ(results[2].mode.label(), "latent(K=6)");
  EXPECT_THROW(evaluate(s.model, s.ds.eval, index, {EncodeKind::kLatent, 0}, 1),
               std::invalid_argument);
}

TEST(Evaluate, OverBudgetQueriesAreSkipped) {
  Small s;
  s.model_cfg.max_seq_len = 8;
  Backbone<float> tiny(s.model_cfg);
  CorpusIndex idx;
  idx.doc_ids = {s.ds.corpus[0].doc_id};
  idx.vectors = ad::Matrix<float>(1, 16, 0.25f);
  const auto r = evaluate(tiny, s.ds.eval, idx, {EncodeKind::kExplicit, 0}, 1);
  EXPECT_EQ(r.n_queries, 0u);
  EXPECT_EQ(r.skipped.size(), s.ds.eval.size());
}

TEST(Evaluate, ResultJsonCarriesMetrics) {
  Small s;
  const auto index = build_index(s.model, s.ds.corpus, EncodeMode::plain(), 1);
  const auto r = evaluate(s.model, s.ds.eval, index, {EncodeKind::kPlain, 0}, 1);
  const nlohmann::json j = r;
  for (const char* key : {"ndcg_at_10", "recall_at_1", "recall_at_5", "recall_at_10", "mrr", "n_queries"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["n_queries"], 20);
}

TEST(Embeddings, RoundTripAndRejectGarbage) {
  Small s;
  const auto index = build_index(s.model, s.ds.corpus, EncodeMode::plain(), 1);
  const auto dir = fs::temp_directory_path() / "laser_eval_test";
  fs::create_directories(dir);
  save_embeddings(dir / "e.bin", index);
  const auto back = load_embeddings(dir / "e.bin");
  EXPECT_EQ(back.doc_ids, index.doc_ids);
  EXPECT_EQ(back.vectors, index.vectors);

  std::ofstream(dir / "junk.bin") << "not an embedding file";
  EXPECT_THROW(load_embeddings(dir / "junk.bin"), std::runtime_error);
  EXPECT_THROW(load_embeddings(dir / "missing.bin"), std::runtime_error);
}

TEST(GreedyDecode, DeterministicAndSized) {
  Small s;
  const auto& q = s.ds.eval[0].query;
  const auto a = greedy_decode(s.model, q, 12);
  EXPECT_EQ(a.size(), 12u);
  EXPECT_EQ(a, greedy_decode(s.model, q, 12));
  for (int t : a) {
    EXPECT_GE(t, 0);
    EXPECT_LT(t, 96);
  }
  EXPECT_TRUE(greedy_decode(s.model, q, 0).empty());
  EXPECT_THROW(greedy_decode(s.model, q, 200), std::length_error);
}

TEST(BenchLatency, LatentIsFarCheaperThanRewriting) {
  Small s;
  std::vector<TokenSeq> qs;
  for (const auto& ex : s.ds.eval) qs.push_back(ex.query);
  BenchConfig cfg;
  cfg.max_queries = 8;
  cfg.warmup = 1;
  cfg.latent_K = {1, 3};
  const auto rep = bench_latency(s.model, qs, cfg);
  EXPECT_EQ(rep.find("plain").samples, 8u);
  EXPECT_EQ(rep.find("latent", 3).steps, 3);
  EXPECT_EQ(rep.find("explicit", 64).steps, 64);
  EXPECT_THROW(rep.find("latent", 6), std::out_of_range);
  EXPECT_LT(rep.find("latent", 3).mean_ms, rep.find("explicit", 64).mean_ms);
  EXPECT_GT(rep.latent_over_plain, 0);
  EXPECT_LT(rep.latent_over_explicit, 1);
  const nlohmann::json j = rep;
  EXPECT_TRUE(j.contains("timings"));

  cfg.rationale_tokens = 200;
  EXPECT_THROW(bench_latency(s.model, qs, cfg), std::length_error);
}

TEST(BenchLatency, RepeatedPlainTimingIsStable) {
  Small s;
  std::vector<TokenSeq> qs;
  for (const auto& ex : s.ds.eval) qs.push_back(ex.query);
  BenchConfig cfg;
  cfg.latent_K = {1};
  cfg.primary_K = 1;
  cfg.rationale_tokens = 4;
  cfg.max_queries = 20;
  const double a = bench_latency(s.model, qs, cfg).find("plain").mean_ms;
  const double b = bench_latency(s.model, qs, cfg).find("plain").mean_ms;
  EXPECT_GT(a, 0);
  EXPECT_LT(std::abs(a - b) / std::max(a, b), 0.2) << a << " vs " << b;
}

TEST(Metrics, StayInUnitIntervalAndRecallIsMonotone) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> ranking(30);
    std::iota(ranking.begin(), ranking.end(), 0);
    std::shuffle(ranking.begin(), ranking.end(), rng);
    Relevance rel;
    for (int i = 0; i < 1 + static_cast<int>(rng() % 4); ++i) rel[static_cast<int>(rng() % 40)] = 1.0 + static_cast<double>(rng() % 3);
    double prev = 0;
    for (int k : {1, 5, 10, 30}) {
      const double n = ndcg_at_k(ranking, rel, k), r = recall_at_k(ranking, rel, k);
      EXPECT_GE(n, 0);
      EXPECT_LE(n, 1 + 1e-12);
      EXPECT_GE(r, prev);
      EXPECT_LE(r, 1);
      prev = r;
    }
    EXPECT_GE(mrr(ranking, rel), 0);
    EXPECT_LE(mrr(ranking, rel), 1);
    // Reordering documents past rank k leaves the metric unchanged.
    auto tail = ranking;
    std::shuffle(tail.begin() + 10, tail.end(), rng);
    EXPECT_EQ(ndcg_at_k(ranking, rel, 10), ndcg_at_k(tail, rel, 10));
    EXPECT_EQ(recall_at_k(ranking, rel, 10), recall_at_k(tail, rel, 10));
  }
}

}  // namespace
}  // namespace laser
