#pragma once

// Retrieval metrics, corpus indexing, evaluation and latency benchmarking.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "laser/backbone.hpp"
#include "laser/data.hpp"
#include "laser/encoder.hpp"

namespace laser {

// doc id -> graded gain (> 0).
using Relevance = std::map<int, double>;

// Rankings are ordered doc ids, best first. All three reject duplicate ids
// and k < 1 with std::invalid_argument.
double ndcg_at_k(std::span<const int> ranking, const Relevance& relevant, int k);
double recall_at_k(std::span<const int> ranking, const Relevance& relevant, int k);
// Reciprocal rank of the first relevant document within the top k
// (k = 0: whole ranking).
double mrr(std::span<const int> ranking, const Relevance& relevant, int k = 0);

// Embedded corpus: row i of `vectors` belongs to doc_ids[i].
struct CorpusIndex {
  EncodeMode doc_mode;
  std::vector<int> doc_ids;
  ad::Matrix<float> vectors;
};

CorpusIndex build_index(const Backbone<float>& model, const std::vector<Document>& corpus,
                        const EncodeMode& doc_mode, unsigned workers = 0);

// Doc ids ordered by descending cosine, ties by ascending id.
std::vector<int> rank_documents(const CorpusIndex& index, std::span<const float> query);

// How queries are encoded at evaluation time. kExplicit feeds the gold
// rationale (teacher view); kLatent uses `K_infer` thinking steps.
struct QueryMode {
  EncodeKind kind = EncodeKind::kLatent;
  int K_infer = 3;
  std::string label() const;
};

struct QueryRanking {
  std::size_t query = 0;
  int positive_doc = -1;
  int positive_rank = 0;  // 1-based
  std::vector<int> top;   // first 10 ids
};

struct EvalResult {
  QueryMode mode;
  double ndcg_at_10 = 0;
  double recall_at_1 = 0;
  double recall_at_5 = 0;
  double recall_at_10 = 0;
  double mrr = 0;
  std::size_t n_queries = 0;
  std::vector<std::size_t> skipped;  // queries that overflowed the budget
  std::vector<QueryRanking> rankings;
};

void to_json(nlohmann::json& j, const EvalResult& r);

Relevance relevance_of(const Example& ex);

// Ranks every query against a prebuilt index; queries are spread over
// `workers` threads and results are independent of the worker count.
EvalResult evaluate(const Backbone<float>& model, const std::vector<Example>& queries,
                    const CorpusIndex& index, const QueryMode& mode, unsigned workers = 0);

// Encodes one query into a unit vector under `mode`.
std::vector<float> encode_query(const Backbone<float>& model, const Example& ex,
                                const QueryMode& mode);

struct BenchConfig {
  std::vector<int> latent_K{1, 3, 6};
  int primary_K = 3;  // used for the reported ratios
  int rationale_tokens = 64;
  int warmup = 3;
  int max_queries = 50;
};

struct ModeTiming {
  std::string mode;  // plain, latent or explicit
  int steps = 0;     // K for latent, R for explicit
  std::size_t samples = 0;
  double mean_ms = 0;
  double median_ms = 0;
  double p95_ms = 0;
  double tokens_per_query = 0;
};

struct LatencyReport {
  std::vector<ModeTiming> timings;
  double latent_over_plain = 0;
  double latent_over_explicit = 0;
  const ModeTiming& find(const std::string& mode, int steps = 0) const;
};

void to_json(nlohmann::json& j, const LatencyReport& r);

// Explicit mode simulates rewrite-then-retrieve with the backbone itself:
// greedy decode of R tokens after [INSTR; q], then an encode of
// [INSTR; q; decoded; EOS]. Throws std::length_error if R plus the query
// exceed max_seq_len.
LatencyReport bench_latency(const Backbone<float>& model,
                            const std::vector<TokenSeq>& queries, const BenchConfig& cfg);

// Greedy rewriter used by the explicit benchmark path.
TokenSeq greedy_decode(const Backbone<float>& model, std::span<const int> query, int R);

// Embedding dump: "LSEREMB1", u32 rows, u32 dim, rows*dim f32, rows i32 ids.
void save_embeddings(const std::filesystem::path& path, const CorpusIndex& index);
CorpusIndex load_embeddings(const std::filesystem::path& path);

}  // namespace laser
