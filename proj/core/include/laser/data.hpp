#pragma once

// Synthetic multi-hop retrieval task.
//
// A global table succ(key, relation) links keys. A query names a start key
// k1 and relations r1..rH; its answer is the document of the key reached by
// following the links, k_{H+1}. Rationale segment i is the link triple
// [k_i, r_i, k_{i+1}]. Documents of k1..kH are the hard negatives: they share
// surface tokens with the query but are wrong.
//
// Token layout: specials, then relations, then keys, then noise.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "laser/encoder.hpp"

namespace laser {

struct GenConfig {
  int vocab_size = 512;
  int n_keys = 50;
  int n_relations = 7;
  int hops = 2;
  int n_train = 2000;
  int n_eval = 200;
  int corpus_size = 1000;
  int query_noise = 2;  // noise tokens appended to every query
  int doc_noise = 3;    // noise tokens in every document
  int max_seq_len = 128;
  std::uint64_t seed = 0;
  std::string segment_style = "per_hop";

  int first_relation() const { return tokens::kNumSpecial; }
  int first_key() const { return first_relation() + n_relations; }
  int first_noise() const { return first_key() + n_keys; }
  int n_noise() const { return vocab_size - first_noise(); }
  bool is_key(int t) const { return t >= first_key() && t < first_noise(); }
  bool is_relation(int t) const { return t >= first_relation() && t < first_key(); }

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  friend bool operator==(const GenConfig&, const GenConfig&) = default;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

struct ExampleMeta {
  int hops = 0;
  std::vector<int> chain_keys;  // k_1..k_{H+1}
  std::vector<int> relations;   // r_1..r_H
  int positive_doc = -1;
  std::vector<int> hard_negative_docs;
  friend bool operator==(const ExampleMeta&, const ExampleMeta&) = default;
};

struct Example {
  TokenSeq query;
  std::vector<TokenSeq> segments;
  TokenSeq positive;
  std::vector<TokenSeq> hard_negatives;
  ExampleMeta meta;
  friend bool operator==(const Example&, const Example&) = default;
};

struct Document {
  int doc_id = 0;
  TokenSeq tokens;
  friend bool operator==(const Document&, const Document&) = default;
};

struct Dataset {
  GenConfig config;
  std::vector<Example> train;
  std::vector<Example> eval;
  std::vector<Document> corpus;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

Dataset gen_multihop(const GenConfig& cfg);

// Independent 64-bit stream seed for (seed, stream, index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

// Empty string when the example satisfies the construction contract;
// otherwise a description of the violation.
std::string check_ground_truth(const Example& ex, const GenConfig& cfg);

// Reference solver: learns the link table from training rationales only,
// follows it from each query's start key and looks the final key up in the
// corpus. Returns the predicted doc id per query (-1 if unresolved).
std::vector<int> symbolic_solve(const std::vector<Example>& train,
                                const std::vector<Document>& corpus,
                                const std::vector<Example>& queries,
                                const GenConfig& cfg);

// Chains are identified by (k1, r1..rH); two splits are disjoint when no
// chain occurs in both.
bool chains_disjoint(const std::vector<Example>& a, const std::vector<Example>& b);

struct Batch {
  std::vector<std::size_t> example_indices;
  std::vector<TokenSeq> docs;  // pooled candidates, unique by content
  std::vector<std::size_t> positive_index;
  std::vector<std::vector<std::size_t>> hard_negative_index;
  // (requested index, replacement) for queries whose positive duplicated an
  // earlier one in the batch.
  std::vector<std::pair<std::size_t, std::size_t>> resampled;
  // Duplicates for which no distinct replacement existed; left out.
  std::vector<std::size_t> dropped;
};

// Pools every query's positive and `hard_negs_per_query` of its hard
// negatives (chosen with `rng`) into one deduplicated candidate list.
Batch make_batch(const std::vector<Example>& data,
                 std::span<const std::size_t> indices, int hard_negs_per_query,
                 std::mt19937_64& rng);

inline constexpr const char* kDatasetFormat = "laser-ds";
inline constexpr int kDatasetVersion = 1;

class DataFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_examples(const std::filesystem::path& path,
                   const std::vector<Example>& examples, const GenConfig& cfg);
std::vector<Example> load_examples(const std::filesystem::path& path,
                                   GenConfig* cfg = nullptr);
void save_corpus(const std::filesystem::path& path,
                 const std::vector<Document>& corpus, const GenConfig& cfg);
std::vector<Document> load_corpus(const std::filesystem::path& path,
                                  GenConfig* cfg = nullptr);

// Directory layout: train.jsonl, eval.jsonl, corpus.jsonl.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace laser
