#include "laser/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace laser {

using nlohmann::json;

void GenConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid gen config: " + what);
  };
  if (hops < 1) fail("hops must be >= 1");
  if (n_relations < 1) fail("n_relations must be >= 1");
  if (n_keys < hops + 1) fail("n_keys must exceed hops");
  if (query_noise < 0 || doc_noise < 0) fail("noise counts must be non-negative");
  if (n_noise() < 1) {
    fail("vocab_size " + std::to_string(vocab_size) + " leaves no noise tokens after " +
         std::to_string(first_noise()) + " reserved ids");
  }
  if (corpus_size < n_keys) fail("corpus_size must be >= n_keys (one document per key)");
  if (n_train < 0 || n_eval < 0) fail("split sizes must be non-negative");
  if (segment_style != "per_hop") fail("unknown segment_style '" + segment_style + "'");
  // [INSTR; query; segments; EOS] is the longest sequence the task produces.
  const int explicit_len = 1 + (1 + hops + query_noise) + 3 * hops + 1;
  if (explicit_len > max_seq_len) {
    fail("explicit sequence of " + std::to_string(explicit_len) +
         " tokens exceeds max_seq_len " + std::to_string(max_seq_len));
  }
  if (doc_noise + 2 > max_seq_len) fail("documents exceed max_seq_len");
}

void to_json(json& j, const GenConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"n_keys", c.n_keys},
       {"n_relations", c.n_relations}, {"hops", c.hops},
       {"n_train", c.n_train}, {"n_eval", c.n_eval},
       {"corpus_size", c.corpus_size}, {"query_noise", c.query_noise},
       {"doc_noise", c.doc_noise}, {"max_seq_len", c.max_seq_len},
       {"seed", c.seed}, {"segment_style", c.segment_style}};
}

void from_json(const json& j, GenConfig& c) {
  GenConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.n_keys = j.value("n_keys", d.n_keys);
  c.n_relations = j.value("n_relations", d.n_relations);
  c.hops = j.value("hops", d.hops);
  c.n_train = j.value("n_train", d.n_train);
  c.n_eval = j.value("n_eval", d.n_eval);
  c.corpus_size = j.value("corpus_size", d.corpus_size);
  c.query_noise = j.value("query_noise", d.query_noise);
  c.doc_noise = j.value("doc_noise", d.doc_noise);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.seed = j.value("seed", d.seed);
  c.segment_style = j.value("segment_style", d.segment_style);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Chain {
  std::vector<int> keys;  // key indices, 0-based
  std::vector<int> rels;
};

using Link = std::pair<int, int>;  // (key index, relation index)

TokenSeq noise(std::mt19937_64& rng, const GenConfig& cfg, int n) {
  std::uniform_int_distribution<int> pick(cfg.first_noise(), cfg.vocab_size - 1);
  TokenSeq out(n);
  for (auto& t : out) t = pick(rng);
  return out;
}

Example build_example(const Chain& c, const std::vector<Document>& corpus,
                      const GenConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Example ex;
  const int k0 = cfg.first_key(), r0 = cfg.first_relation();
  ex.query.push_back(k0 + c.keys[0]);
  for (int r : c.rels) ex.query.push_back(r0 + r);
  const auto tail = noise(rng, cfg, cfg.query_noise);
  ex.query.insert(ex.query.end(), tail.begin(), tail.end());
  for (int h = 0; h < cfg.hops; ++h) {
    ex.segments.push_back({k0 + c.keys[h], r0 + c.rels[h], k0 + c.keys[h + 1]});
  }
  ex.positive = corpus[c.keys.back()].tokens;
  for (int h = 0; h < cfg.hops; ++h) ex.hard_negatives.push_back(corpus[c.keys[h]].tokens);
  ex.meta.hops = cfg.hops;
  for (int k : c.keys) ex.meta.chain_keys.push_back(k0 + k);
  for (int r : c.rels) ex.meta.relations.push_back(r0 + r);
  ex.meta.positive_doc = c.keys.back();
  ex.meta.hard_negative_docs.assign(c.keys.begin(), c.keys.end() - 1);
  return ex;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ splitmix64(stream)) + index);
}

Dataset gen_multihop(const GenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const int K = cfg.n_keys, R = cfg.n_relations, H = cfg.hops;

  // succ[r][k] != k, so every link moves to another key.
  std::vector<std::vector<int>> succ(R, std::vector<int>(K));
  std::uniform_int_distribution<int> other(0, K - 2);
  for (auto& table : succ) {
    for (int k = 0; k < K; ++k) {
      const int s = other(rng);
      table[k] = s >= k ? s + 1 : s;
    }
  }

  double tuples = K;
  for (int h = 0; h < H; ++h) tuples *= R;
  if (tuples > 5e7) throw std::invalid_argument("gen config: chain space too large to enumerate");

  std::vector<Chain> chains;
  std::vector<int> rels(H, 0);
  for (int k = 0; k < K; ++k) {
    std::fill(rels.begin(), rels.end(), 0);
    while (true) {
      Chain c{{k}, rels};
      bool distinct = true;
      for (int h = 0; h < H && distinct; ++h) {
        const int next = succ[rels[h]][c.keys.back()];
        distinct = std::find(c.keys.begin(), c.keys.end(), next) == c.keys.end();
        c.keys.push_back(next);
      }
      if (distinct) chains.push_back(std::move(c));
      int pos = H - 1;
      while (pos >= 0 && ++rels[pos] == R) rels[pos--] = 0;
      if (pos < 0) break;
    }
  }
  std::shuffle(chains.begin(), chains.end(), rng);
  if (static_cast<std::size_t>(cfg.n_train) > chains.size()) {
    throw std::invalid_argument("gen config: only " + std::to_string(chains.size()) +
                                " collision-free chains for " +
                                std::to_string(cfg.n_train) + " training examples");
  }

  Dataset ds;
  ds.config = cfg;
  std::set<TokenSeq> seen;
  for (int k = 0; k < K; ++k) {
    TokenSeq doc{cfg.first_key() + k};
    const auto tail = noise(rng, cfg, cfg.doc_noise);
    doc.insert(doc.end(), tail.begin(), tail.end());
    seen.insert(doc);
    ds.corpus.push_back({k, std::move(doc)});
  }
  for (int id = K; id < cfg.corpus_size;) {
    auto doc = noise(rng, cfg, cfg.doc_noise + 1);
    if (!seen.insert(doc).second) continue;
    ds.corpus.push_back({id++, std::move(doc)});
  }

  std::set<Link> train_links;
  std::size_t next = 0;
  for (; next < static_cast<std::size_t>(cfg.n_train); ++next) {
    const auto& c = chains[next];
    for (int h = 0; h < H; ++h) train_links.insert({c.keys[h], c.rels[h]});
    ds.train.push_back(build_example(c, ds.corpus, cfg, derive_seed(cfg.seed, 1, next)));
  }
  // Held-out chains are composed only of links seen during training. A
  // single-hop chain is one link, so there the filter is skipped.
  for (; next < chains.size() && ds.eval.size() < static_cast<std::size_t>(cfg.n_eval);
       ++next) {
    const auto& c = chains[next];
    bool covered = true;
    for (int h = 0; h < H && covered && H > 1; ++h) {
      covered = train_links.count({c.keys[h], c.rels[h]}) > 0;
    }
    if (!covered) continue;
    ds.eval.push_back(build_example(c, ds.corpus, cfg, derive_seed(cfg.seed, 2, next)));
  }
  if (ds.eval.size() < static_cast<std::size_t>(cfg.n_eval)) {
    throw std::invalid_argument("gen config: only " + std::to_string(ds.eval.size()) +
                                " held-out chains with training-covered links for " +
                                std::to_string(cfg.n_eval) + " eval examples");
  }
  return ds;
}

std::string check_ground_truth(const Example& ex, const GenConfig& cfg) {
  const int H = ex.meta.hops;
  if (ex.segments.empty()) return "no rationale segments";
  if (static_cast<int>(ex.segments.size()) != H) return "segment count differs from hop count";
  if (static_cast<int>(ex.meta.chain_keys.size()) != H + 1) return "chain length mismatch";
  const int final_key = ex.meta.chain_keys.back();
  auto contains = [](const TokenSeq& s, int t) {
    return std::find(s.begin(), s.end(), t) != s.end();
  };
  if (!contains(ex.positive, final_key)) return "final key missing from positive";
  if (!contains(ex.segments.back(), final_key)) return "final key missing from last segment";
  if (contains(ex.query, final_key)) return "final key leaks into query";
  for (int h = 0; h < H; ++h) {
    const TokenSeq link{ex.meta.chain_keys[h], ex.meta.relations[h], ex.meta.chain_keys[h + 1]};
    if (ex.segments[h] != link) return "segment " + std::to_string(h) + " is not a chain link";
  }
  for (const auto& neg : ex.hard_negatives) {
    if (neg == ex.positive) return "hard negative equals positive";
  }
  const int explicit_len = 2 + static_cast<int>(ex.query.size()) + 3 * H;
  if (explicit_len > cfg.max_seq_len) return "explicit sequence exceeds budget";
  if (static_cast<int>(ex.positive.size()) + 2 > cfg.max_seq_len) return "positive exceeds budget";
  return {};
}

std::vector<int> symbolic_solve(const std::vector<Example>& train,
                                const std::vector<Document>& corpus,
                                const std::vector<Example>& queries,
                                const GenConfig& cfg) {
  std::map<Link, int> links;
  for (const auto& ex : train) {
    for (const auto& seg : ex.segments) {
      if (seg.size() == 3) links[{seg[0], seg[1]}] = seg[2];
    }
  }
  std::map<int, int> doc_of_key;
  for (const auto& d : corpus) {
    for (int t : d.tokens) {
      if (cfg.is_key(t)) doc_of_key.emplace(t, d.doc_id);
    }
  }
  std::vector<int> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    int key = -1;
    bool ok = true;
    for (int t : q.query) {
      if (cfg.is_key(t)) {
        key = t;
      } else if (cfg.is_relation(t)) {
        auto it = links.find({key, t});
        if (it == links.end()) {
          ok = false;
          break;
        }
        key = it->second;
      }
    }
    auto doc = doc_of_key.find(key);
    out.push_back(ok && doc != doc_of_key.end() ? doc->second : -1);
  }
  return out;
}

bool chains_disjoint(const std::vector<Example>& a, const std::vector<Example>& b) {
  auto id = [](const Example& ex) {
    std::vector<int> v{ex.meta.chain_keys.empty() ? -1 : ex.meta.chain_keys.front()};
    v.insert(v.end(), ex.meta.relations.begin(), ex.meta.relations.end());
    return v;
  };
  std::set<std::vector<int>> seen;
  for (const auto& ex : a) seen.insert(id(ex));
  return std::none_of(b.begin(), b.end(), [&](const Example& ex) { return seen.count(id(ex)); });
}

Batch make_batch(const std::vector<Example>& data, std::span<const std::size_t> indices,
                 int hard_negs_per_query, std::mt19937_64& rng) {
  if (hard_negs_per_query < 0) throw std::invalid_argument("make_batch: negative hard negative count");
  std::set<std::size_t> used;
  for (auto i : indices) {
    if (i >= data.size()) throw std::out_of_range("make_batch: index " + std::to_string(i) + " out of range");
    if (!used.insert(i).second) throw std::invalid_argument("make_batch: duplicate index " + std::to_string(i));
  }

  Batch b;
  std::map<TokenSeq, std::size_t> slot;
  auto intern = [&](const TokenSeq& doc) {
    auto [it, fresh] = slot.emplace(doc, b.docs.size());
    if (fresh) b.docs.push_back(doc);
    return it->second;
  };
  std::set<TokenSeq> positives;
  std::uniform_int_distribution<std::size_t> any(0, data.empty() ? 0 : data.size() - 1);

  for (auto idx : indices) {
    if (positives.count(data[idx].positive)) {
      std::size_t replacement = idx;
      for (std::size_t tries = 0; tries < 64 * data.size(); ++tries) {
        const std::size_t c = any(rng);
        if (!used.count(c) && !positives.count(data[c].positive)) {
          replacement = c;
          break;
        }
      }
      if (replacement == idx) {
        b.dropped.push_back(idx);
        continue;
      }
      used.insert(replacement);
      b.resampled.emplace_back(idx, replacement);
      idx = replacement;
    }
    const Example& ex = data[idx];
    if (hard_negs_per_query > static_cast<int>(ex.hard_negatives.size())) {
      throw std::invalid_argument("make_batch: example " + std::to_string(idx) + " has only " +
                                  std::to_string(ex.hard_negatives.size()) + " hard negatives");
    }
    positives.insert(ex.positive);
    b.example_indices.push_back(idx);
    b.positive_index.push_back(intern(ex.positive));
    std::vector<std::size_t> order(ex.hard_negatives.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> negs;
    for (int h = 0; h < hard_negs_per_query; ++h) negs.push_back(intern(ex.hard_negatives[order[h]]));
    b.hard_negative_index.push_back(std::move(negs));
  }
  return b;
}

namespace {

json header(const char* kind, const GenConfig& cfg) {
  return {{"format", kDatasetFormat}, {"version", kDatasetVersion}, {"kind", kind},
          {"gen_config", cfg}};
}

json example_to_json(const Example& ex) {
  return {{"query", ex.query},
          {"segments", ex.segments},
          {"positive", ex.positive},
          {"hard_negatives", ex.hard_negatives},
          {"meta",
           {{"hops", ex.meta.hops},
            {"chain_keys", ex.meta.chain_keys},
            {"relations", ex.meta.relations},
            {"positive_doc", ex.meta.positive_doc},
            {"hard_negative_docs", ex.meta.hard_negative_docs}}}};
}

Example example_from_json(const json& j) {
  Example ex;
  j.at("query").get_to(ex.query);
  j.at("segments").get_to(ex.segments);
  j.at("positive").get_to(ex.positive);
  j.at("hard_negatives").get_to(ex.hard_negatives);
  const auto& m = j.at("meta");
  m.at("hops").get_to(ex.meta.hops);
  m.at("chain_keys").get_to(ex.meta.chain_keys);
  m.at("relations").get_to(ex.meta.relations);
  m.at("positive_doc").get_to(ex.meta.positive_doc);
  m.at("hard_negative_docs").get_to(ex.meta.hard_negative_docs);
  return ex;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

// Reads a JSONL file, validates the header and hands each record to `fn`.
template <typename Fn>
void read_jsonl(const std::filesystem::path& path, const char* kind, GenConfig* cfg, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const std::string where = path.string() + ":";
  std::string line;
  if (!std::getline(in, line)) throw DataFormatError(where + "1: missing header line");
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    throw DataFormatError(where + "1: malformed header: " + e.what());
  }
  if (!h.is_object() || h.value("format", "") != kDatasetFormat) {
    throw DataFormatError(where + "1: not a " + std::string(kDatasetFormat) + " file");
  }
  if (h.value("version", -1) != kDatasetVersion) {
    throw DataFormatError(where + "1: version mismatch (file " + h.value("version", json()).dump() +
                          ", supported " + std::to_string(kDatasetVersion) + ")");
  }
  if (h.value("kind", "") != kind) {
    throw DataFormatError(where + "1: expected " + std::string(kind) + " records, found " +
                          h.value("kind", std::string("none")));
  }
  if (cfg != nullptr) *cfg = h.at("gen_config").get<GenConfig>();
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      fn(json::parse(line));
    } catch (const json::exception& e) {
      throw DataFormatError(where + std::to_string(lineno) + ": malformed record (last good line " +
                            std::to_string(lineno - 1) + "): " + e.what());
    }
  }
}

}  // namespace

void save_examples(const std::filesystem::path& path, const std::vector<Example>& examples,
                   const GenConfig& cfg) {
  auto out = open_out(path);
  out << header("examples", cfg).dump() << '\n';
  for (const auto& ex : examples) out << example_to_json(ex).dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<Example> load_examples(const std::filesystem::path& path, GenConfig* cfg) {
  std::vector<Example> out;
  read_jsonl(path, "examples", cfg, [&](const json& j) { out.push_back(example_from_json(j)); });
  return out;
}

void save_corpus(const std::filesystem::path& path, const std::vector<Document>& corpus,
                 const GenConfig& cfg) {
  auto out = open_out(path);
  out << header("corpus", cfg).dump() << '\n';
  for (const auto& d : corpus) out << json{{"doc_id", d.doc_id}, {"tokens", d.tokens}}.dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<Document> load_corpus(const std::filesystem::path& path, GenConfig* cfg) {
  std::vector<Document> out;
  read_jsonl(path, "corpus", cfg, [&](const json& j) {
    out.push_back({j.at("doc_id").get<int>(), j.at("tokens").get<TokenSeq>()});
  });
  return out;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  save_examples(dir / "train.jsonl", ds.train, ds.config);
  save_examples(dir / "eval.jsonl", ds.eval, ds.config);
  save_corpus(dir / "corpus.jsonl", ds.corpus, ds.config);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.train = load_examples(dir / "train.jsonl", &ds.config);
  GenConfig other;
  ds.eval = load_examples(dir / "eval.jsonl", &other);
  if (!(other == ds.config)) throw DataFormatError("eval.jsonl was generated with a different config");
  ds.corpus = load_corpus(dir / "corpus.jsonl", &other);
  if (!(other == ds.config)) throw DataFormatError("corpus.jsonl was generated with a different config");
  return ds;
}

}  // namespace laser
