#include "laser/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <thread>

namespace laser {

using ad::Graph;
using ad::Matrix;
using nlohmann::json;

namespace {

void check_args(std::span<const int> ranking, int k) {
  if (k < 0) throw std::invalid_argument("metric cutoff k must be >= 1");
  std::set<int> seen;
  for (int id : ranking) {
    if (!seen.insert(id).second) {
      throw std::invalid_argument("ranking contains doc id " + std::to_string(id) + " twice");
    }
  }
}

std::size_t cutoff(std::span<const int> ranking, int k) {
  return std::min(ranking.size(), static_cast<std::size_t>(k));
}

// Runs fn(i) for i in [0, n) over contiguous shards.
template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
  if (workers == 0) workers = default_workers();
  workers = static_cast<unsigned>(std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t per = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    const std::size_t begin = std::min(n, w * per), end = std::min(n, begin + per);
    if (begin < end) {
      pool.emplace_back([&fn, begin, end] {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      });
    }
  }
}

}  // namespace

double ndcg_at_k(std::span<const int> ranking, const Relevance& relevant, int k) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  check_args(ranking, k);
  if (relevant.empty()) return 0.0;
  double dcg = 0;
  const auto n = cutoff(ranking, k);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = relevant.find(ranking[i]);
    if (it != relevant.end()) dcg += it->second / std::log2(static_cast<double>(i) + 2);
  }
  std::vector<double> gains;
  for (const auto& [id, g] : relevant) gains.push_back(g);
  std::sort(gains.begin(), gains.end(), std::greater<>());
  double ideal = 0;
  for (std::size_t i = 0; i < gains.size() && i < static_cast<std::size_t>(k); ++i) {
    ideal += gains[i] / std::log2(static_cast<double>(i) + 2);
  }
  return ideal > 0 ? dcg / ideal : 0.0;
}

double recall_at_k(std::span<const int> ranking, const Relevance& relevant, int k) {
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  check_args(ranking, k);
  if (relevant.empty()) return 0.0;
  const auto n = cutoff(ranking, k);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) hits += relevant.count(ranking[i]);
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

double mrr(std::span<const int> ranking, const Relevance& relevant, int k) {
  if (k < 0) throw std::invalid_argument("mrr: k must be >= 1 (or 0 for no cutoff)");
  check_args(ranking, k);
  const auto n = k == 0 ? ranking.size() : cutoff(ranking, k);
  for (std::size_t i = 0; i < n; ++i) {
    if (relevant.count(ranking[i])) return 1.0 / static_cast<double>(i + 1);
  }
  return 0.0;
}

CorpusIndex build_index(const Backbone<float>& model, const std::vector<Document>& corpus,
                        const EncodeMode& doc_mode, unsigned workers) {
  std::vector<TokenSeq> docs;
  CorpusIndex index;
  index.doc_mode = doc_mode;
  for (const auto& d : corpus) {
    docs.push_back(d.tokens);
    index.doc_ids.push_back(d.doc_id);
  }
  index.vectors = encode_corpus(model, docs, doc_mode, workers);
  return index;
}

std::vector<int> rank_documents(const CorpusIndex& index, std::span<const float> query) {
  const auto& V = index.vectors;
  if (query.size() != V.cols) {
    throw ad::ShapeError("query has dimension " + std::to_string(query.size()) + ", index " +
                         std::to_string(V.cols));
  }
  std::vector<float> scores(V.rows);
  for (std::size_t r = 0; r < V.rows; ++r) {
    float s = 0;
    const float* row = V.data.data() + r * V.cols;
    for (std::size_t c = 0; c < V.cols; ++c) s += row[c] * query[c];
    scores[r] = s;
  }
  std::vector<std::size_t> order(V.rows);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return index.doc_ids[a] < index.doc_ids[b];
  });
  std::vector<int> ids(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) ids[i] = index.doc_ids[order[i]];
  return ids;
}

std::string QueryMode::label() const {
  return kind == EncodeKind::kLatent ? "latent(K=" + std::to_string(K_infer) + ")" : to_string(kind);
}

Relevance relevance_of(const Example& ex) { return {{ex.meta.positive_doc, 1.0}}; }

std::vector<float> encode_query(const Backbone<float>& model, const Example& ex,
                                const QueryMode& mode) {
  Graph<float> g;
  BackboneView<float> view(g, model);
  ad::Tensor<float> v;
  switch (mode.kind) {
    case EncodeKind::kPlain:
      v = encode_plain(view, ex.query);
      break;
    case EncodeKind::kLatent:
      v = encode_latent(view, ex.query, mode.K_infer).v;
      break;
    case EncodeKind::kExplicit:
      v = encode_explicit(view, ex.query, ex.segments).v_star;
      break;
  }
  return v.value().data;
}

EvalResult evaluate(const Backbone<float>& model, const std::vector<Example>& queries,
                    const CorpusIndex& index, const QueryMode& mode, unsigned workers) {
  if (mode.kind == EncodeKind::kLatent && mode.K_infer < 1) {
    throw std::invalid_argument("evaluate: K_infer must be >= 1 in latent mode");
  }
  struct Slot {
    bool ok = false;
    std::vector<int> ranking;
  };
  std::vector<Slot> slots(queries.size());
  parallel_for(queries.size(), workers, [&](std::size_t i) {
    try {
      const auto q = encode_query(model, queries[i], mode);
      slots[i].ranking = rank_documents(index, q);
      slots[i].ok = true;
    } catch (const std::length_error&) {
      slots[i].ok = false;
    }
  });

  EvalResult r;
  r.mode = mode;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (!slots[i].ok) {
      r.skipped.push_back(i);
      continue;
    }
    const auto& ranking = slots[i].ranking;
    const auto rel = relevance_of(queries[i]);
    r.ndcg_at_10 += ndcg_at_k(ranking, rel, 10);
    r.recall_at_1 += recall_at_k(ranking, rel, 1);
    r.recall_at_5 += recall_at_k(ranking, rel, 5);
    r.recall_at_10 += recall_at_k(ranking, rel, 10);
    r.mrr += mrr(ranking, rel);
    QueryRanking qr;
    qr.query = i;
    qr.positive_doc = queries[i].meta.positive_doc;
    const auto pos = std::find(ranking.begin(), ranking.end(), qr.positive_doc);
    qr.positive_rank = pos == ranking.end() ? 0 : static_cast<int>(pos - ranking.begin()) + 1;
    qr.top.assign(ranking.begin(), ranking.begin() + std::min<std::size_t>(10, ranking.size()));
    r.rankings.push_back(std::move(qr));
  }
  r.n_queries = r.rankings.size();
  if (r.n_queries > 0) {
    const double n = static_cast<double>(r.n_queries);
    r.ndcg_at_10 /= n;
    r.recall_at_1 /= n;
    r.recall_at_5 /= n;
    r.recall_at_10 /= n;
    r.mrr /= n;
  }
  return r;
}

void to_json(json& j, const EvalResult& r) {
  json rankings = json::array();
  for (const auto& q : r.rankings) {
    rankings.push_back({{"query", q.query},
                        {"positive_doc", q.positive_doc},
                        {"positive_rank", q.positive_rank},
                        {"top10", q.top}});
  }
  j = {{"format", "laser-eval"},
       {"version", 1},
       {"mode", to_string(r.mode.kind)},
       {"K_infer", r.mode.kind == EncodeKind::kLatent ? r.mode.K_infer : 0},
       {"ndcg_at_10", r.ndcg_at_10},
       {"recall_at_1", r.recall_at_1},
       {"recall_at_5", r.recall_at_5},
       {"recall_at_10", r.recall_at_10},
       {"mrr", r.mrr},
       {"n_queries", r.n_queries},
       {"skipped", r.skipped},
       {"rankings", rankings}};
}

TokenSeq greedy_decode(const Backbone<float>& model, std::span<const int> query, int R) {
  if (R < 0) throw std::invalid_argument("greedy_decode: R must be >= 0");
  const std::size_t needed = query.size() + static_cast<std::size_t>(R) + 2;
  if (needed > static_cast<std::size_t>(model.config().max_seq_len)) {
    throw std::length_error("explicit bench: query of " + std::to_string(query.size()) +
                            " tokens plus R=" + std::to_string(R) + " exceeds max_seq_len " +
                            std::to_string(model.config().max_seq_len));
  }
  Graph<float> g;
  BackboneView<float> view(g, model);
  TokenSeq prefix{tokens::kInstr};
  prefix.insert(prefix.end(), query.begin(), query.end());
  AttnCache<float> cache;
  auto h = view.forward(view.embed_tokens(prefix), cache);
  auto last = ad::slice_rows(h, h.rows() - 1, h.rows());
  TokenSeq out;
  out.reserve(R);
  for (int i = 0; i < R; ++i) {
    const auto& logits = view.lm_logits(last).value().data;
    const int next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.push_back(next);
    const int tok[] = {next};
    last = view.forward(view.embed_tokens(tok), cache);
  }
  return out;
}

const ModeTiming& LatencyReport::find(const std::string& mode, int steps) const {
  for (const auto& t : timings) {
    if (t.mode == mode && (mode == "plain" || t.steps == steps)) return t;
  }
  throw std::out_of_range("no timing for " + mode + " with " + std::to_string(steps) + " steps");
}

namespace {

template <typename Fn>
ModeTiming time_mode(const std::string& name, int steps, const std::vector<TokenSeq>& qs,
                     int warmup, double tokens_extra, Fn&& fn) {
  using clock = std::chrono::steady_clock;
  for (int w = 0; w < warmup && !qs.empty(); ++w) fn(qs[w % qs.size()]);
  std::vector<double> ms;
  double tokens = 0;
  for (const auto& q : qs) {
    const auto t0 = clock::now();
    fn(q);
    ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
    tokens += static_cast<double>(q.size()) + tokens_extra;
  }
  ModeTiming t;
  t.mode = name;
  t.steps = steps;
  t.samples = ms.size();
  if (ms.empty()) return t;
  t.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  t.median_ms = ms[ms.size() / 2];
  t.p95_ms = ms[std::min(ms.size() - 1, static_cast<std::size_t>(0.95 * static_cast<double>(ms.size())))];
  t.tokens_per_query = tokens / static_cast<double>(ms.size());
  return t;
}

}  // namespace

LatencyReport bench_latency(const Backbone<float>& model, const std::vector<TokenSeq>& queries,
                            const BenchConfig& cfg) {
  if (queries.empty()) throw std::invalid_argument("bench_latency: no queries");
  std::vector<TokenSeq> qs(queries.begin(),
                           queries.begin() + std::min<std::size_t>(queries.size(), cfg.max_queries));
  for (const auto& q : qs) {
    if (q.size() + static_cast<std::size_t>(cfg.rationale_tokens) + 2 >
        static_cast<std::size_t>(model.config().max_seq_len)) {
      throw std::length_error("bench_latency: R=" + std::to_string(cfg.rationale_tokens) +
                              " plus a " + std::to_string(q.size()) +
                              "-token query exceeds max_seq_len " +
                              std::to_string(model.config().max_seq_len));
    }
  }
  auto run_plain = [&](const TokenSeq& q) {
    Graph<float> g;
    BackboneView<float> view(g, model);
    return encode_plain(view, q).value().data[0];
  };
  auto run_latent = [&](int K) {
    return [&model, K](const TokenSeq& q) {
      Graph<float> g;
      BackboneView<float> view(g, model);
      return encode_latent(view, q, K).v.value().data[0];
    };
  };
  auto run_explicit = [&](const TokenSeq& q) {
    auto seq = q;
    const auto decoded = greedy_decode(model, q, cfg.rationale_tokens);
    seq.insert(seq.end(), decoded.begin(), decoded.end());
    Graph<float> g;
    BackboneView<float> view(g, model);
    return encode_plain(view, seq).value().data[0];
  };

  LatencyReport rep;
  rep.timings.push_back(time_mode("plain", 0, qs, cfg.warmup, 2, run_plain));
  for (int K : cfg.latent_K) rep.timings.push_back(time_mode("latent", K, qs, cfg.warmup, 1.0 + K, run_latent(K)));
  rep.timings.push_back(time_mode("explicit", cfg.rationale_tokens, qs, cfg.warmup,
                                  2.0 + 2.0 * cfg.rationale_tokens, run_explicit));
  auto has = [&](int K) { return std::find(cfg.latent_K.begin(), cfg.latent_K.end(), K) != cfg.latent_K.end(); };
  if (!has(cfg.primary_K)) {
    rep.timings.push_back(time_mode("latent", cfg.primary_K, qs, cfg.warmup, 1.0 + cfg.primary_K,
                                    run_latent(cfg.primary_K)));
  }
  const auto& latent = rep.find("latent", cfg.primary_K);
  rep.latent_over_plain = latent.mean_ms / rep.find("plain").mean_ms;
  rep.latent_over_explicit = latent.mean_ms / rep.find("explicit", cfg.rationale_tokens).mean_ms;
  return rep;
}

void to_json(json& j, const LatencyReport& r) {
  json timings = json::array();
  for (const auto& t : r.timings) {
    timings.push_back({{"mode", t.mode},
                       {"steps", t.steps},
                       {"samples", t.samples},
                       {"mean_ms", t.mean_ms},
                       {"median_ms", t.median_ms},
                       {"p95_ms", t.p95_ms},
                       {"tokens_per_query", t.tokens_per_query}});
  }
  j = {{"format", "laser-bench"},
       {"version", 1},
       {"timings", timings},
       {"latent_over_plain", r.latent_over_plain},
       {"latent_over_explicit", r.latent_over_explicit}};
}

namespace {
constexpr char kEmbMagic[8] = {'L', 'S', 'E', 'R', 'E', 'M', 'B', '1'};
}

void save_embeddings(const std::filesystem::path& path, const CorpusIndex& index) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto rows = static_cast<std::uint32_t>(index.vectors.rows);
  const auto dim = static_cast<std::uint32_t>(index.vectors.cols);
  out.write(kEmbMagic, sizeof(kEmbMagic));
  out.write(reinterpret_cast<const char*>(&rows), 4);
  out.write(reinterpret_cast<const char*>(&dim), 4);
  out.write(reinterpret_cast<const char*>(index.vectors.data.data()),
            static_cast<std::streamsize>(index.vectors.data.size() * sizeof(float)));
  for (int id : index.doc_ids) {
    const auto v = static_cast<std::int32_t>(id);
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

CorpusIndex load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kEmbMagic, 8) != 0) {
    throw std::runtime_error(path.string() + ": not an embedding dump");
  }
  std::uint32_t rows = 0, dim = 0;
  in.read(reinterpret_cast<char*>(&rows), 4);
  in.read(reinterpret_cast<char*>(&dim), 4);
  CorpusIndex index;
  index.vectors = Matrix<float>(rows, dim);
  in.read(reinterpret_cast<char*>(index.vectors.data.data()),
          static_cast<std::streamsize>(index.vectors.data.size() * sizeof(float)));
  index.doc_ids.resize(rows);
  for (auto& id : index.doc_ids) {
    std::int32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    id = v;
  }
  if (!in) throw std::runtime_error(path.string() + ": truncated embedding dump");
  return index;
}

}  // namespace laser
