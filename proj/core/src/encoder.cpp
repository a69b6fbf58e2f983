#include "laser/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <thread>

namespace laser {

using ad::Graph;
using ad::Matrix;
using ad::Tensor;

std::string to_string(EncodeKind kind) {
  switch (kind) {
    case EncodeKind::kPlain:
      return "plain";
    case EncodeKind::kLatent:
      return "latent";
    case EncodeKind::kExplicit:
      return "explicit";
  }
  return "?";
}

EncodeKind encode_kind_from_string(const std::string& s) {
  if (s == "plain") return EncodeKind::kPlain;
  if (s == "latent") return EncodeKind::kLatent;
  if (s == "explicit") return EncodeKind::kExplicit;
  throw std::invalid_argument("unknown encode mode '" + s +
                              "' (expected plain, latent or explicit)");
}

void EncodeMode::validate() const {
  if (kind == EncodeKind::kLatent && K < 1) {
    throw std::invalid_argument("latent mode needs K >= 1 (use plain for K=0)");
  }
}

std::size_t encoded_length(std::size_t len, const EncodeMode& mode) {
  switch (mode.kind) {
    case EncodeKind::kPlain:
      return len + 2;
    case EncodeKind::kLatent:
      return len + 1 + static_cast<std::size_t>(std::max(mode.K, 0));
    case EncodeKind::kExplicit:
      break;
  }
  throw std::invalid_argument("encoded_length: explicit mode depends on the rationale");
}

template <typename T>
Tensor<T> soft_token(const Tensor<T>& logits, const Tensor<T>& embeddings,
                     T temperature) {
  if (!logits.value().all_finite()) {
    throw std::domain_error("soft_token: non-finite logits");
  }
  auto p = ad::softmax_rows(logits, temperature);
  return ad::matmul(p, embeddings);
}

namespace {

TokenSeq with_instruction(std::span<const int> ids) {
  TokenSeq seq;
  seq.reserve(ids.size() + 2);
  seq.push_back(tokens::kInstr);
  seq.insert(seq.end(), ids.begin(), ids.end());
  return seq;
}

void require_fits(std::size_t needed, std::size_t budget, const char* what) {
  if (needed > budget) {
    throw std::length_error(std::string(what) + ": sequence of " +
                            std::to_string(needed) +
                            " positions exceeds budget " +
                            std::to_string(budget));
  }
}

}  // namespace

template <typename T>
LatentEncoding<T> encode_latent(BackboneView<T>& b, std::span<const int> ids,
                                int K, const LatentOptions& opts) {
  if (K < 1) {
    throw std::invalid_argument("encode_latent: K must be >= 1 (use encode_plain)");
  }
  const auto seq = with_instruction(ids);
  require_fits(seq.size() + K, b.config().max_seq_len, "encode_latent");

  const T temperature = static_cast<T>(opts.soft_temperature);
  auto table = b.embedding_table();
  auto prefix = b.embed_tokens(seq);

  std::vector<Tensor<T>> states;
  std::vector<Tensor<T>> soft;
  states.reserve(K);
  soft.reserve(K);

  if (!opts.recompute) {
    AttnCache<T> cache;
    auto hidden = b.forward(prefix, cache);
    auto last = ad::slice_rows(hidden, hidden.rows() - 1, hidden.rows());
    for (int j = 0; j < K; ++j) {
      auto t = soft_token(b.lm_logits(last), table, temperature);
      soft.push_back(t);
      last = b.forward(t, cache);
      states.push_back(last);
    }
  } else {
    std::vector<Tensor<T>> inputs{prefix};
    auto hidden = b.forward(prefix);
    auto last = ad::slice_rows(hidden, hidden.rows() - 1, hidden.rows());
    for (int j = 0; j < K; ++j) {
      auto t = soft_token(b.lm_logits(last), table, temperature);
      soft.push_back(t);
      inputs.push_back(t);
      hidden = b.forward(ad::concat_rows<T>(inputs));
      last = ad::slice_rows(hidden, hidden.rows() - 1, hidden.rows());
      states.push_back(last);
    }
  }

  LatentEncoding<T> out;
  out.K = K;
  out.trajectory = ad::concat_rows<T>(states);
  out.soft_tokens = ad::concat_rows<T>(soft);
  out.v = ad::l2_normalize_rows(ad::mean_rows(out.trajectory));
  return out;
}

template <typename T>
ExplicitEncoding<T> encode_explicit(BackboneView<T>& b,
                                    std::span<const int> query,
                                    const std::vector<TokenSeq>& segments,
                                    std::size_t max_len) {
  if (segments.empty()) {
    throw std::invalid_argument("encode_explicit: at least one segment required");
  }
  auto seq = with_instruction(query);
  std::vector<std::size_t> ends;
  ends.reserve(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (segments[i].empty()) {
      throw std::invalid_argument("encode_explicit: segment " +
                                  std::to_string(i) + " is empty");
    }
    seq.insert(seq.end(), segments[i].begin(), segments[i].end());
    ends.push_back(seq.size() - 1);
  }
  seq.push_back(tokens::kEos);
  const std::size_t budget =
      max_len == 0 ? static_cast<std::size_t>(b.config().max_seq_len)
                   : std::min<std::size_t>(max_len, b.config().max_seq_len);
  require_fits(seq.size(), budget, "encode_explicit");

  auto hidden = b.forward(b.embed_tokens(seq));
  ExplicitEncoding<T> out;
  out.M = static_cast<int>(segments.size());
  out.segment_states = ad::select_rows<T>(hidden, ends);
  out.v_star = ad::l2_normalize_rows(
      ad::slice_rows(hidden, hidden.rows() - 1, hidden.rows()));
  return out;
}

template <typename T>
Tensor<T> encode_plain(BackboneView<T>& b, std::span<const int> ids) {
  auto seq = with_instruction(ids);
  seq.push_back(tokens::kEos);
  require_fits(seq.size(), b.config().max_seq_len, "encode_plain");
  auto hidden = b.forward(b.embed_tokens(seq));
  return ad::l2_normalize_rows(
      ad::slice_rows(hidden, hidden.rows() - 1, hidden.rows()));
}

template <typename T>
Tensor<T> encode_with_mode(BackboneView<T>& b, std::span<const int> ids,
                           const EncodeMode& mode, const LatentOptions& opts) {
  mode.validate();
  switch (mode.kind) {
    case EncodeKind::kPlain:
      return encode_plain(b, ids);
    case EncodeKind::kLatent:
      return encode_latent(b, ids, mode.K, opts).v;
    case EncodeKind::kExplicit:
      break;
  }
  throw std::invalid_argument("explicit mode needs a rationale; use encode_explicit");
}

unsigned default_workers() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("LASER_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return std::min<unsigned>(static_cast<unsigned>(v), hw);
  }
  return hw;
}

template <typename T>
Matrix<T> encode_corpus(const Backbone<T>& b, const std::vector<TokenSeq>& docs,
                        const EncodeMode& mode, unsigned workers,
                        const LatentOptions& opts) {
  mode.validate();
  if (mode.kind == EncodeKind::kExplicit) {
    throw std::invalid_argument("encode_corpus: mode must be plain or latent");
  }
  const std::size_t budget = b.config().max_seq_len;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (encoded_length(docs[i].size(), mode) > budget) {
      throw std::length_error("encode_corpus: document " + std::to_string(i) +
                              " needs " +
                              std::to_string(encoded_length(docs[i].size(), mode)) +
                              " positions, max_seq_len is " +
                              std::to_string(budget));
    }
  }

  const std::size_t m = b.config().model_dim;
  Matrix<T> out(docs.size(), m);
  auto run_shard = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Graph<T> g;
      BackboneView<T> view(g, b);
      auto v = encode_with_mode(view, docs[i], mode, opts);
      std::copy(v.value().data.begin(), v.value().data.end(),
                out.row(i).begin());
    }
  };

  if (workers == 0) workers = default_workers();
  workers = static_cast<unsigned>(
      std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(docs.size(), 1)));
  if (workers == 1) {
    run_shard(0, docs.size());
    return out;
  }
  {
    std::vector<std::jthread> pool;
    const std::size_t per = (docs.size() + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t begin = std::min(docs.size(), w * per);
      const std::size_t end = std::min(docs.size(), begin + per);
      if (begin < end) pool.emplace_back(run_shard, begin, end);
    }
  }
  return out;
}

#define LASER_ENC_INSTANTIATE(T)                                              \
  template Tensor<T> soft_token(const Tensor<T>&, const Tensor<T>&, T);       \
  template LatentEncoding<T> encode_latent(BackboneView<T>&,                  \
                                           std::span<const int>, int,         \
                                           const LatentOptions&);             \
  template ExplicitEncoding<T> encode_explicit(                               \
      BackboneView<T>&, std::span<const int>, const std::vector<TokenSeq>&,   \
      std::size_t);                                                           \
  template Tensor<T> encode_plain(BackboneView<T>&, std::span<const int>);    \
  template Tensor<T> encode_with_mode(BackboneView<T>&, std::span<const int>, \
                                      const EncodeMode&, const LatentOptions&); \
  template Matrix<T> encode_corpus(const Backbone<T>&,                        \
                                   const std::vector<TokenSeq>&,              \
                                   const EncodeMode&, unsigned,               \
                                   const LatentOptions&);

LASER_ENC_INSTANTIATE(float)
LASER_ENC_INSTANTIATE(double)

#undef LASER_ENC_INSTANTIATE

}  // namespace laser
