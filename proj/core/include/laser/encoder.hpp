#pragma once

// The three ways a token sequence becomes a unit vector:
//   plain    [INSTR; q; EOS], hidden state at EOS
//   latent   [INSTR; q] followed by K soft thinking tokens, mean of the K
//            thinking-step hidden states
//   explicit [INSTR; q; s_1; ...; s_M; EOS], hidden state at EOS plus the
//            state at the last token of every rationale segment

#include <span>
#include <string>
#include <vector>

#include "laser/autodiff.hpp"
#include "laser/backbone.hpp"

namespace laser {

using TokenSeq = std::vector<int>;

enum class EncodeKind { kPlain, kLatent, kExplicit };

std::string to_string(EncodeKind kind);
EncodeKind encode_kind_from_string(const std::string& s);

struct EncodeMode {
  EncodeKind kind = EncodeKind::kLatent;
  int K = 3;  // latent steps; ignored unless kind == kLatent

  static EncodeMode plain() { return {EncodeKind::kPlain, 0}; }
  static EncodeMode latent(int k) { return {EncodeKind::kLatent, k}; }
  void validate() const;
  friend bool operator==(const EncodeMode&, const EncodeMode&) = default;
};

template <typename T>
struct LatentEncoding {
  ad::Tensor<T> v;            // 1 x m, unit norm
  ad::Tensor<T> trajectory;   // K x m, h_1..h_K
  ad::Tensor<T> soft_tokens;  // K x m, t_1..t_K
  int K = 0;
};

template <typename T>
struct ExplicitEncoding {
  ad::Tensor<T> v_star;          // 1 x m, unit norm
  ad::Tensor<T> segment_states;  // M x m
  int M = 0;
};

struct LatentOptions {
  double soft_temperature = 1.0;
  // Recompute the full prefix at every thinking step instead of extending
  // the attention cache. Slower; exists as an equivalence oracle.
  bool recompute = false;
};

// softmax(logits / temperature) · E for each row of `logits`.
template <typename T>
ad::Tensor<T> soft_token(const ad::Tensor<T>& logits,
                         const ad::Tensor<T>& embeddings, T temperature);

template <typename T>
LatentEncoding<T> encode_latent(BackboneView<T>& b, std::span<const int> ids,
                                int K, const LatentOptions& opts = {});

// `max_len` bounds the whole explicit sequence; 0 means max_seq_len.
template <typename T>
ExplicitEncoding<T> encode_explicit(BackboneView<T>& b,
                                    std::span<const int> query,
                                    const std::vector<TokenSeq>& segments,
                                    std::size_t max_len = 0);

template <typename T>
ad::Tensor<T> encode_plain(BackboneView<T>& b, std::span<const int> ids);

// Encodes with `mode` (plain or latent) and returns the unit vector.
template <typename T>
ad::Tensor<T> encode_with_mode(BackboneView<T>& b, std::span<const int> ids,
                               const EncodeMode& mode,
                               const LatentOptions& opts = {});

// Total positions a sequence of `len` tokens occupies under `mode`.
std::size_t encoded_length(std::size_t len, const EncodeMode& mode);

// Row i is the unit encoding of docs[i]. Work is split into contiguous
// shards across `workers` threads (0: LASER_THREADS or hardware
// concurrency); the result does not depend on the worker count.
template <typename T>
ad::Matrix<T> encode_corpus(const Backbone<T>& b,
                            const std::vector<TokenSeq>& docs,
                            const EncodeMode& mode, unsigned workers = 0,
                            const LatentOptions& opts = {});

// Worker count from LASER_THREADS, capped by hardware concurrency.
unsigned default_workers();

}  // namespace laser
