#pragma once

// Tiny pre-norm causal transformer shared by every encoding pathway.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "laser/autodiff.hpp"

namespace laser {

namespace tokens {
inline constexpr int kPad = 0;
inline constexpr int kEos = 1;
inline constexpr int kInstr = 2;
inline constexpr int kSeg = 3;
inline constexpr int kNumSpecial = 4;
}  // namespace tokens

struct BackboneConfig {
  int vocab_size = 512;
  int model_dim = 64;
  int n_layers = 4;
  int n_heads = 4;
  double mlp_mult = 4.0;
  int max_seq_len = 128;
  bool tie_lm_head = true;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  std::size_t head_dim() const;
  std::size_t mlp_dim() const;
  // Closed form: token + position tables, per-layer norms and projections,
  // final norm, and the LM head unless tied.
  std::size_t parameter_count() const;

  // m=8, one layer; used by the gradient audit.
  static BackboneConfig micro();

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

template <typename T>
class Backbone {
 public:
  struct Layer {
    ad::Parameter<T> attn_norm;
    ad::Parameter<T> wq, wk, wv, wo;
    ad::Parameter<T> mlp_norm;
    ad::Parameter<T> w_up, w_down;
  };

  // Deterministic initialization from config.seed: N(0, 0.02) for
  // projections and tables, output projections further scaled by
  // 1/sqrt(2 * n_layers), norm gains at 1.
  explicit Backbone(const BackboneConfig& config);

  const BackboneConfig& config() const { return config_; }

  // Stable order; names are unique and used by checkpoints.
  std::vector<ad::Parameter<T>*> parameters();
  std::vector<const ad::Parameter<T>*> parameters() const;
  std::size_t parameter_count() const;

  void zero_grad();

  // Same architecture and values in another precision.
  template <typename U>
  Backbone<U> cast() const {
    Backbone<U> out(config_);
    auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      for (std::size_t k = 0; k < src[i]->value.data.size(); ++k)
        dst[i]->value.data[k] = static_cast<U>(src[i]->value.data[k]);
    }
    return out;
  }

  ad::Parameter<T> tok_emb;  // |V| x m
  ad::Parameter<T> pos_emb;  // max_seq_len x m
  std::vector<Layer> layers;
  ad::Parameter<T> final_norm;
  std::optional<ad::Parameter<T>> lm_head;  // m x |V|, absent when tied

 private:
  BackboneConfig config_;
};

// Per-layer key/value rows of every position processed so far.
template <typename T>
struct AttnCache {
  std::vector<ad::Tensor<T>> keys;
  std::vector<ad::Tensor<T>> values;
  std::size_t cached_len = 0;
};

// A backbone bound into one graph. Binding a mutable backbone makes its
// parameters trainable leaves; binding a const one yields read-only leaves.
template <typename T>
class BackboneView {
 public:
  BackboneView(ad::Graph<T>& graph, Backbone<T>& backbone);
  BackboneView(ad::Graph<T>& graph, const Backbone<T>& backbone);

  ad::Tensor<T> embed_tokens(std::span<const int> ids);

  // Runs rows of `x` (input embeddings, positions not yet added) through the
  // stack, continuing after whatever `cache` already holds. Returns the
  // final-normed hidden state of each new row.
  ad::Tensor<T> forward(const ad::Tensor<T>& x, AttnCache<T>& cache);
  ad::Tensor<T> forward(const ad::Tensor<T>& x);

  ad::Tensor<T> lm_logits(const ad::Tensor<T>& h);

  ad::Tensor<T> embedding_table() const { return tok_emb_; }
  const BackboneConfig& config() const { return backbone_->config(); }
  ad::Graph<T>& graph() const { return *graph_; }

 private:
  struct LayerView {
    ad::Tensor<T> attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down;
  };
  template <typename B>
  void bind(B& backbone);

  ad::Graph<T>* graph_;
  const Backbone<T>* backbone_;
  ad::Tensor<T> tok_emb_, pos_emb_, final_norm_, lm_head_;
  std::vector<LayerView> layers_;
};

}  // namespace laser
