#include "laser/backbone.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace laser {

using ad::Matrix;
using ad::Parameter;
using ad::Tensor;

void BackboneConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid backbone config: " + what);
  };
  if (vocab_size < tokens::kNumSpecial)
    fail("vocab_size must be >= 4 (PAD, EOS, INSTR, SEG are reserved)");
  if (model_dim < 1) fail("model_dim must be positive");
  if (n_heads < 1) fail("n_heads must be positive");
  if (model_dim % n_heads != 0) fail("model_dim must be divisible by n_heads");
  if (n_layers < 0) fail("n_layers must be non-negative");
  if (!(mlp_mult > 0)) fail("mlp_mult must be positive");
  if (mlp_dim() < 1) fail("mlp_mult * model_dim rounds to zero");
  if (max_seq_len < 1) fail("max_seq_len must be positive");
}

std::size_t BackboneConfig::head_dim() const {
  return static_cast<std::size_t>(model_dim / n_heads);
}

std::size_t BackboneConfig::mlp_dim() const {
  return static_cast<std::size_t>(std::lround(mlp_mult * model_dim));
}

std::size_t BackboneConfig::parameter_count() const {
  const std::size_t v = vocab_size, m = model_dim, s = max_seq_len,
                    h = mlp_dim(), l = n_layers;
  return v * m + s * m + l * (2 * m + 4 * m * m + 2 * m * h) + m +
         (tie_lm_head ? 0 : m * v);
}

BackboneConfig BackboneConfig::micro() {
  BackboneConfig c;
  c.vocab_size = 24;
  c.model_dim = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.mlp_mult = 2.0;
  c.max_seq_len = 32;
  c.tie_lm_head = true;
  c.seed = 7;
  return c;
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim},
                     {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                     {"mlp_mult", c.mlp_mult},     {"max_seq_len", c.max_seq_len},
                     {"tie_lm_head", c.tie_lm_head}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  BackboneConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.model_dim = j.value("model_dim", d.model_dim);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.mlp_mult = j.value("mlp_mult", d.mlp_mult);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.tie_lm_head = j.value("tie_lm_head", d.tie_lm_head);
  c.seed = j.value("seed", d.seed);
}

// ---- Backbone -------------------------------------------------------------

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config) : config_(config) {
  config_.validate();
  const std::size_t v = config_.vocab_size, m = config_.model_dim,
                    s = config_.max_seq_len, h = config_.mlp_dim();
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto init = [&](const std::string& name, std::size_t r, std::size_t c,
                  double std) {
    Matrix<T> w(r, c);
    for (auto& x : w.data) x = static_cast<T>(std * normal(rng));
    return Parameter<T>(name, std::move(w));
  };
  auto ones = [](const std::string& name, std::size_t c) {
    return Parameter<T>(name, Matrix<T>(1, c, T(1)));
  };

  constexpr double kStd = 0.02;
  const double resid_std =
      config_.n_layers > 0 ? kStd / std::sqrt(2.0 * config_.n_layers) : kStd;

  tok_emb = init("tok_emb", v, m, kStd);
  pos_emb = init("pos_emb", s, m, kStd);
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Layer layer{ones(p + "attn_norm", m),
                init(p + "wq", m, m, kStd),
                init(p + "wk", m, m, kStd),
                init(p + "wv", m, m, kStd),
                init(p + "wo", m, m, resid_std),
                ones(p + "mlp_norm", m),
                init(p + "w_up", m, h, kStd),
                init(p + "w_down", h, m, resid_std)};
    layers.push_back(std::move(layer));
  }
  final_norm = ones("final_norm", m);
  if (!config_.tie_lm_head) lm_head = init("lm_head", m, v, kStd);
}

template <typename T>
std::vector<Parameter<T>*> Backbone<T>::parameters() {
  std::vector<Parameter<T>*> out{&tok_emb, &pos_emb};
  for (auto& l : layers) {
    for (auto* p : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm,
                    &l.w_up, &l.w_down})
      out.push_back(p);
  }
  out.push_back(&final_norm);
  if (lm_head) out.push_back(&*lm_head);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> Backbone<T>::parameters() const {
  auto mut = const_cast<Backbone<T>*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::size_t Backbone<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

template <typename T>
void Backbone<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

// ---- BackboneView ---------------------------------------------------------

template <typename T>
BackboneView<T>::BackboneView(ad::Graph<T>& graph, Backbone<T>& backbone)
    : graph_(&graph), backbone_(&backbone) {
  bind(backbone);
}

template <typename T>
BackboneView<T>::BackboneView(ad::Graph<T>& graph, const Backbone<T>& backbone)
    : graph_(&graph), backbone_(&backbone) {
  bind(backbone);
}

template <typename T>
template <typename B>
void BackboneView<T>::bind(B& b) {
  auto& g = *graph_;
  tok_emb_ = g.param(b.tok_emb);
  pos_emb_ = g.param(b.pos_emb);
  for (auto& l : b.layers) {
    layers_.push_back({g.param(l.attn_norm), g.param(l.wq), g.param(l.wk),
                       g.param(l.wv), g.param(l.wo), g.param(l.mlp_norm),
                       g.param(l.w_up), g.param(l.w_down)});
  }
  final_norm_ = g.param(b.final_norm);
  if (b.lm_head) lm_head_ = g.param(*b.lm_head);
}

template <typename T>
Tensor<T> BackboneView<T>::embed_tokens(std::span<const int> ids) {
  return ad::gather_rows(tok_emb_, ids);
}

template <typename T>
Tensor<T> BackboneView<T>::forward(const Tensor<T>& x) {
  AttnCache<T> cache;
  return forward(x, cache);
}

template <typename T>
Tensor<T> BackboneView<T>::forward(const Tensor<T>& x, AttnCache<T>& cache) {
  const auto& cfg = config();
  const std::size_t m = cfg.model_dim;
  const std::size_t len = x.rows();
  const std::size_t offset = cache.cached_len;
  if (x.cols() != m) {
    throw ad::ShapeError("forward: input has " + std::to_string(x.cols()) +
                         " columns, model_dim is " + std::to_string(m));
  }
  if (offset + len > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw std::length_error("sequence overflow: " + std::to_string(offset) +
                            " cached + " + std::to_string(len) +
                            " new positions exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
  }
  if (cache.keys.empty()) {
    cache.keys.resize(layers_.size());
    cache.values.resize(layers_.size());
  }

  const std::size_t hd = cfg.head_dim();
  const T attn_scale = T(1) / std::sqrt(static_cast<T>(hd));
  constexpr T kEps = T(1e-6);

  Tensor<T> h = ad::add(x, ad::slice_rows(pos_emb_, offset, offset + len));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& lw = layers_[l];
    auto normed = ad::rms_norm(h, lw.attn_norm, kEps);
    auto q = ad::matmul(normed, lw.wq);
    auto k = ad::matmul(normed, lw.wk);
    auto v = ad::matmul(normed, lw.wv);
    if (cache.keys[l].valid()) {
      k = ad::concat_rows({cache.keys[l], k});
      v = ad::concat_rows({cache.values[l], v});
    }
    cache.keys[l] = k;
    cache.values[l] = v;

    std::vector<Tensor<T>> heads;
    heads.reserve(cfg.n_heads);
    for (int hi = 0; hi < cfg.n_heads; ++hi) {
      const std::size_t c0 = hi * hd, c1 = c0 + hd;
      auto qh = ad::slice_cols(q, c0, c1);
      auto kh = ad::slice_cols(k, c0, c1);
      auto vh = ad::slice_cols(v, c0, c1);
      auto weights =
          ad::causal_softmax_rows(ad::matmul_nt(qh, kh), offset, attn_scale);
      heads.push_back(ad::matmul(weights, vh));
    }
    auto attn = heads.size() == 1 ? heads.front()
                                  : ad::concat_cols<T>(heads);
    h = ad::add(h, ad::matmul(attn, lw.wo));

    auto mlp_in = ad::rms_norm(h, lw.mlp_norm, kEps);
    h = ad::add(h, ad::matmul(ad::silu(ad::matmul(mlp_in, lw.w_up)), lw.w_down));
  }
  cache.cached_len = offset + len;
  return ad::rms_norm(h, final_norm_, kEps);
}

template <typename T>
Tensor<T> BackboneView<T>::lm_logits(const Tensor<T>& h) {
  const std::size_t m = config().model_dim;
  if (h.cols() != m) {
    throw ad::ShapeError("lm_logits: hidden has " + std::to_string(h.cols()) +
                         " columns, model_dim is " + std::to_string(m));
  }
  if (lm_head_.valid()) return ad::matmul(h, lm_head_);
  return ad::matmul_nt(h, tok_emb_);
}

template class Backbone<float>;
template class Backbone<double>;
template class BackboneView<float>;
template class BackboneView<double>;

}  // namespace laser
