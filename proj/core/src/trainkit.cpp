#include "laser/trainkit.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

namespace laser {

using ad::Graph;
using ad::Matrix;
using ad::Parameter;
using ad::Tensor;
using nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid train config: " + what);
  };
  if (!(lr > 0)) fail("lr must be positive");
  if (!(warmup_ratio >= 0 && warmup_ratio <= 1)) fail("warmup_ratio must lie in [0, 1]");
  if (epochs < 1 && max_steps < 1) fail("need epochs >= 1 or max_steps >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!disable_latent_view && K_train < 1) fail("K_train must be >= 1 unless the latent view is disabled");
  if (hard_negs_per_query < 0) fail("hard_negs_per_query must be >= 0");
  if (max_query_len < 1 || max_explicit_len < 1) fail("length budgets must be positive");
  if (doc_mode.kind == EncodeKind::kExplicit) fail("doc_mode must be plain or latent");
  if (!(kd_warmup_ratio >= 0 && kd_warmup_ratio <= 1)) fail("kd_warmup_ratio must lie in [0, 1]");
  weights.validate();
}

namespace {

json mode_to_json(const EncodeMode& m) { return {{"kind", to_string(m.kind)}, {"K", m.K}}; }

EncodeMode mode_from_json(const json& j) {
  return {encode_kind_from_string(j.at("kind").get<std::string>()), j.value("K", 0)};
}

}  // namespace

void to_json(json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"warmup_ratio", c.warmup_ratio},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"K_train", c.K_train},
       {"hard_negs_per_query", c.hard_negs_per_query},
       {"max_steps", c.max_steps},
       {"weights", c.weights},
       {"adamw",
        {{"beta1", c.adamw.beta1},
         {"beta2", c.adamw.beta2},
         {"eps", c.adamw.eps},
         {"weight_decay", c.adamw.weight_decay}}},
       {"disable_explicit_view", c.disable_explicit_view},
       {"disable_latent_view", c.disable_latent_view},
       {"disable_kd_out", c.disable_kd_out},
       {"disable_kd_mid", c.disable_kd_mid},
       {"detach_teacher", c.detach_teacher},
       {"kd_doc_gradient", c.kd_doc_gradient},
       {"kd_warmup_ratio", c.kd_warmup_ratio},
       {"seed", c.seed},
       {"doc_mode", mode_to_json(c.doc_mode)},
       {"max_query_len", c.max_query_len},
       {"max_explicit_len", c.max_explicit_len}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.warmup_ratio = j.value("warmup_ratio", d.warmup_ratio);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.K_train = j.value("K_train", d.K_train);
  c.hard_negs_per_query = j.value("hard_negs_per_query", d.hard_negs_per_query);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.weights = j.value("weights", d.weights);
  if (j.contains("adamw")) {
    const auto& a = j.at("adamw");
    c.adamw.beta1 = a.value("beta1", d.adamw.beta1);
    c.adamw.beta2 = a.value("beta2", d.adamw.beta2);
    c.adamw.eps = a.value("eps", d.adamw.eps);
    c.adamw.weight_decay = a.value("weight_decay", d.adamw.weight_decay);
  } else {
    c.adamw = d.adamw;
  }
  c.disable_explicit_view = j.value("disable_explicit_view", d.disable_explicit_view);
  c.disable_latent_view = j.value("disable_latent_view", d.disable_latent_view);
  c.disable_kd_out = j.value("disable_kd_out", d.disable_kd_out);
  c.disable_kd_mid = j.value("disable_kd_mid", d.disable_kd_mid);
  c.detach_teacher = j.value("detach_teacher", d.detach_teacher);
  c.kd_doc_gradient = j.value("kd_doc_gradient", d.kd_doc_gradient);
  c.kd_warmup_ratio = j.value("kd_warmup_ratio", d.kd_warmup_ratio);
  c.seed = j.value("seed", d.seed);
  c.doc_mode = j.contains("doc_mode") ? mode_from_json(j.at("doc_mode")) : d.doc_mode;
  c.max_query_len = j.value("max_query_len", d.max_query_len);
  c.max_explicit_len = j.value("max_explicit_len", d.max_explicit_len);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull:
      return "full";
    case Variant::kNoExplicitView:
      return "no_explicit_view";
    case Variant::kNoLatentView:
      return "no_latent_view";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::kFull;
  if (s == "no_explicit_view") return Variant::kNoExplicitView;
  if (s == "no_latent_view") return Variant::kNoLatentView;
  throw std::invalid_argument("unknown variant '" + s +
                              "' (expected full, no_explicit_view or no_latent_view)");
}

TrainConfig apply_variant(TrainConfig base, Variant v) {
  switch (v) {
    case Variant::kFull:
      break;
    case Variant::kNoExplicitView:
      base.disable_explicit_view = true;
      break;
    case Variant::kNoLatentView:
      base.disable_latent_view = true;
      base.disable_kd_out = true;
      base.disable_kd_mid = true;
      break;
  }
  return base;
}

OptimizerState OptimizerState::for_parameters(const std::vector<Parameter<float>*>& params,
                                              const AdamWConfig& hp) {
  OptimizerState s;
  s.hp = hp;
  for (const auto* p : params) {
    s.m.emplace_back(p->rows(), p->cols());
    s.v.emplace_back(p->rows(), p->cols());
  }
  return s;
}

void adamw_step(const std::vector<Parameter<float>*>& params, OptimizerState& opt, double lr) {
  if (params.size() != opt.m.size() || params.size() != opt.v.size()) {
    throw std::invalid_argument("adamw_step: optimizer state has " + std::to_string(opt.m.size()) +
                                " slots for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (opt.m[i].rows != p.rows() || opt.m[i].cols != p.cols()) {
      throw ad::ShapeError("adamw_step: moment shape mismatch for " + p.name);
    }
    if (p.requires_grad && !p.grad.all_finite()) {
      throw NonFiniteLoss("non-finite gradient in " + p.name);
    }
  }
  const auto& hp = opt.hp;
  opt.step += 1;
  const double t = static_cast<double>(opt.step);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.requires_grad) continue;
    auto& m = opt.m[i].data;
    auto& v = opt.v[i].data;
    for (std::size_t k = 0; k < p.value.data.size(); ++k) {
      const double g = p.grad.data[k];
      const double mk = hp.beta1 * m[k] + (1 - hp.beta1) * g;
      const double vk = hp.beta2 * v[k] + (1 - hp.beta2) * g * g;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      double w = p.value.data[k];
      w -= lr * hp.weight_decay * w;
      w -= lr * (mk / bc1) / (std::sqrt(vk / bc2) + hp.eps);
      p.value.data[k] = static_cast<float>(w);
    }
  }
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, double warmup_ratio,
                   double base_lr) {
  if (total_steps < 1) throw std::invalid_argument("lr_schedule: total_steps must be >= 1");
  if (step <= 0 || step >= total_steps) return 0.0;
  const double warm = warmup_ratio * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warm) return base_lr * s / warm;
  return base_lr * (static_cast<double>(total_steps) - s) /
         (static_cast<double>(total_steps) - warm);
}

template <typename T>
LossTerms<T> batch_losses(BackboneView<T>& view, const std::vector<Example>& data,
                          const Batch& batch, const TrainConfig& cfg) {
  const T tau = static_cast<T>(cfg.weights.tau);
  const T tau_kd = static_cast<T>(cfg.weights.tau_kd);

  std::vector<Tensor<T>> doc_rows;
  doc_rows.reserve(batch.docs.size());
  for (const auto& doc : batch.docs) doc_rows.push_back(encode_with_mode(view, doc, cfg.doc_mode));
  const auto docs = ad::concat_rows<T>(doc_rows);
  const CandidateSet<T> candidates{docs, batch.positive_index};

  std::vector<Tensor<T>> q_rows, teacher_rows, trajectories, segment_states;
  for (auto idx : batch.example_indices) {
    const Example& ex = data.at(idx);
    if (static_cast<int>(ex.query.size()) > cfg.max_query_len) {
      throw std::length_error("query of example " + std::to_string(idx) + " has " +
                              std::to_string(ex.query.size()) + " tokens, budget " +
                              std::to_string(cfg.max_query_len));
    }
    if (cfg.disable_latent_view) {
      q_rows.push_back(encode_plain(view, ex.query));
    } else {
      auto lat = encode_latent(view, ex.query, cfg.K_train);
      q_rows.push_back(lat.v);
      trajectories.push_back(lat.trajectory);
    }
    if (cfg.explicit_active()) {
      auto exp = encode_explicit(view, ex.query, ex.segments,
                                 static_cast<std::size_t>(cfg.max_explicit_len));
      teacher_rows.push_back(exp.v_star);
      segment_states.push_back(exp.segment_states);
    }
  }

  LossTerms<T> terms;
  const auto kd_docs = cfg.kd_doc_gradient ? docs : ad::detach(docs);
  const auto queries = ad::concat_rows<T>(q_rows);
  terms.cl_latent = info_nce(queries, candidates, tau);
  if (cfg.explicit_active()) {
    const auto teacher = ad::concat_rows<T>(teacher_rows);
    terms.cl_explicit = info_nce(teacher, candidates, tau);
    if (cfg.kd_active() && !cfg.disable_kd_out) {
      terms.kd_out = kd_output(teacher, queries, kd_docs, tau_kd, cfg.detach_teacher);
    }
    if (cfg.kd_active() && !cfg.disable_kd_mid) {
      Tensor<T> sum;
      for (std::size_t i = 0; i < trajectories.size(); ++i) {
        auto term = kd_trajectory(segment_states[i], trajectories[i], kd_docs, tau_kd,
                                  cfg.detach_teacher);
        sum = sum.valid() ? ad::add(sum, term) : term;
      }
      terms.kd_mid = ad::scale(sum, T(1) / static_cast<T>(trajectories.size()));
    }
  }
  return terms;
}

LossReport train_step(Backbone<float>& model, const std::vector<Example>& data,
                      const Batch& batch, const TrainConfig& cfg, OptimizerState& opt,
                      double lr) {
  Graph<float> g;
  BackboneView<float> view(g, model);
  LossTerms<float> terms;
  Tensor<float> total;
  try {
    terms = batch_losses(view, data, batch, cfg);
    total = total_loss(terms, cfg.weights);
  } catch (const std::domain_error& e) {
    throw NonFiniteLoss(std::string("step aborted: ") + e.what());
  }
  if (!std::isfinite(total.item())) throw NonFiniteLoss("step aborted: non-finite total loss");
  model.zero_grad();
  g.backward(total);
  auto params = model.parameters();
  try {
    adamw_step(params, opt, lr);
  } catch (const NonFiniteLoss& e) {
    model.zero_grad();
    throw NonFiniteLoss(std::string("step aborted: ") + e.what());
  }
  return make_report(terms, total);
}

void to_json(json& j, const LogEntry& e) {
  j = {{"step", e.step}, {"lr", e.lr}, {"loss", e.loss}, {"resampled", e.resampled}};
}

std::int64_t total_steps(const TrainConfig& cfg, std::size_t n_train) {
  if (cfg.max_steps > 0) return cfg.max_steps;
  const std::int64_t per_epoch =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(n_train) / cfg.batch_size);
  return per_epoch * cfg.epochs;
}

LossWeights weights_at(const TrainConfig& cfg, std::int64_t step, std::int64_t total) {
  LossWeights w = cfg.weights;
  const double ramp = cfg.kd_warmup_ratio * static_cast<double>(total);
  if (ramp > 0 && static_cast<double>(step) < ramp) {
    const double f = std::max(0.0, static_cast<double>(step)) / ramp;
    w.lambda2 *= f;
    w.lambda3 *= f;
  }
  return w;
}

Batch batch_for_step(const std::vector<Example>& data, const TrainConfig& cfg,
                     std::int64_t step) {
  const auto n = data.size();
  const auto N = static_cast<std::size_t>(cfg.batch_size);
  if (N > n) {
    throw std::invalid_argument("batch_size " + std::to_string(N) + " exceeds " +
                                std::to_string(n) + " training examples");
  }
  const std::int64_t per_epoch = static_cast<std::int64_t>(n / N);
  const std::int64_t epoch = step / per_epoch;
  const std::int64_t slot = step % per_epoch;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 perm_rng(derive_seed(cfg.seed, 0x5045524d, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), perm_rng);
  std::mt19937_64 batch_rng(derive_seed(cfg.seed, 0x42415443, static_cast<std::uint64_t>(step)));
  std::span<const std::size_t> idx(order.data() + slot * N, N);
  return make_batch(data, idx, cfg.hard_negs_per_query, batch_rng);
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'L', 'S', 'E', 'R', 'C', 'K', 'P', 'T'};
static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

template <typename U>
void put(std::string& buf, U v) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  buf.append(bytes, sizeof(U));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > end_) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& buf, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(n)));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string buf(kMagic, sizeof(kMagic));
  put<std::uint32_t>(buf, Checkpoint::kVersion);
  const json config = {{"format", "laser-ckpt"},
                       {"backbone", ckpt.model_config},
                       {"train", ckpt.train_config},
                       {"step", ckpt.step},
                       {"optimizer_step", ckpt.optimizer_step}};
  const std::string cfg = config.dump();
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(cfg.size()));
  buf += cfg;
  for (const auto& [name, m] : ckpt.tensors) {
    if (name.size() > 0xffff) throw CheckpointError("tensor name too long: " + name);
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    put<std::uint8_t>(buf, 2);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(m.rows));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(m.cols));
    for (float v : m.data) put<float>(buf, v);
  }
  put<std::uint32_t>(buf, crc_of(buf, buf.size()));

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  }
  if (buf.size() < sizeof(kMagic) + 12) throw CheckpointError(path.string() + ": truncated checkpoint");
  const std::size_t payload = buf.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + payload, 4);
  if (stored != crc_of(buf, payload)) throw CheckpointError(path.string() + ": checksum mismatch");

  Reader r(buf, payload);
  r.bytes(sizeof(kMagic), "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != Checkpoint::kVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto cfg_len = r.get<std::uint32_t>("config length");
  json config;
  try {
    config = json::parse(r.bytes(cfg_len, "config"));
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": malformed config block: " + e.what());
  }
  Checkpoint ck;
  try {
    ck.model_config = config.at("backbone").get<BackboneConfig>();
    ck.train_config = config.at("train").get<TrainConfig>();
    ck.step = config.at("step").get<std::int64_t>();
    ck.optimizer_step = config.at("optimizer_step").get<std::int64_t>();
  } catch (const std::exception& e) {
    throw CheckpointError(path.string() + ": invalid config block: " + e.what());
  }
  while (!r.done()) {
    const auto len = r.get<std::uint16_t>("tensor name length");
    std::string name = r.bytes(len, "tensor name");
    const auto rank = r.get<std::uint8_t>("tensor rank");
    if (rank < 1 || rank > 2) throw CheckpointError("tensor " + name + " has unsupported rank " + std::to_string(rank));
    std::size_t dims[2] = {1, 1};
    for (int d = 0; d < rank; ++d) dims[2 - rank + d] = r.get<std::uint32_t>("tensor dims");
    Matrix<float> m(dims[0], dims[1]);
    for (auto& v : m.data) v = r.get<float>("tensor values");
    ck.tensors.emplace_back(std::move(name), std::move(m));
  }
  return ck;
}

Checkpoint make_checkpoint(const Backbone<float>& model, const OptimizerState& opt,
                           const TrainConfig& cfg, std::int64_t step) {
  Checkpoint ck;
  ck.model_config = model.config();
  ck.train_config = cfg;
  ck.step = step;
  ck.optimizer_step = opt.step;
  const auto params = model.parameters();
  for (const auto* p : params) ck.tensors.emplace_back(p->name, p->value);
  for (std::size_t i = 0; i < params.size() && i < opt.m.size(); ++i) {
    ck.tensors.emplace_back("adam.m." + params[i]->name, opt.m[i]);
    ck.tensors.emplace_back("adam.v." + params[i]->name, opt.v[i]);
  }
  return ck;
}

namespace {

const Matrix<float>& find_tensor(const Checkpoint& ck, const std::string& name,
                                 std::size_t rows, std::size_t cols) {
  for (const auto& [n, m] : ck.tensors) {
    if (n != name) continue;
    if (m.rows != rows || m.cols != cols) {
      throw CheckpointError("tensor " + name + " has shape " + ad::shape_str(m.rows, m.cols) +
                            ", config expects " + ad::shape_str(rows, cols));
    }
    return m;
  }
  throw CheckpointError("checkpoint is missing tensor " + name);
}

}  // namespace

Backbone<float> restore_model(const Checkpoint& ck) {
  Backbone<float> model(ck.model_config);
  for (auto* p : model.parameters()) p->value = find_tensor(ck, p->name, p->rows(), p->cols());
  return model;
}

OptimizerState restore_optimizer(const Checkpoint& ck, const Backbone<float>& model) {
  OptimizerState opt;
  opt.hp = ck.train_config.adamw;
  opt.step = ck.optimizer_step;
  for (const auto* p : model.parameters()) {
    opt.m.push_back(find_tensor(ck, "adam.m." + p->name, p->rows(), p->cols()));
    opt.v.push_back(find_tensor(ck, "adam.v." + p->name, p->rows(), p->cols()));
  }
  return opt;
}

TrainRun train(const BackboneConfig& model_cfg, const TrainConfig& cfg,
               const std::vector<Example>& data, const Checkpoint* resume,
               std::int64_t stop_at, const TrainHooks& hooks) {
  cfg.validate();
  if (resume != nullptr) {
    if (!(resume->model_config == model_cfg)) {
      throw CheckpointError("resume checkpoint was written for a different backbone config");
    }
    if (!(resume->train_config == cfg)) {
      throw CheckpointError("resume checkpoint was written for a different train config");
    }
  }
  TrainRun run{resume ? restore_model(*resume) : Backbone<float>(model_cfg), {}, {}, 0, 0, 0};
  run.opt = resume ? restore_optimizer(*resume, run.model)
                   : OptimizerState::for_parameters(run.model.parameters(), cfg.adamw);
  run.step = resume ? resume->step : 0;
  run.total = total_steps(cfg, data.size());
  const std::int64_t end = stop_at > 0 ? std::min(stop_at, run.total) : run.total;

  for (; run.step < end; ++run.step) {
    const Batch batch = batch_for_step(data, cfg, run.step);
    LogEntry entry;
    entry.step = run.step + 1;
    entry.lr = lr_schedule(run.step + 1, run.total, cfg.warmup_ratio, cfg.lr);
    entry.resampled = batch.resampled.size();
    TrainConfig step_cfg = cfg;
    step_cfg.weights = weights_at(cfg, entry.step, run.total);
    try {
      entry.loss = train_step(run.model, data, batch, step_cfg, run.opt, entry.lr);
    } catch (const NonFiniteLoss& e) {
      ++run.aborted_steps;
      if (hooks.on_warning) hooks.on_warning("step " + std::to_string(entry.step) + ": " + e.what());
      continue;
    }
    if (hooks.on_step) hooks.on_step(entry);
    run.log.push_back(entry);
  }
  return run;
}

GradAuditResult gradient_audit(std::uint64_t seed, double step) {
  BackboneConfig mc = BackboneConfig::micro();
  mc.seed = seed;
  GenConfig gc;
  gc.vocab_size = mc.vocab_size;
  gc.n_relations = 2;
  gc.n_keys = 12;
  gc.hops = 3;
  gc.n_train = 4;
  gc.n_eval = 0;
  gc.corpus_size = 12;
  gc.query_noise = 1;
  gc.doc_noise = 1;
  gc.max_seq_len = mc.max_seq_len;
  gc.seed = seed;
  const auto ds = gen_multihop(gc);

  TrainConfig tc;
  tc.batch_size = 2;
  tc.K_train = 2;
  tc.seed = seed;
  // Finite differences see every path, so the audit detaches nothing.
  tc.detach_teacher = false;
  tc.kd_doc_gradient = true;
  const Batch batch = batch_for_step(ds.train, tc, 0);

  Backbone<double> model(mc);
  auto params = model.parameters();
  auto loss_fn = [&](Graph<double>& g) {
    BackboneView<double> view(g, model);
    return total_loss(batch_losses(view, ds.train, batch, tc), tc.weights);
  };
  GradAuditResult res;
  {
    Graph<double> g;
    BackboneView<double> view(g, model);
    const auto terms = batch_losses(view, ds.train, batch, tc);
    res.loss = make_report(terms, total_loss(terms, tc.weights));
  }
  res.max_rel_error = ad::grad_check<double>(loss_fn, params, step);
  for (const auto* p : params) res.n_parameters += p->value.data.size();
  return res;
}

#define LASER_TRAIN_INSTANTIATE(T)                                                      \
  template LossTerms<T> batch_losses(BackboneView<T>&, const std::vector<Example>&, \
                                     const Batch&, const TrainConfig&);

LASER_TRAIN_INSTANTIATE(float)
LASER_TRAIN_INSTANTIATE(double)

#undef LASER_TRAIN_INSTANTIATE

}  // namespace laser
