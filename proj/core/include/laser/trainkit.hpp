#pragma once

// Dual-view training: optimizer, schedule, step, loop and checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "laser/backbone.hpp"
#include "laser/data.hpp"
#include "laser/encoder.hpp"
#include "laser/losses.hpp"

namespace laser {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

struct TrainConfig {
  double lr = 1e-4;
  double warmup_ratio = 0.1;
  int epochs = 1;
  int batch_size = 16;
  int K_train = 3;
  int hard_negs_per_query = 1;
  int max_steps = 0;  // 0: epochs * (n_train / batch_size)
  LossWeights weights;
  AdamWConfig adamw;

  bool disable_explicit_view = false;
  bool disable_latent_view = false;
  bool disable_kd_out = false;
  bool disable_kd_mid = false;
  bool detach_teacher = true;
  // Let the distillation terms move document vectors. Off by default: from
  // a random init the KL terms are cheapest to satisfy by collapsing every
  // document onto one direction.
  bool kd_doc_gradient = false;
  // Fraction of the schedule over which lambda2 and lambda3 ramp linearly
  // from 0 to their configured values. A shared-weight teacher starts out
  // as random as the student, and full-strength distillation from step 1
  // drives both views to uniform score distributions.
  double kd_warmup_ratio = 0.0;

  std::uint64_t seed = 0;
  EncodeMode doc_mode = EncodeMode::plain();
  int max_query_len = 32;
  int max_explicit_len = 64;

  void validate() const;
  bool explicit_active() const { return !disable_explicit_view; }
  bool kd_active() const { return !disable_explicit_view && !disable_latent_view; }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// The paper's ablation rows as named presets over a base config.
enum class Variant { kFull, kNoExplicitView, kNoLatentView };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
TrainConfig apply_variant(TrainConfig base, Variant v);

struct OptimizerState {
  AdamWConfig hp;
  std::int64_t step = 0;
  std::vector<ad::Matrix<float>> m;
  std::vector<ad::Matrix<float>> v;

  static OptimizerState for_parameters(const std::vector<ad::Parameter<float>*>& params,
                                       const AdamWConfig& hp);
};

// Decoupled weight decay Adam with bias correction. Rejects non-finite
// gradients before touching any parameter.
void adamw_step(const std::vector<ad::Parameter<float>*>& params, OptimizerState& opt,
                double lr);

// Linear warmup over warmup_ratio * total_steps, then linear decay to 0.
double lr_schedule(std::int64_t step, std::int64_t total_steps, double warmup_ratio,
                   double base_lr);

// Raised when a loss term is NaN or infinite; parameters are left as they
// were before the step.
class NonFiniteLoss : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Builds every active loss term for one batch inside the view's graph.
template <typename T>
LossTerms<T> batch_losses(BackboneView<T>& view, const std::vector<Example>& data,
                          const Batch& batch, const TrainConfig& cfg);

// One optimization step. Returns the per-term report.
LossReport train_step(Backbone<float>& model, const std::vector<Example>& data,
                      const Batch& batch, const TrainConfig& cfg, OptimizerState& opt,
                      double lr);

struct LogEntry {
  std::int64_t step = 0;
  double lr = 0;
  LossReport loss;
  std::size_t resampled = 0;
  friend bool operator==(const LogEntry&, const LogEntry&) = default;
};

void to_json(nlohmann::json& j, const LogEntry& e);

std::int64_t total_steps(const TrainConfig& cfg, std::size_t n_train);

// Loss weights in effect for update `step` (1-based) of `total`.
LossWeights weights_at(const TrainConfig& cfg, std::int64_t step, std::int64_t total);

// Batch i of the run: a pure function of (seed, step) so a resumed run sees
// the same batches as a straight one.
Batch batch_for_step(const std::vector<Example>& data, const TrainConfig& cfg,
                     std::int64_t step);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  BackboneConfig model_config;
  TrainConfig train_config;
  std::int64_t step = 0;
  std::int64_t optimizer_step = 0;
  // Model parameters by name, then AdamW moments as adam.m.<name> and
  // adam.v.<name>.
  std::vector<std::pair<std::string, ad::Matrix<float>>> tensors;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const Backbone<float>& model, const OptimizerState& opt,
                           const TrainConfig& cfg, std::int64_t step);
// Rebuilds model and optimizer; throws CheckpointError naming any tensor
// that is missing or shaped differently from the config.
Backbone<float> restore_model(const Checkpoint& ckpt);
OptimizerState restore_optimizer(const Checkpoint& ckpt, const Backbone<float>& model);

struct TrainRun {
  Backbone<float> model;
  OptimizerState opt;
  std::vector<LogEntry> log;
  std::int64_t step = 0;
  std::int64_t total = 0;
  std::size_t aborted_steps = 0;
};

struct TrainHooks {
  std::function<void(const LogEntry&)> on_step;
  std::function<void(const std::string&)> on_warning;
};

// Runs from step 0, or from `resume` if given, up to `stop_at` (exclusive
// bound on completed steps; 0 means the full schedule).
TrainRun train(const BackboneConfig& model_cfg, const TrainConfig& cfg,
               const std::vector<Example>& data, const Checkpoint* resume = nullptr,
               std::int64_t stop_at = 0, const TrainHooks& hooks = {});

// Gradient audit on a micro configuration in 64-bit: maximum relative error
// of the total loss gradient against central differences.
struct GradAuditResult {
  double max_rel_error = 0;
  std::size_t n_parameters = 0;
  LossReport loss;
};
GradAuditResult gradient_audit(std::uint64_t seed = 0, double step = 1e-6);

}  // namespace laser
