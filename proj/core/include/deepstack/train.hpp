#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "deepstack/data.hpp"
#include "deepstack/model.hpp"
#include "deepstack/objectives.hpp"

namespace deepstack {

enum class DecayShape { cosine, linear };

std::string_view to_string(DecayShape shape);
DecayShape parse_decay_shape(std::string_view text);

struct TrainSchedule {
  double peak_lr = 1.5e-4;
  double min_lr = 1e-5;
  std::uint64_t warmup_steps = 3000;
  std::uint64_t total_steps = 300000;
  DecayShape decay = DecayShape::cosine;

  /// Throws ConfigError unless warmup <= total and min_lr <= peak_lr.
  void validate() const;

  /// Decoder-only recipe: 3k warmup to 1.5e-4, cosine to 1e-5 at 300k.
  static TrainSchedule gpt();
  /// Encoder-only recipe: 10k warmup to 1e-4, linear decay to 0.
  static TrainSchedule bert(std::uint64_t total_steps = 1000000);
};

/// Linear ramp from 0 over warmup, then cosine or linear decay to min_lr at
/// total_steps, clamped at min_lr afterwards.
double lr_at(const TrainSchedule& schedule, std::uint64_t step);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// One bias-corrected Adam update of a flat parameter with decoupled weight
/// decay: p -= lr * wd * p, then p -= lr * m_hat / (sqrt(v_hat) + eps).
/// `t` is the 1-based step number used for bias correction.
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m,
                 std::span<T> v, std::uint64_t t, double lr, const AdamConfig& config,
                 bool decay);

/// Adam moments for every entry of a ParamStore, in store order.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Applies one update. Parameters whose spec has decay == false skip the
  /// weight-decay term.
  void step(ParamStore<T>& params, std::span<const std::vector<T>> grads, double lr);

  const AdamConfig& config() const { return config_; }
  std::uint64_t steps() const { return t_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void restore(std::uint64_t t, std::vector<std::vector<T>> m, std::vector<std::vector<T>> v);

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

struct ClipResult {
  double norm = 0.0;   ///< global L2 norm before clipping
  bool finite = true;  ///< false signals overflow; grads are left untouched
  bool clipped = false;
};

/// Scales all gradients by max_norm / norm when the global norm exceeds
/// max_norm. Accumulates in double, in group order.
template <typename T>
ClipResult clip_global_norm(std::span<std::vector<T>> grads, double max_norm = 1.0);

template <typename T>
bool all_finite(std::span<const std::vector<T>> grads);

struct LossScalerConfig {
  double initial_scale = 65536.0;
  double growth_factor = 2.0;
  double backoff_factor = 0.5;
  std::uint64_t growth_interval = 2000;
};

/// Dynamic loss scaling. On overflow the step is skipped, the scale backs
/// off and the good-step counter resets; after growth_interval consecutive
/// good steps the scale grows.
class LossScaler {
 public:
  explicit LossScaler(LossScalerConfig config = {});

  double scale() const { return scale_; }
  std::uint64_t good_steps() const { return good_steps_; }
  const LossScalerConfig& config() const { return config_; }

  /// Advances the state machine. Returns true when the step may proceed.
  bool observe(bool finite);

  /// Checks `grads` (which carry the scale); on success unscales them in
  /// place and returns true.
  template <typename T>
  bool step(std::span<std::vector<T>> grads);

  void restore(double scale, std::uint64_t good_steps);

 private:
  LossScalerConfig config_;
  double scale_;
  std::uint64_t good_steps_ = 0;
};

struct EngineConfig {
  TrainSchedule schedule;
  AdamConfig adam;
  double clip_norm = 1.0;
  bool use_loss_scaler = false;
  LossScalerConfig scaler;
  bool recompute = false;
  std::uint64_t seed = 0;
};

struct StepMetrics {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double loss_scale = 1.0;
  bool skipped = false;
  std::size_t empty_masks = 0;

  /// One JSON object on a single line.
  std::string to_json() const;
};

/// Everything beyond the weights that a bit-identical resume needs.
struct TrainerState {
  std::uint64_t step = 0;
  std::uint64_t adam_steps = 0;
  std::vector<std::vector<float>> first_moments;
  std::vector<std::vector<float>> second_moments;
  double loss_scale = 65536.0;
  std::uint64_t good_steps = 0;
};

/// Loss and unreduced parameter gradients of one replica.
struct GradientResult {
  double loss = 0.0;
  std::vector<std::vector<float>> grads;
  std::size_t empty_masks = 0;
};

class Trainer {
 public:
  /// Builds the loss of one forward pass for the given context.
  using LossBuilder =
      std::function<Tensor<float>(Tape<float>&, const ForwardContext&, LossStats&)>;

  Trainer(TransformerModel<float>& model, EngineConfig config);

  TransformerModel<float>& model() { return model_; }
  const EngineConfig& config() const { return config_; }
  std::uint64_t step() const { return step_; }

  /// Forward, backward (with recomputation if enabled), scaler check, clip
  /// and Adam update at lr_at(step).
  StepMetrics train_step(const TrainBatch& batch);

  /// Splits the batch into n_shards equal shards, computes each shard's
  /// gradient with full-batch loss denominators, sums them in shard order
  /// and applies one update. Throws ConfigError if the batch size is not
  /// divisible by n_shards.
  StepMetrics data_parallel_step(const TrainBatch& batch, std::size_t n_shards);

  /// Generic step for custom losses (used by fine-tuning).
  StepMetrics custom_step(const LossBuilder& build_loss);

  /// Gradients of rows [offset, offset + rows) of `batch`, without updating.
  GradientResult shard_gradients(const TrainBatch& batch, std::size_t offset,
                                 std::size_t rows, const LossNormalizer& norm);

  TrainerState state() const;
  void restore(const TrainerState& state);

 private:
  GradientResult gradients(const LossBuilder& build_loss, std::size_t example_offset);
  StepMetrics apply(GradientResult result);

  TransformerModel<float>& model_;
  EngineConfig config_;
  Adam<float> adam_;
  LossScaler scaler_;
  std::uint64_t step_ = 0;
};

/// Appends StepMetrics as line-delimited JSON.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::ostream& out) : out_(out) {}
  void write(const StepMetrics& metrics);

 private:
  std::ostream& out_;
};

}  // namespace deepstack
