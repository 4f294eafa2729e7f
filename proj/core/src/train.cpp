#include "deepstack/train.hpp"

#include <cmath>
#include <numbers>
#include <ostream>

#include <nlohmann/json.hpp>

#include "deepstack/error.hpp"

namespace deepstack {

std::string_view to_string(DecayShape shape) {
  return shape == DecayShape::cosine ? "cosine" : "linear";
}

DecayShape parse_decay_shape(std::string_view text) {
  if (text == "cosine") return DecayShape::cosine;
  if (text == "linear") return DecayShape::linear;
  throw ConfigError("unknown decay shape '" + std::string(text) + "'");
}

void TrainSchedule::validate() const {
  if (warmup_steps > total_steps) {
    throw ConfigError("warmup_steps " + std::to_string(warmup_steps) + " exceeds total_steps " +
                      std::to_string(total_steps));
  }
  if (min_lr > peak_lr || min_lr < 0.0) {
    throw ConfigError("schedule needs 0 <= min_lr <= peak_lr");
  }
}

TrainSchedule TrainSchedule::gpt() { return TrainSchedule{}; }

TrainSchedule TrainSchedule::bert(std::uint64_t total_steps) {
  TrainSchedule s;
  s.peak_lr = 1e-4;
  s.min_lr = 0.0;
  s.warmup_steps = 10000;
  s.total_steps = total_steps;
  s.decay = DecayShape::linear;
  return s;
}

double lr_at(const TrainSchedule& s, std::uint64_t step) {
  if (step < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (step >= s.total_steps) return s.min_lr;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  if (s.decay == DecayShape::cosine) {
    return s.min_lr +
           (s.peak_lr - s.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  return s.peak_lr - (s.peak_lr - s.min_lr) * progress;
}

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m,
                 std::span<T> v, std::uint64_t t, double lr, const AdamConfig& c,
                 bool decay) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adam_update: parameter, gradient and moment sizes differ");
  }
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  const double shrink = decay ? lr * c.weight_decay : 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * g;
    const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    double p = static_cast<double>(param[i]);
    p -= shrink * p;
    p -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
    param[i] = static_cast<T>(p);
  }
}

template <typename T>
void Adam<T>::step(ParamStore<T>& params, std::span<const std::vector<T>> grads, double lr) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) {
    throw DimensionError("Adam: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(entries.size()) + " parameters");
  }
  if (m_.empty()) {
    for (const auto& e : entries) {
      m_.emplace_back(e.tensor.size(), T{0});
      v_.emplace_back(e.tensor.size(), T{0});
    }
  }
  ++t_;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    adam_update<T>(entries[i].tensor.data(), grads[i], m_[i], v_[i], t_, lr, config_,
                   entries[i].spec.decay);
  }
}

template <typename T>
void Adam<T>::restore(std::uint64_t t, std::vector<std::vector<T>> m,
                      std::vector<std::vector<T>> v) {
  if (m.size() != v.size()) throw InputError("Adam state: moment lists differ in length");
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

template <typename T>
bool all_finite(std::span<const std::vector<T>> grads) {
  for (const auto& g : grads) {
    for (const T x : g) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

template <typename T>
ClipResult clip_global_norm(std::span<std::vector<T>> grads, double max_norm) {
  ClipResult r;
  double sq = 0.0;
  for (const auto& g : grads) {
    for (const T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  r.norm = std::sqrt(sq);
  if (!std::isfinite(r.norm)) {
    r.finite = false;
    return r;
  }
  if (r.norm > max_norm) {
    const double factor = max_norm / r.norm;
    for (auto& g : grads) {
      for (T& x : g) x = static_cast<T>(static_cast<double>(x) * factor);
    }
    r.clipped = true;
  }
  return r;
}

LossScaler::LossScaler(LossScalerConfig config)
    : config_(config), scale_(config.initial_scale) {
  if (!(scale_ > 0.0)) throw ConfigError("loss scale must be positive");
}

bool LossScaler::observe(bool finite) {
  if (!finite) {
    scale_ *= config_.backoff_factor;
    good_steps_ = 0;
    return false;
  }
  if (++good_steps_ >= config_.growth_interval) {
    scale_ *= config_.growth_factor;
    good_steps_ = 0;
  }
  return true;
}

template <typename T>
bool LossScaler::step(std::span<std::vector<T>> grads) {
  const double current = scale_;
  if (!observe(all_finite<T>(grads))) return false;
  const double inv = 1.0 / current;
  for (auto& g : grads) {
    for (T& x : g) x = static_cast<T>(static_cast<double>(x) * inv);
  }
  return true;
}

void LossScaler::restore(double scale, std::uint64_t good_steps) {
  if (!(scale > 0.0)) throw InputError("restored loss scale must be positive");
  scale_ = scale;
  good_steps_ = good_steps;
}

std::string StepMetrics::to_json() const {
  nlohmann::json j;
  j["step"] = step;
  j["loss"] = loss;
  j["lr"] = lr;
  j["grad_norm"] = grad_norm;
  j["loss_scale"] = loss_scale;
  j["skipped"] = skipped;
  j["empty_masks"] = empty_masks;
  return j.dump();
}

void MetricsWriter::write(const StepMetrics& metrics) {
  out_ << metrics.to_json() << '\n';
  out_.flush();
}

Trainer::Trainer(TransformerModel<float>& model, EngineConfig config)
    : model_(model), config_(config), adam_(config.adam), scaler_(config.scaler) {
  config_.schedule.validate();
}

GradientResult Trainer::gradients(const LossBuilder& build_loss, std::size_t example_offset) {
  ForwardContext ctx;
  ctx.training = true;
  ctx.seed = config_.seed;
  ctx.step = step_;
  ctx.recompute = config_.recompute;
  ctx.example_offset = example_offset;

  auto& params = model_.params();
  params.zero_grad();
  LossStats stats;
  GradientResult out;
  {
    Tape<float> tape;
    Tensor<float> loss = build_loss(tape, ctx, stats);
    out.loss = static_cast<double>(loss.item());
    const float seed = config_.use_loss_scaler ? static_cast<float>(scaler_.scale()) : 1.0f;
    tape.backward(loss, seed);
  }
  out.grads = params.gradients();
  out.empty_masks = stats.empty_masks;
  params.zero_grad();
  return out;
}

GradientResult Trainer::shard_gradients(const TrainBatch& batch, std::size_t offset,
                                        std::size_t rows, const LossNormalizer& norm) {
  const TrainBatch shard = batch.rows(offset, rows);
  return gradients(
      [&](Tape<float>& tape, const ForwardContext& ctx, LossStats& stats) {
        const ModelOutputs<float> out = model_.forward(tape, shard.model_inputs(), ctx);
        return pretraining_loss(tape, out, shard, norm, &stats);
      },
      offset);
}

StepMetrics Trainer::apply(GradientResult result) {
  StepMetrics m;
  m.step = step_;
  m.loss = result.loss;
  m.lr = lr_at(config_.schedule, step_);
  m.empty_masks = result.empty_masks;
  std::span<std::vector<float>> grads(result.grads);

  bool proceed = true;
  if (config_.use_loss_scaler) {
    proceed = scaler_.step<float>(grads);
    m.loss_scale = scaler_.scale();
  }
  if (proceed) {
    const ClipResult clip = clip_global_norm<float>(grads, config_.clip_norm);
    m.grad_norm = clip.norm;
    proceed = clip.finite;
  }
  m.skipped = !proceed;
  if (proceed) adam_.step(model_.params(), result.grads, m.lr);
  ++step_;
  return m;
}

StepMetrics Trainer::train_step(const TrainBatch& batch) {
  return data_parallel_step(batch, 1);
}

StepMetrics Trainer::data_parallel_step(const TrainBatch& batch, std::size_t n_shards) {
  if (n_shards == 0 || batch.batch % n_shards != 0) {
    throw ConfigError("batch of " + std::to_string(batch.batch) +
                      " is not divisible into " + std::to_string(n_shards) + " shards");
  }
  const LossNormalizer norm = LossNormalizer::full_batch(batch);
  const std::size_t rows = batch.batch / n_shards;
  std::vector<GradientResult> shards;
  shards.reserve(n_shards);
  for (std::size_t s = 0; s < n_shards; ++s) {
    shards.push_back(shard_gradients(batch, s * rows, rows, norm));
  }
  GradientResult total = std::move(shards.front());
  for (std::size_t s = 1; s < n_shards; ++s) {
    total.loss += shards[s].loss;
    total.empty_masks += shards[s].empty_masks;
    for (std::size_t p = 0; p < total.grads.size(); ++p) {
      auto& dst = total.grads[p];
      const auto& src = shards[s].grads[p];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  return apply(std::move(total));
}

StepMetrics Trainer::custom_step(const LossBuilder& build_loss) {
  return apply(gradients(build_loss, 0));
}

TrainerState Trainer::state() const {
  TrainerState s;
  s.step = step_;
  s.adam_steps = adam_.steps();
  s.first_moments = adam_.first_moments();
  s.second_moments = adam_.second_moments();
  s.loss_scale = scaler_.scale();
  s.good_steps = scaler_.good_steps();
  return s;
}

void Trainer::restore(const TrainerState& s) {
  step_ = s.step;
  adam_.restore(s.adam_steps, s.first_moments, s.second_moments);
  scaler_.restore(s.loss_scale, s.good_steps);
}

template void adam_update(std::span<float>, std::span<const float>, std::span<float>,
                          std::span<float>, std::uint64_t, double, const AdamConfig&, bool);
template void adam_update(std::span<double>, std::span<const double>, std::span<double>,
                          std::span<double>, std::uint64_t, double, const AdamConfig&, bool);
template class Adam<float>;
template class Adam<double>;
template ClipResult clip_global_norm(std::span<std::vector<float>>, double);
template ClipResult clip_global_norm(std::span<std::vector<double>>, double);
template bool all_finite(std::span<const std::vector<float>>);
template bool all_finite(std::span<const std::vector<double>>);
template bool LossScaler::step(std::span<std::vector<float>>);
template bool LossScaler::step(std::span<std::vector<double>>);

}  // namespace deepstack
