#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "deepstack/model_config.hpp"
#include "deepstack/tensor.hpp"

namespace deepstack {

/// Named parameter tensors in inventory order (ModelParams).
template <typename T>
class ParamStore {
 public:
  struct Entry {
    ParamSpec spec;
    Tensor<T> tensor;
  };

  void add(ParamSpec spec, Tensor<T> tensor);
  bool contains(std::string_view name) const;
  Tensor<T>& at(std::string_view name);
  const Tensor<T>& at(std::string_view name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Total scalar count across all tensors.
  std::uint64_t element_count() const;
  void zero_grad();
  /// Snapshot of all gradients (zeros for parameters that received none).
  std::vector<std::vector<T>> gradients() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Token-level inputs for one batch. Encoder-decoder models read the
/// source from `ids` and the decoder prefix from `target_ids`.
struct ModelInputs {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;       ///< [batch * seq_len]
  std::vector<std::int32_t> segments;  ///< optional, encoder-only
  std::vector<std::uint8_t> attend;    ///< optional key mask, 1 = real token
  std::size_t target_len = 0;
  std::vector<std::int32_t> target_ids;  ///< [batch * target_len]
};

struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  /// Discard per-block activations and recompute them during backward.
  bool recompute = false;
  /// Position of this shard's first example in the full batch; keeps
  /// dropout masks independent of how a batch is sharded.
  std::size_t example_offset = 0;
  /// Compute vocabulary logits (skipped by classification fine-tuning).
  bool lm_logits = true;
};

template <typename T>
struct ModelOutputs {
  Tensor<T> logits;      ///< [B, T, V]; decoder side for encoder-decoder
  Tensor<T> hidden;      ///< [B, T, d] after the final layer norm
  Tensor<T> pooled;      ///< encoder-only: [B, d]
  Tensor<T> sop_logits;  ///< encoder-only: [B, 2]
};

/// Pre-layer-norm transformer stack for any of the three families.
template <typename T>
class TransformerModel {
 public:
  TransformerModel(ModelConfig config, ParamStore<T> params);

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// The matrix that produces vocabulary logits. With tied embeddings this
  /// is the token embedding itself.
  const Tensor<T>& output_embedding() const;

  ModelOutputs<T> forward(Tape<T>& tape, const ModelInputs& inputs,
                          const ForwardContext& ctx) const;

 private:
  ModelConfig config_;
  ParamStore<T> params_;
};

/// Draws one parameter: Normal(0, init_std), additionally scaled by
/// 1/sqrt(2N) for residual output projections; ones/zeros for norms/biases.
template <typename T>
Tensor<T> init_parameter(const ParamSpec& spec, const ModelConfig& config,
                         std::mt19937_64& rng);

/// Instantiates every tensor of param_inventory(config). Each tensor uses an
/// independent generator keyed on (seed, inventory index).
template <typename T>
TransformerModel<T> build_model(const ModelConfig& config, std::uint64_t seed);

}  // namespace deepstack
