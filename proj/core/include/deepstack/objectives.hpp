#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "deepstack/data.hpp"
#include "deepstack/model.hpp"
#include "deepstack/tensor.hpp"

namespace deepstack {

/// Counts losses that had nothing to average over (an all-zero mask).
/// Such losses are defined as 0.
struct LossStats {
  std::size_t empty_masks = 0;
};

/// Optional explicit denominators. When a batch is split into shards, each
/// shard divides by the full-batch counts so shard losses (and gradients)
/// sum exactly to the full-batch value.
struct LossNormalizer {
  std::optional<double> tokens;     ///< LM / MLM / seq2seq positions
  std::optional<double> sequences;  ///< SOP examples

  /// Full-batch counts for `batch`.
  static LossNormalizer full_batch(const TrainBatch& batch);
};

/// Next-token loss: position i predicts ids[i + 1] where both positions are
/// real. logits: [B, T, V].
template <typename T>
Tensor<T> lm_loss(Tape<T>& tape, const Tensor<T>& logits,
                  std::span<const std::int32_t> ids, std::span<const std::uint8_t> real,
                  std::optional<double> denominator = std::nullopt,
                  LossStats* stats = nullptr);

/// Mean cross entropy over positions with loss_mask == 1 only.
template <typename T>
Tensor<T> mlm_loss(Tape<T>& tape, const Tensor<T>& logits,
                   std::span<const std::int32_t> labels,
                   std::span<const std::uint8_t> loss_mask,
                   std::optional<double> denominator = std::nullopt,
                   LossStats* stats = nullptr);

/// Two-way cross entropy on the order label. sop_logits: [B, 2].
template <typename T>
Tensor<T> sop_loss(Tape<T>& tape, const Tensor<T>& sop_logits,
                   std::span<const std::int32_t> labels,
                   std::optional<double> denominator = std::nullopt);

/// Decoder next-token loss on the target block; the decoder input is the
/// target shifted right, so logits row i predicts labels[i].
template <typename T>
Tensor<T> seq2seq_loss(Tape<T>& tape, const Tensor<T>& logits,
                       std::span<const std::int32_t> labels,
                       std::span<const std::uint8_t> loss_mask,
                       std::optional<double> denominator = std::nullopt,
                       LossStats* stats = nullptr);

/// Objective-appropriate loss for a batch: LM, MLM + SOP, or seq2seq.
template <typename T>
Tensor<T> pretraining_loss(Tape<T>& tape, const ModelOutputs<T>& outputs,
                           const TrainBatch& batch, const LossNormalizer& norm = {},
                           LossStats* stats = nullptr);

}  // namespace deepstack
