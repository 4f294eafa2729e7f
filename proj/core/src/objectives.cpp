#include "deepstack/objectives.hpp"

#include <algorithm>

#include "deepstack/error.hpp"
#include "deepstack/ops.hpp"

namespace deepstack {

namespace {

double count_ones(std::span<const std::uint8_t> mask) {
  return static_cast<double>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::vector<std::uint8_t> next_token_mask(std::span<const std::uint8_t> real,
                                          std::size_t rows, std::size_t len) {
  std::vector<std::uint8_t> mask(rows * len, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i + 1 < len; ++i) {
      mask[r * len + i] = static_cast<std::uint8_t>(real[r * len + i] && real[r * len + i + 1]);
    }
  }
  return mask;
}

template <typename T>
Tensor<T> masked_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                               std::span<const std::int32_t> targets,
                               std::span<const std::uint8_t> mask,
                               std::optional<double> denominator, LossStats* stats,
                               const char* what) {
  const std::size_t vocab = logits.dim(-1);
  const std::size_t rows = logits.size() / vocab;
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError(std::string(what) + ": logits " + to_string(logits.shape()) +
                         " vs " + std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::vector<T> weights(mask.begin(), mask.end());
  if (count_ones(mask) == 0 && stats != nullptr) ++stats->empty_masks;
  const Tensor<T> flat = reshape(tape, logits, Shape{rows, vocab});
  return softmax_cross_entropy<T>(tape, flat, targets, weights, denominator);
}

}  // namespace

LossNormalizer LossNormalizer::full_batch(const TrainBatch& batch) {
  LossNormalizer n;
  switch (batch.objective) {
    case Objective::causal_lm:
      n.tokens = count_ones(next_token_mask(batch.real, batch.batch, batch.seq_len));
      break;
    case Objective::masked_lm:
      n.tokens = count_ones(batch.loss_mask);
      n.sequences = static_cast<double>(batch.batch);
      break;
    case Objective::seq2seq:
      n.tokens = count_ones(batch.loss_mask);
      break;
  }
  return n;
}

template <typename T>
Tensor<T> lm_loss(Tape<T>& tape, const Tensor<T>& logits,
                  std::span<const std::int32_t> ids, std::span<const std::uint8_t> real,
                  std::optional<double> denominator, LossStats* stats) {
  if (logits.rank() != 3) {
    throw DimensionError("lm_loss: expected logits [B, T, V], got " + to_string(logits.shape()));
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t len = logits.dim(1);
  if (ids.size() != rows * len || real.size() != rows * len) {
    throw DimensionError("lm_loss: ids/real do not match logits " + to_string(logits.shape()));
  }
  const auto mask = next_token_mask(real, rows, len);
  std::vector<std::int32_t> targets(rows * len, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i + 1 < len; ++i) targets[r * len + i] = ids[r * len + i + 1];
  }
  return masked_cross_entropy(tape, logits, targets, mask, denominator, stats, "lm_loss");
}

template <typename T>
Tensor<T> mlm_loss(Tape<T>& tape, const Tensor<T>& logits,
                   std::span<const std::int32_t> labels,
                   std::span<const std::uint8_t> loss_mask,
                   std::optional<double> denominator, LossStats* stats) {
  return masked_cross_entropy(tape, logits, labels, loss_mask, denominator, stats, "mlm_loss");
}

template <typename T>
Tensor<T> sop_loss(Tape<T>& tape, const Tensor<T>& sop_logits,
                   std::span<const std::int32_t> labels,
                   std::optional<double> denominator) {
  if (sop_logits.rank() != 2 || sop_logits.dim(1) != 2 || sop_logits.dim(0) != labels.size()) {
    throw DimensionError("sop_loss: logits " + to_string(sop_logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::vector<T> weights(labels.size(), T{1});
  return softmax_cross_entropy<T>(tape, sop_logits, labels, weights, denominator);
}

template <typename T>
Tensor<T> seq2seq_loss(Tape<T>& tape, const Tensor<T>& logits,
                       std::span<const std::int32_t> labels,
                       std::span<const std::uint8_t> loss_mask,
                       std::optional<double> denominator, LossStats* stats) {
  return masked_cross_entropy(tape, logits, labels, loss_mask, denominator, stats,
                              "seq2seq_loss");
}

template <typename T>
Tensor<T> pretraining_loss(Tape<T>& tape, const ModelOutputs<T>& outputs,
                           const TrainBatch& batch, const LossNormalizer& norm,
                           LossStats* stats) {
  switch (batch.objective) {
    case Objective::causal_lm:
      return lm_loss(tape, outputs.logits, batch.ids, batch.real, norm.tokens, stats);
    case Objective::masked_lm: {
      Tensor<T> mlm = mlm_loss(tape, outputs.logits, batch.labels, batch.loss_mask,
                               norm.tokens, stats);
      Tensor<T> sop = sop_loss(tape, outputs.sop_logits, batch.sop_labels, norm.sequences);
      return add(tape, mlm, sop);
    }
    case Objective::seq2seq:
      return seq2seq_loss(tape, outputs.logits, batch.labels, batch.loss_mask, norm.tokens,
                          stats);
  }
  throw ConfigError("unknown objective");
}

#define DEEPSTACK_INSTANTIATE_OBJECTIVES(T)                                              \
  template Tensor<T> lm_loss(Tape<T>&, const Tensor<T>&, std::span<const std::int32_t>,  \
                             std::span<const std::uint8_t>, std::optional<double>,        \
                             LossStats*);                                                \
  template Tensor<T> mlm_loss(Tape<T>&, const Tensor<T>&, std::span<const std::int32_t>, \
                              std::span<const std::uint8_t>, std::optional<double>,       \
                              LossStats*);                                               \
  template Tensor<T> sop_loss(Tape<T>&, const Tensor<T>&, std::span<const std::int32_t>, \
                              std::optional<double>);                                    \
  template Tensor<T> seq2seq_loss(Tape<T>&, const Tensor<T>&,                             \
                                  std::span<const std::int32_t>,                          \
                                  std::span<const std::uint8_t>, std::optional<double>,   \
                                  LossStats*);                                           \
  template Tensor<T> pretraining_loss(Tape<T>&, const ModelOutputs<T>&, const TrainBatch&, \
                                      const LossNormalizer&, LossStats*);

DEEPSTACK_INSTANTIATE_OBJECTIVES(float)
DEEPSTACK_INSTANTIATE_OBJECTIVES(double)

}  // namespace deepstack
