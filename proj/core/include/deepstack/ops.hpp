#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "deepstack/rng.hpp"
#include "deepstack/tensor.hpp"

namespace deepstack {

inline constexpr double kLayerNormEps = 1e-5;

/// Additive score bias for masked attention positions. Large enough that
/// exp() underflows to exactly zero in both float and double.
inline constexpr double kMaskedScore = -1e9;

// Every op below records a backward closure on `tape` when the tape is
// recording and at least one input requires a gradient.

/// a: [..., m, k] with b: [k, n] (shared weight), or a: [B, m, k] with
/// b: [B, k, n] (batched).
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Swaps two axes; defaults to the last two.
template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x, int dim0 = -2,
                    int dim1 = -1);

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);

/// Element-wise a + b. b must have a's shape or a suffix of it
/// (bias add, broadcast mask add).
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x);

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps = kLayerNormEps);

/// Inverted dropout. Identity when !training or p == 0. Element i of x uses
/// draw (counter_base + i) of `stream`.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p,
                  const RngStream& stream, bool training,
                  std::uint64_t counter_base = 0);

/// Gathers rows of table [V, d] -> [ids.size(), d]. Backward scatter-adds.
template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table,
                           std::span<const std::int32_t> ids);

/// Columns [begin, begin + count) of the last axis.
template <typename T>
Tensor<T> slice_last(Tape<T>& tape, const Tensor<T>& x, std::size_t begin,
                     std::size_t count);

/// sum_i weights[i] * x[i] -> shape {1}.
template <typename T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& x,
                       std::span<const T> weights);

/// Weighted mean negative log-likelihood over rows of logits [N, V]:
/// sum_i w_i * -log softmax(logits_i)[target_i] / denominator.
/// The denominator defaults to sum_i w_i; a zero denominator yields 0.
/// Rows with w_i == 0 are skipped entirely (their targets are not checked).
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                std::span<const std::int32_t> targets,
                                std::span<const T> weights,
                                std::optional<double> denominator = std::nullopt);

/// Activation checkpoint. Runs `fn` without recording and keeps only the
/// inputs; on backward, re-runs `fn` on a private tape and propagates the
/// incoming gradient through it. Parameters captured by `fn` receive their
/// gradients directly from the private tape.
template <typename T>
using CheckpointFn =
    std::function<Tensor<T>(Tape<T>&, const std::vector<Tensor<T>>&)>;

template <typename T>
Tensor<T> checkpoint(Tape<T>& tape, const std::vector<Tensor<T>>& inputs,
                     CheckpointFn<T> fn);

/// Forward-only helpers (no tape).
template <typename T>
std::vector<T> softmax_rows(std::span<const T> x, std::size_t cols);

template <typename T>
double gelu_value(T x);

}  // namespace deepstack
