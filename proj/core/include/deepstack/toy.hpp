#pragma once

#include <algorithm>
#include <cstdint>

#include "deepstack/model_config.hpp"
#include "deepstack/train.hpp"

namespace deepstack {

/// Desk-scale profile. Keeps family, block structure, dropout, init rule,
/// optimizer, clipping and schedule shape; shrinks everything else:
///   width 64 (4 heads of 16), depth N / 16 (at least 2, even for
///   encoder-decoder), sequence length 64, vocabulary capped at 512,
///   schedule steps / 100, learning rates x 10.
struct ToyProfile {
  std::size_t d_layer = 64;
  std::size_t n_heads = 4;
  std::size_t d_head = 16;
  std::size_t depth_divisor = 16;
  std::size_t min_layers = 2;
  std::size_t max_seq_len = 64;
  std::size_t max_vocab = 512;
  std::size_t batch_size = 8;
  std::uint64_t step_divisor = 100;
  double lr_multiplier = 10.0;

  ModelConfig apply(ModelConfig c) const {
    c.d_layer = d_layer;
    c.n_heads = n_heads;
    c.d_head = d_head;
    c.d_ff = 0;
    std::size_t n = std::max(min_layers, c.n_layers / depth_divisor);
    if (c.family == Family::encoder_decoder && n % 2 != 0) ++n;
    c.n_layers = n;
    c.max_seq_len = std::min(c.max_seq_len, max_seq_len);
    c.vocab_size = std::min(c.vocab_size, max_vocab);
    return c;
  }

  TrainSchedule apply(TrainSchedule s) const {
    s.warmup_steps /= step_divisor;
    s.total_steps = std::max<std::uint64_t>(1, s.total_steps / step_divisor);
    s.peak_lr *= lr_multiplier;
    s.min_lr *= lr_multiplier;
    return s;
  }
};

}  // namespace deepstack
