#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>

#include "deepstack/model.hpp"
#include "deepstack/train.hpp"

namespace deepstack {

/// Binary checkpoint, all integers little-endian:
///   "DSCK" magic, u32 version (1)
///   u64 length + model config text (key = value format)
///   u64 tensor count, then per tensor:
///     u32 name length + name, u8 decay flag, u32 rank, u64 dims[rank],
///     f32 values (IEEE-754 bits)
///   u8 has_trainer_state; if 1:
///     u64 step, u64 adam steps, f64 loss scale, u64 good steps,
///     per tensor: f32 first moments, f32 second moments (empty when
///     the optimizer has not stepped yet: u8 0 instead of 1 before them)
void save_checkpoint(std::ostream& out, const TransformerModel<float>& model,
                     const TrainerState* state = nullptr);
void save_checkpoint(const std::filesystem::path& path,
                     const TransformerModel<float>& model,
                     const TrainerState* state = nullptr);

struct LoadedCheckpoint {
  TransformerModel<float> model;
  std::optional<TrainerState> trainer;
};

/// Throws InputError on a malformed file or a missing inventory tensor.
LoadedCheckpoint load_checkpoint(std::istream& in);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace deepstack
