#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deepstack/tensor.hpp"

namespace deepstack {

enum class Family { decoder_only, encoder_only, encoder_decoder };

std::string_view to_string(Family family);
Family parse_family(std::string_view text);

/// Architecture of one model. Mirrors the reference table columns
/// (n_layers, d_layer, n_heads, d_head) plus what is needed to build it.
struct ModelConfig {
  std::string name = "unnamed";
  Family family = Family::decoder_only;
  /// Total transformer layers. Encoder-decoder models split it evenly.
  std::size_t n_layers = 2;
  std::size_t d_layer = 64;
  std::size_t n_heads = 4;
  std::size_t d_head = 16;
  /// Feed-forward width; 0 means 4 * d_layer.
  std::size_t d_ff = 0;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;
  double dropout_p = 0.1;
  bool tie_embeddings = true;
  double init_std = 0.02;

  // Descriptive columns carried through from the reference table.
  std::string corpus_size;
  std::string language;
  std::optional<double> reported_params;

  std::size_t ff_width() const { return d_ff == 0 ? 4 * d_layer : d_ff; }
  std::size_t encoder_layers() const {
    return family == Family::encoder_decoder ? n_layers / 2 : 0;
  }
  std::size_t decoder_layers() const {
    return family == Family::encoder_decoder ? n_layers / 2 : 0;
  }
  /// Residual-branch output projections are scaled by this on init.
  double residual_init_scale() const;
};

/// Throws ConfigError for structural problems (odd encoder-decoder depth,
/// zero widths, dropout outside [0, 1)). Returns human-readable warnings
/// for soft issues such as n_heads * d_head != d_layer.
std::vector<std::string> validate(const ModelConfig& config);

/// Parses "1.24B", "962.5M", "10.3B", "330M" into a count.
double parse_magnitude(std::string_view text);
std::string format_magnitude(double value);

/// Key-value config text: `key = value` lines, `#` comments.
ModelConfig parse_model_config(std::istream& in);
ModelConfig load_model_config(const std::string& path);
void write_model_config(std::ostream& out, const ModelConfig& config);
std::string model_config_text(const ModelConfig& config);

enum class InitKind { normal, residual, zeros, ones };

/// One named parameter as build_model will instantiate it.
struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init = InitKind::normal;
  bool decay = true;  ///< receives decoupled weight decay
};

/// The complete, ordered parameter inventory for a config. Names encode
/// the owning layer and role, e.g. "block.3.attn.out.weight"; residual
/// output projections carry InitKind::residual.
std::vector<ParamSpec> param_inventory(const ModelConfig& config);

/// Exact parameter total, computed in closed form (per-block subtotal
/// times depth plus embeddings and heads).
std::uint64_t count_params(const ModelConfig& config);

/// Closed-form parameters in all transformer blocks (no embeddings/heads).
std::uint64_t count_block_params(const ModelConfig& config);

}  // namespace deepstack
