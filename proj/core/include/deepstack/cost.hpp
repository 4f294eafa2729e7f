#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deepstack/model_config.hpp"

namespace deepstack {

/// Peak dense tensor throughput of one A100, flops/second.
inline constexpr double kDefaultPeakRate = 312e12;

/// Wall-clock training time. Parsed from "24h", "45h38m", "38m" or "2.5h".
struct WallTime {
  double hours = 0.0;

  double seconds() const { return hours * 3600.0; }
  static WallTime parse(std::string_view text);
  std::string to_string() const;
};

/// One row of a training-cost table.
struct CostRecord {
  std::string model;
  WallTime wall_time;
  std::uint64_t steps = 0;
  std::uint64_t gpus = 0;
  double peak_rate = kDefaultPeakRate;
  std::optional<double> reported_eflops;

  /// Throws ConfigError on negative time or a non-positive peak rate.
  void validate() const;
};

/// wall seconds * gpus * peak rate / 1e18.
double eflops(const CostRecord& record);

std::uint64_t tokens_per_step(const ModelConfig& config, std::uint64_t batch_size);

/// The 6 * params * tokens rule of thumb. A projection only; unrelated to
/// the time-times-capacity accounting of eflops().
double theoretical_train_flops(const ModelConfig& config, double tokens);

struct CostRow {
  std::string model;
  std::optional<std::uint64_t> params;
  std::optional<std::size_t> layers;
  WallTime wall_time;
  std::uint64_t steps = 0;
  std::uint64_t gpus = 0;
  double computed_eflops = 0.0;
  std::optional<double> reported_eflops;

  std::optional<double> relative_deviation() const;
};

/// Joins cost records with configs by model name (configs are optional).
std::vector<CostRow> cost_table(const std::vector<CostRecord>& records,
                                const std::vector<ModelConfig>& configs);

void write_cost_text(std::ostream& out, const std::vector<CostRow>& rows);
void write_cost_csv(std::ostream& out, const std::vector<CostRow>& rows);

/// Reads "model,time,steps,gpus,eflops" CSV with a header line; the eflops
/// column may be empty. Throws InputError on malformed rows.
std::vector<CostRecord> read_cost_records(std::istream& in);
std::vector<CostRecord> read_cost_records(const std::string& path);

/// Parses step counts such as "100k", "2.8M" or "300000".
std::uint64_t parse_count(std::string_view text);

}  // namespace deepstack
