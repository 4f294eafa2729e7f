#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "deepstack/data.hpp"
#include "deepstack/eval.hpp"
#include "deepstack/model.hpp"
#include "deepstack/tensor.hpp"

namespace deepstack::testkit {

std::filesystem::path source_dir();
std::filesystem::path data_path(const std::string& relative);

/// Random shapes and values for property tests.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}
  std::size_t size(std::size_t lo, std::size_t hi);
  double real(double lo, double hi);
  bool coin(double p = 0.5);
  std::vector<double> values(std::size_t n, double lo = -1.0, double hi = 1.0);
  Tensor<double> tensor(const Shape& shape, bool requires_grad = true, double spread = 1.0);
  std::vector<std::int32_t> ids(std::size_t n, std::int32_t lo, std::int32_t hi);
  std::string bytes(std::size_t n);
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

/// Builds the function under test on a fresh tape from the current input
/// values. The output may have any shape.
using DoubleFn = std::function<Tensor<double>(Tape<double>&, const std::vector<Tensor<double>>&)>;

struct GradCheck {
  double max_rel_error = 0.0;  ///< worst input, ||analytic - numeric|| / max norm
  std::size_t checked = 0;     ///< scalar coordinates compared
};

/// Reverse mode against a fourth-order central difference, on a random
/// linear functional of the output. Relative error is taken per input tensor
/// as ||g_analytic - g_numeric||_2 / max(||g_analytic||_2, ||g_numeric||_2),
/// the best over steps 1e-3, 1e-4 and 1e-5.
GradCheck check_gradients(const DoubleFn& fn, const std::vector<Tensor<double>>& inputs,
                          std::uint64_t seed);

/// Same check on the parameters of a model under a scalar loss.
GradCheck check_model_gradients(
    TransformerModel<double>& model,
    const std::function<Tensor<double>(Tape<double>&)>& loss);

/// Small config for the given family.
ModelConfig tiny_config(Family family, Gen& gen, std::size_t max_layers = 2);

/// Random batch matching the objective of `config`.
TrainBatch random_batch(const ModelConfig& config, Gen& gen, std::size_t batch,
                        std::size_t seq_len);

/// Relative distance between two flat vectors, ||a - b|| / max(||b||, tiny).
double relative_distance(const std::vector<float>& a, const std::vector<float>& b);

/// One toy decoder pretraining run on the bundled corpus.
struct ToyRun {
  double vocab_log = 0.0;  ///< ln of the model vocabulary
  std::vector<double> losses;
};
ToyRun toy_decoder_run(std::uint64_t seed, std::size_t steps);

/// 2-layer character LM on a short sentence repeated many times.
std::vector<double> char_lm_run(std::uint64_t seed, std::size_t steps);

/// 2-layer toy encoder fine-tuned on a synthetic pair task, then evaluated
/// on its own training split.
struct FinetuneRun {
  double first_loss = 0.0;
  double last_loss = 0.0;
  double train_accuracy = 0.0;
};
FinetuneRun pair_finetune_run(std::uint64_t seed, std::size_t examples, std::size_t steps);

/// Reference runs live in tests/fixtures as one number per line. Setting
/// DEEPSTACK_REGENERATE_FIXTURES=1 makes callers rewrite them instead.
bool regenerating_fixtures();
std::vector<double> read_fixture(const std::string& name);
void write_fixture(const std::string& name, const std::vector<double>& values);

/// Committed step budget for the toy decoder to halve its initial loss.
inline constexpr std::size_t kToyStepBudget = 100;
/// Losses over this many final steps are averaged before comparing.
inline constexpr std::size_t kToyTailWindow = 10;

}  // namespace deepstack::testkit
