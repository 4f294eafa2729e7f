#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "deepstack/error.hpp"
#include "deepstack/model.hpp"
#include "deepstack/tokenizer.hpp"
#include "deepstack/train.hpp"

namespace deepstack {

struct ClassificationExample {
  std::string text_a;
  std::optional<std::string> text_b;
  std::string label;
};

struct ClassificationDataset {
  std::string split = "train";
  std::vector<ClassificationExample> examples;
  /// Sorted label names; for two labels the second one is positive.
  std::vector<std::string> labels;

  std::size_t size() const { return examples.size(); }
  bool is_pair() const;
  /// Index of `label` in `labels`; throws InputError if absent.
  std::size_t label_index(const std::string& label) const;
};

/// Tab-separated with a header naming columns text_a, label and optionally
/// text_b (any order, extra columns ignored). `labels` is built from the
/// file unless `label_vocab` is given, in which case unknown labels throw.
ClassificationDataset read_tsv_dataset(std::istream& in, std::string split,
                                       const std::vector<std::string>* label_vocab = nullptr);
ClassificationDataset read_tsv_dataset(const std::filesystem::path& path, std::string split,
                                       const std::vector<std::string>* label_vocab = nullptr);
void write_tsv_dataset(std::ostream& out, const ClassificationDataset& data);

/// Throws InputError if any (text_a, text_b) pair occurs in both splits.
void check_disjoint(const ClassificationDataset& a, const ClassificationDataset& b);

struct EvalMetrics {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::uint64_t correct = 0;
  std::uint64_t total = 0;
  bool binary = true;  ///< precision/recall/f1 are only defined when true
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;

  static EvalMetrics from_confusion(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn,
                                    std::uint64_t tn);
  /// Multi-class: accuracy only.
  static EvalMetrics from_counts(std::uint64_t correct, std::uint64_t total);
};

/// Pair layout: eod a... eod b... with segment 0 through the middle eod and
/// segment 1 after it; single sentences are eod a.... Truncated to max_len.
struct EncodedExample {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> segments;
  std::int32_t label = 0;
};

EncodedExample encode_example(const TokenizerVocab& vocab, const ClassificationExample& ex,
                              std::size_t label, std::size_t max_len);

/// Pads examples[first, first + count) into one batch with an attend mask.
ModelInputs make_classification_inputs(std::span<const EncodedExample> examples,
                                       std::size_t pad_id);

/// Adds head.cls.weight [d, classes] / head.cls.bias [classes] if missing.
void ensure_classifier_head(TransformerModel<float>& model, std::size_t classes,
                            std::uint64_t seed);

/// Logits [B, classes] from the pooled first-position representation.
template <typename T>
Tensor<T> classifier_logits(Tape<T>& tape, const TransformerModel<T>& model,
                            const ModelInputs& inputs, const ForwardContext& ctx);

struct FinetuneConfig {
  double lr = 2e-5;
  std::size_t epochs = 3;
  /// Overrides epochs when set.
  std::optional<std::size_t> max_steps;
  std::size_t batch_size = 16;
  /// Share of the steps spent ramping up to `lr` before linear decay.
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  std::size_t steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
};

/// Fine-tunes an encoder-only model with a linear-decay schedule. Throws
/// ConfigError for other families or a tokenizer larger than the model's
/// vocabulary. Deterministic given the seed.
FinetuneResult finetune(TransformerModel<float>& model, const TokenizerVocab& vocab,
                        const ClassificationDataset& train, const FinetuneConfig& config,
                        MetricsWriter* metrics = nullptr);

/// Eval-mode predictions on a split. Throws InputError on an empty split.
EvalMetrics evaluate(const TransformerModel<float>& model, const TokenizerVocab& vocab,
                     const ClassificationDataset& split, std::size_t batch_size = 32);

/// Toy paraphrase task over a 12-word vocabulary. Each text_a is three
/// random words; a positive text_b holds the same words in shuffled order,
/// negatives share no word with text_a. Labels are a fair coin per example.
ClassificationDataset make_synthetic_pair_task(std::size_t n, std::uint64_t seed,
                                               std::string split = "train");

struct SweepRow {
  std::string model;
  std::size_t depth = 0;
  EvalMetrics metrics;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::size_t best_depth = 0;
};

/// Depth of the best row by `score`; ties go to the smaller depth.
std::size_t select_depth(std::span<const SweepRow> rows,
                         const std::function<double(const EvalMetrics&)>& score);

struct SweepConfig {
  ModelConfig base;
  std::vector<std::size_t> depths;
  FinetuneConfig budget;
  std::uint64_t seed = 0;
};

/// Thrown when a depth fails; carries the rows finished so far.
class SweepAborted : public Error {
 public:
  SweepAborted(const std::string& what, std::vector<SweepRow> partial)
      : Error(what), partial_(std::move(partial)) {}
  const std::vector<SweepRow>& partial() const { return partial_; }

 private:
  std::vector<SweepRow> partial_;
};

/// Trains one model per depth (same seed and budget) and evaluates on dev.
/// Throws ConfigError for fewer than two depths.
SweepResult depth_sweep(const SweepConfig& config, const TokenizerVocab& vocab,
                        const ClassificationDataset& train,
                        const ClassificationDataset& dev);

/// Columns model,depth,precision,recall,f1,acc.
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

}  // namespace deepstack
