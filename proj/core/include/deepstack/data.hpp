#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "deepstack/model.hpp"
#include "deepstack/tokenizer.hpp"

namespace deepstack {

/// Fixed-length sequences cut from a stream of documents joined by
/// end-of-document. `real[i]` is 0 only on padding of the final sequence.
struct PackedSequences {
  std::size_t seq_len = 0;
  std::vector<std::vector<std::int32_t>> ids;
  std::vector<std::vector<std::uint8_t>> real;

  std::size_t size() const { return ids.size(); }
  std::size_t real_tokens() const;
};

/// Greedy in-order packing: d0 eod d1 eod ... split every seq_len tokens.
/// Empty documents are skipped. Throws ConfigError if seq_len < 2 and
/// InputError if no document has tokens.
PackedSequences pack_documents(std::span<const std::vector<std::int32_t>> documents,
                               std::size_t seq_len, std::int32_t eod,
                               std::int32_t pad);

/// UTF-8 text with one document per blank-line-separated block. Lines of a
/// block are joined with '\n'; surrounding blank lines are dropped.
std::vector<std::string> read_documents(std::istream& in);
std::vector<std::string> read_documents(const std::filesystem::path& path);

/// Token cache on disk:
///   <stem>.bin  concatenated ids, int32 little-endian
///   <stem>.idx  "DSIX" magic, u32 version (1), u64 document count n,
///               then n + 1 u64 offsets into .bin (in ids), little-endian
void write_token_cache(const std::filesystem::path& stem,
                       std::span<const std::vector<std::int32_t>> documents);
std::vector<std::vector<std::int32_t>> read_token_cache(
    const std::filesystem::path& stem);

struct MaskingPolicy {
  double corruption_rate = 0.15;
  std::size_t ngram_max = 3;
  double mask_prob = 0.8;
  double random_prob = 0.1;
  double keep_prob = 0.1;

  /// Throws ParameterError unless the probabilities sum to 1 and
  /// 0 < corruption_rate < 1.
  void validate() const;
};

struct MaskedSequence {
  std::vector<std::int32_t> ids;      ///< corrupted input
  std::vector<std::int32_t> labels;   ///< original ids
  std::vector<std::uint8_t> chosen;   ///< 1 exactly at corrupted positions
};

/// Whole-word n-gram masking of one sequence. Selects
/// max(1, round(rate * words)) whole words as n-grams of 1..ngram_max
/// consecutive words; every word of a chosen n-gram gets one action
/// (mask id / random non-special id / keep). Positions outside `words`
/// (specials, whitespace) are never touched.
MaskedSequence apply_whole_word_ngram_mask(std::span<const std::int32_t> ids,
                                           std::span<const WordSpan> words,
                                           const MaskingPolicy& policy,
                                           std::int32_t mask_id,
                                           std::size_t vocab_size,
                                           std::size_t first_regular_id,
                                           std::uint64_t seed);

struct SopExample {
  std::vector<std::int32_t> first;
  std::vector<std::int32_t> second;
  std::int32_t label = 1;  ///< 1 iff original order
};

/// Swaps the pair with probability 0.5 (a pure function of the seed).
SopExample make_sop_example(std::span<const std::int32_t> a,
                            std::span<const std::int32_t> b, std::uint64_t seed);

enum class Objective { causal_lm, masked_lm, seq2seq };

std::string_view to_string(Objective objective);
Objective objective_for(Family family);

/// One training batch, row-major [batch, seq_len]. Which fields are filled
/// depends on `objective`:
///  - causal_lm: ids, real (targets are the next ids)
///  - masked_lm: ids (corrupted), segments, real, labels, loss_mask, sop_labels
///  - seq2seq: ids (source), real, target_ids (shifted right), labels,
///    loss_mask over [batch, target_len]
struct TrainBatch {
  Objective objective = Objective::causal_lm;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> segments;
  std::vector<std::uint8_t> real;
  std::vector<std::int32_t> labels;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::int32_t> sop_labels;
  std::size_t target_len = 0;
  std::vector<std::int32_t> target_ids;

  /// Rows [begin, begin + count) as a standalone batch.
  TrainBatch rows(std::size_t begin, std::size_t count) const;
  ModelInputs model_inputs() const;
};

/// Selects sequences [first, first + count) (wrapping around) of `packed`.
TrainBatch make_lm_batch(const PackedSequences& packed, std::size_t first,
                         std::size_t count);

/// Sequence halves become the SOP pair (segment 0 / segment 1), then whole-
/// word masking runs over the result. Seeds derive from (seed, sequence index).
TrainBatch make_mlm_batch(const PackedSequences& packed, std::size_t first,
                          std::size_t count, const TokenizerVocab& vocab,
                          const MaskingPolicy& policy, std::uint64_t seed);

/// Source is the first half of each packed sequence, target the second;
/// the decoder input is the target shifted right behind `bos`.
TrainBatch make_seq2seq_batch(const PackedSequences& packed, std::size_t first,
                              std::size_t count, std::int32_t bos);

}  // namespace deepstack
