#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace deepstack {

/// How word boundaries are represented in the token stream.
///  - space_marked: a space is glued to the front of the following word
///    (" happy" and "happy" are distinct symbols).
///  - reversible: every space is its own splitter token and words are
///    learned without markers, so "happy" is one symbol wherever it occurs.
enum class SplitMode { space_marked, reversible };

std::string_view to_string(SplitMode mode);
SplitMode parse_split_mode(std::string_view text);

struct SpecialTokens {
  std::int32_t pad = 0;
  std::int32_t unk = 1;
  std::int32_t eod = 2;
  std::int32_t mask = 3;
  std::int32_t splitter = -1;  ///< only present in reversible mode

  std::size_t count() const { return splitter >= 0 ? 5 : 4; }
};

struct WordSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  ///< exclusive
};

struct BpeTrainOptions {
  SplitMode mode = SplitMode::reversible;
  /// Seed the alphabet with all 256 byte values instead of only those seen
  /// in the corpus, so arbitrary byte strings encode without <unk>. In
  /// reversible mode the space byte is the splitter special, leaving 255.
  bool byte_fallback = false;
  std::string eod_sentinel = "<eod>";
};

/// Byte-level BPE vocabulary. Ids: specials first, then base byte symbols,
/// then merge results in learned order. Immutable after construction.
class TokenizerVocab {
 public:
  struct Merge {
    std::int32_t left;
    std::int32_t right;
    std::int32_t result;
  };

  TokenizerVocab() { byte_id_.fill(-1); }

  std::size_t size() const { return symbols_.size(); }
  SplitMode mode() const { return mode_; }
  const SpecialTokens& specials() const { return specials_; }
  const std::string& eod_sentinel() const { return eod_sentinel_; }
  const std::vector<Merge>& merges() const { return merges_; }
  std::size_t alphabet_size() const { return alphabet_size_; }

  /// Raw bytes of a non-special symbol; display name for specials.
  const std::string& symbol(std::int32_t id) const;
  /// -1 if absent. Specials are not addressable by their display name.
  std::int32_t id_of(std::string_view symbol) const;
  bool is_special(std::int32_t id) const {
    return id >= 0 && static_cast<std::size_t>(id) < specials_.count();
  }
  /// Tokens made only of whitespace bytes, plus the splitter.
  bool is_whitespace(std::int32_t id) const;

  std::vector<std::int32_t> encode(std::string_view text) const;
  /// Throws IndexError on ids outside the vocabulary.
  std::string decode(std::span<const std::int32_t> ids) const;

  /// Documents joined by end-of-document: encode(d0) eod encode(d1) eod ...
  /// The eod follows the last token of a document directly; a leading space
  /// of the next document becomes its first splitter (separator first,
  /// then splitter).
  std::vector<std::int32_t> encode_documents(
      std::span<const std::string> documents) const;

  /// Whole-word units of a token sequence. Specials and whitespace tokens are
  /// boundaries and belong to no span.
  std::vector<WordSpan> word_spans(std::span<const std::int32_t> ids) const;

  void save(std::ostream& out) const;
  void save(const std::string& path) const;
  static TokenizerVocab load(std::istream& in);
  static TokenizerVocab load(const std::string& path);

  friend TokenizerVocab train_bpe(std::string_view corpus,
                                  std::size_t target_vocab_size,
                                  const BpeTrainOptions& options);

 private:
  void add_symbol(std::string bytes);
  void add_merge(std::int32_t left, std::int32_t right);
  std::vector<std::int32_t> encode_word(std::string_view word) const;

  SplitMode mode_ = SplitMode::reversible;
  SpecialTokens specials_;
  std::string eod_sentinel_ = "<eod>";
  std::size_t alphabet_size_ = 0;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, std::int32_t> index_;
  std::vector<Merge> merges_;
  std::map<std::pair<std::int32_t, std::int32_t>, std::size_t> merge_rank_;
  std::array<std::int32_t, 256> byte_id_;
};

/// Greedy BPE: repeatedly merge the most frequent adjacent pair (ties go to
/// the lexicographically smallest pair of symbol strings) until the
/// vocabulary reaches `target_vocab_size` or no pair occurs twice.
/// Throws InputError for an empty corpus or a target that leaves no room
/// for merges.
TokenizerVocab train_bpe(std::string_view corpus, std::size_t target_vocab_size,
                         const BpeTrainOptions& options = {});

/// Splits text into BPE word units for the given mode. Concatenating the
/// units (with one space per splitter unit) reproduces the text exactly.
/// Splitter units are returned as a single " ".
std::vector<std::string_view> pretokenize(std::string_view text, SplitMode mode);

/// Vocabulary sizes used by the reference model families.
namespace vocab_sizes {
inline constexpr std::size_t kGpt = 30000;
inline constexpr std::size_t kBertEnglish = 30522;
inline constexpr std::size_t kBertChinese = 21128;
inline constexpr std::size_t kCpm2 = 26240;
inline constexpr std::size_t kEpm2 = 29752;
}  // namespace vocab_sizes

}  // namespace deepstack
