#include "deepstack/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <random>

#include "deepstack/error.hpp"
#include "deepstack/rng.hpp"

namespace deepstack {

std::size_t PackedSequences::real_tokens() const {
  std::size_t n = 0;
  for (const auto& row : real) n += static_cast<std::size_t>(std::count(row.begin(), row.end(), 1));
  return n;
}

PackedSequences pack_documents(std::span<const std::vector<std::int32_t>> documents,
                               std::size_t seq_len, std::int32_t eod,
                               std::int32_t pad) {
  if (seq_len < 2) {
    throw ConfigError("pack_documents: seq_len must be at least 2, got " +
                      std::to_string(seq_len));
  }
  std::vector<std::int32_t> stream;
  for (const auto& doc : documents) {
    if (doc.empty()) continue;
    stream.insert(stream.end(), doc.begin(), doc.end());
    stream.push_back(eod);
  }
  if (stream.empty()) throw InputError("pack_documents: no non-empty document");

  PackedSequences out;
  out.seq_len = seq_len;
  for (std::size_t pos = 0; pos < stream.size(); pos += seq_len) {
    const std::size_t n = std::min(seq_len, stream.size() - pos);
    std::vector<std::int32_t> row(seq_len, pad);
    std::vector<std::uint8_t> real(seq_len, 0);
    std::copy_n(stream.begin() + static_cast<std::ptrdiff_t>(pos), n, row.begin());
    std::fill_n(real.begin(), n, 1);
    out.ids.push_back(std::move(row));
    out.real.push_back(std::move(real));
  }
  return out;
}

std::vector<std::string> read_documents(std::istream& in) {
  std::vector<std::string> docs;
  std::string current;
  std::string line;
  bool open = false;
  const auto is_blank = [](const std::string& s) {
    return std::all_of(s.begin(), s.end(), [](unsigned char c) {
      return c == ' ' || c == '\t' || c == '\r';
    });
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank(line)) {
      if (open) docs.push_back(std::move(current));
      current.clear();
      open = false;
      continue;
    }
    if (open) current.push_back('\n');
    current += line;
    open = true;
  }
  if (open) docs.push_back(std::move(current));
  return docs;
}

std::vector<std::string> read_documents(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus " + path.string());
  return read_documents(in);
}

namespace {

constexpr std::array<char, 4> kIndexMagic{'D', 'S', 'I', 'X'};
constexpr std::uint32_t kIndexVersion = 1;

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes{};
  using Bits = std::make_unsigned_t<U>;
  auto v = static_cast<Bits>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>(v & 0xFF);
    v = static_cast<Bits>(v >> 8);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in, const std::string& what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw InputError("truncated " + what);
  }
  std::make_unsigned_t<U> v = 0;
  for (std::size_t i = sizeof(U); i-- > 0;) v = static_cast<decltype(v)>((v << 8) | bytes[i]);
  return static_cast<U>(v);
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* ext) {
  std::filesystem::path p = stem;
  p += ext;
  return p;
}

}  // namespace

void write_token_cache(const std::filesystem::path& stem,
                       std::span<const std::vector<std::int32_t>> documents) {
  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  std::ofstream idx(with_suffix(stem, ".idx"), std::ios::binary);
  if (!bin || !idx) throw InputError("cannot write token cache " + stem.string());
  idx.write(kIndexMagic.data(), kIndexMagic.size());
  put_le<std::uint32_t>(idx, kIndexVersion);
  put_le<std::uint64_t>(idx, documents.size());
  std::uint64_t offset = 0;
  put_le<std::uint64_t>(idx, offset);
  for (const auto& doc : documents) {
    for (const auto id : doc) put_le<std::int32_t>(bin, id);
    offset += doc.size();
    put_le<std::uint64_t>(idx, offset);
  }
}

std::vector<std::vector<std::int32_t>> read_token_cache(
    const std::filesystem::path& stem) {
  const auto idx_path = with_suffix(stem, ".idx");
  std::ifstream idx(idx_path, std::ios::binary);
  std::ifstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  if (!idx || !bin) throw InputError("cannot open token cache " + stem.string());
  std::array<char, 4> magic{};
  idx.read(magic.data(), magic.size());
  if (!idx || magic != kIndexMagic) throw InputError(idx_path.string() + ": bad magic");
  const auto version = get_le<std::uint32_t>(idx, "index header");
  if (version != kIndexVersion) {
    throw InputError(idx_path.string() + ": unsupported version " + std::to_string(version));
  }
  const auto count = get_le<std::uint64_t>(idx, "index header");
  std::vector<std::uint64_t> offsets(count + 1);
  for (auto& o : offsets) o = get_le<std::uint64_t>(idx, "index offsets");
  std::vector<std::vector<std::int32_t>> docs(count);
  for (std::uint64_t d = 0; d < count; ++d) {
    if (offsets[d + 1] < offsets[d]) throw InputError(idx_path.string() + ": offsets decrease");
    docs[d].resize(offsets[d + 1] - offsets[d]);
    for (auto& id : docs[d]) id = get_le<std::int32_t>(bin, "token cache data");
  }
  return docs;
}

void MaskingPolicy::validate() const {
  if (!(corruption_rate > 0.0 && corruption_rate < 1.0)) {
    throw ParameterError("corruption_rate must lie in (0, 1)");
  }
  if (ngram_max == 0) throw ParameterError("ngram_max must be at least 1");
  if (mask_prob < 0 || random_prob < 0 || keep_prob < 0 ||
      std::abs(mask_prob + random_prob + keep_prob - 1.0) > 1e-9) {
    throw ParameterError("masking action probabilities must be non-negative and sum to 1");
  }
}

MaskedSequence apply_whole_word_ngram_mask(std::span<const std::int32_t> ids,
                                           std::span<const WordSpan> words,
                                           const MaskingPolicy& policy,
                                           std::int32_t mask_id,
                                           std::size_t vocab_size,
                                           std::size_t first_regular_id,
                                           std::uint64_t seed) {
  policy.validate();
  MaskedSequence out;
  out.ids.assign(ids.begin(), ids.end());
  out.labels.assign(ids.begin(), ids.end());
  out.chosen.assign(ids.size(), 0);
  const std::size_t n_words = words.size();
  if (n_words == 0) return out;

  const auto target = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(policy.corruption_rate * static_cast<double>(n_words))));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> starts(n_words);
  std::iota(starts.begin(), starts.end(), std::size_t{0});
  std::shuffle(starts.begin(), starts.end(), rng);

  std::vector<std::uint8_t> picked(n_words, 0);
  std::size_t n_picked = 0;
  std::uniform_int_distribution<std::size_t> ngram(1, policy.ngram_max);
  for (const std::size_t start : starts) {
    if (n_picked >= target) break;
    if (picked[start]) continue;
    std::size_t n = std::min(ngram(rng), target - n_picked);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t w = start + k;
      if (w >= n_words || picked[w]) break;
      picked[w] = 1;
      ++n_picked;
    }
  }

  std::uniform_real_distribution<double> action(0.0, 1.0);
  std::uniform_int_distribution<std::int64_t> random_id(
      static_cast<std::int64_t>(first_regular_id), static_cast<std::int64_t>(vocab_size) - 1);
  for (std::size_t w = 0; w < n_words; ++w) {
    if (!picked[w]) continue;
    const double r = action(rng);
    for (std::size_t p = words[w].begin; p < words[w].end; ++p) {
      out.chosen[p] = 1;
      if (r < policy.mask_prob) {
        out.ids[p] = mask_id;
      } else if (r < policy.mask_prob + policy.random_prob) {
        out.ids[p] = static_cast<std::int32_t>(random_id(rng));
      }
    }
  }
  return out;
}

SopExample make_sop_example(std::span<const std::int32_t> a,
                            std::span<const std::int32_t> b, std::uint64_t seed) {
  const bool swap = (splitmix64(mix_keys(seed, 0x50F)) >> 63) != 0;
  SopExample ex;
  if (swap) {
    ex.first.assign(b.begin(), b.end());
    ex.second.assign(a.begin(), a.end());
    ex.label = 0;
  } else {
    ex.first.assign(a.begin(), a.end());
    ex.second.assign(b.begin(), b.end());
    ex.label = 1;
  }
  return ex;
}

std::string_view to_string(Objective objective) {
  switch (objective) {
    case Objective::causal_lm: return "causal_lm";
    case Objective::masked_lm: return "masked_lm";
    case Objective::seq2seq: return "seq2seq";
  }
  return "unknown";
}

Objective objective_for(Family family) {
  switch (family) {
    case Family::decoder_only: return Objective::causal_lm;
    case Family::encoder_only: return Objective::masked_lm;
    case Family::encoder_decoder: return Objective::seq2seq;
  }
  throw ConfigError("unknown family");
}

namespace {

template <typename V>
V row_slice(const V& v, std::size_t width, std::size_t begin, std::size_t count) {
  if (v.empty()) return v;
  return V(v.begin() + static_cast<std::ptrdiff_t>(begin * width),
           v.begin() + static_cast<std::ptrdiff_t>((begin + count) * width));
}

}  // namespace

TrainBatch TrainBatch::rows(std::size_t begin, std::size_t count) const {
  if (begin + count > batch || count == 0) {
    throw InputError("batch rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for batch " +
                     std::to_string(batch));
  }
  TrainBatch out;
  out.objective = objective;
  out.batch = count;
  out.seq_len = seq_len;
  out.target_len = target_len;
  out.ids = row_slice(ids, seq_len, begin, count);
  out.segments = row_slice(segments, seq_len, begin, count);
  out.real = row_slice(real, seq_len, begin, count);
  const std::size_t label_width = objective == Objective::seq2seq ? target_len : seq_len;
  out.labels = row_slice(labels, label_width, begin, count);
  out.loss_mask = row_slice(loss_mask, label_width, begin, count);
  out.sop_labels = row_slice(sop_labels, 1, begin, count);
  out.target_ids = row_slice(target_ids, target_len, begin, count);
  return out;
}

ModelInputs TrainBatch::model_inputs() const {
  ModelInputs in;
  in.batch = batch;
  in.seq_len = seq_len;
  in.ids = ids;
  in.segments = segments;
  in.attend = real;
  in.target_len = target_len;
  in.target_ids = target_ids;
  return in;
}

TrainBatch make_lm_batch(const PackedSequences& packed, std::size_t first,
                         std::size_t count) {
  if (packed.size() == 0) throw InputError("no packed sequences");
  TrainBatch b;
  b.objective = Objective::causal_lm;
  b.batch = count;
  b.seq_len = packed.seq_len;
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t s = (first + r) % packed.size();
    b.ids.insert(b.ids.end(), packed.ids[s].begin(), packed.ids[s].end());
    b.real.insert(b.real.end(), packed.real[s].begin(), packed.real[s].end());
  }
  return b;
}

TrainBatch make_mlm_batch(const PackedSequences& packed, std::size_t first,
                          std::size_t count, const TokenizerVocab& vocab,
                          const MaskingPolicy& policy, std::uint64_t seed) {
  if (packed.size() == 0) throw InputError("no packed sequences");
  const std::size_t len = packed.seq_len;
  const std::size_t half = len / 2;
  TrainBatch b;
  b.objective = Objective::masked_lm;
  b.batch = count;
  b.seq_len = len;
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t s = (first + r) % packed.size();
    const auto& row = packed.ids[s];
    const std::uint64_t row_seed = mix_keys(seed, first + r);
    const std::span<const std::int32_t> ids(row);
    const SopExample sop = make_sop_example(ids.first(half), ids.subspan(half), row_seed);
    std::vector<std::int32_t> joined = sop.first;
    joined.insert(joined.end(), sop.second.begin(), sop.second.end());
    // Padding only ever trails a sequence; keep it trailing after a swap.
    std::vector<std::int32_t> unpadded;
    std::vector<std::int32_t> segments;
    const std::int32_t pad = vocab.specials().pad;
    for (std::size_t i = 0; i < joined.size(); ++i) {
      if (joined[i] == pad) continue;
      unpadded.push_back(joined[i]);
      segments.push_back(i < sop.first.size() ? 0 : 1);
    }
    const std::size_t n_real = unpadded.size();
    unpadded.resize(len, pad);
    segments.resize(len, 0);
    std::vector<std::uint8_t> attend(len, 0);
    std::fill_n(attend.begin(), n_real, 1);

    const auto words = vocab.word_spans(unpadded);
    const MaskedSequence masked = apply_whole_word_ngram_mask(
        unpadded, words, policy, vocab.specials().mask, vocab.size(),
        vocab.specials().count(), mix_keys(row_seed, 1));
    b.ids.insert(b.ids.end(), masked.ids.begin(), masked.ids.end());
    b.labels.insert(b.labels.end(), masked.labels.begin(), masked.labels.end());
    b.loss_mask.insert(b.loss_mask.end(), masked.chosen.begin(), masked.chosen.end());
    b.segments.insert(b.segments.end(), segments.begin(), segments.end());
    b.real.insert(b.real.end(), attend.begin(), attend.end());
    b.sop_labels.push_back(sop.label);
  }
  return b;
}

TrainBatch make_seq2seq_batch(const PackedSequences& packed, std::size_t first,
                              std::size_t count, std::int32_t bos) {
  if (packed.size() == 0) throw InputError("no packed sequences");
  const std::size_t len = packed.seq_len;
  const std::size_t src = len / 2;
  const std::size_t tgt = len - src;
  TrainBatch b;
  b.objective = Objective::seq2seq;
  b.batch = count;
  b.seq_len = src;
  b.target_len = tgt;
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t s = (first + r) % packed.size();
    const auto& row = packed.ids[s];
    const auto& real = packed.real[s];
    b.ids.insert(b.ids.end(), row.begin(), row.begin() + static_cast<std::ptrdiff_t>(src));
    b.real.insert(b.real.end(), real.begin(), real.begin() + static_cast<std::ptrdiff_t>(src));
    b.target_ids.push_back(bos);
    b.target_ids.insert(b.target_ids.end(), row.begin() + static_cast<std::ptrdiff_t>(src),
                        row.end() - 1);
    b.labels.insert(b.labels.end(), row.begin() + static_cast<std::ptrdiff_t>(src), row.end());
    b.loss_mask.insert(b.loss_mask.end(), real.begin() + static_cast<std::ptrdiff_t>(src),
                       real.end());
  }
  return b;
}

}  // namespace deepstack
