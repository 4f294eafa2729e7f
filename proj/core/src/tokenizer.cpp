#include "deepstack/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "deepstack/error.hpp"

namespace deepstack {

namespace {

constexpr std::string_view kFileMagic = "#version: deepstack-bpe/1";

bool is_space_byte(char c) {
  return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\v' ||
         c == '\f';
}

std::string to_hex(std::string_view bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (const char c : bytes) {
    const auto b = static_cast<unsigned char>(c);
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xF]);
  }
  return out;
}

std::string from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw InputError("odd-length hex field in vocab file");
  const auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw InputError(std::string("bad hex digit '") + c + "' in vocab file");
  };
  std::string out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    out.push_back(static_cast<char>(nibble(hex[i]) * 16 + nibble(hex[i + 1])));
  }
  return out;
}

// Reads the next non-empty line; fails loudly at end of stream.
std::string next_line(std::istream& in, const char* expecting) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) return line;
  }
  throw InputError(std::string("vocab file truncated, expected ") + expecting);
}

std::size_t parse_count(const std::string& line, std::string_view key) {
  std::istringstream is(line);
  std::string k;
  std::size_t n = 0;
  if (!(is >> k >> n) || k != key) {
    throw InputError("vocab file: expected '" + std::string(key) +
                     " <count>', got '" + line + "'");
  }
  return n;
}

}  // namespace

std::string_view to_string(SplitMode mode) {
  return mode == SplitMode::reversible ? "reversible" : "space-marked";
}

SplitMode parse_split_mode(std::string_view text) {
  if (text == "reversible" || text == "reversible-splitter") {
    return SplitMode::reversible;
  }
  if (text == "space-marked" || text == "space_marked") {
    return SplitMode::space_marked;
  }
  throw InputError("unknown split mode '" + std::string(text) + "'");
}

std::vector<std::string_view> pretokenize(std::string_view text, SplitMode mode) {
  std::vector<std::string_view> units;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == ' ') {
      const bool glue = mode == SplitMode::space_marked && i + 1 < text.size() &&
                        !is_space_byte(text[i + 1]);
      if (!glue) {
        units.push_back(text.substr(i, 1));
        ++i;
        continue;
      }
      std::size_t j = i + 1;
      while (j < text.size() && !is_space_byte(text[j])) ++j;
      units.push_back(text.substr(i, j - i));
      i = j;
    } else if (is_space_byte(c)) {
      units.push_back(text.substr(i, 1));
      ++i;
    } else {
      std::size_t j = i;
      while (j < text.size() && !is_space_byte(text[j])) ++j;
      units.push_back(text.substr(i, j - i));
      i = j;
    }
  }
  return units;
}

const std::string& TokenizerVocab::symbol(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(symbols_.size()));
  }
  return symbols_[static_cast<std::size_t>(id)];
}

std::int32_t TokenizerVocab::id_of(std::string_view symbol) const {
  const auto it = index_.find(std::string(symbol));
  return it == index_.end() ? -1 : it->second;
}

bool TokenizerVocab::is_whitespace(std::int32_t id) const {
  if (id == specials_.splitter) return true;
  if (is_special(id)) return false;
  const std::string& s = symbol(id);
  return std::all_of(s.begin(), s.end(), is_space_byte);
}

void TokenizerVocab::add_symbol(std::string bytes) {
  const auto id = static_cast<std::int32_t>(symbols_.size());
  if (bytes.size() == 1) byte_id_[static_cast<unsigned char>(bytes[0])] = id;
  index_.emplace(bytes, id);
  symbols_.push_back(std::move(bytes));
}

void TokenizerVocab::add_merge(std::int32_t left, std::int32_t right) {
  std::string joined = symbols_[static_cast<std::size_t>(left)] +
                       symbols_[static_cast<std::size_t>(right)];
  std::int32_t result = id_of(joined);
  if (result < 0) {
    result = static_cast<std::int32_t>(symbols_.size());
    add_symbol(std::move(joined));
  }
  merge_rank_.emplace(std::make_pair(left, right), merges_.size());
  merges_.push_back(Merge{left, right, result});
}

std::vector<std::int32_t> TokenizerVocab::encode_word(std::string_view word) const {
  std::vector<std::int32_t> syms;
  syms.reserve(word.size());
  for (const char c : word) {
    const std::int32_t id = byte_id_[static_cast<unsigned char>(c)];
    syms.push_back(id >= 0 ? id : specials_.unk);
  }
  while (syms.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      const auto it = merge_rank_.find({syms[i], syms[i + 1]});
      if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const Merge& m = merges_[best_rank];
    std::vector<std::int32_t> next;
    next.reserve(syms.size());
    for (std::size_t i = 0; i < syms.size(); ++i) {
      if (i + 1 < syms.size() && syms[i] == m.left && syms[i + 1] == m.right) {
        next.push_back(m.result);
        ++i;
      } else {
        next.push_back(syms[i]);
      }
    }
    syms = std::move(next);
  }
  return syms;
}

std::vector<std::int32_t> TokenizerVocab::encode(std::string_view text) const {
  std::vector<std::int32_t> ids;
  for (const std::string_view unit : pretokenize(text, mode_)) {
    if (mode_ == SplitMode::reversible && unit == " ") {
      ids.push_back(specials_.splitter);
      continue;
    }
    const auto word = encode_word(unit);
    ids.insert(ids.end(), word.begin(), word.end());
  }
  return ids;
}

std::string TokenizerVocab::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  for (const std::int32_t id : ids) {
    const std::string& s = symbol(id);  // range-checked
    if (id == specials_.splitter) {
      out.push_back(' ');
    } else if (id == specials_.eod) {
      out += eod_sentinel_;
    } else {
      out += s;
    }
  }
  return out;
}

std::vector<std::int32_t> TokenizerVocab::encode_documents(
    std::span<const std::string> documents) const {
  std::vector<std::int32_t> ids;
  for (const std::string& doc : documents) {
    const auto part = encode(doc);
    ids.insert(ids.end(), part.begin(), part.end());
    ids.push_back(specials_.eod);
  }
  return ids;
}

std::vector<WordSpan> TokenizerVocab::word_spans(
    std::span<const std::int32_t> ids) const {
  std::vector<WordSpan> spans;
  std::size_t i = 0;
  while (i < ids.size()) {
    if (is_special(ids[i]) || is_whitespace(ids[i])) {
      ++i;
      continue;
    }
    const std::size_t begin = i;
    ++i;
    while (i < ids.size() && !is_special(ids[i]) && !is_whitespace(ids[i])) {
      // In space-marked mode a leading space opens the next word.
      if (mode_ == SplitMode::space_marked && symbol(ids[i]).front() == ' ') break;
      ++i;
    }
    spans.push_back(WordSpan{begin, i});
  }
  return spans;
}

void TokenizerVocab::save(std::ostream& out) const {
  out << kFileMagic << '\n';
  out << "mode " << to_string(mode_) << '\n';
  out << "sentinel " << to_hex(eod_sentinel_) << '\n';
  out << "alphabet " << alphabet_size_ << '\n';
  for (std::size_t i = 0; i < alphabet_size_; ++i) {
    out << to_hex(symbols_[specials_.count() + i]) << '\n';
  }
  out << "merges " << merges_.size() << '\n';
  for (const Merge& m : merges_) {
    out << to_hex(symbols_[static_cast<std::size_t>(m.left)]) << ' '
        << to_hex(symbols_[static_cast<std::size_t>(m.right)]) << '\n';
  }
  out << "specials " << specials_.count() << '\n';
  out << "pad " << specials_.pad << '\n';
  out << "unk " << specials_.unk << '\n';
  out << "eod " << specials_.eod << '\n';
  out << "mask " << specials_.mask << '\n';
  if (specials_.splitter >= 0) out << "splitter " << specials_.splitter << '\n';
}

void TokenizerVocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write vocab file " + path);
  save(out);
}

TokenizerVocab TokenizerVocab::load(std::istream& in) {
  if (next_line(in, "header") != kFileMagic) {
    throw InputError("not a deepstack BPE vocab file (bad header)");
  }
  TokenizerVocab v;
  {
    std::istringstream is(next_line(in, "mode"));
    std::string key, value;
    is >> key >> value;
    if (key != "mode") throw InputError("vocab file: expected mode line");
    v.mode_ = parse_split_mode(value);
  }
  {
    std::istringstream is(next_line(in, "sentinel"));
    std::string key, value;
    is >> key >> value;
    if (key != "sentinel") throw InputError("vocab file: expected sentinel line");
    v.eod_sentinel_ = from_hex(value);
  }
  const std::size_t alphabet = parse_count(next_line(in, "alphabet"), "alphabet");
  std::vector<std::string> base(alphabet);
  for (auto& sym : base) sym = from_hex(next_line(in, "alphabet symbol"));
  const std::size_t n_merges = parse_count(next_line(in, "merges"), "merges");
  std::vector<std::pair<std::string, std::string>> merges(n_merges);
  for (auto& [l, r] : merges) {
    std::istringstream is(next_line(in, "merge"));
    std::string a, b;
    if (!(is >> a >> b)) throw InputError("vocab file: malformed merge line");
    l = from_hex(a);
    r = from_hex(b);
  }
  const std::size_t n_specials = parse_count(next_line(in, "specials"), "specials");
  if (n_specials != 4 && n_specials != 5) {
    throw InputError("vocab file: expected 4 or 5 specials");
  }
  for (std::size_t i = 0; i < n_specials; ++i) {
    std::istringstream is(next_line(in, "special"));
    std::string name;
    std::int32_t id = -1;
    if (!(is >> name >> id)) throw InputError("vocab file: malformed special line");
    if (name == "pad") v.specials_.pad = id;
    else if (name == "unk") v.specials_.unk = id;
    else if (name == "eod") v.specials_.eod = id;
    else if (name == "mask") v.specials_.mask = id;
    else if (name == "splitter") v.specials_.splitter = id;
    else throw InputError("vocab file: unknown special '" + name + "'");
  }
  const SpecialTokens canonical{0, 1, 2, 3, n_specials == 5 ? 4 : -1};
  const auto& s = v.specials_;
  if (s.pad != canonical.pad || s.unk != canonical.unk || s.eod != canonical.eod ||
      s.mask != canonical.mask || s.splitter != canonical.splitter) {
    throw InputError("vocab file: specials must occupy ids 0..count-1");
  }
  if ((v.mode_ == SplitMode::reversible) != (s.splitter >= 0)) {
    throw InputError("vocab file: splitter present iff mode is reversible");
  }

  v.symbols_ = {"<pad>", "<unk>", "<eod>", "<mask>"};
  if (s.splitter >= 0) v.symbols_.push_back("<splitter>");
  for (auto& sym : base) {
    if (v.index_.count(sym)) throw InputError("vocab file: duplicate alphabet symbol");
    v.add_symbol(std::move(sym));
  }
  v.alphabet_size_ = alphabet;
  for (const auto& [l, r] : merges) {
    const std::int32_t li = v.id_of(l);
    const std::int32_t ri = v.id_of(r);
    if (li < 0 || ri < 0) {
      throw InputError("vocab file: merge references unknown symbol");
    }
    v.add_merge(li, ri);
  }
  return v;
}

TokenizerVocab TokenizerVocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open vocab file " + path);
  return load(in);
}

TokenizerVocab train_bpe(std::string_view corpus, std::size_t target_vocab_size,
                         const BpeTrainOptions& options) {
  if (corpus.empty()) throw InputError("train_bpe: empty corpus");

  TokenizerVocab v;
  v.mode_ = options.mode;
  v.eod_sentinel_ = options.eod_sentinel;
  v.symbols_ = {"<pad>", "<unk>", "<eod>", "<mask>"};
  if (options.mode == SplitMode::reversible) {
    v.specials_.splitter = 4;
    v.symbols_.push_back("<splitter>");
  }

  // Word frequencies; splitter units carry no mergeable content.
  std::map<std::string_view, std::uint64_t> freq;
  for (const std::string_view unit : pretokenize(corpus, options.mode)) {
    if (options.mode == SplitMode::reversible && unit == " ") continue;
    ++freq[unit];
  }

  std::array<bool, 256> seen{};
  for (const auto& [word, count] : freq) {
    for (const char c : word) seen[static_cast<unsigned char>(c)] = true;
  }
  for (int b = 0; b < 256; ++b) {
    if (options.mode == SplitMode::reversible && b == ' ') continue;
    if (seen[b] || options.byte_fallback) {
      v.add_symbol(std::string(1, static_cast<char>(b)));
      ++v.alphabet_size_;
    }
  }
  if (v.alphabet_size_ == 0) {
    throw InputError("train_bpe: corpus contains only splitter spaces");
  }
  if (target_vocab_size <= v.size()) {
    throw InputError("train_bpe: target vocabulary " +
                     std::to_string(target_vocab_size) +
                     " leaves no room for merges over " +
                     std::to_string(v.alphabet_size_) + " symbols + " +
                     std::to_string(v.specials_.count()) + " specials");
  }

  struct Word {
    std::vector<std::int32_t> syms;
    std::uint64_t count;
  };
  std::vector<Word> words;
  words.reserve(freq.size());
  for (const auto& [word, count] : freq) {
    Word w{{}, count};
    for (const char c : word) w.syms.push_back(v.byte_id_[static_cast<unsigned char>(c)]);
    words.push_back(std::move(w));
  }

  while (v.size() < target_vocab_size) {
    std::map<std::pair<std::int32_t, std::int32_t>, std::uint64_t> pairs;
    for (const Word& w : words) {
      for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) {
        pairs[{w.syms[i], w.syms[i + 1]}] += w.count;
      }
    }
    const std::pair<std::int32_t, std::int32_t>* best = nullptr;
    std::uint64_t best_count = 0;
    for (const auto& [pair, count] : pairs) {
      if (count > best_count) {
        best = &pair;
        best_count = count;
      } else if (count == best_count && best != nullptr) {
        const auto& a = v.symbols_[static_cast<std::size_t>(pair.first)];
        const auto& b = v.symbols_[static_cast<std::size_t>(pair.second)];
        const auto& ba = v.symbols_[static_cast<std::size_t>(best->first)];
        const auto& bb = v.symbols_[static_cast<std::size_t>(best->second)];
        if (std::tie(a, b) < std::tie(ba, bb)) best = &pair;
      }
    }
    if (best == nullptr || best_count < 2) break;
    const auto [left, right] = *best;
    v.add_merge(left, right);
    const std::int32_t result = v.merges_.back().result;
    for (Word& w : words) {
      std::vector<std::int32_t> next;
      next.reserve(w.syms.size());
      for (std::size_t i = 0; i < w.syms.size(); ++i) {
        if (i + 1 < w.syms.size() && w.syms[i] == left && w.syms[i + 1] == right) {
          next.push_back(result);
          ++i;
        } else {
          next.push_back(w.syms[i]);
        }
      }
      w.syms = std::move(next);
    }
  }
  return v;
}

}  // namespace deepstack
