#include <gtest/gtest.h>

#include <sstream>

#include "deepstack/data.hpp"
#include "deepstack/error.hpp"
#include "deepstack/tokenizer.hpp"
#include "support/support.hpp"

using namespace deepstack;
using deepstack::testkit::Gen;

namespace {

std::string bundled_corpus() {
  std::string text;
  for (const auto& d : read_documents(testkit::data_path("data/toy_corpus.txt"))) text += d + "\n";
  return text;
}

}  // namespace

TEST(Bpe, SingleCandidatePairIsMergedFirst) {
  BpeTrainOptions opts;
  opts.mode = SplitMode::space_marked;
  const auto vocab = train_bpe("aaaa", 6, opts);
  ASSERT_EQ(vocab.specials().count(), 4u);
  ASSERT_EQ(vocab.size(), 6u);
  ASSERT_EQ(vocab.merges().size(), 1u);
  EXPECT_EQ(vocab.symbol(vocab.merges()[0].result), "aa");
  EXPECT_EQ(vocab.symbol(vocab.merges()[0].left), "a");
  EXPECT_EQ(vocab.encode("aaaa"), (std::vector<std::int32_t>{5, 5}));
}

TEST(Bpe, MostFrequentPairBeatsPairsWithSpace) {
  for (SplitMode mode : {SplitMode::space_marked, SplitMode::reversible}) {
    BpeTrainOptions opts;
    opts.mode = mode;
    const auto vocab = train_bpe("abab abab", 64, opts);
    ASSERT_FALSE(vocab.merges().empty());
    EXPECT_EQ(vocab.symbol(vocab.merges()[0].result), "ab") << to_string(mode);
  }
}

TEST(Bpe, PreconditionsAndErrors) {
  EXPECT_THROW(train_bpe("", 100), InputError);
  // Alphabet {a, b} plus five specials leaves no room for a merge.
  EXPECT_THROW(train_bpe("abab", 7), InputError);
  const auto vocab = train_bpe("hello world", 40);
  const std::vector<std::int32_t> bad{static_cast<std::int32_t>(vocab.size())};
  EXPECT_THROW(vocab.decode(bad), IndexError);
  EXPECT_THROW(parse_split_mode("bogus"), InputError);
}

TEST(Bpe, EmptyAndSpecialRoundTrips) {
  const auto vocab = train_bpe("hello world hello", 40);
  EXPECT_TRUE(vocab.encode("").empty());
  EXPECT_EQ(vocab.decode({}), "");
  EXPECT_EQ(vocab.decode(vocab.encode("hello world")), "hello world");
  const std::vector<std::int32_t> eod{vocab.specials().eod};
  EXPECT_EQ(vocab.decode(eod), vocab.eod_sentinel());
}

TEST(Bpe, ReversibleModeLearnsOneSymbolForAWordEverywhere) {
  const std::string corpus = "happy happy happy happy. happy? so happy happy";
  const auto rev = train_bpe(corpus, 60);
  const auto a = rev.encode("happy");
  const auto b = rev.encode(" happy");
  ASSERT_EQ(a.size(), 1u);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0], rev.specials().splitter);
  EXPECT_EQ(b[1], a[0]);

  BpeTrainOptions marked;
  marked.mode = SplitMode::space_marked;
  const auto sm = train_bpe(corpus, 60, marked);
  EXPECT_NE(sm.encode("happy"), sm.encode(" happy"));
}

TEST(Bpe, UnknownBytesMapToUnknownId) {
  const auto vocab = train_bpe("abc abc", 20);
  const auto ids = vocab.encode("abz");
  EXPECT_NE(std::find(ids.begin(), ids.end(), vocab.specials().unk), ids.end());
}

TEST(Bpe, ReversibleRoundTripOnRandomBytes) {
  BpeTrainOptions opts;
  opts.byte_fallback = true;
  const auto vocab = train_bpe(bundled_corpus(), 512, opts);
  Gen gen(99);
  for (int t = 0; t < 1000; ++t) {
    const std::string s = gen.bytes(gen.size(0, 64));
    ASSERT_EQ(vocab.decode(vocab.encode(s)), s) << "trial " << t;
  }
}

TEST(Bpe, ReversibleRoundTripOnCorpusAndSpacing) {
  const std::string corpus = bundled_corpus();
  const auto vocab = train_bpe(corpus, 400);
  EXPECT_EQ(vocab.decode(vocab.encode(corpus)), corpus);
  for (const char* s : {"  two  spaces", " lead", "trail ", "a\nb", "   "}) {
    EXPECT_EQ(vocab.decode(vocab.encode(s)), s);
  }
}

TEST(Bpe, SaveLoadPreservesEncoding) {
  for (SplitMode mode : {SplitMode::space_marked, SplitMode::reversible}) {
    BpeTrainOptions opts;
    opts.mode = mode;
    const auto vocab = train_bpe(bundled_corpus(), 300, opts);
    std::stringstream ss;
    vocab.save(ss);
    const auto back = TokenizerVocab::load(ss);
    EXPECT_EQ(back.size(), vocab.size());
    EXPECT_EQ(back.mode(), mode);
    const std::string probe = "The quick fox, again and again.";
    EXPECT_EQ(back.encode(probe), vocab.encode(probe));
  }
}

TEST(Bpe, TrainingIsDeterministic) {
  const auto a = train_bpe(bundled_corpus(), 300);
  const auto b = train_bpe(bundled_corpus(), 300);
  std::stringstream sa, sb;
  a.save(sa);
  b.save(sb);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(Bpe, DocumentsJoinWithSeparatorBeforeSplitter) {
  const auto vocab = train_bpe("one two one two", 30);
  const std::vector<std::string> docs{"one", " two"};
  const auto ids = vocab.encode_documents(docs);
  const auto one = vocab.encode("one");
  ASSERT_GE(ids.size(), one.size() + 2);
  EXPECT_EQ(ids[one.size()], vocab.specials().eod);
  EXPECT_EQ(ids[one.size() + 1], vocab.specials().splitter);
  EXPECT_EQ(ids.back(), vocab.specials().eod);
}

TEST(Bpe, WordSpansNeverIncludeWhitespaceOrSpecials) {
  const auto vocab = train_bpe(bundled_corpus(), 200);
  const auto ids = vocab.encode("several words in a short line");
  for (const auto& span : vocab.word_spans(ids)) {
    ASSERT_LT(span.begin, span.end);
    for (std::size_t i = span.begin; i < span.end; ++i) {
      EXPECT_FALSE(vocab.is_whitespace(ids[i]));
      EXPECT_FALSE(vocab.is_special(ids[i]));
    }
  }
  EXPECT_EQ(vocab.word_spans(ids).size(), 6u);
}

TEST(Pretokenize, UnitsConcatenateBackToText) {
  Gen gen(5);
  const std::string alphabet = "ab c.\n";
  for (int t = 0; t < 200; ++t) {
    std::string s;
    for (std::size_t i = gen.size(0, 20); i > 0; --i) s += alphabet[gen.size(0, alphabet.size() - 1)];
    for (SplitMode mode : {SplitMode::space_marked, SplitMode::reversible}) {
      std::string joined;
      for (auto unit : pretokenize(s, mode)) joined += unit;
      EXPECT_EQ(joined, s);
    }
  }
}
