#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "eurobert/tokenizer.hpp"

using namespace eurobert;

namespace {

std::vector<std::string> sample_corpus() {
  return {"the cat sat on the mat", "the dog sat on the log", "a cat and a dog",
          "die Katze sitzt auf der Matte", "le chat est sur le tapis", "el gato esta en la alfombra",
          "the the the cat cat", "def f(x): return x * 2", "1 + 1 = 2, 2 + 2 = 4"};
}

std::string random_utf8(std::mt19937_64& rng) {
  static const std::vector<std::string> pieces{"a", "b", "z", " ", "  ", "\n", "\t", "é", "ß", "中", "文", "😀",
                                               "<|mask|>", "\\", "x", "the", "ü", "ñ", "\xce\xbb"};
  std::uniform_int_distribution<std::size_t> len(0, 24), pick(0, pieces.size() - 1);
  std::string s;
  const auto n = len(rng);
  for (std::size_t i = 0; i < n; ++i) s += pieces[pick(rng)];
  return s;
}

}  // namespace

TEST(Tokenizer, FirstMergeIsMostFrequentPair) {
  // 261 ids are reserved (5 specials + 256 bytes), so 262 learns one merge.
  auto v = train_bpe({"aaaa aaaa"}, 262);
  ASSERT_EQ(v.size(), 262u);
  ASSERT_EQ(v.merges().size(), 1u);
  EXPECT_EQ(v.token(v.merges()[0].first), "a");
  EXPECT_EQ(v.token(v.merges()[0].second), "a");
  EXPECT_EQ(v.token(kFirstMergeId), "aa");
}

TEST(Tokenizer, TieBreakIsLexicographic) {
  // (a,b) and (c,d) both occur twice; "a" < "c".
  auto v = train_bpe({"cd\nab\ncd\nab"}, 262);
  EXPECT_EQ(v.token(kFirstMergeId), "ab");
}

TEST(Tokenizer, Errors) {
  EXPECT_THROW(train_bpe({}, 300), TokenizerError);
  EXPECT_THROW(train_bpe({"", ""}, 300), TokenizerError);
  EXPECT_THROW(train_bpe({"abc"}, 261), TokenizerError);
  EXPECT_THROW(train_bpe({"ab"}, 400), TokenizerError);  // too few pairs to reach the size
}

TEST(Tokenizer, SpecialIdsReserved) {
  auto v = train_bpe(sample_corpus(), 300);
  EXPECT_EQ(v.size(), 300u);
  EXPECT_EQ(v.token(special::pad), "<|pad|>");
  EXPECT_EQ(v.token(special::parallel_sep), "<|parallel_sep|>");
  for (int b = 0; b < 256; ++b) EXPECT_EQ(v.token(kFirstByteId + b), std::string(1, static_cast<char>(b)));
}

TEST(Tokenizer, EmptyAndAllBytes) {
  auto v = train_bpe(sample_corpus(), 300);
  EXPECT_TRUE(v.encode("").ids.empty());
  std::string all;
  for (int b = 0; b < 256; ++b) all += static_cast<char>(b);
  auto enc = v.encode(all);
  EXPECT_EQ(v.decode(enc.ids), all);
}

TEST(Tokenizer, SpecialStringsAreNotSpecialIds) {
  auto v = train_bpe(sample_corpus(), 300);
  auto enc = v.encode("hello <|mask|> <|pad|><|eos|>");
  for (auto id : enc.ids) EXPECT_FALSE(Vocab::is_special(id));
  EXPECT_EQ(v.decode(enc.ids), "hello <|mask|> <|pad|><|eos|>");
}

TEST(Tokenizer, RoundTripRandomUtf8) {
  auto v = train_bpe(sample_corpus(), 320);
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto s = random_utf8(rng);
    auto enc = v.encode(s);
    ASSERT_EQ(v.decode(enc.ids), s);
    // Offsets tile the text in order.
    std::size_t cursor = 0;
    for (std::size_t t = 0; t < enc.ids.size(); ++t) {
      ASSERT_EQ(enc.offsets[t].first, cursor);
      ASSERT_EQ(s.substr(enc.offsets[t].first, enc.offsets[t].second - enc.offsets[t].first), v.token(enc.ids[t]));
      cursor = enc.offsets[t].second;
    }
    ASSERT_EQ(cursor, s.size());
  }
}

TEST(Tokenizer, MergesCompressCorpusText) {
  auto v = train_bpe(sample_corpus(), 320);
  EXPECT_LT(v.encode("the cat sat on the mat").ids.size(), std::string("the cat sat on the mat").size());
}

TEST(Tokenizer, Determinism) {
  auto a = train_bpe(sample_corpus(), 320);
  auto b = train_bpe(sample_corpus(), 320);
  EXPECT_EQ(a.merges(), b.merges());
}

TEST(Tokenizer, SaveLoadRoundTrip) {
  auto v = train_bpe(sample_corpus(), 320);
  std::stringstream ss;
  v.save(ss);
  auto w = Vocab::load(ss);
  EXPECT_EQ(w.size(), v.size());
  EXPECT_EQ(w.merges(), v.merges());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(w.token(static_cast<std::int32_t>(i)), v.token(static_cast<std::int32_t>(i)));
}

TEST(Tokenizer, LoadRejectsCorruptFiles) {
  std::stringstream bad_header("not-a-vocab\n");
  EXPECT_THROW(Vocab::load(bad_header), TokenizerError);

  auto v = train_bpe(sample_corpus(), 270);
  std::stringstream ss;
  v.save(ss);
  std::string text = ss.str();
  text.replace(text.find("vocab_size=270"), 14, "vocab_size=271");
  std::stringstream wrong_size(text);
  EXPECT_THROW(Vocab::load(wrong_size), TokenizerError);
}

TEST(Tokenizer, FertilitySingleAndSplitWords) {
  auto v = train_bpe({"aaaa aaaa"}, 262);  // knows "aa" only
  auto enc = v.encode("aa");
  std::vector<std::pair<std::size_t, std::size_t>> one{{0, 2}};
  EXPECT_DOUBLE_EQ(fertility(enc, one)[0], 1.0);

  auto enc3 = v.encode("xyz");
  std::vector<std::pair<std::size_t, std::size_t>> word{{0, 3}};
  EXPECT_DOUBLE_EQ(fertility(enc3, word)[0], 3.0);

  std::vector<std::pair<std::size_t, std::size_t>> outside{{1, 4}};
  EXPECT_THROW(fertility(enc3, outside), std::out_of_range);
}

TEST(Tokenizer, FertilityOfPartitionEqualsTokensPerWord) {
  auto v = train_bpe(sample_corpus(), 320);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s = random_utf8(rng) + "the cat";
    auto enc = v.encode(s);
    const auto spans = pretokenize(s);  // partitions the text; no token crosses a chunk
    const double expected = static_cast<double>(enc.ids.size()) / static_cast<double>(spans.size());
    EXPECT_NEAR(mean_fertility(enc, spans), expected, 1e-9);
  }
}

TEST(Tokenizer, StraddlingTokenCountsForBothWords) {
  Encoding enc;
  enc.text_length = 4;
  enc.ids = {10, 11};
  enc.offsets = {{0, 3}, {3, 4}};
  std::vector<std::pair<std::size_t, std::size_t>> spans{{0, 2}, {2, 4}};
  auto f = fertility(enc, spans);
  EXPECT_DOUBLE_EQ(f[0], 1.0);
  EXPECT_DOUBLE_EQ(f[1], 2.0);
}
