#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "dispatcher/corpus.hpp"

using namespace dispatcher;
namespace fs = std::filesystem;
using Tokens = std::vector<std::string>;

TEST(Preprocess, Examples) {
  EXPECT_EQ(preprocess("a b\n", TokenizerMode::kWord), (Tokens{"a", "b", "<EOS>"}));
  EXPECT_EQ(preprocess("", TokenizerMode::kWord), Tokens{});
  EXPECT_EQ(preprocess("", TokenizerMode::kChar), Tokens{});
  EXPECT_EQ(preprocess("hi\n", TokenizerMode::kChar), (Tokens{"h", "i", "<EOS>"}));
}

TEST(Preprocess, WordModeCollapsesWhitespaceAndKeepsTrailingWord) {
  EXPECT_EQ(preprocess("  the\tcat \r\n\nsat", TokenizerMode::kWord),
            (Tokens{"the", "cat", "<EOS>", "<EOS>", "sat"}));
}

TEST(Preprocess, CharModeSplitsScalarValues) {
  EXPECT_EQ(preprocess("\xc3\xa9t\xe2\x82\xac\n", TokenizerMode::kChar),
            (Tokens{"\xc3\xa9", "t", "\xe2\x82\xac", "<EOS>"}));
}

TEST(Preprocess, InvalidUtf8ReportsByteOffset) {
  for (const std::string bad : {std::string("ab\xff"), std::string("ab\xc3"), std::string("ab\xc0\x80"),
                                std::string("ab\xed\xa0\x80")}) {
    try {
      preprocess(bad, TokenizerMode::kChar);
      FAIL() << "accepted invalid input";
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find("offset 2"), std::string::npos) << e.what();
    }
  }
}

TEST(Vocab, ReservedIdsAlwaysPresent) {
  const Vocab v = build_vocab({"x"}, 1, 0);
  EXPECT_EQ(v.id("<UNK>"), kUnkId);
  EXPECT_EQ(v.id("<EOS>"), kEosId);
  EXPECT_EQ(v.size(), 3u);
}

TEST(Vocab, CapAndFrequencyOrdering) {
  const Vocab small = build_vocab({"a", "a", "b"}, 1, 3);
  EXPECT_EQ(small.size(), 3u);
  EXPECT_TRUE(small.contains("a"));
  EXPECT_EQ(small.id("b"), kUnkId);
  const Vocab big = build_vocab({"a", "a", "b"}, 1, 4);
  EXPECT_TRUE(big.contains("b"));
  const Vocab ties = build_vocab({"z", "y", "x", "x"}, 1, 0);
  EXPECT_EQ(ties.tokens(), (Tokens{"<UNK>", "<EOS>", "x", "y", "z"}));
  const Vocab counted = build_vocab({"a", "a", "b"}, 2, 0);
  EXPECT_FALSE(counted.contains("b"));
  EXPECT_THROW(build_vocab({}, 1, 0), DataError);
}

TEST(Vocab, RoundTripsInVocabularyStreams) {
  const Tokens stream = preprocess("the cat sat\non the mat\n", TokenizerMode::kWord);
  const Vocab v = build_vocab(stream, 1, 0);
  const auto ids = v.encode(stream);
  EXPECT_EQ(v.decode(ids), stream);
  EXPECT_EQ(v.encode(v.decode(ids)), ids);
  EXPECT_EQ(detokenize(stream, TokenizerMode::kWord), "the cat sat\non the mat\n");
}

TEST(Vocab, OovRateReportedNotRaised) {
  const Vocab v = build_vocab({"a", "b"}, 1, 0);
  EXPECT_DOUBLE_EQ(oov_rate({"a", "c", "d", "<EOS>"}, v), 0.5);
  EXPECT_EQ(v.encode({"c"}), (std::vector<std::size_t>{kUnkId}));
}

TEST(Vocab, SaveLoadRoundTrip) {
  const fs::path p = fs::temp_directory_path() / "dispatcher_vocab_test.txt";
  const Vocab v = build_vocab(preprocess("hello world\n", TokenizerMode::kChar), 1, 0);
  v.save(p);
  const Vocab w = Vocab::load(p);
  EXPECT_EQ(v.tokens(), w.tokens());
  std::ofstream(p) << "nope\n";
  EXPECT_THROW(Vocab::load(p), DataError);
}

TEST(Corpus, SplitPathsAndMissingFiles) {
  EXPECT_EQ(split_path("data/tiny", Split::kValid).string(), "data/tiny.valid.txt");
  try {
    load_split_tokens("/nonexistent/corpus", Split::kTrain, TokenizerMode::kChar);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/corpus.train.txt"), std::string::npos);
  }
}

TEST(Corpus, BundledTinyCorpusLoads) {
  const fs::path base = fs::path(DISPATCHER_SOURCE_DIR) / "data" / "tiny";
  const Tokens train = load_split_tokens(base, Split::kTrain, TokenizerMode::kChar);
  const Vocab v = build_vocab(train, 1, 0);
  const TokenStream valid = load_split(base, Split::kValid, TokenizerMode::kChar, v);
  EXPECT_GT(train.size(), 40000u);
  EXPECT_EQ(valid.split, Split::kValid);
  for (std::size_t id : valid.ids) EXPECT_LT(id, v.size());
}
