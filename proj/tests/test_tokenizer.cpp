#include <gtest/gtest.h>

#include <filesystem>

#include "cbllm/embedding.hpp"
#include "cbllm/tokenizer.hpp"
#include "json.hpp"

using namespace cbllm;

TEST(HashWordTokenizer, WordsAreLowercasedAlnumRuns) {
  EXPECT_EQ(HashWordTokenizer::words("It's GREAT, really!"),
            (std::vector<std::string>{"it's", "great", "really"}));
  EXPECT_TRUE(HashWordTokenizer::words(" ,.; ").empty());
}

TEST(HashWordTokenizer, DeterministicAndBounded) {
  HashWordTokenizer t(97, 3);
  auto a = t.encode("the quick brown fox the");
  ASSERT_EQ(a.size(), 5u);
  EXPECT_EQ(a[0], a[4]);
  for (auto id : a) EXPECT_LT(id, 97);
  EXPECT_EQ(a, HashWordTokenizer(97, 3).encode("The Quick brown FOX the"));
  EXPECT_NE(a, HashWordTokenizer(97, 4).encode("the quick brown fox the"));
}

TEST(HashWordTokenizer, SpecRoundTrip) {
  auto t = make_tokenizer("hash:buckets=128:seed=9");
  EXPECT_EQ(t->spec(), "hash:buckets=128:seed=9");
  EXPECT_EQ(t->vocab_size(), 128u);
  EXPECT_THROW(make_tokenizer("hash:bogus=1"), ValidationError);
  EXPECT_THROW(make_tokenizer("wordpiece"), ValidationError);
}

// Expected ids produced by the Python `tokenizers` library on the same file.
TEST(BpeTokenizer, TinyVocabularyMatchesReference) {
  BpeTokenizer t(std::string(CBLLM_TEST_DATA) + "/tiny_bpe.json");
  EXPECT_EQ(t.encode("ab ab c"), (std::vector<std::int32_t>{5, 5, 1, 6}));
  EXPECT_EQ(t.encode("bab"), (std::vector<std::int32_t>{1, 3, 4}));
  EXPECT_EQ(t.encode("aba"), (std::vector<std::int32_t>{5, 2}));
  EXPECT_EQ(t.encode("c"), (std::vector<std::int32_t>{1, 6}));
  EXPECT_TRUE(t.encode("").empty());
  EXPECT_EQ(t.vocab_size(), 8u);
}

// Frozen ids from the Python `tokenizers` library for the static encoder's
// tokenizer; runs only after tools/fetch_static_encoder.py.
TEST(BpeTokenizer, StaticEncoderMatchesPythonReference) {
  auto dir = cache_dir() / "encoders" / "wordllama-l2-256";
  if (!std::filesystem::exists(dir / "tokenizer.json")) {
    GTEST_SKIP() << "static encoder not fetched (" << dir << ")";
  }
  BpeTokenizer t((dir / "tokenizer.json").string());
  auto oracle = nlohmann::json::parse(read_text_file(std::string(CBLLM_TEST_DATA) + "/wordllama_oracle.json"));
  for (const auto& o : oracle) {
    auto text = o["text"].get<std::string>();
    EXPECT_EQ(t.encode(text), o["ids"].get<std::vector<std::int32_t>>()) << text;
  }
}
