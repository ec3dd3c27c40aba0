#include <gtest/gtest.h>

#include "cbllm/scoring.hpp"
#include "test_util.hpp"

using namespace cbllm;
using cbllm::testing::numbered_concepts;
using cbllm::testing::TempDir;

namespace {

// Independent restatement of the correction rule, entry by entry.
float oracle_entry(float s, std::size_t concept_class, std::size_t y) {
  if (!(s > 0.0f)) return 0.0f;
  if (concept_class != y) return 0.0f;
  return s;
}

ScoreMatrix random_scores(std::size_t m, std::size_t k, Rng& rng) {
  ScoreMatrix s;
  s.m = m;
  s.k = k;
  for (std::size_t i = 0; i < m * k; ++i) s.values.push_back(static_cast<float>(rng.uniform(-1, 1)));
  return s;
}

}  // namespace

TEST(Acs, RawVectorPathMatchesDotProducts) {
  auto concepts = numbered_concepts({1, 1});
  FixtureBackend be(2);
  be.set("c0_0", {1.0f, 0.0f});
  be.set("c1_0", {0.0f, 1.0f});
  be.set("x", {0.5f, -0.2f});
  be.set("zero", {0.0f, 0.0f});
  auto s = acs_score_dataset({"x", "zero"}, *concepts, be);
  EXPECT_FLOAT_EQ(s.at(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(s.at(0, 1), -0.2f);
  EXPECT_EQ(s.at(1, 0), 0.0f);
  EXPECT_EQ(s.at(1, 1), 0.0f);
  EXPECT_FALSE(s.corrected);
  EXPECT_EQ(s.concept_hash, concepts->hash());
}

TEST(Acs, CostIsMPlusK) {
  auto concepts = numbered_concepts({2, 2});
  MockBackend be(0, 16);
  std::vector<std::string> texts;
  for (int i = 0; i < 10; ++i) texts.push_back("text number " + std::to_string(i));
  acs_score_dataset(texts, *concepts, be);
  EXPECT_EQ(be.stats().embed_calls, 14u);
}

TEST(Acs, LinearInTextEmbedding) {
  Rng rng(2);
  EmbeddingMatrix c{3, 4, {}, "c"}, a{1, 4, {}, "a"}, b{1, 4, {}, "b"}, ab{1, 4, {}, "ab"};
  for (int i = 0; i < 12; ++i) c.values.push_back(static_cast<float>(rng.uniform(-1, 1)));
  for (int i = 0; i < 4; ++i) {
    // Multiples of 1/8 keep float sums exact.
    a.values.push_back(static_cast<float>(rng.below(16)) / 8.0f - 1.0f);
    b.values.push_back(static_cast<float>(rng.below(16)) / 8.0f - 1.0f);
    ab.values.push_back(a.values.back() + b.values.back());
  }
  auto sa = acs_score_embeddings(a, c), sb = acs_score_embeddings(b, c), sab = acs_score_embeddings(ab, c);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(sab.at(0, j), sa.at(0, j) + sb.at(0, j), 1e-6);
}

TEST(Acs, Validation) {
  auto concepts = numbered_concepts({1, 1});
  MockBackend be(0, 4);
  EXPECT_THROW(acs_score_dataset({}, *concepts, be), ValidationError);
  EmbeddingMatrix t{1, 3, std::vector<float>(3), ""}, c{1, 4, std::vector<float>(4), ""};
  EXPECT_THROW(acs_score_embeddings(t, c), ValidationError);
}

TEST(Acc, WorkedExample) {
  auto concepts = numbered_concepts({2, 1});  // class map (0, 0, 1)
  ScoreMatrix s{1, 3, {0.5f, -0.2f, 0.3f}};
  std::vector<std::size_t> y{0};
  auto c = acc_correct(s, y, *concepts);
  EXPECT_EQ(c.values, (std::vector<float>{0.5f, 0.0f, 0.0f}));
  EXPECT_TRUE(c.corrected);
  EXPECT_EQ(c.label_hash, label_hash(y));
  EXPECT_FALSE(s.corrected);
  EXPECT_EQ(s.values[1], -0.2f);  // input untouched
}

TEST(Acc, AllNegativeRowBecomesZero) {
  auto concepts = numbered_concepts({2, 2});
  ScoreMatrix s{1, 4, {-0.1f, -0.5f, -0.3f, -0.9f}};
  std::vector<std::size_t> y{1};
  auto c = acc_correct(s, y, *concepts);
  EXPECT_EQ(c.values, std::vector<float>(4, 0.0f));
}

TEST(Acc, ExactZeroStaysZero) {
  EXPECT_EQ(acc_entry(0.0f, 0, 0), 0.0f);
  EXPECT_EQ(acc_entry(-0.0f, 0, 0), 0.0f);
  EXPECT_EQ(acc_entry(1e-30f, 0, 0), 1e-30f);
}

TEST(Acc, RandomMatrixMatchesEntrywiseOracle) {
  Rng rng(11);
  auto concepts = numbered_concepts({5, 4, 3});
  auto s = random_scores(20, 12, rng);
  std::vector<std::size_t> y(20);
  for (auto& v : y) v = rng.below(3);
  auto c = acc_correct(s, y, *concepts);
  for (std::size_t x = 0; x < 20; ++x) {
    for (std::size_t j = 0; j < 12; ++j) {
      EXPECT_EQ(c.at(x, j), oracle_entry(s.at(x, j), concepts->class_of(j), y[x]));
    }
  }
}

TEST(Acc, Properties) {
  Rng rng(12);
  auto concepts = numbered_concepts({3, 3, 2});
  auto s = random_scores(30, 8, rng);
  std::vector<std::size_t> y(30);
  for (auto& v : y) v = rng.below(3);
  auto c = acc_correct(s, y, *concepts);
  std::size_t zeros = 0, off_class = 0;
  for (std::size_t x = 0; x < 30; ++x) {
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_GE(c.at(x, j), 0.0f);
      EXPECT_LE(c.at(x, j), std::max(0.0f, s.at(x, j)));
      if (concepts->class_of(j) != y[x]) {
        EXPECT_EQ(c.at(x, j), 0.0f);
        ++off_class;
      }
      zeros += c.at(x, j) == 0.0f;
    }
  }
  EXPECT_GE(zeros, off_class);
  // Re-applying the rule to the corrected values changes nothing.
  ScoreMatrix again = c;
  again.corrected = false;
  EXPECT_EQ(acc_correct(again, y, *concepts).values, c.values);
}

TEST(Acc, Errors) {
  auto concepts = numbered_concepts({1, 1});
  ScoreMatrix s{1, 2, {0.1f, 0.2f}};
  std::vector<std::size_t> bad{2}, ok{0}, two{0, 1};
  EXPECT_THROW(acc_correct(s, bad, *concepts), ValidationError);
  EXPECT_THROW(acc_correct(s, two, *concepts), ValidationError);
  auto c = acc_correct(s, ok, *concepts);
  EXPECT_THROW(acc_correct(c, ok, *concepts), ValidationError);
  auto other = numbered_concepts({2, 1});
  EXPECT_THROW(acc_correct(s, ok, *other), ValidationError);
}

TEST(Acc, NeedsNoEmbeddingCalls) {
  auto concepts = numbered_concepts({2, 2});
  MockBackend be(0, 8);
  auto s = acs_score_dataset({"a", "b", "c"}, *concepts, be);
  const auto before = be.stats().embed_calls;
  std::vector<std::size_t> y{0, 1, 0};
  acc_correct(s, y, *concepts);
  EXPECT_EQ(be.stats().embed_calls, before);
}

TEST(Scm1File, RoundTripIsBitExact) {
  TempDir tmp;
  Rng rng(4);
  auto concepts = numbered_concepts({2, 3});
  auto s = random_scores(7, 5, rng);
  s.concept_hash = concepts->hash();
  std::vector<std::size_t> y{0, 1, 1, 0, 1, 0, 0};
  auto c = acc_correct(s, y, *concepts);
  save_scores(c, tmp.file("s.scm"));
  auto back = load_scores(tmp.file("s.scm"), concepts.get());
  EXPECT_EQ(back.scores, c);
  EXPECT_TRUE(back.warnings.empty());
}

TEST(Scm1File, HeaderLayout) {
  TempDir tmp;
  ScoreMatrix s{2, 3, std::vector<float>(6, 1.5f)};
  s.corrected = true;
  save_scores(s, tmp.file("s.scm"));
  auto bytes = read_text_file(tmp.file("s.scm"));
  ASSERT_EQ(bytes.size(), 4u + 12u + 64u + 24u);
  EXPECT_EQ(bytes.substr(0, 4), "SCM1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 3);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 1);
}

TEST(Scm1File, TruncatedAndTrailingAndMagic) {
  TempDir tmp;
  ScoreMatrix s{2, 2, {1, 2, 3, 4}};
  save_scores(s, tmp.file("s.scm"));
  auto bytes = read_text_file(tmp.file("s.scm"));
  write_text_file(tmp.file("t.scm"), bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(load_scores(tmp.file("t.scm")), FormatError);
  write_text_file(tmp.file("x.scm"), bytes + "junk");
  EXPECT_THROW(load_scores(tmp.file("x.scm")), FormatError);
  write_text_file(tmp.file("m.scm"), "SCM2" + bytes.substr(4));
  EXPECT_THROW(load_scores(tmp.file("m.scm")), FormatError);
}

TEST(Scm1File, HashMismatchWarnsAndKMismatchFails) {
  TempDir tmp;
  auto a = numbered_concepts({1, 1}, "a");
  auto b = numbered_concepts({1, 1}, "b");
  auto c = numbered_concepts({2, 1}, "c");
  ScoreMatrix s{1, 2, {0.1f, 0.2f}};
  s.concept_hash = a->hash();
  save_scores(s, tmp.file("s.scm"));
  EXPECT_EQ(load_scores(tmp.file("s.scm"), b.get()).warnings.size(), 1u);
  EXPECT_THROW(load_scores(tmp.file("s.scm"), c.get()), FormatError);
}
