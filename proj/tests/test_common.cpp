#include <gtest/gtest.h>

#include <set>

#include "cbllm/common.hpp"
#include "test_util.hpp"

using namespace cbllm;

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(to_hex(sha256(std::string_view("abc"))),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(to_hex(sha256(std::string_view(""))),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Sha256, HexRoundTrip) {
  auto d = sha256(std::string_view("round trip"));
  EXPECT_EQ(from_hex(to_hex(d)), d);
  EXPECT_THROW(from_hex("zz"), Error);
}

TEST(Strings, FoldKeyCollapsesCaseAndSpace) {
  EXPECT_EQ(fold_key("  Great   Acting\t"), "great acting");
  EXPECT_EQ(fold_key(""), "");
  EXPECT_EQ(trim("\n x \r"), "x");
}

TEST(Strings, Split) {
  EXPECT_EQ(split("a:b::c", ':'), (std::vector<std::string>{"a", "b", "", "c"}));
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs = differs || x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
  Rng r(1);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    auto v = r.below(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, NormalMoments) {
  Rng r(5);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double v = r.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(3);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  r.shuffle(v);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Matvec, MatchesHandArithmetic) {
  Matrix m(2, 2);
  m(0, 0) = 2;
  m(0, 1) = -1;
  m(1, 0) = 0.5;
  m(1, 1) = 1;
  std::vector<double> x{0.5, 3}, b{0, 1}, y(2);
  matvec(m, x, b, y);
  EXPECT_DOUBLE_EQ(y[0], -2.0);
  EXPECT_DOUBLE_EQ(y[1], 4.25);
}

TEST(BinaryIo, TruncatedReadThrows) {
  std::stringstream ss;
  io::write_u32(ss, 7);
  std::string s = ss.str().substr(0, 2);
  std::stringstream in(s);
  EXPECT_THROW(io::read_u32(in, "x"), FormatError);
}
