#include <gtest/gtest.h>

#include "cbllm/dataset.hpp"
#include "cbllm/toy_data.hpp"
#include "test_util.hpp"

using namespace cbllm;
using cbllm::testing::TempDir;

TEST(Delimited, QuotesAndCrlf) {
  auto rows = parse_delimited("a,b\r\n\"x, y\",\"say \"\"hi\"\"\"\r\n\"multi\nline\",2\n", ',');
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1][0], "x, y");
  EXPECT_EQ(rows[1][1], "say \"hi\"");
  EXPECT_EQ(rows[2][0], "multi\nline");
  EXPECT_THROW(parse_delimited("a,\"open\n", ','), ParseError);
}

TEST(Delimited, QuoteFieldRoundTrip) {
  for (std::string s : {"plain", "with,comma", "with \"quote\"", "new\nline", ""}) {
    auto rows = parse_delimited(quote_field(s) + ",end\n", ',');
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0][0], s);
  }
}

TEST(Dataset, ParseAndFormat) {
  auto d = parse_dataset("label,sentence\n1,good film\n0,\"bad, really\"\n",
                         {"negative", "positive"}, "train");
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.texts[1], "bad, really");
  EXPECT_EQ(d.labels, (std::vector<std::size_t>{1, 0}));
  auto again = parse_dataset(format_dataset(d), d.class_names, "train");
  EXPECT_EQ(again.texts, d.texts);
  EXPECT_EQ(again.labels, d.labels);
}

TEST(Dataset, Errors) {
  std::vector<std::string> cls{"a", "b"};
  EXPECT_THROW(parse_dataset("text\nx\n", cls), ValidationError);
  EXPECT_THROW(parse_dataset("text,label\nx,2\n", cls), ValidationError);
  EXPECT_THROW(parse_dataset("text,label\nx,one\n", cls), ValidationError);
  EXPECT_THROW(parse_dataset("text,label\n ,1\n", cls), ValidationError);
  EXPECT_THROW(parse_dataset("text,label\nx,1,extra\n", cls), ValidationError);
  EXPECT_THROW(parse_dataset("text,label\n", {"only"}), ValidationError);
}

TEST(Dataset, ManifestRoundTrip) {
  TempDir dir;
  auto toy = make_toy_task(0, 20, 10, 3);
  DatasetManifest m{"toy", toy.train.class_names, {}};
  save_dataset(m, {toy.train, toy.test}, dir.path() / "toy");
  auto loaded = load_manifest((dir.path() / "toy" / "manifest.json").string());
  EXPECT_EQ(loaded.dataset_id, "toy");
  auto train = load_split(loaded, "train");
  EXPECT_EQ(train.texts, toy.train.texts);
  EXPECT_EQ(train.labels, toy.train.labels);
  EXPECT_EQ(train.n_classes(), 3u);
  EXPECT_THROW(load_split(loaded, "validation"), ValidationError);
}

TEST(Dataset, HoldoutIsSeededAndDisjoint) {
  auto toy = make_toy_task(0, 200, 10, 2);
  auto [tr, va] = holdout_split(toy.train, 5);
  EXPECT_EQ(va.size(), 10u);
  EXPECT_EQ(tr.size() + va.size(), 200u);
  auto [tr2, va2] = holdout_split(toy.train, 5);
  EXPECT_EQ(va.texts, va2.texts);
  auto [tr3, va3] = holdout_split(toy.train, 6);
  EXPECT_NE(va.texts, va3.texts);
  EXPECT_THROW(holdout_split(toy.train, 0, 1.0), ValidationError);
}

TEST(ToyTask, DeterministicAndBalanced) {
  auto a = make_toy_task(9, 40, 20, 4);
  auto b = make_toy_task(9, 40, 20, 4);
  EXPECT_EQ(a.train.texts, b.train.texts);
  EXPECT_EQ(a.concepts->k(), 16u);
  std::vector<std::size_t> counts(4, 0);
  for (auto y : a.train.labels) counts[y]++;
  EXPECT_EQ(counts, (std::vector<std::size_t>{10, 10, 10, 10}));
  EXPECT_THROW(make_toy_task(0, 10, 10, 5), ValidationError);
}
