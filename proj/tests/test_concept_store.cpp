#include <gtest/gtest.h>

#include "cbllm/concept_store.hpp"
#include "test_util.hpp"

using namespace cbllm;
using cbllm::testing::TempDir;

namespace {

const std::vector<std::string> kSeeds = {"great acting", "moving story", "beautiful score",
                                         "sharp dialogue"};

}  // namespace

TEST(BuildPrompt, RendersTemplateVerbatim) {
  auto p = build_prompt("positive movie review", kSeeds, 50);
  const std::string expected =
      "Here are some examples of key features that are often present in a positive movie "
      "review. Each feature is shown between the tag <example></example>.\n"
      "- <example>great acting</example>\n"
      "- <example>moving story</example>\n"
      "- <example>beautiful score</example>\n"
      "- <example>sharp dialogue</example>\n"
      "List 50 other different important features that are often present in a positive movie "
      "review. Need to follow the template above, i.e.<example>features</example>.";
  EXPECT_EQ(p.rendered_text, expected);
  EXPECT_NE(p.rendered_text.find("List 50 other different important features"), std::string::npos);
  EXPECT_EQ(p.requested_count, 50u);
}

TEST(BuildPrompt, CountOne) {
  auto p = build_prompt("news", kSeeds, 1);
  EXPECT_NE(p.rendered_text.find("List 1 other different important features"), std::string::npos);
}

TEST(BuildPrompt, FourExampleBlocks) {
  auto p = build_prompt("news", kSeeds, 3);
  std::size_t blocks = 0;
  for (auto pos = p.rendered_text.find("- <example>"); pos != std::string::npos;
       pos = p.rendered_text.find("- <example>", pos + 1)) {
    ++blocks;
  }
  EXPECT_EQ(blocks, 4u);
}

TEST(BuildPrompt, Validation) {
  EXPECT_THROW(build_prompt("", kSeeds, 5), ValidationError);
  EXPECT_THROW(build_prompt("x", {"a", "b", "c"}, 5), ValidationError);
  EXPECT_THROW(build_prompt("x", {"a", "b", "", "d"}, 5), ValidationError);
  EXPECT_THROW(build_prompt("x", kSeeds, 0), ValidationError);
}

TEST(BuildPrompts, OnePromptPerClass) {
  std::vector<ClassPromptSpec> specs;
  for (auto name : {"world", "sports", "business", "science"}) specs.push_back({name, kSeeds, 62});
  EXPECT_EQ(build_prompts(specs).size(), 4u);
}

TEST(ParseResponse, ExtractsInOrder) {
  auto r = parse_concept_response("<example>rude staff</example><example>hidden fees</example>");
  EXPECT_EQ(r.concepts, (std::vector<std::string>{"rude staff", "hidden fees"}));
  EXPECT_EQ(r.warnings, 0u);
}

TEST(ParseResponse, TrimsAndSkipsMalformed) {
  auto r = parse_concept_response("- <example>broken\n- <example>  slow service </example>\n");
  EXPECT_EQ(r.concepts, (std::vector<std::string>{"slow service"}));
  EXPECT_EQ(r.warnings, 1u);
}

TEST(ParseResponse, EmptySpanIsAWarning) {
  auto r = parse_concept_response("<example> </example><example>ok</example>");
  EXPECT_EQ(r.concepts.size(), 1u);
  EXPECT_EQ(r.warnings, 1u);
}

TEST(ParseResponse, NothingParsedIsAnError) {
  EXPECT_THROW(parse_concept_response("no tags at all"), ParseError);
  EXPECT_THROW(parse_concept_response("<example>unclosed"), ParseError);
}

TEST(ParseResponse, Sst2FixturesGive104Each) {
  std::size_t total = 0;
  for (int i = 0; i < 2; ++i) {
    auto text = read_text_file(std::string(CBLLM_SOURCE_DIR) + "/data/sst2/concepts/response_" +
                               std::to_string(i) + ".txt");
    auto r = parse_concept_response(text);
    EXPECT_EQ(r.concepts.size(), 104u) << "class " << i;
    EXPECT_EQ(r.warnings, 0u);
    total += r.concepts.size();
  }
  EXPECT_EQ(total, 208u);
}

TEST(Assemble, NoDuplicates) {
  auto a = assemble_concept_set("d", {{0, "a", {"x", "y", "z"}}, {1, "b", {"u", "v", "w"}}});
  EXPECT_EQ(a.set.k(), 6u);
  EXPECT_TRUE(a.conflicts.empty());
}

TEST(Assemble, FirstOccurrenceWins) {
  auto a = assemble_concept_set("d", {{0, "a", {"shared", "x"}}, {1, "b", {"  Shared ", "y"}}});
  EXPECT_EQ(a.set.k(), 3u);
  ASSERT_EQ(a.conflicts.size(), 1u);
  EXPECT_EQ(a.conflicts[0].kept_class, 0u);
  EXPECT_EQ(a.conflicts[0].dropped_class, 1u);
  EXPECT_EQ(a.set.class_of(0), 0u);
  EXPECT_EQ(a.set.concept_text(2), "y");
}

TEST(Assemble, DuplicateInsideOneClassIsDropped) {
  auto a = assemble_concept_set("d", {{0, "a", {"x", "X"}}, {1, "b", {"y"}}});
  EXPECT_EQ(a.set.k(), 2u);
  EXPECT_EQ(a.conflicts.size(), 1u);
}

TEST(Assemble, EmptiedClassIsAnError) {
  EXPECT_THROW(assemble_concept_set("d", {{0, "a", {"x"}}, {1, "b", {"x"}}}), ValidationError);
}

TEST(Assemble, IndicesMustCoverRange) {
  EXPECT_THROW(assemble_concept_set("d", {{0, "a", {"x"}}, {2, "b", {"y"}}}), ValidationError);
  EXPECT_THROW(assemble_concept_set("d", {{0, "a", {"x"}}, {0, "b", {"y"}}}), ValidationError);
}

TEST(Assemble, UnorderedInputIsCanonicalized) {
  auto a = assemble_concept_set("d", {{1, "b", {"y"}}, {0, "a", {"x"}}});
  EXPECT_EQ(a.set.concept_text(0), "x");
  EXPECT_EQ(a.set.classes()[1].name, "b");
}

TEST(Assemble, DbpediaScale) {
  std::vector<ConceptClass> subsets;
  for (std::size_t i = 0; i < 14; ++i) {
    ConceptClass c{i, "class" + std::to_string(i), {}};
    for (int t = 0; t < 34; ++t) c.concepts.push_back("concept " + std::to_string(i) + "." + std::to_string(t));
    subsets.push_back(c);
  }
  EXPECT_EQ(assemble_concept_set("dbpedia", subsets).set.k(), 476u);
}

TEST(ClassOf, FlatteningOrder) {
  auto s = cbllm::testing::numbered_concepts({3, 2});
  EXPECT_EQ(s->class_of(0), 0u);
  EXPECT_EQ(s->class_of(3), 1u);
  EXPECT_THROW(s->class_of(5), ValidationError);
}

TEST(ClassOf, ConsistentWithSubsetsExhaustively) {
  auto s = cbllm::testing::numbered_concepts({4, 1, 7, 2});
  for (std::size_t i = 0; i < s->n(); ++i) {
    auto [lo, hi] = s->class_range(i);
    for (auto j = lo; j < hi; ++j) {
      EXPECT_EQ(s->class_of(j), i);
      const auto& subset = s->classes()[i].concepts;
      EXPECT_NE(std::find(subset.begin(), subset.end(), s->concept_text(j)), subset.end());
    }
  }
}

TEST(ConceptSetFile, RoundTrip) {
  TempDir tmp;
  auto set = load_concept_set(std::string(CBLLM_SOURCE_DIR) + "/data/sst2/concepts.json");
  EXPECT_EQ(set.k(), 208u);
  save_concept_set(set, tmp.file("c.json"));
  auto back = load_concept_set(tmp.file("c.json"));
  EXPECT_EQ(back, set);
  EXPECT_EQ(back.hash(), set.hash());
}

TEST(ConceptSetFile, ReorderedClassesAreCanonicalized) {
  auto j = nlohmann::json::parse(R"({"dataset":"d","classes":[
      {"index":1,"name":"b","concepts":["y"]},
      {"index":0,"name":"a","concepts":["x","z"]}]})");
  auto s = concept_set_from_json(j);
  // Oracle: canonical form sorts classes by index.
  ConceptSet expected("d", {{0, "a", {"x", "z"}}, {1, "b", {"y"}}});
  EXPECT_EQ(s, expected);
}

TEST(ConceptSetFile, MissingIndexNamesTheField) {
  auto j = nlohmann::json::parse(
      R"({"dataset":"d","classes":[{"index":0,"name":"a","concepts":["x"]},{"name":"b","concepts":["y"]}]})");
  try {
    concept_set_from_json(j);
    FAIL() << "expected an error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("classes[1].index"), std::string::npos) << e.what();
  }
}

TEST(ConceptSetFile, GapInIndicesIsAnError) {
  auto j = nlohmann::json::parse(
      R"({"dataset":"d","classes":[{"index":0,"name":"a","concepts":["x"]},{"index":2,"name":"b","concepts":["y"]}]})");
  EXPECT_THROW(concept_set_from_json(j), FormatError);
}

TEST(OfflineMode, PromptFilesAndFixtureResponses) {
  TempDir tmp;
  auto prompts = build_prompts({{"a", kSeeds, 2}, {"b", kSeeds, 2}});
  auto paths = write_prompt_files(prompts, tmp.path());
  ASSERT_EQ(paths.size(), 2u);
  EXPECT_EQ(read_text_file(paths[1]), prompts[1].rendered_text);
  write_text_file(response_path(tmp.path(), 0).string(), "<example>p</example><example>q</example>");
  FixtureConceptGenerator gen(tmp.path());
  EXPECT_EQ(parse_concept_response(gen.complete(prompts[0], 0)).concepts.size(), 2u);
  EXPECT_THROW(gen.complete(prompts[1], 1), Error);
}
