#ifndef CBLLM_TOY_DATA_HPP_
#define CBLLM_TOY_DATA_HPP_

#include <memory>
#include <string>
#include <vector>

#include "cbllm/common.hpp"
#include "cbllm/concept_store.hpp"
#include "cbllm/dataset.hpp"

namespace cbllm {

// Small synthetic topic task. Each class owns four two-word concept phrases;
// a text mixes two phrases of its own class with filler words and, now and
// then, one phrase from another class.
struct ToyTask {
  std::shared_ptr<const ConceptSet> concepts;
  DatasetSplit train;
  DatasetSplit test;
};

namespace detail {

struct ToyClass {
  const char* name;
  const char* phrases[4];
};

inline constexpr ToyClass kToyClasses[] = {
    {"sports", {"winning goal", "league match", "team coach", "stadium crowd"}},
    {"technology", {"software update", "fast processor", "mobile app", "cloud server"}},
    {"food", {"fresh bread", "spicy sauce", "tasty dessert", "grilled meat"}},
    {"travel", {"beach resort", "flight ticket", "mountain hike", "hotel booking"}},
};

inline constexpr const char* kToyFiller[] = {
    "the", "a", "today", "really", "very", "new", "we", "they", "saw", "some",
    "this", "week", "about", "people", "said", "quite", "again", "with", "our", "many"};

inline DatasetSplit toy_split(std::string name, std::size_t n_classes, std::size_t m, Rng& rng,
                              const std::vector<std::string>& class_names) {
  DatasetSplit d{std::move(name), {}, {}, class_names};
  for (std::size_t x = 0; x < m; ++x) {
    const std::size_t y = x % n_classes;
    std::vector<std::string> words;
    auto add_phrase = [&](std::size_t cls) {
      auto parts = split(kToyClasses[cls].phrases[rng.below(4)], ' ');
      words.insert(words.end(), parts.begin(), parts.end());
    };
    add_phrase(y);
    add_phrase(y);
    if (rng.uniform() < 0.2) add_phrase((y + 1 + rng.below(n_classes - 1)) % n_classes);
    const auto filler = 3 + rng.below(4);
    for (std::size_t i = 0; i < filler; ++i) words.emplace_back(kToyFiller[rng.below(20)]);
    rng.shuffle(words);
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    d.texts.push_back(std::move(text));
    d.labels.push_back(y);
  }
  return d;
}

}  // namespace detail

inline ToyTask make_toy_task(std::uint64_t seed, std::size_t m_train = 200,
                             std::size_t m_test = 100, std::size_t n_classes = 2) {
  if (n_classes < 2 || n_classes > 4) throw ValidationError("toy task supports 2..4 classes");
  std::vector<ConceptClass> classes;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n_classes; ++i) {
    const auto& c = detail::kToyClasses[i];
    classes.push_back({i, c.name, {c.phrases, c.phrases + 4}});
    names.emplace_back(c.name);
  }
  ToyTask t;
  t.concepts = std::make_shared<ConceptSet>("toy", std::move(classes));
  Rng rng(seed ^ 0x70F7ULL);
  t.train = detail::toy_split("train", n_classes, m_train, rng, names);
  t.test = detail::toy_split("test", n_classes, m_test, rng, names);
  return t;
}

}  // namespace cbllm

#endif  // CBLLM_TOY_DATA_HPP_
