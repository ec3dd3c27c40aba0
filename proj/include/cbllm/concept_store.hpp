#ifndef CBLLM_CONCEPT_STORE_HPP_
#define CBLLM_CONCEPT_STORE_HPP_

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cbllm/common.hpp"
#include "json.hpp"

namespace cbllm {

struct ConceptClass {
  std::size_t index = 0;
  std::string name;
  std::vector<std::string> concepts;
  bool operator==(const ConceptClass&) const = default;
};

// Per-class concept subsets S_i, their union in flattening order, and the
// concept -> class map. Immutable once built.
class ConceptSet {
 public:
  ConceptSet() = default;

  // Takes classes already in canonical index order; validates invariants.
  ConceptSet(std::string dataset_id, std::vector<ConceptClass> classes)
      : dataset_id_(std::move(dataset_id)), classes_(std::move(classes)) {
    if (classes_.empty()) throw ValidationError("concept set has no classes");
    std::unordered_map<std::string, std::size_t> seen;
    offsets_.reserve(classes_.size() + 1);
    offsets_.push_back(0);
    for (std::size_t i = 0; i < classes_.size(); ++i) {
      const auto& cls = classes_[i];
      if (cls.index != i) {
        throw ValidationError("classes[" + std::to_string(i) +
                              "].index must be " + std::to_string(i));
      }
      if (cls.concepts.empty()) {
        throw ValidationError("classes[" + std::to_string(i) +
                              "].concepts is empty");
      }
      for (const auto& c : cls.concepts) {
        auto key = fold_key(c);
        if (key.empty()) {
          throw ValidationError("classes[" + std::to_string(i) +
                                "] contains an empty concept");
        }
        if (!seen.emplace(key, i).second) {
          throw ValidationError("duplicate concept '" + c + "' in classes[" +
                                std::to_string(i) + "]");
        }
        flat_.push_back(c);
        class_map_.push_back(i);
      }
      offsets_.push_back(flat_.size());
    }
  }

  const std::string& dataset_id() const { return dataset_id_; }
  const std::vector<ConceptClass>& classes() const { return classes_; }
  std::size_t n() const { return classes_.size(); }
  std::size_t k() const { return flat_.size(); }
  const std::vector<std::string>& concepts() const { return flat_; }

  const std::string& concept_text(std::size_t j) const {
    check_index(j);
    return flat_[j];
  }

  // M(c_j): the class whose subset holds concept j.
  std::size_t class_of(std::size_t j) const {
    check_index(j);
    return class_map_[j];
  }

  const std::vector<std::size_t>& class_map() const { return class_map_; }

  // Global index range [first, last) of class i's subset.
  std::pair<std::size_t, std::size_t> class_range(std::size_t i) const {
    if (i >= n()) throw ValidationError("class index out of range");
    return {offsets_[i], offsets_[i + 1]};
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["dataset"] = dataset_id_;
    j["classes"] = nlohmann::ordered_json::array();
    for (const auto& c : classes_) {
      j["classes"].push_back(
          {{"index", c.index}, {"name", c.name}, {"concepts", c.concepts}});
    }
    return j;
  }

  // SHA-256 of the canonical compact JSON form.
  Digest hash() const { return sha256(to_json().dump()); }
  std::string hash_hex() const { return to_hex(hash()); }

  bool operator==(const ConceptSet& o) const {
    return dataset_id_ == o.dataset_id_ && classes_ == o.classes_;
  }

 private:
  void check_index(std::size_t j) const {
    if (j >= flat_.size()) {
      throw ValidationError("concept index " + std::to_string(j) +
                            " out of range [0, " + std::to_string(k()) + ")");
    }
  }

  std::string dataset_id_;
  std::vector<ConceptClass> classes_;
  std::vector<std::string> flat_;
  std::vector<std::size_t> class_map_;
  std::vector<std::size_t> offsets_;
};

// ---- concept generation prompts ----

inline constexpr std::size_t kPromptExampleCount = 4;

struct ConceptPrompt {
  std::string class_name;
  std::vector<std::string> example_concepts;
  std::size_t requested_count = 0;
  std::string rendered_text;
};

inline ConceptPrompt build_prompt(std::string_view class_name,
                                  const std::vector<std::string>& examples,
                                  std::size_t count) {
  if (trim(class_name).empty()) throw ValidationError("empty class name");
  if (examples.size() != kPromptExampleCount) {
    throw ValidationError("prompt needs exactly 4 example concepts, got " +
                          std::to_string(examples.size()));
  }
  for (const auto& e : examples) {
    if (trim(e).empty()) throw ValidationError("empty example concept");
  }
  if (count < 1) throw ValidationError("requested concept count must be >= 1");

  ConceptPrompt p;
  p.class_name = std::string(class_name);
  p.example_concepts = examples;
  p.requested_count = count;
  std::ostringstream os;
  os << "Here are some examples of key features that are often present in a "
     << class_name
     << ". Each feature is shown between the tag <example></example>.\n";
  for (const auto& e : examples) os << "- <example>" << e << "</example>\n";
  os << "List " << count
     << " other different important features that are often present in a "
     << class_name
     << ". Need to follow the template above, i.e.<example>features</example>.";
  p.rendered_text = os.str();
  return p;
}

struct ClassPromptSpec {
  std::string class_name;
  std::vector<std::string> examples;
  std::size_t count = 0;
};

// One prompt per class: n classes -> n queries.
inline std::vector<ConceptPrompt> build_prompts(
    const std::vector<ClassPromptSpec>& specs) {
  std::vector<ConceptPrompt> out;
  out.reserve(specs.size());
  for (const auto& s : specs) out.push_back(build_prompt(s.class_name, s.examples, s.count));
  return out;
}

struct ParsedConcepts {
  std::vector<std::string> concepts;
  std::size_t warnings = 0;
};

// Extracts every well-formed <example>...</example> span in order. An opening
// tag that is not closed before the next opening tag (or end of text) is
// skipped and counted as a warning, as is an empty span.
inline ParsedConcepts parse_concept_response(std::string_view text) {
  static constexpr std::string_view kOpen = "<example>";
  static constexpr std::string_view kClose = "</example>";
  ParsedConcepts out;
  std::size_t pos = 0;
  while (true) {
    auto open = text.find(kOpen, pos);
    if (open == std::string_view::npos) break;
    auto body = open + kOpen.size();
    auto close = text.find(kClose, body);
    auto next_open = text.find(kOpen, body);
    if (close == std::string_view::npos ||
        (next_open != std::string_view::npos && next_open < close)) {
      ++out.warnings;
      pos = body;
      continue;
    }
    auto concept_text = trim(text.substr(body, close - body));
    if (concept_text.empty()) {
      ++out.warnings;
    } else {
      out.concepts.push_back(std::move(concept_text));
    }
    pos = close + kClose.size();
  }
  if (out.concepts.empty()) {
    throw ParseError("no <example>...</example> concepts found in response");
  }
  return out;
}

// ---- assembly ----

struct ConceptConflict {
  std::string concept_text;
  std::size_t kept_class = 0;
  std::size_t dropped_class = 0;
};

struct AssembledConcepts {
  ConceptSet set;
  std::vector<ConceptConflict> conflicts;
};

// Union of per-class subsets. Duplicates (after trim + case-fold) keep their
// first occurrence in class-index order; every drop is reported.
inline AssembledConcepts assemble_concept_set(std::string dataset_id,
                                              std::vector<ConceptClass> subsets) {
  if (subsets.empty()) throw ValidationError("no class subsets given");
  std::sort(subsets.begin(), subsets.end(),
            [](const auto& a, const auto& b) { return a.index < b.index; });
  for (std::size_t i = 0; i < subsets.size(); ++i) {
    if (subsets[i].index != i) {
      throw ValidationError("class indices must be exactly 0..n-1, each once");
    }
  }
  AssembledConcepts out;
  std::unordered_map<std::string, std::size_t> owner;
  for (auto& cls : subsets) {
    std::vector<std::string> kept;
    for (auto& c : cls.concepts) {
      auto text = trim(c);
      auto key = fold_key(text);
      if (key.empty()) throw ValidationError("empty concept in class " + cls.name);
      auto [it, inserted] = owner.emplace(key, cls.index);
      if (!inserted) {
        out.conflicts.push_back({text, it->second, cls.index});
        continue;
      }
      kept.push_back(std::move(text));
    }
    if (kept.empty()) {
      throw ValidationError("class " + std::to_string(cls.index) + " (" +
                            cls.name + ") is empty after deduplication");
    }
    cls.concepts = std::move(kept);
  }
  out.set = ConceptSet(std::move(dataset_id), std::move(subsets));
  return out;
}

// ---- persistence ----

inline ConceptSet concept_set_from_json(const nlohmann::json& j) {
  auto require = [](bool ok, const std::string& path, const char* what) {
    if (!ok) throw FormatError("concept set: " + path + " " + what);
  };
  require(j.is_object(), "$", "must be an object");
  require(j.contains("dataset") && j["dataset"].is_string(), "dataset",
          "must be a string");
  require(j.contains("classes") && j["classes"].is_array(), "classes",
          "must be an array");
  std::vector<ConceptClass> classes;
  std::map<std::size_t, std::size_t> by_index;
  const auto& arr = j["classes"];
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& c = arr[i];
    const std::string path = "classes[" + std::to_string(i) + "]";
    require(c.is_object(), path, "must be an object");
    require(c.contains("index") && c["index"].is_number_unsigned(),
            path + ".index", "missing or not a non-negative integer");
    require(c.contains("name") && c["name"].is_string(), path + ".name",
            "missing or not a string");
    require(c.contains("concepts") && c["concepts"].is_array(),
            path + ".concepts", "missing or not an array");
    ConceptClass cc;
    cc.index = c["index"].get<std::size_t>();
    cc.name = c["name"].get<std::string>();
    for (std::size_t q = 0; q < c["concepts"].size(); ++q) {
      require(c["concepts"][q].is_string(),
              path + ".concepts[" + std::to_string(q) + "]", "not a string");
      cc.concepts.push_back(c["concepts"][q].get<std::string>());
    }
    require(by_index.emplace(cc.index, i).second, path + ".index",
            "duplicated");
    classes.push_back(std::move(cc));
  }
  for (std::size_t i = 0; i < classes.size(); ++i) {
    require(by_index.count(i) == 1, "classes", ("missing class index " + std::to_string(i)).c_str());
  }
  std::sort(classes.begin(), classes.end(),
            [](const auto& a, const auto& b) { return a.index < b.index; });
  try {
    return ConceptSet(j["dataset"].get<std::string>(), std::move(classes));
  } catch (const ValidationError& e) {
    throw FormatError(std::string("concept set: ") + e.what());
  }
}

inline void save_concept_set(const ConceptSet& set, const std::string& path) {
  write_text_file(path, set.to_json().dump(2) + "\n");
}

inline ConceptSet load_concept_set(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("concept set " + path + ": " + e.what());
  }
  return concept_set_from_json(j);
}

// Offline mode: prompt_<i>.txt files are handed to a chat model out of band,
// answers come back as response_<i>.txt in the same directory.
inline std::vector<std::string> write_prompt_files(
    const std::vector<ConceptPrompt>& prompts, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto p = dir / ("prompt_" + std::to_string(i) + ".txt");
    write_text_file(p.string(), prompts[i].rendered_text);
    paths.push_back(p.string());
  }
  return paths;
}

inline std::filesystem::path response_path(const std::filesystem::path& dir,
                                           std::size_t class_index) {
  return dir / ("response_" + std::to_string(class_index) + ".txt");
}

// Pluggable chat-model client; the shipped implementation reads fixtures.
class ConceptGenerator {
 public:
  virtual ~ConceptGenerator() = default;
  virtual std::string complete(const ConceptPrompt& prompt,
                               std::size_t class_index) = 0;
};

class FixtureConceptGenerator : public ConceptGenerator {
 public:
  explicit FixtureConceptGenerator(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::string complete(const ConceptPrompt&, std::size_t class_index) override {
    return read_text_file(response_path(dir_, class_index).string());
  }

 private:
  std::filesystem::path dir_;
};

}  // namespace cbllm

#endif  // CBLLM_CONCEPT_STORE_HPP_
