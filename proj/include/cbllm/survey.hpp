#ifndef CBLLM_SURVEY_HPP_
#define CBLLM_SURVEY_HPP_

#include <array>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cbllm/common.hpp"
#include "cbllm/concept_store.hpp"
#include "cbllm/dataset.hpp"
#include "cbllm/interpret.hpp"
#include "cbllm/model.hpp"
#include "json.hpp"

namespace cbllm {

inline constexpr std::size_t kExpectedRatingsPerItem = 3;
inline constexpr std::string_view kRandomSource = "random";

enum class SurveyTask { kTask1, kTask2 };

inline std::string to_string(SurveyTask t) { return t == SurveyTask::kTask1 ? "task1" : "task2"; }

struct Task1Payload {
  std::size_t concept_index = 0;
  std::string concept_text;
  std::vector<std::size_t> sample_ids;
  std::vector<std::string> samples;
  std::vector<double> activations;  // empty for the random baseline
};

struct ExplanationList {
  std::vector<std::size_t> concept_indices;
  std::vector<std::string> concepts;
};

// shown[s] came from sources[permutation[s]]; workers see only "model 1" and
// "model 2" (s = 0, 1).
struct Task2Payload {
  std::size_t sample_id = 0;
  std::string sample_text;
  std::array<std::string, 2> sources;
  std::array<std::size_t, 2> permutation{0, 1};
  std::array<ExplanationList, 2> shown;

  const std::string& source_of_shown(std::size_t s) const { return sources[permutation.at(s)]; }
  const ExplanationList& list_of_source(std::size_t src) const {
    return shown[permutation[0] == src ? 0 : 1];
  }
};

struct SurveyItem {
  std::string id;
  SurveyTask task = SurveyTask::kTask1;
  std::string dataset;
  std::string provenance;  // task1: source name; task2: "<a> vs <b>"
  Task1Payload task1;
  Task2Payload task2;
};

// A model, or (model == nullptr) the random baseline over `concepts`.
struct SurveySource {
  std::string name;
  const CbmModel* model = nullptr;
  const ConceptSet* concepts = nullptr;

  static SurveySource of_model(std::string name, const CbmModel& m) {
    return {std::move(name), &m, &m.concepts()};
  }
  static SurveySource random_baseline(const ConceptSet& c) {
    return {std::string(kRandomSource), nullptr, &c};
  }
  bool is_random() const { return model == nullptr; }
};

namespace detail {

// Item ids end up in the rendered page, so they must not name the source.
inline std::string blind_id(const std::string& dataset, const char* task, const std::string& key) {
  return dataset + "/" + task + "/" + to_hex(sha256(dataset + "/" + task + "/" + key)).substr(0, 12);
}

}  // namespace detail

// Active neurons ranked by their largest activation over the dataset.
inline std::vector<std::size_t> most_activated_neurons(const CbmModel& model,
                                                       const Matrix& activations,
                                                       std::size_t count) {
  std::vector<std::pair<double, std::size_t>> peak;
  for (std::size_t j = 0; j < model.k(); ++j) {
    if (model.is_masked(j)) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t x = 0; x < activations.rows; ++x) best = std::max(best, activations(x, j));
    peak.emplace_back(best, j);
  }
  std::stable_sort(peak.begin(), peak.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(count, peak.size()); ++i) out.push_back(peak[i].second);
  return out;
}

// k distinct indices out of [0, n), in draw order.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + rng.below(n - i)]);
  }
  idx.resize(k);
  return idx;
}

inline std::vector<SurveyItem> gen_task1_items(const SurveySource& src, const std::string& dataset,
                                               const std::vector<std::string>& texts,
                                               const std::vector<std::size_t>& neurons,
                                               std::size_t top_k, std::uint64_t seed) {
  if (texts.empty()) throw ValidationError("task1 items need a non-empty dataset");
  if (top_k == 0) throw ValidationError("task1 K must be >= 1");
  std::optional<Matrix> acts;
  if (!src.is_random()) acts = concept_activations(*src.model, texts);
  Rng rng(seed ^ 0x7A5C1ULL);
  std::vector<SurveyItem> items;
  for (auto j : neurons) {
    SurveyItem it;
    it.task = SurveyTask::kTask1;
    it.dataset = dataset;
    it.provenance = src.name;
    it.id = detail::blind_id(dataset, "task1", src.name + "/" + std::to_string(j));
    auto& p = it.task1;
    p.concept_index = j;
    p.concept_text = src.concepts->concept_text(j);
    if (src.is_random()) {
      p.sample_ids = sample_without_replacement(texts.size(), top_k, rng);
    } else {
      auto prof = neuron_top_k(*src.model, *acts, j, top_k);
      for (const auto& s : prof.top) {
        p.sample_ids.push_back(s.sample);
        p.activations.push_back(s.activation);
      }
    }
    for (auto x : p.sample_ids) p.samples.push_back(texts[x]);
    items.push_back(std::move(it));
  }
  return items;
}

inline ExplanationList explanation_from(const SurveySource& src, std::string_view text,
                                        std::size_t r, Rng& rng) {
  ExplanationList l;
  if (src.is_random()) {
    l.concept_indices = sample_without_replacement(src.concepts->k(), r, rng);
  } else {
    for (const auto& e : explain(*src.model, text, r).entries) l.concept_indices.push_back(e.concept_index);
  }
  for (auto j : l.concept_indices) l.concepts.push_back(src.concepts->concept_text(j));
  return l;
}

inline std::vector<SurveyItem> gen_task2_items(const SurveySource& a, const SurveySource& b,
                                               const std::string& dataset,
                                               const std::vector<std::string>& texts,
                                               const std::vector<std::size_t>& samples,
                                               std::size_t r, std::uint64_t seed) {
  if (r == 0) throw ValidationError("task2 r must be >= 1");
  if (a.name == b.name) throw ValidationError("task2 sources need distinct names");
  if (a.concepts->k() < r || b.concepts->k() < r) {
    throw ValidationError("task2 r exceeds the concept count");
  }
  Rng rng(seed ^ 0x7A5C2ULL);
  std::vector<SurveyItem> items;
  for (auto x : samples) {
    if (x >= texts.size()) throw ValidationError("task2 sample id " + std::to_string(x) + " out of range");
    SurveyItem it;
    it.task = SurveyTask::kTask2;
    it.dataset = dataset;
    it.provenance = a.name + " vs " + b.name;
    it.id = detail::blind_id(dataset, "task2", a.name + "-vs-" + b.name + "/" + std::to_string(x));
    auto& p = it.task2;
    p.sample_id = x;
    p.sample_text = texts[x];
    p.sources = {a.name, b.name};
    std::array<ExplanationList, 2> lists = {explanation_from(a, texts[x], r, rng),
                                            explanation_from(b, texts[x], r, rng)};
    p.permutation = rng.below(2) == 0 ? std::array<std::size_t, 2>{0, 1}
                                      : std::array<std::size_t, 2>{1, 0};
    p.shown = {lists[p.permutation[0]], lists[p.permutation[1]]};
    items.push_back(std::move(it));
  }
  return items;
}

// ---- structured export ----

inline nlohmann::ordered_json to_json(const SurveyItem& it) {
  nlohmann::ordered_json j;
  j["id"] = it.id;
  j["task"] = to_string(it.task);
  j["dataset"] = it.dataset;
  j["provenance"] = it.provenance;
  if (it.task == SurveyTask::kTask1) {
    const auto& p = it.task1;
    j["concept_index"] = p.concept_index;
    j["concept"] = p.concept_text;
    j["sample_ids"] = p.sample_ids;
    j["samples"] = p.samples;
    j["activations"] = p.activations;
  } else {
    const auto& p = it.task2;
    j["sample_id"] = p.sample_id;
    j["sample"] = p.sample_text;
    j["sources"] = p.sources;
    j["permutation"] = p.permutation;
    for (std::size_t s = 0; s < 2; ++s) {
      j[s == 0 ? "model_1" : "model_2"] = {{"concept_indices", p.shown[s].concept_indices},
                                           {"concepts", p.shown[s].concepts}};
    }
  }
  return j;
}

inline SurveyItem survey_item_from_json(const nlohmann::json& j) {
  SurveyItem it;
  try {
    it.id = j.at("id").get<std::string>();
    auto task = j.at("task").get<std::string>();
    if (task != "task1" && task != "task2") throw FormatError("item " + it.id + ": bad task " + task);
    it.task = task == "task1" ? SurveyTask::kTask1 : SurveyTask::kTask2;
    it.dataset = j.at("dataset").get<std::string>();
    it.provenance = j.at("provenance").get<std::string>();
    if (it.task == SurveyTask::kTask1) {
      auto& p = it.task1;
      p.concept_index = j.at("concept_index").get<std::size_t>();
      p.concept_text = j.at("concept").get<std::string>();
      p.sample_ids = j.at("sample_ids").get<std::vector<std::size_t>>();
      p.samples = j.at("samples").get<std::vector<std::string>>();
      p.activations = j.value("activations", std::vector<double>{});
    } else {
      auto& p = it.task2;
      p.sample_id = j.at("sample_id").get<std::size_t>();
      p.sample_text = j.at("sample").get<std::string>();
      p.sources = j.at("sources").get<std::array<std::string, 2>>();
      p.permutation = j.at("permutation").get<std::array<std::size_t, 2>>();
      if (!((p.permutation[0] == 0 && p.permutation[1] == 1) ||
            (p.permutation[0] == 1 && p.permutation[1] == 0))) {
        throw FormatError("item " + it.id + ": permutation must be [0,1] or [1,0]");
      }
      for (std::size_t s = 0; s < 2; ++s) {
        const auto& m = j.at(s == 0 ? "model_1" : "model_2");
        p.shown[s].concept_indices = m.at("concept_indices").get<std::vector<std::size_t>>();
        p.shown[s].concepts = m.at("concepts").get<std::vector<std::string>>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("survey item: ") + e.what());
  }
  return it;
}

inline std::string items_to_json_text(const std::vector<SurveyItem>& items) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& it : items) arr.push_back(to_json(it));
  return arr.dump(2) + "\n";
}

inline std::vector<SurveyItem> items_from_json_text(std::string_view text) {
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("survey items: ") + e.what());
  }
  if (!arr.is_array()) throw FormatError("survey items: expected a JSON array");
  std::vector<SurveyItem> items;
  std::set<std::string> ids;
  for (const auto& j : arr) {
    items.push_back(survey_item_from_json(j));
    if (!ids.insert(items.back().id).second) throw FormatError("duplicate item id " + items.back().id);
  }
  return items;
}

// ---- static HTML (blinded: no source names) ----

inline std::string html_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

namespace detail {

inline std::string rating_scale(const std::string& name) {
  static const char* labels[] = {"strongly disagree", "disagree", "neutral", "agree",
                                 "strongly agree"};
  std::string s = "<div class=\"scale\">";
  for (int v = 1; v <= 5; ++v) {
    s += "<label><input type=\"radio\" name=\"" + html_escape(name) + "\" value=\"" +
         std::to_string(v) + "\"> " + std::to_string(v) + " (" + labels[v - 1] + ")</label> ";
  }
  return s + "</div>\n";
}

inline std::string concept_list(const ExplanationList& l) {
  std::string s = "<ol>";
  for (const auto& c : l.concepts) s += "<li>" + html_escape(c) + "</li>";
  return s + "</ol>";
}

}  // namespace detail

inline std::string render_survey_html(const std::vector<SurveyItem>& items) {
  std::string h =
      "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Survey</title>\n"
      "<style>body{font-family:sans-serif;max-width:60em;margin:auto}"
      ".item{border:1px solid #999;margin:1em 0;padding:1em}"
      ".cols{display:flex;gap:2em}.cols>div{flex:1}</style></head><body>\n";
  for (const auto& it : items) {
    h += "<section class=\"item\" data-item=\"" + html_escape(it.id) + "\">\n";
    if (it.task == SurveyTask::kTask1) {
      h += "<p>Neuron concept: <b>" + html_escape(it.task1.concept_text) + "</b></p>\n";
      h += "<p>Highly activated samples:</p><ol>";
      for (const auto& s : it.task1.samples) h += "<li>" + html_escape(s) + "</li>";
      h += "</ol>\n<p>The samples are related to the concept.</p>\n";
      h += detail::rating_scale(it.id + ":rating");
    } else {
      const auto& p = it.task2;
      h += "<p>Sample: " + html_escape(p.sample_text) + "</p>\n<div class=\"cols\">";
      for (std::size_t s = 0; s < 2; ++s) {
        h += "<div><h4>Model " + std::to_string(s + 1) + "</h4>" + detail::concept_list(p.shown[s]) +
             "<p>The explanation is reasonable.</p>" +
             detail::rating_scale(it.id + ":rating_m" + std::to_string(s + 1)) + "</div>";
      }
      h += "</div>\n<p>Which model gives the better explanation?</p><div class=\"scale\">";
      static const char* prefs[][2] = {{"m1-clear", "model 1 is clearly better"},
                                       {"m1-slight", "model 1 is slightly better"},
                                       {"equal", "equally good"},
                                       {"m2-slight", "model 2 is slightly better"},
                                       {"m2-clear", "model 2 is clearly better"}};
      for (const auto& pr : prefs) {
        h += "<label><input type=\"radio\" name=\"" + html_escape(it.id) + ":preference\" value=\"" +
             pr[0] + "\"> " + pr[1] + "</label> ";
      }
      h += "</div>\n";
    }
    h += "</section>\n";
  }
  return h + "</body></html>\n";
}

// ---- ratings ----

enum class Preference { kM1Clear, kM1Slight, kEqual, kM2Slight, kM2Clear };

inline constexpr std::array<std::string_view, 5> kPreferenceNames = {
    "m1-clear", "m1-slight", "equal", "m2-slight", "m2-clear"};

inline std::string to_string(Preference p) {
  return std::string(kPreferenceNames[static_cast<std::size_t>(p)]);
}

inline Preference parse_preference(std::string_view s) {
  auto k = fold_key(s);
  for (std::size_t i = 0; i < kPreferenceNames.size(); ++i) {
    if (k == kPreferenceNames[i]) return static_cast<Preference>(i);
  }
  throw ValidationError("unknown preference '" + std::string(s) + "'");
}

struct RatingRecord {
  std::string item_id;
  std::string worker_id;
  std::optional<int> rating;  // task1
  std::optional<Preference> preference;
  std::optional<int> rating_m1, rating_m2;  // task2, as displayed
};

inline int parse_rating(std::string_view s, const std::string& where) {
  auto t = trim(s);
  if (t.size() != 1 || t[0] < '1' || t[0] > '5') {
    throw ValidationError(where + ": rating '" + t + "' outside 1..5");
  }
  return t[0] - '0';
}

// Header names the columns: item_id, worker_id, and rating and/or
// preference, rating_m1, rating_m2. Tab-delimited if the header has a tab.
inline std::vector<RatingRecord> parse_ratings(std::string_view text) {
  auto first_line = text.substr(0, text.find('\n'));
  const char delim = first_line.find('\t') != std::string_view::npos ? '\t' : ',';
  auto rows = parse_delimited(text, delim);
  if (rows.empty()) throw ValidationError("ratings: missing header");
  std::map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < rows[0].size(); ++c) col[fold_key(rows[0][c])] = c;
  for (const char* need : {"item_id", "worker_id"}) {
    if (!col.count(need)) throw ValidationError(std::string("ratings: missing column ") + need);
  }
  std::vector<RatingRecord> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::string where = "ratings row " + std::to_string(r);
    if (row.size() != rows[0].size()) throw ValidationError(where + ": wrong column count");
    auto field = [&](const char* name) -> std::string {
      auto it = col.find(name);
      return it == col.end() ? std::string() : trim(row[it->second]);
    };
    RatingRecord rec;
    rec.item_id = field("item_id");
    rec.worker_id = field("worker_id");
    if (rec.item_id.empty() || rec.worker_id.empty()) {
      throw ValidationError(where + ": empty item or worker id");
    }
    if (auto v = field("rating"); !v.empty()) rec.rating = parse_rating(v, where);
    if (auto v = field("preference"); !v.empty()) rec.preference = parse_preference(v);
    if (auto v = field("rating_m1"); !v.empty()) rec.rating_m1 = parse_rating(v, where);
    if (auto v = field("rating_m2"); !v.empty()) rec.rating_m2 = parse_rating(v, where);
    out.push_back(std::move(rec));
  }
  return out;
}

// Task 2 consistency: a preference for a model needs that model's rating to
// be no lower than the other's; "equal" needs equal ratings.
inline bool consistent(Preference p, int r1, int r2) {
  switch (p) {
    case Preference::kM1Clear:
    case Preference::kM1Slight: return r1 >= r2;
    case Preference::kEqual: return r1 == r2;
    case Preference::kM2Slight:
    case Preference::kM2Clear: return r2 >= r1;
  }
  return false;
}

struct MeanRating {
  double sum = 0.0;
  std::size_t count = 0;
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

struct DroppedRecord {
  std::string item_id;
  std::string worker_id;
  std::string reason;
};

// Preference counts over the unblinded pair: index 0 = first source clearly
// better ... 4 = second source clearly better.
using PreferenceHistogram = std::array<std::size_t, 5>;

struct SurveyReport {
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::vector<DroppedRecord> dropped_records;
  // (dataset, source) -> mean
  std::map<std::pair<std::string, std::string>, MeanRating> task1_means;
  std::map<std::pair<std::string, std::string>, MeanRating> task2_means;
  // (dataset, "a vs b") -> histogram
  std::map<std::pair<std::string, std::string>, PreferenceHistogram> preferences;
  std::map<std::string, std::size_t> ratings_per_item;  // kept records
  std::vector<std::string> under_rated;
};

inline SurveyReport aggregate_ratings(const std::vector<SurveyItem>& items,
                                      const std::vector<RatingRecord>& records,
                                      std::size_t expected = kExpectedRatingsPerItem) {
  std::map<std::string, const SurveyItem*> by_id;
  for (const auto& it : items) by_id[it.id] = &it;
  SurveyReport rep;
  for (const auto& it : items) rep.ratings_per_item[it.id] = 0;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& rec : records) {
    auto f = by_id.find(rec.item_id);
    if (f == by_id.end()) throw ValidationError("rating for unknown item id '" + rec.item_id + "'");
    if (!seen.insert({rec.item_id, rec.worker_id}).second) {
      throw ValidationError("worker " + rec.worker_id + " rated item " + rec.item_id + " twice");
    }
    const auto& it = *f->second;
    if (it.task == SurveyTask::kTask1) {
      if (!rec.rating) throw ValidationError("task1 record for " + rec.item_id + " lacks a rating");
      auto& m = rep.task1_means[{it.dataset, it.provenance}];
      m.sum += *rec.rating;
      ++m.count;
    } else {
      if (!rec.preference || !rec.rating_m1 || !rec.rating_m2) {
        throw ValidationError("task2 record for " + rec.item_id +
                              " needs preference, rating_m1 and rating_m2");
      }
      if (!consistent(*rec.preference, *rec.rating_m1, *rec.rating_m2)) {
        ++rep.dropped;
        rep.dropped_records.push_back(
            {rec.item_id, rec.worker_id,
             "preference " + to_string(*rec.preference) + " contradicts ratings (" +
                 std::to_string(*rec.rating_m1) + ", " + std::to_string(*rec.rating_m2) + ")"});
        continue;
      }
      const auto& p = it.task2;
      const std::array<int, 2> shown_rating = {*rec.rating_m1, *rec.rating_m2};
      for (std::size_t s = 0; s < 2; ++s) {
        auto& m = rep.task2_means[{it.dataset, p.source_of_shown(s)}];
        m.sum += shown_rating[s];
        ++m.count;
      }
      // Re-express the displayed preference relative to sources[0].
      auto idx = static_cast<std::size_t>(*rec.preference);
      if (p.permutation[0] == 1) idx = 4 - idx;
      rep.preferences[{it.dataset, it.provenance}][idx]++;
    }
    ++rep.kept;
    rep.ratings_per_item[rec.item_id]++;
  }
  for (const auto& [id, n] : rep.ratings_per_item) {
    if (n < expected) rep.under_rated.push_back(id);
  }
  return rep;
}

inline std::string format_mean(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string format_report(const SurveyReport& r) {
  std::string out = "kept " + std::to_string(r.kept) + " records, dropped " +
                    std::to_string(r.dropped) + " (inconsistent)\n";
  if (!r.task1_means.empty()) {
    out += "task1 mean rating\n";
    for (const auto& [key, m] : r.task1_means) {
      out += "  " + key.first + "\t" + key.second + "\t" + format_mean(m.mean()) + "\t(n=" +
             std::to_string(m.count) + ")\n";
    }
  }
  if (!r.task2_means.empty()) {
    out += "task2 mean rating\n";
    for (const auto& [key, m] : r.task2_means) {
      out += "  " + key.first + "\t" + key.second + "\t" + format_mean(m.mean()) + "\t(n=" +
             std::to_string(m.count) + ")\n";
    }
    out += "task2 preferences (first clear, first slight, equal, second slight, second clear)\n";
    for (const auto& [key, h] : r.preferences) {
      out += "  " + key.first + "\t" + key.second + "\t";
      for (std::size_t i = 0; i < h.size(); ++i) out += (i ? " " : "") + std::to_string(h[i]);
      out += "\n";
    }
  }
  for (const auto& d : r.dropped_records) {
    out += "dropped " + d.item_id + " worker " + d.worker_id + ": " + d.reason + "\n";
  }
  for (const auto& id : r.under_rated) {
    out += "under-rated " + id + " (" + std::to_string(r.ratings_per_item.at(id)) + " kept)\n";
  }
  return out;
}

inline nlohmann::ordered_json to_json(const SurveyReport& r) {
  nlohmann::ordered_json j;
  j["kept"] = r.kept;
  j["dropped"] = r.dropped;
  auto means = [](const auto& table) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (const auto& [key, m] : table) {
      a.push_back({{"dataset", key.first}, {"source", key.second}, {"mean", m.mean()}, {"count", m.count}});
    }
    return a;
  };
  j["task1"] = means(r.task1_means);
  j["task2"] = means(r.task2_means);
  j["preferences"] = nlohmann::ordered_json::array();
  for (const auto& [key, h] : r.preferences) {
    j["preferences"].push_back({{"dataset", key.first}, {"pair", key.second}, {"counts", h}});
  }
  j["under_rated"] = r.under_rated;
  return j;
}

}  // namespace cbllm

#endif  // CBLLM_SURVEY_HPP_
