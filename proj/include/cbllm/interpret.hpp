#ifndef CBLLM_INTERPRET_HPP_
#define CBLLM_INTERPRET_HPP_

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "cbllm/common.hpp"
#include "cbllm/model.hpp"
#include "json.hpp"

namespace cbllm {

inline constexpr std::size_t kDefaultTopK = 5;
inline constexpr std::size_t kDefaultExplainR = 5;

// Raw A_N for every text, m x k (masked neurons read 0).
inline Matrix concept_activations(const CbmModel& model, const std::vector<std::string>& texts) {
  Matrix a(texts.size(), model.k());
  for (std::size_t x = 0; x < texts.size(); ++x) {
    auto row = model.forward_concepts(texts[x]);
    std::copy(row.begin(), row.end(), a.row(x).begin());
  }
  return a;
}

struct ActivatedSample {
  std::size_t sample = 0;
  double activation = 0.0;
};

struct NeuronProfile {
  std::size_t concept_index = 0;
  std::string concept_text;
  std::size_t class_index = 0;
  std::vector<ActivatedSample> top;
};

// Top-K samples for neuron j by raw activation, descending, ties to the lower
// sample id. `activations` is the m x k matrix from concept_activations.
inline NeuronProfile neuron_top_k(const CbmModel& model, const Matrix& activations,
                                  std::size_t j, std::size_t top_k = kDefaultTopK) {
  if (j >= model.k()) {
    throw ValidationError("concept index " + std::to_string(j) + " out of range (k=" +
                          std::to_string(model.k()) + ")");
  }
  if (model.is_masked(j)) {
    throw ValidationError("neuron " + std::to_string(j) + " is masked");
  }
  if (activations.cols != model.k()) throw ValidationError("activation matrix width != k");
  std::vector<ActivatedSample> all(activations.rows);
  for (std::size_t x = 0; x < activations.rows; ++x) all[x] = {x, activations(x, j)};
  auto better = [](const ActivatedSample& a, const ActivatedSample& b) {
    if (a.activation != b.activation) return a.activation > b.activation;
    return a.sample < b.sample;
  };
  const auto keep = std::min(top_k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), better);
  all.resize(keep);
  return {j, model.concepts().concept_text(j), model.concepts().class_of(j), std::move(all)};
}

inline NeuronProfile neuron_top_k(const CbmModel& model, const std::vector<std::string>& texts,
                                  std::size_t j, std::size_t top_k = kDefaultTopK) {
  if (j >= model.k()) {
    throw ValidationError("concept index " + std::to_string(j) + " out of range (k=" +
                          std::to_string(model.k()) + ")");
  }
  return neuron_top_k(model, concept_activations(model, texts), j, top_k);
}

// W_ij * A+_j for every concept j.
inline std::vector<double> contributions_from(const PredictorHead& head,
                                              std::span<const double> act_pos, std::size_t cls) {
  if (cls >= head.n()) throw ValidationError("class index out of range");
  std::vector<double> c(head.k());
  auto w = head.w.row(cls);
  for (std::size_t j = 0; j < c.size(); ++j) c[j] = w[j] * act_pos[j];
  return c;
}

inline std::vector<double> contributions(const CbmModel& model, std::string_view text,
                                         std::size_t cls) {
  auto a = relu_activations(model.forward_concepts(text));
  return contributions_from(model.head(), a, cls);
}

struct ExplanationEntry {
  std::size_t concept_index = 0;
  std::string concept_text;
  double contribution = 0.0;
};

struct Explanation {
  std::optional<std::size_t> sample;
  std::size_t predicted = 0;
  std::vector<double> logits;
  std::vector<ExplanationEntry> entries;
};

inline Explanation explain_activations(const CbmModel& model, std::span<const double> raw,
                                       std::size_t r) {
  if (r == 0) throw ValidationError("explanation length r must be >= 1");
  auto pos = relu_activations(raw);
  auto pred = predict_from_activations(model.head(), pos);
  auto c = contributions_from(model.head(), pos, pred.predicted);
  std::vector<std::size_t> order(c.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  const auto keep = std::min(r, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (c[a] != c[b]) return c[a] > c[b];
                      return a < b;
                    });
  Explanation e;
  e.predicted = pred.predicted;
  e.logits = std::move(pred.logits);
  for (std::size_t i = 0; i < keep; ++i) {
    auto j = order[i];
    e.entries.push_back({j, model.concepts().concept_text(j), c[j]});
  }
  return e;
}

inline Explanation explain(const CbmModel& model, std::string_view text,
                           std::size_t r = kDefaultExplainR,
                           std::optional<std::size_t> sample = std::nullopt) {
  auto e = explain_activations(model, model.forward_concepts(text), r);
  e.sample = sample;
  return e;
}

// ---- unlearning ----

struct FlippedSample {
  std::size_t sample = 0;
  std::size_t before_class = 0;
  std::size_t after_class = 0;
  std::vector<double> before_logits;
  std::vector<double> after_logits;
};

struct DiffReport {
  std::size_t concept_index = 0;
  std::string concept_text;
  UnlearnMode mode = UnlearnMode::kZeroWeights;
  bool changed = false;
  std::vector<std::string> warnings;
  std::size_t probed = 0;
  std::vector<FlippedSample> flipped;
};

struct UnlearnResult {
  CbmModel model;
  DiffReport report;
};

// Predictions over the probe set before and after, from raw activations so
// the backbone runs once per sample.
inline std::vector<FlippedSample> diff_predictions(const CbmModel& before, const CbmModel& after,
                                                   const Matrix& raw_activations) {
  std::vector<FlippedSample> out;
  std::vector<double> a_before(before.k()), a_after(after.k());
  for (std::size_t x = 0; x < raw_activations.rows; ++x) {
    auto raw = raw_activations.row(x);
    for (std::size_t j = 0; j < raw.size(); ++j) {
      a_before[j] = before.is_masked(j) ? 0.0 : std::max(0.0, raw[j]);
      a_after[j] = after.is_masked(j) ? 0.0 : std::max(0.0, raw[j]);
    }
    auto p0 = predict_from_activations(before.head(), a_before);
    auto p1 = predict_from_activations(after.head(), a_after);
    if (p0.predicted != p1.predicted) {
      out.push_back({x, p0.predicted, p1.predicted, std::move(p0.logits), std::move(p1.logits)});
    }
  }
  return out;
}

// Unlearns concept j on a copy. `probe_activations` are the unmasked raw
// activations of the probe set (rows of concept_activations on a model with
// no masks); pass an empty matrix to skip the diff.
inline UnlearnResult unlearn(const CbmModel& model, std::size_t j, UnlearnMode mode,
                             const Matrix& probe_activations) {
  model.concepts().concept_text(j);
  UnlearnResult res{model, {}};
  auto& rep = res.report;
  rep.concept_index = j;
  rep.concept_text = model.concepts().concept_text(j);
  rep.mode = mode;
  rep.changed = mode == UnlearnMode::kMaskNeuron ? res.model.mask_neuron(j)
                                                 : res.model.zero_weights(j);
  if (!rep.changed) {
    rep.warnings.push_back("concept " + std::to_string(j) + " is already unlearned (" +
                           to_string(mode) + "); no change");
  } else if (model.is_unlearned(j)) {
    rep.warnings.push_back("concept " + std::to_string(j) +
                           " was already unlearned in the other mode");
  }
  rep.probed = probe_activations.rows;
  if (rep.changed && probe_activations.rows > 0) {
    if (probe_activations.cols != model.k()) throw ValidationError("probe activation width != k");
    rep.flipped = diff_predictions(model, res.model, probe_activations);
  }
  return res;
}

inline UnlearnResult unlearn(const CbmModel& model, std::size_t j, UnlearnMode mode,
                             const std::vector<std::string>& probe_texts) {
  model.concepts().concept_text(j);
  CbmModel clean = model;
  clean.restore();
  return unlearn(model, j, mode, concept_activations(clean, probe_texts));
}

// Copy with all masks cleared and zeroed columns reinstated.
inline CbmModel restore(const CbmModel& model, bool* changed = nullptr) {
  CbmModel out = model;
  bool c = out.restore();
  if (changed) *changed = c;
  return out;
}

// Optional check of unlearning effects with an external entailment model:
// counts flipped samples whose text entails the hypothesis above threshold.
class EntailmentScorer {
 public:
  virtual ~EntailmentScorer() = default;
  virtual double entailment(std::string_view premise, std::string_view hypothesis) const = 0;
};

inline std::size_t count_entailing_flips(const DiffReport& report,
                                         const std::vector<std::string>& probe_texts,
                                         std::string_view hypothesis,
                                         const EntailmentScorer& scorer, double threshold) {
  std::size_t n = 0;
  for (const auto& f : report.flipped) {
    if (scorer.entailment(probe_texts.at(f.sample), hypothesis) >= threshold) ++n;
  }
  return n;
}

// ---- JSON views ----

inline nlohmann::json to_json(const NeuronProfile& p) {
  nlohmann::json top = nlohmann::json::array();
  for (const auto& s : p.top) top.push_back({{"sample", s.sample}, {"activation", s.activation}});
  return {{"concept_index", p.concept_index}, {"concept", p.concept_text},
          {"class_index", p.class_index},     {"top", top}};
}

inline nlohmann::json to_json(const Explanation& e) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& c : e.entries) {
    entries.push_back({{"concept_index", c.concept_index},
                       {"concept", c.concept_text},
                       {"contribution", c.contribution}});
  }
  nlohmann::json j = {{"predicted", e.predicted}, {"logits", e.logits}, {"explanation", entries}};
  j["sample"] = e.sample ? nlohmann::json(*e.sample) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const DiffReport& r) {
  nlohmann::json flipped = nlohmann::json::array();
  for (const auto& f : r.flipped) {
    flipped.push_back({{"sample", f.sample},
                       {"before_class", f.before_class},
                       {"after_class", f.after_class},
                       {"before_logits", f.before_logits},
                       {"after_logits", f.after_logits}});
  }
  return {{"concept_index", r.concept_index}, {"concept", r.concept_text},
          {"mode", to_string(r.mode)},       {"changed", r.changed},
          {"warnings", r.warnings},          {"probed", r.probed},
          {"flipped", flipped}};
}

}  // namespace cbllm

#endif  // CBLLM_INTERPRET_HPP_
