#ifndef CBLLM_SCORING_HPP_
#define CBLLM_SCORING_HPP_

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cbllm/common.hpp"
#include "cbllm/concept_store.hpp"
#include "cbllm/embedding.hpp"

namespace cbllm {

// m x k concept scores S_c(x), raw (ACS) or corrected (ACC).
struct ScoreMatrix {
  std::size_t m = 0;
  std::size_t k = 0;
  std::vector<float> values;  // row-major
  Digest concept_hash{};
  bool corrected = false;
  Digest label_hash{};  // zero unless corrected

  float at(std::size_t x, std::size_t j) const { return values[x * k + j]; }
  std::span<const float> row(std::size_t x) const { return {values.data() + x * k, k}; }
  bool operator==(const ScoreMatrix&) const = default;
};

inline Digest label_hash(std::span<const std::size_t> labels) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(labels.size() * 4);
  for (auto y : labels) {
    auto v = static_cast<std::uint32_t>(y);
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  return sha256(bytes);
}

// Raw-vector path of ACS: values[x][j] = E(c_j) . E(x).
inline ScoreMatrix acs_score_embeddings(const EmbeddingMatrix& texts,
                                        const EmbeddingMatrix& concepts) {
  if (texts.dim != concepts.dim) throw ValidationError("text/concept embedding dims differ");
  ScoreMatrix s;
  s.m = texts.rows;
  s.k = concepts.rows;
  s.values.resize(s.m * s.k);
  for (std::size_t x = 0; x < s.m; ++x) {
    auto ex = texts.row(x);
    for (std::size_t j = 0; j < s.k; ++j) {
      auto ec = concepts.row(j);
      double acc = 0.0;
      for (std::size_t c = 0; c < texts.dim; ++c) {
        acc += static_cast<double>(ec[c]) * static_cast<double>(ex[c]);
      }
      s.values[x * s.k + j] = static_cast<float>(acc);
    }
  }
  return s;
}

// Automatic concept scoring: each text and each concept is embedded exactly
// once, so the backend sees m + k inferences.
inline ScoreMatrix acs_score_dataset(const std::vector<std::string>& texts,
                                     const ConceptSet& concepts,
                                     const EmbeddingBackend& backend) {
  if (texts.empty()) throw ValidationError("ACS needs at least one text");
  if (concepts.k() == 0) throw ValidationError("ACS needs at least one concept");
  auto concept_emb = backend.embed_texts(concepts.concepts());
  auto text_emb = backend.embed_texts(texts);
  auto s = acs_score_embeddings(text_emb, concept_emb);
  s.concept_hash = concepts.hash();
  return s;
}

// The correction rule for one entry: keep a strictly positive score of a
// concept from the sample's own class, zero everything else.
inline float acc_entry(float score, std::size_t concept_class, std::size_t label) {
  return (score > 0.0f && concept_class == label) ? score : 0.0f;
}

// Automatic concept correction. Consumes training labels only; needs no
// embedding calls. The input is left untouched.
inline ScoreMatrix acc_correct(const ScoreMatrix& scores,
                               std::span<const std::size_t> labels,
                               const ConceptSet& concepts) {
  if (scores.corrected) throw ValidationError("score matrix is already ACC-corrected");
  if (labels.size() != scores.m) {
    throw ValidationError("ACC: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(scores.m) + " samples");
  }
  if (scores.k != concepts.k()) throw ValidationError("ACC: concept count mismatch");
  for (std::size_t x = 0; x < labels.size(); ++x) {
    if (labels[x] >= concepts.n()) {
      throw ValidationError("ACC: label " + std::to_string(labels[x]) + " of sample " +
                            std::to_string(x) + " out of range");
    }
  }
  ScoreMatrix out = scores;
  const auto& cmap = concepts.class_map();
  for (std::size_t x = 0; x < scores.m; ++x) {
    for (std::size_t j = 0; j < scores.k; ++j) {
      out.values[x * scores.k + j] = acc_entry(scores.at(x, j), cmap[j], labels[x]);
    }
  }
  out.corrected = true;
  out.label_hash = label_hash(labels);
  return out;
}

// ---- SCM1 files ----
// magic "SCM1" | m u32 | k u32 | flags u32 (bit0 corrected) | concept hash 32B
// | label hash 32B | m*k float32 row-major.

inline void save_scores(const ScoreMatrix& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write("SCM1", 4);
  io::write_u32(out, static_cast<std::uint32_t>(s.m));
  io::write_u32(out, static_cast<std::uint32_t>(s.k));
  io::write_u32(out, s.corrected ? 1u : 0u);
  io::write_bytes(out, s.concept_hash);
  io::write_bytes(out, s.label_hash);
  io::write_f32(out, s.values);
  if (!out) throw Error("write failed: " + path);
}

struct LoadedScores {
  ScoreMatrix scores;
  std::vector<std::string> warnings;
};

inline LoadedScores load_scores(const std::string& path,
                                const ConceptSet* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "SCM1") {
    throw FormatError(path + ": bad magic, expected SCM1");
  }
  LoadedScores out;
  auto& s = out.scores;
  s.m = io::read_u32(in, "m");
  s.k = io::read_u32(in, "k");
  auto flags = io::read_u32(in, "flags");
  if (flags & ~1u) throw FormatError(path + ": unknown flag bits");
  s.corrected = (flags & 1u) != 0;
  io::read_bytes(in, s.concept_hash, "concept hash");
  io::read_bytes(in, s.label_hash, "label hash");
  s.values.resize(s.m * s.k);
  io::read_f32(in, s.values, "score payload");
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path + ": trailing bytes after payload (shape mismatch)");
  }
  for (float v : s.values) {
    if (!std::isfinite(v)) throw FormatError(path + ": non-finite score");
  }
  if (expected != nullptr) {
    if (expected->k() != s.k) {
      throw FormatError(path + ": k=" + std::to_string(s.k) + " but concept set has k=" +
                        std::to_string(expected->k()));
    }
    if (expected->hash() != s.concept_hash) {
      out.warnings.push_back("score matrix was computed for a different concept set (hash " +
                             to_hex(s.concept_hash).substr(0, 12) + " vs " +
                             expected->hash_hex().substr(0, 12) + ")");
    }
  }
  return out;
}

}  // namespace cbllm

#endif  // CBLLM_SCORING_HPP_
