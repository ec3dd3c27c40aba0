#ifndef CBLLM_CHECKPOINT_HPP_
#define CBLLM_CHECKPOINT_HPP_

#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cbllm/common.hpp"
#include "cbllm/embedding.hpp"
#include "cbllm/model.hpp"
#include "json.hpp"

namespace cbllm {

// Single-file checkpoint:
//   "CBLLMCKPT1\n" | metadata length u32 | metadata JSON text |
//   tensor count u32 | per tensor: name length u32, name bytes, rank u32,
//   dims u32 x rank, float32 payload (row-major).

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;
};

namespace detail {

inline NamedTensor to_tensor(std::string name, const Matrix& m) {
  return {std::move(name), {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)},
          std::vector<float>(m.data.begin(), m.data.end())};
}

inline NamedTensor to_tensor(std::string name, const std::vector<double>& v) {
  return {std::move(name), {static_cast<std::uint32_t>(v.size())},
          std::vector<float>(v.begin(), v.end())};
}

inline Matrix to_matrix(const NamedTensor& t, std::size_t rows, std::size_t cols) {
  if (t.shape.size() != 2 || t.shape[0] != rows || t.shape[1] != cols) {
    throw FormatError("checkpoint tensor " + t.name + " has unexpected shape");
  }
  Matrix m(rows, cols);
  std::copy(t.values.begin(), t.values.end(), m.data.begin());
  return m;
}

inline std::vector<double> to_vector(const NamedTensor& t, std::size_t len) {
  if (t.shape.size() != 1 || t.shape[0] != len) {
    throw FormatError("checkpoint tensor " + t.name + " has unexpected shape");
  }
  return {t.values.begin(), t.values.end()};
}

}  // namespace detail

inline constexpr std::string_view kCheckpointMagic = "CBLLMCKPT1\n";

inline void save_checkpoint(const CbmModel& model, const std::string& path) {
  nlohmann::json meta;
  meta["format"] = 1;
  meta["dataset"] = model.concepts().dataset_id();
  meta["concept_set_hash"] = model.concepts().hash_hex();
  meta["n"] = model.n();
  meta["k"] = model.k();
  meta["d"] = model.d();
  meta["backbone"] = model.backbone().describe();
  meta["cbl_arch"] = to_string(model.cbl().arch);
  meta["config"] = model.config().to_json();
  std::vector<std::size_t> masked, zeroed;
  for (std::size_t j = 0; j < model.k(); ++j) {
    if (model.is_masked(j)) masked.push_back(j);
    if (model.is_zeroed(j)) zeroed.push_back(j);
  }
  meta["unlearn"] = {{"masked", masked}, {"zeroed", zeroed}};

  std::vector<NamedTensor> tensors;
  if (const auto* p = model.backbone().parameters()) {
    tensors.push_back(detail::to_tensor("backbone.table", *p));
  }
  const auto& cbl = model.cbl();
  tensors.push_back(detail::to_tensor("cbl.w_out", cbl.w_out));
  tensors.push_back(detail::to_tensor("cbl.b_out", cbl.b_out));
  if (cbl.arch == CblArch::kHidden) {
    tensors.push_back(detail::to_tensor("cbl.w_hidden", cbl.w_hidden));
    tensors.push_back(detail::to_tensor("cbl.b_hidden", cbl.b_hidden));
  }
  tensors.push_back(detail::to_tensor("head.w", model.head().w));
  tensors.push_back(detail::to_tensor("head.b", model.head().b));
  for (const auto& [j, col] : model.saved_columns()) {
    tensors.push_back(detail::to_tensor("unlearn.saved." + std::to_string(j), col));
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  const std::string text = meta.dump(2);
  io::write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  io::write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    io::write_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    io::write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) io::write_u32(out, d);
    io::write_f32(out, t.values);
  }
  if (!out) throw Error("write failed: " + path);
}

struct RawCheckpoint {
  nlohmann::json meta;
  std::map<std::string, NamedTensor> tensors;
};

inline RawCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::string magic(kCheckpointMagic.size(), '\0');
  if (!in.read(magic.data(), static_cast<std::streamsize>(magic.size())) ||
      magic != kCheckpointMagic) {
    throw FormatError(path + ": not a checkpoint (bad magic)");
  }
  RawCheckpoint raw;
  std::string text(io::read_u32(in, "metadata length"), '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(text.size()))) {
    throw FormatError(path + ": truncated metadata");
  }
  try {
    raw.meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": bad metadata: " + e.what());
  }
  const auto count = io::read_u32(in, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(io::read_u32(in, "tensor name length"));
    if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) {
      throw FormatError(path + ": truncated tensor name");
    }
    const auto rank = io::read_u32(in, "tensor rank");
    std::size_t total = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(io::read_u32(in, "tensor dims"));
      total *= t.shape.back();
    }
    t.values.resize(total);
    io::read_f32(in, t.values, t.name.c_str());
    raw.tensors.emplace(t.name, std::move(t));
  }
  return raw;
}

// Rebuilds the model. The concept set must match the one the checkpoint was
// trained with (hash and k). `backend` supplies the embedder for frozen
// feature backbones; when null the recorded embedder spec is re-created.
inline CbmModel load_checkpoint(const std::string& path,
                                std::shared_ptr<const ConceptSet> concepts,
                                std::shared_ptr<const EmbeddingBackend> backend = nullptr) {
  auto raw = read_checkpoint(path);
  const auto& meta = raw.meta;
  const auto k = meta.at("k").get<std::size_t>();
  const auto n = meta.at("n").get<std::size_t>();
  const auto d = meta.at("d").get<std::size_t>();
  if (k != concepts->k()) {
    throw ValidationError(path + ": checkpoint has k=" + std::to_string(k) +
                          " but the concept set has k=" + std::to_string(concepts->k()));
  }
  if (meta.at("concept_set_hash").get<std::string>() != concepts->hash_hex()) {
    throw ValidationError(path + ": concept set hash mismatch (checkpoint was trained on a "
                                 "different concept set)");
  }
  auto tensor = [&](const std::string& name) -> const NamedTensor& {
    auto it = raw.tensors.find(name);
    if (it == raw.tensors.end()) throw FormatError(path + ": missing tensor " + name);
    return it->second;
  };

  const auto& bb = meta.at("backbone");
  std::unique_ptr<Backbone> backbone;
  const auto kind = bb.at("kind").get<std::string>();
  if (kind == "token_encoder") {
    auto tok = make_tokenizer(bb.at("tokenizer").get<std::string>());
    auto table = detail::to_matrix(tensor("backbone.table"), tok->vocab_size() + 1, d);
    backbone = std::make_unique<TokenEncoder>(std::move(tok), std::move(table));
  } else if (kind == "features") {
    auto spec = bb.at("embedder").get<std::string>();
    if (!backend) {
      if (spec.rfind("fixture", 0) == 0) {
        throw ValidationError(path + ": fixture-backed checkpoint needs an explicit backend");
      }
      backend = make_backend(spec);
    }
    if (backend->dim() != d) throw ValidationError(path + ": embedder dim mismatch");
    backbone = std::make_unique<FeatureBackbone>(std::move(backend));
  } else {
    throw FormatError(path + ": unknown backbone kind " + kind);
  }

  ConceptBottleneckLayer cbl;
  cbl.arch = parse_cbl_arch(meta.at("cbl_arch").get<std::string>());
  const std::size_t h = d;
  cbl.w_out = detail::to_matrix(tensor("cbl.w_out"), k, h);
  cbl.b_out = detail::to_vector(tensor("cbl.b_out"), k);
  if (cbl.arch == CblArch::kHidden) {
    cbl.w_hidden = detail::to_matrix(tensor("cbl.w_hidden"), d, d);
    cbl.b_hidden = detail::to_vector(tensor("cbl.b_hidden"), d);
  }
  PredictorHead head;
  head.w = detail::to_matrix(tensor("head.w"), n, k);
  head.b = detail::to_vector(tensor("head.b"), n);

  CbmModel model(std::move(backbone), std::move(cbl), std::move(head), concepts,
                 TrainConfig::from_json(meta.at("config")));
  std::vector<bool> mask(k, false);
  std::map<std::size_t, std::vector<double>> saved;
  const auto& un = meta.at("unlearn");
  for (auto j : un.at("masked").get<std::vector<std::size_t>>()) {
    if (j >= k) throw FormatError(path + ": masked index out of range");
    mask[j] = true;
  }
  for (auto j : un.at("zeroed").get<std::vector<std::size_t>>()) {
    saved[j] = detail::to_vector(tensor("unlearn.saved." + std::to_string(j)), n);
  }
  model.set_unlearn_state(std::move(mask), std::move(saved));
  return model;
}

}  // namespace cbllm

#endif  // CBLLM_CHECKPOINT_HPP_
