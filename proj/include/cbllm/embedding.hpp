#ifndef CBLLM_EMBEDDING_HPP_
#define CBLLM_EMBEDDING_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cbllm/common.hpp"
#include "cbllm/tokenizer.hpp"

namespace cbllm {

struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<float> values;  // row-major
  std::string source_id;

  std::span<const float> row(std::size_t r) const {
    return {values.data() + r * dim, dim};
  }
  std::span<float> row(std::size_t r) { return {values.data() + r * dim, dim}; }
};

struct BackendStats {
  std::uint64_t embed_calls = 0;
};

// Sentence-embedding provider E. Thread-safe for concurrent embed_texts calls.
class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;

  virtual std::size_t dim() const = 0;
  virtual std::string id() const = 0;

  EmbeddingMatrix embed_texts(const std::vector<std::string>& texts) const {
    if (texts.empty()) throw ValidationError("embed_texts: empty input");
    EmbeddingMatrix m;
    m.rows = texts.size();
    m.dim = dim();
    m.source_id = id();
    m.values.resize(m.rows * m.dim);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      auto v = embed_one(texts[i]);
      if (v.size() != m.dim) {
        throw Error("embedding backend " + id() + " returned dim " +
                    std::to_string(v.size()) + ", expected " + std::to_string(m.dim));
      }
      for (std::size_t c = 0; c < m.dim; ++c) {
        if (!std::isfinite(v[c])) throw Error("non-finite embedding for text " + std::to_string(i));
        m.values[i * m.dim + c] = v[c];
      }
    }
    calls_.fetch_add(texts.size(), std::memory_order_relaxed);
    return m;
  }

  BackendStats stats() const { return {calls_.load(std::memory_order_relaxed)}; }
  void reset_stats() { calls_.store(0, std::memory_order_relaxed); }

 protected:
  virtual std::vector<float> embed_one(std::string_view text) const = 0;

 private:
  mutable std::atomic<std::uint64_t> calls_{0};
};

inline void normalize_in_place(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0) {
    for (double& x : v) x /= n;
  }
}

// Deterministic stand-in for a sentence encoder: every lower-cased word maps
// through a seeded hash to a fixed random direction; a text embeds as the
// normalized sum of its word directions, so texts sharing words are similar.
class MockBackend : public EmbeddingBackend {
 public:
  MockBackend(std::uint64_t seed, std::size_t dim) : seed_(seed), dim_(dim) {
    if (dim == 0) throw ValidationError("mock backend needs dim > 0");
  }

  std::size_t dim() const override { return dim_; }
  std::string id() const override {
    return "mock:seed=" + std::to_string(seed_) + ":dim=" + std::to_string(dim_);
  }

  std::vector<double> word_vector(std::string_view word) const {
    std::vector<double> v(dim_);
    const std::uint64_t base = fnv1a64(word, seed_);
    for (std::size_t c = 0; c < dim_; ++c) {
      // Map 53 hash bits to [-1, 1).
      std::uint64_t h = splitmix64(base + c * 0x632BE59BD9B4E019ULL);
      v[c] = static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
    }
    return v;
  }

 protected:
  std::vector<float> embed_one(std::string_view text) const override {
    std::vector<double> acc(dim_, 0.0);
    auto words = HashWordTokenizer::words(text);
    if (words.empty()) words.emplace_back(text);
    for (const auto& w : words) {
      auto v = word_vector(w);
      for (std::size_t c = 0; c < dim_; ++c) acc[c] += v[c];
    }
    normalize_in_place(acc);
    return {acc.begin(), acc.end()};
  }

 private:
  std::uint64_t seed_;
  std::size_t dim_;
};

// Returns injected vectors verbatim (no normalization); unknown text fails.
class FixtureBackend : public EmbeddingBackend {
 public:
  explicit FixtureBackend(std::size_t dim) : dim_(dim) {}

  void set(std::string text, std::vector<float> v) {
    if (v.size() != dim_) throw ValidationError("fixture vector has wrong dim");
    table_[std::move(text)] = std::move(v);
  }

  std::size_t dim() const override { return dim_; }
  std::string id() const override { return "fixture:dim=" + std::to_string(dim_); }

 protected:
  std::vector<float> embed_one(std::string_view text) const override {
    auto it = table_.find(std::string(text));
    if (it == table_.end()) throw Error("fixture backend has no vector for '" + std::string(text) + "'");
    return it->second;
  }

 private:
  std::size_t dim_;
  std::unordered_map<std::string, std::vector<float>> table_;
};

// ---- EMB1 matrix files ----
// magic "EMB1" | rows u32 | dim u32 | flags u32 | source hash 32B |
// reserved 32B | rows*dim float32 row-major.

inline void save_embeddings(const EmbeddingMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write("EMB1", 4);
  io::write_u32(out, static_cast<std::uint32_t>(m.rows));
  io::write_u32(out, static_cast<std::uint32_t>(m.dim));
  io::write_u32(out, 0);
  io::write_bytes(out, sha256(m.source_id));
  Digest zero{};
  io::write_bytes(out, zero);
  io::write_f32(out, m.values);
  if (!out) throw Error("write failed: " + path);
}

struct LoadedEmbeddings {
  EmbeddingMatrix matrix;
  Digest source_hash{};
};

inline LoadedEmbeddings load_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "EMB1") {
    throw FormatError(path + ": bad magic, expected EMB1");
  }
  LoadedEmbeddings out;
  out.matrix.rows = io::read_u32(in, "rows");
  out.matrix.dim = io::read_u32(in, "dim");
  io::read_u32(in, "flags");
  io::read_bytes(in, out.source_hash, "source hash");
  Digest reserved{};
  io::read_bytes(in, reserved, "reserved");
  out.matrix.values.resize(out.matrix.rows * out.matrix.dim);
  io::read_f32(in, out.matrix.values, "embedding payload");
  out.matrix.source_id = "sha256:" + to_hex(out.source_hash);
  return out;
}

// Pretrained static token-embedding encoder: BPE tokens -> embedding rows,
// mean-pooled and L2-normalized. Directory layout: embeddings.emb (EMB1,
// vocab x dim) and tokenizer.json.
class StaticEmbeddingBackend : public EmbeddingBackend {
 public:
  explicit StaticEmbeddingBackend(const std::filesystem::path& dir)
      : dir_(std::filesystem::weakly_canonical(dir)) {
    auto loaded = load_embeddings((dir / "embeddings.emb").string());
    table_ = std::move(loaded.matrix);
    tokenizer_ = std::make_shared<BpeTokenizer>((dir / "tokenizer.json").string());
  }

  std::size_t dim() const override { return table_.dim; }
  // Bare directory name; make_backend resolves it under the cache.
  std::string id() const override { return dir_.filename().string(); }
  const EmbeddingMatrix& table() const { return table_; }
  std::shared_ptr<const Tokenizer> tokenizer() const { return tokenizer_; }

 protected:
  std::vector<float> embed_one(std::string_view text) const override {
    auto ids = tokenizer_->encode(text);
    std::vector<double> acc(table_.dim, 0.0);
    for (auto id : ids) {
      auto r = table_.row(std::clamp<std::size_t>(static_cast<std::size_t>(std::max(id, 0)), 0, table_.rows - 1));
      for (std::size_t c = 0; c < table_.dim; ++c) acc[c] += r[c];
    }
    if (!ids.empty()) {
      for (auto& x : acc) x /= static_cast<double>(ids.size());
    }
    normalize_in_place(acc);
    return {acc.begin(), acc.end()};
  }

 private:
  std::filesystem::path dir_;
  EmbeddingMatrix table_;
  std::shared_ptr<const Tokenizer> tokenizer_;
};

// Cache root: $CBLLM_CACHE, else ~/.cache/cbllm.
inline std::filesystem::path cache_dir() {
  if (const char* env = std::getenv("CBLLM_CACHE"); env && *env) return env;
  if (const char* home = std::getenv("HOME"); home && *home) {
    return std::filesystem::path(home) / ".cache" / "cbllm";
  }
  return std::filesystem::temp_directory_path() / "cbllm";
}

// "mock:seed=0:dim=64", "static:<dir>", or a bare model identifier resolved
// under <cache>/encoders/<id>.
inline std::shared_ptr<EmbeddingBackend> make_backend(std::string_view spec) {
  if (spec.rfind("mock", 0) == 0) {
    std::uint64_t seed = 0;
    std::size_t dim = 64;
    auto parts = split(spec, ':');
    for (std::size_t i = 1; i < parts.size(); ++i) {
      auto kv = split(parts[i], '=');
      if (kv.size() != 2) throw ValidationError("bad embedder option: " + parts[i]);
      if (kv[0] == "seed") {
        seed = std::stoull(kv[1]);
      } else if (kv[0] == "dim") {
        dim = std::stoull(kv[1]);
      } else {
        throw ValidationError("unknown embedder option: " + kv[0]);
      }
    }
    return std::make_shared<MockBackend>(seed, dim);
  }
  std::filesystem::path dir;
  if (spec.rfind("static:", 0) == 0) {
    dir = std::string(spec.substr(7));
  } else {
    dir = cache_dir() / "encoders" / std::string(spec);
  }
  if (!std::filesystem::exists(dir / "embeddings.emb")) {
    throw ValidationError("embedder '" + std::string(spec) + "': no model at " +
                          dir.string() + " (run tools/fetch_static_encoder.py)");
  }
  return std::make_shared<StaticEmbeddingBackend>(dir);
}

}  // namespace cbllm

#endif  // CBLLM_EMBEDDING_HPP_
