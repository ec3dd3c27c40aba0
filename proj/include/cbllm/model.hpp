#ifndef CBLLM_MODEL_HPP_
#define CBLLM_MODEL_HPP_

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cbllm/common.hpp"
#include "cbllm/concept_store.hpp"
#include "cbllm/embedding.hpp"
#include "cbllm/tokenizer.hpp"
#include "json.hpp"

namespace cbllm {

// ---- backbone f_LM ----

struct Encoding {
  std::vector<double> pooled;
  std::vector<std::int32_t> tokens;
};

// d(loss)/d(row) for the rows of a parameter table touched by a batch.
using RowGradients = std::unordered_map<std::size_t, std::vector<double>>;

class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual std::size_t dim() const = 0;
  virtual Encoding encode(std::string_view text) const = 0;
  virtual std::unique_ptr<Backbone> clone() const = 0;
  // Everything needed to rebuild the backbone besides its tensors.
  virtual nlohmann::json describe() const = 0;

  virtual bool trainable() const { return false; }
  virtual void backward(const Encoding&, std::span<const double> /*grad_pooled*/,
                        RowGradients& /*grads*/) const {}
  // Trainable parameters as a row table (theta_1); null when frozen.
  virtual Matrix* parameters() { return nullptr; }
  virtual const Matrix* parameters() const { return nullptr; }
};

// Token-embedding encoder with a [CLS] row. The sequence is [CLS, t_1..t_n];
// one uniform-attention mixing layer makes the first-position output
// e_CLS + mean_i e_{t_i}, and that first-token state is the pooled
// embedding. The CLS row is the last row of the table.
class TokenEncoder : public Backbone {
 public:
  TokenEncoder(std::shared_ptr<const Tokenizer> tokenizer, Matrix table)
      : tokenizer_(std::move(tokenizer)), table_(std::move(table)) {
    if (table_.rows != tokenizer_->vocab_size() + 1) {
      throw ValidationError("token table needs vocab_size + 1 rows (last row is CLS)");
    }
  }

  // Random N(0, 1/d) rows, CLS row zero.
  static std::unique_ptr<TokenEncoder> random(std::shared_ptr<const Tokenizer> tok,
                                              std::size_t dim, std::uint64_t seed) {
    Matrix t(tok->vocab_size() + 1, dim);
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (std::size_t r = 0; r + 1 < t.rows; ++r) {
      for (auto& x : t.row(r)) x = rng.normal() * scale;
    }
    round_to_f32(t.data);
    return std::make_unique<TokenEncoder>(std::move(tok), std::move(t));
  }

  // Initialized from a pretrained static embedding model (CLS row zero), so
  // before fine-tuning the pooled output is the mean token embedding.
  static std::unique_ptr<TokenEncoder> from_static(const StaticEmbeddingBackend& src) {
    const auto& e = src.table();
    Matrix t(e.rows + 1, e.dim);
    for (std::size_t i = 0; i < e.values.size(); ++i) t.data[i] = e.values[i];
    if (src.tokenizer()->vocab_size() != e.rows) {
      throw ValidationError("static model tokenizer/table size mismatch");
    }
    return std::make_unique<TokenEncoder>(src.tokenizer(), std::move(t));
  }

  std::size_t dim() const override { return table_.cols; }
  std::size_t cls_row() const { return table_.rows - 1; }
  const Tokenizer& tokenizer() const { return *tokenizer_; }

  Encoding encode(std::string_view text) const override {
    Encoding e;
    e.tokens = tokenizer_->encode(text);
    for (auto& t : e.tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= cls_row()) t = 0;
    }
    auto cls = table_.row(cls_row());
    e.pooled.assign(cls.begin(), cls.end());
    if (!e.tokens.empty()) {
      const double inv = 1.0 / static_cast<double>(e.tokens.size());
      for (auto t : e.tokens) {
        auto r = table_.row(static_cast<std::size_t>(t));
        for (std::size_t c = 0; c < r.size(); ++c) e.pooled[c] += inv * r[c];
      }
    }
    return e;
  }

  std::unique_ptr<Backbone> clone() const override {
    return std::make_unique<TokenEncoder>(*this);
  }

  nlohmann::json describe() const override {
    return {{"kind", "token_encoder"}, {"tokenizer", tokenizer_->spec()}, {"dim", dim()}};
  }

  bool trainable() const override { return true; }

  void backward(const Encoding& enc, std::span<const double> g,
                RowGradients& grads) const override {
    auto add = [&](std::size_t row, double scale) {
      auto& dst = grads[row];
      if (dst.empty()) dst.assign(dim(), 0.0);
      for (std::size_t c = 0; c < g.size(); ++c) dst[c] += scale * g[c];
    };
    add(cls_row(), 1.0);
    if (!enc.tokens.empty()) {
      const double inv = 1.0 / static_cast<double>(enc.tokens.size());
      for (auto t : enc.tokens) add(static_cast<std::size_t>(t), inv);
    }
  }

  Matrix* parameters() override { return &table_; }
  const Matrix* parameters() const override { return &table_; }

 private:
  std::shared_ptr<const Tokenizer> tokenizer_;
  Matrix table_;
};

// Frozen features from an embedding backend (or injected fixture vectors).
class FeatureBackbone : public Backbone {
 public:
  explicit FeatureBackbone(std::shared_ptr<const EmbeddingBackend> backend)
      : backend_(std::move(backend)) {}

  std::size_t dim() const override { return backend_->dim(); }

  Encoding encode(std::string_view text) const override {
    auto m = backend_->embed_texts({std::string(text)});
    return {{m.values.begin(), m.values.end()}, {}};
  }

  std::unique_ptr<Backbone> clone() const override {
    return std::make_unique<FeatureBackbone>(*this);
  }

  nlohmann::json describe() const override {
    return {{"kind", "features"}, {"embedder", backend_->id()}, {"dim", dim()}};
  }

 private:
  std::shared_ptr<const EmbeddingBackend> backend_;
};

// ---- concept bottleneck layer f_CBL ----

enum class CblArch { kLinear, kHidden };

inline std::string to_string(CblArch a) { return a == CblArch::kLinear ? "linear" : "hidden"; }
inline CblArch parse_cbl_arch(std::string_view s) {
  if (s == "linear") return CblArch::kLinear;
  if (s == "hidden" || s == "mlp") return CblArch::kHidden;
  throw ValidationError("unknown CBL architecture: " + std::string(s));
}

struct CblCache {
  std::vector<double> hidden;  // post-ReLU hidden layer (kHidden only)
  std::vector<double> out;     // A_N before masking
};

struct CblGradients {
  Matrix w_out;
  std::vector<double> b_out;
  Matrix w_hidden;
  std::vector<double> b_hidden;
};

// R^d -> R^k, either affine or one hidden ReLU layer of width d.
struct ConceptBottleneckLayer {
  CblArch arch = CblArch::kLinear;
  Matrix w_out;                 // k x h
  std::vector<double> b_out;    // k
  Matrix w_hidden;              // d x d (kHidden)
  std::vector<double> b_hidden; // d

  static ConceptBottleneckLayer init(CblArch arch, std::size_t d, std::size_t k,
                                     std::uint64_t seed) {
    ConceptBottleneckLayer l;
    l.arch = arch;
    Rng rng(seed);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    if (arch == CblArch::kHidden) {
      l.w_hidden = Matrix(d, d);
      for (auto& x : l.w_hidden.data) x = rng.normal() * s;
      l.b_hidden.assign(d, 0.0);
    }
    l.w_out = Matrix(k, d);
    for (auto& x : l.w_out.data) x = rng.normal() * s;
    l.b_out.assign(k, 0.0);
    l.round_to_float32();
    return l;
  }

  std::size_t in_dim() const { return arch == CblArch::kHidden ? w_hidden.cols : w_out.cols; }
  std::size_t k() const { return w_out.rows; }

  std::vector<double> forward(std::span<const double> h, CblCache* cache = nullptr) const {
    std::vector<double> z;
    std::span<const double> in = h;
    if (arch == CblArch::kHidden) {
      z.resize(w_hidden.rows);
      matvec(w_hidden, h, b_hidden, z);
      for (auto& v : z) v = std::max(0.0, v);
      in = z;
    }
    std::vector<double> a(w_out.rows);
    matvec(w_out, in, b_out, a);
    if (cache) {
      cache->hidden = std::move(z);
      cache->out = a;
    }
    return a;
  }

  CblGradients zero_gradients() const {
    CblGradients g;
    g.w_out = Matrix(w_out.rows, w_out.cols);
    g.b_out.assign(b_out.size(), 0.0);
    if (arch == CblArch::kHidden) {
      g.w_hidden = Matrix(w_hidden.rows, w_hidden.cols);
      g.b_hidden.assign(b_hidden.size(), 0.0);
    }
    return g;
  }

  // Accumulates parameter gradients for dL/dA = ga; returns dL/dh.
  std::vector<double> backward(std::span<const double> h, const CblCache& cache,
                               std::span<const double> ga, CblGradients& g) const {
    std::span<const double> in = arch == CblArch::kHidden ? std::span<const double>(cache.hidden) : h;
    for (std::size_t r = 0; r < w_out.rows; ++r) {
      if (ga[r] == 0.0) continue;
      auto gr = g.w_out.row(r);
      for (std::size_t c = 0; c < in.size(); ++c) gr[c] += ga[r] * in[c];
      g.b_out[r] += ga[r];
    }
    std::vector<double> gin(in.size(), 0.0);
    for (std::size_t r = 0; r < w_out.rows; ++r) {
      if (ga[r] == 0.0) continue;
      auto wr = w_out.row(r);
      for (std::size_t c = 0; c < in.size(); ++c) gin[c] += ga[r] * wr[c];
    }
    if (arch == CblArch::kLinear) return gin;
    for (std::size_t r = 0; r < gin.size(); ++r) {
      if (cache.hidden[r] <= 0.0) gin[r] = 0.0;
    }
    std::vector<double> gh(h.size(), 0.0);
    for (std::size_t r = 0; r < w_hidden.rows; ++r) {
      if (gin[r] == 0.0) continue;
      auto gr = g.w_hidden.row(r);
      auto wr = w_hidden.row(r);
      for (std::size_t c = 0; c < h.size(); ++c) {
        gr[c] += gin[r] * h[c];
        gh[c] += gin[r] * wr[c];
      }
      g.b_hidden[r] += gin[r];
    }
    return gh;
  }

  void round_to_float32() {
    round_to_f32(w_out.data);
    round_to_f32(b_out);
    round_to_f32(w_hidden.data);
    round_to_f32(b_hidden);
  }
};

// ---- predictor head ----

struct PredictorHead {
  Matrix w;               // n x k
  std::vector<double> b;  // n

  PredictorHead() = default;
  PredictorHead(std::size_t n, std::size_t k) : w(n, k), b(n, 0.0) {}
  std::size_t n() const { return w.rows; }
  std::size_t k() const { return w.cols; }
};

inline std::vector<double> relu_activations(std::span<const double> a) {
  std::vector<double> out(a.begin(), a.end());
  for (auto& v : out) v = std::max(0.0, v);
  return out;
}

// First maximal index.
inline std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

struct Prediction {
  std::vector<double> logits;
  std::size_t predicted = 0;
};

inline Prediction predict_from_activations(const PredictorHead& head,
                                           std::span<const double> act_pos) {
  Prediction p;
  p.logits.resize(head.n());
  matvec(head.w, act_pos, head.b, p.logits);
  p.predicted = argmax_lowest(p.logits);
  return p;
}

// ---- training configuration ----

enum class Similarity { kCosine, kCubedCosine };

inline std::string to_string(Similarity s) {
  return s == Similarity::kCosine ? "cosine" : "cubed_cosine";
}
inline Similarity parse_similarity(std::string_view s) {
  if (s == "cosine") return Similarity::kCosine;
  if (s == "cubed_cosine" || s == "cos_cubed") return Similarity::kCubedCosine;
  throw ValidationError("unknown similarity: " + std::string(s));
}

struct TrainConfig {
  Similarity similarity = Similarity::kCosine;
  CblArch cbl_arch = CblArch::kLinear;
  std::size_t cbl_epochs = 10;
  std::size_t head_iterations = 300;
  std::size_t batch_size = 32;
  double lr_backbone = 1e-3;
  double lr_cbl = 1e-2;
  double lr_head = 1.0;  // initial proximal step, adapted by backtracking
  double lambda = 1e-4;
  double alpha = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (cbl_epochs == 0 || head_iterations == 0 || batch_size == 0) {
      throw ValidationError("epochs, head_iterations and batch_size must be positive");
    }
    if (!(lr_backbone >= 0.0) || !(lr_cbl > 0.0) || !(lr_head > 0.0)) {
      throw ValidationError("learning rates must be positive (backbone may be 0)");
    }
    if (!(lambda >= 0.0)) throw ValidationError("lambda must be >= 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
  }

  nlohmann::json to_json() const {
    return {{"similarity", to_string(similarity)}, {"cbl_arch", to_string(cbl_arch)},
            {"cbl_epochs", cbl_epochs},           {"head_iterations", head_iterations},
            {"batch_size", batch_size},           {"lr_backbone", lr_backbone},
            {"lr_cbl", lr_cbl},                   {"lr_head", lr_head},
            {"lambda", lambda},                   {"alpha", alpha},
            {"seed", seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("similarity")) c.similarity = parse_similarity(j["similarity"].get<std::string>());
    if (j.contains("cbl_arch")) c.cbl_arch = parse_cbl_arch(j["cbl_arch"].get<std::string>());
    c.cbl_epochs = j.value("cbl_epochs", c.cbl_epochs);
    c.head_iterations = j.value("head_iterations", c.head_iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_backbone = j.value("lr_backbone", c.lr_backbone);
    c.lr_cbl = j.value("lr_cbl", c.lr_cbl);
    c.lr_head = j.value("lr_head", c.lr_head);
    c.lambda = j.value("lambda", c.lambda);
    c.alpha = j.value("alpha", c.alpha);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

enum class UnlearnMode { kMaskNeuron, kZeroWeights };

inline std::string to_string(UnlearnMode m) {
  return m == UnlearnMode::kMaskNeuron ? "mask-neuron" : "zero-weights";
}
inline UnlearnMode parse_unlearn_mode(std::string_view s) {
  if (s == "mask-neuron" || s == "mask") return UnlearnMode::kMaskNeuron;
  if (s == "zero-weights" || s == "zero") return UnlearnMode::kZeroWeights;
  throw ValidationError("unknown unlearn mode: " + std::string(s));
}

// ---- the model ----

class CbmModel {
 public:
  CbmModel(std::unique_ptr<Backbone> backbone, ConceptBottleneckLayer cbl, PredictorHead head,
           std::shared_ptr<const ConceptSet> concepts, TrainConfig config = {})
      : backbone_(std::move(backbone)),
        cbl_(std::move(cbl)),
        head_(std::move(head)),
        concepts_(std::move(concepts)),
        config_(config),
        masked_(concepts_->k(), false) {
    check_shapes();
  }

  // Fresh model: CBL initialized from config.seed, head zero.
  static CbmModel create(std::unique_ptr<Backbone> backbone,
                         std::shared_ptr<const ConceptSet> concepts, TrainConfig config) {
    config.validate();
    const auto d = backbone->dim();
    const auto k = concepts->k();
    const auto n = concepts->n();
    auto cbl = ConceptBottleneckLayer::init(config.cbl_arch, d, k, config.seed ^ 0x5EEDCB1ULL);
    return CbmModel(std::move(backbone), std::move(cbl), PredictorHead(n, k),
                    std::move(concepts), config);
  }

  CbmModel(const CbmModel& o)
      : backbone_(o.backbone_->clone()),
        cbl_(o.cbl_),
        head_(o.head_),
        concepts_(o.concepts_),
        config_(o.config_),
        masked_(o.masked_),
        saved_columns_(o.saved_columns_) {}
  CbmModel& operator=(const CbmModel& o) {
    if (this != &o) *this = CbmModel(o);
    return *this;
  }
  CbmModel(CbmModel&&) noexcept = default;
  CbmModel& operator=(CbmModel&&) noexcept = default;

  std::size_t n() const { return head_.n(); }
  std::size_t k() const { return concepts_->k(); }
  std::size_t d() const { return backbone_->dim(); }

  const Backbone& backbone() const { return *backbone_; }
  Backbone& backbone() { return *backbone_; }
  const ConceptBottleneckLayer& cbl() const { return cbl_; }
  ConceptBottleneckLayer& cbl() { return cbl_; }
  const PredictorHead& head() const { return head_; }
  PredictorHead& head() { return head_; }
  const ConceptSet& concepts() const { return *concepts_; }
  std::shared_ptr<const ConceptSet> concepts_ptr() const { return concepts_; }
  const TrainConfig& config() const { return config_; }
  void set_config(const TrainConfig& c) { config_ = c; }

  // A_N(x) = f_CBL(f_LM(x)), masked neurons forced to 0.
  std::vector<double> forward_concepts(std::string_view text) const {
    auto enc = backbone_->encode(text);
    return concepts_from_pooled(enc.pooled);
  }

  std::vector<double> concepts_from_pooled(std::span<const double> pooled) const {
    auto a = cbl_.forward(pooled);
    apply_mask(a);
    return a;
  }

  Prediction forward_predict(std::string_view text) const {
    auto a = relu_activations(forward_concepts(text));
    return predict_from_activations(head_, a);
  }

  // ---- unlearning state ----

  bool is_masked(std::size_t j) const { return masked_.at(j); }
  bool is_zeroed(std::size_t j) const { return saved_columns_.count(j) != 0; }
  bool is_unlearned(std::size_t j) const { return is_masked(j) || is_zeroed(j); }
  const std::vector<bool>& mask() const { return masked_; }
  const std::map<std::size_t, std::vector<double>>& saved_columns() const {
    return saved_columns_;
  }

  std::vector<std::size_t> unlearned_concepts() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < k(); ++j) {
      if (is_unlearned(j)) out.push_back(j);
    }
    return out;
  }

  // Returns false (no-op) if j was already unlearned in this mode.
  bool mask_neuron(std::size_t j) {
    concepts_->concept_text(j);
    if (masked_[j]) return false;
    masked_[j] = true;
    return true;
  }

  bool zero_weights(std::size_t j) {
    concepts_->concept_text(j);
    if (saved_columns_.count(j)) return false;
    std::vector<double> col(n());
    for (std::size_t i = 0; i < n(); ++i) {
      col[i] = head_.w(i, j);
      head_.w(i, j) = 0.0;
    }
    saved_columns_.emplace(j, std::move(col));
    return true;
  }

  // Clears all masks and reinstates zeroed head columns.
  bool restore() {
    bool changed = !saved_columns_.empty();
    for (const auto& [j, col] : saved_columns_) {
      for (std::size_t i = 0; i < n(); ++i) head_.w(i, j) = col[i];
    }
    saved_columns_.clear();
    for (std::size_t j = 0; j < masked_.size(); ++j) {
      changed = changed || masked_[j];
      masked_[j] = false;
    }
    return changed;
  }

  // Used by checkpoint loading.
  void set_unlearn_state(std::vector<bool> mask, std::map<std::size_t, std::vector<double>> saved) {
    if (mask.size() != k()) throw FormatError("unlearn mask has wrong length");
    for (const auto& [j, col] : saved) {
      if (j >= k() || col.size() != n()) throw FormatError("bad saved head column");
    }
    masked_ = std::move(mask);
    saved_columns_ = std::move(saved);
  }

 private:
  void apply_mask(std::vector<double>& a) const {
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (masked_[j]) a[j] = 0.0;
    }
  }

  void check_shapes() const {
    const auto k = concepts_->k();
    if (cbl_.k() != k || cbl_.b_out.size() != k) throw ValidationError("CBL width != concept count");
    if (cbl_.in_dim() != backbone_->dim()) throw ValidationError("CBL input dim != backbone dim");
    if (head_.k() != k || head_.n() != concepts_->n() || head_.b.size() != head_.n()) {
      throw ValidationError("predictor head shape must be (n, k)");
    }
  }

  std::unique_ptr<Backbone> backbone_;
  ConceptBottleneckLayer cbl_;
  PredictorHead head_;
  std::shared_ptr<const ConceptSet> concepts_;
  TrainConfig config_;
  std::vector<bool> masked_;
  std::map<std::size_t, std::vector<double>> saved_columns_;
};

}  // namespace cbllm

#endif  // CBLLM_MODEL_HPP_
