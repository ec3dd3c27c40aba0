#ifndef CBLLM_TRAINING_HPP_
#define CBLLM_TRAINING_HPP_

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "cbllm/common.hpp"
#include "cbllm/model.hpp"
#include "cbllm/scoring.hpp"

namespace cbllm {

// ---- similarity between activations and concept scores ----

inline constexpr double kNormFloor = 1e-12;

namespace detail {

// cos(u, v) and, if requested, d cos / d u.
inline double cosine_with_grad(std::span<const double> u, std::span<const double> v,
                               std::vector<double>* grad) {
  const double nu = std::max(l2_norm(u), kNormFloor);
  const double nv = l2_norm(v);
  const double c = dot(u, v) / (nu * nv);
  if (grad) {
    grad->resize(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
      (*grad)[i] = v[i] / (nu * nv) - c * u[i] / (nu * nu);
    }
  }
  return c;
}

}  // namespace detail

// Sim(a, s). Cubed cosine compares elementwise cubes, which sharpens the
// largest scores. The target s must be non-zero.
inline double similarity(Similarity kind, std::span<const double> a,
                         std::span<const double> s, std::vector<double>* grad_a = nullptr) {
  if (kind == Similarity::kCosine) return detail::cosine_with_grad(a, s, grad_a);
  std::vector<double> a3(a.size()), s3(s.size());
  for (std::size_t i = 0; i < a.size(); ++i) a3[i] = a[i] * a[i] * a[i];
  for (std::size_t i = 0; i < s.size(); ++i) s3[i] = s[i] * s[i] * s[i];
  std::vector<double> g;
  double c = detail::cosine_with_grad(a3, s3, grad_a ? &g : nullptr);
  if (grad_a) {
    grad_a->resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) (*grad_a)[i] = 3.0 * a[i] * a[i] * g[i];
  }
  return c;
}

inline bool is_zero_row(std::span<const float> s) {
  return std::all_of(s.begin(), s.end(), [](float v) { return v == 0.0f; });
}

// ---- stage 1: concept bottleneck layer ----

struct CblGradientSet {
  CblGradients cbl;
  RowGradients backbone;
};

struct CblLoss {
  double loss = 0.0;  // -mean Sim over used rows
  std::size_t used = 0;
  std::size_t skipped = 0;
};

// Stage-1 objective on the given samples: -(1/|used|) sum Sim(A_N(x), S_c(x)),
// skipping all-zero score rows. Uses raw f_CBL output (no unlearn mask).
inline CblLoss cbl_objective(const CbmModel& model, const std::vector<std::string>& texts,
                             const ScoreMatrix& scores, std::span<const std::size_t> rows,
                             CblGradientSet* grads = nullptr) {
  CblLoss out;
  std::vector<std::size_t> used_rows;
  for (auto x : rows) {
    if (is_zero_row(scores.row(x))) {
      ++out.skipped;
    } else {
      used_rows.push_back(x);
    }
  }
  out.used = used_rows.size();
  if (out.used == 0) return out;
  if (grads) grads->cbl = model.cbl().zero_gradients();
  const double inv = 1.0 / static_cast<double>(out.used);
  std::vector<double> target(scores.k), ga;
  for (auto x : used_rows) {
    auto srow = scores.row(x);
    for (std::size_t j = 0; j < scores.k; ++j) target[j] = srow[j];
    auto enc = model.backbone().encode(texts[x]);
    CblCache cache;
    auto a = model.cbl().forward(enc.pooled, &cache);
    double sim = similarity(model.config().similarity, a, target, grads ? &ga : nullptr);
    out.loss -= sim * inv;
    if (grads) {
      for (auto& g : ga) g *= -inv;
      auto gh = model.cbl().backward(enc.pooled, cache, ga, grads->cbl);
      if (model.backbone().trainable()) model.backbone().backward(enc, gh, grads->backbone);
    }
  }
  return out;
}

// Adam over a flat parameter vector.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::span<double> params, std::span<const double> grad) {
    if (m_.empty()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Adam that only touches rows with a gradient in the current step; moments
// of untouched rows are left as they are (lazy Adam for embedding tables).
class LazyRowAdam {
 public:
  explicit LazyRowAdam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(Matrix& table, const RowGradients& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (const auto& [row, g] : grads) {
      auto& st = state_[row];
      if (st.m.empty()) {
        st.m.assign(table.cols, 0.0);
        st.v.assign(table.cols, 0.0);
      }
      auto p = table.row(row);
      for (std::size_t c = 0; c < table.cols; ++c) {
        st.m[c] = b1_ * st.m[c] + (1.0 - b1_) * g[c];
        st.v[c] = b2_ * st.v[c] + (1.0 - b2_) * g[c] * g[c];
        p[c] -= lr_ * (st.m[c] / c1) / (std::sqrt(st.v[c] / c2) + eps_);
      }
    }
  }

 private:
  struct RowState {
    std::vector<double> m, v;
  };
  double lr_, b1_, b2_, eps_;
  std::unordered_map<std::size_t, RowState> state_;
  std::size_t t_ = 0;
};

struct CblTrainReport {
  std::size_t steps = 0;
  std::size_t skipped_rows = 0;             // all-zero score rows, per epoch
  std::vector<double> epoch_loss;           // mean -Sim after each epoch
  double initial_loss = 0.0;
};

// Maximizes mean Sim(f_CBL(f_LM(x)), S_c(x)) over theta_1 (if the backbone is
// trainable and lr_backbone > 0) and theta_2 by mini-batch Adam. A batch made
// only of all-zero rows is skipped and does not count as a step.
inline CblTrainReport train_cbl(CbmModel& model, const std::vector<std::string>& texts,
                                const ScoreMatrix& scores) {
  const auto& cfg = model.config();
  cfg.validate();
  if (texts.size() != scores.m) {
    throw ValidationError("train_cbl: " + std::to_string(texts.size()) + " texts but " +
                          std::to_string(scores.m) + " score rows");
  }
  if (scores.k != model.k()) throw ValidationError("train_cbl: score matrix k != model k");
  if (texts.empty()) throw ValidationError("train_cbl: empty dataset");

  CblTrainReport report;
  std::vector<std::size_t> order(texts.size());
  std::iota(order.begin(), order.end(), 0);
  report.initial_loss = cbl_objective(model, texts, scores, order).loss;

  auto& cbl = model.cbl();
  Adam opt_w_out(cfg.lr_cbl), opt_b_out(cfg.lr_cbl), opt_w_hidden(cfg.lr_cbl),
      opt_b_hidden(cfg.lr_cbl);
  LazyRowAdam opt_backbone(cfg.lr_backbone);
  const bool tune_backbone = model.backbone().trainable() && cfg.lr_backbone > 0.0;

  Rng rng(cfg.seed ^ 0xCB1DA7AULL);
  for (std::size_t epoch = 0; epoch < cfg.cbl_epochs; ++epoch) {
    rng.shuffle(order);
    std::size_t skipped = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> batch(order.data() + start, end - start);
      CblGradientSet g;
      auto l = cbl_objective(model, texts, scores, batch, &g);
      skipped += l.skipped;
      if (l.used == 0) continue;
      opt_w_out.step(cbl.w_out.data, g.cbl.w_out.data);
      opt_b_out.step(cbl.b_out, g.cbl.b_out);
      if (cbl.arch == CblArch::kHidden) {
        opt_w_hidden.step(cbl.w_hidden.data, g.cbl.w_hidden.data);
        opt_b_hidden.step(cbl.b_hidden, g.cbl.b_hidden);
      }
      if (tune_backbone) opt_backbone.step(*model.backbone().parameters(), g.backbone);
      ++report.steps;
    }
    report.skipped_rows = skipped;
    report.epoch_loss.push_back(cbl_objective(model, texts, scores, order).loss);
  }
  cbl.round_to_float32();
  if (tune_backbone) round_to_f32(model.backbone().parameters()->data);
  return report;
}

// ---- stage 2: sparse predictor ----

// R(W) = alpha ||W||_1 + (1 - alpha) 1/2 ||W||_2^2 (Frobenius).
inline double elastic_net_penalty(const Matrix& w, double alpha) {
  double l1 = 0.0, l2 = 0.0;
  for (double v : w.data) {
    l1 += std::abs(v);
    l2 += v * v;
  }
  return alpha * l1 + (1.0 - alpha) * 0.5 * l2;
}

struct HeadProblem {
  const Matrix& acts;  // m x k, already ReLU-gated
  std::span<const std::size_t> labels;
  double lambda;
  double alpha;
};

struct HeadGradient {
  Matrix w;
  std::vector<double> b;
};

// Mean softmax cross-entropy of (W a + b, y).
inline double mean_cross_entropy(const PredictorHead& head, const HeadProblem& p,
                                 HeadGradient* grad = nullptr) {
  const std::size_t m = p.acts.rows, n = head.n();
  if (grad) {
    grad->w = Matrix(n, head.k());
    grad->b.assign(n, 0.0);
  }
  std::vector<double> z(n);
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t x = 0; x < m; ++x) {
    auto a = p.acts.row(x);
    matvec(head.w, a, head.b, z);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double lse = zmax + std::log(sum);
    total += lse - z[p.labels[x]];
    if (grad) {
      for (std::size_t i = 0; i < n; ++i) {
        double gi = std::exp(z[i] - lse) - (i == p.labels[x] ? 1.0 : 0.0);
        gi *= inv;
        if (gi == 0.0) continue;
        auto gw = grad->w.row(i);
        for (std::size_t j = 0; j < a.size(); ++j) gw[j] += gi * a[j];
        grad->b[i] += gi;
      }
    }
  }
  return total * inv;
}

// Full stage-2 objective: mean CE + lambda R(W).
inline double head_objective(const PredictorHead& head, const HeadProblem& p) {
  return mean_cross_entropy(head, p) + p.lambda * elastic_net_penalty(head.w, p.alpha);
}

// Gradient of head_objective; the L1 term contributes lambda*alpha*sign(w)
// (zero at w = 0).
inline HeadGradient head_gradient(const PredictorHead& head, const HeadProblem& p) {
  HeadGradient g;
  mean_cross_entropy(head, p, &g);
  for (std::size_t i = 0; i < g.w.data.size(); ++i) {
    const double w = head.w.data[i];
    const double sgn = (w > 0.0) - (w < 0.0);
    g.w.data[i] += p.lambda * (p.alpha * sgn + (1.0 - p.alpha) * w);
  }
  return g;
}

struct HeadTrainReport {
  std::vector<double> objective;  // after each iteration, objective[0] = initial
  std::size_t iterations = 0;
  double final_step = 0.0;
};

// Proximal gradient descent with backtracking on the smooth part
// (CE + lambda (1 - alpha) 1/2 ||W||^2) and soft-thresholding for the L1 part,
// which yields exact zeros in W. Every accepted step satisfies the
// sufficient-decrease condition, so the objective never increases.
inline HeadTrainReport fit_head(PredictorHead& head, const HeadProblem& p, double initial_step,
                                std::size_t iterations) {
  if (p.acts.rows == 0) throw ValidationError("train_predictor: empty dataset");
  if (p.labels.size() != p.acts.rows) throw ValidationError("train_predictor: label count mismatch");
  for (auto y : p.labels) {
    if (y >= head.n()) throw ValidationError("train_predictor: label " + std::to_string(y) + " out of range");
  }
  const double l1 = p.lambda * p.alpha;
  const double l2 = p.lambda * (1.0 - p.alpha);
  auto smooth = [&](const PredictorHead& h, HeadGradient* g) {
    double f = mean_cross_entropy(h, p, g);
    double sq = 0.0;
    for (double v : h.w.data) sq += v * v;
    if (g) {
      for (std::size_t i = 0; i < g->w.data.size(); ++i) g->w.data[i] += l2 * h.w.data[i];
    }
    return f + 0.5 * l2 * sq;
  };
  auto l1_term = [&](const PredictorHead& h) {
    double s = 0.0;
    for (double v : h.w.data) s += std::abs(v);
    return l1 * s;
  };

  HeadTrainReport report;
  double step = initial_step;
  HeadGradient g;
  double f = smooth(head, &g);
  report.objective.push_back(f + l1_term(head));
  for (std::size_t it = 0; it < iterations; ++it) {
    PredictorHead cand = head;
    double f_cand = 0.0;
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt) {
      double lin = 0.0, quad = 0.0;
      for (std::size_t i = 0; i < head.w.data.size(); ++i) {
        double v = head.w.data[i] - step * g.w.data[i];
        double thr = step * l1;
        v = v > thr ? v - thr : (v < -thr ? v + thr : 0.0);
        cand.w.data[i] = v;
        double dlt = v - head.w.data[i];
        lin += g.w.data[i] * dlt;
        quad += dlt * dlt;
      }
      for (std::size_t i = 0; i < head.b.size(); ++i) {
        cand.b[i] = head.b[i] - step * g.b[i];
        double dlt = cand.b[i] - head.b[i];
        lin += g.b[i] * dlt;
        quad += dlt * dlt;
      }
      f_cand = smooth(cand, nullptr);
      if (f_cand <= f + lin + quad / (2.0 * step) + 1e-12 * std::abs(f)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    double obj = f_cand + l1_term(cand);
    if (obj > report.objective.back()) break;  // numerical floor reached
    head = std::move(cand);
    f = smooth(head, &g);
    report.objective.push_back(obj);
    ++report.iterations;
    step *= 1.5;
  }
  report.final_step = step;
  round_to_f32(head.w.data);
  round_to_f32(head.b);
  return report;
}

// A+_N(x) for every text, from the frozen backbone and CBL.
inline Matrix positive_activations(const CbmModel& model, const std::vector<std::string>& texts) {
  Matrix acts(texts.size(), model.k());
  for (std::size_t x = 0; x < texts.size(); ++x) {
    auto a = relu_activations(model.forward_concepts(texts[x]));
    std::copy(a.begin(), a.end(), acts.row(x).begin());
  }
  return acts;
}

// Trains W, b with backbone and CBL frozen.
inline HeadTrainReport train_predictor(CbmModel& model, const std::vector<std::string>& texts,
                                       std::span<const std::size_t> labels) {
  const auto& cfg = model.config();
  cfg.validate();
  if (texts.empty()) throw ValidationError("train_predictor: empty dataset");
  if (texts.size() != labels.size()) throw ValidationError("train_predictor: label count mismatch");
  for (auto y : labels) {
    if (y >= model.n()) throw ValidationError("train_predictor: label " + std::to_string(y) + " out of range");
  }
  auto acts = positive_activations(model, texts);
  HeadProblem p{acts, labels, cfg.lambda, cfg.alpha};
  return fit_head(model.head(), p, cfg.lr_head, cfg.head_iterations);
}

// Fraction of head weights with |w| < 1e-6.
inline double head_sparsity(const PredictorHead& head, double tol = 1e-6) {
  if (head.w.data.empty()) return 0.0;
  std::size_t z = 0;
  for (double v : head.w.data) z += std::abs(v) < tol;
  return static_cast<double>(z) / static_cast<double>(head.w.data.size());
}

inline std::size_t count_near_zero(const PredictorHead& head, double tol = 1e-6) {
  std::size_t z = 0;
  for (double v : head.w.data) z += std::abs(v) < tol;
  return z;
}

// Black-box reference: a linear softmax head directly on the frozen pooled
// backbone embedding (no bottleneck).
struct BaselineClassifier {
  std::unique_ptr<Backbone> backbone;
  PredictorHead head;

  std::size_t predict(std::string_view text) const {
    auto enc = backbone->encode(text);
    return predict_from_activations(head, enc.pooled).predicted;
  }
};

inline BaselineClassifier train_baseline_head(const Backbone& backbone, std::size_t n_classes,
                                              const std::vector<std::string>& texts,
                                              std::span<const std::size_t> labels,
                                              const TrainConfig& cfg) {
  if (texts.empty()) throw ValidationError("baseline: empty dataset");
  Matrix feats(texts.size(), backbone.dim());
  for (std::size_t x = 0; x < texts.size(); ++x) {
    auto e = backbone.encode(texts[x]);
    std::copy(e.pooled.begin(), e.pooled.end(), feats.row(x).begin());
  }
  BaselineClassifier bc{backbone.clone(), PredictorHead(n_classes, backbone.dim())};
  HeadProblem p{feats, labels, cfg.lambda, cfg.alpha};
  fit_head(bc.head, p, cfg.lr_head, cfg.head_iterations);
  return bc;
}

}  // namespace cbllm

#endif  // CBLLM_TRAINING_HPP_
