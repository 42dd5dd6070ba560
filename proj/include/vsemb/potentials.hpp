#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "vsemb/common.hpp"
#include "vsemb/dataset.hpp"
#include "vsemb/mixture.hpp"
#include "vsemb/numerics.hpp"
#include "vsemb/tensor.hpp"

namespace vsemb {

namespace detail {

inline void append_tensor_values(std::vector<double>& out, const Tensor& t) {
  out.insert(out.end(), t.values().begin(), t.values().end());
}

inline std::size_t load_tensor_values(std::span<const double> src, std::size_t pos,
                                      Tensor& t) {
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = src[pos + i];
  return pos + t.numel();
}

}  // namespace detail

// Deterministic one-to-one label/semantic correspondence.
inline double phi_ys(int y, int y_prime) { return y == y_prime ? 1.0 : 0.0; }

// ---------------------------------------------------------------------------
// Classifier D: one fully-connected layer + softmax over the seen classes.
// ---------------------------------------------------------------------------
struct Classifier {
  std::vector<int> classes;  // sorted seen class ids; row order
  Tensor weight;             // |O| x D
  Tensor bias;               // |O|

  Classifier() = default;
  Classifier(std::vector<int> seen, std::size_t input_dim)
      : classes(std::move(seen)),
        weight({classes.size(), input_dim}),
        bias({classes.size()}) {
    if (classes.empty()) throw ConfigError("classifier: no classes");
  }

  std::size_t row_of(int y) const {
    auto it = std::lower_bound(classes.begin(), classes.end(), y);
    if (it == classes.end() || *it != y)
      throw ConfigError("classifier: class " + std::to_string(y) +
                        " is not a seen class");
    return std::size_t(it - classes.begin());
  }

  void init_random(SplitRng rng, double scale = 0.02) {
    for (double& w : weight.values()) w = scale * rng.normal();
    for (double& b : bias.values()) b = scale * rng.normal();
  }

  std::size_t n_params() const { return weight.numel() + bias.numel(); }

  std::vector<double> get_params() const {
    std::vector<double> p;
    p.reserve(n_params());
    detail::append_tensor_values(p, weight);
    detail::append_tensor_values(p, bias);
    return p;
  }

  void set_params(std::span<const double> p) {
    std::size_t pos = detail::load_tensor_values(p, 0, weight);
    detail::load_tensor_values(p, pos, bias);
  }

  std::vector<double> softmax(std::span<const double> f) const {
    const std::size_t n = classes.size(), d = weight.dim(1);
    if (f.size() != d) throw ConfigError("classifier: input dimension mismatch");
    std::vector<double> logits(n);
    for (std::size_t j = 0; j < n; ++j) {
      double s = bias[j];
      for (std::size_t i = 0; i < d; ++i) s += weight(j, i) * f[i];
      logits[j] = s;
    }
    const double lse = log_sum_exp(logits);
    for (double& v : logits) v = std::exp(v - lse);
    return logits;
  }
};

struct PhiXYResult {
  double value = 0.0;
  std::vector<double> grad;     // packed (weight, bias), gradient of phi
  std::vector<double> d_input;  // gradient of phi w.r.t. the input features
};

// phi_XY = -CE(D(f), onehot(y)) = log softmax(Wf+b)[y]
inline PhiXYResult phi_xy(const Classifier& cls, std::span<const double> f, int y,
                          bool want_input_grad = false) {
  const std::size_t n = cls.classes.size(), d = cls.weight.dim(1);
  const std::size_t row = cls.row_of(y);
  std::vector<double> logits(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = cls.bias[j];
    for (std::size_t i = 0; i < d; ++i) s += cls.weight(j, i) * f[i];
    logits[j] = s;
  }
  const double lse = log_sum_exp(logits);

  PhiXYResult out;
  out.value = logits[row] - lse;
  out.grad.assign(n * d + n, 0.0);
  if (want_input_grad) out.d_input.assign(d, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double p = std::exp(logits[j] - lse);
    const double dlogit = (j == row ? 1.0 : 0.0) - p;
    for (std::size_t i = 0; i < d; ++i) out.grad[j * d + i] = dlogit * f[i];
    out.grad[n * d + j] = dlogit;
    if (want_input_grad)
      for (std::size_t i = 0; i < d; ++i)
        out.d_input[i] += dlogit * cls.weight(j, i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Semantic mapper V: two affine layers with a rectified-linear unit between.
// ---------------------------------------------------------------------------
struct SemanticMapper {
  Tensor w1, b1;  // H x Din, H
  Tensor w2, b2;  // Dout x H, Dout

  SemanticMapper() = default;
  SemanticMapper(std::size_t input_dim, std::size_t hidden, std::size_t output_dim)
      : w1({hidden, input_dim}), b1({hidden}),
        w2({output_dim, hidden}), b2({output_dim}) {}

  std::size_t input_dim() const { return w1.dim(1); }
  std::size_t hidden_dim() const { return w1.dim(0); }
  std::size_t output_dim() const { return w2.dim(0); }

  void init_random(SplitRng rng) {
    const double s1 = 1.0 / std::sqrt(double(input_dim()));
    const double s2 = 1.0 / std::sqrt(double(hidden_dim()));
    for (double& v : w1.values()) v = s1 * rng.normal();
    for (double& v : b1.values()) v = 0.0;
    for (double& v : w2.values()) v = s2 * rng.normal();
    for (double& v : b2.values()) v = 0.0;
  }

  std::size_t n_params() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel();
  }

  std::vector<double> get_params() const {
    std::vector<double> p;
    p.reserve(n_params());
    detail::append_tensor_values(p, w1);
    detail::append_tensor_values(p, b1);
    detail::append_tensor_values(p, w2);
    detail::append_tensor_values(p, b2);
    return p;
  }

  void set_params(std::span<const double> p) {
    std::size_t pos = 0;
    pos = detail::load_tensor_values(p, pos, w1);
    pos = detail::load_tensor_values(p, pos, b1);
    pos = detail::load_tensor_values(p, pos, w2);
    detail::load_tensor_values(p, pos, b2);
  }

  struct Forward {
    std::vector<double> hidden_pre;
    std::vector<double> hidden;
    std::vector<double> out;
  };

  Forward forward(std::span<const double> x) const {
    if (x.size() != input_dim())
      throw ConfigError("mapper: input dimension mismatch");
    Forward f;
    const std::size_t h = hidden_dim(), d = input_dim(), o = output_dim();
    f.hidden_pre.resize(h);
    f.hidden.resize(h);
    for (std::size_t j = 0; j < h; ++j) {
      double s = b1[j];
      for (std::size_t i = 0; i < d; ++i) s += w1(j, i) * x[i];
      f.hidden_pre[j] = s;
      f.hidden[j] = std::max(0.0, s);
    }
    f.out.resize(o);
    for (std::size_t j = 0; j < o; ++j) {
      double s = b2[j];
      for (std::size_t i = 0; i < h; ++i) s += w2(j, i) * f.hidden[i];
      f.out[j] = s;
    }
    return f;
  }

  // Accumulates packed parameter gradients for upstream d_out.
  void backward(std::span<const double> x, const Forward& f,
                std::span<const double> d_out, std::vector<double>& grad) const {
    const std::size_t h = hidden_dim(), d = input_dim(), o = output_dim();
    std::vector<double> d_hidden(h, 0.0);
    double* gw1 = grad.data();
    double* gb1 = gw1 + w1.numel();
    double* gw2 = gb1 + b1.numel();
    double* gb2 = gw2 + w2.numel();
    for (std::size_t j = 0; j < o; ++j) {
      const double dj = d_out[j];
      if (dj == 0.0) continue;
      for (std::size_t i = 0; i < h; ++i) {
        gw2[j * h + i] += dj * f.hidden[i];
        d_hidden[i] += dj * w2(j, i);
      }
      gb2[j] += dj;
    }
    for (std::size_t j = 0; j < h; ++j) {
      if (f.hidden_pre[j] <= 0.0 || d_hidden[j] == 0.0) continue;
      const double dj = d_hidden[j];
      for (std::size_t i = 0; i < d; ++i) gw1[j * d + i] += dj * x[i];
      gb1[j] += dj;
    }
  }
};

// ---------------------------------------------------------------------------
// Codebook prepared for compatibility scoring.
// ---------------------------------------------------------------------------
struct ScoringCodebook {
  std::vector<int> ids;  // sorted
  std::vector<std::vector<double>> vecs;

  static ScoringCodebook build(const Codebook& cb, bool l2_normalize) {
    ScoringCodebook out;
    for (const auto& [id, t] : cb.entries) {
      out.ids.push_back(id);
      std::vector<double> v(t.values());
      if (l2_normalize) {
        double norm = std::sqrt(dot(v, v));
        if (norm > 0.0)
          for (double& x : v) x /= norm;
      }
      out.vecs.push_back(std::move(v));
    }
    return out;
  }

  static ScoringCodebook build_subset(const Codebook& cb, bool l2_normalize,
                                      const std::set<int>& keep) {
    Codebook sub;
    sub.kind = cb.kind;
    std::vector<int> missing;
    for (int id : keep) {
      if (!cb.has(id))
        missing.push_back(id);
      else
        sub.entries[id] = cb.at(id);
    }
    if (!missing.empty()) {
      std::string msg = "codebook missing classes:";
      for (int id : missing) msg += " " + std::to_string(id);
      throw EvalError(msg);
    }
    return build(sub, l2_normalize);
  }

  std::size_t index_of(int id) const {
    auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id)
      throw EvalError("codebook: missing class " + std::to_string(id));
    return std::size_t(it - ids.begin());
  }

  std::size_t dim() const { return vecs.empty() ? 0 : vecs.front().size(); }
};

struct HingeResult {
  double value = 0.0;            // the potential (<= 0 in the standard form)
  std::vector<double> d_embed;   // gradient of the potential w.r.t. v
};

// phi_SX(s_y, v) = -sum_{y' in O} [margin(y,y') + s_{y'}^T v - s_y^T v]_+
// Standard form puts the margin eta on y' != y; the literal variant
// (margin_on_correct) puts a constant eta on the y' == y term instead.
inline HingeResult structured_hinge(const ScoringCodebook& seen, std::size_t y_idx,
                                    std::span<const double> v, double eta,
                                    bool margin_on_correct = false) {
  HingeResult out;
  out.d_embed.assign(v.size(), 0.0);
  const std::vector<double>& sy = seen.vecs[y_idx];
  double score_y = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) score_y += sy[i] * v[i];
  for (std::size_t j = 0; j < seen.vecs.size(); ++j) {
    double margin;
    if (margin_on_correct)
      margin = j == y_idx ? eta : 0.0;
    else
      margin = j == y_idx ? 0.0 : eta;
    double score_j = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) score_j += seen.vecs[j][i] * v[i];
    const double h = margin + score_j - score_y;
    if (h > 0.0) {
      out.value -= h;
      if (j != y_idx)
        for (std::size_t i = 0; i < v.size(); ++i)
          out.d_embed[i] -= seen.vecs[j][i] - sy[i];
    }
  }
  return out;
}

struct PhiSXSemanticResult {
  double value = 0.0;
  std::vector<double> grad;  // packed mapper gradient of the potential
};

inline PhiSXSemanticResult phi_sx_semantic(const SemanticMapper& mapper,
                                           std::span<const double> pi_input, int y,
                                           const ScoringCodebook& seen, double eta,
                                           bool margin_on_correct = false) {
  const auto fwd = mapper.forward(pi_input);
  const std::size_t y_idx = seen.index_of(y);
  const HingeResult h = structured_hinge(seen, y_idx, fwd.out, eta, margin_on_correct);
  PhiSXSemanticResult out;
  out.value = h.value;
  out.grad.assign(mapper.n_params(), 0.0);
  mapper.backward(pi_input, fwd, h.d_embed, out.grad);
  return out;
}

struct PhiSXVisualResult {
  double value = 0.0;
  Tensor d_pi;  // gradient of the potential w.r.t. pi
};

// phi_SX(Pi_target, Pi) = -||Pi_target - Pi||_F^2
inline PhiSXVisualResult phi_sx_visual(const Tensor& target, const Tensor& pi) {
  if (!target.same_shape(pi))
    throw ConfigError("phi_sx_visual: shape mismatch " + target.shape_str() +
                      " vs " + pi.shape_str());
  PhiSXVisualResult out;
  out.d_pi = Tensor(pi.dims());
  for (std::size_t i = 0; i < pi.numel(); ++i) {
    const double d = target[i] - pi[i];
    out.value -= d * d;
    out.d_pi[i] = 2.0 * d;
  }
  return out;
}

// argmax_y s_y^T v over candidates; ties go to the smallest class id.
inline int predict_by_compatibility(const ScoringCodebook& cb,
                                    std::span<const double> v) {
  if (cb.ids.empty()) throw EvalError("predict: empty codebook");
  int best_id = cb.ids[0];
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < cb.ids.size(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += cb.vecs[j][i] * v[i];
    if (s > best) {
      best = s;
      best_id = cb.ids[j];
    }
  }
  return best_id;
}

inline int predict_semantic(const SemanticMapper& mapper, const PiEmbedding& pi,
                            const ScoringCodebook& candidates) {
  const auto fwd = mapper.forward(pi.pi.values());
  return predict_by_compatibility(candidates, fwd.out);
}

// argmin_y ||codebook_y - Pi||_F^2; smallest class id on ties.
inline int predict_visual(const PiEmbedding& pi, const Codebook& cb) {
  if (cb.entries.empty()) throw EvalError("predict_visual: empty codebook");
  int best_id = 0;
  double best = std::numeric_limits<double>::infinity();
  bool first = true;
  for (const auto& [id, t] : cb.entries) {
    if (!t.same_shape(pi.pi))
      throw EvalError("predict_visual: shape mismatch for class " +
                      std::to_string(id) + " " + t.shape_str() + " vs " +
                      pi.pi.shape_str());
    const double d =
        squared_distance(t.data(), pi.pi.data(), pi.pi.numel());
    if (first || d < best) {
      best = d;
      best_id = id;
      first = false;
    }
  }
  return best_id;
}

// ---------------------------------------------------------------------------
// Linear compatibility baseline: one linear map from raw visual features to
// the codebook space, trained with the same structured hinge.
// ---------------------------------------------------------------------------
struct CompatibilityBaseline {
  Tensor weight;  // d_target x d_visual
  double margin = 0.2;

  CompatibilityBaseline() = default;
  CompatibilityBaseline(std::size_t d_target, std::size_t d_visual)
      : weight({d_target, d_visual}) {}

  std::vector<double> embed(std::span<const double> feat) const {
    const std::size_t t = weight.dim(0), d = weight.dim(1);
    if (feat.size() != d) throw ConfigError("baseline: feature dimension mismatch");
    std::vector<double> v(t, 0.0);
    for (std::size_t j = 0; j < t; ++j)
      for (std::size_t i = 0; i < d; ++i) v[j] += weight(j, i) * feat[i];
    return v;
  }
};

inline CompatibilityBaseline baseline_fit(const Tensor& features,
                                          const std::vector<int>& labels,
                                          const ScoringCodebook& seen, double margin,
                                          std::size_t epochs, double lr,
                                          std::uint64_t seed, int threads = 1) {
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (labels.size() != n) throw ConfigError("baseline_fit: label count mismatch");
  CompatibilityBaseline base(seen.dim(), d);
  base.margin = margin;
  {
    SplitRng rng(seed);
    for (double& w : base.weight.values()) w = 0.01 * rng.normal();
  }
  std::vector<std::size_t> y_idx(n);
  for (std::size_t i = 0; i < n; ++i) y_idx[i] = seen.index_of(labels[i]);

  AdamConfig acfg;
  acfg.learning_rate = lr;
  OptimizerState opt(base.weight.numel(), acfg);
  const std::size_t n_chunks = (n + kParallelChunk - 1) / kParallelChunk;
  std::vector<std::vector<double>> chunk_grad(n_chunks);

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    for (auto& g : chunk_grad) g.assign(base.weight.numel(), 0.0);
    parallel_for(n, threads, [&](std::size_t i) {
      std::vector<double> v = base.embed(std::span<const double>(&features(i, 0), d));
      const HingeResult h = structured_hinge(seen, y_idx[i], v, margin);
      auto& g = chunk_grad[i / kParallelChunk];
      // maximize the potential: descend on its negation
      for (std::size_t j = 0; j < base.weight.dim(0); ++j) {
        const double dj = -h.d_embed[j];
        if (dj == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) g[j * d + c] += dj * features(i, c);
      }
    });
    std::vector<double> grad(base.weight.numel(), 0.0);
    for (const auto& g : chunk_grad)
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
    adam_step(base.weight.values(), grad, opt);
  }
  return base;
}

inline int baseline_predict(const CompatibilityBaseline& base,
                            std::span<const double> feat,
                            const ScoringCodebook& candidates) {
  return predict_by_compatibility(candidates, base.embed(feat));
}

}  // namespace vsemb
