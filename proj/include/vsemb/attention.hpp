#pragma once

#include <cmath>
#include <vector>

#include "vsemb/common.hpp"
#include "vsemb/numerics.hpp"
#include "vsemb/tensor.hpp"

namespace vsemb {

// Channel-grouping attention. The grouping map consumes the globally
// average-pooled feature map: g[m,c] = weight[m,c] * pooled[c] + bias[m],
// so each part m owns one C-vector of channel weights per instance.
struct GroupingModel {
  std::size_t parts = 0;
  std::size_t channels = 0;
  Tensor weight;  // M x C
  Tensor bias;    // M

  GroupingModel() = default;
  GroupingModel(std::size_t m, std::size_t c)
      : parts(m), channels(c), weight({m, c}), bias({m}) {
    if (m < 2) throw ConfigError("grouping: need at least 2 parts");
  }

  void init_random(SplitRng rng, double scale = 0.02) {
    for (double& w : weight.values()) w = scale * rng.normal();
    for (double& b : bias.values()) b = scale * rng.normal();
  }

  std::size_t n_params() const { return weight.numel() + bias.numel(); }
};

struct PartSet {
  Tensor features;   // M x C, exactly sum_{w,h} A_m * E_c
  Tensor attention;  // M x H x W, values in (0,1)
  std::size_t width = 0, height = 0, channels = 0;
};

inline Tensor pool_feature_map(const Tensor& fmap) {
  const std::size_t H = fmap.dim(0), W = fmap.dim(1), C = fmap.dim(2);
  Tensor pooled({C});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < C; ++ch) pooled[ch] += fmap(r, c, ch);
  for (std::size_t ch = 0; ch < C; ++ch) pooled[ch] /= double(H * W);
  return pooled;
}

inline Tensor compute_grouping(const GroupingModel& model, const Tensor& fmap) {
  if (fmap.rank() != 3 || fmap.dim(2) != model.channels)
    throw ConfigError("compute_grouping: channel dimension mismatch");
  const Tensor pooled = pool_feature_map(fmap);
  Tensor g({model.parts, model.channels});
  for (std::size_t m = 0; m < model.parts; ++m)
    for (std::size_t c = 0; c < model.channels; ++c)
      g(m, c) = model.weight(m, c) * pooled[c] + model.bias(m);
  return g;
}

// A_m[w,h] = sigmoid(sum_c g[c] * E_c[w,h]) for one part.
inline Tensor attention_map(const Tensor& g_row, const Tensor& fmap) {
  const std::size_t H = fmap.dim(0), W = fmap.dim(1), C = fmap.dim(2);
  if (g_row.numel() != C) throw ConfigError("attention_map: channel mismatch");
  Tensor a({H, W});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < C; ++ch) s += g_row[ch] * fmap(r, c, ch);
      a(r, c) = sigmoid(s);
    }
  return a;
}

// f[m,c] = sum_{w,h} (A_m ⊙ E_c)[w,h]
inline Tensor part_features(const Tensor& attention, const Tensor& fmap) {
  const std::size_t M = attention.dim(0);
  const std::size_t H = fmap.dim(0), W = fmap.dim(1), C = fmap.dim(2);
  if (attention.dim(1) != H || attention.dim(2) != W)
    throw ConfigError("part_features: grid shape mismatch");
  Tensor f({M, C});
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        const double a = attention(m, r, c);
        for (std::size_t ch = 0; ch < C; ++ch) f(m, ch) += a * fmap(r, c, ch);
      }
  return f;
}

// Seeds the grouping from train-set cell statistics, the same way the EM
// fit seeds its prototypes from data: average the feature map per cell, take
// the M most mutually distant cell deviations from the global mean, and
// point each part's channel weights at one of them. Step-1 training then
// only has to sharpen the maps, not discover the parts.
inline GroupingModel init_grouping_from_cells(
    const std::vector<const Tensor*>& fmaps, std::size_t parts,
    double target_saturation = 12.0) {
  if (fmaps.empty()) throw ConfigError("grouping init: no feature maps");
  const Tensor& first = *fmaps.front();
  const std::size_t H = first.dim(0), W = first.dim(1), C = first.dim(2);

  Tensor cell_mean({H, W, C});
  for (const Tensor* f : fmaps)
    for (std::size_t i = 0; i < cell_mean.numel(); ++i)
      cell_mean[i] += (*f)[i] / double(fmaps.size());
  std::vector<double> global_mean(C, 0.0);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < C; ++ch)
        global_mean[ch] += cell_mean(r, c, ch) / double(H * W);

  std::vector<std::vector<double>> dev(H * W, std::vector<double>(C));
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < C; ++ch)
        dev[r * W + c][ch] = cell_mean(r, c, ch) - global_mean[ch];

  // Farthest-point selection over cell deviations.
  std::vector<std::size_t> picked;
  {
    std::size_t best = 0;
    double best_n = -1.0;
    for (std::size_t i = 0; i < dev.size(); ++i) {
      const double n = dot(dev[i], dev[i]);
      if (n > best_n) {
        best_n = n;
        best = i;
      }
    }
    picked.push_back(best);
  }
  while (picked.size() < parts) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < dev.size(); ++i) {
      double dmin = std::numeric_limits<double>::infinity();
      for (std::size_t p : picked)
        dmin = std::min(dmin, squared_distance(dev[i].data(), dev[p].data(), C));
      if (dmin > best_d) {
        best_d = dmin;
        best = i;
      }
    }
    picked.push_back(best);
  }

  // Pooled mean over the train set; the weight row w solves
  // w * pooled + b = scaled deviation direction.
  std::vector<double> pooled(C, 0.0);
  for (const Tensor* f : fmaps) {
    const Tensor p = pool_feature_map(*f);
    for (std::size_t ch = 0; ch < C; ++ch) pooled[ch] += p[ch] / double(fmaps.size());
  }
  double pooled_scale = 0.0;
  for (std::size_t ch = 0; ch < C; ++ch) pooled_scale += std::fabs(pooled[ch]);
  pooled_scale = std::max(pooled_scale / double(C), 1e-9);

  // Saturate the own cell strongly and hold the other picked cells
  // moderately negative (a hard negative would flip their zero-mean
  // surroundings on).
  const double cross_target = target_saturation / 4.0;
  GroupingModel model(parts, C);
  for (std::size_t m = 0; m < parts; ++m) {
    std::vector<double> direction(C, 0.0);
    for (std::size_t o = 0; o < parts; ++o) {
      const std::vector<double>& od = dev[picked[o]];
      const double self = std::max(dot(od, od), 1e-12);
      const double coef = (o == m ? target_saturation : -cross_target) / self;
      for (std::size_t ch = 0; ch < C; ++ch) direction[ch] += coef * od[ch];
    }
    for (std::size_t ch = 0; ch < C; ++ch) {
      const double denom =
          std::fabs(pooled[ch]) > 0.05 * pooled_scale ? pooled[ch] : pooled_scale;
      model.weight(m, ch) = direction[ch] / denom;
    }
    model.bias(m) = 0.0;
  }
  return model;
}

struct AttentionForward {
  Tensor pooled;     // C
  Tensor grouping;   // M x C
  PartSet parts;
};

inline AttentionForward attention_forward(const GroupingModel& model,
                                          const Tensor& fmap) {
  AttentionForward fwd;
  fwd.pooled = pool_feature_map(fmap);
  fwd.grouping = Tensor({model.parts, model.channels});
  for (std::size_t m = 0; m < model.parts; ++m)
    for (std::size_t c = 0; c < model.channels; ++c)
      fwd.grouping(m, c) = model.weight(m, c) * fwd.pooled[c] + model.bias(m);

  const std::size_t H = fmap.dim(0), W = fmap.dim(1);
  fwd.parts.height = H;
  fwd.parts.width = W;
  fwd.parts.channels = model.channels;
  fwd.parts.attention = Tensor({model.parts, H, W});
  for (std::size_t m = 0; m < model.parts; ++m)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < model.channels; ++ch)
          s += fwd.grouping(m, ch) * fmap(r, c, ch);
        fwd.parts.attention(m, r, c) = sigmoid(s);
      }
  fwd.parts.features = part_features(fwd.parts.attention, fmap);
  return fwd;
}

// Row-major argmax, first maximum wins.
inline std::pair<std::size_t, std::size_t> attention_peak(const Tensor& a,
                                                          std::size_t m) {
  const std::size_t H = a.dim(1), W = a.dim(2);
  std::size_t pr = 0, pc = 0;
  double best = a(m, 0, 0);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      if (a(m, r, c) > best) {
        best = a(m, r, c);
        pr = r;
        pc = c;
      }
  return {pr, pc};
}

// L_dis for a single rank-2 attention map: mass-weighted squared grid
// distance to the peak, peak ties broken by smallest row-major index.
inline double loss_dis(const Tensor& a_m) {
  const std::size_t H = a_m.dim(0), W = a_m.dim(1);
  std::size_t pr = 0, pc = 0;
  double best = a_m(0, 0);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      if (a_m(r, c) > best) {
        best = a_m(r, c);
        pr = r;
        pc = c;
      }
  double loss = 0.0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double dr = double(r) - double(pr);
      const double dc = double(c) - double(pc);
      loss += a_m(r, c) * (dr * dr + dc * dc);
    }
  return loss;
}

// L_div for part m against the pointwise max of the other maps, minus margin.
inline double loss_div(const Tensor& attention, std::size_t m, double zeta) {
  const std::size_t M = attention.dim(0), H = attention.dim(1), W = attention.dim(2);
  if (M < 2) throw ConfigError("loss_div: need at least 2 parts");
  double loss = 0.0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      double other = -std::numeric_limits<double>::infinity();
      for (std::size_t n = 0; n < M; ++n)
        if (n != m) other = std::max(other, attention(n, r, c));
      loss += attention(m, r, c) * (other - zeta);
    }
  return loss;
}

struct PartLossResult {
  double loss = 0.0;
  Tensor d_attention;  // M x H x W
};

// L_prt = sum_m (L_dis + lambda * L_div) plus dL/dA. Peak locations and the
// inner max selections are treated as constants (subgradient at kinks).
inline PartLossResult part_loss_grad_attention(const Tensor& attention,
                                               double lambda, double zeta) {
  const std::size_t M = attention.dim(0), H = attention.dim(1), W = attention.dim(2);
  PartLossResult res;
  res.d_attention = Tensor({M, H, W});

  std::vector<std::pair<std::size_t, std::size_t>> peaks(M);
  for (std::size_t m = 0; m < M; ++m) peaks[m] = attention_peak(attention, m);

  for (std::size_t m = 0; m < M; ++m) {
    const auto [pr, pc] = peaks[m];
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        const double dr = double(r) - double(pr);
        const double dc = double(c) - double(pc);
        const double dist2 = dr * dr + dc * dc;
        res.loss += attention(m, r, c) * dist2;
        res.d_attention(m, r, c) += dist2;
      }
  }

  if (lambda != 0.0) {
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
          std::size_t sel = m == 0 ? 1 : 0;
          double other = attention(sel, r, c);
          for (std::size_t n = 0; n < M; ++n)
            if (n != m && attention(n, r, c) > other) {
              other = attention(n, r, c);
              sel = n;
            }
          res.loss += lambda * attention(m, r, c) * (other - zeta);
          res.d_attention(m, r, c) += lambda * (other - zeta);
          res.d_attention(sel, r, c) += lambda * attention(m, r, c);
        }
  }
  return res;
}

// Backprop dL/dA -> (dL/dW, dL/db), through the sigmoid and the grouping map.
inline void attention_backward(const GroupingModel& model, const Tensor& fmap,
                               const AttentionForward& fwd, const Tensor& d_attention,
                               Tensor& grad_weight, Tensor& grad_bias) {
  const std::size_t H = fmap.dim(0), W = fmap.dim(1), C = model.channels;
  for (std::size_t m = 0; m < model.parts; ++m) {
    std::vector<double> dg(C, 0.0);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        const double a = fwd.parts.attention(m, r, c);
        const double ds = d_attention(m, r, c) * a * (1.0 - a);
        if (ds == 0.0) continue;
        for (std::size_t ch = 0; ch < C; ++ch) dg[ch] += ds * fmap(r, c, ch);
      }
    for (std::size_t ch = 0; ch < C; ++ch) {
      grad_weight(m, ch) += dg[ch] * fwd.pooled[ch];
      grad_bias(m) += dg[ch];
    }
  }
}

// dL/df (M x C) -> dL/dA (M x H x W), for losses consuming part features.
inline Tensor attention_grad_from_features(const Tensor& fmap, const Tensor& d_features) {
  const std::size_t M = d_features.dim(0);
  const std::size_t H = fmap.dim(0), W = fmap.dim(1), C = fmap.dim(2);
  Tensor d_attention({M, H, W});
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < C; ++ch)
          s += d_features(m, ch) * fmap(r, c, ch);
        d_attention(m, r, c) = s;
      }
  return d_attention;
}

struct PartLossGrad {
  double loss = 0.0;
  Tensor grad_weight;  // M x C
  Tensor grad_bias;    // M
};

// Full L_prt evaluation with analytic gradient w.r.t. the grouping model.
inline PartLossGrad loss_prt(const GroupingModel& model, const Tensor& fmap,
                             double lambda, double zeta) {
  const AttentionForward fwd = attention_forward(model, fmap);
  const PartLossResult inner = part_loss_grad_attention(fwd.parts.attention, lambda, zeta);
  PartLossGrad out;
  out.loss = inner.loss;
  out.grad_weight = Tensor({model.parts, model.channels});
  out.grad_bias = Tensor({model.parts});
  attention_backward(model, fmap, fwd, inner.d_attention, out.grad_weight, out.grad_bias);
  return out;
}

}  // namespace vsemb
