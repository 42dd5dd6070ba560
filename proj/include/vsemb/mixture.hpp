#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "vsemb/common.hpp"
#include "vsemb/dataset.hpp"
#include "vsemb/numerics.hpp"
#include "vsemb/tensor.hpp"

namespace vsemb {

// Isotropic Gaussian mixture over one part's features. `source_part` names
// the raw attention part whose features this mixture models; reordering the
// per-row mixtures (and their components) relabels the Pi embedding without
// touching the grouping model.
struct PartMixture {
  std::size_t source_part = 0;
  Tensor prototypes;           // K x C
  std::vector<double> priors;  // K, sum to 1
  double variance = 1.0;

  std::size_t n_types() const { return prototypes.dim(0); }
  std::size_t n_channels() const { return prototypes.dim(1); }

  void validate() const {
    if (!(variance > 0.0)) throw ConfigError("mixture: variance must be positive");
    double s = 0.0;
    for (double p : priors) {
      if (p < 0.0) throw ConfigError("mixture: negative prior");
      s += p;
    }
    if (std::fabs(s - 1.0) > 1e-9)
      throw ConfigError("mixture: priors must sum to 1");
    if (!prototypes.all_finite())
      throw ConfigError("mixture: non-finite prototypes");
  }
};

struct MixtureModel {
  std::vector<PartMixture> parts;  // indexed by Pi row

  std::size_t n_parts() const { return parts.size(); }
  std::size_t n_types() const { return parts.empty() ? 0 : parts[0].n_types(); }
};

// Row-stochastic M x K posterior matrix (or a flattened M*K vector summing
// to 1). `degenerate` marks rows that fell back to uniform.
struct PiEmbedding {
  Tensor pi;
  bool flat = false;
  bool degenerate = false;
  bool converged = true;

  std::size_t n_parts() const { return flat ? 1 : pi.dim(0); }
};

namespace detail {

inline void part_log_weights(const PartMixture& mix, const double* f,
                             std::vector<double>& logw) {
  const std::size_t K = mix.n_types(), C = mix.n_channels();
  logw.resize(K);
  bool any = false;
  const double log_norm = -0.5 * double(C) * std::log(kTwoPi * mix.variance);
  for (std::size_t k = 0; k < K; ++k) {
    if (mix.priors[k] <= 0.0) {
      logw[k] = -std::numeric_limits<double>::infinity();
      continue;
    }
    any = true;
    const double quad = squared_distance(f, &mix.prototypes(k, 0), C);
    logw[k] = std::log(mix.priors[k]) + log_norm - quad / (2.0 * mix.variance);
  }
  if (!any) throw ConfigError("mixture: all priors are zero");
}

}  // namespace detail

// Eq.-style negative log-likelihood of one part feature under the mixture.
inline double mixture_nll(const PartMixture& mix, std::span<const double> f) {
  if (f.size() != mix.n_channels())
    throw ConfigError("mixture_nll: feature dimension mismatch");
  std::vector<double> logw;
  detail::part_log_weights(mix, f.data(), logw);
  return -log_sum_exp(logw);
}

struct EmTrace {
  std::vector<double> nll;                        // one entry per E-step
  std::vector<std::pair<std::size_t, std::size_t>> reseeds;  // (step, component)
  bool converged = false;
};

struct EmResult {
  PartMixture mixture;
  EmTrace trace;
};

// EM fit of one part mixture. Farthest-point seeding from the data when no
// warm start is given; terminates when |delta NLL| < tol or after max_steps.
// An emptied component is re-seeded to the point farthest from all current
// prototypes, and the event is recorded in the trace.
inline EmResult em_fit_single(const Tensor& features, std::size_t K,
                              std::uint64_t seed, std::size_t max_steps = 300,
                              double tol = 1e-6,
                              const PartMixture* warm_start = nullptr,
                              int threads = 1) {
  const std::size_t n = features.dim(0), C = features.dim(1);
  if (n < K) throw ConfigError("em_fit: fewer samples than components");
  if (!features.all_finite()) throw ConfigError("em_fit: non-finite features");

  EmResult out;
  PartMixture& mix = out.mixture;

  // Farthest-point pick at the 0.9 quantile of min-distances rather than the
  // absolute max, so a single noise extreme inside an already-claimed cluster
  // cannot steal a seed from an unclaimed one.
  auto farthest_from = [&](const Tensor& protos, std::size_t k_have) {
    std::vector<std::pair<double, std::size_t>> dists(n);
    for (std::size_t i = 0; i < n; ++i) {
      double dmin = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < k_have; ++k)
        dmin = std::min(dmin, squared_distance(&features(i, 0), &protos(k, 0), C));
      dists[i] = {dmin, i};
    }
    const std::size_t rank = std::size_t(std::ceil(0.9 * double(n - 1)));
    std::nth_element(dists.begin(), dists.begin() + rank, dists.end(),
                     [](const auto& a, const auto& b) {
                       return a.first != b.first ? a.first < b.first
                                                 : a.second < b.second;
                     });
    return dists[rank].second;
  };

  if (warm_start != nullptr) {
    mix = *warm_start;
    mix.validate();
    if (mix.n_types() != K || mix.n_channels() != C)
      throw ConfigError("em_fit: warm start shape mismatch");
  } else {
    SplitRng rng(seed);
    mix.prototypes = Tensor({K, C});
    const std::size_t first = rng.next_index(n);
    for (std::size_t c = 0; c < C; ++c) mix.prototypes(0, c) = features(first, c);
    for (std::size_t k = 1; k < K; ++k) {
      const std::size_t pick = farthest_from(mix.prototypes, k);
      for (std::size_t c = 0; c < C; ++c) mix.prototypes(k, c) = features(pick, c);
    }
    mix.priors.assign(K, 1.0 / double(K));
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double dmin = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < K; ++k)
        dmin = std::min(dmin, squared_distance(&features(i, 0), &mix.prototypes(k, 0), C));
      v += dmin;
    }
    mix.variance = std::max(v / double(n * C), 1e-12);
  }

  std::vector<double> resp(n * K);
  std::vector<double> nll_chunk((n + kParallelChunk - 1) / kParallelChunk);

  double prev_nll = std::numeric_limits<double>::infinity();
  for (std::size_t step = 0; step < max_steps; ++step) {
    // E-step
    std::fill(nll_chunk.begin(), nll_chunk.end(), 0.0);
    parallel_for(n, threads, [&](std::size_t i) {
      std::vector<double> logw;
      detail::part_log_weights(mix, &features(i, 0), logw);
      const double lse = log_sum_exp(logw);
      nll_chunk[i / kParallelChunk] += -lse;
      for (std::size_t k = 0; k < K; ++k)
        resp[i * K + k] = logw[k] == -std::numeric_limits<double>::infinity()
                              ? 0.0
                              : std::exp(logw[k] - lse);
    });
    double nll = 0.0;
    for (double v : nll_chunk) nll += v;
    out.trace.nll.push_back(nll);

    if (std::fabs(prev_nll - nll) < tol) {
      out.trace.converged = true;
      break;
    }
    prev_nll = nll;

    // M-step: means and priors
    std::vector<double> r_sum(K, 0.0);
    Tensor new_protos({K, C});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        const double r = resp[i * K + k];
        if (r == 0.0) continue;
        r_sum[k] += r;
        for (std::size_t c = 0; c < C; ++c) new_protos(k, c) += r * features(i, c);
      }
    bool reseeded = false;
    for (std::size_t k = 0; k < K; ++k) {
      if (r_sum[k] < 1e-12) {
        const std::size_t pick = farthest_from(mix.prototypes, K);
        for (std::size_t c = 0; c < C; ++c) new_protos(k, c) = features(pick, c);
        r_sum[k] = 1.0;  // nominal weight for the prior update
        out.trace.reseeds.emplace_back(step, k);
        reseeded = true;
      } else {
        for (std::size_t c = 0; c < C; ++c) new_protos(k, c) /= r_sum[k];
      }
    }
    mix.prototypes = std::move(new_protos);
    double total = 0.0;
    for (double v : r_sum) total += v;
    for (std::size_t k = 0; k < K; ++k) mix.priors[k] = r_sum[k] / total;

    // M-step: shared isotropic variance against the new means
    std::fill(nll_chunk.begin(), nll_chunk.end(), 0.0);
    parallel_for(n, threads, [&](std::size_t i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double r = resp[i * K + k];
        if (r == 0.0) continue;
        acc += r * squared_distance(&features(i, 0), &mix.prototypes(k, 0), C);
      }
      nll_chunk[i / kParallelChunk] += acc;
    });
    double ss = 0.0;
    for (double v : nll_chunk) ss += v;
    mix.variance = std::max(ss / double(n * C), 1e-12);
    if (reseeded) prev_nll = std::numeric_limits<double>::infinity();
  }
  return out;
}

// Cold fits fan out over `restarts` seeded farthest-point initializations
// (first center varies with the derived sub-seed) and keep the lowest final
// NLL; deterministic given (data, seed). Warm starts run a single pass.
inline EmResult em_fit(const Tensor& features, std::size_t K, std::uint64_t seed,
                       std::size_t max_steps = 300, double tol = 1e-6,
                       const PartMixture* warm_start = nullptr, int threads = 1,
                       std::size_t restarts = 8) {
  if (warm_start != nullptr || restarts <= 1)
    return em_fit_single(features, K, seed, max_steps, tol, warm_start, threads);
  SplitRng root(seed);
  EmResult best;
  bool have = false;
  for (std::size_t r = 0; r < restarts; ++r) {
    EmResult cand = em_fit_single(features, K, root.derive(r).next_u64(),
                                  max_steps, tol, nullptr, threads);
    if (!have || cand.trace.nll.back() < best.trace.nll.back()) {
      best = std::move(cand);
      have = true;
    }
  }
  return best;
}

// Bayesian posterior row per part: pi(k|m) ∝ prior(k|m) N(f_m; theta_km, var).
inline PiEmbedding infer_pi(const MixtureModel& model, const Tensor& raw_parts) {
  const std::size_t M = model.n_parts();
  if (raw_parts.rank() != 2 || raw_parts.dim(0) < M)
    throw ConfigError("infer_pi: part feature shape mismatch");
  PiEmbedding out;
  const std::size_t K = model.n_types();
  out.pi = Tensor({M, K});
  std::vector<double> logw;
  for (std::size_t m = 0; m < M; ++m) {
    const PartMixture& mix = model.parts[m];
    if (mix.n_channels() != raw_parts.dim(1))
      throw ConfigError("infer_pi: channel mismatch");
    if (mix.source_part >= raw_parts.dim(0))
      throw ConfigError("infer_pi: source part out of range");
    detail::part_log_weights(mix, &raw_parts(mix.source_part, 0), logw);
    const double lse = log_sum_exp(logw);
    if (!std::isfinite(lse)) {
      for (std::size_t k = 0; k < K; ++k) out.pi(m, k) = 1.0 / double(K);
      out.degenerate = true;
      continue;
    }
    for (std::size_t k = 0; k < K; ++k)
      out.pi(m, k) = logw[k] == -std::numeric_limits<double>::infinity()
                         ? 0.0
                         : std::exp(logw[k] - lse);
  }
  return out;
}

// Positivity-constrained least-squares alternative: per part, solve
// min_{pi >= 0} ||Theta_m pi - f_m||^2 by accelerated projected gradient,
// then renormalize the row to sum 1.
inline PiEmbedding infer_pi_nnls(const MixtureModel& model, const Tensor& raw_parts,
                                 std::size_t max_iters = 20000) {
  const std::size_t M = model.n_parts();
  PiEmbedding out;
  const std::size_t K = model.n_types();
  out.pi = Tensor({M, K});
  for (std::size_t m = 0; m < M; ++m) {
    const PartMixture& mix = model.parts[m];
    const std::size_t C = mix.n_channels();
    const double* f = &raw_parts(mix.source_part, 0);

    // Gram matrix G = P P^T and h = P f, P rows = prototypes.
    std::vector<double> gram(K * K), h(K);
    for (std::size_t a = 0; a < K; ++a) {
      h[a] = 0.0;
      for (std::size_t c = 0; c < C; ++c) h[a] += mix.prototypes(a, c) * f[c];
      for (std::size_t b = 0; b <= a; ++b) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c)
          s += mix.prototypes(a, c) * mix.prototypes(b, c);
        gram[a * K + b] = s;
        gram[b * K + a] = s;
      }
    }
    double lipschitz = 0.0;
    for (double v : gram) lipschitz += v * v;
    lipschitz = 2.0 * std::sqrt(lipschitz);
    if (lipschitz <= 0.0) lipschitz = 1.0;
    const double step = 1.0 / lipschitz;

    std::vector<double> x(K, 0.0), y(K, 0.0), x_prev(K, 0.0), grad(K);
    double t_mom = 1.0;
    double h_scale = 1.0;
    for (double v : h) h_scale = std::max(h_scale, std::fabs(v));
    const double kkt_tol = 1e-11 * h_scale;
    bool converged = false;
    for (std::size_t it = 0; it < max_iters; ++it) {
      for (std::size_t a = 0; a < K; ++a) {
        double s = -h[a];
        for (std::size_t b = 0; b < K; ++b) s += gram[a * K + b] * y[b];
        grad[a] = 2.0 * s;
      }
      x_prev = x;
      for (std::size_t a = 0; a < K; ++a)
        x[a] = std::max(0.0, y[a] - step * grad[a]);
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t_mom * t_mom));
      for (std::size_t a = 0; a < K; ++a)
        y[a] = x[a] + ((t_mom - 1.0) / t_next) * (x[a] - x_prev[a]);
      t_mom = t_next;

      // KKT: grad >= 0 where x == 0, grad == 0 where x > 0.
      double viol = 0.0;
      for (std::size_t a = 0; a < K; ++a) {
        double s = -h[a];
        for (std::size_t b = 0; b < K; ++b) s += gram[a * K + b] * x[b];
        const double g = 2.0 * s;
        viol = std::max(viol, x[a] > 0.0 ? std::fabs(g) : std::max(0.0, -g));
      }
      if (viol < kkt_tol) {
        converged = true;
        break;
      }
    }
    if (!converged) out.converged = false;

    double sum = 0.0;
    for (double v : x) sum += v;
    if (sum <= 1e-12) {
      for (std::size_t k = 0; k < K; ++k) out.pi(m, k) = 1.0 / double(K);
      out.degenerate = true;
    } else {
      for (std::size_t k = 0; k < K; ++k) out.pi(m, k) = x[k] / sum;
    }
  }
  return out;
}

// Row-major flattening divided by M, so the flat vector sums to 1.
inline PiEmbedding flatten_pi(const PiEmbedding& pi) {
  if (pi.flat) return pi;
  const std::size_t M = pi.pi.dim(0), K = pi.pi.dim(1);
  PiEmbedding out;
  out.flat = true;
  out.degenerate = pi.degenerate;
  out.converged = pi.converged;
  std::vector<double> v(M * K);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t k = 0; k < K; ++k) v[m * K + k] = pi.pi(m, k) / double(M);
  out.pi = Tensor::vector_of(std::move(v));
  return out;
}

// Class-averaged signatures; rows are renormalized after averaging.
inline Codebook class_average_pi(const std::map<int, std::vector<PiEmbedding>>& by_class) {
  if (by_class.empty()) throw ConfigError("class_average_pi: no classes");
  Codebook cb;
  bool flat = by_class.begin()->second.empty()
                  ? false
                  : by_class.begin()->second.front().flat;
  cb.kind = flat ? CodebookKind::visual_flat : CodebookKind::visual_structured;
  for (const auto& [cls, pis] : by_class) {
    if (pis.empty())
      throw ConfigError("class_average_pi: empty class " + std::to_string(cls));
    Tensor mean(pis.front().pi.dims());
    for (const PiEmbedding& p : pis) {
      if (p.flat != flat || !p.pi.same_shape(mean))
        throw ConfigError("class_average_pi: mixed embedding shapes");
      for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] += p.pi[i];
    }
    for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] /= double(pis.size());
    if (flat) {
      double s = 0.0;
      for (double v : mean.values()) s += v;
      if (s > 0.0)
        for (double& v : mean.values()) v /= s;
    } else {
      for (std::size_t m = 0; m < mean.dim(0); ++m) {
        double s = 0.0;
        for (std::size_t k = 0; k < mean.dim(1); ++k) s += mean(m, k);
        if (s > 0.0)
          for (std::size_t k = 0; k < mean.dim(1); ++k) mean(m, k) /= s;
      }
    }
    cb.entries[cls] = std::move(mean);
  }
  return cb;
}

}  // namespace vsemb
