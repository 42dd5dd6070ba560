#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "vsemb/common.hpp"
#include "vsemb/mixture.hpp"
#include "vsemb/tensor.hpp"

namespace vsemb {

// Minimum-cost assignment (shortest augmenting path, O(n^3)).
// cost is row-major n x n; returns row -> column.
inline std::vector<std::size_t> hungarian_min_assignment(
    const std::vector<double>& cost, std::size_t n) {
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// Joint relabeling of the learner's Pi rows (parts) and per-row components
// (types) that minimizes sum_i ||target_i - relabeled(learner_i)||_F^2. The
// mixture's likelihood is invariant under this relabeling, so applying it is
// a pure coordinate step on the visual supervision potential.
struct PiAlignment {
  std::vector<std::size_t> part_map;               // target row -> learner row
  std::vector<std::vector<std::size_t>> type_map;  // per target row: target k -> learner k
  double cost = 0.0;
};

inline PiAlignment compute_pi_alignment(const std::vector<Tensor>& learner,
                                        const std::vector<Tensor>& target) {
  if (learner.empty() || learner.size() != target.size())
    throw ConfigError("pi alignment: instance count mismatch");
  const std::size_t M = learner.front().dim(0), K = learner.front().dim(1);
  if (target.front().dim(0) != M || target.front().dim(1) != K)
    throw ConfigError("pi alignment: shape mismatch");
  const std::size_t n = learner.size();

  // sq[i] terms are constant under relabeling; only the cross term matters,
  // but the full squared cost keeps the reported number interpretable.
  std::vector<double> l_sq(M * K, 0.0), t_sq(M * K, 0.0);
  std::vector<double> cross(M * K * M * K, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& L = learner[i];
    const Tensor& T = target[i];
    for (std::size_t a = 0; a < M * K; ++a) {
      l_sq[a] += L[a] * L[a];
      t_sq[a] += T[a] * T[a];
    }
    for (std::size_t mt = 0; mt < M; ++mt)
      for (std::size_t kt = 0; kt < K; ++kt) {
        const double tv = T(mt, kt);
        if (tv == 0.0) continue;
        for (std::size_t ml = 0; ml < M; ++ml)
          for (std::size_t kl = 0; kl < K; ++kl)
            cross[((mt * K + kt) * M + ml) * K + kl] += tv * L(ml, kl);
      }
  }

  // Best type matching per (target row, learner row) pair.
  std::vector<double> row_cost(M * M, 0.0);
  std::vector<std::vector<std::vector<std::size_t>>> row_type(
      M, std::vector<std::vector<std::size_t>>(M));
  std::vector<double> kcost(K * K);
  for (std::size_t mt = 0; mt < M; ++mt)
    for (std::size_t ml = 0; ml < M; ++ml) {
      for (std::size_t kt = 0; kt < K; ++kt)
        for (std::size_t kl = 0; kl < K; ++kl)
          kcost[kt * K + kl] = t_sq[mt * K + kt] + l_sq[ml * K + kl] -
                               2.0 * cross[((mt * K + kt) * M + ml) * K + kl];
      auto assign = hungarian_min_assignment(kcost, K);
      double c = 0.0;
      for (std::size_t kt = 0; kt < K; ++kt) c += kcost[kt * K + assign[kt]];
      row_cost[mt * M + ml] = c;
      row_type[mt][ml] = std::move(assign);
    }

  PiAlignment out;
  out.part_map = hungarian_min_assignment(row_cost, M);
  out.type_map.resize(M);
  for (std::size_t mt = 0; mt < M; ++mt) {
    out.cost += row_cost[mt * M + out.part_map[mt]];
    out.type_map[mt] = row_type[mt][out.part_map[mt]];
  }
  return out;
}

// Applies the relabeling: Pi row mt is served by the learner's old row
// part_map[mt], with component kt reading old component type_map[mt][kt].
inline void apply_pi_alignment(MixtureModel& model, const PiAlignment& align) {
  const std::size_t M = model.n_parts();
  if (align.part_map.size() != M)
    throw ConfigError("apply_pi_alignment: part count mismatch");
  std::vector<PartMixture> relabeled(M);
  for (std::size_t mt = 0; mt < M; ++mt) {
    const PartMixture& src = model.parts[align.part_map[mt]];
    const std::size_t K = src.n_types(), C = src.n_channels();
    PartMixture dst;
    dst.source_part = src.source_part;
    dst.variance = src.variance;
    dst.prototypes = Tensor({K, C});
    dst.priors.resize(K);
    for (std::size_t kt = 0; kt < K; ++kt) {
      const std::size_t kl = align.type_map[mt][kt];
      dst.priors[kt] = src.priors[kl];
      for (std::size_t c = 0; c < C; ++c)
        dst.prototypes(kt, c) = src.prototypes(kl, c);
    }
    relabeled[mt] = std::move(dst);
  }
  model.parts = std::move(relabeled);
}

// Reorders a mixture's components to sit nearest the reference's components
// (assignment on pairwise prototype distances). Used to keep component
// labels stable when a refreshed fit replaces an incumbent mixture.
inline void align_components_to_reference(PartMixture& part, const PartMixture& ref) {
  const std::size_t K = part.n_types(), C = part.n_channels();
  if (ref.n_types() != K || ref.n_channels() != C)
    throw ConfigError("align_components_to_reference: shape mismatch");
  std::vector<double> cost(K * K);
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = 0; b < K; ++b)
      cost[a * K + b] =
          squared_distance(&ref.prototypes(a, 0), &part.prototypes(b, 0), C);
  const auto assign = hungarian_min_assignment(cost, K);
  PartMixture out;
  out.source_part = part.source_part;
  out.variance = part.variance;
  out.prototypes = Tensor({K, C});
  out.priors.resize(K);
  for (std::size_t a = 0; a < K; ++a) {
    out.priors[a] = part.priors[assign[a]];
    for (std::size_t c = 0; c < C; ++c)
      out.prototypes(a, c) = part.prototypes(assign[a], c);
  }
  part = std::move(out);
}

}  // namespace vsemb
