#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vsemb/attention.hpp"
#include "vsemb/common.hpp"
#include "vsemb/dataset.hpp"
#include "vsemb/mixture.hpp"
#include "vsemb/numerics.hpp"
#include "vsemb/potentials.hpp"
#include "vsemb/tensor.hpp"

namespace vsemb {

struct OracleConfig {
  std::size_t parts = 4;
  std::size_t types = 8;
  std::size_t epochs = 30;       // grouping + classifier training
  double learning_rate = 0.02;
  bool init_from_cells = true;   // seed grouping from train cell statistics
  double init_scale = 0.02;      // random-init fallback scale
  double lambda = 5.0;
  double zeta = 0.02;
  std::size_t em_max_steps = 300;
  double em_tol = 1e-6;
  std::uint64_t seed = 1;
  bool use_raw_parts = false;    // degenerate config: EM directly on stored parts
  bool permute_channels = true;  // independence from the learner's feature view
  bool flat = false;             // emit flattened embeddings
  int threads = 1;
};

// Independently parameterized feature model + mixture. Its parameters are
// never shared with, nor serialized into, a learner checkpoint; independence
// from the learner is realized by its own seed and an optional channel
// permutation of the ingested feature maps.
struct VisualOracle {
  GroupingModel grouping;
  MixtureModel mixture;
  bool flat = false;
  bool use_raw_parts = false;
  std::vector<std::size_t> channel_perm;  // applied to the channel axis
  std::uint64_t seed = 0;
  std::string feature_source = "attention";

  std::size_t n_parts() const { return mixture.n_parts(); }
  std::size_t n_types() const { return mixture.n_types(); }
};

struct OracleBuildLog {
  std::vector<double> fit_loss;      // per epoch: mean (CE + L_prt)
  std::vector<EmTrace> em_traces;    // per part
};

namespace detail {

inline Tensor permute_channels_fmap(const Tensor& fmap,
                                    const std::vector<std::size_t>& perm) {
  if (perm.empty()) return fmap;
  Tensor out(fmap.dims());
  const std::size_t H = fmap.dim(0), W = fmap.dim(1), C = fmap.dim(2);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < C; ++ch)
        out(r, c, ch) = fmap(r, c, perm[ch]);
  return out;
}

inline Tensor permute_channels_parts(const Tensor& parts,
                                     const std::vector<std::size_t>& perm) {
  if (perm.empty()) return parts;
  Tensor out(parts.dims());
  for (std::size_t m = 0; m < parts.dim(0); ++m)
    for (std::size_t c = 0; c < parts.dim(1); ++c)
      out(m, c) = parts(m, perm[c]);
  return out;
}

}  // namespace detail

// Raw (possibly channel-permuted) part features for one instance under the
// oracle's own feature view.
inline Tensor oracle_part_features(const VisualOracle& oracle, const Instance& inst) {
  if (oracle.use_raw_parts) {
    if (!inst.parts)
      throw ConfigError("oracle: instance " + inst.id + " carries no raw parts");
    return detail::permute_channels_parts(*inst.parts, oracle.channel_perm);
  }
  const Tensor fmap = detail::permute_channels_fmap(inst.feature_map, oracle.channel_perm);
  return attention_forward(oracle.grouping, fmap).parts.features;
}

// Builds the oracle: trains its own grouping model and classifier by
// maximizing phi_XY - L_prt on the seen-class train split, then fits the
// per-part mixtures by EM over its part features.
inline VisualOracle build_oracle(const Dataset& ds, const OracleConfig& cfg,
                                 OracleBuildLog* log = nullptr) {
  const auto train_idx = ds.train_indices();
  if (train_idx.empty()) throw ConfigError("oracle: empty train split");

  VisualOracle oracle;
  oracle.flat = cfg.flat;
  oracle.use_raw_parts = cfg.use_raw_parts;
  oracle.seed = cfg.seed;
  SplitRng root(cfg.seed);

  std::size_t M = cfg.parts;
  std::size_t C = ds.instances.front().feature_map.dim(2);
  if (cfg.use_raw_parts) {
    if (!ds.instances.front().parts)
      throw ConfigError("oracle: dataset carries no raw part features");
    M = ds.instances.front().parts->dim(0);
    C = ds.instances.front().parts->dim(1);
    oracle.feature_source = "raw-parts";
  }

  if (cfg.permute_channels) {
    oracle.channel_perm = root.derive("channelperm").permutation(C);
  }

  std::vector<int> seen(ds.split.seen_classes.begin(), ds.split.seen_classes.end());
  const std::size_t n = train_idx.size();

  if (!cfg.use_raw_parts) {
    std::vector<Tensor> fmaps;
    fmaps.reserve(n);
    for (std::size_t i : train_idx)
      fmaps.push_back(detail::permute_channels_fmap(ds.instances[i].feature_map,
                                                    oracle.channel_perm));
    if (cfg.init_from_cells) {
      std::vector<const Tensor*> fptrs;
      for (const Tensor& f : fmaps) fptrs.push_back(&f);
      oracle.grouping = init_grouping_from_cells(fptrs, M);
    } else {
      oracle.grouping = GroupingModel(M, C);
      oracle.grouping.init_random(root.derive("grouping"), cfg.init_scale);
    }
    Classifier cls(seen, M * C);
    cls.init_random(root.derive("classifier"));
    std::vector<int> labels;
    for (std::size_t i : train_idx) labels.push_back(ds.instances[i].class_id);

    const std::size_t n_group = oracle.grouping.n_params();
    const std::size_t n_cls = cls.n_params();
    AdamConfig acfg;
    acfg.learning_rate = cfg.learning_rate;
    OptimizerState opt(n_group + n_cls, acfg);

    const std::size_t n_chunks = (n + kParallelChunk - 1) / kParallelChunk;
    std::vector<std::vector<double>> chunk_grad(n_chunks);
    std::vector<double> chunk_loss(n_chunks);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      for (auto& g : chunk_grad) g.assign(n_group + n_cls, 0.0);
      std::fill(chunk_loss.begin(), chunk_loss.end(), 0.0);

      parallel_for(n, cfg.threads, [&](std::size_t i) {
        const Tensor& fmap = fmaps[i];
        const AttentionForward fwd = attention_forward(oracle.grouping, fmap);
        auto& g = chunk_grad[i / kParallelChunk];

        // Classification potential (maximized): push -grad for descent form.
        std::vector<double> feat(fwd.parts.features.values());
        const PhiXYResult cres = phi_xy(cls, feat, labels[i], true);

        // Part loss (minimized).
        PartLossResult ploss =
            part_loss_grad_attention(fwd.parts.attention, cfg.lambda, cfg.zeta);
        chunk_loss[i / kParallelChunk] += ploss.loss - cres.value;

        Tensor d_feat({M, C});
        for (std::size_t j = 0; j < M * C; ++j) d_feat[j] = -cres.d_input[j];
        const Tensor dA_cls = attention_grad_from_features(fmap, d_feat);
        for (std::size_t j = 0; j < ploss.d_attention.numel(); ++j)
          ploss.d_attention[j] += dA_cls[j];

        Tensor gw({M, C}), gb({M});
        attention_backward(oracle.grouping, fmap, fwd, ploss.d_attention, gw, gb);
        for (std::size_t j = 0; j < M * C; ++j) g[j] += gw[j];
        for (std::size_t j = 0; j < M; ++j) g[M * C + j] += gb[j];
        for (std::size_t j = 0; j < n_cls; ++j) g[n_group + j] += -cres.grad[j];
      });

      std::vector<double> grad(n_group + n_cls, 0.0);
      double loss = 0.0;
      for (std::size_t c = 0; c < n_chunks; ++c) {
        for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += chunk_grad[c][j];
        loss += chunk_loss[c];
      }
      if (!std::isfinite(loss))
        throw TrainError("oracle: non-finite loss at epoch " + std::to_string(epoch));
      if (log) log->fit_loss.push_back(loss / double(n));

      std::vector<double> params = oracle.grouping.weight.values();
      params.insert(params.end(), oracle.grouping.bias.values().begin(),
                    oracle.grouping.bias.values().end());
      const std::vector<double> cparams = cls.get_params();
      params.insert(params.end(), cparams.begin(), cparams.end());
      adam_step(params, grad, opt);
      for (std::size_t j = 0; j < M * C; ++j) oracle.grouping.weight[j] = params[j];
      for (std::size_t j = 0; j < M; ++j) oracle.grouping.bias[j] = params[M * C + j];
      cls.set_params(std::span<const double>(params).subspan(n_group));
    }
  }

  // Per-part EM over the oracle's part features.
  std::vector<Tensor> part_feats(M, Tensor({n, C}));
  for (std::size_t ii = 0; ii < n; ++ii) {
    const Tensor f = oracle_part_features(oracle, ds.instances[train_idx[ii]]);
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t c = 0; c < C; ++c) part_feats[m](ii, c) = f(m, c);
  }
  oracle.mixture.parts.resize(M);
  SplitRng em_root = root.derive("em");
  for (std::size_t m = 0; m < M; ++m) {
    EmResult res = em_fit(part_feats[m], cfg.types, em_root.derive(m).next_u64(),
                          cfg.em_max_steps, cfg.em_tol, nullptr, cfg.threads);
    res.mixture.source_part = m;
    oracle.mixture.parts[m] = std::move(res.mixture);
    if (log) log->em_traces.push_back(std::move(res.trace));
  }
  return oracle;
}

// Supervision embedding for one instance. The emitted object carries only
// the score list (structured rows or a flat vector), no part or type
// identity metadata.
inline PiEmbedding oracle_pi_structured(const VisualOracle& oracle,
                                        const Instance& inst) {
  return infer_pi(oracle.mixture, oracle_part_features(oracle, inst));
}

inline PiEmbedding oracle_pi(const VisualOracle& oracle, const Instance& inst) {
  PiEmbedding pi = oracle_pi_structured(oracle, inst);
  return oracle.flat ? flatten_pi(pi) : pi;
}

// Class-averaged signatures over every instance of each requested class.
// Unlike the learner, the oracle may process unseen-class instances to
// produce test-time signatures.
inline Codebook oracle_codebook(const VisualOracle& oracle, const Dataset& ds,
                                const std::vector<int>& classes) {
  std::map<int, std::vector<PiEmbedding>> by_class;
  std::set<int> wanted(classes.begin(), classes.end());
  for (const Instance& inst : ds.instances)
    if (wanted.count(inst.class_id))
      by_class[inst.class_id].push_back(oracle_pi(oracle, inst));
  for (int c : classes)
    if (!by_class.count(c))
      throw ConfigError("oracle_codebook: class " + std::to_string(c) +
                        " has no instances");
  return class_average_pi(by_class);
}

}  // namespace vsemb
