#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vsemb/alignment.hpp"
#include "vsemb/attention.hpp"
#include "vsemb/common.hpp"
#include "vsemb/dataset.hpp"
#include "vsemb/mixture.hpp"
#include "vsemb/numerics.hpp"
#include "vsemb/oracle.hpp"
#include "vsemb/potentials.hpp"
#include "vsemb/tensor.hpp"

namespace vsemb {

enum class TrainMode { semantic, visual, visual_flat, baseline };

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::semantic: return "semantic";
    case TrainMode::visual: return "visual";
    case TrainMode::visual_flat: return "visual-flat";
    case TrainMode::baseline: return "baseline";
  }
  return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "semantic") return TrainMode::semantic;
  if (s == "visual") return TrainMode::visual;
  if (s == "visual-flat") return TrainMode::visual_flat;
  if (s == "baseline") return TrainMode::baseline;
  throw ConfigError("unknown mode '" + s + "'");
}

struct TrainConfig {
  TrainMode mode = TrainMode::semantic;
  std::size_t epochs = 30;
  double lr_step1 = 1e-6;
  double lr_step2 = 1e-5;
  double lambda = 5.0;
  double zeta = 0.02;
  double eta = 0.2;
  std::size_t parts = 4;    // M
  std::size_t types = 16;   // K
  std::size_t hidden = 256; // H_V
  std::size_t em_period = 1;
  std::size_t em_max_steps = 300;
  double em_tol = 1e-6;
  std::size_t mapper_steps = 25;
  std::uint64_t seed = 1;
  bool normalize_codebook = true;
  bool margin_on_correct = false;
  bool pi_gradient_to_prototypes = false;
  bool init_from_cells = true;  // seed grouping from train cell statistics
  int threads = 1;  // runtime knob, not serialized

  void validate() const {
    if (lr_step1 <= 0.0 || lr_step2 <= 0.0)
      throw ConfigError("train: learning rates must be positive");
    if (parts < 2) throw ConfigError("train: parts must be >= 2");
    if (types < 1) throw ConfigError("train: types must be >= 1");
    if (eta < 0.0) throw ConfigError("train: eta must be >= 0");
    if (em_period < 1) throw ConfigError("train: em_period must be >= 1");
  }
};

inline nlohmann::json train_config_json(const TrainConfig& c) {
  nlohmann::json j;
  j["mode"] = to_string(c.mode);
  j["epochs"] = c.epochs;
  j["lr_step1"] = c.lr_step1;
  j["lr_step2"] = c.lr_step2;
  j["lambda"] = c.lambda;
  j["zeta"] = c.zeta;
  j["eta"] = c.eta;
  j["parts"] = c.parts;
  j["types"] = c.types;
  j["hidden"] = c.hidden;
  j["em_period"] = c.em_period;
  j["em_max_steps"] = c.em_max_steps;
  j["em_tol"] = c.em_tol;
  j["mapper_steps"] = c.mapper_steps;
  j["seed"] = c.seed;
  j["normalize_codebook"] = c.normalize_codebook;
  j["margin_on_correct"] = c.margin_on_correct;
  j["pi_gradient_to_prototypes"] = c.pi_gradient_to_prototypes;
  j["init_from_cells"] = c.init_from_cells;
  return j;
}

inline const std::set<std::string>& train_config_keys() {
  static const std::set<std::string> keys = {
      "mode", "epochs", "lr_step1", "lr_step2", "lambda", "zeta", "eta",
      "parts", "types", "hidden", "em_period", "em_max_steps", "em_tol",
      "mapper_steps", "seed", "normalize_codebook", "margin_on_correct",
      "pi_gradient_to_prototypes", "init_from_cells"};
  return keys;
}

inline void train_config_apply_json(TrainConfig& c, const nlohmann::json& j) {
  if (j.contains("mode")) c.mode = train_mode_from_string(j["mode"].get<std::string>());
  if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
  if (j.contains("lr_step1")) c.lr_step1 = j["lr_step1"].get<double>();
  if (j.contains("lr_step2")) c.lr_step2 = j["lr_step2"].get<double>();
  if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
  if (j.contains("zeta")) c.zeta = j["zeta"].get<double>();
  if (j.contains("eta")) c.eta = j["eta"].get<double>();
  if (j.contains("parts")) c.parts = j["parts"].get<std::size_t>();
  if (j.contains("types")) c.types = j["types"].get<std::size_t>();
  if (j.contains("hidden")) c.hidden = j["hidden"].get<std::size_t>();
  if (j.contains("em_period")) c.em_period = j["em_period"].get<std::size_t>();
  if (j.contains("em_max_steps")) c.em_max_steps = j["em_max_steps"].get<std::size_t>();
  if (j.contains("em_tol")) c.em_tol = j["em_tol"].get<double>();
  if (j.contains("mapper_steps")) c.mapper_steps = j["mapper_steps"].get<std::size_t>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("normalize_codebook")) c.normalize_codebook = j["normalize_codebook"].get<bool>();
  if (j.contains("margin_on_correct")) c.margin_on_correct = j["margin_on_correct"].get<bool>();
  if (j.contains("pi_gradient_to_prototypes"))
    c.pi_gradient_to_prototypes = j["pi_gradient_to_prototypes"].get<bool>();
  if (j.contains("init_from_cells")) c.init_from_cells = j["init_from_cells"].get<bool>();
}

struct EpochLog {
  std::size_t epoch = 0;
  double l_prt = 0.0;
  double mix_nll = 0.0;
  double phi_xy = 0.0;
  double phi_sx = 0.0;
};

struct Checkpoint {
  std::uint8_t version = 1;
  TrainConfig config;
  GroupingModel grouping;
  MixtureModel mixture;
  Classifier classifier;
  std::optional<SemanticMapper> mapper;
  std::optional<CompatibilityBaseline> baseline;
  std::vector<EpochLog> log;
};

// Re-runs EM per Pi row, warm-started from the current mixture, against the
// current features of each row's source part. Honors the step cap.
inline std::vector<EmTrace> em_refresh(MixtureModel& mixture,
                                       const std::vector<Tensor>& part_matrices,
                                       std::size_t max_steps, double tol,
                                       int threads = 1) {
  std::vector<EmTrace> traces;
  for (PartMixture& part : mixture.parts) {
    if (part.source_part >= part_matrices.size())
      throw ConfigError("em_refresh: source part out of range");
    EmResult res = em_fit(part_matrices[part.source_part], part.n_types(), 0,
                          max_steps, tol, &part, threads);
    res.mixture.source_part = part.source_part;
    part = std::move(res.mixture);
    traces.push_back(std::move(res.trace));
  }
  return traces;
}

namespace detail {

inline std::vector<double> pack_grouping(const GroupingModel& g) {
  std::vector<double> p(g.weight.values());
  p.insert(p.end(), g.bias.values().begin(), g.bias.values().end());
  return p;
}

inline void unpack_grouping(GroupingModel& g, std::span<const double> p) {
  for (std::size_t i = 0; i < g.weight.numel(); ++i) g.weight[i] = p[i];
  for (std::size_t i = 0; i < g.bias.numel(); ++i)
    g.bias[i] = p[g.weight.numel() + i];
}

// The compatibility baseline consumes the raw feature map flattened to one
// vector (global average pooling is not informative for grids whose part
// signals integrate to zero).
inline Tensor baseline_features_matrix(const Dataset& ds,
                                       const std::vector<std::size_t>& idx) {
  const std::size_t d = ds.instances.front().feature_map.numel();
  Tensor out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Tensor& f = ds.instances[idx[i]].feature_map;
    for (std::size_t c = 0; c < d; ++c) out(i, c) = f[c];
  }
  return out;
}

}  // namespace detail

// Two-step alternating optimization. Step 1 updates only the grouping model
// by minimizing L_prt. Step 2 freezes the grouping, refreshes the per-part
// mixtures by EM, and updates the classifier (phi_XY), the mapper (semantic
// mode, Eq.-11-style hinge on fixed Pi), or the Pi labeling against the
// oracle's instance-level supervision (visual modes).
inline Checkpoint train(const Dataset& ds, const TrainConfig& cfg,
                        const Codebook* semantic_cb, const VisualOracle* oracle) {
  cfg.validate();
  const auto train_idx = ds.train_indices();
  if (train_idx.empty()) throw ConfigError("train: empty train split");

  Checkpoint ck;
  ck.config = cfg;
  SplitRng root(cfg.seed);

  const std::vector<int> seen(ds.split.seen_classes.begin(),
                              ds.split.seen_classes.end());
  std::vector<int> labels;
  for (std::size_t i : train_idx) labels.push_back(ds.instances[i].class_id);

  // --- Baseline mode: linear compatibility on raw pooled features. ---
  if (cfg.mode == TrainMode::baseline) {
    if (semantic_cb == nullptr && oracle == nullptr)
      throw ConfigError("train: baseline mode needs a semantic codebook or an oracle");
    const Tensor feats = detail::baseline_features_matrix(ds, train_idx);
    ScoringCodebook targets;
    if (oracle != nullptr) {
      std::map<int, std::vector<PiEmbedding>> by_class;
      for (std::size_t ii = 0; ii < train_idx.size(); ++ii) {
        PiEmbedding pi = oracle_pi_structured(*oracle, ds.instances[train_idx[ii]]);
        by_class[labels[ii]].push_back(flatten_pi(pi));
      }
      const Codebook cb = class_average_pi(by_class);
      targets = ScoringCodebook::build(cb, false);
    } else {
      if (semantic_cb->kind != CodebookKind::semantic)
        throw ConfigError("train: baseline semantic supervision needs a semantic codebook");
      targets = ScoringCodebook::build_subset(*semantic_cb, cfg.normalize_codebook,
                                              ds.split.seen_classes);
    }
    ck.baseline = baseline_fit(feats, labels, targets, cfg.eta, cfg.epochs,
                               cfg.lr_step2, root.derive("baseline").next_u64(),
                               cfg.threads);
    return ck;
  }

  if (cfg.mode == TrainMode::semantic) {
    if (semantic_cb == nullptr || semantic_cb->kind != CodebookKind::semantic)
      throw ConfigError("train: semantic mode needs a semantic codebook");
  } else {
    if (oracle == nullptr)
      throw ConfigError("train: visual modes need a visual oracle");
    if (oracle->n_parts() != cfg.parts || oracle->n_types() != cfg.types)
      throw ConfigError("train: oracle shape (" + std::to_string(oracle->n_parts()) +
                        "," + std::to_string(oracle->n_types()) +
                        ") does not match config (M,K)");
  }

  const std::size_t M = cfg.parts, K = cfg.types;
  const std::size_t C = ds.instances.front().feature_map.dim(2);
  const std::size_t n = train_idx.size();
  const bool visual = cfg.mode != TrainMode::semantic;

  if (cfg.init_from_cells) {
    std::vector<const Tensor*> fptrs;
    for (std::size_t i : train_idx) fptrs.push_back(&ds.instances[i].feature_map);
    ck.grouping = init_grouping_from_cells(fptrs, M);
  } else {
    ck.grouping = GroupingModel(M, C);
    ck.grouping.init_random(root.derive("grouping"));
  }
  ck.classifier = Classifier(seen, M * C);
  ck.classifier.init_random(root.derive("classifier"));

  ScoringCodebook seen_semantic;
  if (!visual) {
    seen_semantic = ScoringCodebook::build_subset(*semantic_cb, cfg.normalize_codebook,
                                                  ds.split.seen_classes);
    ck.mapper = SemanticMapper(M * K, cfg.hidden, seen_semantic.dim());
    ck.mapper->init_random(root.derive("mapper"));
  }

  // Instance-level supervision for visual modes, structured form.
  std::vector<Tensor> pi_vo;
  if (visual) {
    pi_vo.reserve(n);
    for (std::size_t i : train_idx)
      pi_vo.push_back(oracle_pi_structured(*oracle, ds.instances[i]).pi);
  }

  // Per-instance forward state, recomputed whenever the grouping changes.
  std::vector<Tensor> inst_feats(n);
  auto recompute_features = [&]() {
    parallel_for(n, cfg.threads, [&](std::size_t ii) {
      inst_feats[ii] =
          attention_forward(ck.grouping, ds.instances[train_idx[ii]].feature_map)
              .parts.features;
    });
  };
  auto part_matrices = [&]() {
    std::vector<Tensor> mats(M, Tensor({n, C}));
    for (std::size_t ii = 0; ii < n; ++ii)
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t c = 0; c < C; ++c) mats[m](ii, c) = inst_feats[ii](m, c);
    return mats;
  };

  recompute_features();
  {
    auto mats = part_matrices();
    ck.mixture.parts.resize(M);
    SplitRng em_root = root.derive("em");
    for (std::size_t m = 0; m < M; ++m) {
      EmResult res = em_fit(mats[m], K, em_root.derive(m).next_u64(),
                            cfg.em_max_steps, cfg.em_tol, nullptr, cfg.threads);
      res.mixture.source_part = m;
      ck.mixture.parts[m] = std::move(res.mixture);
    }
  }

  const std::size_t n_group = ck.grouping.n_params();
  AdamConfig a1;
  a1.learning_rate = cfg.lr_step1;
  OptimizerState opt_group(n_group, a1);
  AdamConfig a2;
  a2.learning_rate = cfg.lr_step2;
  OptimizerState opt_cls(ck.classifier.n_params(), a2);
  std::optional<OptimizerState> opt_mapper;
  if (ck.mapper) opt_mapper.emplace(ck.mapper->n_params(), a2);
  std::optional<OptimizerState> opt_protos;
  if (visual && cfg.pi_gradient_to_prototypes)
    opt_protos.emplace(M * K * C, a2);

  const std::size_t n_chunks = (n + kParallelChunk - 1) / kParallelChunk;
  std::vector<std::vector<double>> chunk_grad(n_chunks);
  std::vector<double> chunk_loss(n_chunks);

  auto instance_pis = [&]() {
    std::vector<Tensor> pis(n);
    parallel_for(n, cfg.threads, [&](std::size_t ii) {
      pis[ii] = infer_pi(ck.mixture, inst_feats[ii]).pi;
    });
    return pis;
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;

    // ---- Step 1: grouping only, minimize sum L_prt ----
    for (auto& g : chunk_grad) g.assign(n_group, 0.0);
    std::fill(chunk_loss.begin(), chunk_loss.end(), 0.0);
    parallel_for(n, cfg.threads, [&](std::size_t ii) {
      const PartLossGrad res = loss_prt(
          ck.grouping, ds.instances[train_idx[ii]].feature_map, cfg.lambda, cfg.zeta);
      chunk_loss[ii / kParallelChunk] += res.loss;
      auto& g = chunk_grad[ii / kParallelChunk];
      for (std::size_t j = 0; j < ck.grouping.weight.numel(); ++j)
        g[j] += res.grad_weight[j];
      for (std::size_t j = 0; j < ck.grouping.bias.numel(); ++j)
        g[ck.grouping.weight.numel() + j] += res.grad_bias[j];
    });
    std::vector<double> grad(n_group, 0.0);
    for (std::size_t c = 0; c < n_chunks; ++c) {
      for (std::size_t j = 0; j < n_group; ++j) grad[j] += chunk_grad[c][j];
      log.l_prt += chunk_loss[c];
    }
    if (!std::isfinite(log.l_prt))
      throw TrainError("train: non-finite L_prt at epoch " + std::to_string(epoch));
    std::vector<double> gparams = detail::pack_grouping(ck.grouping);
    adam_step(gparams, grad, opt_group);
    detail::unpack_grouping(ck.grouping, gparams);

    // ---- Step 2: grouping frozen ----
    recompute_features();

    if (epoch % cfg.em_period == 0) {
      // Warm refresh plus a cold seeded refit candidate: the warm pass alone
      // cannot leave the basin found on the untrained features at epoch 0.
      // A winning cold fit is relabeled to sit nearest the incumbent.
      auto mats = part_matrices();
      SplitRng er = root.derive("refresh").derive(epoch);
      for (std::size_t m = 0; m < M; ++m) {
        PartMixture& part = ck.mixture.parts[m];
        const Tensor& feats = mats[part.source_part];
        EmResult warm = em_fit(feats, K, 0, cfg.em_max_steps, cfg.em_tol, &part,
                               cfg.threads);
        EmResult cold = em_fit(feats, K, er.derive(m).next_u64(), cfg.em_max_steps,
                               cfg.em_tol, nullptr, cfg.threads);
        if (cold.trace.nll.back() < warm.trace.nll.back() - cfg.em_tol) {
          align_components_to_reference(cold.mixture, part);
          cold.mixture.source_part = part.source_part;
          part = std::move(cold.mixture);
          log.mix_nll += cold.trace.nll.back();
        } else {
          warm.mixture.source_part = part.source_part;
          part = std::move(warm.mixture);
          log.mix_nll += warm.trace.nll.back();
        }
      }
    }

    if (visual) {
      // Maximize phi_SX over the mixture's relabeling invariances: assign
      // Pi rows and components to the oracle's labeling.
      const PiAlignment align = compute_pi_alignment(instance_pis(), pi_vo);
      apply_pi_alignment(ck.mixture, align);
    }

    // Classifier update, maximizing phi_XY.
    const std::size_t n_cls = ck.classifier.n_params();
    for (auto& g : chunk_grad) g.assign(n_cls, 0.0);
    std::fill(chunk_loss.begin(), chunk_loss.end(), 0.0);
    parallel_for(n, cfg.threads, [&](std::size_t ii) {
      const PhiXYResult res =
          phi_xy(ck.classifier, inst_feats[ii].values(), labels[ii], false);
      chunk_loss[ii / kParallelChunk] += res.value;
      auto& g = chunk_grad[ii / kParallelChunk];
      for (std::size_t j = 0; j < n_cls; ++j) g[j] += -res.grad[j];
    });
    grad.assign(n_cls, 0.0);
    for (std::size_t c = 0; c < n_chunks; ++c) {
      for (std::size_t j = 0; j < n_cls; ++j) grad[j] += chunk_grad[c][j];
      log.phi_xy += chunk_loss[c];
    }
    if (!std::isfinite(log.phi_xy))
      throw TrainError("train: non-finite phi_XY at epoch " + std::to_string(epoch));
    std::vector<double> cparams = ck.classifier.get_params();
    adam_step(cparams, grad, opt_cls);
    ck.classifier.set_params(cparams);

    if (visual) {
      const auto pis = instance_pis();
      for (std::size_t ii = 0; ii < n; ++ii) {
        if (cfg.mode == TrainMode::visual_flat) {
          PiEmbedding t;
          t.pi = pi_vo[ii];
          PiEmbedding l;
          l.pi = pis[ii];
          log.phi_sx += phi_sx_visual(flatten_pi(t).pi, flatten_pi(l).pi).value;
        } else {
          log.phi_sx += phi_sx_visual(pi_vo[ii], pis[ii]).value;
        }
      }
      if (opt_protos) {
        // Experimental: differentiate the posterior w.r.t. the prototypes.
        std::vector<double> pgrad(M * K * C, 0.0);
        for (std::size_t ii = 0; ii < n; ++ii) {
          for (std::size_t m = 0; m < M; ++m) {
            const PartMixture& part = ck.mixture.parts[m];
            const double* f = &inst_feats[ii](part.source_part, 0);
            double inner = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
              const double dphi = 2.0 * (pi_vo[ii](m, k) - pis[ii](m, k));
              inner += dphi * pis[ii](m, k);
            }
            for (std::size_t k = 0; k < K; ++k) {
              const double pk = pis[ii](m, k);
              const double dphi = 2.0 * (pi_vo[ii](m, k) - pk);
              const double coeff = pk * (dphi - inner);
              for (std::size_t c = 0; c < C; ++c)
                pgrad[(m * K + k) * C + c] +=
                    -coeff * (f[c] - part.prototypes(k, c)) / part.variance;
            }
          }
        }
        std::vector<double> protos(M * K * C);
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t c = 0; c < C; ++c)
              protos[(m * K + k) * C + c] = ck.mixture.parts[m].prototypes(k, c);
        adam_step(protos, pgrad, *opt_protos);
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t c = 0; c < C; ++c)
              ck.mixture.parts[m].prototypes(k, c) = protos[(m * K + k) * C + c];
      }
    }

    if (!visual) {
      // Mapper fit on fixed Pi, maximizing the semantic hinge potential.
      const auto pis = instance_pis();
      const std::size_t n_map = ck.mapper->n_params();
      for (std::size_t it = 0; it < cfg.mapper_steps; ++it) {
        for (auto& g : chunk_grad) g.assign(n_map, 0.0);
        std::fill(chunk_loss.begin(), chunk_loss.end(), 0.0);
        parallel_for(n, cfg.threads, [&](std::size_t ii) {
          const PhiSXSemanticResult res =
              phi_sx_semantic(*ck.mapper, pis[ii].values(), labels[ii],
                              seen_semantic, cfg.eta, cfg.margin_on_correct);
          chunk_loss[ii / kParallelChunk] += res.value;
          auto& g = chunk_grad[ii / kParallelChunk];
          for (std::size_t j = 0; j < n_map; ++j) g[j] += -res.grad[j];
        });
        grad.assign(n_map, 0.0);
        double total = 0.0;
        for (std::size_t c = 0; c < n_chunks; ++c) {
          for (std::size_t j = 0; j < n_map; ++j) grad[j] += chunk_grad[c][j];
          total += chunk_loss[c];
        }
        if (!std::isfinite(total))
          throw TrainError("train: non-finite hinge at epoch " + std::to_string(epoch));
        std::vector<double> mparams = ck.mapper->get_params();
        adam_step(mparams, grad, *opt_mapper);
        ck.mapper->set_params(mparams);
        log.phi_sx = total;
      }
    }

    ck.log.push_back(log);
  }
  return ck;
}

// Pi embedding of an instance under a learner checkpoint.
inline PiEmbedding checkpoint_pi(const Checkpoint& ck, const Instance& inst) {
  if (ck.config.mode == TrainMode::baseline)
    throw ConfigError("checkpoint_pi: baseline checkpoints have no Pi embedding");
  const AttentionForward fwd = attention_forward(ck.grouping, inst.feature_map);
  PiEmbedding pi = infer_pi(ck.mixture, fwd.parts.features);
  if (ck.config.mode == TrainMode::visual_flat) return flatten_pi(pi);
  return pi;
}

}  // namespace vsemb
