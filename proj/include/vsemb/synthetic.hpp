#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vsemb/common.hpp"
#include "vsemb/dataset.hpp"
#include "vsemb/tensor.hpp"
#include "vsemb/tensor_io.hpp"

namespace vsemb {

// Planted-prototype generator. Each class has a per-part distribution over K
// prototype types; instances sample one type per part, emit the noisy part
// feature both as a raw (M,C) matrix and embedded in a W x H x C feature map
// where part m's signal occupies its own spatial quadrant on top of a shared
// background vector.
struct SynthConfig {
  std::size_t channels = 32;   // C
  std::size_t width = 7;       // W
  std::size_t height = 7;      // H
  std::size_t parts = 4;       // M, at most 4 (one spatial quadrant each)
  std::size_t types = 8;       // K
  std::size_t n_classes = 14;
  std::size_t n_seen = 10;
  std::size_t per_class = 30;
  double separation = 10.0;    // required min prototype distance, in units of noise
  double noise = 1.0;          // gamma*
  std::uint64_t seed = 1;
  double type_smoothing = 0.0;     // 0 = one dominant type per (class, part)
  double semantic_noise = 0.0;     // additive uniform noise on attribute dims
  std::size_t semantic_padding = 0;  // extra non-visual attribute dims
  double train_fraction = 2.0 / 3.0;
  bool emit_feature_maps = true;
  double bg_scale = 0.5;         // background vector amplitude
  double peak_amplitude = 1.0;   // part signal amplitude at the quadrant center
  double ring_amplitude = std::numeric_limits<double>::quiet_NaN();  // NaN: zero-sum profile

  void validate() const {
    if (parts < 1 || parts > 4)
      throw ConfigError("synth: parts must be in [1,4] (quadrant placement)");
    if (channels < parts) throw ConfigError("synth: channels < parts");
    if (width < 2 || height < 2) throw ConfigError("synth: grid too small");
    if (types < 1) throw ConfigError("synth: types must be >= 1");
    if (n_seen >= n_classes) throw ConfigError("synth: n_seen must be < n_classes");
    if (n_seen == 0 || per_class == 0) throw ConfigError("synth: empty split");
    if (separation <= 0.0) throw ConfigError("synth: separation must be > 0");
    if (noise < 0.0) throw ConfigError("synth: noise must be >= 0");
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
      throw ConfigError("synth: train_fraction must be in (0,1)");
    if (type_smoothing < 0.0 || type_smoothing > 1.0)
      throw ConfigError("synth: type_smoothing must be in [0,1]");
  }
};

struct QuadrantPlan {
  // Inclusive cell ranges per part plus the profile peak cell. The ring
  // amplitude is set so each quadrant's profile sums to zero: the globally
  // pooled feature map then equals the background for every instance, which
  // keeps the pooled grouping functional instance-invariant.
  struct Region {
    std::size_t row_lo, row_hi, col_lo, col_hi;  // half-open
    std::size_t peak_row, peak_col;
    double ring_amplitude = -0.125;
  };
  std::vector<Region> regions;
  double peak_amplitude = 1.0;
};

struct PlantedModel {
  Tensor prototypes;            // M x K x C
  double gamma = 0.0;           // planted noise scale
  Tensor q;                     // n_classes x M x K, rows sum to 1
  std::vector<std::vector<std::size_t>> sampled_types;  // per instance, per part
  Tensor background;            // C
  QuadrantPlan plan;
  double min_separation = 0.0;  // achieved min pairwise prototype distance
  Codebook visual_codebook;     // ground truth, structured, entries = q_y
};

namespace detail {

inline QuadrantPlan make_quadrant_plan(std::size_t width, std::size_t height,
                                       std::size_t parts, double peak,
                                       double ring_override) {
  QuadrantPlan plan;
  plan.peak_amplitude = peak;
  const std::size_t half_w = width / 2;
  const std::size_t half_h = height / 2;
  const std::array<std::array<std::size_t, 4>, 4> bounds = {{
      {0, half_h, 0, half_w},
      {0, half_h, width - half_w, width},
      {height - half_h, height, 0, half_w},
      {height - half_h, height, width - half_w, width},
  }};
  for (std::size_t m = 0; m < parts; ++m) {
    QuadrantPlan::Region r;
    r.row_lo = bounds[m][0];
    r.row_hi = bounds[m][1];
    r.col_lo = bounds[m][2];
    r.col_hi = bounds[m][3];
    r.peak_row = r.row_lo + (r.row_hi - r.row_lo) / 2;
    r.peak_col = r.col_lo + (r.col_hi - r.col_lo) / 2;
    const std::size_t cells = (r.row_hi - r.row_lo) * (r.col_hi - r.col_lo);
    if (std::isnan(ring_override))
      r.ring_amplitude = cells > 1 ? -plan.peak_amplitude / double(cells - 1) : 0.0;
    else
      r.ring_amplitude = ring_override;
    plan.regions.push_back(r);
  }
  return plan;
}

// One dominant type per (class, part). Every type must appear among the seen
// classes of every part (so a learner fitting K components on seen data sees
// every planted cluster), and class tuples must be pairwise distinct.
inline std::vector<std::vector<std::size_t>> draw_dominant_types(
    const SynthConfig& cfg, SplitRng rng) {
  const std::size_t K = cfg.types;
  double combos = 1.0;
  for (std::size_t m = 0; m < cfg.parts; ++m) combos *= double(K);
  if (double(cfg.n_classes) > combos)
    throw ConfigError("synth: more classes than distinct type tuples");
  if (cfg.n_seen < K)
    throw ConfigError("synth: n_seen must be >= types so every prototype has seen data");

  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<std::vector<std::size_t>> dom(cfg.n_classes,
                                              std::vector<std::size_t>(cfg.parts));
    for (std::size_t m = 0; m < cfg.parts; ++m) {
      std::vector<std::size_t> seen_types;
      for (std::size_t k = 0; k < K; ++k) seen_types.push_back(k);
      while (seen_types.size() < cfg.n_seen)
        seen_types.push_back(rng.next_index(K));
      auto perm = rng.permutation(cfg.n_seen);
      for (std::size_t y = 0; y < cfg.n_seen; ++y)
        dom[y][m] = seen_types[perm[y]];
      for (std::size_t y = cfg.n_seen; y < cfg.n_classes; ++y)
        dom[y][m] = rng.next_index(K);
    }
    std::set<std::vector<std::size_t>> uniq(dom.begin(), dom.end());
    if (uniq.size() == cfg.n_classes) return dom;
  }
  throw ConfigError("synth: could not draw distinct class type tuples");
}

}  // namespace detail

inline std::pair<Dataset, PlantedModel> generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  SplitRng root(cfg.seed);

  const std::size_t C = cfg.channels, M = cfg.parts, K = cfg.types;
  const std::size_t block = C / M;

  PlantedModel planted;
  planted.gamma = cfg.noise;
  planted.plan = detail::make_quadrant_plan(cfg.width, cfg.height, M,
                                             cfg.peak_amplitude, cfg.ring_amplitude);

  // Prototypes are block-sparse in channel space. Each part's types share a
  // common zero-sum block signature (one direction that raises or lowers
  // every type of that part at once, without offering the bias a shared
  // channel-sum handle) plus zero-sum residuals orthogonal to it that carry
  // the type identity, rejection-sampled to honor the pairwise separation.
  const double min_dist = cfg.separation * cfg.noise;
  const double draw_scale = std::max(min_dist, 1.0);
  planted.prototypes = Tensor({M, K, C});
  {
    SplitRng rng = root.derive("prototypes");
    planted.min_separation = std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < M; ++m) {
      std::vector<double> signature(block, 0.0);
      if (block > 1) {
        double sum = 0.0, norm = 0.0;
        for (std::size_t c = 0; c < block; ++c) {
          const double sign = (rng.next_u64() & 1) ? 1.0 : -1.0;
          signature[c] = sign * rng.uniform(0.75, 1.25);
          sum += signature[c];
        }
        for (std::size_t c = 0; c < block; ++c) {
          signature[c] -= sum / double(block);
          norm += signature[c] * signature[c];
        }
        norm = std::sqrt(norm);
        for (std::size_t c = 0; c < block; ++c)
          signature[c] *= draw_scale / std::max(norm, 1e-12);
      }

      std::vector<std::vector<double>> residuals;
      int attempts = 0;
      while (residuals.size() < K) {
        if (++attempts > 10000)
          throw ConfigError("synth: separation infeasible for given K and C");
        std::vector<double> cand(block, 0.0);
        double mean = 0.0;
        for (std::size_t c = 0; c < block; ++c) {
          cand[c] = rng.uniform(0.0, draw_scale);
          mean += cand[c];
        }
        mean /= double(block);
        double proj = 0.0, sig_norm2 = 0.0;
        for (std::size_t c = 0; c < block; ++c) {
          cand[c] -= mean;
          proj += cand[c] * signature[c];
          sig_norm2 += signature[c] * signature[c];
        }
        if (sig_norm2 > 0.0)
          for (std::size_t c = 0; c < block; ++c)
            cand[c] -= (proj / sig_norm2) * signature[c];
        bool ok = true;
        for (const auto& p : residuals)
          if (std::sqrt(squared_distance(cand.data(), p.data(), block)) < min_dist) {
            ok = false;
            break;
          }
        if (ok) residuals.push_back(std::move(cand));
      }
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < block; ++c)
          planted.prototypes(m, k, m * block + c) = signature[c] + residuals[k][c];
      for (std::size_t a = 0; a < K; ++a)
        for (std::size_t b2 = a + 1; b2 < K; ++b2)
          planted.min_separation = std::min(
              planted.min_separation,
              std::sqrt(squared_distance(residuals[a].data(), residuals[b2].data(),
                                         block)));
    }
    if (K == 1) planted.min_separation = 0.0;
  }

  // Background: fixed signed vector with (near) zero channel sum, so it is
  // suppressible channel-wise without offering a shared bias direction.
  {
    SplitRng rng = root.derive("background");
    planted.background = Tensor({C});
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double sign = (rng.next_u64() & 1) ? 1.0 : -1.0;
      planted.background[c] = cfg.bg_scale * sign * rng.uniform(0.75, 1.25);
      sum += planted.background[c];
    }
    for (std::size_t c = 0; c < C; ++c) planted.background[c] -= sum / double(C);
  }

  const auto dominant = detail::draw_dominant_types(cfg, root.derive("types"));
  planted.q = Tensor({cfg.n_classes, M, K});
  for (std::size_t y = 0; y < cfg.n_classes; ++y)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t k = 0; k < K; ++k)
        planted.q(y, m, k) = (k == dominant[y][m] ? 1.0 - cfg.type_smoothing : 0.0) +
                             cfg.type_smoothing / double(K);

  Dataset ds;
  for (std::size_t y = 0; y < cfg.n_classes; ++y) ds.classes.push_back(int(y));

  const std::size_t n_total = cfg.n_classes * cfg.per_class;
  SplitRng inst_root = root.derive("instance");
  planted.sampled_types.resize(n_total);
  char idbuf[32];
  for (std::size_t y = 0; y < cfg.n_classes; ++y) {
    for (std::size_t j = 0; j < cfg.per_class; ++j) {
      const std::size_t idx = y * cfg.per_class + j;
      SplitRng rng = inst_root.derive(idx);
      Instance inst;
      std::snprintf(idbuf, sizeof(idbuf), "inst_%06zu", idx);
      inst.id = idbuf;
      inst.class_id = int(y);

      std::vector<std::size_t>& ks = planted.sampled_types[idx];
      ks.resize(M);
      Tensor parts({M, C});
      for (std::size_t m = 0; m < M; ++m) {
        const double u = rng.next_double();
        double acc = 0.0;
        std::size_t pick = K - 1;
        for (std::size_t k = 0; k < K; ++k) {
          acc += planted.q(y, m, k);
          if (u < acc) {
            pick = k;
            break;
          }
        }
        ks[m] = pick;
        for (std::size_t c = 0; c < C; ++c)
          parts(m, c) = planted.prototypes(m, pick, c) + cfg.noise * rng.normal();
      }

      if (cfg.emit_feature_maps) {
        Tensor fmap({cfg.height, cfg.width, C});
        for (std::size_t r = 0; r < cfg.height; ++r)
          for (std::size_t col = 0; col < cfg.width; ++col)
            for (std::size_t c = 0; c < C; ++c)
              fmap(r, col, c) = planted.background[c];
        for (std::size_t m = 0; m < M; ++m) {
          const auto& reg = planted.plan.regions[m];
          for (std::size_t r = reg.row_lo; r < reg.row_hi; ++r)
            for (std::size_t col = reg.col_lo; col < reg.col_hi; ++col) {
              const double amp = (r == reg.peak_row && col == reg.peak_col)
                                     ? planted.plan.peak_amplitude
                                     : reg.ring_amplitude;
              for (std::size_t c = 0; c < C; ++c)
                fmap(r, col, c) += amp * parts(m, c);
            }
        }
        inst.feature_map = std::move(fmap);
      } else {
        inst.feature_map = Tensor({1, 1, 1});
      }
      inst.parts = std::move(parts);
      ds.instances.push_back(std::move(inst));
    }
  }

  // Split: first n_seen classes are seen; per seen class the leading
  // train_fraction of instances train, the rest test; unseen classes all test.
  for (std::size_t y = 0; y < cfg.n_classes; ++y) {
    if (y < cfg.n_seen)
      ds.split.seen_classes.insert(int(y));
    else
      ds.split.unseen_classes.insert(int(y));
  }
  const std::size_t n_train_per_class =
      std::max<std::size_t>(1, std::size_t(std::floor(double(cfg.per_class) *
                                                      cfg.train_fraction + 0.5)));
  for (std::size_t y = 0; y < cfg.n_classes; ++y)
    for (std::size_t j = 0; j < cfg.per_class; ++j) {
      const std::size_t idx = y * cfg.per_class + j;
      const std::string& id = ds.instances[idx].id;
      if (y < cfg.n_seen && j < std::min(n_train_per_class, cfg.per_class - 1))
        ds.split.train_instances.insert(id);
      else
        ds.split.test_instances.insert(id);
    }

  // Semantic codebook: flattened q_y (sums to 1), optional uniform noise,
  // optional non-visual padding dimensions.
  {
    SplitRng rng = root.derive("semantic");
    Codebook cb;
    cb.kind = CodebookKind::semantic;
    for (std::size_t y = 0; y < cfg.n_classes; ++y) {
      std::vector<double> s(M * K + cfg.semantic_padding, 0.0);
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < K; ++k)
          s[m * K + k] = planted.q(y, m, k) / double(M);
      if (cfg.semantic_noise > 0.0)
        for (std::size_t i = 0; i < M * K; ++i)
          s[i] += rng.uniform(-cfg.semantic_noise, cfg.semantic_noise);
      for (std::size_t i = 0; i < cfg.semantic_padding; ++i)
        s[M * K + i] = rng.uniform(0.0, 0.5);
      cb.entries[int(y)] = Tensor::vector_of(std::move(s));
    }
    ds.codebook = std::move(cb);
  }

  // Ground-truth visual codebook: class signatures equal q_y.
  {
    Codebook cb;
    cb.kind = CodebookKind::visual_structured;
    for (std::size_t y = 0; y < cfg.n_classes; ++y) {
      Tensor e({M, K});
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < K; ++k) e(m, k) = planted.q(y, m, k);
      cb.entries[int(y)] = std::move(e);
    }
    planted.visual_codebook = std::move(cb);
  }

  ds.validate();
  return {std::move(ds), std::move(planted)};
}

inline nlohmann::json synth_config_json(const SynthConfig& cfg) {
  nlohmann::json j;
  j["channels"] = cfg.channels;
  j["width"] = cfg.width;
  j["height"] = cfg.height;
  j["parts"] = cfg.parts;
  j["types"] = cfg.types;
  j["classes"] = cfg.n_classes;
  j["seen"] = cfg.n_seen;
  j["per_class"] = cfg.per_class;
  j["separation"] = cfg.separation;
  j["noise"] = cfg.noise;
  j["seed"] = cfg.seed;
  j["type_smoothing"] = cfg.type_smoothing;
  j["semantic_noise"] = cfg.semantic_noise;
  j["semantic_padding"] = cfg.semantic_padding;
  j["train_fraction"] = cfg.train_fraction;
  return j;
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig cfg;
  const std::set<std::string> known = {
      "channels", "width", "height", "parts", "types", "classes", "seen",
      "per_class", "separation", "noise", "seed", "type_smoothing",
      "semantic_noise", "semantic_padding", "train_fraction"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("synth config: unknown key '" + it.key() + "'");
  if (j.contains("channels")) cfg.channels = j["channels"].get<std::size_t>();
  if (j.contains("width")) cfg.width = j["width"].get<std::size_t>();
  if (j.contains("height")) cfg.height = j["height"].get<std::size_t>();
  if (j.contains("parts")) cfg.parts = j["parts"].get<std::size_t>();
  if (j.contains("types")) cfg.types = j["types"].get<std::size_t>();
  if (j.contains("classes")) cfg.n_classes = j["classes"].get<std::size_t>();
  if (j.contains("seen")) cfg.n_seen = j["seen"].get<std::size_t>();
  if (j.contains("per_class")) cfg.per_class = j["per_class"].get<std::size_t>();
  if (j.contains("separation")) cfg.separation = j["separation"].get<double>();
  if (j.contains("noise")) cfg.noise = j["noise"].get<double>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("type_smoothing")) cfg.type_smoothing = j["type_smoothing"].get<double>();
  if (j.contains("semantic_noise")) cfg.semantic_noise = j["semantic_noise"].get<double>();
  if (j.contains("semantic_padding"))
    cfg.semantic_padding = j["semantic_padding"].get<std::size_t>();
  if (j.contains("train_fraction")) cfg.train_fraction = j["train_fraction"].get<double>();
  return cfg;
}

// Writes the generated dataset plus planted ground truth to a directory.
inline void write_synthetic_dataset(const Dataset& ds, const PlantedModel& planted,
                                    const SynthConfig& cfg,
                                    const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "features");
  fs::create_directories(dir / "parts");

  std::map<std::string, int> labels;
  for (const Instance& inst : ds.instances) {
    labels[inst.id] = inst.class_id;
    write_tensor_file(inst.feature_map, dir / "features" / (inst.id + ".vsef"));
    if (inst.parts)
      write_tensor_file(*inst.parts, dir / "parts" / (inst.id + ".vsef"));
  }
  write_labels_csv(labels, dir / "labels.csv");
  write_split_json(ds.split, dir / "split.json");
  write_semantic_codebook_csv(ds.codebook, dir / "codebook_semantic.csv");
  write_visual_codebook_vsef(planted.visual_codebook, dir / "codebook_visual.vsef");

  write_tensor_file(planted.prototypes, dir / "planted.vsef");
  write_tensor_file(planted.q, dir / "planted_q.vsef");
  {
    Tensor types({ds.instances.size(), cfg.parts});
    for (std::size_t i = 0; i < planted.sampled_types.size(); ++i)
      for (std::size_t m = 0; m < cfg.parts; ++m)
        types(i, m) = double(planted.sampled_types[i][m]);
    write_tensor_file(types, dir / "planted_types.vsef");
  }

  nlohmann::json manifest;
  manifest["config"] = synth_config_json(cfg);
  manifest["gamma"] = planted.gamma;
  manifest["separation_required"] = cfg.separation * cfg.noise;
  manifest["separation_achieved"] = planted.min_separation;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << "\n";
}

}  // namespace vsemb
