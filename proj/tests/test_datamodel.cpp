#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "test_support.hpp"
#include "vsemb/dataset.hpp"
#include "vsemb/synthetic.hpp"

using namespace vsemb;
using Catch::Approx;

TEST_CASE("default synthetic dataset satisfies all invariants", "[datamodel]") {
  SynthConfig cfg;
  auto [ds, planted] = generate_synthetic(cfg);
  REQUIRE_NOTHROW(ds.validate());

  const auto counts = class_partition_counts(ds);
  CHECK(counts.n_classes == 14);
  CHECK(counts.n_seen == 10);
  CHECK(counts.n_unseen == 4);
  CHECK(counts.n_images == 420);

  SECTION("planted q rows sum to 1") {
    for (std::size_t y = 0; y < cfg.n_classes; ++y)
      for (std::size_t m = 0; m < cfg.parts; ++m) {
        double s = 0.0;
        for (std::size_t k = 0; k < cfg.types; ++k) s += planted.q(y, m, k);
        CHECK(s == Approx(1.0).margin(1e-12));
      }
  }
  SECTION("prototype separation is recorded and honored") {
    CHECK(planted.min_separation >= cfg.separation * cfg.noise);
  }
  SECTION("every instance has a raw part matrix") {
    for (const Instance& inst : ds.instances) {
      REQUIRE(inst.parts.has_value());
      CHECK(inst.parts->dim(0) == cfg.parts);
      CHECK(inst.parts->dim(1) == cfg.channels);
    }
  }
}

TEST_CASE("generation is deterministic given the seed", "[datamodel]") {
  SynthConfig cfg = testsup::small_synth_config(7);
  auto [a, pa] = generate_synthetic(cfg);
  auto [b, pb] = generate_synthetic(cfg);
  REQUIRE(a.instances.size() == b.instances.size());
  for (std::size_t i = 0; i < a.instances.size(); ++i) {
    CHECK(a.instances[i].id == b.instances[i].id);
    CHECK(a.instances[i].feature_map.values() == b.instances[i].feature_map.values());
    CHECK(a.instances[i].parts->values() == b.instances[i].parts->values());
  }
  CHECK(pa.prototypes.values() == pb.prototypes.values());

  SynthConfig other = cfg;
  other.seed = 8;
  auto [c, pc] = generate_synthetic(other);
  CHECK(pa.prototypes.values() != pc.prototypes.values());
}

TEST_CASE("zero noise plants exact prototypes", "[datamodel]") {
  SynthConfig cfg = testsup::small_synth_config();
  cfg.noise = 0.0;
  auto [ds, planted] = generate_synthetic(cfg);
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    const Tensor& parts = *ds.instances[i].parts;
    for (std::size_t m = 0; m < cfg.parts; ++m) {
      const std::size_t k = planted.sampled_types[i][m];
      for (std::size_t c = 0; c < cfg.channels; ++c)
        CHECK(parts(m, c) == planted.prototypes(m, k, c));
    }
  }
}

TEST_CASE("nearest planted prototype identifies the generating type", "[datamodel]") {
  SynthConfig cfg;  // separation 10, noise 1
  auto [ds, planted] = generate_synthetic(cfg);
  std::size_t good = 0, total = 0;
  for (std::size_t i = 0; i < ds.instances.size(); ++i)
    for (std::size_t m = 0; m < cfg.parts; ++m) {
      double best = 1e300;
      std::size_t best_k = 0;
      for (std::size_t k = 0; k < cfg.types; ++k) {
        const double d = squared_distance(&(*ds.instances[i].parts)(m, 0),
                                          &planted.prototypes(m, k, 0),
                                          cfg.channels);
        if (d < best) {
          best = d;
          best_k = k;
        }
      }
      total += 1;
      good += best_k == planted.sampled_types[i][m] ? 1 : 0;
    }
  CHECK(double(good) / double(total) > 0.999);
}

TEST_CASE("written dataset loads back with zero validation errors", "[datamodel]") {
  testsup::TempDir dir("ds");
  SynthConfig cfg = testsup::small_synth_config();
  auto [ds, planted] = generate_synthetic(cfg);
  write_synthetic_dataset(ds, planted, cfg, dir.path());

  const Dataset loaded = load_dataset(dir.path());
  CHECK(loaded.instances.size() == ds.instances.size());
  CHECK(loaded.split.seen_classes == ds.split.seen_classes);
  CHECK(loaded.split.train_instances == ds.split.train_instances);
  CHECK(loaded.codebook.kind == CodebookKind::semantic);

  // Values survive the f32 storage round trip.
  for (std::size_t i = 0; i < ds.instances.size(); ++i)
    for (std::size_t j = 0; j < ds.instances[i].feature_map.numel(); ++j)
      CHECK(loaded.instances[i].feature_map[j] ==
            double(float(ds.instances[i].feature_map[j])));

  SECTION("ground-truth visual codebook loads too") {
    const Codebook vis = read_visual_codebook_vsef(dir.path() / "codebook_visual.vsef");
    CHECK(vis.kind == CodebookKind::visual_structured);
    CHECK(vis.entries.size() == cfg.n_classes);
  }
}

TEST_CASE("benchmark-shaped metadata is accepted", "[datamodel]") {
  SECTION("CUB-shaped dataset: 200 classes, 150 seen, 312-dim codebook") {
    testsup::TempDir dir("cub");
    namespace fs = std::filesystem;
    fs::create_directories(dir.path() / "features");
    std::map<std::string, int> labels;
    SplitSpec split;
    Codebook cb;
    cb.kind = CodebookKind::semantic;
    SplitRng rng(2);
    Tensor tiny({1, 1, 2}, std::vector<double>{0.5, 1.0});
    for (int y = 0; y < 200; ++y) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "img_%03d", y);
      labels[buf] = y;
      write_tensor_file(tiny, dir.path() / "features" / (std::string(buf) + ".vsef"));
      if (y < 150) {
        split.seen_classes.insert(y);
        split.train_instances.insert(buf);
      } else {
        split.unseen_classes.insert(y);
        split.test_instances.insert(buf);
      }
      std::vector<double> attrs(312);
      for (double& a : attrs) a = rng.next_double();
      cb.entries[y] = Tensor::vector_of(std::move(attrs));
    }
    write_labels_csv(labels, dir.path() / "labels.csv");
    write_split_json(split, dir.path() / "split.json");
    write_semantic_codebook_csv(cb, dir.path() / "codebook_semantic.csv");

    const Dataset ds = load_dataset(dir.path());
    const auto counts = class_partition_counts(ds);
    CHECK(counts.n_classes == 200);
    CHECK(counts.n_seen == 150);
    CHECK(counts.n_unseen == 50);
    CHECK(ds.codebook.entries.begin()->second.numel() == 312);
  }

  SECTION("aPY- and AWA2-shaped partition counts") {
    auto shape_counts = [](int n_classes, int n_seen, std::size_t n_images) {
      Dataset ds;
      for (int y = 0; y < n_classes; ++y) ds.classes.push_back(y);
      ds.instances.resize(n_images);
      Codebook cb;
      cb.kind = CodebookKind::semantic;
      for (int y = 0; y < n_classes; ++y)
        cb.entries[y] = Tensor::vector_of({double(y)});
      ds.codebook = std::move(cb);
      for (int y = 0; y < n_classes; ++y)
        (y < n_seen ? ds.split.seen_classes : ds.split.unseen_classes).insert(y);
      return class_partition_counts(ds);
    };
    const auto apy = shape_counts(32, 20, 15339);
    CHECK(apy.n_classes == 32);
    CHECK(apy.n_seen == 20);
    CHECK(apy.n_unseen == 12);
    CHECK(apy.n_images == 15339);
    const auto awa2 = shape_counts(50, 40, 37322);
    CHECK(awa2.n_classes == 50);
    CHECK(awa2.n_seen == 40);
    CHECK(awa2.n_unseen == 10);
    CHECK(awa2.n_images == 37322);
  }
}

TEST_CASE("invalid datasets are rejected at load time", "[datamodel]") {
  testsup::TempDir dir("bad");
  SynthConfig cfg = testsup::small_synth_config();
  auto [ds, planted] = generate_synthetic(cfg);
  write_synthetic_dataset(ds, planted, cfg, dir.path());

  SECTION("train instance labeled with an unseen class") {
    SplitSpec split = read_split_json(dir.path() / "split.json");
    // Move one unseen-class test instance into the train set.
    std::string victim;
    for (const Instance& inst : ds.instances)
      if (ds.split.unseen_classes.count(inst.class_id)) {
        victim = inst.id;
        break;
      }
    REQUIRE_FALSE(victim.empty());
    split.train_instances.insert(victim);
    write_split_json(split, dir.path() / "split.json");
    CHECK_THROWS_WITH(load_dataset(dir.path()),
                      Catch::Matchers::ContainsSubstring("unseen class"));
  }
  SECTION("missing feature file") {
    std::filesystem::remove(dir.path() / "features" /
                            (ds.instances.front().id + ".vsef"));
    CHECK_THROWS_WITH(load_dataset(dir.path()),
                      Catch::Matchers::ContainsSubstring("missing feature file"));
  }
  SECTION("missing codebook") {
    std::filesystem::remove(dir.path() / "codebook_semantic.csv");
    std::filesystem::remove(dir.path() / "codebook_visual.vsef");
    CHECK_THROWS_WITH(load_dataset(dir.path()),
                      Catch::Matchers::ContainsSubstring("codebook"));
  }
  SECTION("shape mismatch across feature maps") {
    write_tensor_file(Tensor({1, 1, 1}, std::vector<double>{1.0}),
                      dir.path() / "features" / (ds.instances.front().id + ".vsef"));
    std::filesystem::remove_all(dir.path() / "parts");
    CHECK_THROWS_WITH(load_dataset(dir.path()),
                      Catch::Matchers::ContainsSubstring("shape mismatch"));
  }
}

TEST_CASE("codebook invariants", "[datamodel]") {
  SECTION("structured visual rows must be stochastic") {
    Codebook cb;
    cb.kind = CodebookKind::visual_structured;
    cb.entries[0] = Tensor({2, 2}, std::vector<double>{0.7, 0.3, 0.9, 0.2});
    CHECK_THROWS_AS(cb.validate(), ConfigError);
    cb.entries[0] = Tensor({2, 2}, std::vector<double>{0.7, 0.3, 0.8, 0.2});
    CHECK_NOTHROW(cb.validate());
  }
  SECTION("flat visual entries must sum to one") {
    Codebook cb;
    cb.kind = CodebookKind::visual_flat;
    cb.entries[0] = Tensor::vector_of({0.25, 0.25, 0.25, 0.5});
    CHECK_THROWS_AS(cb.validate(), ConfigError);
  }
  SECTION("semantic entries must be finite") {
    Codebook cb;
    cb.kind = CodebookKind::semantic;
    cb.entries[0] = Tensor::vector_of({1.0, 2.0});
    cb.entries[0][1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(cb.validate(), ConfigError);
  }
}

TEST_CASE("infeasible separation is reported", "[datamodel]") {
  SynthConfig cfg = testsup::small_synth_config();
  cfg.channels = 4;  // one channel per part: zero-sum residuals collapse
  cfg.types = 3;
  cfg.n_seen = 4;
  CHECK_THROWS_WITH(generate_synthetic(cfg),
                    Catch::Matchers::ContainsSubstring("infeasible"));
}

TEST_CASE("synthetic config rejects bad shapes", "[datamodel]") {
  SynthConfig cfg;
  cfg.n_seen = 5;
  cfg.n_classes = 5;
  CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
  cfg = SynthConfig{};
  cfg.separation = 0.0;
  CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
  cfg = SynthConfig{};
  cfg.parts = 5;
  CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
}
