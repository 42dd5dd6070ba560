#include <catch2/catch_amalgamated.hpp>

#include "test_support.hpp"
#include "vsemb/evaluator.hpp"
#include "vsemb/oracle.hpp"
#include "vsemb/synthetic.hpp"

using namespace vsemb;
using Catch::Approx;

TEST_CASE("per-class top-1 accuracy", "[evaluator]") {
  SECTION("all correct") {
    CHECK(per_class_top1({0, 1, 1}, {0, 1, 1}, {0, 1}) == 100.0);
  }
  SECTION("class-averaged, not instance-averaged") {
    // Class 0 has 10 instances all correct, class 1 has 90 all wrong.
    std::vector<int> labels, preds;
    for (int i = 0; i < 10; ++i) {
      labels.push_back(0);
      preds.push_back(0);
    }
    for (int i = 0; i < 90; ++i) {
      labels.push_back(1);
      preds.push_back(0);
    }
    CHECK(per_class_top1(preds, labels, {0, 1}) == Approx(50.0));
  }
  SECTION("random predictions over four balanced classes") {
    SplitRng rng(31);
    std::vector<int> labels, preds;
    for (int i = 0; i < 1000; ++i) {
      labels.push_back(i % 4);
      preds.push_back(int(rng.next_index(4)));
    }
    const double acc = per_class_top1(preds, labels, {0, 1, 2, 3});
    CHECK(acc > 20.0);
    CHECK(acc < 30.0);
  }
  SECTION("a class without test instances is an error") {
    CHECK_THROWS_AS(per_class_top1({0}, {0}, {0, 1}), EvalError);
  }
}

TEST_CASE("harmonic mean reproduces the reported tables", "[evaluator]") {
  CHECK(harmonic_mean(39.5, 68.9) == Approx(50.2).margin(0.05));
  CHECK(harmonic_mean(0.0, 45.7) == 0.0);
  CHECK(harmonic_mean(33.3, 33.3) == Approx(33.3).margin(1e-9));
  CHECK_THROWS_AS(harmonic_mean(-1.0, 5.0), EvalError);

  SECTION("bounded by min, max, and the arithmetic mean") {
    SplitRng rng(32);
    for (int trial = 0; trial < 100; ++trial) {
      const double a = 100.0 * rng.next_double();
      const double b = 100.0 * rng.next_double();
      const double h = harmonic_mean(a, b);
      CHECK(h >= 0.0);
      CHECK(h <= std::max(a, b) + 1e-12);
      CHECK(h <= (a + b) / 2.0 + 1e-12);
      if (a > 0 && b > 0) CHECK(h >= std::min(a, b) - 1e-12);
    }
  }
}

TEST_CASE("evaluate runs the full protocol", "[evaluator]") {
  SynthConfig cfg = testsup::small_synth_config();
  cfg.noise = 0.0;
  auto [ds, planted] = generate_synthetic(cfg);

  OracleConfig ocfg;
  ocfg.parts = cfg.parts;
  ocfg.types = cfg.types;
  ocfg.seed = 77;
  ocfg.use_raw_parts = false;
  ocfg.permute_channels = false;
  ocfg.epochs = 40;
  const VisualOracle oracle = build_oracle(ds, ocfg);
  const Codebook cb = oracle_codebook(oracle, ds, ds.classes);

  // Oracle-as-learner: a checkpoint wearing the oracle's own models must be
  // perfectly consistent with the oracle's codebook on noiseless data.
  Checkpoint ck;
  ck.config.mode = TrainMode::visual;
  ck.config.parts = cfg.parts;
  ck.config.types = cfg.types;
  ck.grouping = oracle.grouping;
  ck.mixture = oracle.mixture;

  SECTION("GZSL reaches a perfect score on planted noiseless data") {
    const EvalReport rep = evaluate(ck, ds, cb, EvalSetting::gzsl);
    CHECK(rep.ts == Approx(100.0));
    CHECK(rep.tr == Approx(100.0));
    CHECK(rep.H == Approx(100.0));
    CHECK(rep.n_evaluated == ds.test_indices().size());
  }
  SECTION("ZSL restricts candidates and scoring to unseen classes") {
    const EvalReport rep = evaluate(ck, ds, cb, EvalSetting::zsl);
    std::size_t unseen_tests = 0;
    for (std::size_t i : ds.test_indices())
      if (ds.split.unseen_classes.count(ds.instances[i].class_id)) ++unseen_tests;
    CHECK(rep.n_evaluated == unseen_tests);
    CHECK(rep.tr == 0.0);
    CHECK(rep.H == 0.0);
    CHECK(rep.ts == Approx(100.0));
    for (const auto& [cls, acc] : rep.per_class)
      CHECK(ds.split.unseen_classes.count(cls) == 1);
  }
  SECTION("codebook gaps are reported with the missing classes") {
    Codebook partial = cb;
    partial.entries.erase(0);
    partial.entries.erase(2);
    CHECK_THROWS_WITH(evaluate(ck, ds, partial, EvalSetting::gzsl),
                      Catch::Matchers::ContainsSubstring("missing classes: 0 2"));
  }
  SECTION("a semantic codebook cannot score a visual checkpoint") {
    CHECK_THROWS_AS(evaluate(ck, ds, ds.codebook, EvalSetting::gzsl), EvalError);
  }
  SECTION("threaded evaluation matches single-threaded exactly") {
    const EvalReport one = evaluate(ck, ds, cb, EvalSetting::gzsl, 1);
    const EvalReport four = evaluate(ck, ds, cb, EvalSetting::gzsl, 4);
    CHECK(one.ts == four.ts);
    CHECK(one.tr == four.tr);
    CHECK(one.per_class == four.per_class);
  }
}

TEST_CASE("reports serialize to the documented CSV schema", "[evaluator]") {
  EvalReport rep;
  rep.setting = EvalSetting::gzsl;
  rep.split_id = "default";
  rep.ts = 39.5;
  rep.tr = 68.9;
  rep.H = harmonic_mean(39.5, 68.9);
  rep.n_evaluated = 220;
  const std::string csv = report_csv(rep);
  CHECK(csv.rfind("setting,split,ts,tr,H,n\n", 0) == 0);
  CHECK(csv.find("gzsl,default,39.5,68.9") != std::string::npos);
  CHECK(csv.find(",220\n") != std::string::npos);

  const std::string table = report_table(rep);
  CHECK(table.find("gzsl") != std::string::npos);
  CHECK(table.find("50.2") != std::string::npos);
}
