#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "test_support.hpp"
#include "vsemb/alignment.hpp"
#include "vsemb/mixture.hpp"
#include "vsemb/synthetic.hpp"

using namespace vsemb;
using Catch::Approx;

namespace {

PartMixture two_component_1d(double theta0, double theta1, double variance = 1.0) {
  PartMixture mix;
  mix.prototypes = Tensor({2, 1}, std::vector<double>{theta0, theta1});
  mix.priors = {0.5, 0.5};
  mix.variance = variance;
  return mix;
}

// Per-part matrix of raw planted features over an index set.
Tensor part_matrix(const Dataset& ds, const std::vector<std::size_t>& idx,
                   std::size_t m) {
  const std::size_t c = ds.instances.front().parts->dim(1);
  Tensor out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < c; ++j)
      out(i, j) = (*ds.instances[idx[i]].parts)(m, j);
  return out;
}

}  // namespace

TEST_CASE("mixture_nll", "[mixture]") {
  SECTION("single component at its mean") {
    PartMixture mix;
    mix.prototypes = Tensor({1, 1}, std::vector<double>{0.0});
    mix.priors = {1.0};
    mix.variance = 1.0;
    CHECK(mixture_nll(mix, std::vector<double>{0.0}) ==
          Approx(0.9189385332046727).epsilon(1e-12));
  }
  SECTION("duplicating a component with split priors changes nothing") {
    PartMixture one;
    one.prototypes = Tensor({1, 2}, std::vector<double>{0.5, -1.0});
    one.priors = {1.0};
    one.variance = 0.7;
    PartMixture two;
    two.prototypes =
        Tensor({2, 2}, std::vector<double>{0.5, -1.0, 0.5, -1.0});
    two.priors = {0.6, 0.4};
    two.variance = 0.7;
    const std::vector<double> f{0.2, 0.3};
    CHECK(mixture_nll(one, f) == Approx(mixture_nll(two, f)).epsilon(1e-12));
  }
  SECTION("matches a naive direct-summation oracle") {
    SplitRng rng(3);
    PartMixture mix;
    mix.prototypes = Tensor({3, 2});
    for (double& v : mix.prototypes.values()) v = rng.normal();
    mix.priors = {0.2, 0.5, 0.3};
    mix.variance = 1.3;
    const std::vector<double> f{0.4, -0.2};
    double direct = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double quad =
          squared_distance(f.data(), &mix.prototypes(k, 0), 2);
      direct += mix.priors[k] * std::exp(-quad / (2.0 * mix.variance)) /
                (kTwoPi * mix.variance);
    }
    CHECK(mixture_nll(mix, f) == Approx(-std::log(direct)).margin(1e-10));
  }
  SECTION("all-zero priors are an error") {
    PartMixture mix;
    mix.prototypes = Tensor({2, 1}, std::vector<double>{0.0, 1.0});
    mix.priors = {0.0, 0.0};
    mix.variance = 1.0;
    CHECK_THROWS_AS(mixture_nll(mix, std::vector<double>{0.0}), ConfigError);
  }
}

TEST_CASE("em_fit closed form for K=1", "[mixture]") {
  Tensor data({4, 2}, std::vector<double>{1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0});
  const EmResult res = em_fit(data, 1, 42);
  CHECK(res.mixture.prototypes(0, 0) == Approx(4.0));
  CHECK(res.mixture.prototypes(0, 1) == Approx(5.0));
  double ssd = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    ssd += squared_distance(&data(i, 0), &res.mixture.prototypes(0, 0), 2);
  CHECK(res.mixture.variance == Approx(ssd / (4.0 * 2.0)));
  CHECK(res.trace.nll.size() <= 3);
  CHECK(res.trace.converged);
}

TEST_CASE("em_fit recovers the planted mixture", "[mixture]") {
  SynthConfig cfg;  // default: separation 10, noise 1
  auto [ds, planted] = generate_synthetic(cfg);
  const auto tidx = ds.train_indices();

  for (std::size_t m = 0; m < cfg.parts; ++m) {
    const Tensor data = part_matrix(ds, tidx, m);
    const EmResult res = em_fit(data, cfg.types, 42);

    SECTION("trace is monotone and capped (part " + std::to_string(m) + ")") {
      CHECK(res.trace.nll.size() <= 300);
      for (std::size_t s = 1; s < res.trace.nll.size(); ++s)
        CHECK(res.trace.nll[s] <= res.trace.nll[s - 1] + 1e-9);
    }

    // Greedy-free matching: assign each planted prototype its nearest
    // recovered one, require a permutation.
    std::vector<double> cost(cfg.types * cfg.types);
    for (std::size_t a = 0; a < cfg.types; ++a)
      for (std::size_t b = 0; b < cfg.types; ++b)
        cost[a * cfg.types + b] = squared_distance(
            &planted.prototypes(m, a, 0), &res.mixture.prototypes(b, 0),
            cfg.channels);
    const auto match = hungarian_min_assignment(cost, cfg.types);
    std::set<std::size_t> used(match.begin(), match.end());
    CHECK(used.size() == cfg.types);

    // Sample-mean estimation error at n~300 per part; the fine-grained
    // 0.1*gamma bound needs far more data and lives in the acceptance suite.
    const double bound =
        5.0 * cfg.noise * std::sqrt(double(cfg.channels) * cfg.types /
                                    double(tidx.size()));
    std::map<std::size_t, std::size_t> freq;
    for (std::size_t i : tidx) freq[planted.sampled_types[i][m]] += 1;
    for (std::size_t a = 0; a < cfg.types; ++a) {
      CHECK(std::sqrt(cost[a * cfg.types + match[a]]) < bound);
      const double true_prior = double(freq[a]) / double(tidx.size());
      CHECK(res.mixture.priors[match[a]] == Approx(true_prior).margin(0.05));
    }
    CHECK(res.mixture.variance ==
          Approx(cfg.noise * cfg.noise).epsilon(0.25));
  }
}

TEST_CASE("em_fit is deterministic and seed-sensitive", "[mixture]") {
  SynthConfig cfg = testsup::small_synth_config();
  auto [ds, planted] = generate_synthetic(cfg);
  const Tensor data = part_matrix(ds, ds.train_indices(), 0);
  const EmResult a = em_fit(data, cfg.types, 9);
  const EmResult b = em_fit(data, cfg.types, 9);
  CHECK(a.mixture.prototypes.values() == b.mixture.prototypes.values());
  CHECK(a.trace.nll == b.trace.nll);
}

TEST_CASE("em_fit input validation", "[mixture]") {
  Tensor tiny({2, 2}, std::vector<double>{0, 1, 2, 3});
  CHECK_THROWS_AS(em_fit(tiny, 3, 1), ConfigError);
  tiny(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(em_fit(tiny, 2, 1), ConfigError);
}

TEST_CASE("em_fit re-seeds emptied components and records it", "[mixture]") {
  // Two far clusters plus one prototype started far outside any data: its
  // responsibilities underflow and it must be re-seeded.
  Tensor data({40, 1});
  for (std::size_t i = 0; i < 40; ++i)
    data(i, 0) = (i < 20 ? 0.0 : 1000.0) + 0.001 * double(i % 20);
  PartMixture warm;
  warm.prototypes = Tensor({3, 1}, std::vector<double>{0.0, 1000.0, 1.0e7});
  warm.priors = {0.4, 0.4, 0.2};
  warm.variance = 1.0;
  const EmResult res = em_fit(data, 3, 1, 300, 1e-9, &warm);
  CHECK_FALSE(res.trace.reseeds.empty());
  for (std::size_t k = 0; k < 3; ++k)
    CHECK(res.mixture.prototypes(k, 0) < 2000.0);
}

TEST_CASE("infer_pi posterior rows", "[mixture]") {
  SECTION("single component gives a certain row") {
    MixtureModel model;
    PartMixture mix;
    mix.prototypes = Tensor({1, 1}, std::vector<double>{3.0});
    mix.priors = {1.0};
    mix.variance = 2.0;
    model.parts = {mix};
    const PiEmbedding pi = infer_pi(model, Tensor({1, 1}, std::vector<double>{9.0}));
    CHECK(pi.pi(0, 0) == 1.0);
  }
  SECTION("equidistant features split evenly") {
    MixtureModel model;
    model.parts = {two_component_1d(-1.0, 1.0)};
    const PiEmbedding pi = infer_pi(model, Tensor({1, 1}, std::vector<double>{0.0}));
    CHECK(pi.pi(0, 0) == Approx(0.5).margin(1e-12));
    CHECK(pi.pi(0, 1) == Approx(0.5).margin(1e-12));
  }
  SECTION("hand-evaluated posterior") {
    MixtureModel model;
    model.parts = {two_component_1d(0.0, 2.0)};
    const PiEmbedding pi = infer_pi(model, Tensor({1, 1}, std::vector<double>{0.0}));
    CHECK(pi.pi(0, 0) == Approx(0.8807970779778823).epsilon(1e-9));
    CHECK(pi.pi(0, 1) == Approx(0.11920292202211755).epsilon(1e-9));
  }
  SECTION("rows are nonnegative and sum to one for random inputs") {
    SplitRng rng(12);
    MixtureModel model;
    for (std::size_t m = 0; m < 2; ++m) {
      PartMixture mix;
      mix.source_part = m;
      mix.prototypes = Tensor({4, 3});
      for (double& v : mix.prototypes.values()) v = 3.0 * rng.normal();
      mix.priors = {0.1, 0.2, 0.3, 0.4};
      mix.variance = 0.5 + rng.next_double();
      model.parts.push_back(std::move(mix));
    }
    for (int trial = 0; trial < 200; ++trial) {
      Tensor f({2, 3});
      for (double& v : f.values()) v = 5.0 * rng.normal();
      const PiEmbedding pi = infer_pi(model, f);
      for (std::size_t m = 0; m < 2; ++m) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
          CHECK(pi.pi(m, k) >= 0.0);
          s += pi.pi(m, k);
        }
        CHECK(s == Approx(1.0).margin(1e-6));
      }
    }
  }
  SECTION("invariant to rescaling all priors") {
    MixtureModel a, b;
    a.parts = {two_component_1d(0.0, 2.0)};
    b.parts = {two_component_1d(0.0, 2.0)};
    b.parts[0].priors = {2.5, 2.5};  // unnormalized on purpose
    const Tensor f({1, 1}, std::vector<double>{0.7});
    const PiEmbedding pa = infer_pi(a, f);
    const PiEmbedding pb = infer_pi(b, f);
    CHECK(pa.pi(0, 0) == Approx(pb.pi(0, 0)).margin(1e-12));
  }
  SECTION("degenerate variance falls back to a flagged uniform row") {
    MixtureModel model;
    model.parts = {two_component_1d(0.0, 2.0, 1e-320)};
    const PiEmbedding pi = infer_pi(model, Tensor({1, 1}, std::vector<double>{1.0e3}));
    CHECK(pi.degenerate);
    CHECK(pi.pi(0, 0) == Approx(0.5));
  }
  SECTION("noiseless planted features recover their generating type") {
    SynthConfig cfg = testsup::small_synth_config();
    cfg.noise = 0.0;
    auto [ds, planted] = generate_synthetic(cfg);
    MixtureModel model;
    for (std::size_t m = 0; m < cfg.parts; ++m) {
      PartMixture mix;
      mix.source_part = m;
      mix.prototypes = Tensor({cfg.types, cfg.channels});
      for (std::size_t k = 0; k < cfg.types; ++k)
        for (std::size_t c = 0; c < cfg.channels; ++c)
          mix.prototypes(k, c) = planted.prototypes(m, k, c);
      mix.priors.assign(cfg.types, 1.0 / double(cfg.types));
      mix.variance = 1.0;
      model.parts.push_back(std::move(mix));
    }
    for (std::size_t i = 0; i < ds.instances.size(); ++i) {
      const PiEmbedding pi = infer_pi(model, *ds.instances[i].parts);
      for (std::size_t m = 0; m < cfg.parts; ++m) {
        std::size_t argmax = 0;
        for (std::size_t k = 1; k < cfg.types; ++k)
          if (pi.pi(m, k) > pi.pi(m, argmax)) argmax = k;
        CHECK(argmax == planted.sampled_types[i][m]);
      }
    }
  }
}

TEST_CASE("infer_pi_nnls", "[mixture]") {
  SECTION("noiseless factorization is recovered") {
    SplitRng rng(13);
    MixtureModel model;
    PartMixture mix;
    mix.prototypes = Tensor({3, 6});
    for (double& v : mix.prototypes.values()) v = rng.normal();
    mix.priors = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    mix.variance = 1.0;
    model.parts = {mix};

    const std::vector<double> truth{0.2, 0.5, 0.3};
    Tensor f({1, 6});
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t k = 0; k < 3; ++k)
        f(0, c) += truth[k] * mix.prototypes(k, c);

    const PiEmbedding pi = infer_pi_nnls(model, f);
    CHECK(pi.converged);
    for (std::size_t k = 0; k < 3; ++k)
      CHECK(pi.pi(0, k) == Approx(truth[k]).margin(1e-4));
  }
  SECTION("an exact prototype yields a one-hot row") {
    SplitRng rng(14);
    MixtureModel model;
    PartMixture mix;
    mix.prototypes = Tensor({3, 8});
    for (double& v : mix.prototypes.values()) v = rng.normal();
    mix.priors = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    mix.variance = 1.0;
    model.parts = {mix};
    Tensor f({1, 8});
    for (std::size_t c = 0; c < 8; ++c) f(0, c) = mix.prototypes(1, c);
    const PiEmbedding pi = infer_pi_nnls(model, f);
    CHECK(pi.pi(0, 1) == Approx(1.0).margin(1e-6));
  }
  SECTION("a feature orthogonal to every prototype falls back to uniform") {
    MixtureModel model;
    PartMixture mix;
    mix.prototypes = Tensor({2, 3}, std::vector<double>{1, 0, 0, 0, 1, 0});
    mix.priors = {0.5, 0.5};
    mix.variance = 1.0;
    model.parts = {mix};
    const PiEmbedding pi =
        infer_pi_nnls(model, Tensor({1, 3}, std::vector<double>{0, 0, 5}));
    CHECK(pi.degenerate);
    CHECK(pi.pi(0, 0) == Approx(0.5));
  }
}

TEST_CASE("class_average_pi", "[mixture]") {
  auto row = [](std::vector<double> v) {
    PiEmbedding pi;
    pi.pi = Tensor({1, 2}, std::move(v));
    return pi;
  };
  SECTION("a single instance is its own signature") {
    std::map<int, std::vector<PiEmbedding>> groups;
    groups[3] = {row({0.25, 0.75})};
    const Codebook cb = class_average_pi(groups);
    CHECK(cb.at(3)(0, 0) == 0.25);
  }
  SECTION("two one-hot rows average to a half split") {
    std::map<int, std::vector<PiEmbedding>> groups;
    groups[0] = {row({1.0, 0.0}), row({0.0, 1.0})};
    const Codebook cb = class_average_pi(groups);
    CHECK(cb.at(0)(0, 0) == Approx(0.5));
    CHECK(cb.at(0)(0, 1) == Approx(0.5));
  }
  SECTION("zero-noise class signatures match the planted distributions") {
    SynthConfig cfg = testsup::small_synth_config();
    cfg.noise = 0.0;
    auto [ds, planted] = generate_synthetic(cfg);
    MixtureModel model;
    for (std::size_t m = 0; m < cfg.parts; ++m) {
      PartMixture mix;
      mix.source_part = m;
      mix.prototypes = Tensor({cfg.types, cfg.channels});
      for (std::size_t k = 0; k < cfg.types; ++k)
        for (std::size_t c = 0; c < cfg.channels; ++c)
          mix.prototypes(k, c) = planted.prototypes(m, k, c);
      mix.priors.assign(cfg.types, 1.0 / double(cfg.types));
      mix.variance = 0.01;  // sharp posteriors at zero planted noise
      model.parts.push_back(std::move(mix));
    }
    std::map<int, std::vector<PiEmbedding>> groups;
    for (const Instance& inst : ds.instances)
      groups[inst.class_id].push_back(infer_pi(model, *inst.parts));
    const Codebook cb = class_average_pi(groups);
    for (std::size_t y = 0; y < cfg.n_classes; ++y)
      for (std::size_t m = 0; m < cfg.parts; ++m)
        for (std::size_t k = 0; k < cfg.types; ++k)
          CHECK(cb.at(int(y))(m, k) == Approx(planted.q(y, m, k)).margin(0.02));
  }
  SECTION("empty class is an error") {
    std::map<int, std::vector<PiEmbedding>> groups;
    groups[1] = {};
    CHECK_THROWS_AS(class_average_pi(groups), ConfigError);
  }
}

TEST_CASE("flatten_pi", "[mixture]") {
  SECTION("single part divides by one") {
    PiEmbedding pi;
    pi.pi = Tensor({1, 3}, std::vector<double>{0.2, 0.3, 0.5});
    const PiEmbedding flat = flatten_pi(pi);
    CHECK(flat.flat);
    CHECK(flat.pi.values() == std::vector<double>{0.2, 0.3, 0.5});
  }
  SECTION("two one-hot rows") {
    PiEmbedding pi;
    pi.pi = Tensor({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
    const PiEmbedding flat = flatten_pi(pi);
    CHECK(flat.pi.values() == std::vector<double>{0.5, 0.0, 0.0, 0.5});
  }
  SECTION("always sums to one") {
    SplitRng rng(15);
    for (int trial = 0; trial < 50; ++trial) {
      PiEmbedding pi;
      pi.pi = Tensor({3, 4});
      for (std::size_t m = 0; m < 3; ++m) {
        double s = 0.0;
        std::vector<double> raw(4);
        for (double& v : raw) {
          v = rng.next_double();
          s += v;
        }
        for (std::size_t k = 0; k < 4; ++k) pi.pi(m, k) = raw[k] / s;
      }
      const PiEmbedding flat = flatten_pi(pi);
      double total = 0.0;
      for (double v : flat.pi.values()) total += v;
      CHECK(total == Approx(1.0).margin(1e-9));
    }
  }
}

TEST_CASE("hungarian assignment solves small instances exactly", "[mixture]") {
  // 3x3 with a known optimum.
  const std::vector<double> cost{4, 1, 3, 2, 0, 5, 3, 2, 2};
  const auto assign = hungarian_min_assignment(cost, 3);
  double total = 0.0;
  for (std::size_t i = 0; i < 3; ++i) total += cost[i * 3 + assign[i]];
  CHECK(total == 5.0);  // 1 + 2 + 2
}
