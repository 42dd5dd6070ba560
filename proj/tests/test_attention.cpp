#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "test_support.hpp"
#include "vsemb/attention.hpp"
#include "vsemb/numerics.hpp"

using namespace vsemb;
using Catch::Approx;

namespace {

Tensor random_fmap(SplitRng& rng, std::size_t h, std::size_t w, std::size_t c) {
  Tensor f({h, w, c});
  for (double& v : f.values()) v = rng.normal();
  return f;
}

GroupingModel random_model(SplitRng rng, std::size_t m, std::size_t c,
                           double scale = 0.4) {
  GroupingModel g(m, c);
  g.init_random(rng, scale);
  return g;
}

}  // namespace

TEST_CASE("compute_grouping", "[attention]") {
  SplitRng rng(1);
  const Tensor fmap = random_fmap(rng, 3, 4, 5);

  SECTION("zero weights and bias give zero") {
    GroupingModel model(2, 5);
    const Tensor g = compute_grouping(model, fmap);
    for (double v : g.values()) CHECK(v == 0.0);
  }
  SECTION("a channel-selecting row reads the channel mean") {
    GroupingModel model(2, 5);
    model.weight(0, 3) = 1.0;
    const Tensor g = compute_grouping(model, fmap);
    const Tensor pooled = pool_feature_map(fmap);
    CHECK(g(0, 3) == Approx(pooled[3]));
    CHECK(g(0, 0) == 0.0);
    CHECK(g(1, 3) == 0.0);
  }
  SECTION("matches an independent elementwise product oracle") {
    GroupingModel model = random_model(rng, 3, 5);
    const Tensor g = compute_grouping(model, fmap);
    const Tensor pooled = pool_feature_map(fmap);
    for (std::size_t m = 0; m < 3; ++m)
      for (std::size_t c = 0; c < 5; ++c)
        CHECK(g(m, c) ==
              Approx(model.weight(m, c) * pooled[c] + model.bias(m)).margin(1e-12));
  }
  SECTION("channel mismatch is an error") {
    GroupingModel model(2, 7);
    CHECK_THROWS_AS(compute_grouping(model, fmap), ConfigError);
  }
}

TEST_CASE("attention_map", "[attention]") {
  SplitRng rng(2);
  const Tensor fmap = random_fmap(rng, 2, 2, 3);

  SECTION("zero weights give a uniform half map") {
    const Tensor a = attention_map(Tensor({3}), fmap);
    for (double v : a.values()) CHECK(v == 0.5);
  }
  SECTION("one-hot weights saturate where the channel is large") {
    Tensor fixed({1, 1, 2}, std::vector<double>{10.0, -3.0});
    Tensor g = Tensor::vector_of({1.0, 0.0});
    const Tensor a = attention_map(g, fixed);
    CHECK(a(0, 0) == Approx(0.9999546021312976).epsilon(1e-9));
  }
  SECTION("negating the weights flips the map") {
    Tensor g = Tensor::vector_of({0.7, -0.3, 0.1});
    Tensor ng = g;
    for (double& v : ng.values()) v = -v;
    const Tensor a = attention_map(g, fmap);
    const Tensor b = attention_map(ng, fmap);
    for (std::size_t i = 0; i < a.numel(); ++i)
      CHECK(b[i] == Approx(1.0 - a[i]).margin(1e-12));
  }
  SECTION("values stay strictly inside (0,1)") {
    for (int trial = 0; trial < 20; ++trial) {
      Tensor g({3});
      for (double& v : g.values()) v = 3.0 * rng.normal();
      const Tensor a = attention_map(g, fmap);
      for (double v : a.values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
  }
}

TEST_CASE("part_features", "[attention]") {
  SECTION("zero attention gives zero features") {
    Tensor a({1, 2, 2});
    SplitRng rng(3);
    const Tensor fmap = random_fmap(rng, 2, 2, 3);
    const Tensor f = part_features(a, fmap);
    for (double v : f.values()) CHECK(v == 0.0);
  }
  SECTION("unit attention sums the channel plane") {
    SplitRng rng(4);
    const Tensor fmap = random_fmap(rng, 2, 3, 2);
    Tensor a({1, 2, 3}, 1.0);
    const Tensor f = part_features(a, fmap);
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t w = 0; w < 3; ++w) s += fmap(r, w, c);
      CHECK(f(0, c) == Approx(s).margin(1e-12));
    }
  }
  SECTION("hand-evaluated 2x2 fixture") {
    Tensor fmap({2, 2, 1});
    fmap(0, 0, 0) = 3.0;
    fmap(0, 1, 0) = 7.0;
    fmap(1, 0, 0) = 1.0;
    fmap(1, 1, 0) = 5.0;
    Tensor a({1, 2, 2});
    a(0, 0, 0) = 1.0;
    const Tensor f = part_features(a, fmap);
    CHECK(f(0, 0) == 3.0);
  }
  SECTION("forward pass keeps features consistent with the maps") {
    SplitRng rng(5);
    const Tensor fmap = random_fmap(rng, 4, 4, 6);
    const GroupingModel model = random_model(rng, 3, 6);
    const AttentionForward fwd = attention_forward(model, fmap);
    const Tensor direct = part_features(fwd.parts.attention, fmap);
    CHECK(fwd.parts.features.values() == direct.values());
  }
  SECTION("linear in the attention maps") {
    SplitRng rng(6);
    const Tensor fmap = random_fmap(rng, 3, 3, 2);
    Tensor a({1, 3, 3}), b({1, 3, 3});
    for (std::size_t i = 0; i < a.numel(); ++i) {
      a[i] = rng.next_double();
      b[i] = rng.next_double();
    }
    Tensor sum({1, 3, 3});
    for (std::size_t i = 0; i < a.numel(); ++i) sum[i] = a[i] + b[i];
    const Tensor fa = part_features(a, fmap);
    const Tensor fb = part_features(b, fmap);
    const Tensor fs = part_features(sum, fmap);
    for (std::size_t i = 0; i < fa.numel(); ++i)
      CHECK(fs[i] == Approx(fa[i] + fb[i]).margin(1e-12));
  }
}

TEST_CASE("loss_dis", "[attention]") {
  SECTION("a lone spike at its own peak costs nothing") {
    Tensor a({3, 3});
    a(1, 2) = 0.8;
    CHECK(loss_dis(a) == 0.0);
  }
  SECTION("hand-evaluated fixture with the row-major tie break") {
    Tensor a({2, 2}, std::vector<double>{1.0, 1.0, 0.0, 0.0});
    CHECK(loss_dis(a) == Approx(1.0));
  }
  SECTION("scaling the map scales the loss") {
    SplitRng rng(7);
    Tensor a({3, 4});
    for (double& v : a.values()) v = rng.next_double();
    const double base = loss_dis(a);
    Tensor scaled = a;
    for (double& v : scaled.values()) v *= 0.37;
    CHECK(loss_dis(scaled) == Approx(0.37 * base).epsilon(1e-12));
  }
  SECTION("never negative") {
    SplitRng rng(8);
    for (int trial = 0; trial < 25; ++trial) {
      Tensor a({4, 4});
      for (double& v : a.values()) v = rng.next_double();
      CHECK(loss_dis(a) >= 0.0);
    }
  }
}

TEST_CASE("loss_div", "[attention]") {
  SECTION("silent competitors with zero margin cost nothing") {
    Tensor a({2, 2, 2});
    a(0, 0, 0) = 0.9;
    a(0, 1, 1) = 0.4;
    CHECK(loss_div(a, 0, 0.0) == 0.0);
  }
  SECTION("two saturated maps on a 2x2 grid") {
    Tensor a({2, 2, 2}, 1.0);
    CHECK(loss_div(a, 0, 0.02) == Approx(3.92));
  }
  SECTION("disjoint supports with zero margin") {
    Tensor a({2, 2, 2});
    a(0, 0, 0) = 1.0;
    a(0, 0, 1) = 0.5;
    a(1, 1, 0) = 1.0;
    a(1, 1, 1) = 0.25;
    CHECK(loss_div(a, 0, 0.0) == 0.0);
    CHECK(loss_div(a, 1, 0.0) == 0.0);
  }
  SECTION("margin lower bound") {
    SplitRng rng(9);
    const double zeta = 0.02;
    for (int trial = 0; trial < 25; ++trial) {
      Tensor a({3, 3, 3});
      for (double& v : a.values()) v = rng.next_double();
      double mass = 0.0;
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) mass += a(0, r, c);
      CHECK(loss_div(a, 0, zeta) >= -zeta * mass - 1e-12);
    }
  }
  SECTION("needs at least two parts") {
    Tensor a({1, 2, 2});
    CHECK_THROWS_AS(loss_div(a, 0, 0.0), ConfigError);
  }
}

TEST_CASE("loss_prt value and analytic gradient", "[attention]") {
  SECTION("lone spikes cost nothing at lambda 0") {
    Tensor a({2, 3, 3});
    a(0, 0, 0) = 1.0;
    a(1, 2, 2) = 1.0;
    const PartLossResult res = part_loss_grad_attention(a, 0.0, 0.02);
    CHECK(res.loss == 0.0);
  }
  SECTION("matches loss_dis + lambda loss_div") {
    SplitRng rng(10);
    Tensor a({3, 4, 4});
    for (double& v : a.values()) v = rng.next_double();
    const double lambda = 5.0, zeta = 0.02;
    double expected = 0.0;
    for (std::size_t m = 0; m < 3; ++m) {
      Tensor am({4, 4});
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) am(r, c) = a(m, r, c);
      expected += loss_dis(am) + lambda * loss_div(a, m, zeta);
    }
    CHECK(part_loss_grad_attention(a, lambda, zeta).loss ==
          Approx(expected).epsilon(1e-12));
  }
  SECTION("gradient w.r.t. grouping parameters passes finite differences") {
    // Generic points: re-sample whenever a peak or inner-max selection is
    // within 1e-3 of a tie.
    SplitRng rng(11);
    int checked = 0;
    std::uint64_t attempt = 0;
    while (checked < 10 && attempt < 200) {
      SplitRng local = rng.derive(attempt++);
      Tensor fmap = random_fmap(local, 4, 4, 5);
      GroupingModel model = random_model(local.derive(1), 2, 5, 0.3);
      const AttentionForward fwd = attention_forward(model, fmap);

      bool generic = true;
      const Tensor& at = fwd.parts.attention;
      for (std::size_t m = 0; m < 2 && generic; ++m) {
        const auto peak = attention_peak(at, m);
        const double pv = at(m, peak.first, peak.second);
        for (std::size_t r = 0; r < 4 && generic; ++r)
          for (std::size_t c = 0; c < 4; ++c) {
            if (r == peak.first && c == peak.second) continue;
            if (std::fabs(at(m, r, c) - pv) < 1e-3) {
              generic = false;
              break;
            }
          }
      }
      if (!generic) continue;

      const PartLossGrad res = loss_prt(model, fmap, 5.0, 0.02);
      std::vector<double> params(model.weight.values());
      params.insert(params.end(), model.bias.values().begin(),
                    model.bias.values().end());
      std::vector<double> grad(res.grad_weight.values());
      grad.insert(grad.end(), res.grad_bias.values().begin(),
                  res.grad_bias.values().end());

      const auto loss_fn = [&](std::span<const double> p) {
        GroupingModel probe(2, 5);
        for (std::size_t i = 0; i < probe.weight.numel(); ++i)
          probe.weight[i] = p[i];
        for (std::size_t i = 0; i < probe.bias.numel(); ++i)
          probe.bias[i] = p[probe.weight.numel() + i];
        return loss_prt(probe, fmap, 5.0, 0.02).loss;
      };
      CHECK(check_gradient(loss_fn, params, grad) < 1e-4);
      ++checked;
    }
    REQUIRE(checked == 10);
  }
}

TEST_CASE("cell-statistics grouping init claims distinct signal cells", "[attention]") {
  SynthConfig cfg = testsup::small_synth_config();
  auto [ds, planted] = generate_synthetic(cfg);
  std::vector<const Tensor*> fmaps;
  for (std::size_t i : ds.train_indices())
    fmaps.push_back(&ds.instances[i].feature_map);
  const GroupingModel model = init_grouping_from_cells(fmaps, cfg.parts);

  const AttentionForward fwd = attention_forward(model, *fmaps[0]);
  std::set<std::pair<std::size_t, std::size_t>> peaks;
  for (std::size_t m = 0; m < cfg.parts; ++m) {
    const auto peak = attention_peak(fwd.parts.attention, m);
    peaks.insert(peak);
    CHECK(fwd.parts.attention(m, peak.first, peak.second) > 0.99);
  }
  CHECK(peaks.size() == cfg.parts);
}
