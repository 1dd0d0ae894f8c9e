#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "skillloop/common.hpp"
#include "skillloop/reward.hpp"

using namespace skillloop;
using namespace skillloop::reward;

TEST_CASE("group_metrics examples") {
  const std::vector<double> g{0.8, 0.9, 1.0};
  const auto m = group_metrics(g);
  CHECK(m.mean == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(m.std == doctest::Approx(std::sqrt(1.0 / 150.0)).epsilon(1e-12));
  CHECK(m.std == doctest::Approx(0.081650).epsilon(1e-5));
  CHECK(m.worst == 0.8);

  const std::vector<double> single{0.7};
  const auto s = group_metrics(single);
  CHECK(s.mean == 0.7);
  CHECK(s.std == 0.0);
  CHECK(s.worst == 0.7);

  const std::vector<double> flat{0.3, 0.3, 0.3, 0.3};
  CHECK(group_metrics(flat).std == 0.0);
  CHECK_THROWS_AS(group_metrics(std::vector<double>{}), ValidationError);
}

TEST_CASE("sample std uses N-1") {
  const std::vector<double> g{0.8, 0.9, 1.0};
  CHECK(group_metrics(g, true).std == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("group_metrics agrees with a two-pass oracle") {
  std::mt19937_64 eng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    std::vector<double> xs(1 + eng() % 12);
    for (auto& x : xs) x = u(eng);
    const auto m = group_metrics(xs);
    const auto ref = oracle::two_pass(xs);
    CHECK(std::abs(m.mean - ref.mean) < 1e-12);
    CHECK(std::abs(m.std - std::sqrt(ref.var)) < 1e-12);
    CHECK(std::abs(population_variance(xs) - ref.var) < 1e-12);
    CHECK(m.worst == ref.min);
  }
}

TEST_CASE("stability_term examples and range") {
  CHECK(stability_term(std::vector<double>{0.6, 0.6}) == 1.0);
  CHECK(stability_term(std::vector<double>{0.0, 1.0}) == doctest::Approx(0.0));
  CHECK(stability_term(std::vector<double>{0.8, 0.9, 1.0}) == doctest::Approx(0.836700).epsilon(1e-6));
  std::mt19937_64 eng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> xs(1 + eng() % 8);
    for (auto& x : xs) x = u(eng) < 0.3 ? std::round(u(eng)) : u(eng);
    const double s = stability_term(xs);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
  CHECK_THROWS_AS(stability_term(std::vector<double>{}), ValidationError);
}

TEST_CASE("composite reward examples") {
  CHECK(composite_reward(1, 1, 1).composite == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(composite_reward(1, 1, 1, RewardWeights{0.2, 0.3, 0.5}).composite == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(composite_reward(0, 0, 0).composite == 0.0);
  const auto r = composite_reward(0.5, 1.0, 1.0);
  CHECK(r.composite == doctest::Approx(0.65).epsilon(1e-12));
  CHECK(r.dice_term == 0.5);
  CHECK(r.stability_term == 1.0);
  CHECK(r.format_term == 1.0);
  CHECK_THROWS_AS(composite_reward(1.1, 0, 0), ValidationError);
  CHECK_THROWS_AS(composite_reward(0, -0.1, 0), ValidationError);
}

TEST_CASE("weights normalize") {
  const auto w = RewardWeights{2, 1, 1}.normalized();
  CHECK(w.w_dice == doctest::Approx(0.5));
  CHECK(w.w_stab == doctest::Approx(0.25));
  CHECK_THROWS_AS((RewardWeights{0, 0, 0}.normalized()), ValidationError);
  CHECK_THROWS_AS((RewardWeights{-1, 1, 1}.normalized()), ValidationError);
}

TEST_CASE("composite reward is monotone in each term") {
  std::mt19937_64 eng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 300; ++i) {
    const double d = u(eng), s = u(eng), f = u(eng), bump = u(eng) * (1.0 - std::max({d, s, f}));
    const double base = composite_reward(d, s, f).composite;
    CHECK(composite_reward(d + bump, s, f).composite >= base);
    CHECK(composite_reward(d, s + bump, f).composite >= base);
    CHECK(composite_reward(d, s, f + bump).composite >= base);
    const auto r = composite_reward(d, s, f);
    CHECK(std::abs(r.composite - (0.7 * d + 0.2 * s + 0.1 * f)) < 1e-12);
  }
}

TEST_CASE("objective examples") {
  const std::vector<std::vector<double>> one{{0.8, 0.9, 1.0}};
  CHECK(std::abs(objective(one, 1.0) - (0.9 - 1.0 / 150.0)) < 1e-9);
  CHECK(std::abs(objective(one, 1.0) - 0.8933333333333333) < 1e-9);
  const std::vector<std::vector<double>> two{{0.8, 0.9, 1.0}, {0.2, 0.6}};
  CHECK(objective(two, 0.0) == doctest::Approx((0.9 + 0.4) / 2.0).epsilon(1e-12));
  const std::vector<std::vector<double>> perfect{{1, 1, 1}, {1, 1}};
  for (double l : {0.0, 1.0, 7.5}) CHECK(objective(perfect, l) == 1.0);
  CHECK_THROWS_AS(objective(std::vector<std::vector<double>>{}, 1.0), ValidationError);
}

TEST_CASE("objective decreases in lambda when variance is positive") {
  std::mt19937_64 eng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    std::vector<std::vector<double>> groups(1 + eng() % 4);
    for (auto& g : groups) {
      g.resize(2 + eng() % 4);
      for (auto& x : g) x = u(eng);
    }
    double prev = objective(groups, 0.0);
    for (double l : {0.5, 1.0, 2.0, 4.0}) {
      const double cur = objective(groups, l);
      CHECK(cur < prev);
      prev = cur;
    }
  }
}

TEST_CASE("grpo advantages examples") {
  const auto a = grpo_advantages(std::vector<double>{1, 2, 3});
  REQUIRE(a.size() == 3);
  CHECK(std::abs(a[0] + 1.224745) < 1e-6);
  CHECK(std::abs(a[1]) < 1e-12);
  CHECK(std::abs(a[2] - 1.224745) < 1e-6);
  for (double x : grpo_advantages(std::vector<double>{0.4, 0.4, 0.4})) CHECK(x == 0.0);
  CHECK(grpo_advantages(std::vector<double>{0.9}) == std::vector<double>{0.0});
}

TEST_CASE("grpo advantages are standardized and shift/scale invariant") {
  std::mt19937_64 eng(5);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> r(2 + eng() % 10);
    for (auto& x : r) x = u(eng);
    if (std::sqrt(oracle::two_pass(r).var) < 1e-8) continue;
    const auto a = grpo_advantages(r);
    const auto m = oracle::two_pass(a);
    CHECK(std::abs(m.mean) < 1e-9);
    CHECK(std::abs(std::sqrt(m.var) - 1.0) < 1e-9);

    const double shift = u(eng), scale = 0.1 + std::abs(u(eng));
    std::vector<double> shifted = r, scaled = r;
    for (auto& x : shifted) x += shift;
    for (auto& x : scaled) x *= scale;
    const auto as = grpo_advantages(shifted), ak = grpo_advantages(scaled);
    for (std::size_t j = 0; j < r.size(); ++j) {
      CHECK(std::abs(as[j] - a[j]) < 1e-9);
      CHECK(std::abs(ak[j] - a[j]) < 1e-9);
    }
  }
}
