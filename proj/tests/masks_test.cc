#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kgpath/errors.h"
#include "kgpath/masks.h"

using namespace kgpath;

TEST_CASE("causal mask") {
  const auto one = causal_mask(1);
  REQUIRE(one.size() == 1);
  CHECK(one[0][0]);
  const auto m = causal_mask(7);
  // Row k = 3 (1-based) sees timesteps 1..3 only.
  CHECK(m[2] == std::vector<bool>{true, true, true, false, false, false, false});
  for (std::size_t k = 0; k < 7; ++k)
    for (std::size_t j = 0; j < 7; ++j) CHECK(m[k][j] == (j <= k));
  CHECK_THROWS_AS(causal_mask(0), ContractError);
}

TEST_CASE("dropout gate extremes") {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const DropoutMask off = dropout_mask(7, 0.0, 0.9, rng);
    CHECK_FALSE(off.active);
    for (bool b : off.masked) CHECK_FALSE(b);
    const DropoutMask on = dropout_mask(7, 1.0, 0.0, rng);
    CHECK(on.active);
    for (bool b : on.masked) CHECK_FALSE(b);
  }
}

TEST_CASE("dropout mask rate") {
  Rng rng(2024);
  std::size_t masked = 0;
  const std::size_t draws = 100000;
  for (std::size_t i = 0; i < draws; ++i) masked += dropout_mask(1, 0.5, 0.15, rng).masked[0];
  CHECK(std::abs(static_cast<double>(masked) / draws - 0.075) < 0.005);
}

TEST_CASE("history mask") {
  Rng rng(8);
  const HistoryMask none = history_mask(6, 0.0, rng);
  CHECK_FALSE(none.activated);
  for (bool b : none.masked) CHECK_FALSE(b);
  const HistoryMask all = history_mask(6, 1.0, rng);
  CHECK(all.activated);
  for (bool b : all.masked) CHECK(b);
  for (int i = 0; i < 500; ++i) {
    const HistoryMask h = history_mask(5, 0.2, rng);
    bool any = false;
    for (bool b : h.masked) any = any || b;
    CHECK(h.activated == any);
  }
  CHECK(history_mask(0, 0.5, rng).masked.empty());
}

TEST_CASE("masks replay from (seed, epoch, index)") {
  Rng a = mask_rng(42, 3, 17), b = mask_rng(42, 3, 17), c = mask_rng(42, 4, 17);
  const DropoutMask da = dropout_mask(7, 0.9, 0.5, a), db = dropout_mask(7, 0.9, 0.5, b);
  CHECK(da.masked == db.masked);
  CHECK(history_mask(7, 0.5, a).masked == history_mask(7, 0.5, b).masked);
  bool differs = false;
  for (int i = 0; i < 20 && !differs; ++i)
    differs = dropout_mask(7, 1.0, 0.5, c).masked != dropout_mask(7, 1.0, 0.5, b).masked;
  CHECK(differs);
}

TEST_CASE("masked log-likelihood") {
  const std::size_t v = 9;
  const Tensor uniform({3, v}, 1.0 / v);
  CHECK(masked_loglik(uniform, {0, 4, 8}, {true, true, true}) == doctest::Approx(-3 * std::log(9.0)));
  CHECK(masked_loglik(uniform, {0, 4, 8}, {false, false, false}) == 0.0);

  // Chain rule over a hand-made conditional table.
  Tensor p = Tensor::from_rows({{0.5, 0.25, 0.25}, {0.1, 0.6, 0.3}, {0.2, 0.2, 0.6}});
  const double joint = 0.25 * 0.6 * 0.6;
  CHECK(masked_loglik(p, {1, 1, 2}, {true, true, true}) == doctest::Approx(std::log(joint)).epsilon(1e-12));
  CHECK(masked_loglik(p, {1, 1, 2}, {true, false, true}) == doctest::Approx(std::log(0.25 * 0.6)).epsilon(1e-12));

  Tensor zero = Tensor::from_rows({{1.0, 0.0}});
  CHECK(masked_loglik(zero, {1}, {true}) == doctest::Approx(std::log(1e-12)));
  CHECK_THROWS_AS(masked_loglik(Tensor::from_rows({{1.5, -0.5}}), {0}, {true}), ContractError);
  CHECK_THROWS_AS(masked_loglik(Tensor::from_rows({{0.5, 0.2}}), {0}, {true}), ContractError);
}
