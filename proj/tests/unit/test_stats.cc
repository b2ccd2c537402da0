#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "mmb/error.h"
#include "mmb/seed.h"
#include "mmb/stats.h"

using namespace mmb;

namespace {

// Exhaustive sign-flip enumeration, written independently of the library.
double brute_exact_p(const std::vector<double>& d) {
  const std::size_t n = d.size();
  double obs = 0.0, scale = 0.0;
  for (double v : d) obs += v, scale += std::abs(v);
  std::size_t hits = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += ((mask >> i) & 1) ? -d[i] : d[i];
    if (std::abs(s) >= std::abs(obs) - 1e-9 * scale) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(std::size_t{1} << n);
}

PairedScores from_diffs(const std::vector<double>& d) {
  PairedScores s;
  for (double v : d) s.a.push_back(v), s.b.push_back(0.0);
  return s;
}

}  // namespace

TEST_CASE("permutation test trivial cases") {
  CHECK(paired_permutation_test(from_diffs(std::vector<double>(6, 0.0)), 100, 1, PermutationMode::kExact) == 1.0);
  CHECK(paired_permutation_test(from_diffs(std::vector<double>(6, 0.0)), 100, 1, PermutationMode::kSampled) == 1.0);
  std::vector<double> one(10, 0.0);
  one[3] = 1.0;
  CHECK(paired_permutation_test(from_diffs(one), 0, 0, PermutationMode::kExact) == 1.0);
  CHECK_THROWS_AS(paired_permutation_test(PairedScores{}, 10, 0, PermutationMode::kExact), Error);
  CHECK_THROWS_AS(paired_permutation_test(from_diffs(std::vector<double>(21, 1.0)), 10, 0, PermutationMode::kExact),
                  Error);
}

TEST_CASE("exact permutation test matches enumeration") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.3, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> d(3 + trial % 9);
    for (auto& v : d) v = g(rng);
    CHECK(paired_permutation_test(from_diffs(d), 0, 0, PermutationMode::kExact) == brute_exact_p(d));
  }
  // All flips of a constant shift: only the two extreme sign patterns reach it.
  CHECK(paired_permutation_test(from_diffs(std::vector<double>(5, 0.1)), 0, 0, PermutationMode::kExact) ==
        2.0 / 32.0);
}

TEST_CASE("permutation p is symmetric in the method order") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    PairedScores s;
    for (int i = 0; i < 9; ++i) s.a.push_back(g(rng)), s.b.push_back(g(rng));
    PairedScores swapped{s.b, s.a, {}};
    CHECK(paired_permutation_test(s, 0, 0, PermutationMode::kExact) ==
          paired_permutation_test(swapped, 0, 0, PermutationMode::kExact));
  }
}

TEST_CASE("sampled permutation test approximates the exact one") {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> g(0.2, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> d(8);
    for (auto& v : d) v = g(rng);
    const double sampled = paired_permutation_test(from_diffs(d), 50000, 99 + trial, PermutationMode::kSampled);
    CHECK(std::abs(sampled - brute_exact_p(d)) <= 0.02);
  }
}

TEST_CASE("sampled permutation test ignores thread count") {
  std::vector<double> d = {0.3, -0.1, 0.5, 0.2, 0.05, -0.4, 0.6, 0.1, 0.2, 0.0, 0.3, 0.25,
                           -0.2, 0.15, 0.4, 0.1, -0.05, 0.35, 0.2, 0.1, 0.3, 0.05, 0.2, -0.1};
  const double one = paired_permutation_test(from_diffs(d), 20000, 7, PermutationMode::kSampled, 1);
  const double four = paired_permutation_test(from_diffs(d), 20000, 7, PermutationMode::kSampled, 4);
  CHECK(one == four);
  CHECK(one > 0.0);
  CHECK(paired_permutation_test(from_diffs(d), 20000, 7, PermutationMode::kAuto) == one);
}

TEST_CASE("by examples") {
  const std::vector<double> single = {0.01};
  auto dec = by_fdr(single, 0.05);
  CHECK(dec.rejected[0]);

  const std::vector<double> four = {0.001, 0.001, 0.001, 0.001};
  dec = by_fdr(four, 0.05);
  CHECK(dec.num_rejected() == 4);
  const double c4 = 1.0 + 1.0 / 2 + 1.0 / 3 + 1.0 / 4;
  CHECK(harmonic_number(4) == doctest::Approx(c4).epsilon(1e-15));
  const double threshold_k4 = 4 * 0.05 / (4 * c4);
  CHECK(threshold_k4 == doctest::Approx(0.024).epsilon(0.001));
  // A p just above the k=4 threshold is not rejected when alone at rank 4.
  const std::vector<double> edge = {0.5, 0.6, 0.7, threshold_k4 * 1.01};
  CHECK(by_fdr(edge, 0.05).num_rejected() == 0);

  const std::vector<double> ones = {1.0, 1.0};
  dec = by_fdr(ones, 0.05);
  CHECK(dec.num_rejected() == 0);
  CHECK(dec.adjusted_p == std::vector<double>{1.0, 1.0});

  const std::vector<double> bad = {0.2, 1.5};
  CHECK_THROWS_AS(by_fdr(bad, 0.05), Error);
}

TEST_CASE("by adjusted values match a reference implementation") {
  // Reference values from statsmodels multipletests(method="fdr_by").
  const std::vector<double> p = {0.001, 0.02, 0.035, 0.04, 0.3, 0.5, 0.012};
  const std::vector<double> expected = {0.01815, 0.121, 0.1452, 0.1452, 0.9075, 1.0, 0.1089};
  const auto dec = by_fdr(p, 0.05);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(dec.adjusted_p[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  CHECK(dec.rejected == std::vector<bool>{true, false, false, false, false, false, false});
  CHECK(step_up_fdr(p, 0.05, 1.0).rejected == std::vector<bool>{true, true, false, false, false, false, true});
}

TEST_CASE("by properties on random inputs") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(1 + trial % 12);
    for (auto& v : p) v = std::pow(u(rng), 3.0);
    const auto by = by_fdr(p, 0.05);
    const auto bh = step_up_fdr(p, 0.05, 1.0);
    CHECK(by.num_rejected() <= bh.num_rejected());
    std::vector<std::size_t> order(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
    for (std::size_t r = 0; r < p.size(); ++r) {
      const auto i = order[r];
      CHECK(by.adjusted_p[i] >= p[i]);
      CHECK(by.adjusted_p[i] <= 1.0);
      if (r > 0) CHECK(by.adjusted_p[i] >= by.adjusted_p[order[r - 1]]);
      // rejections form a prefix of the sorted order
      if (r > 0 && by.rejected[i]) CHECK(by.rejected[order[r - 1]]);
      CHECK(by.rejected[i] == (by.adjusted_p[i] <= 0.05));
    }
  }
}

TEST_CASE("bootstrap examples") {
  const std::vector<double> constant(12, 0.1);
  const auto ci = bootstrap_mean_ci(constant, 500, 95, 3);
  CHECK(ci.low == 0.1);
  CHECK(ci.high == 0.1);

  const std::vector<double> sym = {-3, -2, -1, -0.5, 0, 0.5, 1, 2, 3};
  const auto s = bootstrap_mean_ci(sym, 2000, 95, 4);
  CHECK(s.low <= 0.0);
  CHECK(s.high >= 0.0);
  CHECK_THROWS_AS(bootstrap_mean_ci(std::vector<double>{1.0}, 10, 95, 0), Error);
}

TEST_CASE("bootstrap matches an independent resampler") {
  const std::vector<double> x = {0.12, 0.45, 0.33, 0.91, 0.27, 0.64, 0.08, 0.5, 0.73, 0.19};
  const std::size_t n_boot = 400;
  const std::uint64_t seed = 77;
  std::vector<double> means;
  for (std::size_t b = 0; b < n_boot; ++b) {
    std::mt19937_64 rng(derive_seed(seed, {b}));
    std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
    std::vector<double> sample;
    for (std::size_t i = 0; i < x.size(); ++i) sample.push_back(x[pick(rng)]);
    double total = 0.0;
    for (double v : sample) total += v;
    means.push_back(total / static_cast<double>(sample.size()));
  }
  std::sort(means.begin(), means.end());
  auto q = [&](double level) {
    const double h = level * (means.size() - 1);
    const auto lo = static_cast<std::size_t>(h);
    return means[lo] + (h - lo) * (means[std::min(lo + 1, means.size() - 1)] - means[lo]);
  };
  const auto ci = bootstrap_mean_ci(x, n_boot, 95, seed);
  CHECK(ci.low == doctest::Approx(q(0.025)).epsilon(1e-12));
  CHECK(ci.high == doctest::Approx(q(0.975)).epsilon(1e-12));
  CHECK(bootstrap_mean_ci(x, n_boot, 95, seed, 3).low == ci.low);
}

TEST_CASE("quantiles interpolate linearly") {
  const std::vector<double> v = {1.0, 2.0, 4.0, 8.0};
  CHECK(quantile_sorted(v, 0.0) == 1.0);
  CHECK(quantile_sorted(v, 1.0) == 8.0);
  CHECK(quantile_sorted(v, 0.5) == 3.0);
  CHECK(quantile_sorted(v, 0.25) == doctest::Approx(1.75));
}
