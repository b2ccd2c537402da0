#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mmb {

struct PairedScores {
  std::vector<double> a;
  std::vector<double> b;
  std::vector<std::string> unit_ids;  // optional; empty or same length as a

  void validate() const;
};

enum class PermutationMode { kExact, kSampled, kAuto };

inline constexpr std::size_t kMaxExactUnits = 20;

const char* to_string(PermutationMode mode);
PermutationMode parse_permutation_mode(const std::string& text);

// Two-sided sign-flip test on mean(a - b). Auto picks exact enumeration when
// n <= kMaxExactUnits. Sampled results depend only on seed, not on threads.
double paired_permutation_test(const PairedScores& scores, std::size_t n_perm, std::uint64_t seed,
                               PermutationMode mode, std::size_t threads = 1);

struct FdrDecision {
  std::vector<double> raw_p;
  std::vector<double> adjusted_p;
  std::vector<bool> rejected;
  double alpha = 0.05;

  std::size_t num_rejected() const;
};

double harmonic_number(std::size_t m);

// Step-up procedure with threshold k*alpha/(m*c); c = H_m for
// Benjamini-Yekutieli, c = 1 for Benjamini-Hochberg.
FdrDecision step_up_fdr(std::span<const double> p_values, double alpha, double correction);
FdrDecision by_fdr(std::span<const double> p_values, double alpha);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

// Linear interpolation between order statistics; q in [0,1].
double quantile_sorted(std::span<const double> sorted, double q);

// Percentile interval of the resampled mean; level is a percentage.
Interval bootstrap_mean_ci(std::span<const double> values, std::size_t n_boot, double level,
                           std::uint64_t seed, std::size_t threads = 1);

// Resampled means in draw order (draw b uses seed derive_seed(seed, {b})).
std::vector<double> bootstrap_means(std::span<const double> values, std::size_t n_boot,
                                    std::uint64_t seed, std::size_t threads = 1);

// Mean computed around the first element, exact for constant input.
double shifted_mean(std::span<const double> values);

}  // namespace mmb
