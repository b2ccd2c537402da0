#include "mmb/stats.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mmb/error.h"
#include "mmb/parallel.h"
#include "mmb/seed.h"

namespace mmb {

namespace {

constexpr std::size_t kPermChunk = 4096;

}  // namespace

void PairedScores::validate() const {
  require(!a.empty(), ErrorKind::kDomain, "paired scores are empty");
  require(a.size() == b.size(), ErrorKind::kShape, "paired scores differ in length");
  require(unit_ids.empty() || unit_ids.size() == a.size(), ErrorKind::kShape,
          "unit ids do not match score length");
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(std::isfinite(a[i]) && std::isfinite(b[i]), ErrorKind::kValidation, "non-finite score");
  }
}

const char* to_string(PermutationMode mode) {
  switch (mode) {
    case PermutationMode::kExact: return "exact";
    case PermutationMode::kSampled: return "sampled";
    case PermutationMode::kAuto: return "auto";
  }
  return "auto";
}

PermutationMode parse_permutation_mode(const std::string& text) {
  if (text == "exact") return PermutationMode::kExact;
  if (text == "sampled") return PermutationMode::kSampled;
  if (text == "auto") return PermutationMode::kAuto;
  fail(ErrorKind::kConfig, "unknown permutation mode '" + text + "'");
}

double paired_permutation_test(const PairedScores& scores, std::size_t n_perm, std::uint64_t seed,
                               PermutationMode mode, std::size_t threads) {
  scores.validate();
  const std::size_t n = scores.a.size();
  std::vector<double> d(n);
  double abs_total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = scores.a[i] - scores.b[i];
    abs_total += std::abs(d[i]);
  }
  if (abs_total == 0.0) return 1.0;
  const double observed = std::abs(std::accumulate(d.begin(), d.end(), 0.0));
  // Flipped sums that differ from the observed one by rounding count as ties.
  const double threshold = observed - 1e-9 * abs_total;

  if (mode == PermutationMode::kAuto) {
    mode = n <= kMaxExactUnits ? PermutationMode::kExact : PermutationMode::kSampled;
  }
  if (mode == PermutationMode::kExact) {
    require(n <= kMaxExactUnits, ErrorKind::kDomain,
            "exact permutation test supports at most " + std::to_string(kMaxExactUnits) + " units");
    const std::uint64_t total = std::uint64_t{1} << n;
    const std::size_t n_chunks = static_cast<std::size_t>((total + kPermChunk - 1) / kPermChunk);
    std::vector<std::uint64_t> hits(n_chunks, 0);
    parallel_for(n_chunks, threads, [&](std::size_t c) {
      const std::uint64_t end = std::min<std::uint64_t>(total, (c + 1) * std::uint64_t{kPermChunk});
      for (std::uint64_t mask = c * std::uint64_t{kPermChunk}; mask < end; ++mask) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += (mask >> i & 1) ? -d[i] : d[i];
        if (std::abs(sum) >= threshold) ++hits[c];
      }
    });
    const auto count = std::accumulate(hits.begin(), hits.end(), std::uint64_t{0});
    return static_cast<double>(count) / static_cast<double>(total);
  }

  require(n_perm >= 1, ErrorKind::kDomain, "sampled permutation test needs n_perm >= 1");
  const std::size_t words = (n + 63) / 64;
  const std::size_t n_chunks = (n_perm + kPermChunk - 1) / kPermChunk;
  std::vector<std::uint64_t> hits(n_chunks, 0);
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    std::mt19937_64 rng(derive_seed(seed, {c}));
    const std::size_t end = std::min(n_perm, (c + 1) * kPermChunk);
    std::vector<std::uint64_t> bits(words);
    for (std::size_t draw = c * kPermChunk; draw < end; ++draw) {
      for (auto& w : bits) w = rng();
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) sum += (bits[i / 64] >> (i % 64) & 1) ? -d[i] : d[i];
      if (std::abs(sum) >= threshold) ++hits[c];
    }
  });
  const auto count = std::accumulate(hits.begin(), hits.end(), std::uint64_t{0});
  return (1.0 + static_cast<double>(count)) / (1.0 + static_cast<double>(n_perm));
}

std::size_t FdrDecision::num_rejected() const {
  return static_cast<std::size_t>(std::count(rejected.begin(), rejected.end(), true));
}

double harmonic_number(std::size_t m) {
  double h = 0.0;
  for (std::size_t i = m; i >= 1; --i) h += 1.0 / static_cast<double>(i);
  return h;
}

FdrDecision step_up_fdr(std::span<const double> p_values, double alpha, double correction) {
  require(alpha > 0.0 && alpha < 1.0, ErrorKind::kDomain, "alpha must lie in (0,1)");
  require(correction >= 1.0, ErrorKind::kDomain, "correction factor must be at least 1");
  for (double p : p_values) {
    require(p >= 0.0 && p <= 1.0, ErrorKind::kDomain, "p-value outside [0,1]");
  }
  const std::size_t m = p_values.size();
  FdrDecision out;
  out.alpha = alpha;
  out.raw_p.assign(p_values.begin(), p_values.end());
  out.adjusted_p.assign(m, 1.0);
  out.rejected.assign(m, false);
  if (m == 0) return out;

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p_values[a] < p_values[b]; });
  const double md = static_cast<double>(m);

  std::size_t n_reject = 0;
  for (std::size_t k = m; k >= 1; --k) {
    if (p_values[order[k - 1]] <= static_cast<double>(k) * alpha / (md * correction)) {
      n_reject = k;
      break;
    }
  }
  double running = 1.0;
  for (std::size_t k = m; k >= 1; --k) {
    const double scaled = md * correction * p_values[order[k - 1]] / static_cast<double>(k);
    running = std::min(running, std::min(1.0, scaled));
    out.adjusted_p[order[k - 1]] = std::max(running, p_values[order[k - 1]]);
    out.rejected[order[k - 1]] = k <= n_reject;
  }
  return out;
}

FdrDecision by_fdr(std::span<const double> p_values, double alpha) {
  return step_up_fdr(p_values, alpha, harmonic_number(p_values.size()));
}

double quantile_sorted(std::span<const double> sorted, double q) {
  require(!sorted.empty(), ErrorKind::kDomain, "quantile of an empty list");
  require(q >= 0.0 && q <= 1.0, ErrorKind::kDomain, "quantile level outside [0,1]");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

double shifted_mean(std::span<const double> values) {
  require(!values.empty(), ErrorKind::kDomain, "mean of an empty list");
  const double origin = values[0];
  double total = 0.0;
  for (double v : values) total += v - origin;
  return origin + total / static_cast<double>(values.size());
}

std::vector<double> bootstrap_means(std::span<const double> values, std::size_t n_boot,
                                    std::uint64_t seed, std::size_t threads) {
  require(values.size() >= 2, ErrorKind::kDomain, "bootstrap needs at least two values");
  require(n_boot >= 1, ErrorKind::kDomain, "bootstrap needs n_boot >= 1");
  const std::size_t n = values.size();
  std::vector<double> means(n_boot);
  constexpr std::size_t kChunk = 256;
  const std::size_t n_chunks = (n_boot + kChunk - 1) / kChunk;
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    std::vector<double> sample(n);
    for (std::size_t b = c * kChunk; b < std::min(n_boot, (c + 1) * kChunk); ++b) {
      std::mt19937_64 rng(derive_seed(seed, {b}));
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (auto& s : sample) s = values[pick(rng)];
      means[b] = shifted_mean(sample);
    }
  });
  return means;
}

Interval bootstrap_mean_ci(std::span<const double> values, std::size_t n_boot, double level,
                           std::uint64_t seed, std::size_t threads) {
  require(level > 0.0 && level < 100.0, ErrorKind::kDomain, "confidence level must lie in (0,100)");
  auto means = bootstrap_means(values, n_boot, seed, threads);
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - level / 100.0) / 2.0;
  return {quantile_sorted(means, tail), quantile_sorted(means, 1.0 - tail)};
}

}  // namespace mmb
