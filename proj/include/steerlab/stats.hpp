#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "steerlab/error.hpp"

namespace steerlab {

inline constexpr std::size_t kDefaultResamples = 10000;

using Rng = std::mt19937_64;

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

// Linear-interpolated percentile (q in [0,100]) of an already sorted sample.
inline double percentile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ValidationError("percentile of empty sample");
  if (sorted.size() == 1) return sorted.front();
  const double pos = (q / 100.0) * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

inline double percentile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  return percentile_sorted(values, q);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation (n-1 denominator); 0 for fewer than two values.
inline double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Percentile bootstrap: resample `n` items with replacement, evaluate the
// statistic on the drawn index set, return the central `level` interval.
inline Interval bootstrap_ci(std::size_t n,
                             const std::function<double(std::span<const std::size_t>)>& statistic,
                             std::size_t resamples, std::uint64_t seed, double level = 0.95) {
  if (n == 0) throw ValidationError("bootstrap over empty sample");
  if (resamples == 0) throw ValidationError("bootstrap needs at least one resample");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(n);
  std::vector<double> stats(resamples);
  for (std::size_t r = 0; r < resamples; ++r) {
    for (auto& i : idx) i = pick(rng);
    stats[r] = statistic(idx);
  }
  std::sort(stats.begin(), stats.end());
  const double tail = (1.0 - level) / 2.0 * 100.0;
  return {percentile_sorted(stats, tail), percentile_sorted(stats, 100.0 - tail)};
}

// Bootstrap CI of the mean of `values`.
inline Interval bootstrap_mean_ci(std::span<const double> values, std::size_t resamples,
                                  std::uint64_t seed, double level = 0.95) {
  return bootstrap_ci(
      values.size(),
      [&](std::span<const std::size_t> idx) {
        double s = 0.0;
        for (auto i : idx) s += values[i];
        return s / static_cast<double>(idx.size());
      },
      resamples, seed, level);
}

}  // namespace steerlab
