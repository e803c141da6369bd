#include "odeest/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace odeest::stats {

double quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw InvalidInput("quantile of an empty sample");
  if (!(prob >= 0 && prob <= 1)) throw InvalidInput("quantile probability must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = prob * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

double mean(const std::vector<double>& values) {
  if (values.empty()) throw InvalidInput("mean of an empty sample");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double variance(const std::vector<double>& values) {
  if (values.size() < 2) throw InvalidInput("variance needs at least two values");
  const double m = mean(values);
  double s = 0;
  for (double v : values) s += (v - m) * (v - m);
  return s / static_cast<double>(values.size() - 1);
}

double batch_means_se(const std::vector<double>& chain) {
  const auto n = chain.size();
  const auto batches = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
  if (batches < 2) throw InvalidInput("batch means need at least 4 draws");
  const std::size_t len = n / batches;
  std::vector<double> means(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    double s = 0;
    for (std::size_t i = 0; i < len; ++i) s += chain[b * len + i];
    means[b] = s / static_cast<double>(len);
  }
  // Var(batch mean) * len estimates the asymptotic variance sigma^2.
  const double sigma2 = variance(means) * static_cast<double>(len);
  return std::sqrt(sigma2 / static_cast<double>(batches * len));
}

double draw_in(const Interval& bounds, std::mt19937_64& rng) {
  if (bounds.finite()) {
    std::uniform_real_distribution<double> u(bounds.lower, bounds.upper);
    double v = u(rng);
    while (v <= bounds.lower) v = u(rng);
    return v;
  }
  if (std::isfinite(bounds.lower)) return bounds.lower + std::exponential_distribution<double>(1.0)(rng);
  if (std::isfinite(bounds.upper)) return bounds.upper - std::exponential_distribution<double>(1.0)(rng);
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace odeest::stats
