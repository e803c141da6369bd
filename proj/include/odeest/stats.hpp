#pragma once

#include <random>
#include <vector>

#include "odeest/models.hpp"

namespace odeest::stats {

// Empirical quantile with linear interpolation between order statistics
// (position (n - 1) * prob in the sorted sample).
double quantile(std::vector<double> values, double prob);
double median(std::vector<double> values);

double mean(const std::vector<double>& values);
double variance(const std::vector<double>& values);  // n - 1 denominator

// Monte Carlo standard error of the mean of a correlated chain by
// non-overlapping batch means with floor(sqrt(n)) batches.
double batch_means_se(const std::vector<double>& chain);

// One draw inside a parameter interval: uniform when both ends are finite,
// otherwise the finite end plus an Exp(1) offset, or N(0, 1) when unbounded.
double draw_in(const Interval& bounds, std::mt19937_64& rng);

}  // namespace odeest::stats
