#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>
#include <string>

#include "odeest/models.hpp"

namespace odeest {

// Diagonal observation noise, one standard deviation per state coordinate.
struct NoiseSpec {
  Vector sigmas;

  static NoiseSpec uniform(int p, double sigma) { return {Vector::Constant(p, sigma)}; }
};

// Generating values kept alongside a synthetic dataset for benchmark scoring.
struct Truth {
  Vector theta;
  Vector x0;
  Vector sigma;
  std::optional<std::uint64_t> seed;
};

// Observations y(t_i) on a grid. Row i of `observations` is y(t_i).
//
// A dataset with zero observation rows is allowed in memory only: it stands
// for "no data" (prior-only runs) and still carries a grid for trajectories.
struct Dataset {
  TimeGrid grid;
  Matrix observations;
  std::optional<Truth> truth;

  int n() const { return static_cast<int>(observations.rows()); }
  int dim() const { return static_cast<int>(observations.cols()); }
  bool empty() const { return observations.rows() == 0; }
  Vector y(int i) const { return observations.row(i).transpose(); }

  // Throws ValidationError when rows and grid disagree.
  void validate() const;
};

// Default experiment configuration for the FitzHugh-Nagumo benchmark.
struct FhnBenchmark {
  static constexpr double t_end = 20.0;
  static constexpr int n = 401;
  static constexpr double sigma = 0.5;  // variance 0.25
  static Vector theta() { return (Vector(3) << 0.2, 0.2, 3.0).finished(); }
  static Vector x0() { return (Vector(2) << -1.0, 1.0).finished(); }
  // Spline settings for the collocation estimators. Profiling needs a fine basis to
  // follow the fast transitions of the solution.
  static constexpr int spline_knots = 25;
  static constexpr int profiling_knots = 200;
  static std::vector<double> lambda_grid() { return {0.1, 1.0, 10.0, 100.0}; }
};

// y_i = x(t_i) + eps_i with eps_i ~ N(0, diag(sigma^2)). Noise comes from
// std::mt19937_64 seeded with `seed`, drawn row by row, coordinate by coordinate.
Dataset generate(const OdeSystem& sys, const Vector& theta, const Vector& x0, const TimeGrid& grid,
                 const NoiseSpec& noise, std::uint64_t seed, int refine = 10);

// The FitzHugh-Nagumo benchmark dataset for one seed.
Dataset fhn_benchmark_dataset(std::uint64_t seed, double sigma = FhnBenchmark::sigma,
                              int n = FhnBenchmark::n, double t_end = FhnBenchmark::t_end);

void write_dataset(std::ostream& out, const Dataset& ds);
Dataset read_dataset(std::istream& in);
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace odeest
