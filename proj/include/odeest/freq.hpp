#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "odeest/models.hpp"
#include "odeest/simulate.hpp"
#include "odeest/splinefit.hpp"

namespace odeest {

enum class Algorithm { Simplex, GaussNewton };

struct OptimizerConfig {
  Algorithm algorithm = Algorithm::Simplex;
  int max_iters = 4000;  // objective evaluations for the simplex, iterations for Gauss-Newton
  double tolerance = 1e-12;
  int multistart_count = 5;
  std::uint64_t seed = 1;

  void validate() const;
};

// Gauss-Newton middle level, the default for generalized_profiling.
inline OptimizerConfig profiling_defaults() {
  OptimizerConfig cfg;
  cfg.algorithm = Algorithm::GaussNewton;
  cfg.max_iters = 200;
  cfg.tolerance = 1e-10;
  return cfg;
}

struct EstimateReport {
  std::string method;
  Vector theta_hat;
  std::optional<Vector> x0_hat;
  double objective = kInf;
  double runtime = 0;  // seconds
  int iterations = 0;
  bool converged = false;
  std::optional<double> lambda;
  std::vector<double> trace;               // per-round criterion where the method has rounds
  std::vector<std::string> diagnostics;    // free-form notes, one per line
};

// key=value record, one key per line.
void write_report(std::ostream& out, const EstimateReport& report);
EstimateReport read_report(std::istream& in);
void save_report(const std::string& path, const EstimateReport& report);
EstimateReport load_report(const std::string& path);

// sum_i ||y_i - x(t_i; theta, x0)||^2 with x from integrate at `refine`.
// Returns +inf when the integration blows up.
double explicit_misfit(const Dataset& ds, const OdeSystem& sys, const Vector& theta,
                       const Vector& x0, int refine);

// sum_j w_j ||x'(s_j) - f(x(s_j), s_j; theta)||^2 over the given nodes.
double gradient_mismatch(const SplineFit& fit, const OdeSystem& sys, const Vector& theta,
                         const Vector& nodes, const Vector& weights);

struct GradientMatch {
  Vector theta;
  double objective = kInf;
  int iterations = 0;
  bool converged = false;
};

// Minimizes gradient_mismatch over theta by Levenberg-Marquardt from `start`,
// with exact parameter Jacobians. Iterates stay inside the parameter box.
GradientMatch match_gradients(const SplineFit& fit, const OdeSystem& sys, const Vector& nodes,
                              const Vector& weights, const Vector& start);

EstimateReport nls_explicit(const Dataset& ds, const OdeSystem& sys, const OptimizerConfig& cfg = {},
                            int refine = 10);

EstimateReport two_step(const Dataset& ds, const OdeSystem& sys, const SplineBasis& basis);

struct PdaOptions {
  int max_rounds = 50;
  double tolerance = 1e-6;  // on max |theta change| between rounds
};

EstimateReport iterated_pda(const Dataset& ds, const OdeSystem& sys, const SplineBasis& basis,
                            double lambda, const Vector& theta0, const PdaOptions& options = {});

EstimateReport generalized_profiling(const Dataset& ds, const OdeSystem& sys,
                                     const SplineBasis& basis,
                                     const std::vector<double>& lambda_grid,
                                     const OptimizerConfig& cfg = profiling_defaults());

}  // namespace odeest
