#pragma once

#include <functional>

#include "odeest/models.hpp"

namespace odeest::optim {

struct Result {
  Vector x;
  double value = kInf;  // objective, or sum of squared residuals for least squares
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

struct NelderMeadOptions {
  int max_evaluations = 4000;
  double f_tolerance = 1e-12;      // relative spread of simplex values
  double f_abs_tolerance = 1e-14;  // absolute floor for the spread
  double x_tolerance = 1e-9;       // simplex diameter, relative to |x| + 1
  int restarts = 1;                // rebuild the simplex at the optimum this many times
};

// Derivative-free downhill simplex. Non-finite objective values act as +inf,
// which is how infeasible points are expressed.
Result nelder_mead(const std::function<double(const Vector&)>& f, const Vector& x0,
                   const Vector& initial_step, const NelderMeadOptions& options = {});

struct LeastSquaresOptions {
  int max_iterations = 200;
  double gradient_tolerance = 1e-12;  // on ||J'r||_inf relative to 1 + cost
  double step_tolerance = 1e-12;      // relative step size
  double cost_tolerance = 1e-15;      // relative decrease
};

using Residuals = std::function<bool(const Vector& x, Vector& r)>;
using Jacobian = std::function<bool(const Vector& x, Matrix& J)>;

// Levenberg-Marquardt (damped Gauss-Newton) on sum r(x)^2. The residual
// callback returns false for infeasible x; such trial points are rejected and
// the damping grows, so iterates never leave the feasible set. Without a
// Jacobian callback, central differences with relative step 1e-6 are used.
Result levenberg_marquardt(const Residuals& residuals, const Vector& x0,
                           const LeastSquaresOptions& options = {},
                           const Jacobian& jacobian = nullptr);

}  // namespace odeest::optim
