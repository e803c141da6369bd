#pragma once

#include <optional>
#include <vector>

#include <Eigen/SparseCore>

#include "odeest/models.hpp"
#include "odeest/simulate.hpp"

namespace odeest {

// Clamped cubic B-spline basis on [lower, upper].
class SplineBasis {
 public:
  static constexpr int kOrder = 4;

  SplineBasis(double lower, double upper, Vector interior_knots);
  static SplineBasis uniform(double lower, double upper, int n_interior);
  // Equally spaced interior knots over the dataset's time span.
  static SplineBasis for_dataset(const Dataset& ds, int n_interior = 25);

  int size() const { return static_cast<int>(knots_.size()) - kOrder; }
  int interior_count() const { return size() - kOrder; }
  double lower() const { return lower_; }
  double upper() const { return upper_; }
  const Vector& knots() const { return knots_; }

  // The four non-zero basis values (and optionally first derivatives) at t.
  // Returns the index of the first non-zero function. Throws DomainError
  // outside [lower, upper].
  int eval_local(double t, Eigen::Vector4d& values, Eigen::Vector4d* derivs = nullptr) const;

  Matrix design(const Vector& times) const;
  Matrix design_deriv(const Vector& times) const;

 private:
  double lower_;
  double upper_;
  Vector knots_;
};

// Full length-k vectors b(t) and b'(t).
Vector eval_basis(const SplineBasis& basis, double t);
Vector eval_basis_deriv(const SplineBasis& basis, double t);

// x(t) = beta' b(t) with one shared basis; column c of beta belongs to coordinate c.
struct SplineFit {
  SplineBasis basis;
  Matrix beta;  // k x p

  int dim() const { return static_cast<int>(beta.cols()); }
  Vector value(double t) const;
  Vector derivative(double t) const;
  // Row i holds x(times_i) (or its derivative).
  Matrix values(const Vector& times) const;
  Matrix derivatives(const Vector& times) const;
  Trajectory curve(const TimeGrid& grid) const { return {grid, values(grid.points())}; }
};

// Composite Simpson rule.
struct Quadrature {
  Vector nodes;
  Vector weights;

  static Quadrature simpson(double lower, double upper, int intervals);
  // Five nodes per observation gap over [t_1, t_n].
  static Quadrature for_dataset(const Dataset& ds, int density = 5);
};

// Least squares fit of each coordinate on the basis.
SplineFit fit_ls(const Dataset& ds, const SplineBasis& basis);

// Quadrature approximation of the integral of ||x'(t) - f(x(t), t; theta)||^2.
double penalty(const SplineFit& fit, const OdeSystem& sys, const Vector& theta,
               const Quadrature& quad);

struct GaussNewtonOptions {
  int max_iterations = 100;
  double gradient_tolerance = 1e-8;
};

struct PenalizedFit {
  SplineFit fit;
  double objective = 0;  // misfit + lambda * penalty
  double misfit = 0;     // sum_i ||y_i - x(t_i)||^2
  double penalty = 0;
  int iterations = 0;
  std::vector<double> objective_history;  // one entry per accepted iterate, starting point first
};

struct GcvResult {
  double score = 0;
  double df = 0;   // trace of the linearized smoother, per coordinate
  double rss = 0;  // summed over coordinates
};

// Penalized smoothing problem for a fixed dataset, basis and quadrature.
// Basis evaluations are cached so repeated fits (profiling, PDA rounds) are cheap.
class PenalizedSmoother {
 public:
  PenalizedSmoother(const Dataset& ds, SplineBasis basis, Quadrature quad);

  const SplineBasis& basis() const { return basis_; }
  const Quadrature& quadrature() const { return quad_; }
  int n() const { return n_; }

  // The unpenalized least squares solution.
  const SplineFit& ls_fit() const { return ls_; }

  // Gauss-Newton with backtracking from `start` (defaults to the least squares fit).
  // Throws ConvergenceError when max_iterations is exhausted.
  PenalizedFit fit(const OdeSystem& sys, const Vector& theta, double lambda,
                   const std::optional<Matrix>& start = std::nullopt,
                   const GaussNewtonOptions& options = {}) const;

  // Objective pieces at a given coefficient matrix.
  double misfit(const Matrix& beta) const;
  double penalty(const Matrix& beta, const OdeSystem& sys, const Vector& theta) const;

  // d vec(beta) / d theta at a converged fit, (k p) x q, by implicit differentiation of
  // the stationarity condition. Second derivatives of f come from differencing its Jacobians.
  Matrix coefficient_sensitivity(const PenalizedFit& fit, const OdeSystem& sys,
                                 const Vector& theta, double lambda) const;

  // Gauss-Newton matrix J'J of misfit + lambda * penalty at beta, over vec(beta)
  // (index c * k + j). Half the Hessian when the residuals vanish.
  Eigen::SparseMatrix<double> normal_matrix(const Matrix& beta, const OdeSystem& sys,
                                            const Vector& theta, double lambda) const;

  // GCV = n * RSS / (n - df)^2 at a converged fit. Throws DegenerateSmoother when df >= n.
  GcvResult gcv(const PenalizedFit& fit, const OdeSystem& sys, const Vector& theta,
                double lambda) const;

 private:
  struct Band;
  // Gauss-Newton normal equations H = J'J and gradient half g = J'r.
  void normal_equations(const Matrix& beta, const OdeSystem& sys, const Vector& theta,
                        double lambda, Band& H, Vector& g) const;

  SplineBasis basis_;
  Quadrature quad_;
  int n_;
  int p_;
  Matrix y_;
  std::vector<int> obs_first_;
  Matrix obs_values_;  // n x 4
  std::vector<int> quad_first_;
  Matrix quad_values_;  // Q x 4
  Matrix quad_derivs_;  // Q x 4
  SplineFit ls_;
};

PenalizedFit fit_penalized(const Dataset& ds, const SplineBasis& basis, const OdeSystem& sys,
                           const Vector& theta, double lambda, const Quadrature& quad,
                           const GaussNewtonOptions& options = {});

GcvResult gcv_score(const Dataset& ds, const SplineBasis& basis, const OdeSystem& sys,
                    const Vector& theta, double lambda, const Quadrature& quad);

}  // namespace odeest
