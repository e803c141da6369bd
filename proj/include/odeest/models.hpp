#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/AutoDiff>

#include <cmath>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "odeest/error.hpp"

namespace odeest {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Forward-mode scalars used to differentiate vector fields. The small variant
// keeps its derivative vector on the stack and serves systems with p + q <= 16.
using AutoDiff = Eigen::AutoDiffScalar<Eigen::VectorXd>;
inline constexpr int kSmallAutoDiff = 16;
using AutoDiffSmall =
    Eigen::AutoDiffScalar<Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kSmallAutoDiff, 1>>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kBoundsTolerance = 1e-12;

struct Interval {
  double lower = -kInf;
  double upper = kInf;

  bool finite() const { return std::isfinite(lower) && std::isfinite(upper); }
  bool admits(double v) const {
    return v > lower - kBoundsTolerance && v < upper + kBoundsTolerance;
  }
};

// A vector field f(x, t; theta) with p states and q parameters.
//
// Fields are written once as a functor templated on the scalar type and
// wrapped twice: a double path for integration and an AutoDiff path that
// yields the state and parameter Jacobians used by Gauss-Newton.
class OdeSystem {
 public:
  using Field = std::function<void(const Vector&, double, const Vector&, Vector&)>;
  using AdField = std::function<void(const VectorX<AutoDiff>&, const AutoDiff&,
                                     const VectorX<AutoDiff>&, VectorX<AutoDiff>&)>;
  using AdFieldSmall = std::function<void(const VectorX<AutoDiffSmall>&, const AutoDiffSmall&,
                                          const VectorX<AutoDiffSmall>&, VectorX<AutoDiffSmall>&)>;

  OdeSystem(std::string name, int state_dim, int param_dim, std::vector<Interval> bounds,
            Field field, AdField ad_field, AdFieldSmall ad_small, Vector nominal_theta);

  // Build a system from a functor with signature
  //   template <class S> void operator()(const VectorX<S>& x, const S& t,
  //                                      const VectorX<S>& theta, VectorX<S>& dx) const;
  // A generic lambda taking (const auto&, const auto&, const auto&, auto&) works too.
  template <class Functor>
  static OdeSystem from_functor(std::string name, int state_dim, int param_dim,
                                std::vector<Interval> bounds, Functor f,
                                Vector nominal_theta = Vector()) {
    Field field = [f](const Vector& x, double t, const Vector& th, Vector& dx) {
      f(x, t, th, dx);
    };
    AdField ad = [f](const VectorX<AutoDiff>& x, const AutoDiff& t,
                     const VectorX<AutoDiff>& th, VectorX<AutoDiff>& dx) { f(x, t, th, dx); };
    AdFieldSmall ad_small = [f](const VectorX<AutoDiffSmall>& x, const AutoDiffSmall& t,
                                const VectorX<AutoDiffSmall>& th,
                                VectorX<AutoDiffSmall>& dx) { f(x, t, th, dx); };
    return OdeSystem(std::move(name), state_dim, param_dim, std::move(bounds), std::move(field),
                     std::move(ad), std::move(ad_small), std::move(nominal_theta));
  }

  const std::string& name() const { return name_; }
  int state_dim() const { return p_; }
  int param_dim() const { return q_; }
  const std::vector<Interval>& bounds() const { return bounds_; }
  // Deterministic starting point for local optimizers.
  const Vector& nominal_theta() const { return nominal_; }

  bool in_bounds(const Vector& theta) const;
  // Throws InvalidInput on a length mismatch and BoundsError outside the box.
  void check_theta(const Vector& theta) const;
  void check_state(const Vector& x) const;

  // No dimension or bounds checks; dx must already have length p.
  void eval_unchecked(const Vector& x, double t, const Vector& theta, Vector& dx) const {
    field_(x, t, theta, dx);
  }

  // f and its Jacobians with respect to x (p x p) and theta (p x q).
  // Either Jacobian pointer may be null.
  void linearize(const Vector& x, double t, const Vector& theta, Vector& f, Matrix* dfdx,
                 Matrix* dfdtheta) const;

 private:
  std::string name_;
  int p_;
  int q_;
  std::vector<Interval> bounds_;
  Field field_;
  AdField ad_field_;
  AdFieldSmall ad_small_;
  Vector nominal_;
};

class TimeGrid {
 public:
  explicit TimeGrid(Vector points);
  static TimeGrid uniform(double t0, double t1, int n);

  const Vector& points() const { return points_; }
  int size() const { return static_cast<int>(points_.size()); }
  double operator[](int i) const { return points_(i); }
  double front() const { return points_(0); }
  double back() const { return points_(points_.size() - 1); }

 private:
  Vector points_;
};

// Row i of `states` is x(t_i).
struct Trajectory {
  TimeGrid grid;
  Matrix states;

  int size() const { return grid.size(); }
  Vector state(int i) const { return states.row(i).transpose(); }
};

Vector eval_field(const OdeSystem& sys, const Vector& x, double t, const Vector& theta);

// One classical fourth-order Runge-Kutta step of size h.
Vector rk4_step(const OdeSystem& sys, const Vector& x, double t, double h, const Vector& theta);

// Each gap of `grid` is split into `refine` equal RK4 substeps.
Trajectory integrate(const OdeSystem& sys, const Vector& x0, const TimeGrid& grid,
                     const Vector& theta, int refine = 10);

// Reusable RK4 stepping state for hot loops (estimators, particle filters).
// Not thread-safe; use one per thread.
class Rk4Stepper {
 public:
  explicit Rk4Stepper(const OdeSystem& sys);
  // Advances x in place. Throws NumericalBlowup naming the failing stage.
  void step(Vector& x, double t, double h, const Vector& theta);
  // Advances x from t0 to t1 in `substeps` equal steps.
  void advance(Vector& x, double t0, double t1, int substeps, const Vector& theta);

 private:
  const OdeSystem* sys_;
  Vector k1_, k2_, k3_, k4_, tmp_;
};

// Built-in systems.
OdeSystem fitzhugh_nagumo();
OdeSystem sir(double population);
OdeSystem lorenz96(int p, double forcing);

// Lookup by name: "fhn" / "fitzhugh_nagumo", "sir" (arg "N"), "lorenz96" (args "p", "F").
OdeSystem builtin(const std::string& name, const std::map<std::string, double>& args = {});

// Header `t,x1,...,xp`, 17 significant digits.
void write_trajectory(std::ostream& out, const Trajectory& traj);
void save_trajectory(const std::string& path, const Trajectory& traj);

}  // namespace odeest
