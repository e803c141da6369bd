#include "odeest/models.hpp"

#include <fstream>
#include <type_traits>
#include <utility>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace odeest {

OdeSystem::OdeSystem(std::string name, int state_dim, int param_dim, std::vector<Interval> bounds,
                     Field field, AdField ad_field, AdFieldSmall ad_small, Vector nominal_theta)
    : name_(std::move(name)),
      p_(state_dim),
      q_(param_dim),
      bounds_(std::move(bounds)),
      field_(std::move(field)),
      ad_field_(std::move(ad_field)),
      ad_small_(std::move(ad_small)),
      nominal_(std::move(nominal_theta)) {
  if (p_ <= 0 || q_ <= 0) throw InvalidInput("system '" + name_ + "': p and q must be positive");
  if (static_cast<int>(bounds_.size()) != q_)
    throw InvalidInput("system '" + name_ + "': need one bound per parameter");
  for (const auto& b : bounds_)
    if (!(b.lower < b.upper)) throw InvalidInput("system '" + name_ + "': empty parameter interval");
  if (nominal_.size() == 0) {
    nominal_.resize(q_);
    for (int j = 0; j < q_; ++j) {
      const auto& b = bounds_[j];
      if (b.finite())
        nominal_(j) = 0.5 * (b.lower + b.upper);
      else if (std::isfinite(b.lower))
        nominal_(j) = b.lower + 1.0;
      else if (std::isfinite(b.upper))
        nominal_(j) = b.upper - 1.0;
      else
        nominal_(j) = 0.0;
    }
  }
  if (nominal_.size() != q_) throw InvalidInput("system '" + name_ + "': nominal theta has wrong length");
}

bool OdeSystem::in_bounds(const Vector& theta) const {
  if (theta.size() != q_) return false;
  for (int j = 0; j < q_; ++j)
    if (!bounds_[j].admits(theta(j))) return false;
  return true;
}

void OdeSystem::check_theta(const Vector& theta) const {
  if (theta.size() != q_) {
    std::ostringstream msg;
    msg << name_ << ": theta has length " << theta.size() << ", expected " << q_;
    throw InvalidInput(msg.str());
  }
  for (int j = 0; j < q_; ++j) {
    if (!bounds_[j].admits(theta(j))) {
      std::ostringstream msg;
      msg << name_ << ": theta" << j + 1 << "=" << theta(j) << " outside (" << bounds_[j].lower
          << ", " << bounds_[j].upper << ")";
      throw BoundsError(msg.str());
    }
  }
}

void OdeSystem::check_state(const Vector& x) const {
  if (x.size() != p_) {
    std::ostringstream msg;
    msg << name_ << ": state has length " << x.size() << ", expected " << p_;
    throw InvalidInput(msg.str());
  }
}

namespace {

// Seeds only the requested directions: x first (when dfdx is wanted), then theta.
template <class Ad, class Fn>
void linearize_with(const Fn& fn, int p, int q, const Vector& x, double t, const Vector& theta,
                    Vector& f, Matrix* dfdx, Matrix* dfdtheta) {
  using Deriv = std::decay_t<decltype(std::declval<Ad>().derivatives())>;
  const int nx = dfdx ? p : 0;
  const int nvar = nx + (dfdtheta ? q : 0);
  const Deriv zero = Deriv::Zero(nvar);
  VectorX<Ad> xa(p), tha(q), out(p);
  for (int i = 0; i < p; ++i) xa(i) = dfdx ? Ad(x(i), nvar, i) : Ad(x(i), zero);
  for (int j = 0; j < q; ++j) tha(j) = dfdtheta ? Ad(theta(j), nvar, nx + j) : Ad(theta(j), zero);
  const Ad ta(t, zero);
  for (int i = 0; i < p; ++i) out(i) = Ad(0.0, zero);
  fn(xa, ta, tha, out);
  f.resize(p);
  if (dfdx) dfdx->resize(p, p);
  if (dfdtheta) dfdtheta->resize(p, q);
  for (int i = 0; i < p; ++i) {
    f(i) = out(i).value();
    // A component that does not depend on any input comes back with an empty derivative.
    const auto& d = out(i).derivatives();
    const bool has = d.size() == nvar;
    if (dfdx)
      for (int k = 0; k < p; ++k) (*dfdx)(i, k) = has ? d(k) : 0.0;
    if (dfdtheta)
      for (int j = 0; j < q; ++j) (*dfdtheta)(i, j) = has ? d(nx + j) : 0.0;
  }
}

}  // namespace

void OdeSystem::linearize(const Vector& x, double t, const Vector& theta, Vector& f,
                          Matrix* dfdx, Matrix* dfdtheta) const {
  const int nvar = (dfdx ? p_ : 0) + (dfdtheta ? q_ : 0);
  if (nvar <= kSmallAutoDiff)
    linearize_with<AutoDiffSmall>(ad_small_, p_, q_, x, t, theta, f, dfdx, dfdtheta);
  else
    linearize_with<AutoDiff>(ad_field_, p_, q_, x, t, theta, f, dfdx, dfdtheta);
}

TimeGrid::TimeGrid(Vector points) : points_(std::move(points)) {
  if (points_.size() < 2) throw ValidationError("time grid needs at least 2 points");
  for (Eigen::Index i = 0; i < points_.size(); ++i) {
    if (!std::isfinite(points_(i))) throw ValidationError("time grid contains a non-finite value");
    if (i > 0 && !(points_(i) > points_(i - 1))) {
      std::ostringstream msg;
      msg << "non-increasing grid at index " << i << " (" << points_(i - 1) << " then " << points_(i)
          << ")";
      throw ValidationError(msg.str());
    }
  }
}

TimeGrid TimeGrid::uniform(double t0, double t1, int n) {
  if (n < 2 || !(t1 > t0)) throw InvalidInput("uniform grid needs n >= 2 and t1 > t0");
  Vector pts(n);
  const double h = (t1 - t0) / (n - 1);
  for (int i = 0; i < n; ++i) pts(i) = t0 + h * i;
  pts(n - 1) = t1;
  return TimeGrid(std::move(pts));
}

Vector eval_field(const OdeSystem& sys, const Vector& x, double t, const Vector& theta) {
  sys.check_state(x);
  sys.check_theta(theta);
  Vector dx(sys.state_dim());
  sys.eval_unchecked(x, t, theta, dx);
  return dx;
}

Rk4Stepper::Rk4Stepper(const OdeSystem& sys)
    : sys_(&sys),
      k1_(sys.state_dim()),
      k2_(sys.state_dim()),
      k3_(sys.state_dim()),
      k4_(sys.state_dim()),
      tmp_(sys.state_dim()) {}

namespace {

void check_stage(const Vector& k, int stage, double t) {
  if (!k.allFinite()) {
    std::ostringstream msg;
    msg << "non-finite field value in RK4 stage k" << stage << " at t=" << std::setprecision(17) << t;
    throw NumericalBlowup(msg.str(), stage, t);
  }
}

}  // namespace

void Rk4Stepper::step(Vector& x, double t, double h, const Vector& theta) {
  const double half = 0.5 * h;
  sys_->eval_unchecked(x, t, theta, k1_);
  check_stage(k1_, 1, t);
  tmp_.noalias() = x + half * k1_;
  sys_->eval_unchecked(tmp_, t + half, theta, k2_);
  check_stage(k2_, 2, t + half);
  tmp_.noalias() = x + half * k2_;
  sys_->eval_unchecked(tmp_, t + half, theta, k3_);
  check_stage(k3_, 3, t + half);
  tmp_.noalias() = x + h * k3_;
  sys_->eval_unchecked(tmp_, t + h, theta, k4_);
  check_stage(k4_, 4, t + h);
  x += (h / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_);
}

void Rk4Stepper::advance(Vector& x, double t0, double t1, int substeps, const Vector& theta) {
  const double h = (t1 - t0) / substeps;
  for (int s = 0; s < substeps; ++s) step(x, t0 + s * h, h, theta);
}

Vector rk4_step(const OdeSystem& sys, const Vector& x, double t, double h, const Vector& theta) {
  sys.check_state(x);
  sys.check_theta(theta);
  if (!(h > 0)) throw InvalidInput("rk4_step: step size must be positive");
  Rk4Stepper stepper(sys);
  Vector out = x;
  stepper.step(out, t, h, theta);
  return out;
}

Trajectory integrate(const OdeSystem& sys, const Vector& x0, const TimeGrid& grid,
                     const Vector& theta, int refine) {
  sys.check_state(x0);
  sys.check_theta(theta);
  if (refine < 1) throw InvalidInput("integrate: refine must be >= 1");
  const int n = grid.size();
  Matrix states(n, sys.state_dim());
  Rk4Stepper stepper(sys);
  Vector x = x0;
  states.row(0) = x.transpose();
  for (int i = 1; i < n; ++i) {
    stepper.advance(x, grid[i - 1], grid[i], refine, theta);
    states.row(i) = x.transpose();
  }
  return Trajectory{grid, std::move(states)};
}

namespace {

struct FitzHughNagumo {
  template <class S>
  void operator()(const VectorX<S>& x, const S&, const VectorX<S>& th, VectorX<S>& dx) const {
    dx(0) = th(2) * (x(0) - x(0) * x(0) * x(0) / 3.0 + x(1));
    dx(1) = -(x(0) - th(0) + th(1) * x(1)) / th(2);
  }
};

struct Sir {
  double population;
  template <class S>
  void operator()(const VectorX<S>& x, const S&, const VectorX<S>& th, VectorX<S>& dx) const {
    const S infections = th(0) * x(1) * x(0) / population;
    const S recoveries = th(1) * x(1);
    dx(0) = -infections;
    dx(1) = infections - recoveries;
    dx(2) = recoveries;
  }
};

struct Lorenz96 {
  int p;
  template <class S>
  void operator()(const VectorX<S>& x, const S&, const VectorX<S>& th, VectorX<S>& dx) const {
    for (int j = 0; j < p; ++j) {
      const int next = (j + 1) % p;
      const int prev = (j + p - 1) % p;
      const int prev2 = (j + p - 2) % p;
      dx(j) = (x(next) - x(prev2)) * x(prev) - x(j) + th(0);
    }
  }
};

}  // namespace

OdeSystem fitzhugh_nagumo() {
  return OdeSystem::from_functor("fitzhugh_nagumo", 2, 3,
                                 {{-0.8, 0.8}, {-0.8, 0.8}, {0.0, 8.0}}, FitzHughNagumo{});
}

OdeSystem sir(double population) {
  if (!(population > 0) || !std::isfinite(population))
    throw InvalidInput("sir: population N must be positive");
  Vector nominal = Vector::Zero(2);
  return OdeSystem::from_functor("sir", 3, 2, {{0.0, kInf}, {0.0, kInf}}, Sir{population},
                                 nominal);
}

OdeSystem lorenz96(int p, double forcing) {
  if (p < 4) throw InvalidInput("lorenz96: p must be >= 4");
  Vector nominal(1);
  nominal << forcing;
  return OdeSystem::from_functor("lorenz96", p, 1, {{-kInf, kInf}}, Lorenz96{p}, nominal);
}

OdeSystem builtin(const std::string& name, const std::map<std::string, double>& args) {
  auto arg = [&](const std::string& key, double fallback) {
    auto it = args.find(key);
    return it == args.end() ? fallback : it->second;
  };
  if (name == "fhn" || name == "fitzhugh_nagumo") return fitzhugh_nagumo();
  if (name == "sir") return sir(arg("N", 1000.0));
  if (name == "lorenz96") {
    const double p = arg("p", 10.0);
    if (p != static_cast<int>(p)) throw InvalidInput("lorenz96: p must be an integer");
    return lorenz96(static_cast<int>(p), arg("F", 8.0));
  }
  throw LookupError("unknown system '" + name + "'");
}

void write_trajectory(std::ostream& out, const Trajectory& traj) {
  out << "t";
  for (Eigen::Index j = 0; j < traj.states.cols(); ++j) out << ",x" << j + 1;
  out << '\n' << std::setprecision(17);
  for (int i = 0; i < traj.size(); ++i) {
    out << traj.grid[i];
    for (Eigen::Index j = 0; j < traj.states.cols(); ++j) out << ',' << traj.states(i, j);
    out << '\n';
  }
}

void save_trajectory(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open '" + path + "' for writing");
  write_trajectory(out, traj);
}

}  // namespace odeest
