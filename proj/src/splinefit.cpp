#include "odeest/splinefit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/SparseCholesky>

namespace odeest {

// Symmetric matrix over vec(beta) (index c * k + j) whose (c1, c2) blocks are banded
// with half-bandwidth 3, stored as k x 7 diagonals per block. The factorization works in
// the interleaved order j * p + c, where the whole matrix is banded.
struct PenalizedSmoother::Band {
  int k, p;
  std::vector<Matrix> blocks;

  Band(int k_, int p_) : k(k_), p(p_), blocks(static_cast<std::size_t>(p_ * p_), Matrix::Zero(k_, 7)) {}

  template <class Block>
  void add(int c1, int c2, int s, const Block& v) {
    Matrix& m = blocks[c1 * p + c2];
    for (int l2 = 0; l2 < 4; ++l2)
      for (int l1 = 0; l1 < 4; ++l1) m(s + l1, l2 - l1 + 3) += v(l1, l2);
  }

  Eigen::SparseMatrix<double> sparse() const {
    std::vector<Eigen::Triplet<double>> entries;
    entries.reserve(static_cast<std::size_t>(p * p * k * 7));
    for (int c1 = 0; c1 < p; ++c1)
      for (int c2 = 0; c2 < p; ++c2) {
        const Matrix& m = blocks[c1 * p + c2];
        for (int i = 0; i < k; ++i)
          for (int o = 0; o < 7; ++o) {
            const int j = i + o - 3;
            if (j >= 0 && j < k && m(i, o) != 0.0) entries.emplace_back(i * p + c1, j * p + c2, m(i, o));
          }
      }
    Eigen::SparseMatrix<double> H(k * p, k * p);
    H.setFromTriplets(entries.begin(), entries.end());
    return H;
  }

  Matrix solve(const Matrix& rhs) const {
    // Row c * k + j of rhs goes to row j * p + c.
    Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> perm(k * p);
    for (int c = 0; c < p; ++c)
      for (int j = 0; j < k; ++j) perm.indices()(c * k + j) = j * p + c;
    const Matrix prhs = perm * rhs;
    const Eigen::SparseMatrix<double> H = sparse();
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower, Eigen::NaturalOrdering<int>> ldlt(H);
    if (ldlt.info() == Eigen::Success) {
      Matrix x = ldlt.solve(prhs);
      if (ldlt.info() == Eigen::Success && x.allFinite()) return perm.transpose() * x;
    }
    return perm.transpose() * Matrix(Matrix(H).ldlt().solve(prhs));
  }
};

SplineBasis::SplineBasis(double lower, double upper, Vector interior_knots)
    : lower_(lower), upper_(upper) {
  if (!(upper > lower)) throw InvalidInput("spline basis: empty interval");
  const auto m = interior_knots.size();
  for (Eigen::Index i = 0; i < m; ++i) {
    if (!(interior_knots(i) > lower && interior_knots(i) < upper))
      throw InvalidInput("spline basis: interior knots must lie strictly inside the interval");
    if (i > 0 && !(interior_knots(i) > interior_knots(i - 1)))
      throw InvalidInput("spline basis: interior knots must be strictly increasing");
  }
  knots_.resize(m + 2 * kOrder);
  knots_.head(kOrder).setConstant(lower);
  knots_.segment(kOrder, m) = interior_knots;
  knots_.tail(kOrder).setConstant(upper);
}

SplineBasis SplineBasis::uniform(double lower, double upper, int n_interior) {
  if (n_interior < 0) throw InvalidInput("spline basis: negative knot count");
  Vector interior(n_interior);
  const double h = (upper - lower) / (n_interior + 1);
  for (int i = 0; i < n_interior; ++i) interior(i) = lower + h * (i + 1);
  return SplineBasis(lower, upper, std::move(interior));
}

SplineBasis SplineBasis::for_dataset(const Dataset& ds, int n_interior) {
  return uniform(ds.grid.front(), ds.grid.back(), n_interior);
}

int SplineBasis::eval_local(double t, Eigen::Vector4d& values, Eigen::Vector4d* derivs) const {
  const double slack = 1e-12 * (upper_ - lower_);
  if (!(t >= lower_ - slack && t <= upper_ + slack)) {
    std::ostringstream msg;
    msg << "t=" << t << " outside spline domain [" << lower_ << ", " << upper_ << "]";
    throw DomainError(msg.str());
  }
  t = std::clamp(t, lower_, upper_);
  const int k = size();
  const double* u = knots_.data();
  // Last span index i in [3, k-1] with u[i] <= t.
  const int i = static_cast<int>(std::upper_bound(u + kOrder, u + k, t) - u) - 1;

  double left[kOrder], right[kOrder], N[kOrder], N2[3] = {0, 0, 0};
  N[0] = 1.0;
  for (int j = 1; j < kOrder; ++j) {
    left[j] = t - u[i + 1 - j];
    right[j] = u[i + j] - t;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double temp = N[r] / (right[r + 1] + left[j - r]);
      N[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    N[j] = saved;
    if (j == 2) std::copy(N, N + 3, N2);
  }
  for (int l = 0; l < kOrder; ++l) values(l) = N[l];

  if (derivs) {
    // d/dt B_{m,3} = 3 [B_{m,2} / (u_{m+3} - u_m) - B_{m+1,2} / (u_{m+4} - u_{m+1})];
    // N2 holds the quadratic functions i-2, i-1, i.
    for (int l = 0; l < kOrder; ++l) {
      const int m = i - 3 + l;
      double d = 0.0;
      if (l >= 1) {
        const double den = u[m + 3] - u[m];
        if (den > 0) d += N2[l - 1] / den;
      }
      if (l <= 2) {
        const double den = u[m + 4] - u[m + 1];
        if (den > 0) d -= N2[l] / den;
      }
      (*derivs)(l) = 3.0 * d;
    }
  }
  return i - 3;
}

Matrix SplineBasis::design(const Vector& times) const {
  Matrix B = Matrix::Zero(times.size(), size());
  Eigen::Vector4d v;
  for (Eigen::Index r = 0; r < times.size(); ++r) {
    const int s = eval_local(times(r), v);
    B.row(r).segment<4>(s) = v.transpose();
  }
  return B;
}

Matrix SplineBasis::design_deriv(const Vector& times) const {
  Matrix D = Matrix::Zero(times.size(), size());
  Eigen::Vector4d v, d;
  for (Eigen::Index r = 0; r < times.size(); ++r) {
    const int s = eval_local(times(r), v, &d);
    D.row(r).segment<4>(s) = d.transpose();
  }
  return D;
}

Vector eval_basis(const SplineBasis& basis, double t) {
  Vector out = Vector::Zero(basis.size());
  Eigen::Vector4d v;
  const int s = basis.eval_local(t, v);
  out.segment<4>(s) = v;
  return out;
}

Vector eval_basis_deriv(const SplineBasis& basis, double t) {
  Vector out = Vector::Zero(basis.size());
  Eigen::Vector4d v, d;
  const int s = basis.eval_local(t, v, &d);
  out.segment<4>(s) = d;
  return out;
}

Vector SplineFit::value(double t) const {
  Eigen::Vector4d v;
  const int s = basis.eval_local(t, v);
  return beta.middleRows<4>(s).transpose() * v;
}

Vector SplineFit::derivative(double t) const {
  Eigen::Vector4d v, d;
  const int s = basis.eval_local(t, v, &d);
  return beta.middleRows<4>(s).transpose() * d;
}

Matrix SplineFit::values(const Vector& times) const { return basis.design(times) * beta; }

Matrix SplineFit::derivatives(const Vector& times) const {
  return basis.design_deriv(times) * beta;
}

Quadrature Quadrature::simpson(double lower, double upper, int intervals) {
  if (intervals < 2 || intervals % 2 != 0)
    throw InvalidInput("Simpson quadrature needs an even number of intervals");
  if (!(upper > lower)) throw InvalidInput("Simpson quadrature: empty interval");
  Quadrature q;
  q.nodes.resize(intervals + 1);
  q.weights.resize(intervals + 1);
  const double h = (upper - lower) / intervals;
  for (int i = 0; i <= intervals; ++i) {
    q.nodes(i) = lower + h * i;
    q.weights(i) = (i == 0 || i == intervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
  }
  q.nodes(intervals) = upper;
  q.weights *= h / 3.0;
  return q;
}

Quadrature Quadrature::for_dataset(const Dataset& ds, int density) {
  int intervals = density * (ds.grid.size() - 1);
  if (intervals % 2) ++intervals;
  return simpson(ds.grid.front(), ds.grid.back(), intervals);
}

SplineFit fit_ls(const Dataset& ds, const SplineBasis& basis) {
  const int n = ds.n();
  const int k = basis.size();
  auto conditioning = [&](const std::string& why) {
    std::ostringstream msg;
    msg << "spline design is rank deficient (" << why << "): k=" << k << " basis functions, n=" << n
        << " observations";
    throw ConditioningError(msg.str());
  };
  if (n < k) conditioning("fewer observations than basis functions");
  const Matrix B = basis.design(ds.grid.points());
  Eigen::ColPivHouseholderQR<Matrix> qr(B);
  if (qr.rank() < k) conditioning("rank " + std::to_string(qr.rank()));
  return SplineFit{basis, qr.solve(ds.observations)};
}

double penalty(const SplineFit& fit, const OdeSystem& sys, const Vector& theta,
               const Quadrature& quad) {
  sys.check_theta(theta);
  if (fit.dim() != sys.state_dim()) throw InvalidInput("penalty: fit and system dimensions differ");
  Vector f(sys.state_dim());
  double total = 0.0;
  for (Eigen::Index q = 0; q < quad.nodes.size(); ++q) {
    const double t = quad.nodes(q);
    const Vector x = fit.value(t);
    sys.eval_unchecked(x, t, theta, f);
    total += quad.weights(q) * (fit.derivative(t) - f).squaredNorm();
  }
  return total;
}

PenalizedSmoother::PenalizedSmoother(const Dataset& ds, SplineBasis basis, Quadrature quad)
    : basis_(std::move(basis)),
      quad_(std::move(quad)),
      n_(ds.n()),
      p_(ds.dim()),
      y_(ds.observations),
      ls_(fit_ls(ds, basis_)) {
  obs_first_.resize(n_);
  obs_values_.resize(n_, 4);
  Eigen::Vector4d v, d;
  for (int i = 0; i < n_; ++i) {
    obs_first_[i] = basis_.eval_local(ds.grid[i], v);
    obs_values_.row(i) = v.transpose();
  }
  const auto Q = quad_.nodes.size();
  quad_first_.resize(Q);
  quad_values_.resize(Q, 4);
  quad_derivs_.resize(Q, 4);
  for (Eigen::Index q = 0; q < Q; ++q) {
    quad_first_[q] = basis_.eval_local(quad_.nodes(q), v, &d);
    quad_values_.row(q) = v.transpose();
    quad_derivs_.row(q) = d.transpose();
  }
}

double PenalizedSmoother::misfit(const Matrix& beta) const {
  double total = 0.0;
  for (int i = 0; i < n_; ++i) {
    const auto x = (obs_values_.row(i) * beta.middleRows<4>(obs_first_[i])).eval();
    total += (y_.row(i) - x).squaredNorm();
  }
  return total;
}

double PenalizedSmoother::penalty(const Matrix& beta, const OdeSystem& sys,
                                  const Vector& theta) const {
  Vector x(p_), xd(p_), f(p_);
  double total = 0.0;
  for (std::size_t q = 0; q < quad_first_.size(); ++q) {
    const auto block = beta.middleRows<4>(quad_first_[q]);
    x.noalias() = block.transpose() * quad_values_.row(q).transpose();
    xd.noalias() = block.transpose() * quad_derivs_.row(q).transpose();
    sys.eval_unchecked(x, quad_.nodes(q), theta, f);
    total += quad_.weights(q) * (xd - f).squaredNorm();
  }
  return total;
}

void PenalizedSmoother::normal_equations(const Matrix& beta, const OdeSystem& sys,
                                         const Vector& theta, double lambda, Band& H,
                                         Vector& g) const {
  const int k = basis_.size();
  g.setZero(k * p_);
  for (int i = 0; i < n_; ++i) {
    const int s = obs_first_[i];
    const Eigen::Vector4d b = obs_values_.row(i).transpose();
    const Eigen::Matrix4d bb = b * b.transpose();
    for (int c = 0; c < p_; ++c) {
      const double r = y_(i, c) - b.dot(beta.col(c).segment<4>(s));
      H.add(c, c, s, bb);
      g.segment<4>(c * k + s) -= r * b;
    }
  }
  if (lambda == 0.0) return;

  Vector x(p_), xd(p_), f(p_), e(p_), Ate(p_);
  Matrix A(p_, p_), AtA(p_, p_);
  for (std::size_t q = 0; q < quad_first_.size(); ++q) {
    const int s = quad_first_[q];
    const auto block = beta.middleRows<4>(s);
    const Eigen::Vector4d b = quad_values_.row(q).transpose();
    const Eigen::Vector4d d = quad_derivs_.row(q).transpose();
    x.noalias() = block.transpose() * b;
    xd.noalias() = block.transpose() * d;
    sys.linearize(x, quad_.nodes(q), theta, f, &A, nullptr);
    e = xd - f;
    // de_c / dbeta_{s+l, m} = d_l [c == m] - A(c, m) b_l
    const double w = lambda * quad_.weights(q);
    Ate.noalias() = A.transpose() * e;
    AtA.noalias() = A.transpose() * A;
    const Eigen::Matrix4d dd = w * d * d.transpose();
    const Eigen::Matrix4d db = w * d * b.transpose();
    const Eigen::Matrix4d bb = w * b * b.transpose();
    for (int m1 = 0; m1 < p_; ++m1) {
      g.segment<4>(m1 * k + s) += w * (e(m1) * d - Ate(m1) * b);
      for (int m2 = 0; m2 < p_; ++m2) {
        Eigen::Matrix4d blk = AtA(m1, m2) * bb - A(m1, m2) * db - A(m2, m1) * db.transpose();
        if (m1 == m2) blk += dd;
        H.add(m1, m2, s, blk);
      }
    }
  }
}

PenalizedFit PenalizedSmoother::fit(const OdeSystem& sys, const Vector& theta, double lambda,
                                    const std::optional<Matrix>& start,
                                    const GaussNewtonOptions& options) const {
  if (!(lambda >= 0) || !std::isfinite(lambda))
    throw InvalidInput("penalized fit: lambda must be finite and >= 0");
  if (sys.state_dim() != p_) throw InvalidInput("penalized fit: system and data dimensions differ");
  sys.check_theta(theta);
  const int k = basis_.size();

  Matrix beta = start ? *start : ls_.beta;
  if (beta.rows() != k || beta.cols() != p_)
    throw InvalidInput("penalized fit: start coefficients have the wrong shape");

  auto objective = [&](const Matrix& b, double& mis, double& pen) {
    mis = misfit(b);
    pen = lambda == 0.0 ? 0.0 : penalty(b, sys, theta);
    return mis + lambda * pen;
  };

  PenalizedFit out{SplineFit{basis_, beta}, 0, 0, 0, 0, {}};
  double mis = 0, pen = 0;
  double obj = objective(beta, mis, pen);
  if (!std::isfinite(obj)) throw InvalidInput("penalized fit: objective is not finite at the start");
  out.objective_history.push_back(obj);

  Vector g;
  int iter = 0;
  double grad_norm = 0;
  for (;; ++iter) {
    Band H(k, p_);
    normal_equations(beta, sys, theta, lambda, H, g);
    grad_norm = 2.0 * g.lpNorm<Eigen::Infinity>();
    if (grad_norm <= options.gradient_tolerance * std::max(1.0, obj)) break;
    if (iter >= options.max_iterations) {
      std::ostringstream msg;
      msg << "Gauss-Newton did not converge in " << options.max_iterations
          << " iterations (gradient norm " << grad_norm << ")";
      throw ConvergenceError(msg.str(), std::vector<double>(beta.data(), beta.data() + beta.size()),
                             grad_norm);
    }
    const Vector step = H.solve(-g);
    const Eigen::Map<const Matrix> step_mat(step.data(), k, p_);
    const double slope = 2.0 * g.dot(step);
    double alpha = 1.0;
    bool accepted = false;
    double cand_mis = 0, cand_pen = 0, cand_obj = 0;
    Matrix cand;
    for (int half = 0; half < 50; ++half, alpha *= 0.5) {
      cand = beta + alpha * step_mat;
      cand_obj = objective(cand, cand_mis, cand_pen);
      if (std::isfinite(cand_obj) && cand_obj <= obj + 1e-4 * alpha * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No descent left: accept as converged when the gradient is at rounding level.
      if (grad_norm <= 1e-6 * std::max(1.0, obj)) break;
      std::ostringstream msg;
      msg << "Gauss-Newton line search failed (gradient norm " << grad_norm << ")";
      throw ConvergenceError(msg.str(), std::vector<double>(beta.data(), beta.data() + beta.size()),
                             grad_norm);
    }
    const double decrease = obj - cand_obj;
    beta = std::move(cand);
    obj = cand_obj;
    mis = cand_mis;
    pen = cand_pen;
    out.objective_history.push_back(obj);
    if (decrease <= 1e-15 * std::max(1.0, obj)) {
      ++iter;
      break;
    }
  }
  out.fit.beta = std::move(beta);
  out.objective = obj;
  out.misfit = mis;
  out.penalty = pen;
  out.iterations = iter;
  return out;
}

Matrix PenalizedSmoother::coefficient_sensitivity(const PenalizedFit& fit, const OdeSystem& sys,
                                                  const Vector& theta, double lambda) const {
  const int k = basis_.size();
  const int q = sys.param_dim();
  Band H(k, p_);
  Vector g;
  normal_equations(fit.fit.beta, sys, theta, lambda, H, g);
  Matrix C = Matrix::Zero(k * p_, q);
  if (lambda == 0.0) return C;

  const Matrix& beta = fit.fit.beta;
  Vector x(p_), xd(p_), f(p_), fh(p_);
  Matrix A(p_, p_), P(p_, q), Ah(p_, p_), M(p_, q), G(p_, 4 * p_);
  for (std::size_t node = 0; node < quad_first_.size(); ++node) {
    const int s = quad_first_[node];
    const double t = quad_.nodes(node);
    const auto block = beta.middleRows<4>(s);
    const Eigen::Vector4d b = quad_values_.row(node).transpose();
    const Eigen::Vector4d d = quad_derivs_.row(node).transpose();
    x.noalias() = block.transpose() * b;
    xd.noalias() = block.transpose() * d;
    sys.linearize(x, t, theta, f, &A, &P);
    const Vector e = xd - f;
    // M(m, j) = sum_c e_c d^2 f_c / dx_m dtheta_j, by central differences of A in theta.
    for (int j = 0; j < q; ++j) {
      const double h = 1e-6 * std::max(1.0, std::abs(theta(j)));
      Vector tp = theta, tm = theta;
      tp(j) += h;
      tm(j) -= h;
      sys.linearize(x, t, tp, fh, &Ah, nullptr);
      Matrix dA = Ah;
      sys.linearize(x, t, tm, fh, &Ah, nullptr);
      dA = (dA - Ah) / (2 * h);
      M.col(j) = dA.transpose() * e;
    }
    for (int m = 0; m < p_; ++m) {
      for (int l = 0; l < 4; ++l) {
        G.col(m * 4 + l) = -A.col(m) * b(l);
        G(m, m * 4 + l) += d(l);
      }
    }
    const double w = lambda * quad_.weights(node);
    // Residual curvature: H += -w b b' (x) sum_c e_c d^2 f_c / dx dx.
    Matrix R(p_, p_);
    for (int m = 0; m < p_; ++m) {
      const double h = 1e-6 * std::max(1.0, std::abs(x(m)));
      Vector xp = x, xm = x;
      xp(m) += h;
      xm(m) -= h;
      sys.linearize(xp, t, theta, fh, &Ah, nullptr);
      Matrix dA = Ah;
      sys.linearize(xm, t, theta, fh, &Ah, nullptr);
      dA = (dA - Ah) / (2 * h);
      R.col(m) = dA.transpose() * e;
    }
    R = 0.5 * (R + R.transpose()).eval();
    const Eigen::Matrix4d bb = b * b.transpose();
    for (int m = 0; m < p_; ++m)
      for (int m2 = 0; m2 < p_; ++m2)
        H.add(m, m2, s, -w * R(m, m2) * bb);
    // d (G'e) / d theta = -b (x) M - G' P
    const Matrix GtP = G.transpose() * P;
    for (int m = 0; m < p_; ++m)
      for (int l = 0; l < 4; ++l)
        C.row(m * k + s + l) -= w * (b(l) * M.row(m) + GtP.row(m * 4 + l));
  }
  return H.solve(-C);
}

Eigen::SparseMatrix<double> PenalizedSmoother::normal_matrix(const Matrix& beta,
                                                             const OdeSystem& sys,
                                                             const Vector& theta,
                                                             double lambda) const {
  const int k = basis_.size();
  Band H(k, p_);
  Vector g;
  normal_equations(beta, sys, theta, lambda, H, g);
  Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> perm(k * p_);
  for (int c = 0; c < p_; ++c)
    for (int j = 0; j < k; ++j) perm.indices()(j * p_ + c) = c * k + j;
  const Eigen::SparseMatrix<double> S = H.sparse();
  Eigen::SparseMatrix<double> out = perm * S * perm.transpose();
  return out;
}

GcvResult PenalizedSmoother::gcv(const PenalizedFit& fit, const OdeSystem& sys,
                                 const Vector& theta, double lambda) const {
  const int k = basis_.size();
  Band H(k, p_);
  Vector g;
  normal_equations(fit.fit.beta, sys, theta, lambda, H, g);
  Matrix BtB = Matrix::Zero(k, k);
  for (int i = 0; i < n_; ++i) {
    const int s = obs_first_[i];
    BtB.block<4, 4>(s, s) += obs_values_.row(i).transpose() * obs_values_.row(i);
  }
  Matrix rhs = Matrix::Zero(k * p_, k * p_);
  for (int c = 0; c < p_; ++c) rhs.block(c * k, c * k, k, k) = BtB;
  const double trace = H.solve(rhs).trace();
  GcvResult out;
  out.df = trace / p_;
  out.rss = fit.misfit;
  if (out.df >= n_) {
    std::ostringstream msg;
    msg << "smoother degrees of freedom " << out.df << " >= n=" << n_;
    throw DegenerateSmoother(msg.str());
  }
  out.score = n_ * out.rss / ((n_ - out.df) * (n_ - out.df));
  return out;
}

PenalizedFit fit_penalized(const Dataset& ds, const SplineBasis& basis, const OdeSystem& sys,
                           const Vector& theta, double lambda, const Quadrature& quad,
                           const GaussNewtonOptions& options) {
  return PenalizedSmoother(ds, basis, quad).fit(sys, theta, lambda, std::nullopt, options);
}

GcvResult gcv_score(const Dataset& ds, const SplineBasis& basis, const OdeSystem& sys,
                    const Vector& theta, double lambda, const Quadrature& quad) {
  const PenalizedSmoother smoother(ds, basis, quad);
  const PenalizedFit fit = smoother.fit(sys, theta, lambda);
  return smoother.gcv(fit, sys, theta, lambda);
}

}  // namespace odeest
