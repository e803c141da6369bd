#include "odeest/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace odeest::optim {

namespace {

double safe(double v) { return std::isfinite(v) ? v : kInf; }

struct Simplex {
  std::vector<Vector> points;
  std::vector<double> values;

  void sort() {
    std::vector<std::size_t> idx(points.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return values[a] < values[b]; });
    std::vector<Vector> p;
    std::vector<double> v;
    for (auto i : idx) {
      p.push_back(points[i]);
      v.push_back(values[i]);
    }
    points = std::move(p);
    values = std::move(v);
  }
};

}  // namespace

Result nelder_mead(const std::function<double(const Vector&)>& f, const Vector& x0,
                   const Vector& initial_step, const NelderMeadOptions& options) {
  const Eigen::Index dim = x0.size();
  Result out;
  out.x = x0;
  auto eval = [&](const Vector& x) {
    ++out.evaluations;
    return safe(f(x));
  };

  Vector best = x0;
  double best_value = eval(x0);
  for (int round = 0; round <= options.restarts; ++round) {
    Simplex s;
    s.points.push_back(best);
    s.values.push_back(best_value);
    for (Eigen::Index j = 0; j < dim; ++j) {
      Vector v = best;
      v(j) += initial_step(j) * (round == 0 ? 1.0 : 0.1);
      s.points.push_back(v);
      s.values.push_back(eval(v));
    }
    bool converged = false;
    while (out.evaluations < options.max_evaluations) {
      s.sort();
      ++out.iterations;
      const double spread = s.values.back() - s.values.front();
      double diameter = 0.0;
      for (std::size_t i = 1; i < s.points.size(); ++i)
        diameter = std::max(diameter, (s.points[i] - s.points[0]).lpNorm<Eigen::Infinity>());
      const double scale = 1.0 + s.points[0].lpNorm<Eigen::Infinity>();
      if (std::isfinite(spread) &&
          spread <= std::max(options.f_tolerance * std::abs(s.values.front()),
                             options.f_abs_tolerance) &&
          diameter <= options.x_tolerance * scale) {
        converged = true;
        break;
      }
      Vector centroid = Vector::Zero(dim);
      for (Eigen::Index i = 0; i < dim; ++i) centroid += s.points[i];
      centroid /= static_cast<double>(dim);
      const Vector& worst = s.points.back();

      const Vector reflected = centroid + (centroid - worst);
      const double fr = eval(reflected);
      if (fr < s.values.front()) {
        const Vector expanded = centroid + 2.0 * (centroid - worst);
        const double fe = eval(expanded);
        if (fe < fr) {
          s.points.back() = expanded;
          s.values.back() = fe;
        } else {
          s.points.back() = reflected;
          s.values.back() = fr;
        }
        continue;
      }
      if (fr < s.values[dim - 1]) {
        s.points.back() = reflected;
        s.values.back() = fr;
        continue;
      }
      const bool outside = fr < s.values.back();
      const Vector contracted =
          outside ? Vector(centroid + 0.5 * (reflected - centroid))
                  : Vector(centroid + 0.5 * (worst - centroid));
      const double fc = eval(contracted);
      if (fc < (outside ? fr : s.values.back())) {
        s.points.back() = contracted;
        s.values.back() = fc;
        continue;
      }
      for (std::size_t i = 1; i < s.points.size(); ++i) {
        s.points[i] = s.points[0] + 0.5 * (s.points[i] - s.points[0]);
        s.values[i] = eval(s.points[i]);
      }
    }
    s.sort();
    best = s.points.front();
    best_value = s.values.front();
    out.converged = converged;
    if (!converged) break;
  }
  out.x = best;
  out.value = best_value;
  return out;
}

namespace {

bool central_jacobian(const Residuals& residuals, const Vector& x, Eigen::Index m, Matrix& J) {
  J.resize(m, x.size());
  Vector rp, rm;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double h = 1e-6 * std::max(1.0, std::abs(x(j)));
    Vector xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    const bool okp = residuals(xp, rp) && rp.allFinite();
    const bool okm = residuals(xm, rm) && rm.allFinite();
    if (okp && okm) {
      J.col(j) = (rp - rm) / (2 * h);
    } else {
      // One-sided difference at the edge of the feasible set.
      Vector r0;
      if (!residuals(x, r0)) return false;
      if (okp)
        J.col(j) = (rp - r0) / h;
      else if (okm)
        J.col(j) = (r0 - rm) / h;
      else
        return false;
    }
  }
  return true;
}

}  // namespace

Result levenberg_marquardt(const Residuals& residuals, const Vector& x0,
                           const LeastSquaresOptions& options, const Jacobian& jacobian) {
  Result out;
  out.x = x0;
  Vector r;
  ++out.evaluations;
  if (!residuals(x0, r) || !r.allFinite()) return out;
  double cost = r.squaredNorm();
  out.value = cost;

  Matrix J;
  double mu = -1.0;
  for (out.iterations = 0; out.iterations < options.max_iterations; ++out.iterations) {
    const bool have_j = jacobian ? jacobian(out.x, J) : central_jacobian(residuals, out.x, r.size(), J);
    if (!have_j || !J.allFinite()) return out;
    const Matrix JtJ = J.transpose() * J;
    const Vector g = J.transpose() * r;
    if (g.lpNorm<Eigen::Infinity>() <= options.gradient_tolerance * (1.0 + cost)) {
      out.converged = true;
      return out;
    }
    const Vector diag = JtJ.diagonal().cwiseMax(1e-12 * std::max(1.0, JtJ.diagonal().maxCoeff()));
    if (mu < 0) mu = 1e-3;
    bool accepted = false;
    for (int attempt = 0; attempt < 40; ++attempt) {
      Matrix A = JtJ;
      A.diagonal() += mu * diag;
      const Vector step = A.ldlt().solve(-g);
      const Vector cand = out.x + step;
      Vector rc;
      ++out.evaluations;
      if (residuals(cand, rc) && rc.allFinite()) {
        const double cand_cost = rc.squaredNorm();
        if (cand_cost < cost) {
          const double decrease = cost - cand_cost;
          const bool small_step =
              step.lpNorm<Eigen::Infinity>() <=
              options.step_tolerance * (1.0 + out.x.lpNorm<Eigen::Infinity>());
          out.x = cand;
          r = std::move(rc);
          cost = cand_cost;
          out.value = cost;
          mu = std::max(mu / 3.0, 1e-12);
          accepted = true;
          if (small_step || decrease <= options.cost_tolerance * std::max(cost, 1e-300)) {
            out.converged = true;
            ++out.iterations;
            return out;
          }
          break;
        }
      }
      mu *= 4.0;
    }
    if (!accepted) {
      // Damping exhausted: no descent direction left at working precision.
      out.converged = g.lpNorm<Eigen::Infinity>() <= 1e-6 * (1.0 + cost);
      return out;
    }
  }
  return out;
}

}  // namespace odeest::optim
