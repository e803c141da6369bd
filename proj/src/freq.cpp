#include "odeest/freq.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "csv.hpp"
#include "odeest/optim.hpp"
#include "odeest/stats.hpp"

namespace odeest {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void check_dataset(const Dataset& ds, const OdeSystem& sys) {
  if (ds.n() < 2) throw InvalidInput("estimation needs at least 2 observations");
  ds.validate();
  if (ds.dim() != sys.state_dim()) {
    std::ostringstream msg;
    msg << "dataset has " << ds.dim() << " coordinates but system '" << sys.name() << "' has "
        << sys.state_dim();
    throw InvalidInput(msg.str());
  }
}

Vector simplex_steps(const OdeSystem& sys, const Vector& theta, const Vector& x0) {
  const int q = sys.param_dim();
  Vector steps(q + x0.size());
  for (int j = 0; j < q; ++j) {
    const auto& b = sys.bounds()[j];
    steps(j) = b.finite() ? 0.1 * (b.upper - b.lower) : 0.1 * std::max(1.0, std::abs(theta(j)));
  }
  for (Eigen::Index j = 0; j < x0.size(); ++j) steps(q + j) = 0.1 * std::max(1.0, std::abs(x0(j)));
  return steps;
}

std::string fmt(const Vector& v) { return csv::join(v); }

}  // namespace

void OptimizerConfig::validate() const {
  if (!(tolerance > 0)) throw InvalidInput("optimizer tolerance must be > 0");
  if (multistart_count < 1) throw InvalidInput("multistart_count must be >= 1");
  if (max_iters < 1) throw InvalidInput("max_iters must be >= 1");
}

void write_report(std::ostream& out, const EstimateReport& r) {
  out << std::setprecision(17);
  out << "method=" << r.method << '\n';
  out << "theta_hat=" << csv::join(r.theta_hat) << '\n';
  if (r.x0_hat) out << "x0_hat=" << csv::join(*r.x0_hat) << '\n';
  out << "objective=" << r.objective << '\n';
  out << "runtime=" << r.runtime << '\n';
  out << "iterations=" << r.iterations << '\n';
  out << "converged=" << (r.converged ? "true" : "false") << '\n';
  if (r.lambda) out << "lambda=" << *r.lambda << '\n';
  if (!r.trace.empty())
    out << "trace=" << csv::join(Eigen::Map<const Vector>(r.trace.data(), r.trace.size())) << '\n';
  for (const auto& d : r.diagnostics) out << "note=" << d << '\n';
}

EstimateReport read_report(std::istream& in) {
  EstimateReport r;
  std::string line;
  int lineno = 0;
  bool have_method = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "method") {
        r.method = value;
        have_method = true;
      } else if (key == "theta_hat") {
        r.theta_hat = csv::parse_vector(value);
      } else if (key == "x0_hat") {
        r.x0_hat = csv::parse_vector(value);
      } else if (key == "objective") {
        r.objective = csv::parse_vector(value)(0);
      } else if (key == "runtime") {
        r.runtime = csv::parse_vector(value)(0);
      } else if (key == "iterations") {
        r.iterations = std::stoi(value);
      } else if (key == "converged") {
        r.converged = value == "true";
      } else if (key == "lambda") {
        r.lambda = csv::parse_vector(value)(0);
      } else if (key == "trace") {
        const Vector t = csv::parse_vector(value);
        r.trace.assign(t.data(), t.data() + t.size());
      } else if (key == "note") {
        r.diagnostics.push_back(value);
      }
    } catch (const std::exception& e) {
      throw ParseError("line " + std::to_string(lineno) + ": bad value for '" + key + "': " + e.what());
    }
  }
  if (!have_method) throw ParseError("report has no method line");
  return r;
}

void save_report(const std::string& path, const EstimateReport& report) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open '" + path + "' for writing");
  write_report(out, report);
}

EstimateReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open '" + path + "'");
  return read_report(in);
}

double explicit_misfit(const Dataset& ds, const OdeSystem& sys, const Vector& theta,
                       const Vector& x0, int refine) {
  if (!sys.in_bounds(theta) || !x0.allFinite()) return kInf;
  Rk4Stepper stepper(sys);
  Vector x = x0;
  double sse = (ds.observations.row(0).transpose() - x).squaredNorm();
  try {
    for (int i = 1; i < ds.n(); ++i) {
      stepper.advance(x, ds.grid[i - 1], ds.grid[i], refine, theta);
      sse += (ds.observations.row(i).transpose() - x).squaredNorm();
    }
  } catch (const NumericalBlowup&) {
    return kInf;
  }
  return std::isfinite(sse) ? sse : kInf;
}

double gradient_mismatch(const SplineFit& fit, const OdeSystem& sys, const Vector& theta,
                         const Vector& nodes, const Vector& weights) {
  const Matrix x = fit.values(nodes);
  const Matrix xd = fit.derivatives(nodes);
  Vector f(sys.state_dim()), xi(sys.state_dim());
  double total = 0;
  for (Eigen::Index j = 0; j < nodes.size(); ++j) {
    xi = x.row(j).transpose();
    sys.eval_unchecked(xi, nodes(j), theta, f);
    total += weights(j) * (xd.row(j).transpose() - f).squaredNorm();
  }
  return total;
}

GradientMatch match_gradients(const SplineFit& fit, const OdeSystem& sys, const Vector& nodes,
                              const Vector& weights, const Vector& start) {
  if (nodes.size() != weights.size()) throw InvalidInput("gradient matching: nodes and weights differ in length");
  if ((weights.array() < 0).any()) throw InvalidInput("gradient matching: negative weight");
  if (!(weights.sum() > 0)) throw InvalidInput("gradient matching: weight function is identically zero");
  sys.check_theta(start);
  const int p = sys.state_dim();
  const int q = sys.param_dim();
  const Matrix x = fit.values(nodes);
  const Matrix xd = fit.derivatives(nodes);
  const Vector sw = weights.cwiseSqrt();
  const auto m = nodes.size();

  auto residuals = [&](const Vector& theta, Vector& r) {
    if (!sys.in_bounds(theta)) return false;
    r.resize(m * p);
    Vector f(p), xi(p);
    for (Eigen::Index j = 0; j < m; ++j) {
      xi = x.row(j).transpose();
      sys.eval_unchecked(xi, nodes(j), theta, f);
      r.segment(j * p, p) = sw(j) * (xd.row(j).transpose() - f);
    }
    return r.allFinite();
  };
  auto jacobian = [&](const Vector& theta, Matrix& J) {
    J.resize(m * p, q);
    Vector f, xi(p);
    Matrix P;
    for (Eigen::Index j = 0; j < m; ++j) {
      xi = x.row(j).transpose();
      sys.linearize(xi, nodes(j), theta, f, nullptr, &P);
      J.middleRows(j * p, p) = -sw(j) * P;
    }
    return J.allFinite();
  };
  const auto res = optim::levenberg_marquardt(residuals, start, {}, jacobian);
  GradientMatch out;
  out.theta = res.x;
  out.objective = gradient_mismatch(fit, sys, res.x, nodes, weights);
  out.iterations = res.iterations;
  out.converged = res.converged && std::isfinite(out.objective);
  return out;
}

EstimateReport nls_explicit(const Dataset& ds, const OdeSystem& sys, const OptimizerConfig& cfg,
                            int refine) {
  const auto start_time = Clock::now();
  check_dataset(ds, sys);
  cfg.validate();
  if (refine < 1) throw InvalidInput("refine must be >= 1");
  const int p = sys.state_dim();
  const int q = sys.param_dim();
  const Vector y0 = ds.y(0);

  auto split = [&](const Vector& z, Vector& theta, Vector& x0) {
    theta = z.head(q);
    x0 = z.tail(p);
  };
  auto objective = [&](const Vector& z) {
    Vector theta, x0;
    split(z, theta, x0);
    return explicit_misfit(ds, sys, theta, x0, refine);
  };
  auto residuals = [&](const Vector& z, Vector& r) {
    Vector theta, x0;
    split(z, theta, x0);
    if (!sys.in_bounds(theta)) return false;
    Rk4Stepper stepper(sys);
    r.resize(static_cast<Eigen::Index>(ds.n()) * p);
    Vector x = x0;
    try {
      r.head(p) = ds.y(0) - x;
      for (int i = 1; i < ds.n(); ++i) {
        stepper.advance(x, ds.grid[i - 1], ds.grid[i], refine, theta);
        r.segment(static_cast<Eigen::Index>(i) * p, p) = ds.y(i) - x;
      }
    } catch (const NumericalBlowup&) {
      return false;
    }
    return r.allFinite();
  };

  std::mt19937_64 rng(cfg.seed);
  EstimateReport best;
  best.method = "nls_explicit";
  int best_index = -1;
  std::vector<std::string> failures;
  for (int s = 0; s < cfg.multistart_count; ++s) {
    Vector z(q + p);
    for (int j = 0; j < q; ++j) z(j) = stats::draw_in(sys.bounds()[j], rng);
    z.tail(p) = y0;
    optim::Result res;
    if (cfg.algorithm == Algorithm::Simplex) {
      optim::NelderMeadOptions opts;
      opts.max_evaluations = cfg.max_iters;
      opts.f_tolerance = cfg.tolerance;
      res = optim::nelder_mead(objective, z, simplex_steps(sys, z.head(q), y0), opts);
    } else {
      optim::LeastSquaresOptions opts;
      opts.max_iterations = cfg.max_iters;
      opts.gradient_tolerance = cfg.tolerance;
      res = optim::levenberg_marquardt(residuals, z, opts);
    }
    if (!std::isfinite(res.value)) {
      failures.push_back("start " + std::to_string(s) + " theta=" + fmt(z.head(q)) + ": diverged");
      continue;
    }
    if (best_index < 0 || res.value < best.objective) {
      best_index = s;
      best.theta_hat = res.x.head(q);
      best.x0_hat = Vector(res.x.tail(p));
      best.objective = res.value;
      best.iterations = res.iterations;
      best.converged = res.converged && sys.in_bounds(best.theta_hat);
    }
    std::ostringstream note;
    note << std::setprecision(10) << "start " << s << " theta0=" << fmt(z.head(q))
         << " objective=" << res.value << " converged=" << (res.converged ? "true" : "false");
    best.diagnostics.push_back(note.str());
  }
  if (best_index < 0) {
    std::string msg = "nls_explicit: all starts failed";
    for (const auto& f : failures) msg += "; " + f;
    throw EstimationFailure(msg);
  }
  best.diagnostics.insert(best.diagnostics.end(), failures.begin(), failures.end());
  best.diagnostics.push_back("best start " + std::to_string(best_index));
  best.runtime = seconds_since(start_time);
  return best;
}

EstimateReport two_step(const Dataset& ds, const OdeSystem& sys, const SplineBasis& basis) {
  const auto start_time = Clock::now();
  check_dataset(ds, sys);
  const SplineFit fit = fit_ls(ds, basis);
  const Vector ones = Vector::Ones(ds.n());
  const GradientMatch m = match_gradients(fit, sys, ds.grid.points(), ones, sys.nominal_theta());
  EstimateReport r;
  r.method = "two_step";
  r.theta_hat = m.theta;
  r.x0_hat = fit.value(ds.grid.front());
  r.objective = m.objective;
  r.iterations = m.iterations;
  r.converged = m.converged && sys.in_bounds(m.theta);
  r.runtime = seconds_since(start_time);
  return r;
}

EstimateReport iterated_pda(const Dataset& ds, const OdeSystem& sys, const SplineBasis& basis,
                            double lambda, const Vector& theta0, const PdaOptions& options) {
  const auto start_time = Clock::now();
  check_dataset(ds, sys);
  if (!(lambda > 0)) throw InvalidInput("iterated_pda: lambda must be > 0");
  if (options.max_rounds < 1) throw InvalidInput("iterated_pda: max_rounds must be >= 1");
  sys.check_theta(theta0);
  const PenalizedSmoother smoother(ds, basis, Quadrature::for_dataset(ds));
  const Vector ones = Vector::Ones(ds.n());

  EstimateReport r;
  r.method = "iterated_pda";
  r.lambda = lambda;
  Vector theta = theta0;
  Vector previous = theta0;
  std::optional<Matrix> warm;
  SplineFit last_fit = smoother.ls_fit();
  int round = 0;
  bool settled = false;
  while (round < options.max_rounds) {
    ++round;
    const PenalizedFit pf = smoother.fit(sys, theta, lambda, warm);
    warm = pf.fit.beta;
    last_fit = pf.fit;
    const GradientMatch m = match_gradients(pf.fit, sys, ds.grid.points(), ones, theta);
    previous = theta;
    theta = m.theta;
    r.trace.push_back(pf.misfit + lambda * smoother.penalty(pf.fit.beta, sys, theta));
    if ((theta - previous).lpNorm<Eigen::Infinity>() < options.tolerance) {
      settled = true;
      break;
    }
  }
  r.theta_hat = theta;
  r.x0_hat = last_fit.value(ds.grid.front());
  r.objective = r.trace.back();
  r.iterations = round;
  r.converged = settled && sys.in_bounds(theta);
  if (!settled) {
    r.diagnostics.push_back("no convergence after " + std::to_string(round) + " rounds");
    r.diagnostics.push_back("theta[" + std::to_string(round - 1) + "]=" + fmt(previous));
    r.diagnostics.push_back("theta[" + std::to_string(round) + "]=" + fmt(theta));
  }
  r.runtime = seconds_since(start_time);
  return r;
}

EstimateReport generalized_profiling(const Dataset& ds, const OdeSystem& sys,
                                     const SplineBasis& basis,
                                     const std::vector<double>& lambda_grid,
                                     const OptimizerConfig& cfg) {
  const auto start_time = Clock::now();
  check_dataset(ds, sys);
  cfg.validate();
  if (lambda_grid.empty()) throw InvalidInput("generalized_profiling: empty lambda grid");
  for (double l : lambda_grid)
    if (!(l > 0) || !std::isfinite(l)) throw InvalidInput("generalized_profiling: lambdas must be positive");

  const PenalizedSmoother smoother(ds, basis, Quadrature::for_dataset(ds));
  const int q = sys.param_dim();

  // Middle level starts from the gradient-matching estimate on the plain fit.
  Vector start = sys.nominal_theta();
  {
    const GradientMatch m = match_gradients(smoother.ls_fit(), sys, ds.grid.points(),
                                            Vector::Ones(ds.n()), sys.nominal_theta());
    if (std::isfinite(m.objective) && sys.in_bounds(m.theta)) start = m.theta;
  }

  struct Candidate {
    double lambda;
    Vector theta;
    PenalizedFit fit;
    double gcv;
    double misfit;
    int iterations;
    bool converged;
  };
  std::optional<Candidate> best;
  std::vector<std::string> notes;

  // Smallest lambda first; each optimum seeds the next, tracking theta(lambda) as the fit stiffens.
  // The first lambda is also tried from random starts, since the misfit surface is multimodal.
  std::vector<double> order = lambda_grid;
  std::sort(order.begin(), order.end());
  std::mt19937_64 rng(cfg.seed);
  std::optional<Matrix> warm;
  for (std::size_t li = 0; li < order.size(); ++li) {
    const double lambda = order[li];
    // Inner level: beta(lambda, theta) by penalized Gauss-Newton.
    auto inner = [&](const Vector& theta) -> std::optional<PenalizedFit> {
      if (!sys.in_bounds(theta)) return std::nullopt;
      try {
        PenalizedFit pf = smoother.fit(sys, theta, lambda, warm);
        warm = pf.fit.beta;
        return pf;
      } catch (const ConvergenceError&) {
        return std::nullopt;
      } catch (const InvalidInput&) {
        return std::nullopt;
      }
    };
    // Middle level: theta(lambda) minimizing the data misfit.
    auto middle = [&](const Vector& from) {
      if (cfg.algorithm == Algorithm::Simplex) {
        auto objective = [&](const Vector& theta) {
          const auto pf = inner(theta);
          return pf ? pf->misfit : kInf;
        };
        optim::NelderMeadOptions opts;
        opts.max_evaluations = cfg.max_iters;
        opts.f_tolerance = std::max(cfg.tolerance, 1e-10);
        opts.x_tolerance = 1e-6;
        opts.restarts = 0;
        return optim::nelder_mead(objective, from, simplex_steps(sys, from, Vector()).head(q), opts);
      }
      const Vector times = ds.grid.points();
      const Matrix B = basis.design(times);
      const int k = basis.size();
      // The last inner fit, reused by the Jacobian when theta matches.
      std::optional<std::pair<Vector, PenalizedFit>> last;
      auto residuals = [&](const Vector& theta, Vector& r) {
        const auto pf = inner(theta);
        if (!pf) return false;
        const Matrix resid = ds.observations - B * pf->fit.beta;
        r = Eigen::Map<const Vector>(resid.data(), resid.size());
        last.emplace(theta, *pf);
        return true;
      };
      // r = vec(Y - B beta(theta)), so dr/dtheta = -(I (x) B) dbeta/dtheta.
      auto jacobian = [&](const Vector& theta, Matrix& J) {
        if (!last || last->first != theta) {
          const auto pf = inner(theta);
          if (!pf) return false;
          last.emplace(theta, *pf);
        }
        const Matrix S = smoother.coefficient_sensitivity(last->second, sys, theta, lambda);
        if (!S.allFinite()) return false;
        const int n = ds.n();
        J.resize(n * ds.dim(), q);
        for (int c = 0; c < ds.dim(); ++c)
          J.middleRows(c * n, n).noalias() = -B * S.middleRows(c * k, k);
        return true;
      };
      optim::LeastSquaresOptions opts;
      opts.max_iterations = std::min(cfg.max_iters, 200);
      opts.gradient_tolerance = cfg.tolerance;
      return optim::levenberg_marquardt(residuals, from, opts, jacobian);
    };

    optim::Result res = middle(start);
    if (li == 0) {
      for (int s = 1; s < cfg.multistart_count; ++s) {
        Vector from(q);
        for (int j = 0; j < q; ++j) from(j) = stats::draw_in(sys.bounds()[j], rng);
        warm.reset();
        optim::Result alt = middle(from);
        std::ostringstream note;
        note << std::setprecision(10) << "lambda=" << lambda << " start " << s << ": misfit=" << alt.value
             << " theta=" << fmt(alt.x);
        notes.push_back(note.str());
        if (alt.value < res.value) res = std::move(alt);
      }
      warm.reset();
    }
    if (!std::isfinite(res.value)) {
      notes.push_back("lambda=" + std::to_string(lambda) + ": inner fit failed");
      continue;
    }
    start = res.x;
    const auto pf = inner(res.x);
    if (!pf) {
      notes.push_back("lambda=" + std::to_string(lambda) + ": inner fit failed at optimum");
      continue;
    }
    double score = kInf;
    try {
      score = smoother.gcv(*pf, sys, res.x, lambda).score;
    } catch (const DegenerateSmoother& e) {
      notes.push_back("lambda=" + std::to_string(lambda) + ": " + e.what());
      continue;
    }
    std::ostringstream note;
    note << std::setprecision(10) << "lambda=" << lambda << " gcv=" << score
         << " misfit=" << pf->misfit << " theta=" << fmt(res.x);
    notes.push_back(note.str());
    if (!best || score < best->gcv)
      best = Candidate{lambda, res.x, *pf, score, pf->misfit, res.iterations, res.converged};
  }
  if (!best) {
    std::string msg = "generalized_profiling: every lambda failed";
    for (const auto& n : notes) msg += "; " + n;
    throw EstimationFailure(msg);
  }
  EstimateReport r;
  r.method = "generalized_profiling";
  r.theta_hat = best->theta;
  r.x0_hat = best->fit.fit.value(ds.grid.front());
  r.objective = best->misfit;
  r.iterations = best->iterations;
  r.converged = best->converged && sys.in_bounds(best->theta);
  r.lambda = best->lambda;
  r.diagnostics = std::move(notes);
  r.runtime = seconds_since(start_time);
  return r;
}

}  // namespace odeest
