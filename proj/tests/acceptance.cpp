// Acceptance checks. One PASS/FAIL line per criterion; the exit status is nonzero
// only when a check could not run at all.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "odeest/bayes.hpp"
#include "odeest/cli.hpp"
#include "odeest/freq.hpp"
#include "odeest/stats.hpp"

using namespace odeest;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

std::vector<double> column(const Matrix& m, int j) {
  const Vector c = m.col(j);
  return {c.data(), c.data() + c.size()};
}

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << what << "  [" << detail << "]"
            << std::endl;
}

void rk4_order() {
  const auto start = Clock::now();
  const auto decay = OdeSystem::from_functor("decay", 1, 1, {{-10, 10}},
                                             [](const auto& x, const auto&, const auto& th, auto& dx) {
                                               dx(0) = -th(0) * x(0);
                                             });
  const auto grid = TimeGrid::uniform(0.0, 1.0, 11);
  auto max_error = [&](int refine) {
    const auto traj = integrate(decay, vec({1.0}), grid, vec({1.0}), refine);
    double err = 0;
    for (int i = 0; i < grid.size(); ++i) err = std::max(err, std::abs(traj.states(i, 0) - std::exp(-grid[i])));
    return err;
  };
  bool ok = true;
  std::string ratios;
  double prev = max_error(1);
  for (int refine : {2, 4, 8}) {
    const double err = max_error(refine);
    const double r = prev / err;
    ok = ok && r >= 12 && r <= 20;
    ratios += fmt("%.3f ", r);
    prev = err;
  }
  const double t = seconds_since(start);
  report(1, ok && t < 1.0, "RK4 error ratios under step halving in [12,20]", ratios + fmt("runtime %.4fs", t));
}

void sir_conservation() {
  const double N = 1000;
  const auto s = sir(N);
  const auto traj = integrate(s, vec({990, 10, 0}), TimeGrid::uniform(0, 50, 501), vec({0.3, 0.1}));
  double worst = 0;
  for (int i = 0; i < traj.size(); ++i) worst = std::max(worst, std::abs(traj.states.row(i).sum() - N));
  report(2, worst <= 1e-6 * N, "SIR keeps S+I+R = N", fmt("max |S+I+R-N| = %.3e", worst));
}

void lorenz_fixed_point() {
  const auto l96 = lorenz96(10, 8);
  const auto traj = integrate(l96, Vector::Constant(10, 8.0), TimeGrid::uniform(0, 10, 1001), vec({8}));
  const double dev = (traj.states.array() - 8.0).abs().maxCoeff();
  report(3, dev < 1e-9, "Lorenz-96 stays at x = F", fmt("max deviation %.3e", dev));
}

void zero_noise_nls() {
  const auto ds = generate(fitzhugh_nagumo(), FhnBenchmark::theta(), FhnBenchmark::x0(),
                           TimeGrid::uniform(0, FhnBenchmark::t_end, FhnBenchmark::n), NoiseSpec::uniform(2, 0.0), 1);
  const auto r = nls_explicit(ds, fitzhugh_nagumo());
  const double err = (r.theta_hat - FhnBenchmark::theta()).cwiseAbs().maxCoeff();
  report(4, err < 1e-3 && r.objective < 1e-6 && r.runtime < 60, "nls_explicit on noise-free FHN data",
         fmt("max |theta err| %.2e, objective %.2e, runtime %.2fs", err, r.objective, r.runtime));
}

// Runs the benchmark once; criteria 5 and 9 both read it.
std::vector<cli::BenchmarkResult> benchmark(double& wall) {
  cli::BenchmarkOptions o;
  o.methods = {"nls_explicit", "two_step", "generalized_profiling", "mh_explicit", "rdem_filter"};
  const auto start = Clock::now();
  auto results = cli::run_benchmark(o);
  wall = seconds_since(start);
  return results;
}

void fhn_recovery(const std::vector<cli::BenchmarkResult>& results, double wall) {
  const std::map<std::string, double> tolerance = {
      {"nls_explicit", 0.15}, {"generalized_profiling", 0.15}, {"mh_explicit", 0.2}, {"rdem_filter", 0.3}};
  bool ok = wall < 30 * 60;
  std::string detail;
  for (const auto& [method, tol] : tolerance) {
    int hits = 0;
    std::string missed;
    for (const auto& r : results) {
      if (r.method != method) continue;
      const bool hit = r.error.empty() && (r.estimate - r.truth).cwiseAbs().maxCoeff() <= tol;
      if (hit) ++hits;
      else missed += " " + std::to_string(r.seed);
    }
    ok = ok && hits >= 8;
    detail += method + " " + std::to_string(hits) + "/10" + (missed.empty() ? "" : " (missed" + missed + ")") + "; ";
  }
  report(5, ok, "FHN recovery on 10 seeds", detail + fmt("total %.1fs", wall));
}

void conjugate_oracle() {
  const auto drift = OdeSystem::from_functor("drift", 1, 1, {{-10, 10}},
                                             [](const auto&, const auto&, const auto& th, auto& dx) {
                                               dx(0) = th(0);
                                             });
  const double sigma = 0.3, m0 = 0.5, s0 = 1.0;
  const auto ds = generate(drift, vec({0.5}), vec({1.0}), TimeGrid::uniform(0, 2, 21), NoiseSpec::uniform(1, sigma), 5);
  PriorSpec prior;
  prior.x0 = {{m0, s0}};
  prior.fixed_sigma = vec({sigma});
  ChainConfig chain;
  chain.iterations = 12000;
  chain.burnin = 2000;
  chain.seed = 11;
  const auto s = mh_explicit(ds, drift, prior, chain, 1);

  // y = theta t + x0: flat prior on theta, N(m0, s0^2) on x0.
  Matrix X(ds.n(), 2);
  X.col(0) = ds.grid.points();
  X.col(1).setOnes();
  Matrix P = X.transpose() * X / (sigma * sigma);
  P(1, 1) += 1 / (s0 * s0);
  Vector rhs = X.transpose() * ds.observations.col(0) / (sigma * sigma);
  rhs(1) += m0 / (s0 * s0);
  const Matrix cov = P.inverse();
  const Vector mean = cov * rhs;

  bool ok = s.size() == 10000;
  std::string detail;
  for (int j = 0; j < 2; ++j) {
    const auto draws = column(j == 0 ? s.theta : s.x0, 0);
    const double m = stats::mean(draws);
    std::vector<double> sq(draws.size());
    for (std::size_t i = 0; i < draws.size(); ++i) sq[i] = (draws[i] - m) * (draws[i] - m);
    const double v = stats::mean(sq);
    const double zm = std::abs(m - mean(j)) / stats::batch_means_se(draws);
    const double zv = std::abs(v - cov(j, j)) / stats::batch_means_se(sq);
    ok = ok && zm <= 3 && zv <= 3;
    detail += std::string(j == 0 ? "theta" : "x0") + fmt(": mean z %.2f, var z %.2f; ", zm, zv);
  }
  report(6, ok, "mh_explicit matches the conjugate posterior", detail + std::to_string(s.size()) + " draws");
}

void kalman_oracle() {
  const auto sys = OdeSystem::from_functor("linear", 1, 1, {{-10, 10}},
                                           [](const auto& x, const auto&, const auto& th, auto& dx) {
                                             dx(0) = th(0) * x(0);
                                           });
  const double theta = -0.5, sigma = 0.2, v = 0.01, m0 = 1.0, s0 = 0.5;
  const auto ds = generate(sys, vec({theta}), vec({1.2}), TimeGrid::uniform(0, 4, 41), NoiseSpec::uniform(1, sigma), 3);
  const int n = ds.n();
  const double a = rk4_step(sys, vec({1.0}), 0.0, ds.grid[1] - ds.grid[0], vec({theta}))(0);
  Vector kf(n);
  double m = m0, P = s0 * s0;
  for (int i = 0; i < n; ++i) {
    if (i > 0) {
      m = a * m;
      P = a * a * P + v;
    }
    const double K = P / (P + sigma * sigma);
    m += K * (ds.observations(i, 0) - m);
    P *= 1 - K;
    kf(i) = m;
  }

  PriorSpec prior;
  prior.x0 = {{m0, s0}};
  FilterConfig fc;
  fc.particles = 2000;
  fc.fixed_theta = vec({theta});
  fc.fixed_sigma = vec({sigma});
  fc.fixed_v = vec({v});
  // The Monte Carlo error at each time point comes from independent replicate runs.
  const int runs = 30;
  Matrix means(runs, n);
  for (int r = 0; r < runs; ++r) {
    fc.seed = 100 + r;
    means.row(r) = rdem_filter(ds, sys, prior, fc).filter_means.col(0).transpose();
  }
  double worst = 0;
  for (int i = 0; i < n; ++i) {
    const auto col = column(means, i);
    worst = std::max(worst, std::abs(stats::mean(col) - kf(i)) / std::sqrt(stats::variance(col) / runs));
  }
  report(7, worst <= 3, "rdem_filter matches Kalman state means at every time point",
         fmt("max |z| %.2f over %.0f time points, %.0f runs of 2000 particles", worst, n, runs));
}

void band_coverage() {
  const auto sys = fitzhugh_nagumo();
  const auto ds = fhn_benchmark_dataset(1);
  ChainConfig chain;
  chain.iterations = 6000;
  chain.burnin = 2000;
  chain.seed = 1;
  chain.keep_states = true;
  chain.theta_init = two_step(ds, sys, SplineBasis::for_dataset(ds, FhnBenchmark::spline_knots)).theta_hat;
  const auto bands = state_bands(mh_explicit(ds, sys, {}, chain), ds.grid);
  const auto truth = integrate(sys, FhnBenchmark::x0(), ds.grid, FhnBenchmark::theta());
  bool ok = true;
  std::string detail = "seed 1:";
  for (int c = 0; c < 2; ++c) {
    int inside = 0;
    for (int i = 0; i < ds.n(); ++i)
      inside += truth.states(i, c) >= bands.q05(i, c) && truth.states(i, c) <= bands.q95(i, c);
    const double frac = static_cast<double>(inside) / ds.n();
    ok = ok && frac >= 0.85;
    detail += fmt(" coord %.0f %.3f", c + 1, frac);
  }
  report(8, ok, "mh_explicit 90% bands bracket the true curves", detail);
}

void speed_ordering(const std::vector<cli::BenchmarkResult>& results) {
  std::map<std::string, std::vector<double>> times;
  for (const auto& r : results)
    if (r.error.empty()) times[r.method].push_back(r.runtime);
  const double t2 = stats::median(times["two_step"]);
  const double tp = stats::median(times["generalized_profiling"]);
  const double tn = stats::median(times["nls_explicit"]);

  // Matched budget: 2000 post-burn-in draws against 2000 particles.
  const auto sys = fitzhugh_nagumo();
  const auto ds = fhn_benchmark_dataset(1);
  ChainConfig chain;
  chain.iterations = 4000;
  chain.burnin = 2000;
  chain.theta_init = two_step(ds, sys, SplineBasis::for_dataset(ds, FhnBenchmark::spline_knots)).theta_hat;
  const double tm = mh_explicit(ds, sys, {}, chain).runtime;
  FilterConfig fc;
  fc.particles = 2000;
  const double tr = rdem_filter(ds, sys, {}, fc).runtime;

  report(9, t2 < tp && tp < tn && tr < tm, "speed ordering",
         fmt("median two_step %.4fs < profiling %.3fs < nls %.3fs; ", t2, tp, tn) +
             fmt("rdem %.3fs < mh %.3fs", tr, tm));
}

void spline_engine() {
  const auto basis = SplineBasis::uniform(0.0, 20.0, 25);
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0.0, 20.0), inner(0.001, 19.999);
  double pu = 0, dsum = 0, fd_err = 0;
  for (int r = 0; r < 100; ++r) {
    const double t = u(rng);
    pu = std::max(pu, std::abs(eval_basis(basis, t).sum() - 1));
    dsum = std::max(dsum, std::abs(eval_basis_deriv(basis, t).sum()));
    const double s = inner(rng), h = 1e-5;
    const Vector fd = (eval_basis(basis, s + h) - eval_basis(basis, s - h)) / (2 * h);
    fd_err = std::max(fd_err, (eval_basis_deriv(basis, s) - fd).cwiseAbs().maxCoeff());
  }
  const auto ds = fhn_benchmark_dataset(2);
  const auto b25 = SplineBasis::for_dataset(ds, 25);
  const auto pen = fit_penalized(ds, b25, fitzhugh_nagumo(), FhnBenchmark::theta(), 0.0, Quadrature::for_dataset(ds));
  const double gap = (pen.fit.beta - fit_ls(ds, b25).beta).cwiseAbs().maxCoeff();
  report(10, pu < 1e-6 && dsum < 1e-6 && fd_err < 1e-6 && gap < 1e-10, "spline engine invariants",
         fmt("partition of unity %.1e, derivative sum %.1e, finite difference %.1e, lambda=0 vs LS %.1e", pu, dsum,
             fd_err, gap));
}

}  // namespace

int main() {
  try {
    rk4_order();
    sir_conservation();
    lorenz_fixed_point();
    zero_noise_nls();
    double wall = 0;
    const auto results = benchmark(wall);
    fhn_recovery(results, wall);
    conjugate_oracle();
    kalman_oracle();
    band_coverage();
    speed_ordering(results);
    spline_engine();
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
  std::cout << failures << " of 10 criteria failed" << std::endl;
  return 0;
}
