#include <cmath>
#include <sstream>

#include "doctest.h"
#include "odeest/freq.hpp"

using namespace odeest;

namespace {

OdeSystem linear_growth() {
  return OdeSystem::from_functor("linear", 1, 1, {{-10, 10}},
                                 [](const auto& x, const auto&, const auto& th, auto& dx) {
                                   dx(0) = th(0) * x(0);
                                 });
}

Dataset zero_noise_fhn(int n = FhnBenchmark::n) {
  return generate(fitzhugh_nagumo(), FhnBenchmark::theta(), FhnBenchmark::x0(),
                  TimeGrid::uniform(0, FhnBenchmark::t_end, n), NoiseSpec::uniform(2, 0.0), 1);
}

double max_abs_diff(const Vector& a, const Vector& b) { return (a - b).lpNorm<Eigen::Infinity>(); }

}  // namespace

TEST_CASE("nls_explicit: zero-noise FHN recovers the truth") {
  const auto ds = zero_noise_fhn();
  const auto r = nls_explicit(ds, fitzhugh_nagumo());
  CHECK(r.method == "nls_explicit");
  CHECK(max_abs_diff(r.theta_hat, FhnBenchmark::theta()) < 1e-3);
  CHECK(r.objective < 1e-6);
  CHECK(r.converged);
  REQUIRE(r.x0_hat);
  CHECK(max_abs_diff(*r.x0_hat, FhnBenchmark::x0()) < 1e-3);
  CHECK(r.runtime < 60.0);
}

TEST_CASE("nls_explicit: optimum is no worse than the truth") {
  const auto ds = fhn_benchmark_dataset(3);
  const auto sys = fitzhugh_nagumo();
  OptimizerConfig cfg;
  cfg.multistart_count = 3;
  const auto r = nls_explicit(ds, sys, cfg);
  const double at_truth = explicit_misfit(ds, sys, FhnBenchmark::theta(), FhnBenchmark::x0(), 10);
  CHECK(r.objective <= at_truth);
  CHECK(r.objective ==
        doctest::Approx(explicit_misfit(ds, sys, r.theta_hat, *r.x0_hat, 10)).epsilon(1e-12));
  CHECK(sys.in_bounds(r.theta_hat));
  // one note per start
  CHECK(r.diagnostics.size() >= 3);
}

TEST_CASE("nls_explicit: input errors") {
  const auto sys = fitzhugh_nagumo();
  Dataset one{TimeGrid::uniform(0, 1, 2), Matrix::Zero(1, 2), std::nullopt};
  CHECK_THROWS_AS(nls_explicit(one, sys), InvalidInput);
  const auto ds = zero_noise_fhn(21);
  OptimizerConfig bad;
  bad.multistart_count = 0;
  CHECK_THROWS_AS(nls_explicit(ds, sys, bad), InvalidInput);
  bad = OptimizerConfig{};
  bad.tolerance = 0;
  CHECK_THROWS_AS(nls_explicit(ds, sys, bad), InvalidInput);
  CHECK_THROWS_AS(nls_explicit(ds, sir(1000)), InvalidInput);
}

TEST_CASE("nls_explicit: fixed seed is deterministic") {
  const auto ds = fhn_benchmark_dataset(2, 0.5, 101, 10.0);
  OptimizerConfig cfg;
  cfg.multistart_count = 2;
  cfg.seed = 17;
  const auto a = nls_explicit(ds, fitzhugh_nagumo(), cfg);
  const auto b = nls_explicit(ds, fitzhugh_nagumo(), cfg);
  CHECK(a.theta_hat == b.theta_hat);
  CHECK(*a.x0_hat == *b.x0_hat);
  CHECK(a.objective == b.objective);
  CHECK(a.diagnostics == b.diagnostics);
}

TEST_CASE("two_step: linear growth from exact data") {
  const auto grid = TimeGrid::uniform(0, 2, 201);
  Matrix y(grid.size(), 1);
  for (int i = 0; i < grid.size(); ++i) y(i, 0) = std::exp(0.5 * grid[i]);
  const Dataset ds{grid, y, std::nullopt};
  const auto sys = linear_growth();
  const auto basis = SplineBasis::for_dataset(ds, 20);
  const auto r = two_step(ds, sys, basis);
  CHECK(r.theta_hat(0) == doctest::Approx(0.5).epsilon(1e-2));
  REQUIRE(r.x0_hat);
  CHECK((*r.x0_hat)(0) == doctest::Approx(1.0).epsilon(1e-6));

  // The criterion is a quadratic in theta: theta* = sum x' x / sum x^2.
  const auto fit = fit_ls(ds, basis);
  const Matrix x = fit.values(grid.points());
  const Matrix xd = fit.derivatives(grid.points());
  const double closed = (xd.col(0).dot(x.col(0))) / x.col(0).squaredNorm();
  CHECK(r.theta_hat(0) == doctest::Approx(closed).epsilon(1e-9));
}

TEST_CASE("two_step: objective is the gradient mismatch at the returned estimate") {
  const auto ds = fhn_benchmark_dataset(1);
  const auto sys = fitzhugh_nagumo();
  const auto basis = SplineBasis::for_dataset(ds, FhnBenchmark::spline_knots);
  const auto r = two_step(ds, sys, basis);
  const double again =
      gradient_mismatch(fit_ls(ds, basis), sys, r.theta_hat, ds.grid.points(), Vector::Ones(ds.n()));
  CHECK(std::abs(again - r.objective) <= 1e-12 * std::max(1.0, again));
  CHECK(sys.in_bounds(r.theta_hat));
}

TEST_CASE("two_step: faster than nls_explicit on the FHN benchmark") {
  const auto ds = fhn_benchmark_dataset(1);
  const auto sys = fitzhugh_nagumo();
  OptimizerConfig cfg;
  cfg.multistart_count = 1;
  const auto ts = two_step(ds, sys, SplineBasis::for_dataset(ds, FhnBenchmark::spline_knots));
  const auto nls = nls_explicit(ds, sys, cfg);
  CHECK(ts.runtime < nls.runtime);
}

TEST_CASE("two_step: constant SIR data gives zero dynamics") {
  const auto grid = TimeGrid::uniform(0, 10, 51);
  Matrix y(grid.size(), 3);
  y.col(0).setConstant(990);
  y.col(1).setZero();
  y.col(2).setConstant(10);
  const Dataset ds{grid, y, std::nullopt};
  const auto sys = sir(1000);
  const auto r = two_step(ds, sys, SplineBasis::for_dataset(ds, 8));
  CHECK(r.theta_hat(0) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r.theta_hat(1) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r.objective < 1e-12);
  CHECK(sys.in_bounds(r.theta_hat));
}

TEST_CASE("two_step: rank-deficient basis propagates") {
  const auto ds = zero_noise_fhn(21);
  CHECK_THROWS_AS(two_step(ds, fitzhugh_nagumo(), SplineBasis::for_dataset(ds, 25)),
                  ConditioningError);
}

TEST_CASE("iterated_pda: tiny lambda reproduces two_step in the first round") {
  const auto ds = fhn_benchmark_dataset(1);
  const auto sys = fitzhugh_nagumo();
  const auto basis = SplineBasis::for_dataset(ds, FhnBenchmark::spline_knots);
  PdaOptions one;
  one.max_rounds = 1;
  const auto pda = iterated_pda(ds, sys, basis, 1e-12, sys.nominal_theta(), one);
  const auto ts = two_step(ds, sys, basis);
  CHECK(pda.iterations == 1);
  CHECK(max_abs_diff(pda.theta_hat, ts.theta_hat) < 1e-6);
}

TEST_CASE("iterated_pda: final criterion is no worse than round one") {
  const auto ds = fhn_benchmark_dataset(1);
  const auto sys = fitzhugh_nagumo();
  const auto basis = SplineBasis::for_dataset(ds, FhnBenchmark::spline_knots);
  const auto r = iterated_pda(ds, sys, basis, 1.0, sys.nominal_theta());
  REQUIRE(!r.trace.empty());
  CHECK(r.trace.size() == static_cast<std::size_t>(r.iterations));
  CHECK(r.trace.back() <= r.trace.front());
  CHECK(r.lambda == 1.0);
}

TEST_CASE("iterated_pda: truth is a fixed point without noise") {
  const auto ds = zero_noise_fhn();
  const auto sys = fitzhugh_nagumo();
  const auto basis = SplineBasis::for_dataset(ds, FhnBenchmark::profiling_knots);
  const auto r = iterated_pda(ds, sys, basis, 1.0, FhnBenchmark::theta());
  CHECK(max_abs_diff(r.theta_hat, FhnBenchmark::theta()) < 1e-3);
}

TEST_CASE("iterated_pda: non-convergence keeps the last two iterates") {
  const auto ds = fhn_benchmark_dataset(1);
  const auto sys = fitzhugh_nagumo();
  const auto basis = SplineBasis::for_dataset(ds, FhnBenchmark::spline_knots);
  PdaOptions opts;
  opts.max_rounds = 2;
  opts.tolerance = 1e-300;
  const auto r = iterated_pda(ds, sys, basis, 1.0, sys.nominal_theta(), opts);
  CHECK_FALSE(r.converged);
  REQUIRE(r.diagnostics.size() == 3);
  CHECK(r.diagnostics[1].rfind("theta[1]=", 0) == 0);
  CHECK(r.diagnostics[2].rfind("theta[2]=", 0) == 0);
  CHECK_THROWS_AS(iterated_pda(ds, sys, basis, 0.0, sys.nominal_theta()), InvalidInput);
}

TEST_CASE("generalized_profiling: single lambda") {
  const auto ds = fhn_benchmark_dataset(2);
  const auto sys = fitzhugh_nagumo();
  const auto basis = SplineBasis::for_dataset(ds, FhnBenchmark::profiling_knots);
  const auto r = generalized_profiling(ds, sys, basis, {10.0});
  CHECK(r.theta_hat.allFinite());
  CHECK(sys.in_bounds(r.theta_hat));
  REQUIRE(r.lambda);
  CHECK(*r.lambda == 10.0);
  CHECK(std::isfinite(r.objective));
}

TEST_CASE("generalized_profiling: zero-noise data") {
  const auto ds = zero_noise_fhn();
  const auto sys = fitzhugh_nagumo();
  const auto basis = SplineBasis::for_dataset(ds, FhnBenchmark::profiling_knots);
  const auto grid = FhnBenchmark::lambda_grid();
  const auto r = generalized_profiling(ds, sys, basis, grid);
  const bool picked_max = *r.lambda == grid.back();
  const bool close = max_abs_diff(r.theta_hat, FhnBenchmark::theta()) < 1e-2;
  CHECK((picked_max || close));
}

TEST_CASE("generalized_profiling: input errors") {
  const auto ds = zero_noise_fhn(101);
  const auto sys = fitzhugh_nagumo();
  const auto basis = SplineBasis::for_dataset(ds, 20);
  CHECK_THROWS_AS(generalized_profiling(ds, sys, basis, {}), InvalidInput);
  CHECK_THROWS_AS(generalized_profiling(ds, sys, basis, {1.0, -1.0}), InvalidInput);
}

TEST_CASE("generalized_profiling: simplex middle level agrees with Gauss-Newton") {
  const auto ds = fhn_benchmark_dataset(4, 0.5, 101, 10.0);
  const auto sys = fitzhugh_nagumo();
  const auto basis = SplineBasis::for_dataset(ds, 50);
  OptimizerConfig simplex;
  simplex.multistart_count = 1;
  OptimizerConfig gn = profiling_defaults();
  gn.multistart_count = 1;
  const auto a = generalized_profiling(ds, sys, basis, {100.0}, simplex);
  const auto b = generalized_profiling(ds, sys, basis, {100.0}, gn);
  // Both find a stationary point of the same criterion; compare the criterion.
  CHECK(a.objective == doctest::Approx(b.objective).epsilon(1e-4));
}

TEST_CASE("report: round trip") {
  EstimateReport r;
  r.method = "iterated_pda";
  r.theta_hat = (Vector(3) << 0.1, 1.0 / 3.0, -2e-17).finished();
  r.x0_hat = (Vector(2) << -1.0, 0.25).finished();
  r.objective = 216.95012345678901;
  r.runtime = 0.125;
  r.iterations = 7;
  r.converged = true;
  r.lambda = 10.0;
  r.trace = {3.0, 2.0, 1.5};
  r.diagnostics = {"first note", "theta[1]=0.1,0.2"};
  std::stringstream buf;
  write_report(buf, r);
  const auto back = read_report(buf);
  CHECK(back.method == r.method);
  CHECK(back.theta_hat == r.theta_hat);
  CHECK(*back.x0_hat == *r.x0_hat);
  CHECK(back.objective == r.objective);
  CHECK(back.runtime == r.runtime);
  CHECK(back.iterations == r.iterations);
  CHECK(back.converged == r.converged);
  CHECK(*back.lambda == *r.lambda);
  CHECK(back.trace == r.trace);
  CHECK(back.diagnostics == r.diagnostics);

  std::stringstream bad("method=x\ntheta_hat=1,zz\n");
  CHECK_THROWS_AS(read_report(bad), ParseError);
}
