#include <cmath>
#include <sstream>

#include "doctest.h"
#include "odeest/simulate.hpp"

using namespace odeest;

TEST_CASE("generate: zero noise reproduces the trajectory") {
  const auto fhn = fitzhugh_nagumo();
  const auto grid = TimeGrid::uniform(0, 20, 401);
  const auto ds = generate(fhn, FhnBenchmark::theta(), FhnBenchmark::x0(), grid,
                           NoiseSpec::uniform(2, 0.0), 3);
  const auto traj = integrate(fhn, FhnBenchmark::x0(), grid, FhnBenchmark::theta());
  CHECK((ds.observations.array() == traj.states.array()).all());
  CHECK(ds.n() == 401);
}

TEST_CASE("generate: benchmark configuration carries its truth") {
  const auto ds = fhn_benchmark_dataset(1);
  REQUIRE(ds.truth);
  CHECK(ds.truth->theta(2) == 3.0);
  CHECK(ds.truth->x0(0) == -1.0);
  CHECK(ds.truth->sigma(1) * ds.truth->sigma(1) == doctest::Approx(0.25));
  CHECK(ds.grid.back() == 20.0);
  CHECK(ds.n() == 401);
}

TEST_CASE("generate: seed determinism") {
  const auto a = fhn_benchmark_dataset(5);
  const auto b = fhn_benchmark_dataset(5);
  const auto c = fhn_benchmark_dataset(6);
  CHECK((a.observations.array() == b.observations.array()).all());
  CHECK((a.observations.array() != c.observations.array()).any());
}

TEST_CASE("generate: noise moments over replicated draws") {
  const auto fhn = fitzhugh_nagumo();
  const auto grid = TimeGrid::uniform(0, 1, 2);
  const double sigma = 0.5;
  const auto truth = integrate(fhn, FhnBenchmark::x0(), grid, FhnBenchmark::theta(), 1);
  const int reps = 10000;
  Eigen::Array2d sum = Eigen::Array2d::Zero(), sum2 = Eigen::Array2d::Zero();
  for (int r = 0; r < reps; ++r) {
    const auto ds = generate(fhn, FhnBenchmark::theta(), FhnBenchmark::x0(), grid,
                             NoiseSpec::uniform(2, sigma), 1000 + r, 1);
    const Eigen::Array2d y = ds.observations.row(1).transpose().array();
    sum += y;
    sum2 += y * y;
  }
  const Eigen::Array2d mean = sum / reps;
  const Eigen::Array2d var = (sum2 - reps * mean * mean) / (reps - 1);
  for (int j = 0; j < 2; ++j) {
    CHECK(std::abs(mean(j) - truth.states(1, j)) < 4 * sigma / std::sqrt(double(reps)));
    CHECK(std::abs(var(j) / (sigma * sigma) - 1.0) < 0.10);
  }
}

TEST_CASE("generate: standardized residuals are white") {
  const auto fhn = fitzhugh_nagumo();
  const auto grid = TimeGrid::uniform(0, 20, 401);
  const Eigen::Vector2d sig(0.5, 0.2);
  const auto truth = integrate(fhn, FhnBenchmark::x0(), grid, FhnBenchmark::theta());
  Eigen::Array2d sum = Eigen::Array2d::Zero(), sum2 = Eigen::Array2d::Zero();
  const int reps = 5;  // 5 x 401 = 2005 residuals per coordinate
  for (int r = 0; r < reps; ++r) {
    const auto ds = generate(fhn, FhnBenchmark::theta(), FhnBenchmark::x0(), grid, {sig}, r);
    for (int i = 0; i < ds.n(); ++i) {
      const Eigen::Array2d z = (ds.observations.row(i) - truth.states.row(i)).transpose().array() /
                               sig.array();
      sum += z;
      sum2 += z * z;
    }
  }
  const double m = reps * 401.0;
  for (int j = 0; j < 2; ++j) {
    const double mean = sum(j) / m;
    CHECK(std::abs(mean) < 0.1);
    const double var = sum2(j) / m - mean * mean;
    CHECK(var > 0.85);
    CHECK(var < 1.15);
  }
}

TEST_CASE("generate: invalid noise") {
  const auto fhn = fitzhugh_nagumo();
  CHECK_THROWS_AS(generate(fhn, FhnBenchmark::theta(), FhnBenchmark::x0(), TimeGrid::uniform(0, 1, 3),
                           NoiseSpec::uniform(3, 0.1), 1),
                  InvalidInput);
  CHECK_THROWS_AS(generate(fhn, FhnBenchmark::theta(), FhnBenchmark::x0(), TimeGrid::uniform(0, 1, 3),
                           NoiseSpec::uniform(2, -0.1), 1),
                  InvalidInput);
}

TEST_CASE("dataset files round-trip bit-exactly") {
  const auto ds = fhn_benchmark_dataset(1);
  std::stringstream buf;
  write_dataset(buf, ds);
  const auto back = read_dataset(buf);
  CHECK((back.grid.points().array() == ds.grid.points().array()).all());
  CHECK((back.observations.array() == ds.observations.array()).all());
  REQUIRE(back.truth);
  CHECK((back.truth->theta.array() == ds.truth->theta.array()).all());
  CHECK((back.truth->x0.array() == ds.truth->x0.array()).all());
  CHECK((back.truth->sigma.array() == ds.truth->sigma.array()).all());
  CHECK(back.truth->seed == ds.truth->seed);

  Dataset bare{ds.grid, ds.observations, std::nullopt};
  std::stringstream buf2;
  write_dataset(buf2, bare);
  CHECK(buf2.str().rfind("t,y1,y2\n", 0) == 0);
  CHECK_FALSE(read_dataset(buf2).truth);
}

TEST_CASE("dataset files: validation and parse errors") {
  {
    std::istringstream in("t,y1\n");
    CHECK_THROWS_AS(read_dataset(in), ValidationError);
  }
  {
    std::istringstream in("t,y1\n0,1\n2,3\n1,2\n");
    try {
      read_dataset(in);
      FAIL("expected validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("non-increasing grid") != std::string::npos);
    }
  }
  {
    std::istringstream in("# seed=1\nt,y1\n0,1\n1,abc\n");
    try {
      read_dataset(in);
      FAIL("expected parse error");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("line 4") != std::string::npos);
    }
  }
  {
    std::istringstream in("t,y1,y2\n0,1\n");
    CHECK_THROWS_AS(read_dataset(in), ParseError);
  }
  {
    std::istringstream in("x,y\n0,1\n");
    CHECK_THROWS_AS(read_dataset(in), ParseError);
  }
}
