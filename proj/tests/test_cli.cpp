#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "odeest/bayes.hpp"
#include "odeest/cli.hpp"
#include "odeest/freq.hpp"

using namespace odeest;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("odeest_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "odeest");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

// Report text without the runtime line.
std::string without_runtime(const std::string& text) {
  std::istringstream in(text);
  std::string line, kept;
  while (std::getline(in, line))
    if (line.rfind("runtime=", 0) != 0) kept += line + '\n';
  return kept;
}

cli::BenchmarkResult result(const std::string& method, std::uint64_t seed, Vector est) {
  cli::BenchmarkResult r;
  r.method = method;
  r.seed = seed;
  r.estimate = est;
  r.truth = FhnBenchmark::theta();
  r.runtime = 0.1 * seed;
  return r;
}

}  // namespace

TEST_CASE("cli simulate then fit two_step") {
  TempDir dir;
  const auto sim = invoke({"simulate", "--system", "fhn", "--theta", "0.2,0.2,3", "--x0", "-1,1", "--sigma",
                           "0.5", "--seed", "1", "--out", dir / "data.csv"});
  REQUIRE(sim.code == 0);
  const Dataset ds = load_dataset(dir / "data.csv");
  CHECK(ds.n() == 401);
  CHECK(ds.dim() == 2);
  REQUIRE(ds.truth);
  CHECK(ds.truth->theta.isApprox(FhnBenchmark::theta()));

  const auto fit = invoke({"fit", "--data", dir / "data.csv", "--method", "two_step", "--out", dir / "r.txt"});
  REQUIRE(fit.code == 0);
  const std::string report = slurp(dir / "r.txt");
  const auto pos = report.find("theta_hat=");
  REQUIRE(pos != std::string::npos);
  std::istringstream line(report.substr(pos + 10));
  std::string values;
  std::getline(line, values);
  std::istringstream fields(values);
  std::string field;
  const auto box = fitzhugh_nagumo().bounds();
  int k = 0;
  while (std::getline(fields, field, ',')) {
    const double v = std::stod(field);
    CHECK(v >= box[k].lower);
    CHECK(v <= box[k].upper);
    ++k;
  }
  CHECK(k == 3);
}

TEST_CASE("cli output goes to ODEEST_OUTPUT_DIR by default") {
  TempDir dir;
  setenv("ODEEST_OUTPUT_DIR", dir.path.c_str(), 1);
  const auto sim = invoke({"simulate", "--n", "21", "--t-end", "2"});
  unsetenv("ODEEST_OUTPUT_DIR");
  REQUIRE(sim.code == 0);
  CHECK(fs::exists(dir / "dataset.csv"));
}

TEST_CASE("cli usage errors exit 2 with one line") {
  TempDir dir;
  REQUIRE(invoke({"simulate", "--n", "41", "--t-end", "4", "--out", dir / "d.csv"}).code == 0);

  auto r = invoke({"fit", "--data", dir / "d.csv", "--method", "nosuch"});
  CHECK(r.code == 2);
  CHECK(r.err.find("nosuch") != std::string::npos);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);

  r = invoke({"fit", "--data", dir / "d.csv", "--method", "mh"});
  CHECK(r.code == 2);
  r = invoke({"posterior", "--data", dir / "d.csv", "--method", "two_step"});
  CHECK(r.code == 2);
  r = invoke({"fit", "--data", dir / "missing.csv", "--method", "two_step"});
  CHECK(r.code == 2);
  r = invoke({"fit", "--data", dir / "d.csv", "--method", "two_step", "--out", dir / "d.csv"});
  CHECK(r.code == 2);
  r = invoke({"simulate", "--theta", "0.2,x,3"});
  CHECK(r.code == 2);
  r = invoke({"simulate", "--system", "nosuch"});
  CHECK(r.code == 2);
  r = invoke({"frobnicate"});
  CHECK(r.code == 2);
  r = invoke({});
  CHECK(r.code == 2);
  r = invoke({"posterior", "--data", dir / "d.csv", "--method", "rdem", "--particles", "10"});
  CHECK(r.code == 2);
  r = invoke({"bands", "--data", dir / "d.csv"});
  CHECK(r.code == 2);
}

TEST_CASE("cli help exits 0 and shows defaults") {
  auto r = invoke({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("simulate") != std::string::npos);
  for (const char* cmd : {"simulate", "fit", "posterior", "bands", "benchmark"}) {
    r = invoke({cmd, "--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("--") != std::string::npos);
  }
  r = invoke({"simulate", "--help"});
  CHECK(r.out.find("[401]") != std::string::npos);
  CHECK(r.out.find("standard deviation") != std::string::npos);
}

TEST_CASE("cli numerical failure exits 1") {
  TempDir dir;
  // Two observations cannot support a 25-knot spline regression.
  REQUIRE(invoke({"simulate", "--n", "2", "--t-end", "1", "--out", dir / "d.csv"}).code == 0);
  const auto r = invoke({"fit", "--data", dir / "d.csv", "--method", "two_step", "--out", dir / "r.txt"});
  CHECK(r.code == 1);
  CHECK(!r.err.empty());
}

TEST_CASE("cli runs are reproducible apart from runtime") {
  TempDir dir;
  REQUIRE(invoke({"simulate", "--seed", "4", "--out", dir / "d.csv"}).code == 0);
  REQUIRE(invoke({"simulate", "--seed", "4", "--out", dir / "d2.csv"}).code == 0);
  CHECK(slurp(dir / "d.csv") == slurp(dir / "d2.csv"));

  for (const char* name : {"a.txt", "b.txt"})
    REQUIRE(invoke({"fit", "--data", dir / "d.csv", "--method", "pda", "--out", dir / name}).code == 0);
  CHECK(without_runtime(slurp(dir / "a.txt")) == without_runtime(slurp(dir / "b.txt")));

  for (const char* name : {"a.csv", "b.csv"})
    REQUIRE(invoke({"posterior", "--data", dir / "d.csv", "--method", "tsb_gm", "--draws", "40", "--seed", "3",
                    "--out", dir / name})
                .code == 0);
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
}

TEST_CASE("cli posterior samples round trip and feed bands") {
  TempDir dir;
  REQUIRE(invoke({"simulate", "--seed", "2", "--out", dir / "d.csv"}).code == 0);
  REQUIRE(invoke({"posterior", "--data", dir / "d.csv", "--method", "rdem", "--particles", "300", "--out",
                  dir / "s.csv"})
              .code == 0);
  const PosteriorSamples s = load_samples(dir / "s.csv");
  CHECK(s.size() == 300);
  CHECK(s.theta.cols() == 3);
  CHECK(s.sigma.cols() == 2);
  CHECK(s.x0.cols() == 2);
  std::ostringstream again;
  write_samples(again, s);
  CHECK(again.str() == slurp(dir / "s.csv"));

  REQUIRE(invoke({"bands", "--data", dir / "d.csv", "--samples", dir / "s.csv", "--out", dir / "b.csv"}).code == 0);
  std::istringstream bands(slurp(dir / "b.csv"));
  std::string header;
  std::getline(bands, header);
  CHECK(header == "t,coord,q05,q50,q95");
  int rows = 0;
  for (std::string line; std::getline(bands, line);) ++rows;
  CHECK(rows == 401 * 2);
}

TEST_CASE("read_samples rejects malformed tables") {
  std::istringstream bad_header("draw,sigma1,theta1\n1,0.5,0.2\n");
  CHECK_THROWS_AS(read_samples(bad_header), ParseError);
  std::istringstream bad_value("draw,theta1\n1,abc\n");
  CHECK_THROWS_AS(read_samples(bad_value), ParseError);
}

TEST_CASE("benchmark table layout") {
  SUBCASE("one method one seed gives a detail and a median row") {
    const auto rows = cli::benchmark_table({result("nls_explicit", 1, FhnBenchmark::theta())});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].seed == "1");
    CHECK(rows[1].seed == "median");
    CHECK(rows[1].abs_error.isZero());
  }
  SUBCASE("ten seeds by five methods gives 55 rows in lexical order") {
    std::vector<cli::BenchmarkResult> results;
    std::mt19937_64 rng(9);
    std::normal_distribution<double> z;
    const std::vector<std::string> methods = {"rdem_filter", "nls_explicit", "two_step", "mh_explicit",
                                              "generalized_profiling"};
    for (const auto& m : methods)
      for (std::uint64_t seed = 1; seed <= 10; ++seed)
        results.push_back(result(m, seed, FhnBenchmark::theta() + 0.1 * Vector::NullaryExpr(3, [&] { return z(rng); })));
    const auto rows = cli::benchmark_table(results);
    REQUIRE(rows.size() == 55);
    CHECK(rows[0].method == "generalized_profiling");
    CHECK(rows[10].seed == "median");
    CHECK(rows[54].method == "two_step");

    std::shuffle(results.begin(), results.end(), rng);
    const auto shuffled = cli::benchmark_table(results);
    std::ostringstream a, b;
    cli::write_benchmark_table(a, rows);
    cli::write_benchmark_table(b, shuffled);
    CHECK(a.str() == b.str());
  }
  SUBCASE("seeds sort numerically within a method") {
    const auto rows = cli::benchmark_table(
        {result("two_step", 10, FhnBenchmark::theta()), result("two_step", 2, FhnBenchmark::theta())});
    CHECK(rows[0].seed == "2");
    CHECK(rows[1].seed == "10");
  }
  SUBCASE("failed runs are NaN and left out of the median") {
    auto bad = result("two_step", 2, Vector());
    bad.error = "diverged";
    Vector off = FhnBenchmark::theta();
    off(0) += 0.3;
    const auto rows = cli::benchmark_table({result("two_step", 1, off), bad});
    REQUIRE(rows.size() == 3);
    CHECK(std::isnan(rows[1].estimate(0)));
    CHECK(rows[2].abs_error(0) == doctest::Approx(0.3));
    std::ostringstream s;
    cli::write_benchmark_table(s, rows);
    CHECK(s.str().rfind("method,seed,theta1,theta2,theta3,abs_err1,abs_err2,abs_err3,runtime\n", 0) == 0);
    CHECK(s.str().find("nan") != std::string::npos);
  }
  SUBCASE("empty input") { CHECK_THROWS_AS(cli::benchmark_table({}), InvalidInput); }
}

TEST_CASE("method aliases") {
  CHECK(cli::canonical_method("nls") == "nls_explicit");
  CHECK(cli::canonical_method("profiling") == "generalized_profiling");
  CHECK(cli::canonical_method("rdem") == "rdem_filter");
  CHECK(cli::canonical_method("mh_explicit") == "mh_explicit");
  CHECK_THROWS_AS(cli::canonical_method("nosuch"), LookupError);
}

TEST_CASE("benchmark runner covers every cell") {
  cli::BenchmarkOptions o;
  o.methods = {"two_step", "tsb_gm"};
  o.seeds = {2, 1};
  o.draws = 30;
  const auto results = cli::run_benchmark(o);
  REQUIRE(results.size() == 4);
  for (const auto& r : results) {
    CHECK(r.error.empty());
    CHECK(r.estimate.size() == 3);
  }
  CHECK(cli::benchmark_table(results).size() == 6);
}
