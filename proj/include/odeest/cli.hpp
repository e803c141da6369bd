#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "odeest/models.hpp"

namespace odeest::cli {

// Runs one command line; args[0] is the program name. Usage and input errors exit
// with status 2 and numerical failures with status 1, each with one line on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

// One estimator run on one benchmark dataset.
struct BenchmarkResult {
  std::string method;
  std::uint64_t seed = 0;
  Vector estimate;  // theta_hat or posterior median; empty when the run failed
  Vector truth;
  double runtime = 0;
  std::string error;
};

struct BenchmarkRow {
  std::string method;
  std::string seed;  // the seed, or "median" for a summary row
  Vector estimate;
  Vector abs_error;
  double runtime = 0;
};

// Detail rows in (method, seed) order, each method followed by its median row.
// Failed runs show NaN and are left out of the medians. Throws InvalidInput when empty.
std::vector<BenchmarkRow> benchmark_table(const std::vector<BenchmarkResult>& results);
// method,seed,theta1..q,abs_err1..q,runtime
void write_benchmark_table(std::ostream& out, const std::vector<BenchmarkRow>& rows);

struct BenchmarkOptions {
  std::vector<std::string> methods = {"nls_explicit", "two_step", "generalized_profiling", "mh_explicit",
                                      "rdem_filter"};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  double sigma = 0.5;
  int n = 401;
  double t_end = 20.0;
  int multistart = 5;
  int mh_iterations = 6000;
  int mh_burnin = 2000;
  int particles = 2000;
  int draws = 200;  // two-step Bayes draws
};

// Canonical estimator name for a name or alias ("nls", "profiling", "mh", ...).
// Throws LookupError for unknown names.
std::string canonical_method(const std::string& name);

// Runs every (method, seed) cell of the FitzHugh-Nagumo benchmark. Progress lines go to `log`.
std::vector<BenchmarkResult> run_benchmark(const BenchmarkOptions& options, std::ostream* log = nullptr);

}  // namespace odeest::cli
