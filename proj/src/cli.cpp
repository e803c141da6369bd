#include "odeest/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "csv.hpp"
#include "odeest/bayes.hpp"
#include "odeest/freq.hpp"
#include "odeest/stats.hpp"

namespace odeest::cli {

namespace {

namespace fs = std::filesystem;

// Thrown for bad flag combinations; reported like a parse error.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::map<std::string, std::string>& aliases() {
  static const std::map<std::string, std::string> m = {
      {"nls", "nls_explicit"},
      {"nls_explicit", "nls_explicit"},
      {"two_step", "two_step"},
      {"pda", "iterated_pda"},
      {"iterated_pda", "iterated_pda"},
      {"profiling", "generalized_profiling"},
      {"generalized_profiling", "generalized_profiling"},
      {"mh", "mh_explicit"},
      {"mh_explicit", "mh_explicit"},
      {"collocation", "collocation_posterior"},
      {"collocation_posterior", "collocation_posterior"},
      {"tsb_gm", "two_step_bayes_gm"},
      {"two_step_bayes_gm", "two_step_bayes_gm"},
      {"tsb_rk", "two_step_bayes_rk"},
      {"two_step_bayes_rk", "two_step_bayes_rk"},
      {"rdem", "rdem_filter"},
      {"rdem_filter", "rdem_filter"},
  };
  return m;
}

bool is_bayesian(const std::string& method) {
  return method == "mh_explicit" || method == "collocation_posterior" || method == "two_step_bayes_gm" ||
         method == "two_step_bayes_rk" || method == "rdem_filter";
}

Vector parse_list(const std::string& flag, const std::string& text) {
  try {
    return csv::parse_vector(text);
  } catch (const std::invalid_argument& e) {
    throw UsageError(flag + ": " + e.what());
  }
}

std::vector<Interval> parse_box(const std::string& text) {
  std::vector<Interval> box;
  for (const auto& field : csv::split(text)) {
    const auto colon = field.find(':');
    Interval iv;
    if (colon == std::string::npos || !csv::parse_double(field.substr(0, colon), iv.lower) ||
        !csv::parse_double(field.substr(colon + 1), iv.upper))
      throw UsageError("--theta-box: expected lower:upper per parameter, got '" + field + "'");
    box.push_back(iv);
  }
  return box;
}

OdeSystem make_system(const std::string& name, const std::vector<std::string>& args) {
  std::map<std::string, double> values;
  for (const auto& a : args) {
    const auto eq = a.find('=');
    double v = 0;
    if (eq == std::string::npos || !csv::parse_double(a.substr(eq + 1), v))
      throw UsageError("--system-arg: expected key=value, got '" + a + "'");
    values[a.substr(0, eq)] = v;
  }
  return builtin(name, values);
}

std::string output_path(const std::string& flag, const std::string& default_name) {
  if (!flag.empty()) return flag;
  const char* dir = std::getenv("ODEEST_OUTPUT_DIR");
  const fs::path base = dir && *dir ? fs::path(dir) : fs::path(".");
  std::error_code ec;
  fs::create_directories(base, ec);
  return (base / default_name).string();
}

void check_distinct(const std::string& input, const std::string& output) {
  std::error_code ec;
  if (fs::weakly_canonical(input, ec) == fs::weakly_canonical(output, ec))
    throw UsageError("output path '" + output + "' is the same as the input");
}

Dataset read_input(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("no such file: '" + path + "'");
  return load_dataset(path);
}

std::ofstream open_output(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw UsageError("cannot write '" + path + "'");
  return f;
}

// Flags shared by fit, posterior and bands.
struct MethodFlags {
  std::string data;
  std::string system = "fhn";
  std::vector<std::string> system_args;
  std::string method;
  int knots = 0;
  double lambda = 0;
  std::string lambdas = "0.1,1,10,100";
  std::string theta0;
  std::string theta_box;
  int multistart = 5;
  int max_iters = 0;
  double tolerance = 0;
  std::string algorithm;
  int refine = 10;
  std::uint64_t seed = 1;
  int iters = 6000;
  int burnin = 2000;
  int particles = 2000;
  double discount = 0.98;
  int draws = 200;
  int rk_refine = 2;
  std::string out;
};

void add_data_flags(CLI::App* cmd, MethodFlags& f) {
  cmd->add_option("--system", f.system, "Model: fhn, sir (arg N) or lorenz96 (args p, F)");
  cmd->add_option("--system-arg", f.system_args, "Model argument key=value, repeatable");
  cmd->add_option("--seed", f.seed, "Random seed");
  cmd->add_option("-o,--out", f.out, "Output file (default in $ODEEST_OUTPUT_DIR or the working directory)");
}

void add_fit_flags(CLI::App* cmd, MethodFlags& f) {
  cmd->add_option("--knots", f.knots, "Interior spline knots; 0 means 25, or 200 for generalized_profiling");
  cmd->add_option("--lambda", f.lambda, "Penalty weight; 0 means 1 for iterated_pda, 10 for collocation_posterior");
  cmd->add_option("--lambdas", f.lambdas, "Lambda grid for generalized_profiling");
  cmd->add_option("--theta0", f.theta0, "Starting theta (comma list); default: two_step estimate");
  cmd->add_option("--multistart", f.multistart, "Number of optimizer starts");
  cmd->add_option("--max-iters", f.max_iters, "Optimizer iteration budget; 0 means the method default");
  cmd->add_option("--tolerance", f.tolerance, "Optimizer tolerance; 0 means the method default");
  cmd->add_option("--algorithm", f.algorithm, "simplex or gauss-newton; empty means the method default");
  cmd->add_option("--refine", f.refine, "RK4 substeps per observation gap");
}

void add_posterior_flags(CLI::App* cmd, MethodFlags& f) {
  cmd->add_option("--iters", f.iters, "MCMC iterations including burn-in");
  cmd->add_option("--burnin", f.burnin, "MCMC burn-in iterations");
  cmd->add_option("--particles", f.particles, "Particle count for rdem_filter");
  cmd->add_option("--discount", f.discount, "Liu-West discount a in (0.5, 1)");
  cmd->add_option("--draws", f.draws, "Draws for two_step_bayes");
  cmd->add_option("--rk-refine", f.rk_refine, "RK4 steps per quadrature interval for two_step_bayes_rk");
  cmd->add_option("--theta-box", f.theta_box, "Prior box lower:upper per parameter; default: model bounds");
}

SplineBasis basis_for(const Dataset& ds, const MethodFlags& f, const std::string& method) {
  const int knots = f.knots > 0 ? f.knots
                                : method == "generalized_profiling" ? FhnBenchmark::profiling_knots
                                                                    : FhnBenchmark::spline_knots;
  return SplineBasis::for_dataset(ds, knots);
}

Vector start_theta(const Dataset& ds, const OdeSystem& sys, const MethodFlags& f) {
  if (!f.theta0.empty()) return parse_list("--theta0", f.theta0);
  return two_step(ds, sys, SplineBasis::for_dataset(ds, FhnBenchmark::spline_knots)).theta_hat;
}

EstimateReport run_fit(const Dataset& ds, const OdeSystem& sys, const MethodFlags& f,
                       const std::string& method) {
  OptimizerConfig cfg = method == "generalized_profiling" ? profiling_defaults() : OptimizerConfig{};
  cfg.multistart_count = f.multistart;
  cfg.seed = f.seed;
  if (f.max_iters > 0) cfg.max_iters = f.max_iters;
  if (f.tolerance > 0) cfg.tolerance = f.tolerance;
  if (!f.algorithm.empty()) {
    if (f.algorithm == "simplex") cfg.algorithm = Algorithm::Simplex;
    else if (f.algorithm == "gauss-newton") cfg.algorithm = Algorithm::GaussNewton;
    else throw UsageError("--algorithm: expected simplex or gauss-newton, got '" + f.algorithm + "'");
  }
  if (method == "nls_explicit") return nls_explicit(ds, sys, cfg, f.refine);
  if (method == "two_step") return two_step(ds, sys, basis_for(ds, f, method));
  if (method == "iterated_pda")
    return iterated_pda(ds, sys, basis_for(ds, f, method), f.lambda > 0 ? f.lambda : 1.0,
                        start_theta(ds, sys, f));
  const Vector grid = parse_list("--lambdas", f.lambdas);
  return generalized_profiling(ds, sys, basis_for(ds, f, method),
                               std::vector<double>(grid.data(), grid.data() + grid.size()), cfg);
}

PosteriorSamples run_posterior(const Dataset& ds, const OdeSystem& sys, const MethodFlags& f,
                               const std::string& method, bool keep_states) {
  PriorSpec prior;
  if (!f.theta_box.empty()) prior.theta_box = parse_box(f.theta_box);
  ChainConfig chain;
  chain.iterations = f.iters;
  chain.burnin = f.burnin;
  chain.seed = f.seed;
  chain.keep_states = keep_states;
  if (method == "mh_explicit") {
    chain.theta_init = start_theta(ds, sys, f);
    return mh_explicit(ds, sys, prior, chain, f.refine);
  }
  if (method == "collocation_posterior") {
    chain.theta_init = start_theta(ds, sys, f);
    return collocation_posterior(ds, sys, basis_for(ds, f, method), prior, f.lambda > 0 ? f.lambda : 10.0,
                                 chain);
  }
  if (method == "rdem_filter") {
    FilterConfig fc;
    fc.particles = f.particles;
    fc.discount = f.discount;
    fc.seed = f.seed;
    return rdem_filter(ds, sys, prior, fc);
  }
  TwoStepBayesOptions opt;
  opt.draws = f.draws;
  opt.seed = f.seed;
  if (method == "two_step_bayes_rk") opt.variant = RungeKuttaMatchVariant{f.rk_refine};
  return two_step_bayes(ds, sys, basis_for(ds, f, method), opt);
}

std::string method_for(const std::string& name, bool bayesian) {
  std::string m;
  try {
    m = canonical_method(name);
  } catch (const LookupError&) {
    throw UsageError("unknown method '" + name + "'");
  }
  if (is_bayesian(m) != bayesian)
    throw UsageError("method '" + m + "' belongs to the '" + (bayesian ? "fit" : "posterior") + "' command");
  return m;
}

std::string format_number(double v) {
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

}  // namespace

std::string canonical_method(const std::string& name) {
  const auto it = aliases().find(name);
  if (it == aliases().end()) throw LookupError("unknown method '" + name + "'");
  return it->second;
}

std::vector<BenchmarkRow> benchmark_table(const std::vector<BenchmarkResult>& results) {
  if (results.empty()) throw InvalidInput("benchmark table: no results");
  std::vector<BenchmarkResult> sorted = results;
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return a.method != b.method ? a.method < b.method : a.seed < b.seed;
  });
  std::vector<BenchmarkRow> rows;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].method == sorted[i].method) ++j;
    const int q = static_cast<int>(sorted[i].truth.size());
    std::vector<std::vector<double>> est(q), err(q);
    std::vector<double> times;
    for (std::size_t r = i; r < j; ++r) {
      const auto& res = sorted[r];
      if (res.truth.size() != q) throw InvalidInput("benchmark table: truth lengths differ within a method");
      BenchmarkRow row{res.method, std::to_string(res.seed), Vector::Constant(q, std::nan("")),
                       Vector::Constant(q, std::nan("")), res.runtime};
      if (res.error.empty() && res.estimate.size() == q) {
        row.estimate = res.estimate;
        row.abs_error = (res.estimate - res.truth).cwiseAbs();
        for (int c = 0; c < q; ++c) {
          est[c].push_back(row.estimate(c));
          err[c].push_back(row.abs_error(c));
        }
        times.push_back(res.runtime);
      }
      rows.push_back(row);
    }
    BenchmarkRow summary{sorted[i].method, "median", Vector::Constant(q, std::nan("")),
                         Vector::Constant(q, std::nan("")), std::nan("")};
    if (!times.empty()) {
      for (int c = 0; c < q; ++c) {
        summary.estimate(c) = stats::median(est[c]);
        summary.abs_error(c) = stats::median(err[c]);
      }
      summary.runtime = stats::median(times);
    }
    rows.push_back(summary);
    i = j;
  }
  return rows;
}

void write_benchmark_table(std::ostream& out, const std::vector<BenchmarkRow>& rows) {
  const int q = rows.empty() ? 0 : static_cast<int>(rows.front().estimate.size());
  out << "method,seed";
  for (int c = 0; c < q; ++c) out << ",theta" << c + 1;
  for (int c = 0; c < q; ++c) out << ",abs_err" << c + 1;
  out << ",runtime\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.seed;
    for (int c = 0; c < q; ++c) out << ',' << format_number(r.estimate(c));
    for (int c = 0; c < q; ++c) out << ',' << format_number(r.abs_error(c));
    out << ',' << format_number(r.runtime) << '\n';
  }
}

std::vector<BenchmarkResult> run_benchmark(const BenchmarkOptions& o, std::ostream* log) {
  if (o.methods.empty() || o.seeds.empty()) throw InvalidInput("benchmark: needs at least one method and one seed");
  std::set<std::string> methods;
  for (const auto& m : o.methods) methods.insert(canonical_method(m));
  std::set<std::uint64_t> seeds(o.seeds.begin(), o.seeds.end());
  const OdeSystem sys = fitzhugh_nagumo();

  std::vector<BenchmarkResult> out;
  for (const auto& method : methods)
    for (const auto seed : seeds) {
      const Dataset ds = fhn_benchmark_dataset(seed, o.sigma, o.n, o.t_end);
      BenchmarkResult r{method, seed, Vector(), FhnBenchmark::theta(), 0, ""};
      const SplineBasis basis = SplineBasis::for_dataset(ds, FhnBenchmark::spline_knots);
      try {
        if (!is_bayesian(method)) {
          EstimateReport rep;
          OptimizerConfig cfg;
          cfg.multistart_count = o.multistart;
          cfg.seed = seed;
          if (method == "nls_explicit") {
            rep = nls_explicit(ds, sys, cfg);
          } else if (method == "two_step") {
            rep = two_step(ds, sys, basis);
          } else if (method == "iterated_pda") {
            rep = iterated_pda(ds, sys, basis, 1.0, two_step(ds, sys, basis).theta_hat);
          } else {
            OptimizerConfig pc = profiling_defaults();
            pc.multistart_count = o.multistart;
            pc.seed = seed;
            rep = generalized_profiling(ds, sys, SplineBasis::for_dataset(ds, FhnBenchmark::profiling_knots),
                                        FhnBenchmark::lambda_grid(), pc);
          }
          r.estimate = rep.theta_hat;
          r.runtime = rep.runtime;
        } else {
          PosteriorSamples s;
          ChainConfig chain;
          chain.iterations = o.mh_iterations;
          chain.burnin = o.mh_burnin;
          chain.seed = seed;
          if (method == "mh_explicit" || method == "collocation_posterior")
            chain.theta_init = two_step(ds, sys, basis).theta_hat;
          if (method == "mh_explicit") {
            s = mh_explicit(ds, sys, {}, chain);
          } else if (method == "collocation_posterior") {
            s = collocation_posterior(ds, sys, basis, {}, 10.0, chain);
          } else if (method == "rdem_filter") {
            FilterConfig fc;
            fc.particles = o.particles;
            fc.seed = seed;
            s = rdem_filter(ds, sys, {}, fc);
          } else {
            TwoStepBayesOptions opt;
            opt.draws = o.draws;
            opt.seed = seed;
            if (method == "two_step_bayes_rk") opt.variant = RungeKuttaMatchVariant{};
            s = two_step_bayes(ds, sys, basis, opt);
          }
          r.estimate = s.theta_median();
          r.runtime = s.runtime;
        }
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      if (log) {
        if (r.error.empty())
          *log << method << " seed " << seed << " theta " << csv::join(r.estimate) << " runtime " << r.runtime
               << '\n';
        else
          *log << "warning: " << method << " seed " << seed << " failed, reported as NaN: " << r.error << '\n';
      }
      out.push_back(std::move(r));
    }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Parameter estimation for ODE models"};
  app.name(args.empty() ? "odeest" : fs::path(args.front()).filename().string());
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  // simulate
  std::string sim_system = "fhn";
  std::vector<std::string> sim_args;
  std::string sim_theta = "0.2,0.2,3", sim_x0 = "-1,1", sim_sigma = "0.5", sim_out;
  double t0 = 0, t_end = 20;
  int n = 401, sim_refine = 10;
  std::uint64_t sim_seed = 1;
  auto* sim = app.add_subcommand("simulate", "Simulate a noisy dataset");
  sim->add_option("--system", sim_system, "Model: fhn, sir (arg N) or lorenz96 (args p, F)");
  sim->add_option("--system-arg", sim_args, "Model argument key=value, repeatable");
  sim->add_option("--theta", sim_theta, "Parameters (comma list)");
  sim->add_option("--x0", sim_x0, "Initial state (comma list)");
  sim->add_option("--sigma", sim_sigma,
                  "Noise standard deviation, not variance (one value or one per coordinate)");
  sim->add_option("--t0", t0, "Start time");
  sim->add_option("--t-end", t_end, "End time");
  sim->add_option("--n", n, "Number of observation times");
  sim->add_option("--refine", sim_refine, "RK4 substeps per observation gap");
  sim->add_option("--seed", sim_seed, "Noise seed");
  sim->add_option("-o,--out", sim_out, "Output file (default in $ODEEST_OUTPUT_DIR or the working directory)");

  // fit
  MethodFlags fit_flags;
  auto* fit = app.add_subcommand("fit", "Frequentist estimate: nls_explicit, two_step, iterated_pda, generalized_profiling");
  fit->add_option("--data", fit_flags.data, "Dataset file")->required();
  fit->add_option("--method", fit_flags.method, "Estimator name or alias (nls, pda, profiling)")->required();
  add_data_flags(fit, fit_flags);
  add_fit_flags(fit, fit_flags);

  // posterior
  MethodFlags post_flags;
  auto* post = app.add_subcommand(
      "posterior", "Posterior draws: mh_explicit, collocation_posterior, two_step_bayes_gm, two_step_bayes_rk, rdem_filter");
  post->add_option("--data", post_flags.data, "Dataset file")->required();
  post->add_option("--method", post_flags.method, "Sampler name or alias (mh, collocation, tsb_gm, tsb_rk, rdem)")
      ->required();
  add_data_flags(post, post_flags);
  add_fit_flags(post, post_flags);
  add_posterior_flags(post, post_flags);

  // bands
  MethodFlags band_flags;
  std::string samples_path;
  auto* bands = app.add_subcommand("bands", "Pointwise 5/50/95% state bands on the dataset grid");
  bands->add_option("--data", band_flags.data, "Dataset file (grid, and input for --method)")->required();
  bands->add_option("--samples", samples_path, "Samples table to integrate from (theta, x0)");
  bands->add_option("--method", band_flags.method, "Run this sampler instead of reading --samples");
  add_data_flags(bands, band_flags);
  add_fit_flags(bands, band_flags);
  add_posterior_flags(bands, band_flags);

  // benchmark
  BenchmarkOptions bo;
  std::string bench_methods = "nls,two_step,profiling,mh,rdem", bench_out;
  int seed_count = 10;
  std::uint64_t first_seed = 1;
  auto* bench = app.add_subcommand("benchmark", "FitzHugh-Nagumo benchmark table over methods and seeds");
  bench->add_option("--methods", bench_methods, "Comma-separated estimator names or aliases");
  bench->add_option("--seeds", seed_count, "Number of seeds");
  bench->add_option("--first-seed", first_seed, "First seed");
  bench->add_option("--sigma", bo.sigma, "Noise standard deviation, not variance");
  bench->add_option("--n", bo.n, "Number of observation times");
  bench->add_option("--t-end", bo.t_end, "End time");
  bench->add_option("--multistart", bo.multistart, "Optimizer starts for nls and profiling");
  bench->add_option("--mh-iters", bo.mh_iterations, "MCMC iterations including burn-in");
  bench->add_option("--mh-burnin", bo.mh_burnin, "MCMC burn-in");
  bench->add_option("--particles", bo.particles, "Particle count for rdem_filter");
  bench->add_option("--draws", bo.draws, "Draws for two_step_bayes");
  bench->add_option("-o,--out", bench_out, "Output file (default in $ODEEST_OUTPUT_DIR or the working directory)");

  std::vector<std::string> argv_store = args.empty() ? std::vector<std::string>{"odeest"} : args;
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << app.get_name() << ": " << e.what() << '\n';
    return 2;
  }

  try {
    if (*sim) {
      const OdeSystem sys = make_system(sim_system, sim_args);
      const Vector theta = parse_list("--theta", sim_theta);
      const Vector x0 = parse_list("--x0", sim_x0);
      Vector sig = parse_list("--sigma", sim_sigma);
      if (sig.size() == 1) sig = Vector::Constant(sys.state_dim(), sig(0));
      if (n < 2) throw UsageError("--n must be >= 2");
      const Dataset ds = generate(sys, theta, x0, TimeGrid::uniform(t0, t_end, n), NoiseSpec{sig}, sim_seed,
                                  sim_refine);
      const std::string path = output_path(sim_out, "dataset.csv");
      auto f = open_output(path);
      write_dataset(f, ds);
      out << "wrote " << path << '\n';
    } else if (*fit) {
      const std::string method = method_for(fit_flags.method, false);
      const Dataset ds = read_input(fit_flags.data);
      const OdeSystem sys = make_system(fit_flags.system, fit_flags.system_args);
      const std::string path = output_path(fit_flags.out, "report_" + method + ".txt");
      check_distinct(fit_flags.data, path);
      const EstimateReport rep = run_fit(ds, sys, fit_flags, method);
      auto f = open_output(path);
      write_report(f, rep);
      out << "wrote " << path << '\n';
    } else if (*post) {
      const std::string method = method_for(post_flags.method, true);
      const Dataset ds = read_input(post_flags.data);
      const OdeSystem sys = make_system(post_flags.system, post_flags.system_args);
      const std::string path = output_path(post_flags.out, "samples_" + method + ".csv");
      check_distinct(post_flags.data, path);
      const PosteriorSamples s = run_posterior(ds, sys, post_flags, method, false);
      auto f = open_output(path);
      write_samples(f, s);
      for (const auto& w : s.warnings) err << "warning: " << w << '\n';
      out << "wrote " << path << '\n';
    } else if (*bands) {
      if (samples_path.empty() == band_flags.method.empty())
        throw UsageError("bands needs exactly one of --samples and --method");
      const Dataset ds = read_input(band_flags.data);
      const OdeSystem sys = make_system(band_flags.system, band_flags.system_args);
      const std::string path = output_path(band_flags.out, "bands.csv");
      check_distinct(band_flags.data, path);
      const auto b = [&] {
        if (samples_path.empty()) {
          const std::string method = method_for(band_flags.method, true);
          return state_bands(run_posterior(ds, sys, band_flags, method, true), ds.grid, &sys, band_flags.refine);
        }
        if (!fs::exists(samples_path)) throw UsageError("no such file: '" + samples_path + "'");
        check_distinct(samples_path, path);
        return state_bands(load_samples(samples_path), ds.grid, &sys, band_flags.refine);
      }();
      auto f = open_output(path);
      write_bands(f, b);
      out << "wrote " << path << '\n';
    } else if (*bench) {
      bo.methods.clear();
      for (const auto& m : csv::split(bench_methods)) {
        try {
          bo.methods.push_back(canonical_method(m));
        } catch (const LookupError&) {
          throw UsageError("unknown method '" + m + "'");
        }
      }
      if (seed_count < 1) throw UsageError("--seeds must be >= 1");
      bo.seeds.clear();
      for (int s = 0; s < seed_count; ++s) bo.seeds.push_back(first_seed + s);
      const std::string path = output_path(bench_out, "benchmark.csv");
      auto f = open_output(path);
      const auto results = run_benchmark(bo, &err);
      write_benchmark_table(f, benchmark_table(results));
      out << "wrote " << path << '\n';
    }
  } catch (const UsageError& e) {
    err << app.get_name() << ": " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    const std::string& cat = e.category();
    err << app.get_name() << ": " << cat << ": " << e.what() << '\n';
    const bool input = cat == "invalid-input" || cat == "parse" || cat == "validation" || cat == "lookup" ||
                       cat == "bounds";
    return input ? 2 : 1;
  } catch (const std::exception& e) {
    err << app.get_name() << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}

int run(int argc, char** argv) {
  return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace odeest::cli
