#include "odeest/simulate.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <vector>

#include "csv.hpp"

namespace odeest {

void Dataset::validate() const {
  if (observations.rows() != 0 && observations.rows() != grid.size())
    throw ValidationError("observation rows do not match the time grid");
  if (truth && observations.cols() > 0) {
    if (truth->x0.size() != observations.cols() || truth->sigma.size() != observations.cols())
      throw ValidationError("truth block dimensions do not match the observations");
  }
}

Dataset generate(const OdeSystem& sys, const Vector& theta, const Vector& x0, const TimeGrid& grid,
                 const NoiseSpec& noise, std::uint64_t seed, int refine) {
  const int p = sys.state_dim();
  if (noise.sigmas.size() != p) throw InvalidInput("noise spec must have one sigma per state");
  if ((noise.sigmas.array() < 0).any()) throw InvalidInput("noise sigmas must be >= 0");
  Trajectory traj = integrate(sys, x0, grid, theta, refine);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix y = traj.states;
  for (int i = 0; i < y.rows(); ++i)
    for (int j = 0; j < p; ++j) y(i, j) += noise.sigmas(j) * normal(rng);
  return Dataset{grid, std::move(y), Truth{theta, x0, noise.sigmas, seed}};
}

Dataset fhn_benchmark_dataset(std::uint64_t seed, double sigma, int n, double t_end) {
  const OdeSystem sys = fitzhugh_nagumo();
  return generate(sys, FhnBenchmark::theta(), FhnBenchmark::x0(), TimeGrid::uniform(0.0, t_end, n),
                  NoiseSpec::uniform(2, sigma), seed);
}

void write_dataset(std::ostream& out, const Dataset& ds) {
  ds.validate();
  out << std::setprecision(17);
  if (ds.truth) {
    out << "# truth_theta=" << csv::join(ds.truth->theta) << '\n';
    out << "# truth_x0=" << csv::join(ds.truth->x0) << '\n';
    out << "# truth_sigma=" << csv::join(ds.truth->sigma) << '\n';
    if (ds.truth->seed) out << "# seed=" << *ds.truth->seed << '\n';
  }
  out << "t";
  for (int j = 0; j < ds.dim(); ++j) out << ",y" << j + 1;
  out << '\n';
  for (int i = 0; i < ds.n(); ++i) {
    out << ds.grid[i];
    for (int j = 0; j < ds.dim(); ++j) out << ',' << ds.observations(i, j);
    out << '\n';
  }
}

Dataset read_dataset(std::istream& in) {
  std::string line;
  int lineno = 0;
  Truth truth;
  bool has_truth = false;
  bool header_seen = false;
  int p = 0;
  std::vector<double> times;
  std::vector<std::vector<double>> rows;

  auto fail = [&](const std::string& why) {
    throw ParseError("line " + std::to_string(lineno) + ": " + why);
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = csv::trim(line.substr(1, eq - 1));
      const std::string value = csv::trim(line.substr(eq + 1));
      try {
        if (key == "truth_theta") {
          truth.theta = csv::parse_vector(value);
          has_truth = true;
        } else if (key == "truth_x0") {
          truth.x0 = csv::parse_vector(value);
        } else if (key == "truth_sigma") {
          truth.sigma = csv::parse_vector(value);
        } else if (key == "seed") {
          truth.seed = std::stoull(value);
        }
      } catch (const std::exception& e) {
        fail("bad metadata '" + key + "': " + e.what());
      }
      continue;
    }
    const auto fields = csv::split(line);
    if (!header_seen) {
      if (fields.size() < 2 || csv::trim(fields[0]) != "t") fail("expected header 't,y1,...,yp'");
      p = static_cast<int>(fields.size()) - 1;
      header_seen = true;
      continue;
    }
    if (static_cast<int>(fields.size()) != p + 1)
      fail("expected " + std::to_string(p + 1) + " fields, found " + std::to_string(fields.size()));
    std::vector<double> row(p);
    double t = 0;
    if (!csv::parse_double(fields[0], t)) fail("malformed number '" + fields[0] + "'");
    for (int j = 0; j < p; ++j)
      if (!csv::parse_double(fields[j + 1], row[j])) fail("malformed number '" + fields[j + 1] + "'");
    times.push_back(t);
    rows.push_back(std::move(row));
  }
  if (!header_seen) throw ParseError("line " + std::to_string(lineno) + ": missing header");
  if (times.size() < 2) throw ValidationError("dataset needs at least 2 observations (n >= 2)");

  Vector t(static_cast<Eigen::Index>(times.size()));
  Matrix y(static_cast<Eigen::Index>(times.size()), p);
  for (std::size_t i = 0; i < times.size(); ++i) {
    t(static_cast<Eigen::Index>(i)) = times[i];
    for (int j = 0; j < p; ++j) y(static_cast<Eigen::Index>(i), j) = rows[i][j];
  }
  Dataset ds{TimeGrid(std::move(t)), std::move(y), std::nullopt};
  if (has_truth) ds.truth = std::move(truth);
  ds.validate();
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open '" + path + "' for writing");
  write_dataset(out, ds);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open '" + path + "'");
  return read_dataset(in);
}

}  // namespace odeest
