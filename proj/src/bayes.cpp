#include "odeest/bayes.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/SparseCholesky>

#include "odeest/freq.hpp"
#include "odeest/optim.hpp"
#include "odeest/stats.hpp"
#include "csv.hpp"

namespace odeest {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// sigma^2 ~ IG(shape, scale), i.e. scale / Gamma(shape, 1).
double draw_inverse_gamma(double shape, double scale, std::mt19937_64& rng) {
  if (scale <= 0.0) return 0.0;
  const double g = std::gamma_distribution<double>(shape, 1.0)(rng);
  return scale / g;
}

Vector standard_normal(int size, std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  Vector v(size);
  for (int i = 0; i < size; ++i) v(i) = z(rng);
  return v;
}

double uniform01(std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

void require_data(const Dataset& ds, const OdeSystem& sys, const char* who) {
  if (ds.empty() || ds.n() < 2) throw InvalidInput(std::string(who) + ": needs at least 2 observations");
  ds.validate();
  if (ds.dim() != sys.state_dim())
    throw InvalidInput(std::string(who) + ": data has " + std::to_string(ds.dim()) +
                       " coordinates, system has " + std::to_string(sys.state_dim()));
}

Vector fixed_variances(const PriorSpec& pr, const char* who) {
  const Vector& s = *pr.fixed_sigma;
  if ((s.array() <= 0.0).any())
    throw InvalidInput(std::string(who) + ": fixed noise sd must be > 0");
  return s.array().square();
}

Vector box_center(const std::vector<Interval>& box) {
  Vector c(static_cast<int>(box.size()));
  for (std::size_t j = 0; j < box.size(); ++j) c(j) = 0.5 * (box[j].lower + box[j].upper);
  return c;
}

// Scale adaptation over windows of 50 proposals during burn-in.
struct Adapter {
  double factor = 1.0;
  int proposed = 0;
  int accepted = 0;

  void record(bool ok) {
    ++proposed;
    accepted += ok;
    if (proposed == 50) {
      const double rate = accepted / 50.0;
      if (rate < 0.2) factor *= rate < 0.05 ? 0.5 : 0.8;
      else if (rate > 0.4) factor *= rate > 0.7 ? 2.0 : 1.25;
      proposed = accepted = 0;
    }
  }
};

void check_low_acceptance(PosteriorSamples& s, double rate, const char* block) {
  if (rate < 0.01) {
    std::ostringstream msg;
    msg << "mixing: " << block << " acceptance rate " << rate << " is below 1%";
    s.warnings.push_back(msg.str());
  }
}

}  // namespace

PriorSpec PriorSpec::resolved(const OdeSystem& sys, const Dataset& ds) const {
  const int q = sys.param_dim();
  const int p = sys.state_dim();
  PriorSpec r = *this;
  if (r.theta_box.empty()) r.theta_box = sys.bounds();
  if (static_cast<int>(r.theta_box.size()) != q)
    throw InvalidInput("prior: theta box needs " + std::to_string(q) + " intervals");
  for (int j = 0; j < q; ++j) {
    const Interval& b = r.theta_box[j];
    if (!b.finite() || !(b.lower < b.upper))
      throw InvalidInput("prior: theta" + std::to_string(j + 1) +
                         " needs a finite box with lower < upper");
  }
  if (r.sigma2.empty()) r.sigma2.assign(p, InverseGamma{});
  if (static_cast<int>(r.sigma2.size()) != p)
    throw InvalidInput("prior: sigma^2 needs " + std::to_string(p) + " entries");
  for (const auto& g : r.sigma2)
    if (!(g.shape > 0) || !(g.scale > 0) || !std::isfinite(g.shape) || !std::isfinite(g.scale))
      throw InvalidInput("prior: inverse-gamma shape and scale must be finite and > 0");
  if (r.x0.empty()) {
    r.x0.assign(p, Gaussian{});
    if (!ds.empty())
      for (int c = 0; c < p && c < ds.dim(); ++c) r.x0[c].mean = ds.observations(0, c);
  }
  if (static_cast<int>(r.x0.size()) != p)
    throw InvalidInput("prior: x0 needs " + std::to_string(p) + " entries");
  for (const auto& g : r.x0)
    if (!std::isfinite(g.mean) || !(g.sd > 0) || !std::isfinite(g.sd))
      throw InvalidInput("prior: x0 mean must be finite and sd finite and > 0");
  if (r.fixed_sigma) {
    if (r.fixed_sigma->size() != p)
      throw InvalidInput("prior: fixed sigma needs " + std::to_string(p) + " entries");
    if (!r.fixed_sigma->allFinite() || (r.fixed_sigma->array() < 0.0).any())
      throw InvalidInput("prior: fixed sigma must be finite and >= 0");
  }
  if (!ds.empty() && ds.dim() != p)
    throw InvalidInput("prior: data has " + std::to_string(ds.dim()) + " coordinates, system has " +
                       std::to_string(p));
  return r;
}

bool PriorSpec::admits_theta(const Vector& theta) const {
  if (theta.size() != static_cast<int>(theta_box.size())) return false;
  for (int j = 0; j < theta.size(); ++j)
    if (!(theta(j) > theta_box[j].lower && theta(j) < theta_box[j].upper)) return false;
  return true;
}

double PriorSpec::log_density_x0(const Vector& x0v) const {
  double total = 0.0;
  for (int c = 0; c < x0v.size(); ++c) {
    const double z = (x0v(c) - x0[c].mean) / x0[c].sd;
    total += -0.5 * z * z - std::log(x0[c].sd);
  }
  return total;
}

void ChainConfig::validate() const {
  if (iterations < 1) throw InvalidInput("chain: iterations must be >= 1");
  if (burnin < 0 || burnin >= iterations)
    throw InvalidInput("chain: burn-in must be in [0, iterations)");
  if (thin < 1) throw InvalidInput("chain: thin must be >= 1");
  if (!proposal_scales.allFinite() || (proposal_scales.array() <= 0.0).any())
    throw InvalidInput("chain: proposal scales must be finite and > 0");
}

void FilterConfig::validate() const {
  if (particles < 100) throw InvalidInput("filter: needs at least 100 particles");
  if (!(discount > 0.5 && discount < 1.0)) throw InvalidInput("filter: discount must be in (0.5, 1)");
  if (!(jitter >= 0) || !std::isfinite(jitter)) throw InvalidInput("filter: jitter must be >= 0");
  if (!(v_fraction > 0) || !std::isfinite(v_fraction))
    throw InvalidInput("filter: v_fraction must be > 0");
  if (!(v_log_sd >= 0) || !std::isfinite(v_log_sd)) throw InvalidInput("filter: v_log_sd must be >= 0");
  if (fixed_sigma && (!fixed_sigma->allFinite() || (fixed_sigma->array() < 0.0).any()))
    throw InvalidInput("filter: fixed sigma must be finite and >= 0");
  if (fixed_v && (!fixed_v->allFinite() || (fixed_v->array() < 0.0).any()))
    throw InvalidInput("filter: fixed V must be finite and >= 0");
}

Vector PosteriorSamples::theta_median() const {
  if (theta.rows() == 0) throw InsufficientSamples("posterior: no draws");
  Vector m(theta.cols());
  for (Eigen::Index j = 0; j < theta.cols(); ++j) {
    const Vector col = theta.col(j);
    m(j) = stats::median(std::vector<double>(col.data(), col.data() + col.size()));
  }
  return m;
}

void write_samples(std::ostream& out, const PosteriorSamples& s) {
  out << "draw";
  for (Eigen::Index j = 0; j < s.theta.cols(); ++j) out << ",theta" << j + 1;
  for (Eigen::Index j = 0; j < s.sigma.cols(); ++j) out << ",sigma" << j + 1;
  for (Eigen::Index j = 0; j < s.x0.cols(); ++j) out << ",x0_" << j + 1;
  out << '\n';
  const auto old = out.precision(17);
  for (int d = 0; d < s.size(); ++d) {
    out << d + 1;
    for (Eigen::Index j = 0; j < s.theta.cols(); ++j) out << ',' << s.theta(d, j);
    if (s.sigma.rows() > d)
      for (Eigen::Index j = 0; j < s.sigma.cols(); ++j) out << ',' << s.sigma(d, j);
    if (s.x0.rows() > d)
      for (Eigen::Index j = 0; j < s.x0.cols(); ++j) out << ',' << s.x0(d, j);
    out << '\n';
  }
  out.precision(old);
}

void save_samples(const std::string& path, const PosteriorSamples& s) {
  std::ofstream f(path);
  if (!f) throw InvalidInput("cannot write '" + path + "'");
  write_samples(f, s);
}

PosteriorSamples read_samples(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("samples: empty input");
  const auto header = csv::split(line);
  if (header.empty() || header[0] != "draw") throw ParseError("samples: header must start with 'draw'");
  int q = 0, p = 0, p0 = 0;
  for (std::size_t j = 1; j < header.size(); ++j) {
    const std::string& h = header[j];
    const int block = h.rfind("theta", 0) == 0 ? 0 : h.rfind("sigma", 0) == 0 ? 1 : h.rfind("x0_", 0) == 0 ? 2 : -1;
    if (block < 0) throw ParseError("samples: unknown column '" + h + "'");
    const int seen = block == 0 ? q : block == 1 ? p : p0;
    if ((block == 0 && (p || p0)) || (block == 1 && p0))
      throw ParseError("samples: columns must be ordered theta, sigma, x0");
    const std::string expect = (block == 0 ? "theta" : block == 1 ? "sigma" : "x0_") + std::to_string(seen + 1);
    if (h != expect) throw ParseError("samples: expected column '" + expect + "', got '" + h + "'");
    (block == 0 ? q : block == 1 ? p : p0)++;
  }
  std::vector<Vector> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    Vector v;
    try {
      v = csv::parse_vector(line);
    } catch (const std::invalid_argument& e) {
      throw ParseError("samples line " + std::to_string(lineno) + ": " + e.what());
    }
    if (v.size() != static_cast<Eigen::Index>(header.size()))
      throw ParseError("samples line " + std::to_string(lineno) + ": expected " +
                       std::to_string(header.size()) + " fields");
    rows.push_back(v);
  }
  PosteriorSamples s;
  const int D = static_cast<int>(rows.size());
  s.theta.resize(D, q);
  s.sigma.resize(D, p);
  s.x0.resize(D, p0);
  for (int d = 0; d < D; ++d) {
    s.theta.row(d) = rows[d].segment(1, q).transpose();
    s.sigma.row(d) = rows[d].segment(1 + q, p).transpose();
    s.x0.row(d) = rows[d].segment(1 + q + p, p0).transpose();
  }
  return s;
}

PosteriorSamples load_samples(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InvalidInput("cannot open '" + path + "'");
  return read_samples(f);
}

// ---------------------------------------------------------------------------
// Explicit-ODE posterior

PosteriorSamples mh_explicit(const Dataset& ds, const OdeSystem& sys, const PriorSpec& prior,
                             const ChainConfig& chain, int refine) {
  const auto t_start = Clock::now();
  chain.validate();
  if (refine < 1) throw InvalidInput("mh_explicit: refine must be >= 1");
  const bool has_data = !ds.empty();
  if (has_data) {
    ds.validate();
    if (ds.dim() != sys.state_dim()) throw InvalidInput("mh_explicit: data and system dimensions differ");
  }
  const PriorSpec pr = prior.resolved(sys, ds);
  const int q = sys.param_dim();
  const int p = sys.state_dim();
  const int n = ds.n();

  Vector scales(q + p);
  if (chain.proposal_scales.size() > 0) {
    if (chain.proposal_scales.size() != q + p)
      throw InvalidInput("mh_explicit: proposal scales need q + p entries");
    scales = chain.proposal_scales;
  } else {
    for (int j = 0; j < q; ++j) scales(j) = 0.02 * (pr.theta_box[j].upper - pr.theta_box[j].lower);
    for (int c = 0; c < p; ++c) scales(q + c) = 0.05 * pr.x0[c].sd;
  }

  Vector theta = chain.theta_init ? *chain.theta_init : box_center(pr.theta_box);
  if (!pr.admits_theta(theta)) throw InvalidInput("mh_explicit: initial theta is outside the prior box");
  Vector x0 = Vector(p);
  if (chain.x0_init) {
    if (chain.x0_init->size() != p) throw InvalidInput("mh_explicit: initial x0 has the wrong length");
    x0 = *chain.x0_init;
  } else {
    for (int c = 0; c < p; ++c) x0(c) = pr.x0[c].mean;
  }

  std::mt19937_64 rng(chain.seed);
  Matrix states;
  auto sum_squares = [&](const Vector& th, const Vector& start, Vector& ss, Matrix& traj) {
    ss.setZero(p);
    if (!has_data) return true;
    try {
      traj = integrate(sys, start, ds.grid, th, refine).states;
    } catch (const NumericalBlowup&) {
      return false;
    }
    ss = (ds.observations - traj).colwise().squaredNorm().transpose();
    return ss.allFinite();
  };
  auto loglik = [&](const Vector& ss, const Vector& s2) {
    return -0.5 * (ss.array() / s2.array()).sum();
  };

  Vector ss;
  if (!sum_squares(theta, x0, ss, states))
    throw EstimationFailure("mh_explicit: the initial state blows up");

  Vector s2(p);
  const bool fixed = pr.fixed_sigma.has_value();
  auto update_sigma = [&] {
    for (int c = 0; c < p; ++c)
      s2(c) = draw_inverse_gamma(pr.sigma2[c].shape + 0.5 * n, pr.sigma2[c].scale + 0.5 * ss(c), rng);
  };
  if (fixed) s2 = fixed_variances(pr, "mh_explicit");
  else update_sigma();

  PosteriorSamples out;
  out.method = "mh_explicit";
  out.seed = chain.seed;
  const int kept = (chain.iterations - chain.burnin + chain.thin - 1) / chain.thin;
  out.theta.resize(kept, q);
  out.sigma.resize(kept, p);
  out.x0.resize(kept, p);
  if (chain.keep_states && has_data) {
    out.state_grid = ds.grid;
    out.states.reserve(kept);
  }

  Adapter adapt_theta, adapt_x0;
  long acc_theta = 0, acc_x0 = 0;
  Vector ss_prop;
  Matrix states_prop;
  int row = 0;
  for (int it = 0; it < chain.iterations; ++it) {
    const bool burning = it < chain.burnin;

    // theta | x0, sigma
    {
      const Vector prop =
          theta + adapt_theta.factor * scales.head(q).cwiseProduct(standard_normal(q, rng));
      bool ok = false;
      if (pr.admits_theta(prop)) {
        if (sum_squares(prop, x0, ss_prop, states_prop)) {
          const double log_alpha = loglik(ss_prop, s2) - loglik(ss, s2);
          if (std::log(uniform01(rng)) < log_alpha) {
            theta = prop;
            ss = ss_prop;
            std::swap(states, states_prop);
            ok = true;
          }
        } else {
          ++out.failed;
        }
      }
      if (burning && chain.adapt) adapt_theta.record(ok);
      if (!burning) acc_theta += ok;
    }

    // x0 | theta, sigma
    {
      const Vector prop =
          x0 + adapt_x0.factor * scales.tail(p).cwiseProduct(standard_normal(p, rng));
      bool ok = false;
      if (sum_squares(theta, prop, ss_prop, states_prop)) {
        const double log_alpha = loglik(ss_prop, s2) - loglik(ss, s2) + pr.log_density_x0(prop) -
                                 pr.log_density_x0(x0);
        if (std::log(uniform01(rng)) < log_alpha) {
          x0 = prop;
          ss = ss_prop;
          std::swap(states, states_prop);
          ok = true;
        }
      } else {
        ++out.failed;
      }
      if (burning && chain.adapt) adapt_x0.record(ok);
      if (!burning) acc_x0 += ok;
    }

    if (!fixed) update_sigma();

    if (!burning && (it - chain.burnin) % chain.thin == 0) {
      out.theta.row(row) = theta.transpose();
      out.sigma.row(row) = s2.cwiseSqrt().transpose();
      out.x0.row(row) = x0.transpose();
      if (chain.keep_states && has_data) out.states.push_back(states);
      ++row;
    }
  }

  const double post = chain.iterations - chain.burnin;
  out.block_acceptance = {acc_theta / post, acc_x0 / post};
  out.acceptance_rate = 0.5 * (out.block_acceptance[0] + out.block_acceptance[1]);
  check_low_acceptance(out, out.block_acceptance[0], "theta");
  check_low_acceptance(out, out.block_acceptance[1], "x0");
  if (out.failed > 0)
    out.warnings.push_back(std::to_string(out.failed) + " proposals rejected after numerical blowup");
  out.runtime = seconds_since(t_start);
  return out;
}

// ---------------------------------------------------------------------------
// Collocation posterior

PosteriorSamples collocation_posterior(const Dataset& ds, const OdeSystem& sys,
                                       const SplineBasis& basis, const PriorSpec& prior,
                                       double lambda, const ChainConfig& chain) {
  const auto t_start = Clock::now();
  require_data(ds, sys, "collocation_posterior");
  chain.validate();
  if (!(lambda > 0) || !std::isfinite(lambda))
    throw InvalidInput("collocation_posterior: lambda must be finite and > 0");
  const PriorSpec pr = prior.resolved(sys, ds);
  const int q = sys.param_dim();
  const int p = sys.state_dim();
  const int n = ds.n();
  const int k = basis.size();

  const PenalizedSmoother smoother(ds, basis, Quadrature::for_dataset(ds));
  const Matrix B = basis.design(ds.grid.points());

  Vector scales(q);
  if (chain.proposal_scales.size() > 0) {
    if (chain.proposal_scales.size() != q)
      throw InvalidInput("collocation_posterior: proposal scales need q entries");
    scales = chain.proposal_scales;
  } else {
    for (int j = 0; j < q; ++j) scales(j) = 0.02 * (pr.theta_box[j].upper - pr.theta_box[j].lower);
  }
  Vector theta = chain.theta_init ? *chain.theta_init : box_center(pr.theta_box);
  if (!pr.admits_theta(theta))
    throw InvalidInput("collocation_posterior: initial theta is outside the prior box");

  std::mt19937_64 rng(chain.seed);
  Matrix beta = smoother.ls_fit().beta;
  auto sum_squares = [&](const Matrix& b) -> Vector {
    return (ds.observations - B * b).colwise().squaredNorm().transpose();
  };
  Vector ss = sum_squares(beta);
  double pen = smoother.penalty(beta, sys, theta);

  Vector s2(p);
  const bool fixed = pr.fixed_sigma.has_value();
  auto update_sigma = [&] {
    for (int c = 0; c < p; ++c)
      s2(c) = draw_inverse_gamma(pr.sigma2[c].shape + 0.5 * n, pr.sigma2[c].scale + 0.5 * ss(c), rng);
  };
  if (fixed) s2 = fixed_variances(pr, "collocation_posterior");
  else update_sigma();

  // Independence proposal N(mode, s2_bar H^-1) from the penalized fit with lambda' = 2 lambda
  // s2_bar, which matches the target exactly when all sigma_c agree. lambda' follows sigma
  // during burn-in and is frozen afterwards.
  struct Proposal {
    Vector theta;
    double lam = -1;
    Matrix mode;
    Eigen::SparseMatrix<double> H;
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt;
  } prop;
  std::optional<Matrix> warm;
  auto refresh = [&](double lam) {
    if (prop.lam == lam && prop.theta.size() == theta.size() && prop.theta == theta) return;
    Matrix mode;
    try {
      mode = smoother.fit(sys, theta, lam, warm).fit.beta;
    } catch (const ConvergenceError& e) {
      mode = Eigen::Map<const Matrix>(e.last_iterate().data(), k, p);
    }
    warm = mode;
    prop.theta = theta;
    prop.lam = lam;
    prop.mode = std::move(mode);
    prop.H = smoother.normal_matrix(prop.mode, sys, theta, lam);
    prop.llt.compute(prop.H);
    if (prop.llt.info() != Eigen::Success)
      throw ConditioningError("collocation_posterior: Gauss-Newton matrix is not positive definite");
  };
  auto log_q = [&](const Matrix& b, double s2_bar) {
    const Matrix diff = b - prop.mode;
    const Eigen::Map<const Vector> v(diff.data(), diff.size());
    return -0.5 * v.dot(prop.H * v) / s2_bar;
  };
  auto log_target = [&](const Vector& ssv, double penv) {
    return -lambda * penv - 0.5 * (ssv.array() / s2.array()).sum();
  };

  PosteriorSamples out;
  out.method = "collocation_posterior";
  out.seed = chain.seed;
  out.basis = basis;
  const int kept = (chain.iterations - chain.burnin + chain.thin - 1) / chain.thin;
  out.theta.resize(kept, q);
  out.sigma.resize(kept, p);
  out.x0.resize(kept, p);
  out.coefficients.reserve(kept);
  const Vector b1 = eval_basis(basis, ds.grid.front());

  Adapter adapt_theta;
  long acc_beta = 0, acc_theta = 0;
  double lam_frozen = 2.0 * lambda * s2.mean();
  int row = 0;
  for (int it = 0; it < chain.iterations; ++it) {
    const bool burning = it < chain.burnin;
    if (burning || it == chain.burnin) lam_frozen = 2.0 * lambda * s2.mean();

    // beta | theta, sigma
    {
      const double s2_bar = s2.mean();
      refresh(lam_frozen);
      const Vector z = standard_normal(k * p, rng);
      const Vector u = prop.llt.permutationPinv() * Vector(prop.llt.matrixU().solve(z));
      const Matrix cand = prop.mode + std::sqrt(s2_bar) * Eigen::Map<const Matrix>(u.data(), k, p);
      const Vector ss_c = sum_squares(cand);
      const double pen_c = smoother.penalty(cand, sys, theta);
      bool ok = false;
      if (ss_c.allFinite() && std::isfinite(pen_c)) {
        const double log_alpha = log_target(ss_c, pen_c) - log_target(ss, pen) + log_q(beta, s2_bar) -
                                 log_q(cand, s2_bar);
        if (std::log(uniform01(rng)) < log_alpha) {
          beta = cand;
          ss = ss_c;
          pen = pen_c;
          ok = true;
        }
      }
      if (!burning) acc_beta += ok;
    }

    // theta | beta (enters through the penalty only)
    if (chain.sample_theta) {
      const Vector cand =
          theta + adapt_theta.factor * scales.cwiseProduct(standard_normal(q, rng));
      bool ok = false;
      if (pr.admits_theta(cand)) {
        const double pen_c = smoother.penalty(beta, sys, cand);
        if (std::isfinite(pen_c) && std::log(uniform01(rng)) < -lambda * (pen_c - pen)) {
          theta = cand;
          pen = pen_c;
          ok = true;
        }
      }
      if (burning && chain.adapt) adapt_theta.record(ok);
      if (!burning) acc_theta += ok;
    }

    if (!fixed) update_sigma();

    if (!burning && (it - chain.burnin) % chain.thin == 0) {
      out.theta.row(row) = theta.transpose();
      out.sigma.row(row) = s2.cwiseSqrt().transpose();
      out.x0.row(row) = (beta.transpose() * b1).transpose();
      out.coefficients.push_back(beta);
      ++row;
    }
  }

  const double post = chain.iterations - chain.burnin;
  out.block_acceptance = {acc_beta / post};
  if (chain.sample_theta) out.block_acceptance.push_back(acc_theta / post);
  out.acceptance_rate = std::accumulate(out.block_acceptance.begin(), out.block_acceptance.end(), 0.0) /
                        static_cast<double>(out.block_acceptance.size());
  check_low_acceptance(out, out.block_acceptance[0], "beta");
  if (chain.sample_theta) check_low_acceptance(out, out.block_acceptance[1], "theta");
  out.runtime = seconds_since(t_start);
  return out;
}

// ---------------------------------------------------------------------------
// Two-step Bayes

PosteriorSamples two_step_bayes(const Dataset& ds, const OdeSystem& sys, const SplineBasis& basis,
                                const TwoStepBayesOptions& options) {
  const auto t_start = Clock::now();
  require_data(ds, sys, "two_step_bayes");
  if (options.draws < 1) throw InvalidInput("two_step_bayes: draws must be >= 1");
  const int n = ds.n();
  const int p = ds.dim();
  const int q = sys.param_dim();
  const int k = basis.size();
  const SplineFit center = fit_ls(ds, basis);  // ConditioningError on a degenerate design
  if (n == k)
    throw ConditioningError("two_step_bayes: the noise variance needs more observations than basis functions");
  const Matrix B = basis.design(ds.grid.points());
  const Eigen::LLT<Matrix> llt(B.transpose() * B);
  if (llt.info() != Eigen::Success) throw ConditioningError("two_step_bayes: B'B is singular");
  const Vector rss = (ds.observations - B * center.beta).colwise().squaredNorm().transpose();

  const Quadrature quad = Quadrature::for_dataset(ds);
  const auto* gm = std::get_if<GradientMatchVariant>(&options.variant);
  const auto* rk = std::get_if<RungeKuttaMatchVariant>(&options.variant);
  Vector weights = quad.weights;
  if (gm && gm->weight) {
    for (Eigen::Index j = 0; j < weights.size(); ++j) {
      const double w = gm->weight(quad.nodes(j));
      if (!std::isfinite(w) || w < 0.0) throw InvalidInput("two_step_bayes: weight must be finite and >= 0");
      weights(j) *= w;
    }
    if (!(weights.array() > 0.0).any()) throw InvalidInput("two_step_bayes: weight function is zero");
  }
  if (rk && rk->refine < 1) throw InvalidInput("two_step_bayes: refine must be >= 1");

  // Start every draw from the gradient-matching estimate on the posterior mean curve.
  const Vector theta_center =
      match_gradients(center, sys, quad.nodes, gm ? weights : quad.weights, sys.nominal_theta()).theta;

  std::mt19937_64 rng(options.seed);
  PosteriorSamples out;
  out.method = gm ? "two_step_bayes_gm" : "two_step_bayes_rk";
  out.seed = options.seed;
  Matrix thetas(options.draws, q), sigmas(options.draws, p), x0s(options.draws, p);
  const TimeGrid quad_grid(quad.nodes);
  const Vector sqrt_w = quad.weights.cwiseSqrt();
  int row = 0;
  for (int d = 0; d < options.draws; ++d) {
    SplineFit draw{basis, Matrix(k, p)};
    Vector sd(p);
    for (int c = 0; c < p; ++c) {
      const double s2 = draw_inverse_gamma(0.5 * (n - k), 0.5 * rss(c), rng);
      sd(c) = std::sqrt(s2);
      draw.beta.col(c) = center.beta.col(c) + sd(c) * Vector(llt.matrixU().solve(standard_normal(k, rng)));
    }

    Vector theta;
    Vector x0 = draw.value(ds.grid.front());
    bool ok = false;
    try {
      if (gm) {
        const GradientMatch m = match_gradients(draw, sys, quad.nodes, weights, theta_center);
        theta = m.theta;
        ok = m.converged && theta.allFinite() && std::isfinite(m.objective);
      } else {
        // min over (theta, x0) of the integral of ||x(t) - x_RK(t; theta, x0)||^2.
        const Matrix target = draw.values(quad.nodes);
        optim::Residuals res = [&](const Vector& v, Vector& r) {
          const Vector th = v.head(q);
          if (!sys.in_bounds(th)) return false;
          Matrix states;
          try {
            states = integrate(sys, v.tail(p), quad_grid, th, rk->refine).states;
          } catch (const NumericalBlowup&) {
            return false;
          }
          const Matrix diff = sqrt_w.asDiagonal() * (target - states);
          r = Eigen::Map<const Vector>(diff.data(), diff.size());
          return r.allFinite();
        };
        Vector start(q + p);
        start << theta_center, x0;
        optim::LeastSquaresOptions lso;
        lso.max_iterations = 100;
        lso.gradient_tolerance = 1e-10;
        const optim::Result r = optim::levenberg_marquardt(res, start, lso);
        theta = r.x.head(q);
        x0 = r.x.tail(p);
        ok = r.converged && r.x.allFinite() && std::isfinite(r.value);
      }
    } catch (const Error&) {
      ok = false;
    }
    if (!ok || !sys.in_bounds(theta)) {
      ++out.failed;
      continue;
    }
    thetas.row(row) = theta.transpose();
    sigmas.row(row) = sd.transpose();
    x0s.row(row) = x0.transpose();
    ++row;
  }
  out.theta = thetas.topRows(row);
  out.sigma = sigmas.topRows(row);
  out.x0 = x0s.topRows(row);
  if (out.failed > 0)
    out.warnings.push_back(std::to_string(out.failed) + " draws excluded after a failed second step");
  out.runtime = seconds_since(t_start);
  return out;
}

// ---------------------------------------------------------------------------
// Relaxed model particle filter

namespace {

// Unconstrained coordinates for the filtered parameters.
struct Transform {
  enum Kind { Logit, Log } kind;
  double lower = 0, upper = 1;

  double forward(double v) const {
    if (kind == Log) return std::log(v);
    const double u = (v - lower) / (upper - lower);
    return std::log(u / (1.0 - u));
  }
  double inverse(double phi) const {
    if (kind == Log) return std::exp(phi);
    return lower + (upper - lower) / (1.0 + std::exp(-phi));
  }
};

std::vector<int> systematic_resample(const Vector& w, std::mt19937_64& rng) {
  const int N = static_cast<int>(w.size());
  std::vector<int> idx(N);
  const double u0 = uniform01(rng) / N;
  double cum = w(0);
  int j = 0;
  for (int i = 0; i < N; ++i) {
    const double u = u0 + static_cast<double>(i) / N;
    while (u > cum && j < N - 1) cum += w(++j);
    idx[i] = j;
  }
  return idx;
}

template <class M>
M reorder_rows(const M& m, const std::vector<int>& idx) {
  M out(m.rows(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

}  // namespace

PosteriorSamples rdem_filter(const Dataset& ds, const OdeSystem& sys, const PriorSpec& prior,
                             const FilterConfig& config) {
  const auto t_start = Clock::now();
  if (ds.empty()) throw InvalidInput("rdem_filter: needs at least 1 observation");
  ds.validate();
  if (ds.dim() != sys.state_dim()) throw InvalidInput("rdem_filter: data and system dimensions differ");
  config.validate();
  const int q = sys.param_dim();
  const int p = sys.state_dim();
  const int n = ds.n();
  const int N = config.particles;

  PriorSpec base = prior;
  if (config.fixed_theta && base.theta_box.empty()) {
    // A fully fixed theta needs no box.
    base.theta_box.clear();
    for (int j = 0; j < q; ++j) base.theta_box.push_back({(*config.fixed_theta)(j) - 1.0, (*config.fixed_theta)(j) + 1.0});
  }
  const PriorSpec pr = base.resolved(sys, ds);
  if (config.fixed_theta) {
    if (config.fixed_theta->size() != q) throw InvalidInput("rdem_filter: fixed theta has the wrong length");
    sys.check_theta(*config.fixed_theta);
  }
  if (config.fixed_sigma && config.fixed_sigma->size() != p)
    throw InvalidInput("rdem_filter: fixed sigma has the wrong length");
  if (config.fixed_v && config.fixed_v->size() != p)
    throw InvalidInput("rdem_filter: fixed V has the wrong length");
  std::optional<Vector> fixed_sigma = config.fixed_sigma ? config.fixed_sigma : pr.fixed_sigma;

  // Layout of the transformed parameter vector: free theta, then log sigma^2, then log V.
  std::vector<Transform> tf;
  const bool free_theta = !config.fixed_theta.has_value();
  const bool free_sigma = !fixed_sigma.has_value();
  const bool free_v = !config.fixed_v.has_value();
  if (free_theta)
    for (int j = 0; j < q; ++j) tf.push_back({Transform::Logit, pr.theta_box[j].lower, pr.theta_box[j].upper});
  if (free_sigma)
    for (int c = 0; c < p; ++c) tf.push_back({Transform::Log});
  if (free_v)
    for (int c = 0; c < p; ++c) tf.push_back({Transform::Log});
  const int d = static_cast<int>(tf.size());
  const int off_sigma = free_theta ? q : 0;
  const int off_v = off_sigma + (free_sigma ? p : 0);

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> z01(0.0, 1.0);

  // Initial particles.
  Matrix phi(N, d);
  Matrix X(N, p);
  Vector v0(p);
  for (int c = 0; c < p; ++c) {
    const Vector col = ds.observations.col(c);
    const double var = n > 1 ? stats::variance(std::vector<double>(col.data(), col.data() + n)) : 0.0;
    v0(c) = config.v_fraction * (var > 0 ? var : 1.0);
  }
  for (int i = 0; i < N; ++i) {
    if (free_theta)
      for (int j = 0; j < q; ++j) phi(i, j) = tf[j].forward(stats::draw_in(pr.theta_box[j], rng));
    if (free_sigma)
      for (int c = 0; c < p; ++c)
        phi(i, off_sigma + c) = std::log(draw_inverse_gamma(pr.sigma2[c].shape, pr.sigma2[c].scale, rng));
    if (free_v)
      for (int c = 0; c < p; ++c) phi(i, off_v + c) = std::log(v0(c)) + config.v_log_sd * z01(rng);
    for (int c = 0; c < p; ++c) X(i, c) = pr.x0[c].mean + pr.x0[c].sd * z01(rng);
  }

  auto theta_of = [&](int i) -> Vector {
    if (!free_theta) return *config.fixed_theta;
    Vector th(q);
    for (int j = 0; j < q; ++j) th(j) = tf[j].inverse(phi(i, j));
    return th;
  };
  auto sigma2_of = [&](int i) -> Vector {
    if (!free_sigma) return fixed_sigma->array().square();
    return phi.row(i).segment(off_sigma, p).array().exp().transpose();
  };
  auto v_of = [&](int i) -> Vector {
    if (!free_v) return *config.fixed_v;
    return phi.row(i).segment(off_v, p).array().exp().transpose();
  };

  const double a = config.discount;
  const double h = std::sqrt(1.0 - a * a);
  constexpr double kLog2Pi = 1.8378770664093453;

  std::vector<Matrix> history(n);           // particle states at each time
  std::vector<std::vector<int>> ancestor(n);  // index into history[i - 1]
  Vector logw = Vector::Zero(N);
  Vector W = Vector::Constant(N, 1.0 / N);
  Vector loglik(N);
  PosteriorSamples out;
  out.method = "rdem_filter";
  out.seed = config.seed;
  out.filter_means.resize(n, p);
  out.ess_history.reserve(n);
  double log_evidence = 0.0;
  Rk4Stepper stepper(sys);
  Vector x(p);

  for (int t = 0; t < n; ++t) {
    ancestor[t].resize(N);
    std::iota(ancestor[t].begin(), ancestor[t].end(), 0);
    double log_lookahead = 0.0;  // evidence factor from the look-ahead stage
    Vector correction = Vector::Zero(N);
    bool preselected = false;
    if (t > 0) {
      // Liu-West kernel locations m_j = a phi_j + (1 - a) mean, jitter from the weighted covariance.
      Matrix M = phi;
      Matrix L;
      if (d > 0) {
        const Eigen::RowVectorXd mean = W.transpose() * phi;
        const Matrix centered = phi.rowwise() - mean;
        Matrix cov = centered.transpose() * W.asDiagonal() * centered;
        cov.diagonal().array() += config.jitter;
        Eigen::LLT<Matrix> chol(cov);
        L = chol.info() == Eigen::Success ? Matrix(chol.matrixL())
                                          : Matrix(cov.diagonal().cwiseMax(0.0).cwiseSqrt().asDiagonal());
        M = (a * phi).rowwise() + (1.0 - a) * mean;
      }
      const double t0 = ds.grid[t - 1];
      const double dt = ds.grid[t] - t0;

      if (config.lookahead) {
        // Predictive density of y_t at the kernel locations, used to preselect particles.
        phi.swap(M);
        Vector lp(N);
        for (int i = 0; i < N; ++i) {
          lp(i) = -kInf;
          if (!(W(i) > 0) || !std::isfinite(X(i, 0))) continue;
          x = X.row(i).transpose();
          try {
            stepper.step(x, t0, dt, theta_of(i));
          } catch (const NumericalBlowup&) {
            continue;
          }
          if (!x.allFinite()) continue;
          const Vector s2 = sigma2_of(i) + v_of(i);
          double l = 0.0;
          for (int c = 0; c < p; ++c) {
            if (s2(c) <= 0.0) continue;
            const double r = ds.observations(t, c) - x(c);
            l += -0.5 * (kLog2Pi + std::log(s2(c)) + r * r / s2(c));
          }
          lp(i) = l;
        }
        phi.swap(M);
        const Vector first = logw + lp;
        const double fm = first.maxCoeff();
        if (std::isfinite(fm)) {
          Vector Wf = (first.array() - fm).exp();
          Wf /= Wf.sum();
          if (1.0 / Wf.squaredNorm() < 0.5 * N) {
            const double lm = (W.array() > 0).select(lp.array(), -kInf).maxCoeff();
            log_lookahead = lm + std::log((W.array() * (lp.array() - lm).exp()).sum());
            const std::vector<int> idx = systematic_resample(Wf, rng);
            X = reorder_rows(X, idx);
            M = reorder_rows(M, idx);
            for (int i = 0; i < N; ++i) {
              ancestor[t][i] = idx[i];
              correction(i) = lp(idx[i]);
            }
            logw.setConstant(-std::log(static_cast<double>(N)));
            W.setConstant(1.0 / N);
            preselected = true;
          }
        }
      }

      phi = M;
      if (d > 0)
        for (int i = 0; i < N; ++i) {
          Vector zz(d);
          for (int j = 0; j < d; ++j) zz(j) = z01(rng);
          phi.row(i) += h * (L * zz).transpose();
        }
      for (int i = 0; i < N; ++i) {
        x = X.row(i).transpose();
        const Vector th = theta_of(i);
        const Vector v = v_of(i);
        bool finite = std::isfinite(x(0));
        if (finite) {
          try {
            stepper.step(x, t0, dt, th);
          } catch (const NumericalBlowup&) {
            finite = false;
          }
        }
        for (int c = 0; c < p; ++c) x(c) += std::sqrt(v(c)) * z01(rng);
        if (!finite || !x.allFinite()) {
          x.setConstant(std::numeric_limits<double>::quiet_NaN());
          logw(i) = -kInf;
        }
        X.row(i) = x.transpose();
      }
    }

    // Observation update. A coordinate with zero noise sd carries no likelihood.
    for (int i = 0; i < N; ++i) {
      double l = 0.0;
      if (!std::isfinite(X(i, 0))) {
        loglik(i) = -kInf;
        continue;
      }
      const Vector s2 = sigma2_of(i);
      for (int c = 0; c < p; ++c) {
        if (s2(c) <= 0.0) continue;
        const double r = ds.observations(t, c) - X(i, c);
        l += -0.5 * (kLog2Pi + std::log(s2(c)) + r * r / s2(c));
      }
      loglik(i) = l;
    }
    if (preselected) loglik -= correction;
    const double m = (logw + loglik).maxCoeff();
    if (!std::isfinite(m))
      throw DegeneracyError("rdem_filter: every particle has zero weight at time index " + std::to_string(t));
    {
      // log sum_j W_j exp(loglik_j), with W the normalized weights before this update
      const double lm = (W.array() > 0).select(loglik.array(), -kInf).maxCoeff();
      log_evidence += log_lookahead + lm + std::log((W.array() * (loglik.array() - lm).exp()).sum());
    }
    logw += loglik;
    W = (logw.array() - m).exp();
    W /= W.sum();
    logw = W.array().log();
    const double ess = 1.0 / W.squaredNorm();
    out.ess_history.push_back(ess);
    out.filter_means.row(t) = W.transpose() * X;
    history[t] = X;
    if (ess < 5.0) {
      std::ostringstream msg;
      msg << "rdem_filter: effective sample size " << ess << " < 5 at time index " << t;
      throw DegeneracyError(msg.str());
    }
    if (ess < 0.5 * N || t == n - 1) {
      const std::vector<int> idx = systematic_resample(W, rng);
      X = reorder_rows(X, idx);
      phi = reorder_rows(phi, idx);
      history[t] = X;
      std::vector<int> anc(N);
      for (int i = 0; i < N; ++i) anc[i] = ancestor[t][idx[i]];
      ancestor[t] = std::move(anc);
      W.setConstant(1.0 / N);
      logw.setConstant(-std::log(static_cast<double>(N)));
    }
  }

  out.log_evidence = log_evidence;
  out.theta.resize(N, q);
  out.sigma.resize(N, p);
  out.x0.resize(N, p);
  out.state_noise.resize(N, p);
  out.state_grid = ds.grid;
  out.states.assign(N, Matrix(n, p));
  for (int i = 0; i < N; ++i) {
    out.theta.row(i) = theta_of(i).transpose();
    out.sigma.row(i) = sigma2_of(i).cwiseSqrt().transpose();
    out.state_noise.row(i) = v_of(i).transpose();
    int cur = i;
    for (int t = n - 1; t >= 0; --t) {
      out.states[i].row(t) = history[t].row(cur);
      cur = ancestor[t][cur];
    }
    out.x0.row(i) = out.states[i].row(0);
  }
  out.runtime = seconds_since(t_start);
  return out;
}

// ---------------------------------------------------------------------------
// Bands

QuantileBands state_bands(const PosteriorSamples& samples, const TimeGrid& grid,
                          const OdeSystem* sys, int refine) {
  const int draws = samples.size();
  if (draws < 20)
    throw InsufficientSamples("state bands need at least 20 draws, got " + std::to_string(draws));
  const int m = grid.size();

  bool same_grid = samples.state_grid && static_cast<int>(samples.states.size()) == draws &&
                   samples.state_grid->size() == m;
  if (same_grid) same_grid = (samples.state_grid->points() - grid.points()).cwiseAbs().maxCoeff() <= 1e-12;

  std::vector<Matrix> curves;
  if (same_grid) {
    curves = samples.states;
  } else if (samples.basis && static_cast<int>(samples.coefficients.size()) == draws) {
    const Matrix B = samples.basis->design(grid.points());
    curves.reserve(draws);
    for (const auto& beta : samples.coefficients) curves.push_back(B * beta);
  } else if (sys && samples.x0.rows() == draws && samples.x0.cols() == sys->state_dim()) {
    curves.reserve(draws);
    for (int dr = 0; dr < draws; ++dr) {
      try {
        curves.push_back(integrate(*sys, samples.x0.row(dr).transpose(), grid,
                                   samples.theta.row(dr).transpose(), refine)
                             .states);
      } catch (const NumericalBlowup&) {
      }
    }
    if (curves.size() < 20)
      throw InsufficientSamples("state bands: fewer than 20 draws could be integrated");
  } else {
    throw InvalidInput("state bands: samples carry no trajectories on this grid; pass the system");
  }

  const int p = static_cast<int>(curves.front().cols());
  QuantileBands out{grid, Matrix(m, p), Matrix(m, p), Matrix(m, p)};
  std::vector<double> vals(curves.size());
  for (int i = 0; i < m; ++i)
    for (int c = 0; c < p; ++c) {
      for (std::size_t dr = 0; dr < curves.size(); ++dr) vals[dr] = curves[dr](i, c);
      std::sort(vals.begin(), vals.end());
      out.q05(i, c) = stats::quantile(vals, 0.05);
      out.q50(i, c) = stats::quantile(vals, 0.50);
      out.q95(i, c) = stats::quantile(vals, 0.95);
    }
  return out;
}

void write_bands(std::ostream& out, const QuantileBands& bands) {
  out << "t,coord,q05,q50,q95\n";
  const auto old = out.precision(17);
  for (int i = 0; i < bands.grid.size(); ++i)
    for (Eigen::Index c = 0; c < bands.q50.cols(); ++c)
      out << bands.grid[i] << ',' << c + 1 << ',' << bands.q05(i, c) << ',' << bands.q50(i, c) << ','
          << bands.q95(i, c) << '\n';
  out.precision(old);
}

void save_bands(const std::string& path, const QuantileBands& bands) {
  std::ofstream f(path);
  if (!f) throw InvalidInput("cannot write '" + path + "'");
  write_bands(f, bands);
}

}  // namespace odeest
