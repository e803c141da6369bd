#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "odeest/models.hpp"
#include "odeest/simulate.hpp"
#include "odeest/splinefit.hpp"

namespace odeest {

struct InverseGamma {
  double shape = 2.0;
  double scale = 1.0;
};

struct Gaussian {
  double mean = 0.0;
  double sd = 1.0;
};

// pi(theta) pi(sigma^2) pi(x0). theta is uniform on a finite box, each sigma_c^2 is
// inverse-gamma, each x0_c is Gaussian.
struct PriorSpec {
  std::vector<Interval> theta_box;      // empty: the system bounds (must be finite)
  std::vector<InverseGamma> sigma2;     // per coordinate; empty: IG(2, 1) each
  std::vector<Gaussian> x0;             // per coordinate; empty: N(y(t_1), 1), or N(0, 1) without data
  std::optional<Vector> fixed_sigma;    // known noise sd per coordinate; disables the sigma update

  // Fills the defaults and checks every hyperparameter. Throws InvalidInput.
  PriorSpec resolved(const OdeSystem& sys, const Dataset& ds) const;
  bool admits_theta(const Vector& theta) const;
  double log_density_x0(const Vector& x0) const;
};

struct ChainConfig {
  int iterations = 10000;          // total, burn-in included
  int burnin = 2000;
  Vector proposal_scales;          // theta then x0 (mh_explicit) or theta (collocation); empty: 2% of the box / 0.05 sd
  std::uint64_t seed = 1;
  std::optional<Vector> theta_init;
  std::optional<Vector> x0_init;
  bool adapt = true;               // scale adaptation during burn-in toward 20-40% acceptance
  bool sample_theta = true;        // collocation: false holds theta at theta_init
  bool keep_states = false;        // store x(t_i) per kept draw
  int thin = 1;

  void validate() const;
};

struct PosteriorSamples {
  std::string method;
  Matrix theta;    // draws x q
  Matrix sigma;    // draws x p, noise sd; zero columns when not sampled
  Matrix x0;       // draws x p; zero columns when not sampled
  std::optional<SplineBasis> basis;
  std::vector<Matrix> coefficients;   // collocation: spline coefficients per draw, on `basis`
  std::optional<TimeGrid> state_grid;
  std::vector<Matrix> states;         // per draw, rows x(t_i) on state_grid
  std::optional<double> acceptance_rate;
  std::vector<double> block_acceptance;  // per update block, after burn-in
  std::vector<double> ess_history;       // particle filter, one per time point
  Matrix filter_means;                   // particle filter, n x p weighted state means
  Matrix state_noise;                    // particle filter, draws x p state noise variances V
  std::optional<double> log_evidence;
  int failed = 0;                        // rejected blowups (MH) or excluded draws (two-step)
  std::vector<std::string> warnings;
  std::uint64_t seed = 0;
  double runtime = 0;

  int size() const { return static_cast<int>(theta.rows()); }
  Vector theta_median() const;
};

// Delimited table: draw,theta1..q,sigma1..p,x0_1..p (blocks without columns are omitted).
void write_samples(std::ostream& out, const PosteriorSamples& s);
void save_samples(const std::string& path, const PosteriorSamples& s);
// Reads the table back (draws only). Throws ParseError.
PosteriorSamples read_samples(std::istream& in);
PosteriorSamples load_samples(const std::string& path);

// Random-walk Metropolis-Hastings on theta and x0 (separate blocks) with a Gibbs
// inverse-gamma update of each sigma_c^2. Blowups reject the proposal.
PosteriorSamples mh_explicit(const Dataset& ds, const OdeSystem& sys, const PriorSpec& prior,
                             const ChainConfig& chain, int refine = 10);

// Posterior proportional to exp(-lambda PEN(beta, theta)) times the likelihood.
// beta is updated by an independence proposal from the Gaussian approximation at the
// penalized mode, theta by a random walk, sigma by Gibbs.
PosteriorSamples collocation_posterior(const Dataset& ds, const OdeSystem& sys,
                                       const SplineBasis& basis, const PriorSpec& prior,
                                       double lambda, const ChainConfig& chain);

struct GradientMatchVariant {
  std::function<double(double)> weight;  // w(t) >= 0; empty means w = 1
};
struct RungeKuttaMatchVariant {
  int refine = 2;  // RK4 steps per quadrature interval
};

struct TwoStepBayesOptions {
  int draws = 1000;
  std::uint64_t seed = 1;
  std::variant<GradientMatchVariant, RungeKuttaMatchVariant> variant = GradientMatchVariant{};
};

// Step 1 draws curves from the conjugate posterior of the spline regression
// (flat prior on beta, p(sigma^2) ~ 1/sigma^2); step 2 maps each curve to theta.
PosteriorSamples two_step_bayes(const Dataset& ds, const OdeSystem& sys, const SplineBasis& basis,
                                const TwoStepBayesOptions& options = {});

struct FilterConfig {
  int particles = 2000;
  double discount = 0.98;      // Liu-West a in (0.5, 1)
  double jitter = 1e-10;       // ridge on the kernel covariance in transformed space
  std::uint64_t seed = 1;
  std::optional<Vector> fixed_theta;
  std::optional<Vector> fixed_sigma;   // noise sd; 0 means no observation update
  std::optional<Vector> fixed_v;       // state noise variance per coordinate
  double v_fraction = 1e-2;            // initial V as a fraction of the data variance
  double v_log_sd = 3.0;               // spread of the initial log V around that value
  bool lookahead = true;               // preselect particles by the predictive density of y_t

  void validate() const;
};

// Liu-West particle filter for y_i = x_i + eps_i, x_i = g(x_{i-1}) + eta_i with g one RK4
// step, carrying (theta, sigma^2, V) per particle. Throws DegeneracyError when the
// effective sample size drops below 5.
PosteriorSamples rdem_filter(const Dataset& ds, const OdeSystem& sys, const PriorSpec& prior,
                             const FilterConfig& config = {});

struct QuantileBands {
  TimeGrid grid;
  Matrix q05, q50, q95;  // n x p
};

// Pointwise 5/50/95% quantiles of the sampled curves. Draws without stored states are
// integrated from (theta, x0) when `sys` is given. Throws InsufficientSamples below 20 draws.
QuantileBands state_bands(const PosteriorSamples& samples, const TimeGrid& grid,
                          const OdeSystem* sys = nullptr, int refine = 10);

// t,coord,q05,q50,q95
void write_bands(std::ostream& out, const QuantileBands& bands);
void save_bands(const std::string& path, const QuantileBands& bands);

}  // namespace odeest
