#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace odeest {

// Base of every error raised by the library. The category string is stable
// and is what the CLI prints in front of the message.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define ODEEST_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(tag, what) {}         \
  };

ODEEST_DEFINE_ERROR(InvalidInput, "invalid-input")
ODEEST_DEFINE_ERROR(BoundsError, "bounds")
ODEEST_DEFINE_ERROR(LookupError, "lookup")
ODEEST_DEFINE_ERROR(DomainError, "domain")
ODEEST_DEFINE_ERROR(ParseError, "parse")
ODEEST_DEFINE_ERROR(ValidationError, "validation")
ODEEST_DEFINE_ERROR(ConditioningError, "conditioning")
ODEEST_DEFINE_ERROR(DegenerateSmoother, "degenerate-smoother")
ODEEST_DEFINE_ERROR(EstimationFailure, "estimation-failure")
ODEEST_DEFINE_ERROR(DegeneracyError, "degeneracy")
ODEEST_DEFINE_ERROR(InsufficientSamples, "insufficient-sample")

#undef ODEEST_DEFINE_ERROR

// Non-finite vector field value during an RK4 stage.
class NumericalBlowup : public Error {
 public:
  NumericalBlowup(const std::string& what, int stage, double time)
      : Error("numerical-blowup", what), stage_(stage), time_(time) {}
  int stage() const noexcept { return stage_; }
  double time() const noexcept { return time_; }

 private:
  int stage_;
  double time_;
};

// Gauss-Newton ran out of iterations. Carries the last iterate.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> last_iterate,
                   double gradient_norm)
      : Error("convergence", what),
        last_iterate_(std::move(last_iterate)),
        gradient_norm_(gradient_norm) {}
  const std::vector<double>& last_iterate() const noexcept { return last_iterate_; }
  double gradient_norm() const noexcept { return gradient_norm_; }

 private:
  std::vector<double> last_iterate_;
  double gradient_norm_;
};

}  // namespace odeest
