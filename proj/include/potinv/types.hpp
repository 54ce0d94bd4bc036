#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace potinv {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad inputs: wrong dimensions, invalid ranges, inconsistent configuration.
struct DomainError : Error {
  using Error::Error;
};

/// Numerics gave up: non-convergence where convergence is required, singular
/// operators, backend failures. The CLI maps these to exit code 1.
struct NumericalError : Error {
  using Error::Error;
};

/// Problems with config files or CLI usage; mapped to exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

/// Counters surfaced in run manifests.
struct Diagnostics {
  long clamped_evaluations = 0;   // potential evaluated outside the mesh
  long failed_paths = 0;          // boundary-value solves that did not converge
  long invalid_fluctuations = 0;  // fluctuation operator not positive definite
  long prefactor_sign_mismatches = 0;
  long derivative_fallbacks = 0;  // log-derivative backend fell back to approach 1

  Diagnostics& operator+=(const Diagnostics& o) {
    clamped_evaluations += o.clamped_evaluations;
    failed_paths += o.failed_paths;
    invalid_fluctuations += o.invalid_fluctuations;
    prefactor_sign_mismatches += o.prefactor_sign_mismatches;
    derivative_fallbacks += o.derivative_fallbacks;
    return *this;
  }
};

}  // namespace potinv
