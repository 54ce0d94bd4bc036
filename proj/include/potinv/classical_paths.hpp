#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

#include "potinv/core.hpp"

namespace potinv {

template <typename Scalar>
struct PathSolverConfigT {
  Scalar eta_q{1};
  int max_iter{2000};
  Scalar tol{1e-9};
  bool backtracking{true};
};

using PathSolverConfig = PathSolverConfigT<double>;

template <typename Scalar>
void validate(const PathSolverConfigT<Scalar>& c) {
  if (!(c.eta_q > Scalar(0) && c.eta_q <= Scalar(1)))
    throw DomainError("path solver eta_q must lie in (0, 1]");
  if (!(c.tol > Scalar(0))) throw DomainError("path solver tol must be positive");
  if (c.max_iter < 1) throw DomainError("path solver max_iter must be positive");
}

/// A solution of the boundary-value problem m q'' = v'(q) in imaginary time,
/// q_0 = q_n = boundary_x, with its discrete action and conserved energy.
template <typename Scalar>
struct ClassicalPathT {
  VectorX<Scalar> q;  // n_tau + 1 entries
  Scalar boundary_x{0};
  Scalar action{0};
  Scalar energy{0};
  bool converged{false};
  int iterations{0};
  Scalar residual_norm{0};
};

using ClassicalPath = ClassicalPathT<double>;

namespace detail {

/// Thomas factorization of s * tridiag(-1, 2, -1), size fixed at
/// construction.  The matrix never changes across solver iterations, so the
/// elimination coefficients are computed once.
template <typename Scalar>
class SecondDifferenceSolver {
 public:
  SecondDifferenceSolver(Index n_interior, Scalar scale) : scale_(scale), c_(n_interior) {
    Scalar prev = Scalar(0);
    for (Index i = 0; i < n_interior; ++i) {
      c_[i] = Scalar(-1) / (Scalar(2) + prev);  // c'_i = c / (b - a c'_{i-1})
      prev = c_[i];
    }
  }

  Index size() const { return c_.size(); }

  /// Solve s * tridiag(-1,2,-1) u = rhs in place.
  void solve_inplace(VectorX<Scalar>& rhs) const {
    const Index n = c_.size();
    rhs /= scale_;
    Scalar prev_c = Scalar(0);
    Scalar prev_d = Scalar(0);
    for (Index i = 0; i < n; ++i) {
      rhs[i] = (rhs[i] + prev_d) / (Scalar(2) + prev_c);
      prev_c = c_[i];
      prev_d = rhs[i];
    }
    for (Index i = n - 2; i >= 0; --i) rhs[i] -= c_[i] * rhs[i + 1];
  }

 private:
  Scalar scale_;
  VectorX<Scalar> c_;
};

/// Residual of the discrete equations of motion at interior points:
/// -(m/eps^2)(q_{k+1} - 2 q_k + q_{k-1}) + v'(q_k).
template <typename Scalar, typename Potential>
Scalar eom_residual_norm(const Potential& pot, const VectorX<Scalar>& q, Scalar mass, Scalar eps) {
  const Index n = q.size() - 1;
  const Scalar s = mass / (eps * eps);
  Scalar worst = Scalar(0);
  for (Index k = 1; k < n; ++k) {
    const Scalar r = -s * (q[k + 1] - Scalar(2) * q[k] + q[k - 1]) + pot.deriv(q[k]);
    worst = std::max(worst, std::abs(r));
  }
  return worst;
}

/// Damped fixed-point iteration q <- q - eta (q + A^-1 t(q)) for the
/// two-endpoint problem q_0 = a, q_n = b over n steps of size eps.
template <typename Scalar, typename Potential>
ClassicalPathT<Scalar> solve_bvp(const Potential& pot, Scalar mass, Scalar eps, Index n_steps,
                                 Scalar a, Scalar b, const PathSolverConfigT<Scalar>& config,
                                 const std::optional<VectorX<Scalar>>& q_init) {
  validate(config);
  if (n_steps < 1) throw DomainError("path solve needs at least 1 time step");
  if (n_steps == 1) {
    // No interior points; the two-node path is fully determined.
    ClassicalPathT<Scalar> path;
    path.q.resize(2);
    path.q << a, b;
    path.boundary_x = a;
    path.converged = true;
    return path;
  }
  const Index n = n_steps;
  const Scalar s = mass / (eps * eps);
  const SecondDifferenceSolver<Scalar> lin(n - 1, s);

  ClassicalPathT<Scalar> path;
  if (q_init) {
    if (q_init->size() != n + 1) throw DomainError("q_init has wrong length");
    path.q = *q_init;
    path.q[0] = a;
    path.q[n] = b;
  } else {
    path.q = VectorX<Scalar>::LinSpaced(n + 1, a, b);
  }

  Scalar eta = config.eta_q;
  constexpr Scalar kEtaFloor = Scalar(1e-6);
  Scalar res = eom_residual_norm(pot, path.q, mass, eps);
  VectorX<Scalar> rhs(n - 1);
  VectorX<Scalar> trial(n + 1);
  int it = 0;
  for (; it < config.max_iter && res > config.tol; ++it) {
    // u = A^-1 t with boundary components u_0 = -a, u_n = -b folded into rhs.
    for (Index k = 1; k < n; ++k) rhs[k - 1] = pot.deriv(path.q[k]);
    rhs[0] -= s * a;
    rhs[n - 2] -= s * b;
    lin.solve_inplace(rhs);

    trial[0] = a;
    trial[n] = b;
    for (Index k = 1; k < n; ++k) trial[k] = path.q[k] - eta * (path.q[k] + rhs[k - 1]);
    const Scalar trial_res = eom_residual_norm(pot, trial, mass, eps);
    if (config.backtracking && trial_res > res) {
      eta *= Scalar(0.5);
      if (eta < kEtaFloor) break;
      continue;  // keep the current iterate
    }
    path.q.swap(trial);
    res = trial_res;
    eta = std::min(config.eta_q, eta * Scalar(1.5));
  }
  path.boundary_x = a;
  path.iterations = it;
  path.residual_norm = res;
  path.converged = res <= config.tol;
  return path;
}

}  // namespace detail

template <typename Scalar, typename Potential>
  requires PotentialEvaluator<Potential, Scalar>
ClassicalPathT<Scalar> solve_path(const Potential& pot, const GridT<Scalar>& grid,
                                  const PhysicsParamsT<Scalar>& params, Scalar x,
                                  const PathSolverConfigT<Scalar>& config,
                                  const std::optional<VectorX<Scalar>>& q_init = {}) {
  std::optional<VectorX<Scalar>> init = q_init;
  if (!init) init = VectorX<Scalar>::Constant(grid.n_tau + 1, x).eval();  // static path
  auto path = detail::solve_bvp(pot, params.mass, grid.eps, grid.n_tau, x, x, config, init);
  path.action = path_action(path, pot, grid, params);
  path.energy = path_energy(path, pot, grid, params).first;
  return path;
}

template <typename Scalar>
ClassicalPathT<Scalar> solve_path(const PotentialFieldT<Scalar>& v, const GridT<Scalar>& grid,
                                  const PhysicsParamsT<Scalar>& params, Scalar x,
                                  const PathSolverConfigT<Scalar>& config,
                                  const std::optional<VectorX<Scalar>>& q_init = {}) {
  return solve_path(MeshPotentialT<Scalar>(v, grid), grid, params, x, config, q_init);
}

/// Discrete Euclidean action eps * sum_k [ m/2 ((q_k - q_{k-1})/eps)^2 + v(q_k) ].
template <typename Scalar, typename Potential>
Scalar path_action(const ClassicalPathT<Scalar>& path, const Potential& pot,
                   const GridT<Scalar>& grid, const PhysicsParamsT<Scalar>& params) {
  const Index n = path.q.size() - 1;
  const Scalar eps = grid.eps;
  Scalar sum = Scalar(0);
  for (Index k = 1; k <= n; ++k) {
    const Scalar vel = (path.q[k] - path.q[k - 1]) / eps;
    sum += Scalar(0.5) * params.mass * vel * vel + pot.value(path.q[k]);
  }
  return eps * sum;
}

template <typename Scalar>
Scalar path_action(const ClassicalPathT<Scalar>& path, const PotentialFieldT<Scalar>& v,
                   const GridT<Scalar>& grid, const PhysicsParamsT<Scalar>& params) {
  return path_action(path, MeshPotentialT<Scalar>(v, grid), grid, params);
}

/// Midpoint energy E_k = m/2 ((q_k - q_{k-1})/eps)^2 - v((q_k + q_{k-1})/2);
/// returns (mean, max |E_k - mean|).  The drift is pure discretization error,
/// O(eps^2) on smooth potentials.
template <typename Scalar, typename Potential>
std::pair<Scalar, Scalar> path_energy(const ClassicalPathT<Scalar>& path, const Potential& pot,
                                      const GridT<Scalar>& grid,
                                      const PhysicsParamsT<Scalar>& params) {
  const Index n = path.q.size() - 1;
  const Scalar eps = grid.eps;
  VectorX<Scalar> e(n);
  for (Index k = 1; k <= n; ++k) {
    const Scalar vel = (path.q[k] - path.q[k - 1]) / eps;
    e[k - 1] = Scalar(0.5) * params.mass * vel * vel -
               pot.value(Scalar(0.5) * (path.q[k] + path.q[k - 1]));
  }
  const Scalar mean = e.mean();
  const Scalar drift = (e.array() - mean).abs().maxCoeff();
  return {mean, drift};
}

template <typename Scalar>
std::pair<Scalar, Scalar> path_energy(const ClassicalPathT<Scalar>& path,
                                      const PotentialFieldT<Scalar>& v, const GridT<Scalar>& grid,
                                      const PhysicsParamsT<Scalar>& params) {
  return path_energy(path, MeshPotentialT<Scalar>(v, grid), grid, params);
}

/// Time spent per mesh cell: h[j] = eps * #{ k in 1..n_tau : round(q_k) = j }.
/// Sums to beta*hbar exactly (each step lands in exactly one bin).
template <typename Scalar>
MeshFunctionT<Scalar> occupation_histogram(const ClassicalPathT<Scalar>& path,
                                           const GridT<Scalar>& grid) {
  MeshFunctionT<Scalar> h{VectorX<Scalar>::Zero(grid.n_x), MeshRole::density};
  const Index n = path.q.size() - 1;
  for (Index k = 1; k <= n; ++k) h.values[grid.nearest_node(path.q[k])] += grid.eps;
  return h;
}

/// Central second difference of x -> S[q_x] with both endpoints moving
/// together, step dx/4, Richardson-extrapolated when the finer solves
/// converge.  This is the curvature used for the stationary-point Laplace
/// integral over x.
template <typename Scalar, typename Potential>
  requires PotentialEvaluator<Potential, Scalar>
Scalar action_second_derivative(const Potential& pot, const GridT<Scalar>& grid,
                                const PhysicsParamsT<Scalar>& params, Scalar x,
                                const PathSolverConfigT<Scalar>& config) {
  const auto center = solve_path(pot, grid, params, x, config);
  if (!center.converged)
    throw NumericalError("action_second_derivative: path did not converge at center");
  const auto diff = [&](Scalar delta) {
    const auto shift = [&](Scalar xx) {
      auto init = center.q;
      init.array() += xx - x;
      auto p = solve_path(pot, grid, params, xx, config, init);
      if (!p.converged)
        throw NumericalError("action_second_derivative: path did not converge at offset");
      return p.action;
    };
    return (shift(x + delta) - Scalar(2) * center.action + shift(x - delta)) / (delta * delta);
  };
  const Scalar delta = grid.dx / Scalar(4);
  const Scalar coarse = diff(delta);
  try {
    const Scalar fine = diff(delta / Scalar(2));
    return (Scalar(4) * fine - coarse) / Scalar(3);
  } catch (const NumericalError&) {
    return coarse;
  }
}

template <typename Scalar>
Scalar action_second_derivative(const PotentialFieldT<Scalar>& v, const GridT<Scalar>& grid,
                                const PhysicsParamsT<Scalar>& params, Scalar x,
                                const PathSolverConfigT<Scalar>& config) {
  return action_second_derivative(MeshPotentialT<Scalar>(v, grid), grid, params, x, config);
}

}  // namespace potinv
