#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <vector>

#include "potinv/classical_paths.hpp"
#include "potinv/core.hpp"
#include "potinv/parallel.hpp"

namespace potinv {

/// Quadratic-fluctuation data attached to one classical path.  `kappa` is the
/// solution of m kappa'' = v''(q_x) kappa with kappa(0) = 0, kappa'(0) = 1,
/// whose endpoint value is the fluctuation determinant entering the
/// prefactor.  `r_diag` holds the Green-function diagonal R(tau_k, tau_k)
/// once fluctuation_green_function has run.
template <typename Scalar>
struct FluctuationDataT {
  VectorX<Scalar> kappa;
  Scalar prefactor{0};
  VectorX<Scalar> r_diag;
  bool valid{false};
  int negative_modes{0};
};

using FluctuationData = FluctuationDataT<double>;

template <typename Scalar>
struct VanVleckElementT {
  Scalar value{0};
  FluctuationDataT<Scalar> fluct;
  ClassicalPathT<Scalar> path;
};

namespace detail {

/// Endpoint-value recursion for the fluctuation determinant:
/// D_0 = 0, D_1 = eps, D_{k+1} = (2 + eps^2 v''(q_k)/m) D_k - D_{k-1}.
/// D_n equals eps times the determinant of the discrete Hesse operator, and
/// the number of sign changes along the sequence counts its negative modes.
template <typename Scalar, typename Potential>
FluctuationDataT<Scalar> fluctuation_determinant(const Potential& pot,
                                                 const ClassicalPathT<Scalar>& path, Scalar mass,
                                                 Scalar eps, Scalar hbar) {
  const Index n = path.q.size() - 1;
  FluctuationDataT<Scalar> f;
  f.kappa.resize(n + 1);
  f.kappa[0] = Scalar(0);
  f.kappa[1] = eps;
  int flips = 0;
  Scalar last_sign = Scalar(1);
  for (Index k = 1; k < n; ++k) {
    const Scalar w = eps * eps * pot.second_deriv(path.q[k]) / mass;
    f.kappa[k + 1] = (Scalar(2) + w) * f.kappa[k] - f.kappa[k - 1];
    const Scalar s = f.kappa[k + 1];
    if (s == Scalar(0) || s * last_sign < Scalar(0)) ++flips;
    if (s != Scalar(0)) last_sign = s > Scalar(0) ? Scalar(1) : Scalar(-1);
  }
  const Scalar dend = f.kappa[n];
  f.negative_modes = flips;
  f.valid = flips == 0 && dend > Scalar(0);
  if (dend == Scalar(0)) {
    f.prefactor = Scalar(0);  // conjugate point; caller treats as failed
  } else {
    f.prefactor = std::sqrt(mass / (Scalar(2) * std::numbers::pi_v<Scalar> * hbar * std::abs(dend)));
  }
  return f;
}

}  // namespace detail

/// Diagonal matrix element A_x exp(-S[q_x]/hbar) in Gaussian-fluctuation
/// approximation.  The prefactor comes from the kappa-equation route, which
/// needs only the one path; paths whose fluctuation operator is not positive
/// definite are marked invalid and evaluated with the determinant magnitude.
template <typename Scalar, typename Potential>
  requires PotentialEvaluator<Potential, Scalar>
VanVleckElementT<Scalar> van_vleck_element(const Potential& pot, const GridT<Scalar>& grid,
                                           const PhysicsParamsT<Scalar>& params, Scalar x,
                                           const PathSolverConfigT<Scalar>& config,
                                           const std::optional<VectorX<Scalar>>& q_init = {}) {
  VanVleckElementT<Scalar> out;
  out.path = solve_path(pot, grid, params, x, config, q_init);
  if (!out.path.converged) {
    std::ostringstream msg;
    msg << "van_vleck_element: path did not converge at x = " << x;
    throw NumericalError(msg.str());
  }
  out.fluct = detail::fluctuation_determinant(pot, out.path, params.mass, grid.eps, params.hbar);
  if (out.fluct.prefactor == Scalar(0))
    throw NumericalError("van_vleck_element: conjugate point, vanishing determinant");
  out.value = out.fluct.prefactor * std::exp(-out.path.action / params.hbar);
  return out;
}

template <typename Scalar>
VanVleckElementT<Scalar> van_vleck_element(const PotentialFieldT<Scalar>& v,
                                           const GridT<Scalar>& grid,
                                           const PhysicsParamsT<Scalar>& params, Scalar x,
                                           const PathSolverConfigT<Scalar>& config) {
  return van_vleck_element(MeshPotentialT<Scalar>(v, grid), grid, params, x, config);
}

/// Secondary route for the prefactor radicand, -(1/2 pi hbar) d^2S/dx^2 with
/// both endpoints swept together.  Sign disagreements with the kappa route
/// are expected for wells; the kappa route wins and the mismatch is counted.
template <typename Scalar>
struct VanVleckCrossCheckT {
  Scalar kappa_radicand{0};
  Scalar x_route_radicand{0};
  bool sign_agrees{false};
};

template <typename Scalar, typename Potential>
  requires PotentialEvaluator<Potential, Scalar>
VanVleckCrossCheckT<Scalar> van_vleck_cross_check(const Potential& pot, const GridT<Scalar>& grid,
                                                  const PhysicsParamsT<Scalar>& params, Scalar x,
                                                  const PathSolverConfigT<Scalar>& config) {
  VanVleckCrossCheckT<Scalar> out;
  const auto vv = van_vleck_element(pot, grid, params, x, config);
  out.kappa_radicand = vv.fluct.prefactor * vv.fluct.prefactor;
  const Scalar d2s = action_second_derivative(pot, grid, params, x, config);
  out.x_route_radicand = -d2s / (Scalar(2) * std::numbers::pi_v<Scalar> * params.hbar);
  out.sign_agrees = out.x_route_radicand > Scalar(0);
  return out;
}

/// Van Vleck diagonal over the whole mesh plus its trapezoid integral.
template <typename Scalar>
struct SemiclassicalStateT {
  MeshFunctionT<Scalar> diag;  // A_x exp(-S[q_x]/hbar) per node
  Scalar partition{0};
  VectorX<Scalar> actions;
  std::vector<ClassicalPathT<Scalar>> paths;
  std::vector<FluctuationDataT<Scalar>> fluct;
  Diagnostics diagnostics;

  MeshFunctionT<Scalar> density() const { return {diag.values / partition, MeshRole::density}; }
};

using SemiclassicalState = SemiclassicalStateT<double>;

namespace detail {

// Fixed chunk size for mesh sweeps: warm starts stay within a chunk, so
// results do not depend on the thread count.
constexpr Index kSweepChunk = 8;

template <typename Scalar>
struct SweepNode {
  ClassicalPathT<Scalar> path;
  FluctuationDataT<Scalar> fluct;
  Scalar value{0};
  bool failed{true};
};

/// Solve the boundary-value problem at every mesh node, warm-starting each
/// node from its chunk predecessor shifted to the new boundary value.
template <typename Scalar, typename Potential>
std::vector<SweepNode<Scalar>> sweep_mesh(const Potential& pot, const GridT<Scalar>& grid,
                                          const PhysicsParamsT<Scalar>& params,
                                          const PathSolverConfigT<Scalar>& config, int threads,
                                          const std::vector<ClassicalPathT<Scalar>>* warm) {
  std::vector<SweepNode<Scalar>> nodes(grid.n_x);
  parallel_chunks(grid.n_x, kSweepChunk, threads, [&](Index begin, Index end) {
    std::optional<VectorX<Scalar>> carry;
    for (Index j = begin; j < end; ++j) {
      const Scalar x = grid.node(j);
      std::optional<VectorX<Scalar>> init;
      if (warm && (*warm)[j].q.size() == grid.n_tau + 1) {
        init = (*warm)[j].q;
      } else if (carry) {
        init = *carry;
        init->array() += x - (*carry)[0];
      }
      auto& node = nodes[j];
      node.path = solve_path(pot, grid, params, x, config, init);
      if (!node.path.converged) {
        node.failed = true;
        continue;
      }
      carry = node.path.q;
      node.fluct = fluctuation_determinant(pot, node.path, params.mass, grid.eps, params.hbar);
      if (node.fluct.prefactor == Scalar(0)) {
        node.failed = true;
        continue;
      }
      node.value = node.fluct.prefactor * std::exp(-node.path.action / params.hbar);
      node.failed = false;
    }
  });
  return nodes;
}

}  // namespace detail

template <typename Scalar, typename Potential>
  requires PotentialEvaluator<Potential, Scalar>
SemiclassicalStateT<Scalar> semiclassical_partition(
    const Potential& pot, const GridT<Scalar>& grid, const PhysicsParamsT<Scalar>& params,
    const PathSolverConfigT<Scalar>& config, int threads = 1,
    const std::vector<ClassicalPathT<Scalar>>* warm = nullptr) {
  auto nodes = detail::sweep_mesh(pot, grid, params, config, threads, warm);
  SemiclassicalStateT<Scalar> state;
  state.diag.values.resize(grid.n_x);
  state.diag.role = MeshRole::density;
  state.actions.resize(grid.n_x);
  state.paths.resize(grid.n_x);
  state.fluct.resize(grid.n_x);

  std::vector<bool> failed(grid.n_x, false);
  std::vector<Index> failed_list;
  for (Index j = 0; j < grid.n_x; ++j) {
    auto& node = nodes[j];
    state.paths[j] = std::move(node.path);
    state.fluct[j] = std::move(node.fluct);
    state.actions[j] = state.paths[j].action;
    failed[j] = node.failed;
    if (node.failed) {
      failed_list.push_back(j);
      state.diag.values[j] = Scalar(0);
    } else {
      state.diag.values[j] = node.value;
      if (!state.fluct[j].valid) ++state.diagnostics.invalid_fluctuations;
    }
  }
  state.diagnostics.failed_paths += static_cast<long>(failed_list.size());
  if (static_cast<Index>(failed_list.size()) > std::max<Index>(1, grid.n_x / 4)) {
    std::ostringstream msg;
    msg << "semiclassical_partition: too many failed mesh nodes:";
    for (Index j : failed_list) msg << ' ' << j;
    throw NumericalError(msg.str());
  }
  // Isolated failures: fill by linear interpolation between converged nodes.
  for (Index j : failed_list) {
    Index lo = j, hi = j;
    while (lo >= 0 && failed[lo]) --lo;
    while (hi < grid.n_x && failed[hi]) ++hi;
    if (lo < 0 && hi >= grid.n_x)
      throw NumericalError("semiclassical_partition: no converged nodes");
    if (lo < 0)
      state.diag.values[j] = state.diag.values[hi];
    else if (hi >= grid.n_x)
      state.diag.values[j] = state.diag.values[lo];
    else {
      const Scalar t = Scalar(j - lo) / Scalar(hi - lo);
      state.diag.values[j] = (Scalar(1) - t) * state.diag.values[lo] + t * state.diag.values[hi];
    }
  }
  state.partition = quadrature(state.diag, grid);
  if (!(state.partition > Scalar(0)))
    throw NumericalError("semiclassical_partition: non-positive partition function");
  return state;
}

template <typename Scalar>
SemiclassicalStateT<Scalar> semiclassical_partition(const PotentialFieldT<Scalar>& v,
                                                    const GridT<Scalar>& grid,
                                                    const PhysicsParamsT<Scalar>& params,
                                                    const PathSolverConfigT<Scalar>& config,
                                                    int threads = 1) {
  MeshPotentialT<Scalar> pot(v, grid);
  auto state = semiclassical_partition(pot, grid, params, config, threads);
  state.diagnostics.clamped_evaluations += pot.clamp_count();
  return state;
}

template <typename Scalar>
struct StationaryPartitionT {
  Scalar x0{0};
  Scalar z{0};
  Index node{0};
  bool at_edge{false};
  bool curvature_ok{true};
};

using StationaryPartition = StationaryPartitionT<double>;

/// Stationary-point treatment of the x-integral: locate the action minimum
/// over the mesh and apply the Laplace factor sqrt(2 pi hbar / S'') there.
template <typename Scalar, typename Potential>
  requires PotentialEvaluator<Potential, Scalar>
StationaryPartitionT<Scalar> stationary_partition(const Potential& pot, const GridT<Scalar>& grid,
                                                  const PhysicsParamsT<Scalar>& params,
                                                  const PathSolverConfigT<Scalar>& config,
                                                  int threads = 1) {
  auto nodes = detail::sweep_mesh(pot, grid, params, config, threads, nullptr);
  Index best = -1;
  for (Index j = 0; j < grid.n_x; ++j) {
    if (nodes[j].failed) continue;
    if (best < 0 || nodes[j].path.action < nodes[best].path.action) best = j;
  }
  if (best < 0) throw NumericalError("stationary_partition: no converged paths");
  StationaryPartitionT<Scalar> out;
  out.node = best;
  out.x0 = grid.node(best);
  out.at_edge = best == 0 || best == grid.n_x - 1;
  const Scalar d2s = action_second_derivative(pot, grid, params, out.x0, config);
  out.curvature_ok = d2s > Scalar(0);
  const Scalar laplace =
      std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar> * params.hbar / std::abs(d2s));
  out.z = nodes[best].value * laplace;
  return out;
}

template <typename Scalar>
StationaryPartitionT<Scalar> stationary_partition(const PotentialFieldT<Scalar>& v,
                                                  const GridT<Scalar>& grid,
                                                  const PhysicsParamsT<Scalar>& params,
                                                  const PathSolverConfigT<Scalar>& config) {
  return stationary_partition(MeshPotentialT<Scalar>(v, grid), grid, params, config);
}

/// Classical limit: normalized Boltzmann density exp(-beta v)/int exp(-beta v).
template <typename Scalar>
MeshFunctionT<Scalar> classical_density(const PotentialFieldT<Scalar>& v,
                                        const GridT<Scalar>& grid,
                                        const PhysicsParamsT<Scalar>& params) {
  if (v.values.size() != grid.n_x) throw DomainError("classical_density: size mismatch");
  const Scalar vmin = v.values.minCoeff();
  VectorX<Scalar> w = ((v.values.array() - vmin) * (-params.beta)).exp().matrix();
  const Scalar q = quadrature(w, grid);
  return {w / q, MeshRole::density};
}

/// Green function of the fluctuation operator -m d^2/dtau^2 + v''(q_x(tau))
/// with Dirichlet ends, as the full matrix R(tau_k, tau_l).  The discrete
/// delta carries a 1/eps.
template <typename Scalar, typename Potential>
  requires PotentialEvaluator<Potential, Scalar>
MatrixX<Scalar> fluctuation_green_function(const ClassicalPathT<Scalar>& path,
                                           const Potential& pot, const GridT<Scalar>& grid,
                                           const PhysicsParamsT<Scalar>& params) {
  const Index n = path.q.size() - 1;
  const Index ni = n - 1;
  const Scalar eps = grid.eps;
  const Scalar s = params.mass / (eps * eps);
  MatrixX<Scalar> op = MatrixX<Scalar>::Zero(ni, ni);
  for (Index k = 0; k < ni; ++k) {
    op(k, k) = Scalar(2) * s + pot.second_deriv(path.q[k + 1]);
    if (k > 0) op(k, k - 1) = -s;
    if (k + 1 < ni) op(k, k + 1) = -s;
  }
  Eigen::LDLT<MatrixX<Scalar>> ldlt(op);
  if (ldlt.info() != Eigen::Success)
    throw NumericalError("fluctuation_green_function: factorization failed");
  MatrixX<Scalar> rhs = MatrixX<Scalar>::Identity(ni, ni) / eps;
  MatrixX<Scalar> inner = ldlt.solve(rhs);
  const Scalar residual = (op * inner - rhs).cwiseAbs().maxCoeff();
  if (!std::isfinite(residual) || residual > Scalar(1e-6) / eps)
    throw NumericalError("fluctuation_green_function: singular fluctuation operator");
  inner = ((inner + inner.transpose()) / Scalar(2)).eval();
  MatrixX<Scalar> r = MatrixX<Scalar>::Zero(n + 1, n + 1);
  r.block(1, 1, ni, ni) = inner;
  return r;
}

template <typename Scalar>
MatrixX<Scalar> fluctuation_green_function(const ClassicalPathT<Scalar>& path,
                                           const PotentialFieldT<Scalar>& v,
                                           const GridT<Scalar>& grid,
                                           const PhysicsParamsT<Scalar>& params) {
  return fluctuation_green_function(path, MeshPotentialT<Scalar>(v, grid), grid, params);
}

/// Copy the Green-function diagonal into the fluctuation record.
template <typename Scalar>
void attach_green_diagonal(FluctuationDataT<Scalar>& fluct, const MatrixX<Scalar>& green) {
  fluct.r_diag = green.diagonal();
}

// ---------------------------------------------------------------------------
// Three approximations to the logarithmic derivative of the statistical
// operator, as mesh densities in x'.

/// Sharpest approximation: the delta distribution evaluated on the
/// stationary path, realized as the occupation histogram per unit cell.
/// Mesh mass is exactly -beta.
template <typename Scalar>
MeshFunctionT<Scalar> log_deriv_approach1(const ClassicalPathT<Scalar>& path,
                                          const GridT<Scalar>& grid,
                                          const PhysicsParamsT<Scalar>& params) {
  auto h = occupation_histogram(path, grid);
  return {(-h.values / (params.hbar * grid.dx)).eval(), MeshRole::derivative};
}

/// Gaussian smearing: each time node contributes a normalized Gaussian of
/// variance hbar R(tau, tau), deposited per mesh cell so that the zero-width
/// limit reproduces approach 1's binning.  Endpoints have R = 0 and enter as
/// point masses.
template <typename Scalar>
MeshFunctionT<Scalar> log_deriv_approach2(const ClassicalPathT<Scalar>& path,
                                          const FluctuationDataT<Scalar>& fluct,
                                          const GridT<Scalar>& grid,
                                          const PhysicsParamsT<Scalar>& params) {
  const Index n = path.q.size() - 1;
  if (fluct.r_diag.size() != n + 1)
    throw DomainError("log_deriv_approach2: r_diag not filled; run fluctuation_green_function");
  VectorX<Scalar> mass = VectorX<Scalar>::Zero(grid.n_x);
  for (Index k = 1; k <= n; ++k) {
    const Scalar rkk = fluct.r_diag[k];
    if (rkk < Scalar(0))
      throw NumericalError("log_deriv_approach2: negative Green-function diagonal");
    const Scalar mu = path.q[k];
    const Scalar sigma = std::sqrt(params.hbar * rkk);
    if (sigma == Scalar(0)) {
      mass[grid.nearest_node(mu)] += Scalar(1);
      continue;
    }
    const Scalar inv = Scalar(1) / (sigma * std::numbers::sqrt2_v<Scalar>);
    const Index j_lo = std::max<Index>(0, grid.nearest_node(mu - Scalar(8) * sigma));
    const Index j_hi = std::min<Index>(grid.n_x - 1, grid.nearest_node(mu + Scalar(8) * sigma));
    for (Index j = j_lo; j <= j_hi; ++j) {
      const Scalar lo = grid.node(j) - grid.dx / Scalar(2);
      const Scalar hi = grid.node(j) + grid.dx / Scalar(2);
      mass[j] += Scalar(0.5) * (std::erf((hi - mu) * inv) - std::erf((lo - mu) * inv));
    }
  }
  return {(-grid.eps / (params.hbar * grid.dx) * mass).eval(), MeshRole::derivative};
}

template <typename Scalar>
struct Approach3ResultT {
  Scalar value{0};
  Index tau_index{0};  // stationary split point tau' = tau_index * eps
  Scalar action_leg1{0};
  Scalar action_leg2{0};
  Scalar energy_leg1{0};
  Scalar energy_leg2{0};
};

/// Two-leg split of the matrix element: legs x_i -> x' over tau' and
/// x' -> x_i over beta hbar - tau', with tau' fixed by the discrete action
/// minimum and the beta'-integral treated by a Laplace factor.
template <typename Scalar, typename Potential>
  requires PotentialEvaluator<Potential, Scalar>
Approach3ResultT<Scalar> log_deriv_approach3_detail(const Potential& pot,
                                                    const GridT<Scalar>& grid,
                                                    const PhysicsParamsT<Scalar>& params,
                                                    Scalar xi, Index xprime_index,
                                                    const PathSolverConfigT<Scalar>& config) {
  const Index n = grid.n_tau;
  if (n < 4) throw DomainError("log_deriv_approach3: needs n_tau >= 4");
  if (xprime_index < 0 || xprime_index >= grid.n_x)
    throw DomainError("log_deriv_approach3: node index out of range");
  const Scalar xp = grid.node(xprime_index);
  const Scalar hbar = params.hbar;

  const auto base = van_vleck_element(pot, grid, params, xi, config);

  struct Leg {
    ClassicalPathT<Scalar> path;
    FluctuationDataT<Scalar> fluct;
    bool ok{false};
  };
  auto solve_leg = [&](Index steps, Scalar a, Scalar b) {
    Leg leg;
    leg.path = detail::solve_bvp(pot, params.mass, grid.eps, steps, a, b, config, std::nullopt);
    if (steps >= 2 && !leg.path.converged) return leg;
    leg.path.action = path_action(leg.path, pot, grid, params);
    leg.fluct = detail::fluctuation_determinant(pot, leg.path, params.mass, grid.eps, hbar);
    leg.ok = leg.fluct.prefactor > Scalar(0);
    return leg;
  };

  std::vector<Leg> first(n), second(n);
  VectorX<Scalar> total = VectorX<Scalar>::Constant(n, std::numeric_limits<Scalar>::infinity());
  for (Index k = 1; k < n; ++k) {
    first[k] = solve_leg(k, xi, xp);
    if (!first[k].ok) continue;
    second[k] = solve_leg(n - k, xp, xi);
    if (!second[k].ok) continue;
    total[k] = first[k].path.action + second[k].path.action;
  }
  Index best = -1;
  for (Index k = 1; k < n; ++k)
    if (std::isfinite(total[k]) && (best < 0 || total[k] < total[best])) best = k;
  if (best < 2 || best > n - 2 || !std::isfinite(total[best - 1]) || !std::isfinite(total[best + 1]))
    throw NumericalError("log_deriv_approach3: no interior stationary split point");

  const Scalar dbeta = grid.eps / hbar;
  const Scalar d2 = (total[best + 1] - Scalar(2) * total[best] + total[best - 1]) / (dbeta * dbeta);
  const Scalar a_beta =
      std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar> * hbar / std::abs(d2));

  Approach3ResultT<Scalar> out;
  out.tau_index = best;
  out.action_leg1 = first[best].path.action;
  out.action_leg2 = second[best].path.action;
  out.energy_leg1 = path_energy(first[best].path, pot, grid, params).first;
  out.energy_leg2 = path_energy(second[best].path, pot, grid, params).first;
  const Scalar exponent = (out.action_leg1 + out.action_leg2 - base.path.action) / hbar;
  out.value = -(a_beta * first[best].fluct.prefactor * second[best].fluct.prefactor /
                base.fluct.prefactor) *
              std::exp(-exponent);
  return out;
}

template <typename Scalar, typename Potential>
  requires PotentialEvaluator<Potential, Scalar>
Scalar log_deriv_approach3(const Potential& pot, const GridT<Scalar>& grid,
                           const PhysicsParamsT<Scalar>& params, Scalar xi, Index xprime_index,
                           const PathSolverConfigT<Scalar>& config) {
  return log_deriv_approach3_detail(pot, grid, params, xi, xprime_index, config).value;
}

template <typename Scalar>
Scalar log_deriv_approach3(const PotentialFieldT<Scalar>& v, const GridT<Scalar>& grid,
                           const PhysicsParamsT<Scalar>& params, Scalar xi, Index xprime_index,
                           const PathSolverConfigT<Scalar>& config) {
  return log_deriv_approach3(MeshPotentialT<Scalar>(v, grid), grid, params, xi, xprime_index,
                             config);
}

}  // namespace potinv
