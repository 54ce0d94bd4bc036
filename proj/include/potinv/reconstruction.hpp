#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include "potinv/classical_paths.hpp"
#include "potinv/core.hpp"
#include "potinv/prior.hpp"
#include "potinv/semiclassical.hpp"
#include "potinv/spectral.hpp"

namespace potinv {

enum class LikelihoodBackend { classical, semiclassical, exact };
enum class DerivBackend { approach1, approach2, approach3, exact };

/// Measured positions, snapped to mesh nodes (the data live on the mesh).
template <typename Scalar>
struct DatasetT {
  VectorX<Scalar> positions;
  std::vector<Index> nodes;
  std::optional<unsigned long long> seed;

  Index size() const { return positions.size(); }
};

using Dataset = DatasetT<double>;

template <typename Scalar>
DatasetT<Scalar> make_dataset(VectorX<Scalar> positions, const GridT<Scalar>& grid,
                              std::optional<unsigned long long> seed = {}) {
  DatasetT<Scalar> d;
  d.nodes.reserve(positions.size());
  for (Index i = 0; i < positions.size(); ++i) {
    if (positions[i] < grid.x_min || positions[i] > grid.x_max) {
      std::ostringstream msg;
      msg << "dataset position " << i << " = " << positions[i] << " outside mesh range";
      throw DomainError(msg.str());
    }
    d.nodes.push_back(grid.nearest_node(positions[i]));
  }
  d.positions = std::move(positions);
  d.seed = seed;
  return d;
}

template <typename Scalar>
struct ReconstructionConfigT {
  Scalar eta_v{0.1};
  int max_outer{200};
  Scalar grad_tol{1e-3};
  LikelihoodBackend likelihood_backend{LikelihoodBackend::semiclassical};
  DerivBackend deriv_backend{DerivBackend::approach1};
  PathSolverConfigT<Scalar> path_config{};
  bool freeze_boundary{false};
  int max_backtracks{20};
  int threads{1};
};

using ReconstructionConfig = ReconstructionConfigT<double>;

template <typename Scalar>
struct ReconstructionStateT {
  PotentialFieldT<Scalar> v;
  std::vector<ClassicalPathT<Scalar>> paths;  // one per datum
  MeshFunctionT<Scalar> residual;
  MeshFunctionT<Scalar> rho_norm;
  std::vector<Scalar> energy_trace;     // E(V|D) at accepted iterates
  std::vector<Scalar> grad_norm_trace;  // sup norm of the residual per outer step
  int outer_iter{0};
  bool converged{false};
  Diagnostics diagnostics;
};

using ReconstructionState = ReconstructionStateT<double>;

namespace detail {

/// Everything one iterate's objective evaluation produces; reused between the
/// energy, the residual, and warm starts of the next step.
template <typename Scalar>
struct PosteriorParts {
  Scalar energy{0};
  Scalar likelihood_term{0};
  Scalar prior_term{0};
  VectorX<Scalar> rho_norm;
  Scalar normalizer{0};
  std::vector<ClassicalPathT<Scalar>> mesh_paths;       // empty q where unsolved
  std::vector<FluctuationDataT<Scalar>> mesh_fluct;
  std::optional<SpectralDecompositionT<Scalar>> spec;
  std::optional<MatrixX<Scalar>> drho;  // full derivative matrix, exact backend
  Diagnostics diagnostics;
};

template <typename Scalar>
bool needs_paths(const ReconstructionConfigT<Scalar>& config) {
  return config.likelihood_backend == LikelihoodBackend::semiclassical ||
         config.deriv_backend != DerivBackend::exact;
}

template <typename Scalar>
bool needs_spectrum(const ReconstructionConfigT<Scalar>& config) {
  return config.likelihood_backend == LikelihoodBackend::exact ||
         config.deriv_backend == DerivBackend::exact;
}

template <typename Scalar>
PosteriorParts<Scalar> evaluate_posterior(const PotentialFieldT<Scalar>& v,
                                          const DatasetT<Scalar>& data, const GridT<Scalar>& grid,
                                          const PhysicsParamsT<Scalar>& params,
                                          const PriorModelT<Scalar>& prior,
                                          const ReconstructionConfigT<Scalar>& config,
                                          const std::vector<ClassicalPathT<Scalar>>* warm) {
  if (v.values.size() != grid.n_x) throw DomainError("posterior: potential does not match grid");
  PosteriorParts<Scalar> parts;
  parts.mesh_paths.resize(grid.n_x);
  parts.mesh_fluct.resize(grid.n_x);

  switch (config.likelihood_backend) {
    case LikelihoodBackend::classical: {
      auto rho = classical_density(v, grid, params);
      parts.rho_norm = std::move(rho.values);
      const Scalar vmin = v.values.minCoeff();
      parts.normalizer =
          quadrature(((v.values.array() - vmin) * (-params.beta)).exp().matrix().eval(), grid);
      break;
    }
    case LikelihoodBackend::semiclassical: {
      MeshPotentialT<Scalar> pot(v, grid);
      auto state =
          semiclassical_partition(pot, grid, params, config.path_config, config.threads, warm);
      parts.rho_norm = state.diag.values / state.partition;
      parts.normalizer = state.partition;
      parts.mesh_paths = std::move(state.paths);
      parts.mesh_fluct = std::move(state.fluct);
      parts.diagnostics += state.diagnostics;
      parts.diagnostics.clamped_evaluations += pot.clamp_count();
      break;
    }
    case LikelihoodBackend::exact: {
      parts.spec = eigendecompose(hamiltonian_matrix(v, grid, params), grid);
      const auto thermal = boltzmann_diagonal(*parts.spec, params.beta);
      parts.normalizer = quadrature(thermal.rho_diag, grid);
      if (!(parts.normalizer > Scalar(0)))
        throw NumericalError("posterior: non-positive partition function");
      parts.rho_norm = thermal.rho_diag.values / parts.normalizer;
      break;
    }
  }

  if (needs_spectrum(config) && !parts.spec)
    parts.spec = eigendecompose(hamiltonian_matrix(v, grid, params), grid);

  // Paths at data nodes (semiclassical likelihood already solved the full mesh).
  if (needs_paths(config) && config.likelihood_backend != LikelihoodBackend::semiclassical) {
    MeshPotentialT<Scalar> pot(v, grid);
    for (Index ni : data.nodes) {
      if (parts.mesh_paths[ni].q.size() == grid.n_tau + 1) continue;
      std::optional<VectorX<Scalar>> init;
      if (warm && (*warm)[ni].q.size() == grid.n_tau + 1) init = (*warm)[ni].q;
      parts.mesh_paths[ni] = solve_path(pot, grid, params, grid.node(ni), config.path_config, init);
      if (!parts.mesh_paths[ni].converged) ++parts.diagnostics.failed_paths;
      parts.mesh_fluct[ni] =
          fluctuation_determinant(pot, parts.mesh_paths[ni], params.mass, grid.eps, params.hbar);
    }
    parts.diagnostics.clamped_evaluations += pot.clamp_count();
  }

  parts.likelihood_term = Scalar(0);
  for (Index i = 0; i < data.size(); ++i) {
    const Scalar rho_i = parts.rho_norm[data.nodes[i]];
    if (!(rho_i > Scalar(0))) {
      std::ostringstream msg;
      msg << "posterior: backend density vanished at datum " << i << " (x = "
          << data.positions[i] << ")";
      throw NumericalError(msg.str());
    }
    parts.likelihood_term -= std::log(rho_i);
  }
  parts.prior_term = Scalar(0.5) * prior.gamma * prior_energy(v, prior);
  parts.energy = parts.likelihood_term + parts.prior_term;
  return parts;
}

/// delta E / delta v as a mesh density (finite differences divide by h*dx).
template <typename Scalar>
MeshFunctionT<Scalar> assemble_residual(const PotentialFieldT<Scalar>& v,
                                        PosteriorParts<Scalar>& parts,
                                        const DatasetT<Scalar>& data, const GridT<Scalar>& grid,
                                        const PhysicsParamsT<Scalar>& params,
                                        const PriorModelT<Scalar>& prior,
                                        const ReconstructionConfigT<Scalar>& config) {
  const Index n = grid.n_x;
  const Scalar beta = params.beta;
  VectorX<Scalar> r = VectorX<Scalar>::Zero(n);

  if (needs_spectrum(config) && !parts.drho)
    parts.drho = drho_diag_dv_matrix(*parts.spec, beta);

  // Per-datum logarithmic-derivative terms.
  std::map<Index, VectorX<Scalar>> approach2_cache;
  MeshPotentialT<Scalar> pot(v, grid);
  for (Index i = 0; i < data.size(); ++i) {
    const Index ni = data.nodes[i];
    const auto& path = parts.mesh_paths[ni];
    const bool have_path = path.q.size() == grid.n_tau + 1 && path.converged;
    if (config.deriv_backend != DerivBackend::exact && !have_path) {
      ++parts.diagnostics.failed_paths;
      continue;  // non-convergent paths are excluded and counted
    }
    switch (config.deriv_backend) {
      case DerivBackend::approach1:
        r -= log_deriv_approach1(path, grid, params).values;
        break;
      case DerivBackend::approach2: {
        auto it = approach2_cache.find(ni);
        if (it == approach2_cache.end()) {
          VectorX<Scalar> value;
          try {
            auto fluct = parts.mesh_fluct[ni];
            attach_green_diagonal(fluct, fluctuation_green_function(path, pot, grid, params));
            value = log_deriv_approach2(path, fluct, grid, params).values;
          } catch (const NumericalError&) {
            ++parts.diagnostics.derivative_fallbacks;
            value = log_deriv_approach1(path, grid, params).values;
          }
          it = approach2_cache.emplace(ni, std::move(value)).first;
        }
        r -= it->second;
        break;
      }
      case DerivBackend::approach3: {
        const VectorX<Scalar> fallback = log_deriv_approach1(path, grid, params).values;
        for (Index j = 0; j < n; ++j) {
          Scalar value;
          try {
            value = log_deriv_approach3(pot, grid, params, grid.node(ni), j, config.path_config);
          } catch (const NumericalError&) {
            ++parts.diagnostics.derivative_fallbacks;
            value = fallback[j];
          }
          r[j] -= value;
        }
        break;
      }
      case DerivBackend::exact: {
        const Scalar rho_i = parts.rho_norm[ni] * parts.normalizer;
        r -= parts.drho->row(ni).transpose() / rho_i;
        break;
      }
    }
  }
  parts.diagnostics.clamped_evaluations += pot.clamp_count();

  // Normalization term from the likelihood backend.
  const Scalar n_data = Scalar(data.size());
  if (data.size() > 0) {
    switch (config.likelihood_backend) {
      case LikelihoodBackend::classical: {
        const auto w = trapezoid_weights(grid);
        r.array() -= n_data * beta * parts.rho_norm.array() * w.array() / grid.dx;
        break;
      }
      case LikelihoodBackend::semiclassical:
        r.array() -= n_data * beta * parts.rho_norm.array();
        break;
      case LikelihoodBackend::exact: {
        // Exact gradient of N ln(quadrature(rho_diag)); equals
        // -N beta rho_norm up to the trapezoid boundary weights.
        const auto w = trapezoid_weights(grid);
        const Scalar q = parts.normalizer;
        r.noalias() += (n_data / q) * (*parts.drho * w);
        break;
      }
    }
  }

  // Prior term gamma K (v - v0), as a density.
  r += prior.gamma * prior_gradient(v, prior).values / grid.dx;

  if (config.freeze_boundary) {
    r[0] = Scalar(0);
    r[n - 1] = Scalar(0);
  }
  return {std::move(r), MeshRole::residual};
}

}  // namespace detail

/// E(V|D) = -sum_i ln(rho_norm(x_i)) + (gamma/2) Gamma[v], with the
/// normalized density taken from the configured likelihood backend.
template <typename Scalar>
Scalar posterior_energy(const PotentialFieldT<Scalar>& v, const DatasetT<Scalar>& data,
                        const GridT<Scalar>& grid, const PhysicsParamsT<Scalar>& params,
                        const PriorModelT<Scalar>& prior,
                        const ReconstructionConfigT<Scalar>& config) {
  return detail::evaluate_posterior(v, data, grid, params, prior, config, nullptr).energy;
}

template <typename Scalar>
MeshFunctionT<Scalar> stationarity_residual(const PotentialFieldT<Scalar>& v,
                                            const DatasetT<Scalar>& data,
                                            const GridT<Scalar>& grid,
                                            const PhysicsParamsT<Scalar>& params,
                                            const PriorModelT<Scalar>& prior,
                                            const ReconstructionConfigT<Scalar>& config) {
  auto parts = detail::evaluate_posterior(v, data, grid, params, prior, config, nullptr);
  return detail::assemble_residual(v, parts, data, grid, params, prior, config);
}

template <typename Scalar>
MeshFunctionT<Scalar> stationarity_residual(const ReconstructionStateT<Scalar>& state,
                                            const DatasetT<Scalar>& data,
                                            const GridT<Scalar>& grid,
                                            const PhysicsParamsT<Scalar>& params,
                                            const PriorModelT<Scalar>& prior,
                                            const ReconstructionConfigT<Scalar>& config) {
  return stationarity_residual(state.v, data, grid, params, prior, config);
}

/// Damped gradient descent on E(V|D) with backtracking; all per-datum paths
/// are re-solved (warm-started) after every accepted step.
template <typename Scalar>
ReconstructionStateT<Scalar> map_descent(const PotentialFieldT<Scalar>& v_init,
                                         const DatasetT<Scalar>& data, const GridT<Scalar>& grid,
                                         const PhysicsParamsT<Scalar>& params,
                                         const PriorModelT<Scalar>& prior,
                                         const ReconstructionConfigT<Scalar>& config) {
  if (!(config.eta_v > Scalar(0))) throw DomainError("map_descent: eta_v must be positive");
  if (!(config.grad_tol > Scalar(0))) throw DomainError("map_descent: grad_tol must be positive");
  if (!v_init.values.allFinite()) throw DomainError("map_descent: v_init must be finite");

  ReconstructionStateT<Scalar> state;
  state.v = v_init;
  if (!state.v.reference) state.v.reference = prior.reference;

  auto parts = detail::evaluate_posterior(state.v, data, grid, params, prior, config, nullptr);
  state.energy_trace.push_back(parts.energy);

  bool residual_current = false;
  for (int outer = 0; outer < config.max_outer; ++outer) {
    state.outer_iter = outer;
    auto residual = detail::assemble_residual(state.v, parts, data, grid, params, prior, config);
    const Scalar grad_norm = residual.values.template lpNorm<Eigen::Infinity>();
    state.grad_norm_trace.push_back(grad_norm);
    state.residual = residual;
    residual_current = true;
    if (grad_norm <= config.grad_tol) {
      state.converged = true;
      break;
    }

    Scalar step = config.eta_v;
    bool accepted = false;
    for (int bt = 0; bt <= config.max_backtracks; ++bt) {
      PotentialFieldT<Scalar> trial = state.v;
      trial.values -= step * residual.values;
      try {
        auto trial_parts = detail::evaluate_posterior(trial, data, grid, params, prior, config,
                                                      &parts.mesh_paths);
        if (trial_parts.energy < parts.energy) {
          state.diagnostics += parts.diagnostics;
          state.v = std::move(trial);
          parts = std::move(trial_parts);
          state.energy_trace.push_back(parts.energy);
          accepted = true;
          residual_current = false;
          break;
        }
      } catch (const NumericalError&) {
        // treat as an unusable step and shrink
      }
      step *= Scalar(0.5);
    }
    if (!accepted) break;  // every step rejected: stall, converged stays false
  }

  if (!residual_current) {
    auto residual = detail::assemble_residual(state.v, parts, data, grid, params, prior, config);
    const Scalar grad_norm = residual.values.template lpNorm<Eigen::Infinity>();
    state.grad_norm_trace.push_back(grad_norm);
    state.residual = std::move(residual);
    if (grad_norm <= config.grad_tol) state.converged = true;
  }
  state.diagnostics += parts.diagnostics;
  state.rho_norm = {parts.rho_norm, MeshRole::density};

  state.paths.clear();
  state.paths.reserve(data.size());
  for (Index i = 0; i < data.size(); ++i) state.paths.push_back(parts.mesh_paths[data.nodes[i]]);
  return state;
}

template <typename Scalar>
struct ErgodicDiagnosticT {
  Scalar time_avg{0};
  Scalar ensemble_avg{0};
  Scalar prior_term{0};
  Scalar balance() const { return time_avg - ensemble_avg + prior_term; }
};

using ErgodicDiagnostic = ErgodicDiagnosticT<double>;

/// Time average of f along the data paths vs the thermal ensemble average,
/// plus the prior contribution; the three terms balance at a stationary
/// point.  Equals the f-weighted residual mass when the same backends are in
/// effect.
template <typename Scalar>
ErgodicDiagnosticT<Scalar> ergodic_diagnostic(const ReconstructionStateT<Scalar>& state,
                                              const DatasetT<Scalar>& data,
                                              const GridT<Scalar>& grid,
                                              const PhysicsParamsT<Scalar>& params,
                                              const PriorModelT<Scalar>& prior,
                                              const MeshFunctionT<Scalar>& f) {
  if (f.values.size() != grid.n_x) throw DomainError("ergodic_diagnostic: size mismatch");
  if (data.size() == 0) throw DomainError("ergodic_diagnostic: needs data");
  ErgodicDiagnosticT<Scalar> out;
  const Scalar norm = Scalar(data.size()) * params.beta * params.hbar;
  for (const auto& path : state.paths) {
    const auto h = occupation_histogram(path, grid);
    out.time_avg += h.values.dot(f.values) / norm;
  }
  out.ensemble_avg = quadrature((state.rho_norm.values.array() * f.values.array()).matrix().eval(),
                                grid);
  out.prior_term = prior.gamma / (Scalar(data.size()) * params.beta) *
                   f.values.dot(prior_gradient(state.v, prior).values);
  return out;
}

}  // namespace potinv
