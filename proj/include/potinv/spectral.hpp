#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "potinv/core.hpp"

namespace potinv {

/// Eigenpairs of the mesh Hamiltonian.  Columns of `states` are
/// mesh-orthonormal: sum_x phi_a(x) phi_g(x) dx = delta_ag.
template <typename Scalar>
struct SpectralDecompositionT {
  VectorX<Scalar> energies;  // ascending
  MatrixX<Scalar> states;
  GridT<Scalar> grid;
};

using SpectralDecomposition = SpectralDecompositionT<double>;

template <typename Scalar>
struct ThermalStateT {
  MeshFunctionT<Scalar> rho_diag;  // <x|exp(-beta H)|x>
  Scalar partition{0};             // sum_a exp(-beta E_a)
  Scalar beta{0};
};

using ThermalState = ThermalStateT<double>;

/// H = T + diag(v) with the three-point kinetic stencil and Dirichlet
/// (box) boundaries: the wavefunction vanishes one step outside the mesh.
template <typename Scalar>
MatrixX<Scalar> hamiltonian_matrix(const PotentialFieldT<Scalar>& v, const GridT<Scalar>& grid,
                                   const PhysicsParamsT<Scalar>& params) {
  if (v.values.size() != grid.n_x) throw DomainError("hamiltonian_matrix: size mismatch");
  const Index n = grid.n_x;
  const Scalar t = params.hbar * params.hbar / (Scalar(2) * params.mass * grid.dx * grid.dx);
  MatrixX<Scalar> h = MatrixX<Scalar>::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    h(j, j) = Scalar(2) * t + v.values[j];
    if (j > 0) h(j, j - 1) = -t;
    if (j + 1 < n) h(j, j + 1) = -t;
  }
  return h;
}

template <typename Scalar>
SpectralDecompositionT<Scalar> eigendecompose(const MatrixX<Scalar>& h, const GridT<Scalar>& grid) {
  if (h.rows() != grid.n_x || h.cols() != grid.n_x)
    throw DomainError("eigendecompose: matrix does not match grid");
  const Scalar scale = std::max(Scalar(1), h.cwiseAbs().maxCoeff());
  if ((h - h.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-12) * scale)
    throw DomainError("eigendecompose: matrix must be symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> es(h);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  SpectralDecompositionT<Scalar> spec;
  spec.energies = es.eigenvalues();
  spec.states = es.eigenvectors() / std::sqrt(grid.dx);
  spec.grid = grid;
  return spec;
}

namespace detail {

/// exp(-beta(E_a - E_min)) for all levels; shifting keeps large beta finite.
template <typename Scalar>
VectorX<Scalar> shifted_boltzmann_weights(const SpectralDecompositionT<Scalar>& spec,
                                          Scalar beta) {
  const Scalar e0 = spec.energies.minCoeff();
  return ((spec.energies.array() - e0) * (-beta)).exp().matrix();
}

}  // namespace detail

template <typename Scalar>
ThermalStateT<Scalar> boltzmann_diagonal(const SpectralDecompositionT<Scalar>& spec, Scalar beta) {
  if (!(beta >= Scalar(0))) throw DomainError("boltzmann_diagonal: beta must be nonnegative");
  const Index n = spec.grid.n_x;
  ThermalStateT<Scalar> st;
  st.beta = beta;
  const VectorX<Scalar> w = (spec.energies.array() * (-beta)).exp().matrix();
  st.partition = w.sum();
  st.rho_diag.values = (spec.states.array().square().matrix() * w).eval();
  st.rho_diag.role = MeshRole::density;
  return st;
}

/// Normalized thermal density rho_diag / quadrature(rho_diag), computed with
/// shifted weights so that arbitrarily large beta stays finite.
template <typename Scalar>
MeshFunctionT<Scalar> thermal_density(const SpectralDecompositionT<Scalar>& spec, Scalar beta) {
  const VectorX<Scalar> w = detail::shifted_boltzmann_weights(spec, beta);
  VectorX<Scalar> rho = (spec.states.array().square().matrix() * w).eval();
  const Scalar q = quadrature(rho, spec.grid);
  if (!(q > Scalar(0))) throw NumericalError("thermal_density: non-positive normalization");
  return {rho / q, MeshRole::density};
}

/// Functional derivative of Z: dZ/dv(x) = -beta <x|exp(-beta H)|x>.
/// Densities follow the mesh measure: a node perturbation h represents a
/// bump of weight h*dx, so finite-difference checks divide by h*dx.
template <typename Scalar>
MeshFunctionT<Scalar> dz_dv(const SpectralDecompositionT<Scalar>& spec, Scalar beta) {
  const auto st = boltzmann_diagonal(spec, beta);
  return {(-beta) * st.rho_diag.values, MeshRole::derivative};
}

namespace detail {

// Threshold below which an energy gap counts as degenerate; the quotient
// weight is replaced by its analytic limit there.
template <typename Scalar>
bool nearly_degenerate(Scalar ea, Scalar eg) {
  return std::abs(ea - eg) < Scalar(1e-9) * std::max(Scalar(1), std::abs(ea));
}

}  // namespace detail

/// d<rho_diag(x_i)>/dv(x'') by the double eigensum: the alpha = gamma term
/// carries -beta exp(-beta E_a), off-diagonal pairs the quotient
/// exp(-beta E_a)/(E_a - E_g), with near-degenerate pairs switched to the
/// analytic limit of the quotient.
template <typename Scalar>
MeshFunctionT<Scalar> drho_diag_dv(const SpectralDecompositionT<Scalar>& spec, Scalar beta,
                                   Index xi_index) {
  const Index n = spec.grid.n_x;
  if (xi_index < 0 || xi_index >= n) throw DomainError("drho_diag_dv: node index out of range");
  const VectorX<Scalar> w = (spec.energies.array() * (-beta)).exp().matrix();
  VectorX<Scalar> out = VectorX<Scalar>::Zero(n);
  for (Index a = 0; a < n; ++a) {
    const Scalar pa = spec.states(xi_index, a);
    out.noalias() += (-beta * w[a] * pa * pa) * spec.states.col(a).cwiseAbs2();
  }
  for (Index a = 0; a < n; ++a) {
    for (Index g = a + 1; g < n; ++g) {
      const Scalar p = spec.states(xi_index, a) * spec.states(xi_index, g);
      Scalar coef;
      if (detail::nearly_degenerate(spec.energies[a], spec.energies[g])) {
        coef = -beta * (w[a] + w[g]) / Scalar(2);
      } else {
        const Scalar gap = spec.energies[a] - spec.energies[g];
        coef = (w[a] - w[g]) / gap;
      }
      out.noalias() += (Scalar(2) * coef * p) * spec.states.col(a).cwiseProduct(spec.states.col(g));
    }
  }
  return {std::move(out), MeshRole::derivative};
}

/// Same quantity through the closed-form beta'-integral:
/// int_0^beta db' exp(-b'(E_g - E_a)) = beta for E_g = E_a, else a
/// difference-of-exponentials quotient.  Must agree with drho_diag_dv.
template <typename Scalar>
MeshFunctionT<Scalar> drho_diag_dv_integrated(const SpectralDecompositionT<Scalar>& spec,
                                              Scalar beta, Index xi_index) {
  const Index n = spec.grid.n_x;
  if (xi_index < 0 || xi_index >= n) throw DomainError("drho_diag_dv: node index out of range");
  const VectorX<Scalar> w = (spec.energies.array() * (-beta)).exp().matrix();
  VectorX<Scalar> out = VectorX<Scalar>::Zero(n);
  for (Index a = 0; a < n; ++a) {
    for (Index g = 0; g < n; ++g) {
      const Scalar gap = spec.energies[g] - spec.energies[a];
      Scalar integral;
      if (detail::nearly_degenerate(spec.energies[a], spec.energies[g])) {
        integral = beta;
      } else {
        integral = -std::expm1(-beta * gap) / gap;
      }
      const Scalar p = spec.states(xi_index, a) * spec.states(xi_index, g);
      out.noalias() +=
          (-w[a] * integral * p) * spec.states.col(a).cwiseProduct(spec.states.col(g));
    }
  }
  return {std::move(out), MeshRole::derivative};
}

/// Full derivative matrix D(l, j) = d rho_diag(x_l) / dv(x_j), symmetric.
/// Used by the exact reconstruction backend; the quotient weights use the
/// numerically stable integrated form.
template <typename Scalar>
MatrixX<Scalar> drho_diag_dv_matrix(const SpectralDecompositionT<Scalar>& spec, Scalar beta) {
  const Index n = spec.grid.n_x;
  const VectorX<Scalar> w = (spec.energies.array() * (-beta)).exp().matrix();
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(n, n);
  VectorX<Scalar> u(n);
  for (Index a = 0; a < n; ++a) {
    u = spec.states.col(a).cwiseAbs2();
    out.noalias() += (-beta * w[a]) * u * u.transpose();
    for (Index g = a + 1; g < n; ++g) {
      Scalar coef;
      if (detail::nearly_degenerate(spec.energies[a], spec.energies[g])) {
        coef = -beta * (w[a] + w[g]) / Scalar(2);
      } else {
        coef = (w[a] - w[g]) / (spec.energies[a] - spec.energies[g]);
      }
      u = spec.states.col(a).cwiseProduct(spec.states.col(g));
      out.noalias() += (Scalar(2) * coef) * u * u.transpose();
    }
  }
  return out;
}

}  // namespace potinv
