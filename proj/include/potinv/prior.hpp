#pragma once

#include <Eigen/Dense>

#include "potinv/core.hpp"

namespace potinv {

/// Gaussian-process prior: energy Gamma[v] = <v - v0 | K | v - v0> with a
/// symmetric positive semi-definite kernel K and hyperparameter gamma.
template <typename Scalar>
struct PriorModelT {
  Scalar gamma{0};
  MatrixX<Scalar> kernel;
  VectorX<Scalar> reference;
};

using PriorModel = PriorModelT<double>;

/// Negated discrete Laplacian, tridiag(-1, 2, -1)/dx^2 with Dirichlet-style
/// boundary rows.  Annihilates constants on interior rows.
template <typename Scalar>
MatrixX<Scalar> laplacian_kernel(const GridT<Scalar>& grid) {
  const Index n = grid.n_x;
  const Scalar s = Scalar(1) / (grid.dx * grid.dx);
  MatrixX<Scalar> k = MatrixX<Scalar>::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    k(j, j) = Scalar(2) * s;
    if (j > 0) k(j, j - 1) = -s;
    if (j + 1 < n) k(j, j + 1) = -s;
  }
  return k;
}

template <typename Scalar>
PriorModelT<Scalar> make_prior(Scalar gamma, MatrixX<Scalar> kernel, VectorX<Scalar> reference) {
  if (gamma < Scalar(0)) throw DomainError("prior gamma must be nonnegative");
  if (kernel.rows() != kernel.cols()) throw DomainError("prior kernel must be square");
  if (reference.size() != kernel.rows()) throw DomainError("prior reference size mismatch");
  const Scalar scale = std::max(Scalar(1), kernel.cwiseAbs().maxCoeff());
  if ((kernel - kernel.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-12) * scale)
    throw DomainError("prior kernel must be symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> es(kernel, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < Scalar(-1e-10) * scale)
    throw DomainError("prior kernel must be positive semi-definite");
  return PriorModelT<Scalar>{gamma, std::move(kernel), std::move(reference)};
}

template <typename Scalar>
PriorModelT<Scalar> make_smoothness_prior(Scalar gamma, const GridT<Scalar>& grid,
                                          std::optional<VectorX<Scalar>> reference = {}) {
  VectorX<Scalar> ref =
      reference ? std::move(*reference) : VectorX<Scalar>::Zero(grid.n_x).eval();
  return make_prior(gamma, laplacian_kernel(grid), std::move(ref));
}

/// Gamma[v] as the plain quadratic form; no quadrature weights, gamma absorbs
/// the scale.
template <typename Scalar>
Scalar prior_energy(const PotentialFieldT<Scalar>& v, const PriorModelT<Scalar>& prior) {
  if (v.values.size() != prior.kernel.rows()) throw DomainError("prior_energy: size mismatch");
  const VectorX<Scalar> d = v.values - prior.reference;
  return d.dot(prior.kernel * d);
}

/// K (v - v0); equals half the gradient of prior_energy.
template <typename Scalar>
MeshFunctionT<Scalar> prior_gradient(const PotentialFieldT<Scalar>& v,
                                     const PriorModelT<Scalar>& prior) {
  if (v.values.size() != prior.kernel.rows()) throw DomainError("prior_gradient: size mismatch");
  return {prior.kernel * (v.values - prior.reference), MeshRole::derivative};
}

}  // namespace potinv
