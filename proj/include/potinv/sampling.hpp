#pragma once

#include <cstdint>
#include <random>

#include "potinv/core.hpp"
#include "potinv/reconstruction.hpp"
#include "potinv/spectral.hpp"

namespace potinv {

/// Uniform doubles on [0, 1) from std::mt19937_64 seeded directly, mapping
/// the top 53 bits.  Both the generator and the mapping are fully specified,
/// so identical seeds give identical streams on every platform.
class SeededUniform {
 public:
  explicit SeededUniform(std::uint64_t seed) : rng_(seed) {}

  double next() {
    return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
  }

 private:
  std::mt19937_64 rng_;
};

/// Discrete inverse-CDF sampling of mesh nodes with probabilities
/// proportional to the density times the quadrature weights.
template <typename Scalar>
std::vector<Index> sample_nodes(const VectorX<Scalar>& density, const GridT<Scalar>& grid,
                                Index count, std::uint64_t seed) {
  const Index n = grid.n_x;
  if (density.size() != n) throw DomainError("sample_nodes: density does not match grid");
  const auto w = trapezoid_weights(grid);
  VectorX<Scalar> cdf(n);
  Scalar acc = Scalar(0);
  for (Index j = 0; j < n; ++j) {
    const Scalar p = density[j] * w[j];
    if (p < Scalar(0)) throw DomainError("sample_nodes: negative density");
    acc += p;
    cdf[j] = acc;
  }
  if (!(acc > Scalar(0))) throw DomainError("sample_nodes: density has no mass");
  cdf /= acc;
  cdf[n - 1] = Scalar(1);  // guard against rounding in the last bin

  SeededUniform rng(seed);
  std::vector<Index> nodes(count);
  for (Index i = 0; i < count; ++i) {
    const Scalar u = Scalar(rng.next());
    Index lo = 0, hi = n - 1;
    while (lo < hi) {
      const Index mid = (lo + hi) / 2;
      if (cdf[mid] > u)
        hi = mid;
      else
        lo = mid + 1;
    }
    nodes[i] = lo;
  }
  return nodes;
}

/// N i.i.d. node draws from the exact normalized thermal density of the
/// truth potential; identical (seed, config) give identical datasets.
template <typename Scalar>
DatasetT<Scalar> sample_dataset(const PotentialFieldT<Scalar>& truth, const GridT<Scalar>& grid,
                                const PhysicsParamsT<Scalar>& params, Index count,
                                std::uint64_t seed) {
  if (count < 1) throw DomainError("sample_dataset: need at least one draw");
  const auto spec = eigendecompose(hamiltonian_matrix(truth, grid, params), grid);
  const auto density = thermal_density(spec, params.beta);
  const auto nodes = sample_nodes(density.values, grid, count, seed);
  DatasetT<Scalar> data;
  data.positions.resize(count);
  data.nodes = nodes;
  data.seed = seed;
  for (Index i = 0; i < count; ++i) data.positions[i] = grid.node(nodes[i]);
  return data;
}

}  // namespace potinv
