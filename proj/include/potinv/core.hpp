#pragma once

#include <atomic>
#include <cmath>
#include <optional>
#include <utility>

#include "potinv/types.hpp"

namespace potinv {

template <typename Scalar>
struct PhysicsParamsT {
  Scalar mass{1};
  Scalar beta{1};
  Scalar hbar{1};
};

using PhysicsParams = PhysicsParamsT<double>;

template <typename Scalar>
void validate(const PhysicsParamsT<Scalar>& p) {
  if (!(p.mass > Scalar(0))) throw DomainError("mass must be positive");
  if (!(p.beta > Scalar(0))) throw DomainError("beta must be positive");
  if (!(p.hbar > Scalar(0))) throw DomainError("hbar must be positive");
}

/// Joint discretization: n_x equidistant position nodes on [x_min, x_max]
/// and n_tau imaginary-time steps of length eps = beta*hbar/n_tau.
template <typename Scalar>
struct GridT {
  Index n_x{0};
  Scalar x_min{0};
  Scalar x_max{0};
  Scalar dx{0};
  Index n_tau{0};
  Scalar eps{0};

  Scalar length() const { return x_max - x_min; }
  Scalar node(Index j) const { return x_min + dx * Scalar(j); }
  Scalar time_node(Index k) const { return eps * Scalar(k); }

  Index nearest_node(Scalar x) const {
    const auto j = static_cast<Index>(std::llround(static_cast<double>((x - x_min) / dx)));
    return j < 0 ? 0 : (j >= n_x ? n_x - 1 : j);
  }
};

using Grid = GridT<double>;

template <typename Scalar>
GridT<Scalar> build_grid(Index n_x, Scalar x_min, Scalar x_max, Index n_tau,
                         const PhysicsParamsT<Scalar>& params) {
  validate(params);
  if (n_x < 3) throw DomainError("n_x must be at least 3");
  if (n_tau < 2) throw DomainError("n_tau must be at least 2");
  if (!(x_min < x_max)) throw DomainError("require x_min < x_max");
  GridT<Scalar> g;
  g.n_x = n_x;
  g.x_min = x_min;
  g.x_max = x_max;
  g.dx = (x_max - x_min) / Scalar(n_x - 1);
  g.n_tau = n_tau;
  g.eps = params.beta * params.hbar / Scalar(n_tau);
  return g;
}

/// The unknown of the inverse problem: potential samples at the mesh nodes,
/// with an optional reference potential.
template <typename Scalar>
struct PotentialFieldT {
  VectorX<Scalar> values;
  std::optional<VectorX<Scalar>> reference;
};

using PotentialField = PotentialFieldT<double>;

enum class MeshRole { density, residual, derivative };

template <typename Scalar>
struct MeshFunctionT {
  VectorX<Scalar> values;
  MeshRole role{MeshRole::density};
};

using MeshFunction = MeshFunctionT<double>;

// ---------------------------------------------------------------------------
// Interpolation.  The potential is piecewise linear between mesh nodes; the
// derivative at a node is the centered difference so that symmetric
// potentials get a symmetric force.  Evaluations outside the mesh clamp to
// the boundary value and set *clamped.

namespace detail {
constexpr double kNodeSnapTol = 1e-9;  // in units of dx
}

template <typename Scalar, typename Derived>
Scalar interp_potential(const Eigen::MatrixBase<Derived>& values, const GridT<Scalar>& grid,
                        Scalar x, bool* clamped = nullptr) {
  if (x <= grid.x_min) {
    if (clamped && x < grid.x_min) *clamped = true;
    return values[0];
  }
  if (x >= grid.x_max) {
    if (clamped && x > grid.x_max) *clamped = true;
    return values[grid.n_x - 1];
  }
  const Scalar u = (x - grid.x_min) / grid.dx;
  Index j = static_cast<Index>(std::floor(static_cast<double>(u)));
  if (j > grid.n_x - 2) j = grid.n_x - 2;
  const Scalar t = u - Scalar(j);
  return (Scalar(1) - t) * values[j] + t * values[j + 1];
}

template <typename Scalar>
Scalar interp_potential(const PotentialFieldT<Scalar>& v, const GridT<Scalar>& grid, Scalar x,
                        bool* clamped = nullptr) {
  return interp_potential(v.values, grid, x, clamped);
}

template <typename Scalar, typename Derived>
Scalar interp_potential_deriv(const Eigen::MatrixBase<Derived>& values, const GridT<Scalar>& grid,
                              Scalar x, bool* clamped = nullptr) {
  const Index n = grid.n_x;
  if (x < grid.x_min || x > grid.x_max) {
    if (clamped) *clamped = true;
    x = x < grid.x_min ? grid.x_min : grid.x_max;
  }
  const Scalar u = (x - grid.x_min) / grid.dx;
  const auto jn = static_cast<Index>(std::llround(static_cast<double>(u)));
  if (std::abs(u - Scalar(jn)) < Scalar(detail::kNodeSnapTol)) {
    if (jn <= 0) return (values[1] - values[0]) / grid.dx;
    if (jn >= n - 1) return (values[n - 1] - values[n - 2]) / grid.dx;
    return (values[jn + 1] - values[jn - 1]) / (Scalar(2) * grid.dx);
  }
  Index j = static_cast<Index>(std::floor(static_cast<double>(u)));
  if (j > n - 2) j = n - 2;
  return (values[j + 1] - values[j]) / grid.dx;
}

template <typename Scalar>
Scalar interp_potential_deriv(const PotentialFieldT<Scalar>& v, const GridT<Scalar>& grid,
                              Scalar x, bool* clamped = nullptr) {
  return interp_potential_deriv(v.values, grid, x, clamped);
}

/// Node-wise second differences, constant-extrapolated at the ends.
/// Exact for quadratic potentials.
template <typename Scalar, typename Derived>
VectorX<Scalar> mesh_second_deriv_nodes(const Eigen::MatrixBase<Derived>& values,
                                        const GridT<Scalar>& grid) {
  const Index n = grid.n_x;
  VectorX<Scalar> d2(n);
  const Scalar inv = Scalar(1) / (grid.dx * grid.dx);
  for (Index j = 1; j + 1 < n; ++j) d2[j] = (values[j + 1] - Scalar(2) * values[j] + values[j - 1]) * inv;
  d2[0] = d2[1];
  d2[n - 1] = d2[n - 2];
  return d2;
}

// ---------------------------------------------------------------------------
// Quadrature: trapezoidal rule on the mesh, exact for affine functions.

template <typename Scalar>
VectorX<Scalar> trapezoid_weights(const GridT<Scalar>& grid) {
  VectorX<Scalar> w = VectorX<Scalar>::Constant(grid.n_x, grid.dx);
  w[0] *= Scalar(0.5);
  w[grid.n_x - 1] *= Scalar(0.5);
  return w;
}

template <typename Scalar, typename Derived>
Scalar quadrature(const Eigen::MatrixBase<Derived>& f, const GridT<Scalar>& grid) {
  if (f.size() != grid.n_x) throw DomainError("quadrature: size mismatch with grid");
  return grid.dx * (f.sum() - Scalar(0.5) * (f[0] + f[grid.n_x - 1]));
}

template <typename Scalar>
Scalar quadrature(const MeshFunctionT<Scalar>& f, const GridT<Scalar>& grid) {
  return quadrature(f.values, grid);
}

// ---------------------------------------------------------------------------
// Potential evaluators.  Path solvers are generic over anything providing
// value/deriv/second_deriv; the mesh-backed view carries a clamp counter.

template <typename P, typename Scalar>
concept PotentialEvaluator = requires(const P& p, Scalar x) {
  { p.value(x) } -> std::convertible_to<Scalar>;
  { p.deriv(x) } -> std::convertible_to<Scalar>;
  { p.second_deriv(x) } -> std::convertible_to<Scalar>;
};

template <typename Scalar>
class MeshPotentialT {
 public:
  MeshPotentialT(const PotentialFieldT<Scalar>& field, const GridT<Scalar>& grid)
      : values_(field.values), grid_(grid), d2_(mesh_second_deriv_nodes(field.values, grid)) {
    if (values_.size() != grid.n_x) throw DomainError("potential does not match grid");
  }

  MeshPotentialT(const MeshPotentialT& o)
      : values_(o.values_), grid_(o.grid_), d2_(o.d2_), clamp_count_(o.clamp_count()) {}
  MeshPotentialT& operator=(const MeshPotentialT& o) {
    values_ = o.values_;
    grid_ = o.grid_;
    d2_ = o.d2_;
    clamp_count_.store(o.clamp_count());
    return *this;
  }

  Scalar value(Scalar x) const {
    bool c = false;
    const Scalar r = interp_potential(values_, grid_, x, &c);
    if (c) clamp_count_.fetch_add(1, std::memory_order_relaxed);
    return r;
  }
  Scalar deriv(Scalar x) const {
    bool c = false;
    const Scalar r = interp_potential_deriv(values_, grid_, x, &c);
    if (c) clamp_count_.fetch_add(1, std::memory_order_relaxed);
    return r;
  }
  Scalar second_deriv(Scalar x) const {
    bool c = false;
    const Scalar r = interp_potential(d2_, grid_, x, &c);
    if (c) clamp_count_.fetch_add(1, std::memory_order_relaxed);
    return r;
  }

  long clamp_count() const { return clamp_count_.load(std::memory_order_relaxed); }
  const GridT<Scalar>& grid() const { return grid_; }
  const VectorX<Scalar>& node_values() const { return values_; }

 private:
  VectorX<Scalar> values_;
  GridT<Scalar> grid_;
  VectorX<Scalar> d2_;
  mutable std::atomic<long> clamp_count_{0};
};

using MeshPotential = MeshPotentialT<double>;

template <typename Scalar, typename V, typename DV, typename D2V>
struct AnalyticPotentialT {
  V v;
  DV dv;
  D2V d2v;
  Scalar value(Scalar x) const { return v(x); }
  Scalar deriv(Scalar x) const { return dv(x); }
  Scalar second_deriv(Scalar x) const { return d2v(x); }
};

template <typename Scalar = double, typename V, typename DV, typename D2V>
auto make_analytic_potential(V v, DV dv, D2V d2v) {
  return AnalyticPotentialT<Scalar, V, DV, D2V>{std::move(v), std::move(dv), std::move(d2v)};
}

/// Sample an analytic potential onto the mesh.
template <typename Scalar, typename F>
PotentialFieldT<Scalar> sample_on_mesh(const GridT<Scalar>& grid, F&& f) {
  PotentialFieldT<Scalar> field;
  field.values.resize(grid.n_x);
  for (Index j = 0; j < grid.n_x; ++j) field.values[j] = f(grid.node(j));
  return field;
}

}  // namespace potinv
