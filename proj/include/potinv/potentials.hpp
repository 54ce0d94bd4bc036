#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "potinv/core.hpp"

namespace potinv {

/// Attractive well with smoothed (Fermi-function) walls centered at x = 15,
/// the likelihood-comparison test potential.
template <typename Scalar>
Scalar fermi_well(Scalar x) {
  return Scalar(-1) / (Scalar(1) + std::exp(Scalar(0.5) * (std::abs(x - Scalar(15)) - Scalar(4))));
}

/// Windowed cosine double well: (cos(2 pi (x-15)/10) - 1)/4 on [5, 25],
/// zero elsewhere; minima of depth -1/2 at x = 10 and x = 20.
template <typename Scalar>
Scalar cosine_well(Scalar x) {
  if (x < Scalar(5) || x > Scalar(25)) return Scalar(0);
  return Scalar(0.25) *
         (std::cos(Scalar(2) * std::numbers::pi_v<Scalar> / Scalar(10) * (x - Scalar(15))) -
          Scalar(1));
}

/// Mesh-sampled builtin potential.  Names: "fermi_well", "cosine_well",
/// "zero", "harmonic(omega)" (stiffness omega^2, centered mid-mesh).
template <typename Scalar>
PotentialFieldT<Scalar> builtin_potential(const std::string& name, const GridT<Scalar>& grid) {
  if (name == "fermi_well") return sample_on_mesh(grid, [](Scalar x) { return fermi_well(x); });
  if (name == "cosine_well") return sample_on_mesh(grid, [](Scalar x) { return cosine_well(x); });
  if (name == "zero") return sample_on_mesh(grid, [](Scalar) { return Scalar(0); });
  if (name.rfind("harmonic", 0) == 0) {
    Scalar omega = Scalar(1);
    const auto open = name.find('(');
    if (open != std::string::npos) {
      const auto close = name.find(')', open);
      if (close == std::string::npos) throw DomainError("builtin_potential: malformed " + name);
      try {
        omega = Scalar(std::stod(name.substr(open + 1, close - open - 1)));
      } catch (const std::exception&) {
        throw DomainError("builtin_potential: malformed " + name);
      }
    } else if (name != "harmonic") {
      throw DomainError("builtin_potential: unknown potential " + name);
    }
    const Scalar center = (grid.x_min + grid.x_max) / Scalar(2);
    return sample_on_mesh(grid, [omega, center](Scalar x) {
      return Scalar(0.5) * omega * omega * (x - center) * (x - center);
    });
  }
  throw DomainError("builtin_potential: unknown potential " + name);
}

}  // namespace potinv
