#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "mflab/state.hpp"

namespace mflab {

/// Initial one-particle density k0 on phase space R^4 = (q, p).
///
/// gaussian_product: q ~ N(0, s_q^2 I), p ~ N(0, s_p^2 I), independent.
/// uniform_disk_maxwellian: q uniform on the disk of radius s_q,
///                          p ~ N(0, s_p^2 I), independent.
struct DensityModel {
  enum class Kind { gaussian_product, uniform_disk_maxwellian };
  Kind kind = Kind::gaussian_product;
  double position_scale = 1.0;
  double velocity_scale = 1.0;

  /// Throws DomainError unless both scales are finite and positive.
  void validate() const;
  friend bool operator==(const DensityModel&, const DensityModel&) = default;
};

std::string to_string(DensityModel::Kind kind);
DensityModel::Kind density_kind_from_string(const std::string& name);

/// n i.i.d. draws from k0. Deterministic in (model, n, seed).
PhaseState sample(const DensityModel& model, std::size_t n, std::uint64_t seed);

/// k0 at x = (q_x, q_y, p_x, p_y).
double eval_density(const DensityModel& model, const std::array<double, 4>& x);

/// Spatial marginal k~0(q).
double eval_spatial_marginal(const DensityModel& model, Vec2 q);

/// Closed-form sup of k~0.
double spatial_marginal_sup(const DensityModel& model);

/// Constants (C, delta) with |grad k0(x)| <= C / (1 + |x|)^(2 + delta) for all x.
struct GradientDecay {
  double constant;
  double delta;
};

/// Gradient of k0 at x (gaussian_product only; the uniform disk has a jump).
std::array<double, 4> density_gradient(const DensityModel& model, const std::array<double, 4>& x);

/// Decay certificate; empty for uniform_disk_maxwellian, whose spatial
/// factor is discontinuous on the disk boundary.
std::optional<GradientDecay> gradient_decay_certificate(const DensityModel& model);

}  // namespace mflab
