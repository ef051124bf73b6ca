#pragma once

#include <cstddef>
#include <vector>

#include "mflab/vec2.hpp"

namespace mflab {

/// Positions and momenta of N particles in the plane (unit mass, so momentum
/// and velocity coincide).
struct PhaseState {
  std::vector<Vec2> q;
  std::vector<Vec2> p;

  PhaseState() = default;
  explicit PhaseState(std::size_t n) : q(n), p(n) {}
  PhaseState(std::vector<Vec2> positions, std::vector<Vec2> momenta);

  std::size_t size() const { return q.size(); }
  /// Lengths agree and every entry is finite.
  bool valid() const;
  friend bool operator==(const PhaseState&, const PhaseState&) = default;
};

/// Phase-space distance of one particle: max(|dq|, |dp|).
inline double phase_distance(Vec2 q1, Vec2 p1, Vec2 q2, Vec2 p2) {
  double dq = norm(q1 - q2);
  double dp = norm(p1 - p2);
  return dq > dp ? dq : dp;
}

}  // namespace mflab
