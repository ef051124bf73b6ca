#include "mflab/state.hpp"

#include "mflab/errors.hpp"

namespace mflab {

PhaseState::PhaseState(std::vector<Vec2> positions, std::vector<Vec2> momenta)
    : q(std::move(positions)), p(std::move(momenta)) {
  if (q.size() != p.size()) throw ContractViolation("PhaseState: positions/momenta length mismatch");
}

bool PhaseState::valid() const {
  if (q.size() != p.size()) return false;
  for (std::size_t i = 0; i < q.size(); ++i)
    if (!is_finite(q[i]) || !is_finite(p[i])) return false;
  return true;
}

}  // namespace mflab
