#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mflab/density.hpp"
#include "mflab/forces.hpp"
#include "mflab/meanfield.hpp"
#include "mflab/state.hpp"

namespace mflab {

/// min(1e-2, 0.1 * N^-beta / (4 * velocity_scale)): resolves transit of
/// the cut-off disk at the reference speed.
double default_time_step(const ForceParams& p, const DensityModel& model);

/// One velocity-Verlet step of the N-particle flow. dt may be negative
/// (used to check time reversibility); it must be finite and nonzero.
/// Throws IntegratorBlowUp naming the first particle with a non-finite entry.
PhaseState step_newton(const PhaseState& state, const ForceParams& p, double dt,
                       ForceMethod method = ForceMethod::naive(), unsigned threads = 1);

/// Verlet stepping that keeps the end-of-step force for the next step, so
/// each step costs one force evaluation.
class NewtonIntegrator {
 public:
  NewtonIntegrator(PhaseState state, const ForceParams& p, ForceMethod method = ForceMethod::naive(),
                   unsigned threads = 1);
  void step(double dt);
  const PhaseState& state() const { return state_; }

 private:
  PhaseState state_;
  ForceParams params_;
  ForceMethod method_;
  unsigned threads_;
  std::vector<Vec2> force_;
};

/// sum |p_i|^2/2 + (1/2N) sum_{i != j} U(q_i - q_j).
double system_energy(const PhaseState& state, const ForceParams& p);

/// Total momentum sum p_i.
Vec2 total_momentum(const PhaseState& state);

struct RunMeta {
  std::uint64_t seed = 0;
  DensityModel model{};
  std::uint64_t ref_count = 0;
  friend bool operator==(const RunMeta&, const RunMeta&) = default;
};

/// Microscopic flow psi and mean-field flow phi from the same initial data,
/// on one snapshot grid.
struct TrajectoryPair {
  ForceParams params{1.0, 1.0, 1};
  double dt = 0.0;
  std::size_t stride = 1;
  RunMeta meta;
  TrackSet psi;
  TrackSet phi;

  const std::vector<double>& times() const { return psi.times; }
  std::size_t size() const { return psi.n; }
  friend bool operator==(const TrajectoryPair&, const TrajectoryPair&) = default;
};

/// Evolves psi with Verlet under total_force and phi with lift_flow against
/// the series; snapshots every `stride` steps over [0, t_end].
TrajectoryPair run_pair(const PhaseState& state0, const ForceParams& p, const MeanFieldSeries& series, double dt,
                        double t_end, std::size_t stride, ForceMethod method = ForceMethod::naive(),
                        unsigned threads = 1);

/// Binary container in the series family (f64 payload, hashed).
void write_trajectory(const std::string& path, const TrajectoryPair& pair);
TrajectoryPair read_trajectory(const std::string& path);

/// One row per snapshot: time, max and mean phase deviation, max position
/// and momentum deviation, psi energy.
void write_trajectory_csv(const std::string& path, const TrajectoryPair& pair);

}  // namespace mflab
