#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mflab/density.hpp"
#include "mflab/forces.hpp"
#include "mflab/state.hpp"

namespace mflab {

/// How the interaction kernel is turned into grid weights.
///   point: K[d] = f(d h), the kernel at the node offset; self offset 0.
///   tent:  K[d] = f averaged against the bilinear hat of one cell width,
///          so cut-offs below the cell size still change the weights.
enum class KernelSampling { point, tent };

/// Which kernel a field solver convolves with.
///   cutoff:  the regularised f^N of the given ForceParams.
///   coulomb: a q/|q|^2 without cut-off (the N = infinity kernel).
enum class KernelKind { cutoff, coulomb };

std::string to_string(KernelSampling s);
KernelSampling kernel_sampling_from_string(const std::string& name);

/// Square domain [-L, L]^2 split into G x G cells. Nodes sit at cell
/// centres x_i = -L + (i + 1/2) h with h = 2L/G.
struct GridSpec {
  double half_width = 8.0;
  int cells = 256;
  KernelSampling sampling = KernelSampling::point;

  double cell_size() const { return 2.0 * half_width / cells; }
  double node(int i) const { return -half_width + (i + 0.5) * cell_size(); }
  /// Throws DomainError on nonpositive extent or G < 2.
  void validate() const;
  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

/// Deposited density and the force it generates. Row-major, index iy*G + ix.
struct FieldGrid {
  GridSpec spec;
  std::vector<double> density;  // mass per cell, total <= 1
  std::vector<Vec2> force;
  double leaked = 0.0;          // mass fraction that fell outside the node hull
  Vec2 centroid{};              // centre of the deposited mass

  double mass() const;
  friend bool operator==(const FieldGrid&, const FieldGrid&) = default;
};

/// Cloud-in-cell deposit with equal weights 1/M. Particles whose stencil
/// leaves the node hull lose the outside share, which is reported as leaked.
FieldGrid deposit(std::span<const Vec2> positions, const GridSpec& spec);

/// Fast convolution of a deposited density with a fixed kernel. The kernel
/// image and its transform are built once; solve() is safe to call
/// concurrently.
class FieldSolver {
 public:
  FieldSolver(const GridSpec& spec, const ForceParams& params, KernelKind kind = KernelKind::cutoff);
  ~FieldSolver();
  FieldSolver(const FieldSolver&) = delete;
  FieldSolver& operator=(const FieldSolver&) = delete;

  /// Fills grid.force in place.
  void solve(FieldGrid& grid) const;
  /// Kernel weight for node offset (dx, dy), |dx|, |dy| < G.
  Vec2 weight(int dx, int dy) const;
  /// Warnings such as an unresolved inner branch.
  const std::vector<std::string>& diagnostics() const { return diagnostics_; }
  const GridSpec& spec() const { return spec_; }

 private:
  struct Plan;
  GridSpec spec_;
  std::vector<Vec2> kernel_;  // (2G-1)^2 offsets
  std::unique_ptr<Plan> plan_;
  std::vector<std::string> diagnostics_;
};

/// Direct sum of kernel weights over cells; the oracle for FieldSolver.
Vec2 direct_field(const FieldGrid& grid, const FieldSolver& solver, int ix, int iy);

/// Grid kernel for one offset in units of cells, before the 1/h scale.
/// Exposed for tests.
Vec2 tent_kernel(int dx, int dy, double a, double cutoff_cells);

/// Field snapshots of a reference ensemble at uniform times 0, dt, 2dt, ...
struct MeanFieldSeries {
  GridSpec grid;
  double dt_field = 0.0;
  std::uint64_t ref_count = 0;
  ForceParams params{1.0, 1.0, 1};
  KernelKind kernel = KernelKind::cutoff;
  std::uint64_t seed = 0;
  std::vector<double> times;
  std::vector<FieldGrid> fields;
  /// Mean momentum (1/M) sum p of the reference ensemble per snapshot.
  std::vector<Vec2> momentum;
  std::vector<std::string> diagnostics;

  double end_time() const { return times.empty() ? 0.0 : times.back(); }
  bool operator==(const MeanFieldSeries& o) const;
};

/// Self-consistent particle-in-cell run: M draws from the model move under
/// the field of their own deposit. One snapshot per step, dt_field = dt.
/// Throws FieldBlowUp when any grid force exceeds 1e6.
MeanFieldSeries evolve_reference(const DensityModel& model, const ForceParams& params, std::uint64_t m,
                                 double dt, double t_end, const GridSpec& grid, std::uint64_t seed,
                                 KernelKind kind = KernelKind::cutoff, unsigned threads = 1);

struct FieldSample {
  Vec2 force;
  bool extrapolated;
};

/// Interpolated field: bilinear in space, linear in time. Outside the node
/// hull the snapshot's monopole a*mass*(x-c)/|x-c|^2 is used and flagged.
FieldSample interpolate(const MeanFieldSeries& series, Vec2 x, double t);
FieldSample interpolate(const FieldGrid& grid, double a, Vec2 x);

/// Particle-major trajectories sampled on a shared time grid.
struct TrackSet {
  std::vector<double> times;
  std::size_t n = 0;
  std::vector<Vec2> q;  // q[i * steps() + s]
  std::vector<Vec2> p;
  std::vector<std::uint8_t> extrapolated;  // per particle

  TrackSet() = default;
  TrackSet(std::size_t particles, std::vector<double> snapshot_times);
  std::size_t steps() const { return times.size(); }
  Vec2& q_at(std::size_t i, std::size_t s) { return q[i * times.size() + s]; }
  Vec2& p_at(std::size_t i, std::size_t s) { return p[i * times.size() + s]; }
  Vec2 q_at(std::size_t i, std::size_t s) const { return q[i * times.size() + s]; }
  Vec2 p_at(std::size_t i, std::size_t s) const { return p[i * times.size() + s]; }
  /// Snapshot s as a PhaseState.
  PhaseState snapshot(std::size_t s) const;
  bool any_extrapolated() const;
  friend bool operator==(const TrackSet&, const TrackSet&) = default;
};

/// Snapshot times k*stride*dt for k = 0..steps/stride, steps = round(t_end/dt).
std::vector<double> snapshot_times(double dt, double t_end, std::size_t stride);

/// One particle through the series field with velocity Verlet, recorded
/// every `stride` steps up to t_end (default: end of the series).
TrackSet flow_phi(Vec2 q0, Vec2 p0, const MeanFieldSeries& series, double dt, std::size_t stride = 1,
                  double t_end = -1.0);

/// flow_phi applied to every particle of a state independently.
TrackSet lift_flow(const PhaseState& state0, const MeanFieldSeries& series, double dt,
                   std::size_t stride = 1, double t_end = -1.0, unsigned threads = 1);

/// flow_phi against a reference run that uses the un-cut Coulomb kernel.
TrackSet flow_phi_infinity(Vec2 q0, Vec2 p0, const DensityModel& model, double a, std::uint64_t m,
                           double dt, double t_end, const GridSpec& grid, std::uint64_t seed,
                           std::size_t stride = 1);

enum class FieldPrecision { f32, f64 };

/// Binary container: header (extent, G, sampling, dt_field, M, params,
/// kernel, seed, precision) then row-major grids per snapshot, closed by a
/// 64-bit content hash. Throws CorruptContainer on any mismatch.
void write_series(const std::string& path, const MeanFieldSeries& series,
                  FieldPrecision precision = FieldPrecision::f32);
MeanFieldSeries read_series(const std::string& path);

/// Rounds every stored field value through float, matching what a f32
/// container round trip returns.
void quantize_f32(MeanFieldSeries& series);

}  // namespace mflab
