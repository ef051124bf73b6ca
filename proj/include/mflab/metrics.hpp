#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mflab/classify.hpp"
#include "mflab/density.hpp"
#include "mflab/dynamics.hpp"
#include "mflab/forces.hpp"
#include "mflab/meanfield.hpp"

namespace mflab {

/// Binomial proportion with a Wilson score interval (two-sided 95% by default).
struct WilsonInterval {
  std::size_t successes = 0;
  std::size_t trials = 0;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

inline constexpr double kZ95 = 1.959963984540054;
inline constexpr double kZ95OneSided = 1.6448536269514722;

WilsonInterval wilson_interval(std::size_t successes, std::size_t trials, double z = kZ95);

/// Each consecutive pair of intervals overlaps or decreases: an increase
/// is tolerated only while it stays inside both intervals' reach.
bool nonincreasing_within_ci(const std::vector<WilsonInterval>& seq);
bool nondecreasing_within_ci(const std::vector<WilsonInterval>& seq);

/// Per-particle phase deviation max(|dq|, |dp|) between psi and phi.
double phase_deviation(const TrajectoryPair& pair, std::size_t i, std::size_t s);

struct DeviationReport {
  std::vector<double> times;
  std::size_t n = 0;
  std::vector<double> sup;  // sup over [0, t_s] per particle, sup[i * steps + s]
  std::vector<double> delta_good;
  std::vector<double> delta_bad;
  std::vector<double> system;  // max(delta_good, delta_bad)
  StoppingTime stop;
  double threshold = 0.0;
  /// Some particle crossed the threshold (tau then is the last compliant
  /// snapshot, strictly before T when there are at least two snapshots).
  bool exceeded = false;
  double max() const { return system.empty() ? 0.0 : system.back(); }
};

DeviationReport deviation_report(const TrajectoryPair& pair, const Partition& part, double sigma);

/// Kernel replacing f^N in lln_fluctuation; nullptr means f^N itself.
using PairKernel = std::function<Vec2(Vec2)>;

/// |(1/N) sum_{j != i} I_j - (N-1)/N * mean_y I_y| where I is the trapezoid
/// integral over [t1, t2] of kernel(q_i - q_j), kept only when the pair is
/// outside the bad class (the good-partner indicator). `fresh` holds the
/// Monte Carlo trajectories y on the same snapshot grid.
struct LlnOptions {
  bool use_indicator = true;
  PairKernel kernel = nullptr;
};
double lln_fluctuation(const TrackSet& phi, std::size_t i, double t1, double t2, const ForceParams& p, double sigma,
                       const TrackSet& fresh, const LlnOptions& opt = {});

/// Exponent alpha = 2/5 - 2 sigma of the rescaled exceedance N^alpha * x >= 1.
double lln_alpha(double sigma);

/// Thresholds (rho, nu) = (N^-a_k, N^-b_k) with the analytic envelope
/// N^{-a-3b} (t2 - t1) + N^{-2a} max(N^-a, N^-b)^2.
struct CollisionThresholds {
  double rho = 0.0;
  double nu = 0.0;
  double envelope = 0.0;
};
CollisionThresholds collision_thresholds(std::uint64_t n, double a_k, double b_k, double t1, double t2);

/// Whether |dq| <= rho and |dp| <= nu hold together somewhere in [t1, t2],
/// treating motion between snapshots as linear.
bool joint_hit(const Track& a, const Track& b, double rho, double nu, double t1, double t2);

struct CollisionEstimate {
  WilsonInterval ci;
  CollisionThresholds thresholds;
  double a_k = 0.0, b_k = 0.0;
};

/// Fraction of independent pairs (X, Y) ~ k0 x k0 whose mean-field tracks
/// (through `series`, step dt, snapshot stride) hit within [t1, t2].
/// Thresholds given directly; any nonnegative value, infinity included.
WilsonInterval collision_frequency(const MeanFieldSeries& series, const DensityModel& model, double rho, double nu,
                                   double t1, double t2, std::size_t trials, std::uint64_t seed, double dt,
                                   std::size_t stride = 1, unsigned threads = 1);

/// Same with thresholds (N^-a_k, N^-b_k); a_k, b_k > 0.
CollisionEstimate collision_probability(const MeanFieldSeries& series, const DensityModel& model,
                                        std::uint64_t n, double a_k, double b_k, double t1, double t2,
                                        std::size_t trials, std::uint64_t seed, double dt, std::size_t stride = 1,
                                        unsigned threads = 1);

/// Time integrals of |g^N| and |f^N|/|a| along a pair, against the minimum
/// envelopes min(1/dr^2, 1/(c dv), 1/(dr dv)) and
/// min(1/dr, 1/c, ln(dv/dr)/dv). Entries with a zero denominator are
/// dropped; the log entry is used only when dv > e dr.
struct IntegralBoundReport {
  Encounter encounter;
  double integral_g = 0.0, integral_f = 0.0;
  double envelope_g = 0.0, envelope_f = 0.0;
  double ratio_g = 0.0, ratio_f = 0.0;
};
IntegralBoundReport integral_bound_check(const Track& a, const Track& b, const ForceParams& p);

/// Trapezoid rule on an arbitrary grid restricted to [t1, t2] snapshots.
double trapezoid(std::span<const double> times, std::span<const double> values, double t1, double t2);

struct ScalingFit {
  std::vector<std::pair<double, double>> points;
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  double slope_stderr = 0.0;
  /// Half-width of the 95% t-interval of the slope.
  double slope_ci95 = 0.0;
};
ScalingFit fit_scaling(const std::vector<std::pair<double, double>>& points);

/// Radii override for the degenerate checks; unset means the nominal ones.
struct BadRadii {
  std::optional<double> r;
  std::optional<double> v;
};

using SeriesProvider = std::function<const MeanFieldSeries&(std::uint64_t n)>;

struct BadSetPoint {
  std::uint64_t n = 0;
  WilsonInterval ci;  // over the trials that completed
  double mean_bad = 0.0;
  std::vector<std::size_t> counts;
  std::size_t failed = 0;
};

/// For every N: trials ensembles of N samples lifted through the series for
/// that N, frequency of a nonempty bad set.
std::vector<BadSetPoint> bad_set_frequency(const SeriesProvider& series, const DensityModel& model, double sigma,
                                           std::size_t trials, const std::vector<std::uint64_t>& n_grid,
                                           std::uint64_t seed, double dt, double t_end, std::size_t stride,
                                           const BadRadii& radii = {}, unsigned threads = 1);

struct PhiPoint {
  std::uint64_t n = 0;
  double deviation = 0.0;
};

/// sup over probes and snapshots of |phi^{1,N} - phi^{1,inf}|, with every N
/// sharing the reference seed (paired comparison) and the probe set.
std::vector<PhiPoint> phi_convergence(const DensityModel& model, double a, double beta, std::uint64_t m,
                                      const GridSpec& grid, double dt, double t_end, std::size_t probes,
                                      std::uint64_t seed, const std::vector<std::uint64_t>& n_grid,
                                      unsigned threads = 1);

}  // namespace mflab
