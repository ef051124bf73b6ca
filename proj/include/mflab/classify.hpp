#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mflab/forces.hpp"
#include "mflab/meanfield.hpp"

namespace mflab {

struct TrajectoryPair;

/// One particle's track inside a TrackSet (contiguous, particle-major).
struct Track {
  std::span<const double> times;
  std::span<const Vec2> q;
  std::span<const Vec2> p;
};

Track track(const TrackSet& set, std::size_t i);

/// Closed bounds r <= dr <= R, v <= dv <= V on the minimal encounter inside
/// the window [t1, t2]. An infinite t2 means "to the end of the grid".
struct CollisionClassSpec {
  double r = 0.0;
  double R = std::numeric_limits<double>::infinity();
  double v = 0.0;
  double V = std::numeric_limits<double>::infinity();
  double t1 = 0.0;
  double t2 = std::numeric_limits<double>::infinity();
  void validate() const;
};

struct Encounter {
  double t_min = 0.0;
  double dr = 0.0;
  double dv = 0.0;
  std::size_t snapshot = 0;
  friend bool operator==(const Encounter&, const Encounter&) = default;
};

/// Snapshot of minimal spatial distance in [t1, t2]; earliest on ties.
/// Throws ContractViolation if the grids differ or the window holds no
/// snapshot.
Encounter min_encounter(const Track& a, const Track& b, double t1 = 0.0,
                        double t2 = std::numeric_limits<double>::infinity());

/// Sub-snapshot estimate: the squared distance through the discrete minimum
/// and its two neighbours is fitted by a parabola (exact for straight-line
/// relative motion on a uniform grid). Momenta are interpolated linearly.
Encounter refine_encounter(const Track& a, const Track& b, const Encounter& e);

bool in_class(const Track& a, const Track& b, const CollisionClassSpec& spec);

struct Witness {
  std::size_t partner = 0;
  Encounter encounter;
  friend bool operator==(const Witness&, const Witness&) = default;
};

/// bad[i] pairs with witness[i]; the witness is the lowest-index partner.
struct Partition {
  std::vector<std::size_t> good;
  std::vector<std::size_t> bad;
  std::vector<Witness> witness;
  double r_bad = 0.0;
  double v_bad = 0.0;
  bool is_bad(std::size_t i) const;
  friend bool operator==(const Partition&, const Partition&) = default;
};

/// Radii of the bad class: 4 N^{-3/5-sigma} in space, N^{-3/5-sigma} in velocity.
double bad_radius(std::uint64_t n, double sigma);
double bad_velocity(std::uint64_t n, double sigma);

/// Good/bad split from mean-field tracks. A per-snapshot cell list proposes
/// the pairs that ever come within r_bad; those are then classified exactly.
Partition partition_good_bad(const TrackSet& phi, const ForceParams& p, double sigma, unsigned threads = 1);

/// Same thresholds, every pair checked. Reference for the accelerated pass.
Partition partition_good_bad_bruteforce(const TrackSet& phi, const ForceParams& p, double sigma,
                                        unsigned threads = 1);

/// Same thresholds with explicit radii (0 or infinity allowed).
Partition partition_with_radii(const TrackSet& phi, double r_bad, double v_bad, unsigned threads = 1);

enum class CoverFamily { i, ii, iii, iv, v, vi, vii };

struct CoverClass {
  CoverFamily family;
  int k = -1;  // spatial band, -1 if none
  int l = -1;  // velocity band, -1 if none
  double r_lo, r_hi, v_lo, v_hi;
  std::string id() const;
  bool contains(double dr, double dv) const;
};

/// The seven-family cover of (dr, dv) >= 0 built on base radii (r, v) and
/// band ratio N^eta. Band counts depend on ln(1/r)/(eta ln N), not on N
/// itself, when r and v are powers of N.
std::vector<CoverClass> cover_family(std::uint64_t n, double eta, double r_base, double v_base);

struct CoverEntry {
  std::size_t partner;
  std::size_t cls;  // index into classes
  Encounter encounter;
};

struct CoverHistogram {
  std::size_t target = 0;
  std::vector<CoverClass> classes;
  std::vector<std::size_t> counts;
  std::vector<CoverEntry> entries;
  std::size_t partners = 0;
  /// Partners that fell in no class; zero whenever the family covers.
  std::size_t uncovered = 0;
};

/// Classifies every partner of `target` over the whole run, with N = phi.n.
CoverHistogram cover_histogram(const TrackSet& phi, std::size_t target, double eta, double r_base,
                               double v_base);

struct StoppingTime {
  double tau = 0.0;
  std::size_t snapshot = 0;  // last compliant snapshot
  std::optional<std::size_t> trigger;
  double threshold = 0.0;
};

/// Last snapshot up to which every particle's phase deviation
/// max(|dq|, |dp|) stays <= threshold. If snapshot 0 already violates it,
/// tau is the first time and the trigger is set.
StoppingTime stopping_time(const TrajectoryPair& pair, double threshold);

/// Threshold N^{-2/5+2 sigma}, shared by good and bad particles.
StoppingTime stopping_time(const TrajectoryPair& pair, const Partition& part, double sigma);

double stopping_threshold(std::uint64_t n, double sigma);

/// Columns particle,class_id,partner,t_min,dr,dv. Good particles have an
/// empty partner and encounter.
void write_partition_csv(const std::string& path, const Partition& part, std::size_t n);
void write_cover_csv(const std::string& path, const CoverHistogram& hist);

}  // namespace mflab
