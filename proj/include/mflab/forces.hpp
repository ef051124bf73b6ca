#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mflab/vec2.hpp"

namespace mflab {

struct PhaseState;

/// Coupling a, cut-off exponent beta and particle count N of the regularised
/// 2D Coulomb kernel. The cut-off radius is N^-beta; inside it the force is
/// the linear profile a*N^(2 beta)*q, outside it is a*q/|q|^2. With the sign
/// convention used throughout (force on j sums f(q_j - q_i)) a > 0 is
/// repulsive.
class ForceParams {
 public:
  /// Throws DomainError unless 0 < beta <= 2, n >= 1, a != 0 and all finite.
  ForceParams(double a, double beta, std::uint64_t n);

  double a() const { return a_; }
  double beta() const { return beta_; }
  std::uint64_t n() const { return n_; }

  /// N^-beta.
  double cutoff() const { return cutoff_; }
  /// N^(2 beta); the inner branch slope is a() * n_pow_2beta().
  double n_pow_2beta() const { return n_pow_2beta_; }
  /// Same kernel with a different particle count.
  ForceParams with_n(std::uint64_t n) const { return {a_, beta_, n}; }
  friend bool operator==(const ForceParams&, const ForceParams&) = default;

 private:
  double a_;
  double beta_;
  std::uint64_t n_;
  double cutoff_;
  double n_pow_2beta_;
};

enum class Branch { inner, outer };

struct PairForceSample {
  Vec2 q;
  Vec2 value;
  Branch branch;
};

/// f^N(q). Throws DomainError for non-finite q.
Vec2 pair_force(Vec2 q, const ForceParams& p);
PairForceSample pair_force_sample(Vec2 q, const ForceParams& p);

/// The two branch formulas, evaluated regardless of |q|.
Vec2 pair_force_inner(Vec2 q, const ForceParams& p);
Vec2 pair_force_outer(Vec2 q, const ForceParams& p);

/// Un-cut Coulomb force a*q/|q|^2, with the value 0 at q = 0.
Vec2 coulomb_force(Vec2 q, double a);

/// g^N(q): 2 N^(2 beta) for |q| <= 2 N^-beta, 8/|q|^2 beyond. Scalar.
double fluct_bound(Vec2 q, const ForceParams& p);

/// Potential U with f^N = -grad U. Outside the cut-off U = -a ln|q|; inside
/// the quadratic continuation matching value and slope at |q| = N^-beta.
double pair_potential(Vec2 q, const ForceParams& p);

/// Force evaluation strategy for total_force.
struct ForceMethod {
  enum class Kind { naive, tree };
  Kind kind = Kind::naive;
  /// Barnes-Hut opening angle, in (0, 1).
  double theta = 0.5;
  /// Order of the complex multipole expansion used for accepted cells.
  int order = 16;

  static ForceMethod naive() { return {}; }
  static ForceMethod tree(double theta, int order = 16) { return {Kind::tree, theta, order}; }
};

/// Upper bound on the relative truncation error of one accepted tree cell:
/// r^(p+1)/(1-r) with r = theta/sqrt(2), relative to the magnitude of that
/// cell's exact far-field contribution (count/distance).
double tree_error_bound(double theta, int order);

/// (F^N)_j = (1/N) sum_{i != j} f^N(q_j - q_i). `threads` = 0 picks the
/// hardware default. The naive path sums sources in index order for each
/// target, so its result does not depend on the thread count.
/// Throws ContractViolation when positions.size() != p.n().
std::vector<Vec2> total_force(std::span<const Vec2> positions, const ForceParams& p,
                              ForceMethod method = ForceMethod::naive(), unsigned threads = 1);
std::vector<Vec2> total_force(const PhaseState& state, const ForceParams& p,
                              ForceMethod method = ForceMethod::naive(), unsigned threads = 1);

/// (G^N)_j = (1/N) sum_{i != j} g^N(q_j - q_i).
std::vector<double> total_fluct(std::span<const Vec2> positions, const ForceParams& p,
                                unsigned threads = 1);
std::vector<double> total_fluct(const PhaseState& state, const ForceParams& p,
                                unsigned threads = 1);

}  // namespace mflab
