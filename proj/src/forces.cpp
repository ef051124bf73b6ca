#include "mflab/forces.hpp"

#include <cmath>
#include <string>

#include "mflab/errors.hpp"
#include "mflab/parallel.hpp"
#include "mflab/state.hpp"
#include "quadtree.hpp"

namespace mflab {

ForceParams::ForceParams(double a, double beta, std::uint64_t n) : a_(a), beta_(beta), n_(n) {
  if (!std::isfinite(a) || a == 0.0) throw DomainError("ForceParams: coupling a must be finite and nonzero");
  if (!std::isfinite(beta) || !(beta > 0.0) || beta > 2.0)
    throw DomainError("ForceParams: beta must lie in (0, 2]");
  if (n < 1) throw DomainError("ForceParams: n must be >= 1");
  cutoff_ = std::pow(static_cast<double>(n), -beta);
  n_pow_2beta_ = std::pow(static_cast<double>(n), 2.0 * beta);
  if (!(cutoff_ > 0.0) || !std::isfinite(n_pow_2beta_))
    throw DomainError("ForceParams: cut-off radius underflows for n = " + std::to_string(n));
}

Vec2 pair_force_inner(Vec2 q, const ForceParams& p) { return (p.a() * p.n_pow_2beta()) * q; }

Vec2 pair_force_outer(Vec2 q, const ForceParams& p) { return (p.a() / norm2(q)) * q; }

Vec2 pair_force(Vec2 q, const ForceParams& p) { return pair_force_sample(q, p).value; }

PairForceSample pair_force_sample(Vec2 q, const ForceParams& p) {
  if (!is_finite(q)) throw DomainError("pair_force: non-finite separation");
  double c = p.cutoff();
  if (norm2(q) <= c * c) return {q, pair_force_inner(q, p), Branch::inner};
  return {q, pair_force_outer(q, p), Branch::outer};
}

Vec2 coulomb_force(Vec2 q, double a) {
  double r2 = norm2(q);
  if (r2 == 0.0) return {};
  return (a / r2) * q;
}

double fluct_bound(Vec2 q, const ForceParams& p) {
  if (!is_finite(q)) throw DomainError("fluct_bound: non-finite separation");
  double r2 = norm2(q);
  double c2 = 4.0 * p.cutoff() * p.cutoff();
  if (r2 <= c2) return 2.0 * p.n_pow_2beta();
  return 8.0 / r2;
}

double pair_potential(Vec2 q, const ForceParams& p) {
  if (!is_finite(q)) throw DomainError("pair_potential: non-finite separation");
  double c = p.cutoff();
  double r2 = norm2(q);
  if (r2 <= c * c) return -0.5 * p.a() * p.n_pow_2beta() * (r2 - c * c) - p.a() * std::log(c);
  return -0.5 * p.a() * std::log(r2);
}

double tree_error_bound(double theta, int order) {
  double r = theta / std::sqrt(2.0);
  return std::pow(r, order + 1) / (1.0 - r);
}

namespace {

void check_size(std::size_t got, const ForceParams& p, const char* who) {
  if (got != p.n())
    throw ContractViolation(std::string(who) + ": state has " + std::to_string(got) +
                            " particles, params expect " + std::to_string(p.n()));
}

// f(d)/a, written so that the branch select does not block vectorisation.
inline Vec2 scaled_pair(Vec2 d, double cut2, double slope) {
  double r2 = norm2(d);
  double s = r2 <= cut2 ? slope : 1.0 / r2;
  return s * d;
}

}  // namespace

std::vector<Vec2> total_force(std::span<const Vec2> positions, const ForceParams& p,
                              ForceMethod method, unsigned threads) {
  check_size(positions.size(), p, "total_force");
  const std::size_t n = positions.size();
  std::vector<Vec2> out(n);
  const double cut2 = p.cutoff() * p.cutoff();
  const double slope = p.n_pow_2beta();
  const double scale = p.a() / static_cast<double>(n);

  if (method.kind == ForceMethod::Kind::naive) {
    // each pair is evaluated once and applied to both ends (the kernel is
    // odd). Rows go to a fixed number of groups, each with its own
    // accumulator, summed in group order: the result does not depend on the
    // thread count. Group g holds rows i and n-1-i for i = g mod kGroups so
    // the triangle is shared out evenly.
    constexpr std::size_t kGroups = 16;
    std::vector<double> xs(n), ys(n);
    for (std::size_t i = 0; i < n; ++i) xs[i] = positions[i].x, ys[i] = positions[i].y;
    std::vector<double> acc(2 * kGroups * n, 0.0);
    const std::size_t half = (n + 1) / 2;
    parallel_for(kGroups, threads, [&](std::size_t g) {
      double* ax = acc.data() + 2 * g * n;
      double* ay = ax + n;
      auto row = [&](std::size_t i) {
        const double xi = xs[i], yi = ys[i];
        double fx = 0.0, fy = 0.0;
#pragma omp simd reduction(+ : fx, fy)
        for (std::size_t j = i + 1; j < n; ++j) {
          double dx = xi - xs[j], dy = yi - ys[j];
          double r2 = dx * dx + dy * dy;
          double s = r2 <= cut2 ? slope : 1.0 / r2;
          fx += s * dx;
          fy += s * dy;
          ax[j] -= s * dx;
          ay[j] -= s * dy;
        }
        ax[i] += fx;
        ay[i] += fy;
      };
      for (std::size_t i = g; i < half; i += kGroups) {
        row(i);
        if (n - 1 - i != i) row(n - 1 - i);
      }
    });
    for (std::size_t j = 0; j < n; ++j) {
      double fx = 0.0, fy = 0.0;
      for (std::size_t g = 0; g < kGroups; ++g) fx += acc[2 * g * n + j], fy += acc[(2 * g + 1) * n + j];
      out[j] = {scale * fx, scale * fy};
    }
    return out;
  }

  if (!(method.theta > 0.0 && method.theta < 1.0))
    throw ContractViolation("total_force: tree opening angle must lie in (0, 1)");
  if (method.order < 1) throw ContractViolation("total_force: multipole order must be >= 1");
  detail::QuadTree tree(positions, method.order);
  const double exact_radius = 2.0 * p.cutoff();
  parallel_for(n, threads, [&](std::size_t j) {
    Vec2 f = tree.evaluate(positions[j], j, method.theta, exact_radius,
                           [&](Vec2 d) { return scaled_pair(d, cut2, slope); });
    out[j] = scale * f;
  });
  return out;
}

std::vector<Vec2> total_force(const PhaseState& state, const ForceParams& p, ForceMethod method,
                              unsigned threads) {
  return total_force(std::span<const Vec2>(state.q), p, method, threads);
}

std::vector<double> total_fluct(std::span<const Vec2> positions, const ForceParams& p,
                                unsigned threads) {
  check_size(positions.size(), p, "total_fluct");
  const std::size_t n = positions.size();
  std::vector<double> out(n);
  const double c2 = 4.0 * p.cutoff() * p.cutoff();
  const double inner = 2.0 * p.n_pow_2beta();
  const double inv_n = 1.0 / static_cast<double>(n);
  parallel_for(n, threads, [&](std::size_t j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i == j) continue;
      double r2 = norm2(positions[j] - positions[i]);
      acc += r2 <= c2 ? inner : 8.0 / r2;
    }
    out[j] = inv_n * acc;
  });
  return out;
}

std::vector<double> total_fluct(const PhaseState& state, const ForceParams& p, unsigned threads) {
  return total_fluct(std::span<const Vec2>(state.q), p, threads);
}

}  // namespace mflab
