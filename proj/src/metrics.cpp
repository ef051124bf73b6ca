#include "mflab/metrics.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <numbers>

#include "mflab/errors.hpp"
#include "mflab/parallel.hpp"
#include "mflab/rng.hpp"

namespace mflab {

WilsonInterval wilson_interval(std::size_t k, std::size_t n, double z) {
  if (n == 0) throw ContractViolation("wilson_interval: zero trials");
  if (k > n) throw ContractViolation("wilson_interval: more successes than trials");
  const double nn = static_cast<double>(n), ph = static_cast<double>(k) / nn, z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double centre = (ph + z2 / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(ph * (1.0 - ph) / nn + z2 / (4.0 * nn * nn)) / denom;
  WilsonInterval w{k, n, ph, std::max(0.0, centre - half), std::min(1.0, centre + half)};
  if (k == 0) w.lower = 0.0;
  if (k == n) w.upper = 1.0;
  return w;
}

bool nonincreasing_within_ci(const std::vector<WilsonInterval>& seq) {
  for (std::size_t k = 1; k < seq.size(); ++k)
    if (seq[k].lower > seq[k - 1].upper) return false;
  return true;
}

bool nondecreasing_within_ci(const std::vector<WilsonInterval>& seq) {
  for (std::size_t k = 1; k < seq.size(); ++k)
    if (seq[k].upper < seq[k - 1].lower) return false;
  return true;
}

double phase_deviation(const TrajectoryPair& pair, std::size_t i, std::size_t s) {
  return std::max(norm(pair.psi.q_at(i, s) - pair.phi.q_at(i, s)), norm(pair.psi.p_at(i, s) - pair.phi.p_at(i, s)));
}

DeviationReport deviation_report(const TrajectoryPair& pair, const Partition& part, double sigma) {
  const std::size_t n = pair.size(), steps = pair.times().size();
  if (part.good.size() + part.bad.size() != n)
    throw ContractViolation("deviation_report: partition does not match the trajectory pair");
  DeviationReport r;
  r.times = pair.times();
  r.n = n;
  r.sup.resize(n * steps);
  r.delta_good.assign(steps, 0.0);
  r.delta_bad.assign(steps, 0.0);
  r.system.assign(steps, 0.0);
  std::vector<std::uint8_t> bad(n, 0);
  for (std::size_t i : part.bad) bad.at(i) = 1;
  for (std::size_t i = 0; i < n; ++i) {
    double run = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      run = std::max(run, phase_deviation(pair, i, s));
      r.sup[i * steps + s] = run;
      auto& group = bad[i] ? r.delta_bad : r.delta_good;
      group[s] = std::max(group[s], run);
    }
  }
  for (std::size_t s = 0; s < steps; ++s) r.system[s] = std::max(r.delta_good[s], r.delta_bad[s]);
  r.stop = stopping_time(pair, part, sigma);
  r.threshold = r.stop.threshold;
  r.exceeded = r.stop.trigger.has_value();
  return r;
}

double trapezoid(std::span<const double> times, std::span<const double> values, double t1, double t2) {
  if (times.size() != values.size()) throw ContractViolation("trapezoid: size mismatch");
  double acc = 0.0;
  bool have = false;
  double pt = 0.0, pv = 0.0;
  for (std::size_t s = 0; s < times.size(); ++s) {
    double t = times[s];
    double tol = 1e-9 * std::max(1.0, std::abs(t));
    if (t < t1 - tol || t > t2 + tol) continue;
    if (have) acc += 0.5 * (t - pt) * (values[s] + pv);
    pt = t, pv = values[s], have = true;
  }
  if (!have) throw ContractViolation("trapezoid: window contains no snapshot");
  return acc;
}

double lln_alpha(double sigma) { return 0.4 - 2.0 * sigma; }

double lln_fluctuation(const TrackSet& phi, std::size_t i, double t1, double t2, const ForceParams& p, double sigma,
                       const TrackSet& fresh, const LlnOptions& opt) {
  if (i >= phi.n) throw ContractViolation("lln_fluctuation: target out of range");
  if (phi.n != p.n()) throw ContractViolation("lln_fluctuation: track count differs from params N");
  if (fresh.n == 0) throw ContractViolation("lln_fluctuation: empty Monte Carlo ensemble");
  if (fresh.times != phi.times) throw ContractViolation("lln_fluctuation: ensembles on different grids");
  const double rb = bad_radius(p.n(), sigma), vb = bad_velocity(p.n(), sigma);
  const Track ti = track(phi, i);
  const std::size_t steps = phi.steps();
  std::vector<double> fx(steps), fy(steps);

  auto integral = [&](const Track& other) -> Vec2 {
    if (opt.use_indicator) {
      Encounter e = min_encounter(ti, other);
      if (e.dr <= rb && e.dv <= vb) return {};
    }
    for (std::size_t s = 0; s < steps; ++s) {
      Vec2 d = ti.q[s] - other.q[s];
      Vec2 f = opt.kernel ? opt.kernel(d) : pair_force(d, p);
      fx[s] = f.x, fy[s] = f.y;
    }
    return {trapezoid(phi.times, fx, t1, t2), trapezoid(phi.times, fy, t1, t2)};
  };

  Vec2 emp{};
  for (std::size_t j = 0; j < phi.n; ++j)
    if (j != i) emp += integral(track(phi, j));
  emp = (1.0 / static_cast<double>(phi.n)) * emp;

  Vec2 mc{};
  for (std::size_t y = 0; y < fresh.n; ++y) mc += integral(track(fresh, y));
  const double nn = static_cast<double>(phi.n);
  mc = ((nn - 1.0) / nn / static_cast<double>(fresh.n)) * mc;
  return norm(emp - mc);
}

CollisionThresholds collision_thresholds(std::uint64_t n, double a_k, double b_k, double t1, double t2) {
  if (!(a_k > 0.0) || !(b_k > 0.0) || !std::isfinite(a_k) || !std::isfinite(b_k))
    throw DomainError("collision thresholds: exponents must be positive");
  if (t2 < t1) throw ContractViolation("collision thresholds: t2 < t1");
  const double nn = static_cast<double>(n);
  CollisionThresholds c;
  c.rho = std::pow(nn, -a_k);
  c.nu = std::pow(nn, -b_k);
  double m = std::max(c.rho, c.nu);
  c.envelope = std::pow(nn, -a_k - 3.0 * b_k) * (t2 - t1) + std::pow(nn, -2.0 * a_k) * m * m;
  return c;
}

namespace {

// Sub-interval of [lo, hi] where |d0 + u (d1 - d0)| <= r, if any.
bool within(Vec2 d0, Vec2 d1, double r, double& lo, double& hi) {
  if (std::isinf(r)) return true;
  Vec2 e = d1 - d0;
  double A = norm2(e), B = 2.0 * dot(d0, e), C = norm2(d0) - r * r;
  if (A == 0.0) return C <= 0.0;
  double disc = B * B - 4.0 * A * C;
  if (disc < 0.0) return false;
  double sq = std::sqrt(disc);
  double q = -0.5 * (B + std::copysign(sq, B));
  double u1 = q / A, u2 = q != 0.0 ? C / q : -B / A - u1;
  if (u1 > u2) std::swap(u1, u2);
  lo = std::max(lo, u1);
  hi = std::min(hi, u2);
  return lo <= hi;
}

}  // namespace

bool joint_hit(const Track& a, const Track& b, double rho, double nu, double t1, double t2) {
  if (a.times.size() != b.times.size()) throw ContractViolation("joint_hit: tracks on different grids");
  if (std::isnan(rho) || std::isnan(nu) || rho < 0.0 || nu < 0.0) throw DomainError("joint_hit: bad thresholds");
  const auto& t = a.times;
  if (t.empty() || t2 < t1 || t2 < t.front() - 1e-9 * std::max(1.0, std::abs(t.front())) ||
      t1 > t.back() + 1e-9 * std::max(1.0, std::abs(t.back())))
    throw ContractViolation("joint_hit: window outside the tracks");
  for (std::size_t s = 0; s < t.size(); ++s) {
    double tol = 1e-9 * std::max(1.0, std::abs(t[s]));
    if (t[s] < t1 - tol || t[s] > t2 + tol) continue;
    if (norm(a.q[s] - b.q[s]) <= rho && norm(a.p[s] - b.p[s]) <= nu) return true;
  }
  for (std::size_t s = 0; s + 1 < t.size(); ++s) {
    double h = t[s + 1] - t[s];
    if (!(h > 0.0)) continue;
    double lo = std::max(0.0, (t1 - t[s]) / h), hi = std::min(1.0, (t2 - t[s]) / h);
    if (lo > hi) continue;
    if (!within(a.q[s] - b.q[s], a.q[s + 1] - b.q[s + 1], rho, lo, hi)) continue;
    if (within(a.p[s] - b.p[s], a.p[s + 1] - b.p[s + 1], nu, lo, hi)) return true;
  }
  return false;
}

WilsonInterval collision_frequency(const MeanFieldSeries& series, const DensityModel& model, double rho, double nu,
                                   double t1, double t2, std::size_t trials, std::uint64_t seed, double dt,
                                   std::size_t stride, unsigned threads) {
  if (trials == 0) throw ContractViolation("collision_probability: zero trials");
  if (t1 < 0.0 || t2 < t1) throw ContractViolation("collision_probability: malformed window");
  PhaseState s = sample(model, 2 * trials, seed);
  // the flows run to the end of the window, rounded up to a whole stride
  double span = dt * static_cast<double>(stride);
  double t_end = std::max(span, std::ceil(t2 / span - 1e-9) * span);
  TrackSet tr = lift_flow(s, series, dt, stride, t_end, threads);
  std::vector<std::uint8_t> hit(trials, 0);
  parallel_for(trials, threads, [&](std::size_t k) {
    hit[k] = joint_hit(track(tr, 2 * k), track(tr, 2 * k + 1), rho, nu, t1, t2) ? 1 : 0;
  });
  std::size_t count = 0;
  for (auto h : hit) count += h;
  return wilson_interval(count, trials);
}

CollisionEstimate collision_probability(const MeanFieldSeries& series, const DensityModel& model, std::uint64_t n,
                                        double a_k, double b_k, double t1, double t2, std::size_t trials,
                                        std::uint64_t seed, double dt, std::size_t stride, unsigned threads) {
  CollisionEstimate e;
  e.a_k = a_k;
  e.b_k = b_k;
  e.thresholds = collision_thresholds(n, a_k, b_k, t1, t2);
  e.ci = collision_frequency(series, model, e.thresholds.rho, e.thresholds.nu, t1, t2, trials, seed, dt, stride,
                             threads);
  return e;
}

IntegralBoundReport integral_bound_check(const Track& a, const Track& b, const ForceParams& p) {
  IntegralBoundReport r;
  r.encounter = min_encounter(a, b);
  const std::size_t steps = a.times.size();
  std::vector<double> g(steps), f(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    Vec2 d = a.q[s] - b.q[s];
    g[s] = fluct_bound(d, p);
    f[s] = norm(pair_force(d, p)) / std::abs(p.a());
  }
  const double t0 = a.times.front(), t1 = a.times.back();
  r.integral_g = trapezoid(a.times, g, t0, t1);
  r.integral_f = trapezoid(a.times, f, t0, t1);

  const double dr = r.encounter.dr, dv = r.encounter.dv, c = p.cutoff();
  const double inf = std::numeric_limits<double>::infinity();
  double eg = inf, ef = 1.0 / c;
  if (dr > 0.0) eg = std::min(eg, 1.0 / (dr * dr)), ef = std::min(ef, 1.0 / dr);
  if (dv > 0.0) eg = std::min(eg, 1.0 / (c * dv));
  if (dr > 0.0 && dv > 0.0) {
    eg = std::min(eg, 1.0 / (dr * dv));
    if (dv > std::numbers::e * dr) ef = std::min(ef, std::log(dv / dr) / dv);
  }
  r.envelope_g = eg;
  r.envelope_f = ef;
  r.ratio_g = std::isinf(eg) ? 0.0 : r.integral_g / eg;
  r.ratio_f = r.integral_f / ef;
  return r;
}

ScalingFit fit_scaling(const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 3) throw ContractViolation("fit_scaling: need at least 3 points");
  for (auto [n, v] : points)
    if (!(n > 0.0) || !(v > 0.0) || !std::isfinite(n) || !std::isfinite(v))
      throw ContractViolation("fit_scaling: N and values must be positive and finite");
  ScalingFit fit;
  fit.points = points;
  const double k = static_cast<double>(points.size());
  double mx = 0, my = 0;
  for (auto [n, v] : points) mx += std::log(n), my += std::log(v);
  mx /= k, my /= k;
  double sxx = 0, sxy = 0, syy = 0;
  for (auto [n, v] : points) {
    double dx = std::log(n) - mx, dy = std::log(v) - my;
    sxx += dx * dx, sxy += dx * dy, syy += dy * dy;
  }
  if (sxx == 0.0) throw ContractViolation("fit_scaling: all N equal");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double sse = 0;
  for (auto [n, v] : points) {
    double e = std::log(v) - (fit.intercept + fit.slope * std::log(n));
    sse += e * e;
  }
  fit.r_squared = syy > 0.0 ? std::clamp(1.0 - sse / syy, 0.0, 1.0) : 1.0;
  fit.slope_stderr = std::sqrt(sse / (k - 2.0) / sxx);
  boost::math::students_t dist(k - 2.0);
  fit.slope_ci95 = boost::math::quantile(boost::math::complement(dist, 0.025)) * fit.slope_stderr;
  return fit;
}

std::vector<BadSetPoint> bad_set_frequency(const SeriesProvider& series, const DensityModel& model, double sigma,
                                           std::size_t trials, const std::vector<std::uint64_t>& n_grid,
                                           std::uint64_t seed, double dt, double t_end, std::size_t stride,
                                           const BadRadii& radii, unsigned threads) {
  if (trials == 0) throw ContractViolation("bad_set_frequency: zero trials");
  std::vector<BadSetPoint> out;
  for (std::uint64_t n : n_grid) {
    const MeanFieldSeries& s = series(n);
    const double rb = radii.r.value_or(bad_radius(n, sigma)), vb = radii.v.value_or(bad_velocity(n, sigma));
    BadSetPoint pt;
    pt.n = n;
    std::vector<std::optional<std::size_t>> counts(trials);
    parallel_for(trials, 1, [&](std::size_t t) {
      try {
        auto st = sample(model, n, derive_seed(seed, {n, t, 0xBAD5E7}));
        auto phi = lift_flow(st, s, dt, stride, t_end, threads);
        counts[t] = partition_with_radii(phi, rb, vb, threads).bad.size();
      } catch (const std::runtime_error&) {
        counts[t].reset();
      }
    });
    std::size_t nonempty = 0, done = 0;
    double total = 0;
    for (auto& c : counts) {
      if (!c) {
        ++pt.failed;
        continue;
      }
      ++done;
      pt.counts.push_back(*c);
      total += static_cast<double>(*c);
      if (*c > 0) ++nonempty;
    }
    if (done == 0) throw std::runtime_error("bad_set_frequency: every trial failed at N = " + std::to_string(n));
    pt.ci = wilson_interval(nonempty, done);
    pt.mean_bad = total / static_cast<double>(done);
    out.push_back(std::move(pt));
  }
  return out;
}

std::vector<PhiPoint> phi_convergence(const DensityModel& model, double a, double beta, std::uint64_t m,
                                      const GridSpec& grid, double dt, double t_end, std::size_t probes,
                                      std::uint64_t seed, const std::vector<std::uint64_t>& n_grid,
                                      unsigned threads) {
  if (probes == 0) throw ContractViolation("phi_convergence: need at least one probe");
  PhaseState start = sample(model, probes, derive_seed(seed, {0x9B0BE5}));
  auto inf_series = evolve_reference(model, ForceParams(a, beta, 1), m, dt, t_end, grid, seed, KernelKind::coulomb,
                                     threads);
  TrackSet ref = lift_flow(start, inf_series, dt, 1, t_end, threads);
  std::vector<PhiPoint> out;
  for (std::uint64_t n : n_grid) {
    auto s = evolve_reference(model, ForceParams(a, beta, n), m, dt, t_end, grid, seed, KernelKind::cutoff, threads);
    TrackSet tr = lift_flow(start, s, dt, 1, t_end, threads);
    double worst = 0.0;
    for (std::size_t k = 0; k < tr.q.size(); ++k) worst = std::max(worst, norm(tr.q[k] - ref.q[k]));
    out.push_back({n, worst});
  }
  return out;
}

}  // namespace mflab
