#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "doctest.h"
#include "mflab/errors.hpp"
#include "mflab/metrics.hpp"

using namespace mflab;

namespace {

std::vector<double> grid(double t0, double t1, int intervals) {
  std::vector<double> t(intervals + 1);
  for (int k = 0; k <= intervals; ++k) t[k] = t0 + (t1 - t0) * k / intervals;
  return t;
}

TrackSet lines(const std::vector<Vec2>& q0, const std::vector<Vec2>& p, std::vector<double> times) {
  TrackSet ts(q0.size(), std::move(times));
  for (std::size_t i = 0; i < q0.size(); ++i)
    for (std::size_t s = 0; s < ts.steps(); ++s) {
      ts.q_at(i, s) = q0[i] + ts.times[s] * p[i];
      ts.p_at(i, s) = p[i];
    }
  return ts;
}

TrackSet random_lines(std::size_t n, std::uint64_t seed, std::vector<double> times) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vec2> q(n), p(n);
  for (std::size_t i = 0; i < n; ++i) q[i] = {g(rng), g(rng)}, p[i] = {g(rng), g(rng)};
  return lines(q, p, std::move(times));
}

}  // namespace

TEST_CASE("wilson interval") {
  auto w = wilson_interval(5, 10);
  CHECK(w.estimate == 0.5);
  CHECK(w.lower == doctest::Approx(0.2366).epsilon(1e-3));
  CHECK(w.upper == doctest::Approx(0.7634).epsilon(1e-3));
  for (std::size_t n : {10u, 100u, 1000u, 10000u}) {
    auto z = wilson_interval(0, n);
    CHECK(z.estimate == 0.0);
    CHECK(z.lower == 0.0);
    CHECK(z.upper == doctest::Approx(kZ95 * kZ95 / (n + kZ95 * kZ95)));
    // one-sided 95% bound sits under the rule of three
    CHECK(wilson_interval(0, n, kZ95OneSided).upper <= 3.0 / n);
  }
  CHECK(wilson_interval(7, 7).upper == 1.0);
  CHECK_THROWS_AS(wilson_interval(0, 0), ContractViolation);
  CHECK_THROWS_AS(wilson_interval(3, 2), ContractViolation);

  // coverage of the interval on a known proportion
  std::mt19937_64 rng(4);
  std::bernoulli_distribution b(0.07);
  int covered = 0;
  for (int rep = 0; rep < 2000; ++rep) {
    std::size_t k = 0;
    for (int t = 0; t < 200; ++t) k += b(rng);
    auto ci = wilson_interval(k, 200);
    covered += ci.lower <= 0.07 && 0.07 <= ci.upper;
  }
  CHECK(covered / 2000.0 > 0.92);

  std::vector<WilsonInterval> down{wilson_interval(50, 100), wilson_interval(45, 100), wilson_interval(52, 100)};
  CHECK(nonincreasing_within_ci(down));
  std::vector<WilsonInterval> up{wilson_interval(10, 100), wilson_interval(60, 100)};
  CHECK_FALSE(nonincreasing_within_ci(up));
  CHECK(nondecreasing_within_ci(up));
}

TEST_CASE("scaling fit") {
  std::vector<std::pair<double, double>> pts;
  for (double n : {256.0, 512.0, 1024.0, 2048.0, 4096.0}) pts.emplace_back(n, 7.0 * std::pow(n, -0.4));
  auto f = fit_scaling(pts);
  CHECK(std::abs(f.slope + 0.4) <= 1e-12);
  CHECK(f.r_squared == doctest::Approx(1.0));
  CHECK(std::exp(f.intercept) == doctest::Approx(7.0));

  auto flat = fit_scaling({{10, 2.0}, {20, 2.0}, {40, 2.0}});
  CHECK(std::abs(flat.slope) < 1e-14);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 0.1);
  int inside = 0;
  for (int rep = 0; rep < 400; ++rep) {
    std::vector<std::pair<double, double>> q;
    for (double n : {64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0}) q.emplace_back(n, 3.0 * std::pow(n, -0.7) * std::exp(noise(rng)));
    auto g = fit_scaling(q);
    inside += std::abs(g.slope + 0.7) <= g.slope_ci95;
    REQUIRE(g.r_squared >= 0.0);
    REQUIRE(g.r_squared <= 1.0);
  }
  CHECK(inside / 400.0 > 0.9);

  CHECK_THROWS_AS(fit_scaling({{1, 1}, {2, 2}}), ContractViolation);
  CHECK_THROWS_AS(fit_scaling({{1, 1}, {2, 0}, {3, 1}}), ContractViolation);
  CHECK_THROWS_AS(fit_scaling({{1, 1}, {2, -1}, {3, 1}}), ContractViolation);
}

TEST_CASE("trapezoid") {
  auto t = grid(0.0, 1.0, 100);
  std::vector<double> v(t.size());
  for (std::size_t s = 0; s < t.size(); ++s) v[s] = 3.0 * t[s] + 1.0;
  CHECK(trapezoid(t, v, 0.0, 1.0) == doctest::Approx(2.5));
  CHECK(trapezoid(t, v, 0.5, 0.5) == 0.0);
  CHECK(trapezoid(t, v, 0.2, 0.6) == doctest::Approx(0.4 * 1.0 + 1.5 * (0.36 - 0.04)));
  CHECK_THROWS_AS(trapezoid(t, v, 2.0, 3.0), ContractViolation);
}

TEST_CASE("deviation report") {
  ForceParams p(1.0, 1.0, 30);
  auto phi = random_lines(30, 3, grid(0.0, 1.0, 10));
  TrajectoryPair pair;
  pair.params = p;
  pair.phi = phi;
  pair.psi = phi;
  Partition part;
  for (std::size_t i = 0; i < 30; ++i) (i % 4 == 0 ? part.bad : part.good).push_back(i);
  for (std::size_t i = 0; i < part.bad.size(); ++i) part.witness.push_back({0, {}});

  auto zero = deviation_report(pair, part, 0.05);
  CHECK(zero.max() == 0.0);
  CHECK_FALSE(zero.exceeded);
  CHECK(zero.stop.tau == 1.0);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 0.05);
  for (auto& q : pair.psi.q) q += Vec2{g(rng), g(rng)};
  for (auto& v : pair.psi.p) v += Vec2{g(rng), g(rng)};
  auto r = deviation_report(pair, part, 0.05);
  double brute = 0;
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t s = 0; s < 11; ++s)
      brute = std::max(brute, std::max(norm(pair.psi.q_at(i, s) - phi.q_at(i, s)), norm(pair.psi.p_at(i, s) - phi.p_at(i, s))));
  CHECK(r.max() == brute);
  for (std::size_t s = 0; s < 11; ++s) {
    CHECK(r.system[s] == std::max(r.delta_good[s], r.delta_bad[s]));
    if (s > 0) {
      CHECK(r.delta_good[s] >= r.delta_good[s - 1]);
      CHECK(r.delta_bad[s] >= r.delta_bad[s - 1]);
    }
  }
  CHECK(r.threshold == doctest::Approx(std::pow(30.0, -0.3)));
  CHECK(r.exceeded == (r.stop.tau < 1.0));

  auto tight = deviation_report(pair, part, -0.5);  // threshold N^-1.4
  CHECK(tight.exceeded);
  CHECK(tight.stop.tau < 1.0);
}

TEST_CASE("single-particle deviation is the free-vs-field gap") {
  DensityModel m{};
  auto series = evolve_reference(m, ForceParams(1.0, 1.0, 1), 4096, 0.02, 0.4, GridSpec{8.0, 64}, 7);
  PhaseState s0({{0.4, -0.2}}, {{0.3, 0.1}});
  auto pair = run_pair(s0, ForceParams(1.0, 1.0, 1), series, 0.02, 0.4, 2);
  Partition part;
  part.good = {0};
  auto r = deviation_report(pair, part, 0.05);
  double last = std::max(norm(pair.psi.q_at(0, 10) - pair.phi.q_at(0, 10)), norm(pair.psi.p_at(0, 10) - pair.phi.p_at(0, 10)));
  CHECK(r.max() >= last);
  CHECK(r.max() > 0.0);
}

TEST_CASE("lln fluctuation") {
  const std::size_t n = 64;
  ForceParams p(1.0, 1.0, n);
  auto times = grid(0.0, 0.5, 25);
  auto phi = random_lines(n, 11, times);
  const std::size_t target = 5;

  SUBCASE("against its own partners the statistic vanishes") {
    TrackSet others(n - 1, times);
    for (std::size_t j = 0, k = 0; j < n; ++j) {
      if (j == target) continue;
      for (std::size_t s = 0; s < times.size(); ++s) others.q_at(k, s) = phi.q_at(j, s), others.p_at(k, s) = phi.p_at(j, s);
      ++k;
    }
    double v = lln_fluctuation(phi, target, 0.0, 0.5, p, 0.05, others);
    CHECK(v <= 1e-14);
    CHECK(lln_fluctuation(phi, target, 0.0, 0.5, p, 0.05, random_lines(200, 12, times)) > 0.0);
  }

  SUBCASE("constant kernel gives zero") {
    LlnOptions opt;
    opt.use_indicator = false;
    opt.kernel = [](Vec2) { return Vec2{2.0, -1.0}; };
    double v = lln_fluctuation(phi, target, 0.0, 0.5, p, 0.05, random_lines(300, 13, times), opt);
    CHECK(v <= 1e-14);
  }

  SUBCASE("dropping the indicator adds aligned mass") {
    // target left of every partner, one partner riding along inside the bad
    // radius; Monte Carlo samples are far enough to contribute ~nothing
    const std::size_t m = 20;
    ForceParams q(1.0, 1.0, m);
    std::vector<Vec2> pos(m), mom(m, Vec2{0.0, 0.0});
    pos[0] = {-1.0, 0.0};
    pos[1] = {-1.0 + 0.5 * bad_radius(m, 0.05), 0.0};
    for (std::size_t j = 2; j < m; ++j) pos[j] = {0.1 * j, 0.05 * (j % 3)};
    auto tr = lines(pos, mom, times);
    auto far = lines({{1e6, 0.0}}, {{0.0, 0.0}}, times);
    double with = lln_fluctuation(tr, 0, 0.0, 0.5, q, 0.05, far);
    double without = lln_fluctuation(tr, 0, 0.0, 0.5, q, 0.05, far, LlnOptions{false, nullptr});
    CHECK(without > with);
  }

  CHECK(lln_alpha(0.05) == doctest::Approx(0.3));
  CHECK_THROWS_AS(lln_fluctuation(phi, n, 0.0, 0.5, p, 0.05, phi), ContractViolation);
}

TEST_CASE("joint hit between snapshots") {
  // head-on pass at t = 0.5 between snapshots 0.4 and 0.6; momenta differ by 2
  auto ts = lines({{-0.5, 0.0}, {0.5, 0.0}}, {{1.0, 0.0}, {-1.0, 0.0}}, grid(0.0, 1.0, 5));
  Track a = track(ts, 0), b = track(ts, 1);
  CHECK(joint_hit(a, b, 0.01, 2.0, 0.0, 1.0));
  CHECK_FALSE(joint_hit(a, b, 0.01, 1.9, 0.0, 1.0));
  CHECK_FALSE(joint_hit(a, b, 0.01, 2.0, 0.0, 0.45));
  CHECK(joint_hit(a, b, 0.01, 2.0, 0.5, 0.5));  // window on no snapshot but inside a segment
  CHECK(joint_hit(a, b, 0.2, 2.0, 0.4, 0.4));
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(joint_hit(a, b, inf, inf, 0.0, 0.0));
}

TEST_CASE("collision probability") {
  DensityModel m{};
  GridSpec g{8.0, 64};
  auto series = evolve_reference(m, ForceParams(1.0, 1.0, 256), 4096, 0.02, 0.4, g, 2);
  const double inf = std::numeric_limits<double>::infinity();
  auto all = collision_frequency(series, m, inf, inf, 0.0, 0.2, 100, 3, 0.02);
  CHECK(all.estimate == 1.0);
  auto huge = collision_frequency(series, m, 1e3, 1e3, 0.0, 0.2, 100, 3, 0.02);
  CHECK(huge.estimate == 1.0);
  auto none = collision_frequency(series, m, 0.0, 0.0, 0.0, 0.2, 500, 3, 0.02);
  CHECK(none.estimate == 0.0);
  CHECK(wilson_interval(none.successes, none.trials, kZ95OneSided).upper <= 3.0 / 500);

  double prev = -1;
  for (double len : {0.0, 0.1, 0.2}) {
    auto e = collision_probability(series, m, 256, 0.1, 0.1, 0.1, 0.1 + len, 2000, 4, 0.02);
    CHECK(e.ci.estimate >= prev);
    prev = e.ci.estimate;
  }
  CHECK(prev > 0.0);

  auto th = collision_thresholds(1024, 0.3, 0.2, 0.1, 0.3);
  CHECK(th.rho == doctest::Approx(std::pow(1024.0, -0.3)));
  CHECK(th.nu == doctest::Approx(std::pow(1024.0, -0.2)));
  CHECK(th.envelope == doctest::Approx(std::pow(1024.0, -0.9) * 0.2 + std::pow(1024.0, -0.6) * std::pow(1024.0, -0.4)));
  CHECK_THROWS_AS(collision_frequency(series, m, 1.0, 1.0, 0.0, 0.2, 0, 3, 0.02), ContractViolation);
  CHECK_THROWS_AS(collision_thresholds(1024, 0.0, 0.2, 0.0, 0.1), DomainError);
}

TEST_CASE("integral bounds") {
  ForceParams p(1.0, 1.0, 64);  // cut-off 1/64
  SUBCASE("static pair") {
    const double d = 0.3, T = 2.0;
    auto ts = lines({{0, 0}, {d, 0}}, {{0, 0}, {0, 0}}, grid(0.0, T, 40));
    auto r = integral_bound_check(track(ts, 0), track(ts, 1), p);
    CHECK(r.integral_g == doctest::Approx(T * 8.0 / (d * d)));
    CHECK(r.envelope_g == doctest::Approx(1.0 / (d * d)));
    CHECK(r.ratio_g == doctest::Approx(8.0 * T));
    CHECK(r.integral_f == doctest::Approx(T / d));
    CHECK(r.ratio_f == doctest::Approx(T));
  }
  SUBCASE("straight-line crossing") {
    const double dr = 0.05, dv = 2.0, T = 1.0, s0 = 0.4;
    auto ts = lines({{-dv * s0, dr}, {0, 0}}, {{dv, 0}, {0, 0}}, grid(0.0, T, 20000));
    auto r = integral_bound_check(track(ts, 0), track(ts, 1), p);
    CHECK(r.encounter.dr == doctest::Approx(dr).epsilon(1e-9));
    CHECK(r.encounter.dv == doctest::Approx(dv));
    double exact = (std::asinh(dv * (T - s0) / dr) + std::asinh(dv * s0 / dr)) / dv;
    CHECK(r.integral_f == doctest::Approx(exact).epsilon(1e-6));
    double log_entry = std::log(dv / dr) / dv;
    REQUIRE(log_entry < 1.0 / dr);
    CHECK(r.envelope_f == doctest::Approx(log_entry));
    CHECK(r.ratio_f == doctest::Approx(exact / log_entry).epsilon(1e-6));
    // same pair seen from the other side
    auto back = integral_bound_check(track(ts, 1), track(ts, 0), p);
    CHECK(back.integral_f == r.integral_f);
    CHECK(back.integral_g == r.integral_g);
  }
  SUBCASE("zero separation or speed drops envelope entries") {
    auto same = lines({{0, 0}, {0, 0}}, {{1, 0}, {1, 0}}, grid(0.0, 1.0, 10));
    auto r = integral_bound_check(track(same, 0), track(same, 1), p);
    CHECK(std::isinf(r.envelope_g));
    CHECK(r.ratio_g == 0.0);
    CHECK(r.envelope_f == doctest::Approx(64.0));
  }
}

TEST_CASE("bad-set frequency degenerate thresholds") {
  DensityModel m{};
  GridSpec g{8.0, 64};
  std::map<std::uint64_t, MeanFieldSeries> cache;
  SeriesProvider provider = [&](std::uint64_t n) -> const MeanFieldSeries& {
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, evolve_reference(m, ForceParams(1.0, 1.0, n), 2048, 0.02, 0.2, g, n)).first;
    return it->second;
  };
  const double inf = std::numeric_limits<double>::infinity();
  auto zero = bad_set_frequency(provider, m, 0.05, 4, {16, 32}, 1, 0.02, 0.2, 2, BadRadii{0.0, 0.0});
  for (auto& pt : zero) CHECK(pt.ci.estimate == 0.0);
  auto full = bad_set_frequency(provider, m, 0.05, 4, {16, 32}, 1, 0.02, 0.2, 2, BadRadii{inf, inf});
  for (auto& pt : full) {
    CHECK(pt.ci.estimate == 1.0);
    CHECK(pt.mean_bad == double(pt.n));
  }
  auto nominal = bad_set_frequency(provider, m, 0.05, 4, {16, 32}, 1, 0.02, 0.2, 2);
  CHECK(nominal.size() == 2);
  CHECK(nominal[0].counts.size() == 4);
}

TEST_CASE("phi convergence sanity") {
  DensityModel m{};
  // sub-cell cut-off with point sampling: the two kernels coincide
  GridSpec point{8.0, 64};
  auto same = phi_convergence(m, 1.0, 1.0, 2048, point, 0.02, 0.2, 8, 3, {64, 128});
  for (auto& pt : same) CHECK(pt.deviation <= 1e-8);
  // cut-off radius ~1: kernels differ on the bulk
  auto wide = phi_convergence(m, 1.0, 1e-3, 2048, point, 0.02, 0.2, 8, 3, {2});
  CHECK(wide[0].deviation > 0.0);
}
