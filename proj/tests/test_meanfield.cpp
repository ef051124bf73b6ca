#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "mflab/density.hpp"
#include "mflab/errors.hpp"
#include "mflab/meanfield.hpp"
#include "test_support.hpp"

using namespace mflab;

namespace {

GridSpec odd_grid(int g = 63, double l = 4.0, KernelSampling s = KernelSampling::point) { return {l, g, s}; }

std::size_t at(const GridSpec& s, int ix, int iy) { return static_cast<std::size_t>(iy) * s.cells + ix; }

// 1D CIC weight integral of a standard normal against the hat at node c.
double hat_mass_1d(double c, double h) {
  const int n = 20000;
  double sum = 0.0;
  double lo = c - h, step = 2 * h / n;
  for (int k = 0; k < n; ++k) {
    double x = lo + (k + 0.5) * step;
    double w = 1.0 - std::abs(x - c) / h;
    sum += w * std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi);
  }
  return sum * step;
}

FieldGrid random_density(const GridSpec& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FieldGrid g;
  g.spec = s;
  g.density.resize(static_cast<std::size_t>(s.cells) * s.cells);
  g.force.resize(g.density.size());
  double tot = 0;
  for (auto& d : g.density) tot += (d = u(rng) * u(rng));
  for (auto& d : g.density) d /= tot;
  return g;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("mflab_test_" + name)).string();
}

}  // namespace

TEST_CASE("deposit at a cell centre and at a corner") {
  GridSpec s{4.0, 8};  // h = 1, nodes at -3.5 .. 3.5
  Vec2 centre{0.5, -1.5};
  auto g = deposit(std::vector<Vec2>{centre}, s);
  CHECK(g.density[at(s, 4, 2)] == 1.0);
  CHECK(g.leaked == 0.0);
  CHECK(g.mass() == 1.0);

  auto c = deposit(std::vector<Vec2>{{0.0, 0.0}}, s);
  for (int ix : {3, 4})
    for (int iy : {3, 4}) CHECK(c.density[at(s, ix, iy)] == 0.25);
  double tot = 0;
  for (double d : c.density) tot += d;
  CHECK(tot == 1.0);
}

TEST_CASE("deposit reports leakage outside the node hull") {
  GridSpec s{4.0, 8};
  auto g = deposit(std::vector<Vec2>{{3.75, 0.5}, {100.0, 0.0}}, s);
  // first particle: half its weight beyond the last node; second: all of it
  CHECK(g.leaked == doctest::Approx(0.5 * 0.25 + 0.5));
  double tot = 0;
  for (double d : g.density) tot += d;
  CHECK(tot + g.leaked == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(deposit(std::vector<Vec2>{}, s), ContractViolation);
}

TEST_CASE("gaussian deposit matches the analytic marginal") {
  // Coarse grid so each compared cell holds many samples; the oracle is the
  // expected CIC mass, i.e. the analytic marginal integrated against the hat.
  GridSpec s{4.0, 8};
  DensityModel m{DensityModel::Kind::gaussian_product, 1.0, 1.0};
  auto st = sample(m, 1 << 16, 2024);
  auto g = deposit(st.q, s);
  std::vector<double> expect(g.density.size());
  for (int iy = 0; iy < s.cells; ++iy)
    for (int ix = 0; ix < s.cells; ++ix)
      expect[at(s, ix, iy)] = hat_mass_1d(s.node(ix), 1.0) * hat_mass_1d(s.node(iy), 1.0);
  double peak = *std::max_element(expect.begin(), expect.end());
  int compared = 0;
  for (std::size_t i = 0; i < expect.size(); ++i) {
    if (expect[i] < 0.1 * peak) continue;
    ++compared;
    CHECK(std::abs(g.density[i] - expect[i]) <= 0.05 * expect[i]);
  }
  CHECK(compared >= 16);
}

TEST_CASE("tent kernel matches the quadrature oracle") {
  std::ifstream in(std::string(MFLAB_CALIBRATION_DIR) + "/tent_kernel_oracle.json");
  REQUIRE(in);
  nlohmann::json j;
  in >> j;
  for (const auto& c : j.at("cases")) {
    Vec2 v = tent_kernel(c["dx"], c["dy"], 1.0, c["eps"]);
    Vec2 ref{c["kx"].get<double>(), c["ky"].get<double>()};
    CHECK(norm(v - ref) <= 1e-9 * norm(ref));
  }
  // far away the hat average approaches the point value
  Vec2 far = tent_kernel(40, 25, 1.0, 0.0);
  Vec2 pt = coulomb_force({40, 25}, 1.0);
  CHECK(norm(far - pt) <= 1e-5 * norm(pt));
  // cut-off below the hat support: only offsets touching the origin change
  CHECK(tent_kernel(3, 1, 1.0, 0.3) == tent_kernel(3, 1, 1.0, 0.0));
  CHECK(norm(tent_kernel(1, 0, 1.0, 0.3) - tent_kernel(1, 0, 1.0, 0.0)) > 1e-3);
}

TEST_CASE("kernel weights are odd") {
  ForceParams p(1.3, 1.0, 32);
  for (auto samp : {KernelSampling::point, KernelSampling::tent})
    for (auto kind : {KernelKind::cutoff, KernelKind::coulomb}) {
      FieldSolver solver(GridSpec{2.0, 16, samp}, p, kind);
      CHECK(solver.weight(0, 0) == Vec2{});
      for (int dy = -15; dy < 16; ++dy)
        for (int dx = -15; dx < 16; ++dx) {
          Vec2 a = solver.weight(dx, dy), b = solver.weight(-dx, -dy);
          REQUIRE(a.x == -b.x);
          REQUIRE(a.y == -b.y);
        }
      CHECK_THROWS_AS(solver.weight(16, 0), ContractViolation);
    }
}

TEST_CASE("point-mass field is the single-source kernel") {
  GridSpec s = odd_grid();
  const double h = s.cell_size();
  ForceParams p(1.0, 1.0, 64);  // cut-off 1/64 below h
  FieldSolver solver(s, p);
  auto g = deposit(std::vector<Vec2>{{0.0, 0.0}}, s);
  REQUIRE(g.density[at(s, 31, 31)] == 1.0);
  solver.solve(g);
  for (int k = 1; k < 30; ++k) {
    double d = k * h;
    Vec2 f = g.force[at(s, 31 + k, 31)];
    CHECK(f.x == doctest::Approx(1.0 / d).epsilon(1e-12));
    CHECK(std::abs(f.y) < 1e-13);
  }
  CHECK(norm(g.force[at(s, 31, 31)]) < 1e-13);
  REQUIRE_FALSE(solver.diagnostics().empty());
  CHECK(solver.diagnostics()[0].find("cell size") != std::string::npos);
  FieldSolver resolved(s, ForceParams(1.0, 0.5, 4), KernelKind::cutoff);
  CHECK(resolved.diagnostics().empty());
}

TEST_CASE("symmetric density gives zero force at the centre") {
  GridSpec s = odd_grid();
  for (auto samp : {KernelSampling::point, KernelSampling::tent}) {
    s.sampling = samp;
    FieldSolver solver(s, ForceParams(1.0, 1.0, 16));
    FieldGrid g;
    g.spec = s;
    g.density.resize(static_cast<std::size_t>(s.cells) * s.cells);
    g.force.resize(g.density.size());
    double tot = 0;
    for (int iy = 0; iy < s.cells; ++iy)
      for (int ix = 0; ix < s.cells; ++ix) {
        double x = s.node(ix), y = s.node(iy);
        tot += (g.density[at(s, ix, iy)] = std::exp(-(x * x + y * y)));
      }
    for (auto& d : g.density) d /= tot;
    solver.solve(g);
    CHECK(norm(g.force[at(s, 31, 31)]) < 1e-12);
    // and the field points outward off-centre
    CHECK(g.force[at(s, 40, 31)].x > 0.0);
  }
}

TEST_CASE("fast convolution equals direct summation") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> node(0, 63);
  for (auto samp : {KernelSampling::point, KernelSampling::tent})
    for (auto kind : {KernelKind::cutoff, KernelKind::coulomb}) {
      GridSpec s{3.0, 64, samp};
      FieldSolver solver(s, ForceParams(0.7, 0.6, 50), kind);
      auto g = random_density(s, 99);
      solver.solve(g);
      double fmax = 0;
      for (auto f : g.force) fmax = std::max(fmax, norm(f));
      double worst = 0;
      for (int k = 0; k < 100; ++k) {
        int ix = node(rng), iy = node(rng);
        worst = std::max(worst, norm(direct_field(g, solver, ix, iy) - g.force[at(s, ix, iy)]));
      }
      CHECK(worst <= 1e-10 * fmax);
    }
}

TEST_CASE("interpolation is bilinear and flags extrapolation") {
  GridSpec s{2.0, 4};  // h = 1, nodes at -1.5 .. 1.5
  FieldGrid g;
  g.spec = s;
  g.density.assign(16, 1.0 / 16);
  g.force.resize(16);
  for (int iy = 0; iy < 4; ++iy)
    for (int ix = 0; ix < 4; ++ix) g.force[at(s, ix, iy)] = {s.node(ix) + 2 * s.node(iy), 1.0};
  auto f = interpolate(g, 1.0, {0.3, -0.2});
  CHECK_FALSE(f.extrapolated);
  CHECK(f.force.x == doctest::Approx(0.3 - 0.4));
  auto e = interpolate(g, 1.0, {1.8, 0.0});
  CHECK(e.extrapolated);
  CHECK(e.force.x == doctest::Approx(1.0 / 1.8));
  auto node_val = interpolate(g, 1.0, {1.5, 1.5});
  CHECK_FALSE(node_val.extrapolated);
  CHECK(node_val.force.x == doctest::Approx(4.5));
}

TEST_CASE("reference run with vanishing coupling is free streaming") {
  DensityModel m{};
  GridSpec s{6.0, 64};
  ForceParams p(1e-12, 1.0, 64);
  auto series = evolve_reference(m, p, 4096, 0.05, 0.5, s, 31);
  REQUIRE(series.times.size() == 11);
  CHECK(series.times.back() == doctest::Approx(0.5));
  auto st = sample(m, 4096, 31);
  std::vector<Vec2> moved(st.size());
  for (std::size_t i = 0; i < st.size(); ++i) moved[i] = st.q[i] + 0.5 * st.p[i];
  auto free = deposit(moved, s);
  double worst = 0;
  for (std::size_t i = 0; i < free.density.size(); ++i)
    worst = std::max(worst, std::abs(free.density[i] - series.fields.back().density[i]));
  CHECK(worst < 1e-9);
  CHECK(series.diagnostics.size() >= 1);
}

TEST_CASE("reference run conserves momentum and is thread invariant") {
  DensityModel m{};
  GridSpec s{8.0, 128};
  ForceParams p(1.0, 1.0, 256);
  auto a = evolve_reference(m, p, 1 << 14, 0.01, 0.5, s, 8, KernelKind::cutoff, 1);
  auto b = evolve_reference(m, p, 1 << 14, 0.01, 0.5, s, 8, KernelKind::cutoff, 3);
  CHECK(a == b);
  double tol = mflab::testing::calibration_value("pic_momentum_tolerance");
  double drift = 0;
  for (auto v : a.momentum) drift = std::max(drift, norm(v - a.momentum.front()));
  CHECK(drift <= tol * m.velocity_scale);
  // the grid force on the deposit sums to zero
  for (const auto& g : a.fields) {
    Vec2 tot{};
    for (std::size_t i = 0; i < g.density.size(); ++i) tot += g.density[i] * g.force[i];
    REQUIRE(norm(tot) < 1e-12);
  }
}

TEST_CASE("reference field noise shrinks like M^-1/2") {
  DensityModel m{};
  GridSpec s{8.0, 128};
  ForceParams p(1.0, 1.0, 256);
  FieldSolver solver(s, p);
  auto small = sample(m, 1 << 15, 1);
  auto big = sample(m, 1 << 16, 2);
  auto g1 = deposit(small.q, s), g2 = deposit(big.q, s);
  solver.solve(g1);
  solver.solve(g2);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-2.5, 2.5);
  const double h = s.cell_size();
  double sq = 0, var = 0;
  for (int k = 0; k < 100; ++k) {
    Vec2 x{u(rng), u(rng)};
    sq += norm2(interpolate(g1, 1.0, x).force - interpolate(g2, 1.0, x).force);
    // single-sample second moment of the grid-resolved kernel, |f| <= 1/max(r, h)
    double acc = 0;
    for (const Vec2& y : big.q) {
      double r = std::max(norm(x - y), h);
      acc += 1.0 / (r * r);
    }
    var += acc / static_cast<double>(big.size());
  }
  double rms = std::sqrt(sq / 100);
  double bound = 3.0 * std::sqrt(var / 100 * (1.0 / (1 << 15) + 1.0 / (1 << 16)));
  CHECK(rms <= bound);
  CHECK(rms > 0.0);
}

TEST_CASE("attractive collapse aborts the reference run") {
  DensityModel m{DensityModel::Kind::gaussian_product, 0.05, 0.1};
  CHECK_THROWS_AS(evolve_reference(m, ForceParams(-1e7, 1.0, 64), 1024, 0.01, 0.1, GridSpec{2.0, 32}, 3),
                  FieldBlowUp);
}

TEST_CASE("flows through a series") {
  DensityModel m{};
  GridSpec s{8.0, 128};
  auto series = evolve_reference(m, ForceParams(1.0, 1.0, 256), 1 << 14, 0.02, 0.4, s, 77);

  SUBCASE("vanishing field gives straight lines") {
    auto zero = evolve_reference(m, ForceParams(1e-12, 1.0, 256), 256, 0.02, 0.4, s, 1);
    auto tr = flow_phi({0.3, -0.2}, {1.0, 0.5}, zero, 0.01, 4);
    REQUIRE(tr.steps() == 11);
    for (std::size_t k = 0; k < tr.steps(); ++k) {
      Vec2 expect = Vec2{0.3, -0.2} + tr.times[k] * Vec2{1.0, 0.5};
      CHECK(norm(tr.q_at(0, k) - expect) < 1e-10);
    }
  }

  SUBCASE("dt refinement converges at second order") {
    Vec2 q0{0.4, 0.1}, p0{-0.3, 0.6};
    auto end = [&](double dt) {
      auto tr = flow_phi(q0, p0, series, dt, 1);
      return tr.q_at(0, tr.steps() - 1);
    };
    Vec2 e1 = end(0.02), e2 = end(0.01), e4 = end(0.005);
    double ratio = norm(e1 - e2) / norm(e2 - e4);
    CHECK(ratio > 3.0);
    CHECK(ratio < 5.5);
  }

  SUBCASE("lift_flow is a tensor product") {
    auto st = sample(m, 40, 9);
    auto all = lift_flow(st, series, 0.02, 2, -1.0, 2);
    auto one = flow_phi(st.q[7], st.p[7], series, 0.02, 2);
    for (std::size_t k = 0; k < one.steps(); ++k) CHECK(one.q_at(0, k) == all.q_at(7, k));

    PhaseState perm = st;
    std::reverse(perm.q.begin(), perm.q.end());
    std::reverse(perm.p.begin(), perm.p.end());
    auto rev = lift_flow(perm, series, 0.02, 2);
    for (std::size_t i = 0; i < 40; ++i)
      for (std::size_t k = 0; k < rev.steps(); ++k) REQUIRE(rev.q_at(39 - i, k) == all.q_at(i, k));

    PhaseState half({st.q.begin(), st.q.begin() + 20}, {st.p.begin(), st.p.begin() + 20});
    auto h = lift_flow(half, series, 0.02, 2);
    for (std::size_t i = 0; i < 20; ++i) REQUIRE(h.p_at(i, h.steps() - 1) == all.p_at(i, all.steps() - 1));
  }

  SUBCASE("extrapolation is flagged") {
    auto tr = flow_phi({7.9, 0.0}, {3.0, 0.0}, series, 0.02, 1);
    CHECK(tr.any_extrapolated());
    auto in = flow_phi({0.0, 0.0}, {0.1, 0.0}, series, 0.02, 1);
    CHECK_FALSE(in.any_extrapolated());
  }

  SUBCASE("stride and interval contracts") {
    CHECK_THROWS_AS(flow_phi({0, 0}, {0, 0}, series, 0.02, 3), ContractViolation);
    CHECK_THROWS_AS(flow_phi({0, 0}, {0, 0}, series, 0.02, 1, 0.6), ContractViolation);
    CHECK_THROWS_AS(flow_phi({0, 0}, {0, 0}, series, 0.03, 1), ContractViolation);
  }
}

TEST_CASE("stationary symmetric field keeps the origin fixed") {
  GridSpec s = odd_grid(63, 4.0);
  ForceParams p(1.0, 1.0, 64);
  FieldSolver solver(s, p);
  FieldGrid g;
  g.spec = s;
  g.density.resize(static_cast<std::size_t>(s.cells) * s.cells);
  g.force.resize(g.density.size());
  double tot = 0;
  for (int iy = 0; iy < s.cells; ++iy)
    for (int ix = 0; ix < s.cells; ++ix) {
      double x = s.node(ix), y = s.node(iy);
      tot += (g.density[at(s, ix, iy)] = std::exp(-0.5 * (x * x + y * y)));
    }
  for (auto& d : g.density) d /= tot;
  solver.solve(g);
  MeanFieldSeries series;
  series.grid = s;
  series.dt_field = 0.5;
  series.params = p;
  series.times = {0.0, 0.5, 1.0};
  series.fields = {g, g, g};
  auto tr = flow_phi({0.0, 0.0}, {0.0, 0.0}, series, 0.01);
  CHECK(norm(tr.q_at(0, tr.steps() - 1)) < 1e-12);
}

TEST_CASE("infinite-N flow") {
  DensityModel m{};
  GridSpec s{8.0, 128};
  const double h = s.cell_size();
  ForceParams p(1.0, 1.0, 64);  // cut-off 1/64 below h = 1/8
  REQUIRE(p.cutoff() < h);
  auto cut = evolve_reference(m, p, 1 << 13, 0.02, 0.2, s, 5);
  auto a = flow_phi({0.5, 0.2}, {0.1, -0.3}, cut, 0.02);
  auto b = flow_phi_infinity({0.5, 0.2}, {0.1, -0.3}, m, 1.0, 1 << 13, 0.02, 0.2, s, 5);
  for (std::size_t k = 0; k < a.steps(); ++k) CHECK(norm(a.q_at(0, k) - b.q_at(0, k)) <= 1e-8);

  auto freeflow = flow_phi_infinity({0.5, 0.2}, {0.1, -0.3}, m, 1e-12, 512, 0.02, 0.2, s, 5);
  CHECK(norm(freeflow.q_at(0, freeflow.steps() - 1) - Vec2{0.52, 0.14}) < 1e-10);

  // The origin is a fixed point up to the ensemble's sampling noise.
  auto origin = flow_phi_infinity({0.0, 0.0}, {0.0, 0.0}, m, 1.0, 1 << 14, 0.02, 0.2, s, 6);
  double noise = 3.0 * std::sqrt(std::log(8.0 / h) + 1.0) / std::sqrt(double(1 << 14));
  CHECK(norm(origin.q_at(0, origin.steps() - 1)) <= 0.5 * 0.2 * 0.2 * noise);

  // With a tent kernel the cut-off is seen even below the cell size.
  GridSpec t{8.0, 128, KernelSampling::tent};
  auto tc = evolve_reference(m, p, 1 << 13, 0.02, 0.2, t, 5);
  auto ti = evolve_reference(m, p, 1 << 13, 0.02, 0.2, t, 5, KernelKind::coulomb);
  double diff = 0;
  for (std::size_t i = 0; i < tc.fields.back().force.size(); ++i)
    diff = std::max(diff, norm(tc.fields.back().force[i] - ti.fields.back().force[i]));
  CHECK(diff > 0.0);
  CHECK(diff < 1e-2);
}

TEST_CASE("series container") {
  DensityModel m{};
  auto series = evolve_reference(m, ForceParams(1.0, 1.0, 128), 2048, 0.05, 0.2, GridSpec{6.0, 32}, 12);
  auto p64 = temp_path("series64.bin");
  write_series(p64, series, FieldPrecision::f64);
  CHECK(read_series(p64) == series);

  auto p32 = temp_path("series32.bin");
  write_series(p32, series, FieldPrecision::f32);
  auto loaded = read_series(p32);
  auto q = series;
  quantize_f32(q);
  CHECK(loaded == q);
  CHECK(std::filesystem::file_size(p32) < std::filesystem::file_size(p64));

  {
    std::fstream f(p32, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char c;
    f.read(&c, 1);
    c ^= 0x5a;
    f.seekp(200);
    f.write(&c, 1);
  }
  CHECK_THROWS_AS(read_series(p32), CorruptContainer);
  std::filesystem::resize_file(p64, 100);
  CHECK_THROWS_AS(read_series(p64), CorruptContainer);
  CHECK_THROWS_AS(read_series(temp_path("does_not_exist.bin")), CorruptContainer);
  std::filesystem::remove(p32);
  std::filesystem::remove(p64);
}

namespace {

MeanFieldSeries calibration_like_series(std::uint64_t seed) {
  auto s = evolve_reference(DensityModel{}, ForceParams(1.0, 1.0, 1024), 1u << 16, 0.01, 0.5, GridSpec{8.0, 256}, seed);
  quantize_f32(s);
  return s;
}

}  // namespace

TEST_CASE("interpolated field difference quotients stay under the frozen constant") {
  const double lip = mflab::testing::calibration_value("field_lipschitz");
  auto series = calibration_like_series(77);
  auto pts = sample(DensityModel{}, 20000, 78);
  std::mt19937_64 rng(79);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    double d = mflab::testing::log_uniform(rng, 1e-4, 0.5);
    Vec2 x = pts.q[k], y = x + d * mflab::testing::random_unit(rng);
    double t = 0.5 * u(rng);
    auto fx = interpolate(series, x, t), fy = interpolate(series, y, t);
    if (fx.extrapolated || fy.extrapolated) continue;
    worst = std::max(worst, norm(fx.force - fy.force) / d);
  }
  CHECK(worst > 0.0);
  CHECK(worst <= lip);
}

TEST_CASE("mean-field separations grow at most like exp(C t)") {
  const double c = mflab::testing::calibration_value("field_stability");
  auto series = calibration_like_series(80);
  auto pts = sample(DensityModel{}, 300, 81);
  std::mt19937_64 rng(82);
  for (std::size_t k = 0; k < pts.size(); ++k) {
    double d = mflab::testing::log_uniform(rng, 1e-4, 1e-1);
    Vec2 q2 = pts.q[k] + d * mflab::testing::random_unit(rng);
    Vec2 p2 = pts.p[k] + d * mflab::testing::random_unit(rng);
    auto a = flow_phi(pts.q[k], pts.p[k], series, 0.01), b = flow_phi(q2, p2, series, 0.01);
    double d0 = phase_distance(pts.q[k], pts.p[k], q2, p2);
    for (std::size_t s = 0; s < a.steps(); ++s) {
      double ds = phase_distance(a.q_at(0, s), a.p_at(0, s), b.q_at(0, s), b.p_at(0, s));
      REQUIRE(ds <= std::exp(c * a.times[s]) * d0 * (1.0 + 1e-12));
    }
  }
}

TEST_CASE("frozen stability constant agrees with the field constant") {
  // |dq|' <= |dp| and |dp|' <= L |dq| bound the max-norm growth rate by max(1, L)
  std::ifstream in(std::string(MFLAB_CALIBRATION_DIR) + "/field_stability.json");
  nlohmann::json j;
  in >> j;
  double measured = j.at("measured").get<double>();
  double lip = mflab::testing::calibration_value("field_lipschitz");
  CHECK(measured <= std::max(1.0, lip));
  CHECK(measured <= j.at("value").get<double>());
}
