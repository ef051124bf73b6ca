#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "doctest.h"
#include "mflab/density.hpp"
#include "mflab/errors.hpp"
#include "mflab/rng.hpp"

using namespace mflab;

namespace {

DensityModel gaussian(double sq = 1.0, double sp = 1.0) {
  return {DensityModel::Kind::gaussian_product, sq, sp};
}

DensityModel disk(double r = 1.0, double sp = 1.0) {
  return {DensityModel::Kind::uniform_disk_maxwellian, r, sp};
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

TEST_CASE("model validation") {
  CHECK_THROWS_AS(gaussian(0.0, 1.0).validate(), DomainError);
  CHECK_THROWS_AS(gaussian(1.0, -1.0).validate(), DomainError);
  CHECK_THROWS_AS(gaussian(NAN, 1.0).validate(), DomainError);
  CHECK_NOTHROW(disk(2.0, 0.5).validate());
  CHECK(density_kind_from_string(to_string(DensityModel::Kind::uniform_disk_maxwellian)) ==
        DensityModel::Kind::uniform_disk_maxwellian);
  CHECK_THROWS_AS(density_kind_from_string("plummer"), DomainError);
}

TEST_CASE("sampling is deterministic in the seed") {
  for (auto m : {gaussian(), disk(1.5, 0.7)}) {
    auto a = sample(m, 1000, 42);
    auto b = sample(m, 1000, 42);
    auto c = sample(m, 1000, 43);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    CHECK(a.valid());
  }
}

TEST_CASE("gaussian sample moments") {
  const std::size_t n = 100000;
  auto m = gaussian(1.3, 0.8);
  auto s = sample(m, n, 7);
  double mx = 0, my = 0;
  double cxx = 0, cyy = 0, cxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += s.q[i].x, my += s.q[i].y;
    cxx += s.p[i].x * s.p[i].x;
    cyy += s.p[i].y * s.p[i].y;
    cxy += s.p[i].x * s.p[i].y;
  }
  double dn = static_cast<double>(n);
  CHECK(std::abs(mx / dn) < 4 * 1.3 / std::sqrt(dn));
  CHECK(std::abs(my / dn) < 4 * 1.3 / std::sqrt(dn));
  double v = 0.8 * 0.8;
  CHECK(std::abs(cxx / dn - v) < 0.02 * v);
  CHECK(std::abs(cyy / dn - v) < 0.02 * v);
  CHECK(std::abs(cxy / dn) < 0.02 * v);
}

TEST_CASE("gaussian positions and momenta are uncorrelated") {
  auto s = sample(gaussian(), 100000, 11);
  std::vector<double> qx, px, qy, py;
  for (std::size_t i = 0; i < s.size(); ++i) {
    qx.push_back(s.q[i].x), px.push_back(s.p[i].x);
    qy.push_back(s.q[i].y), py.push_back(s.p[i].y);
  }
  CHECK(std::abs(pearson(qx, px)) < 3.0 / std::sqrt(1e5));
  CHECK(std::abs(pearson(qy, py)) < 3.0 / std::sqrt(1e5));
}

TEST_CASE("uniform disk sample stays in the disk with uniform radius law") {
  auto s = sample(disk(2.0), 50000, 5);
  double inner = 0;
  for (auto q : s.q) {
    REQUIRE(norm(q) <= 2.0);
    if (norm(q) <= 1.0) inner += 1;
  }
  // P(|q| <= R/2) = 1/4
  double f = inner / 50000.0;
  CHECK(std::abs(f - 0.25) < 4 * std::sqrt(0.25 * 0.75 / 50000.0));
}

TEST_CASE("disjoint seeds give independent ensembles") {
  const int trials = 400;
  std::vector<double> a, b;
  for (int t = 0; t < trials; ++t) {
    auto s1 = sample(gaussian(), 200, derive_seed(99, {0, std::uint64_t(t)}));
    auto s2 = sample(gaussian(), 200, derive_seed(99, {1, std::uint64_t(t)}));
    double m1 = 0, m2 = 0;
    for (std::size_t i = 0; i < 200; ++i) m1 += s1.q[i].x + s1.p[i].y, m2 += s2.q[i].x + s2.p[i].y;
    a.push_back(m1), b.push_back(m2);
  }
  CHECK(std::abs(pearson(a, b)) < 3.0 / std::sqrt(double(trials)));
}

TEST_CASE("density values") {
  auto m = gaussian();
  CHECK(eval_density(m, {0, 0, 0, 0}) == doctest::Approx(0.025330295910584444).epsilon(1e-14));
  CHECK(eval_density(m, {0, 0, 0, 0}) == doctest::Approx(1.0 / (4 * std::numbers::pi * std::numbers::pi)));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int k = 0; k < 200; ++k) {
    std::array<double, 4> dir{g(rng), g(rng), g(rng), g(rng)};
    double prev = eval_density(m, {0, 0, 0, 0});
    for (double t = 0.1; t < 30; t += 0.1) {
      std::array<double, 4> x{t * dir[0], t * dir[1], t * dir[2], t * dir[3]};
      double v = eval_density(m, x);
      REQUIRE(v <= prev);
      prev = v;
    }
    CHECK(prev < 1e-12);
  }
}

TEST_CASE("density integrates to one") {
  for (auto m : {gaussian(), gaussian(0.9, 1.1)}) {
    const int k = 48;
    const double h = 12.0 / k;
    double sum = 0;
    for (int i0 = 0; i0 < k; ++i0)
      for (int i1 = 0; i1 < k; ++i1)
        for (int i2 = 0; i2 < k; ++i2)
          for (int i3 = 0; i3 < k; ++i3) {
            auto c = [&](int i) { return -6.0 + (i + 0.5) * h; };
            sum += eval_density(m, {c(i0), c(i1), c(i2), c(i3)});
          }
    CHECK(std::abs(sum * h * h * h * h - 1.0) < 1e-3);
  }
  // Disk: radial momentum integral is 1, spatial area integral done in polar form.
  auto d = disk(1.7, 0.6);
  double spatial = 0;
  const int k = 2000;
  const double h = 4.0 / k;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) spatial += eval_spatial_marginal(d, {-2 + (i + 0.5) * h, -2 + (j + 0.5) * h});
  CHECK(std::abs(spatial * h * h - 1.0) < 2e-3);
}

TEST_CASE("spatial marginal sup") {
  CHECK(spatial_marginal_sup(gaussian()) == doctest::Approx(1.0 / (2 * std::numbers::pi)));
  CHECK(spatial_marginal_sup(disk(2.0)) == doctest::Approx(1.0 / (4 * std::numbers::pi)));
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-3, 3);
  for (auto m : {gaussian(0.7, 1.0), disk(1.2, 1.0)}) {
    double mx = 0;
    for (int k = 0; k < 10000; ++k) mx = std::max(mx, eval_spatial_marginal(m, {u(rng), u(rng)}));
    CHECK(spatial_marginal_sup(m) >= mx);
    CHECK(eval_spatial_marginal(m, {0, 0}) == doctest::Approx(spatial_marginal_sup(m)));
  }
}

TEST_CASE("gradient decay certificate") {
  CHECK_FALSE(gradient_decay_certificate(disk()).has_value());
  for (auto m : {gaussian(), gaussian(0.5, 2.0), gaussian(3.0, 0.4)}) {
    auto cert = gradient_decay_certificate(m);
    REQUIRE(cert.has_value());
    CHECK(cert->delta > 0);
    std::mt19937_64 rng(23);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> rad(0.0, 15.0);
    int bad = 0;
    for (int k = 0; k < 100000; ++k) {
      std::array<double, 4> x{g(rng), g(rng), g(rng), g(rng)};
      double r = std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3]);
      double s = rad(rng) / r;
      for (auto& c : x) c *= s;
      auto gr = density_gradient(m, x);
      double gn = std::sqrt(gr[0] * gr[0] + gr[1] * gr[1] + gr[2] * gr[2] + gr[3] * gr[3]);
      double xn = r * s;
      if (gn > cert->constant / std::pow(1 + xn, 2 + cert->delta)) ++bad;
    }
    CHECK(bad == 0);
  }
}

TEST_CASE("gradient matches finite differences") {
  auto m = gaussian(1.2, 0.9);
  std::array<double, 4> x{0.3, -0.7, 1.1, 0.2};
  auto gr = density_gradient(m, x);
  for (int k = 0; k < 4; ++k) {
    auto xp = x, xm = x;
    xp[k] += 1e-6, xm[k] -= 1e-6;
    double fd = (eval_density(m, xp) - eval_density(m, xm)) / 2e-6;
    CHECK(gr[k] == doctest::Approx(fd).epsilon(1e-6));
  }
  CHECK_THROWS_AS(density_gradient(disk(), x), DomainError);
}
