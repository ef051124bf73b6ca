#include "mflab/density.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "mflab/errors.hpp"
#include "mflab/rng.hpp"

namespace mflab {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double normal2(Vec2 v, double s) {
  return std::exp(-0.5 * norm2(v) / (s * s)) / (kTwoPi * s * s);
}

}  // namespace

void DensityModel::validate() const {
  if (!std::isfinite(position_scale) || !(position_scale > 0.0))
    throw DomainError("DensityModel: position_scale must be positive");
  if (!std::isfinite(velocity_scale) || !(velocity_scale > 0.0))
    throw DomainError("DensityModel: velocity_scale must be positive");
}

std::string to_string(DensityModel::Kind kind) {
  switch (kind) {
    case DensityModel::Kind::gaussian_product:
      return "gaussian_product";
    case DensityModel::Kind::uniform_disk_maxwellian:
      return "uniform_disk_maxwellian";
  }
  return "unknown";
}

DensityModel::Kind density_kind_from_string(const std::string& name) {
  if (name == "gaussian_product") return DensityModel::Kind::gaussian_product;
  if (name == "uniform_disk_maxwellian" || name == "uniform_disk")
    return DensityModel::Kind::uniform_disk_maxwellian;
  throw DomainError("unknown density model '" + name + "'");
}

PhaseState sample(const DensityModel& model, std::size_t n, std::uint64_t seed) {
  model.validate();
  Engine rng = make_engine(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  PhaseState s(n);
  const double sq = model.position_scale;
  const double sp = model.velocity_scale;
  for (std::size_t i = 0; i < n; ++i) {
    if (model.kind == DensityModel::Kind::gaussian_product) {
      double x = gauss(rng);
      double y = gauss(rng);
      s.q[i] = {sq * x, sq * y};
    } else {
      double r = sq * std::sqrt(unif(rng));
      double t = kTwoPi * unif(rng);
      s.q[i] = {r * std::cos(t), r * std::sin(t)};
    }
    double px = gauss(rng);
    double py = gauss(rng);
    s.p[i] = {sp * px, sp * py};
  }
  return s;
}

double eval_spatial_marginal(const DensityModel& model, Vec2 q) {
  if (model.kind == DensityModel::Kind::gaussian_product) return normal2(q, model.position_scale);
  double r = model.position_scale;
  return norm2(q) <= r * r ? 1.0 / (std::numbers::pi * r * r) : 0.0;
}

double eval_density(const DensityModel& model, const std::array<double, 4>& x) {
  return eval_spatial_marginal(model, {x[0], x[1]}) * normal2({x[2], x[3]}, model.velocity_scale);
}

double spatial_marginal_sup(const DensityModel& model) {
  double s = model.position_scale;
  if (model.kind == DensityModel::Kind::gaussian_product) return 1.0 / (kTwoPi * s * s);
  return 1.0 / (std::numbers::pi * s * s);
}

std::array<double, 4> density_gradient(const DensityModel& model, const std::array<double, 4>& x) {
  if (model.kind != DensityModel::Kind::gaussian_product)
    throw DomainError("density_gradient: only defined for gaussian_product");
  double k = eval_density(model, x);
  double iq = 1.0 / (model.position_scale * model.position_scale);
  double ip = 1.0 / (model.velocity_scale * model.velocity_scale);
  return {-k * x[0] * iq, -k * x[1] * iq, -k * x[2] * ip, -k * x[3] * ip};
}

std::optional<GradientDecay> gradient_decay_certificate(const DensityModel& model) {
  if (model.kind != DensityModel::Kind::gaussian_product) return std::nullopt;
  // |grad k0(x)| <= A |x| / s_min^2 * exp(-|x|^2 / (2 s_max^2)), A = k0(0).
  // Maximise (1+r)^3 times that envelope over r on a fine grid; the envelope
  // is smooth and unimodal after the polynomial prefactor, so a 1% step
  // refinement plus a 2% margin is safe.
  const double delta = 1.0;
  double smin = std::min(model.position_scale, model.velocity_scale);
  double smax = std::max(model.position_scale, model.velocity_scale);
  double amp = 1.0 / (kTwoPi * kTwoPi * model.position_scale * model.position_scale *
                      model.velocity_scale * model.velocity_scale);
  double best = 0.0;
  double rmax = 40.0 * smax;
  for (int k = 1; k <= 200000; ++k) {
    double r = rmax * k / 200000.0;
    double v = std::pow(1.0 + r, 2.0 + delta) * amp * r / (smin * smin) *
               std::exp(-0.5 * r * r / (smax * smax));
    best = std::max(best, v);
  }
  return GradientDecay{best * 1.02, delta};
}

}  // namespace mflab
