#include "mflab/meanfield.hpp"

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <boost/math/quadrature/gauss.hpp>
#include <cmath>
#include <mutex>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "mflab/errors.hpp"
#include "mflab/parallel.hpp"

namespace mflab {

std::string to_string(KernelSampling s) { return s == KernelSampling::point ? "point" : "tent"; }

KernelSampling kernel_sampling_from_string(const std::string& name) {
  if (name == "point") return KernelSampling::point;
  if (name == "tent") return KernelSampling::tent;
  throw DomainError("unknown kernel sampling '" + name + "'");
}

void GridSpec::validate() const {
  if (!std::isfinite(half_width) || !(half_width > 0.0)) throw DomainError("GridSpec: half_width must be positive");
  if (cells < 2 || cells > 8192) throw DomainError("GridSpec: cells must lie in [2, 8192]");
}

double FieldGrid::mass() const { return 1.0 - leaked; }

namespace {

void deposit_into(std::span<const Vec2> pos, double w, const GridSpec& spec, std::vector<double>& rho,
                  double& leaked) {
  const int g = spec.cells;
  const double inv_h = 1.0 / spec.cell_size();
  const double l = spec.half_width;
  for (Vec2 x : pos) {
    double sx = (x.x + l) * inv_h - 0.5;
    double sy = (x.y + l) * inv_h - 0.5;
    double fx0 = std::floor(sx), fy0 = std::floor(sy);
    if (!std::isfinite(fx0) || !std::isfinite(fy0) || std::abs(fx0) > 1e9 || std::abs(fy0) > 1e9) {
      leaked += w;
      continue;
    }
    int ix = static_cast<int>(fx0), iy = static_cast<int>(fy0);
    double fx = sx - fx0, fy = sy - fy0;
    const double wx[2] = {1.0 - fx, fx};
    const double wy[2] = {1.0 - fy, fy};
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c) {
        double m = w * wx[c] * wy[b];
        if (m == 0.0) continue;
        int jx = ix + c, jy = iy + b;
        if (jx < 0 || jy < 0 || jx >= g || jy >= g)
          leaked += m;
        else
          rho[static_cast<std::size_t>(jy) * g + jx] += m;
      }
  }
}

void finish_deposit(FieldGrid& grid) {
  const int g = grid.spec.cells;
  double m = 0.0, cx = 0.0, cy = 0.0;
  for (int iy = 0; iy < g; ++iy)
    for (int ix = 0; ix < g; ++ix) {
      double v = grid.density[static_cast<std::size_t>(iy) * g + ix];
      m += v;
      cx += v * grid.spec.node(ix);
      cy += v * grid.spec.node(iy);
    }
  grid.centroid = m > 0.0 ? Vec2{cx / m, cy / m} : Vec2{};
}

FieldGrid empty_grid(const GridSpec& spec) {
  spec.validate();
  FieldGrid grid;
  grid.spec = spec;
  std::size_t n = static_cast<std::size_t>(spec.cells) * spec.cells;
  grid.density.assign(n, 0.0);
  grid.force.assign(n, Vec2{});
  return grid;
}

}  // namespace

FieldGrid deposit(std::span<const Vec2> positions, const GridSpec& spec) {
  if (positions.empty()) throw ContractViolation("deposit: need at least one particle");
  FieldGrid grid = empty_grid(spec);
  deposit_into(positions, 1.0 / static_cast<double>(positions.size()), spec, grid.density, grid.leaked);
  finish_deposit(grid);
  return grid;
}

// ---------------------------------------------------------------------------
// Kernel weights

namespace {

template <unsigned N>
struct GaussRule {
  std::array<double, N> x{};  // nodes on [0, 1]
  std::array<double, N> w{};
  GaussRule() {
    using G = boost::math::quadrature::gauss<double, N>;
    const auto& ab = G::abscissa();
    const auto& wt = G::weights();
    unsigned k = 0;
    for (unsigned i = 0; i < ab.size(); ++i) {
      if (ab[i] == 0.0) {
        x[k] = 0.5, w[k++] = 0.5 * wt[i];
        continue;
      }
      x[k] = 0.5 * (1.0 - ab[i]), w[k++] = 0.5 * wt[i];
      x[k] = 0.5 * (1.0 + ab[i]), w[k++] = 0.5 * wt[i];
    }
  }
};

const GaussRule<20>& rule20() {
  static const GaussRule<20> r;
  return r;
}
const GaussRule<10>& rule10() {
  static const GaussRule<10> r;
  return r;
}

double wrap_angle(double t) {
  while (t > std::numbers::pi) t -= 2 * std::numbers::pi;
  while (t <= -std::numbers::pi) t += 2 * std::numbers::pi;
  return t;
}

// Hat factor on one unit square: (ax + gx wx)(ay + gy wy).
struct HatPiece {
  double ax, gx, ay, gy;
};

// Fan of triangles from the origin to each edge of the square, integrated
// in polar form: exact in r, Gauss-Legendre in theta between the angles
// where the edge crosses the cut-off circle.
Vec2 polar_square(int sx, int sy, const HatPiece& h, double eps) {
  const std::array<Vec2, 4> v = {Vec2{double(sx), double(sy)}, Vec2{double(sx + 1), double(sy)},
                                 Vec2{double(sx + 1), double(sy + 1)}, Vec2{double(sx), double(sy + 1)}};
  const auto& gl = rule20();
  Vec2 total{};
  for (int e = 0; e < 4; ++e) {
    Vec2 a = v[e], b = v[(e + 1) % 4];
    double cross = a.x * b.y - a.y * b.x;
    if (cross == 0.0) continue;
    Vec2 dir = b - a;
    double len = norm(dir);
    Vec2 u = (1.0 / len) * dir;
    Vec2 foot = a - dot(a, u) * u;
    double p = std::abs(cross) / len;
    double tn = std::atan2(foot.y, foot.x);
    double t1 = std::atan2(a.y, a.x);
    double span = std::atan2(cross, dot(a, b));
    std::vector<double> cuts = {0.0, 1.0};
    if (p < eps) {
      double phi = std::acos(p / eps);
      for (double c : {tn + phi, tn - phi}) {
        double t = wrap_angle(c - t1) / span;
        if (t > 0.0 && t < 1.0) cuts.push_back(t);
      }
    }
    std::sort(cuts.begin(), cuts.end());
    for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
      double lo = cuts[k], hi = cuts[k + 1];
      for (std::size_t q = 0; q < gl.x.size(); ++q) {
        double th = t1 + span * (lo + (hi - lo) * gl.x[q]);
        double c = std::cos(th), s = std::sin(th);
        double r = p / std::cos(th - tn);
        double c0 = h.ax * h.ay;
        double c1 = h.ax * h.gy * s + h.ay * h.gx * c;
        double c2 = h.gx * h.gy * c * s;
        double ri = std::min(eps, r);
        double radial = 0.0;
        if (eps > 0.0) {
          double r3 = ri * ri * ri;
          radial += (c0 * r3 / 3.0 + c1 * r3 * ri / 4.0 + c2 * r3 * ri * ri / 5.0) / (eps * eps);
        }
        if (r > ri)
          radial += c0 * (r - ri) + c1 * (r * r - ri * ri) / 2.0 + c2 * (r * r * r - ri * ri * ri) / 3.0;
        double wgt = gl.w[q] * (hi - lo) * span * radial;
        total += Vec2{wgt * c, wgt * s};
      }
    }
  }
  return total;
}

template <unsigned N>
Vec2 tensor_square(int sx, int sy, const HatPiece& h, const GaussRule<N>& gl) {
  Vec2 total{};
  for (unsigned i = 0; i < N; ++i) {
    double wx = sx + gl.x[i];
    double hx = h.ax + h.gx * wx;
    for (unsigned j = 0; j < N; ++j) {
      double wy = sy + gl.x[j];
      double lam = hx * (h.ay + h.gy * wy);
      double s = gl.w[i] * gl.w[j] * lam / (wx * wx + wy * wy);
      total += Vec2{s * wx, s * wy};
    }
  }
  return total;
}

}  // namespace

Vec2 tent_kernel(int dx, int dy, double a, double eps) {
  Vec2 total{};
  for (int sx : {dx - 1, dx}) {
    for (int sy : {dy - 1, dy}) {
      HatPiece h{sx == dx - 1 ? 1.0 - dx : 1.0 + dx, sx == dx - 1 ? 1.0 : -1.0,
                 sy == dy - 1 ? 1.0 - dy : 1.0 + dy, sy == dy - 1 ? 1.0 : -1.0};
      int gx = std::max({0, sx, -sx - 1});
      int gy = std::max({0, sy, -sy - 1});
      double dist = std::sqrt(double(gx) * gx + double(gy) * gy);
      if (dist == 0.0 || dist < eps)
        total += polar_square(sx, sy, h, eps);
      else if (dist < 3.0)
        total += tensor_square(sx, sy, h, rule20());
      else
        total += tensor_square(sx, sy, h, rule10());
    }
  }
  return a * total;
}

// ---------------------------------------------------------------------------
// Field solver

namespace {
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

struct FieldSolver::Plan {
  int padded = 0;
  fftw_plan forward = nullptr;
  fftw_plan backward = nullptr;
  fftw_complex* kx = nullptr;
  fftw_complex* ky = nullptr;

  std::size_t real_size() const { return static_cast<std::size_t>(padded) * padded; }
  std::size_t complex_size() const { return static_cast<std::size_t>(padded) * (padded / 2 + 1); }

  ~Plan() {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    if (forward) fftw_destroy_plan(forward);
    if (backward) fftw_destroy_plan(backward);
    fftw_free(kx);
    fftw_free(ky);
  }
};

FieldSolver::FieldSolver(const GridSpec& spec, const ForceParams& params, KernelKind kind)
    : spec_(spec), plan_(std::make_unique<Plan>()) {
  spec.validate();
  const int g = spec.cells;
  const double h = spec.cell_size();
  const double a = params.a();
  const double eps_cells = kind == KernelKind::cutoff ? params.cutoff() / h : 0.0;

  if (kind == KernelKind::cutoff && params.cutoff() < h) {
    std::ostringstream msg;
    msg << "cut-off radius " << params.cutoff() << " is below the cell size " << h
        << ": the inner branch is not resolved by the grid";
    diagnostics_.push_back(msg.str());
  }

  // Quadrant values, then odd extension in each coordinate.
  std::vector<Vec2> quad(static_cast<std::size_t>(g) * g);
  for (int dy = 0; dy < g; ++dy)
    for (int dx = 0; dx < g; ++dx) {
      Vec2 v;
      if (spec.sampling == KernelSampling::tent) {
        v = (1.0 / h) * tent_kernel(dx, dy, a, eps_cells);
      } else {
        Vec2 q{dx * h, dy * h};
        v = kind == KernelKind::cutoff ? pair_force(q, params) : coulomb_force(q, a);
      }
      quad[static_cast<std::size_t>(dy) * g + dx] = v;
    }
  const int w = 2 * g - 1;
  kernel_.assign(static_cast<std::size_t>(w) * w, Vec2{});
  for (int dy = -(g - 1); dy < g; ++dy)
    for (int dx = -(g - 1); dx < g; ++dx) {
      Vec2 v = quad[static_cast<std::size_t>(std::abs(dy)) * g + std::abs(dx)];
      double sx = dx > 0 ? 1.0 : (dx < 0 ? -1.0 : 0.0);
      double sy = dy > 0 ? 1.0 : (dy < 0 ? -1.0 : 0.0);
      kernel_[static_cast<std::size_t>(dy + g - 1) * w + (dx + g - 1)] = {sx * v.x, sy * v.y};
    }

  Plan& pl = *plan_;
  pl.padded = 2 * g;
  const int n = pl.padded;
  double* buf = fftw_alloc_real(pl.real_size());
  fftw_complex* spec_buf = fftw_alloc_complex(pl.complex_size());
  pl.kx = fftw_alloc_complex(pl.complex_size());
  pl.ky = fftw_alloc_complex(pl.complex_size());
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    pl.forward = fftw_plan_dft_r2c_2d(n, n, buf, spec_buf, FFTW_ESTIMATE);
    pl.backward = fftw_plan_dft_c2r_2d(n, n, spec_buf, buf, FFTW_ESTIMATE);
  }
  for (int comp = 0; comp < 2; ++comp) {
    std::fill(buf, buf + pl.real_size(), 0.0);
    for (int dy = -(g - 1); dy < g; ++dy)
      for (int dx = -(g - 1); dx < g; ++dx) {
        Vec2 v = weight(dx, dy);
        int ry = (dy + n) % n, rx = (dx + n) % n;
        buf[static_cast<std::size_t>(ry) * n + rx] = comp == 0 ? v.x : v.y;
      }
    fftw_execute_dft_r2c(pl.forward, buf, comp == 0 ? pl.kx : pl.ky);
  }
  fftw_free(buf);
  fftw_free(spec_buf);
}

FieldSolver::~FieldSolver() = default;

Vec2 FieldSolver::weight(int dx, int dy) const {
  const int g = spec_.cells;
  if (std::abs(dx) >= g || std::abs(dy) >= g) throw ContractViolation("FieldSolver::weight: offset out of range");
  return kernel_[static_cast<std::size_t>(dy + g - 1) * (2 * g - 1) + (dx + g - 1)];
}

void FieldSolver::solve(FieldGrid& grid) const {
  if (!(grid.spec == spec_)) throw ContractViolation("FieldSolver::solve: grid spec mismatch");
  const Plan& pl = *plan_;
  const int g = spec_.cells;
  const int n = pl.padded;
  const std::size_t nc = pl.complex_size();
  double* in = fftw_alloc_real(pl.real_size());
  double* out = fftw_alloc_real(pl.real_size());
  fftw_complex* rho = fftw_alloc_complex(nc);
  fftw_complex* prod = fftw_alloc_complex(nc);
  std::fill(in, in + pl.real_size(), 0.0);
  for (int iy = 0; iy < g; ++iy)
    for (int ix = 0; ix < g; ++ix)
      in[static_cast<std::size_t>(iy) * n + ix] = grid.density[static_cast<std::size_t>(iy) * g + ix];
  fftw_execute_dft_r2c(pl.forward, in, rho);
  const double scale = 1.0 / (static_cast<double>(n) * n);
  for (int comp = 0; comp < 2; ++comp) {
    const fftw_complex* k = comp == 0 ? pl.kx : pl.ky;
    for (std::size_t i = 0; i < nc; ++i) {
      prod[i][0] = rho[i][0] * k[i][0] - rho[i][1] * k[i][1];
      prod[i][1] = rho[i][0] * k[i][1] + rho[i][1] * k[i][0];
    }
    fftw_execute_dft_c2r(pl.backward, prod, out);
    for (int iy = 0; iy < g; ++iy)
      for (int ix = 0; ix < g; ++ix) {
        double v = out[static_cast<std::size_t>(iy) * n + ix] * scale;
        Vec2& f = grid.force[static_cast<std::size_t>(iy) * g + ix];
        (comp == 0 ? f.x : f.y) = v;
      }
  }
  fftw_free(in);
  fftw_free(out);
  fftw_free(rho);
  fftw_free(prod);
}

Vec2 direct_field(const FieldGrid& grid, const FieldSolver& solver, int ix, int iy) {
  const int g = grid.spec.cells;
  Vec2 f{};
  for (int jy = 0; jy < g; ++jy)
    for (int jx = 0; jx < g; ++jx) {
      double m = grid.density[static_cast<std::size_t>(jy) * g + jx];
      if (m != 0.0) f += m * solver.weight(ix - jx, iy - jy);
    }
  return f;
}

// ---------------------------------------------------------------------------
// Interpolation and flows

FieldSample interpolate(const FieldGrid& grid, double a, Vec2 x) {
  const GridSpec& s = grid.spec;
  const int g = s.cells;
  const double inv_h = 1.0 / s.cell_size();
  double sx = (x.x + s.half_width) * inv_h - 0.5;
  double sy = (x.y + s.half_width) * inv_h - 0.5;
  if (!(sx >= 0.0 && sy >= 0.0 && sx <= g - 1 && sy <= g - 1))
    return {coulomb_force(x - grid.centroid, a * grid.mass()), true};
  int ix = std::min(static_cast<int>(sx), g - 2);
  int iy = std::min(static_cast<int>(sy), g - 2);
  double fx = sx - ix, fy = sy - iy;
  const Vec2* row0 = &grid.force[static_cast<std::size_t>(iy) * g + ix];
  const Vec2* row1 = row0 + g;
  Vec2 f = ((1.0 - fx) * (1.0 - fy)) * row0[0] + (fx * (1.0 - fy)) * row0[1] + ((1.0 - fx) * fy) * row1[0] +
           (fx * fy) * row1[1];
  return {f, false};
}

FieldSample interpolate(const MeanFieldSeries& series, Vec2 x, double t) {
  if (series.fields.empty()) throw ContractViolation("interpolate: empty series");
  const double end = series.end_time();
  if (!(t >= -1e-12) || t > end + 1e-9 * std::max(1.0, end))
    throw ContractViolation("interpolate: time outside the series");
  const std::size_t last = series.fields.size() - 1;
  double u = last == 0 ? 0.0 : std::clamp(t / series.dt_field, 0.0, static_cast<double>(last));
  std::size_t k = static_cast<std::size_t>(std::floor(u));
  double w = u - static_cast<double>(k);
  if (w < 1e-9) w = 0.0;
  if (w > 1.0 - 1e-9) ++k, w = 0.0;
  if (k >= last) k = last, w = 0.0;
  const double a = series.params.a();
  FieldSample f0 = interpolate(series.fields[k], a, x);
  if (w == 0.0) return f0;
  FieldSample f1 = interpolate(series.fields[k + 1], a, x);
  return {(1.0 - w) * f0.force + w * f1.force, f0.extrapolated || f1.extrapolated};
}

namespace {

std::size_t step_count(double dt, double t_end) {
  if (!std::isfinite(dt) || !(dt > 0.0)) throw DomainError("time step must be positive");
  if (!std::isfinite(t_end) || t_end < 0.0) throw DomainError("end time must be nonnegative");
  double k = std::round(t_end / dt);
  if (std::abs(k * dt - t_end) > 1e-9 * std::max(1.0, t_end))
    throw ContractViolation("end time must be a whole number of steps");
  return static_cast<std::size_t>(k);
}

}  // namespace

std::vector<double> snapshot_times(double dt, double t_end, std::size_t stride) {
  std::size_t steps = step_count(dt, t_end);
  if (stride == 0 || steps % stride != 0) throw ContractViolation("stride must divide the step count");
  std::vector<double> t;
  for (std::size_t k = 0; k <= steps; k += stride) t.push_back(static_cast<double>(k) * dt);
  return t;
}

TrackSet::TrackSet(std::size_t particles, std::vector<double> snapshot_times)
    : times(std::move(snapshot_times)), n(particles) {
  q.assign(n * times.size(), Vec2{});
  p.assign(n * times.size(), Vec2{});
  extrapolated.assign(n, 0);
}

PhaseState TrackSet::snapshot(std::size_t s) const {
  PhaseState st(n);
  for (std::size_t i = 0; i < n; ++i) st.q[i] = q_at(i, s), st.p[i] = p_at(i, s);
  return st;
}

bool TrackSet::any_extrapolated() const {
  return std::any_of(extrapolated.begin(), extrapolated.end(), [](std::uint8_t e) { return e != 0; });
}

namespace {

void flow_into(TrackSet& out, std::size_t i, Vec2 q, Vec2 p, const MeanFieldSeries& series, double dt,
               std::size_t steps, std::size_t stride) {
  bool flag = false;
  out.q_at(i, 0) = q;
  out.p_at(i, 0) = p;
  FieldSample f = interpolate(series, q, 0.0);
  flag |= f.extrapolated;
  for (std::size_t k = 0; k < steps; ++k) {
    p += (0.5 * dt) * f.force;
    q += dt * p;
    f = interpolate(series, q, static_cast<double>(k + 1) * dt);
    flag |= f.extrapolated;
    p += (0.5 * dt) * f.force;
    if ((k + 1) % stride == 0) {
      out.q_at(i, (k + 1) / stride) = q;
      out.p_at(i, (k + 1) / stride) = p;
    }
  }
  out.extrapolated[i] = flag ? 1 : 0;
}

}  // namespace

TrackSet lift_flow(const PhaseState& state0, const MeanFieldSeries& series, double dt, std::size_t stride,
                   double t_end, unsigned threads) {
  if (state0.q.size() != state0.p.size()) throw ContractViolation("lift_flow: malformed state");
  if (t_end < 0.0) t_end = series.end_time();
  std::vector<double> times = snapshot_times(dt, t_end, stride);
  std::size_t steps = step_count(dt, t_end);
  if (t_end > series.end_time() + 1e-9 * std::max(1.0, t_end))
    throw ContractViolation("lift_flow: series does not cover the requested interval");
  TrackSet out(state0.size(), std::move(times));
  parallel_for(state0.size(), threads,
               [&](std::size_t i) { flow_into(out, i, state0.q[i], state0.p[i], series, dt, steps, stride); });
  return out;
}

TrackSet flow_phi(Vec2 q0, Vec2 p0, const MeanFieldSeries& series, double dt, std::size_t stride,
                  double t_end) {
  PhaseState s({q0}, {p0});
  return lift_flow(s, series, dt, stride, t_end, 1);
}

// ---------------------------------------------------------------------------
// Reference ensemble

namespace {

constexpr std::size_t kDepositBlocks = 8;
constexpr double kBlowUp = 1e6;

FieldGrid build_field(std::span<const Vec2> q, const GridSpec& spec, const FieldSolver& solver, unsigned threads,
                      double t) {
  FieldGrid grid = empty_grid(spec);
  const std::size_t m = q.size();
  const double w = 1.0 / static_cast<double>(m);
  std::vector<std::vector<double>> parts(kDepositBlocks);
  std::vector<double> leaks(kDepositBlocks, 0.0);
  parallel_for(
      kDepositBlocks, threads,
      [&](std::size_t b) {
        parts[b].assign(grid.density.size(), 0.0);
        std::size_t lo = b * m / kDepositBlocks, hi = (b + 1) * m / kDepositBlocks;
        deposit_into(q.subspan(lo, hi - lo), w, spec, parts[b], leaks[b]);
      },
      1);
  for (std::size_t b = 0; b < kDepositBlocks; ++b) {
    for (std::size_t i = 0; i < grid.density.size(); ++i) grid.density[i] += parts[b][i];
    grid.leaked += leaks[b];
  }
  finish_deposit(grid);
  solver.solve(grid);
  for (const Vec2& f : grid.force)
    if (!(norm(f) <= kBlowUp)) {
      std::ostringstream msg;
      msg << "self-consistent field exceeded " << kBlowUp << " at t = " << t
          << " (attractive collapse); reference run aborted";
      throw FieldBlowUp(msg.str());
    }
  return grid;
}

}  // namespace

MeanFieldSeries evolve_reference(const DensityModel& model, const ForceParams& params, std::uint64_t m,
                                 double dt, double t_end, const GridSpec& grid, std::uint64_t seed,
                                 KernelKind kind, unsigned threads) {
  if (m < 1) throw ContractViolation("evolve_reference: M must be >= 1");
  std::size_t steps = step_count(dt, t_end);
  grid.validate();
  PhaseState st = sample(model, m, seed);
  FieldSolver solver(grid, params, kind);

  MeanFieldSeries s;
  s.grid = grid;
  s.dt_field = dt;
  s.ref_count = m;
  s.params = params;
  s.kernel = kind;
  s.seed = seed;
  s.diagnostics = solver.diagnostics();
  if (kind == KernelKind::cutoff && m < 4 * params.n())
    s.diagnostics.push_back("reference ensemble M = " + std::to_string(m) + " is below 4N = " +
                            std::to_string(4 * params.n()));
  if (params.a() < 0.0) s.diagnostics.push_back("attractive coupling: experimental");

  const double a = params.a();
  std::vector<Vec2> force(m);
  auto sample_forces = [&](const FieldGrid& g) {
    parallel_for(m, threads, [&](std::size_t i) { force[i] = interpolate(g, a, st.q[i]).force; }, 1024);
  };

  auto mean_momentum = [&] {
    Vec2 total{};
    for (const Vec2& v : st.p) total += v;
    return (1.0 / static_cast<double>(m)) * total;
  };

  s.fields.push_back(build_field(st.q, grid, solver, threads, 0.0));
  s.times.push_back(0.0);
  s.momentum.push_back(mean_momentum());
  sample_forces(s.fields.back());
  for (std::size_t k = 0; k < steps; ++k) {
    parallel_for(
        m, threads,
        [&](std::size_t i) {
          st.p[i] += (0.5 * dt) * force[i];
          st.q[i] += dt * st.p[i];
        },
        4096);
    double t = static_cast<double>(k + 1) * dt;
    s.fields.push_back(build_field(st.q, grid, solver, threads, t));
    s.times.push_back(t);
    sample_forces(s.fields.back());
    parallel_for(m, threads, [&](std::size_t i) { st.p[i] += (0.5 * dt) * force[i]; }, 4096);
    s.momentum.push_back(mean_momentum());
  }
  return s;
}

TrackSet flow_phi_infinity(Vec2 q0, Vec2 p0, const DensityModel& model, double a, std::uint64_t m, double dt,
                           double t_end, const GridSpec& grid, std::uint64_t seed, std::size_t stride) {
  MeanFieldSeries s = evolve_reference(model, ForceParams(a, 1.0, 1), m, dt, t_end, grid, seed,
                                       KernelKind::coulomb);
  return flow_phi(q0, p0, s, dt, stride, t_end);
}

bool MeanFieldSeries::operator==(const MeanFieldSeries& o) const {
  return grid == o.grid && dt_field == o.dt_field && ref_count == o.ref_count && params.a() == o.params.a() &&
         params.beta() == o.params.beta() && params.n() == o.params.n() && kernel == o.kernel &&
         seed == o.seed && times == o.times && momentum == o.momentum && fields == o.fields;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {
constexpr char kSeriesMagic[9] = "MFLSER01";
}

void write_series(const std::string& path, const MeanFieldSeries& s, FieldPrecision precision) {
  detail::ByteWriter w;
  w.put_bytes(kSeriesMagic, 8);
  w.put<std::uint32_t>(precision == FieldPrecision::f32 ? 0 : 1);
  w.put<std::uint32_t>(s.grid.sampling == KernelSampling::point ? 0 : 1);
  w.put<std::uint32_t>(s.kernel == KernelKind::cutoff ? 0 : 1);
  w.put<std::int32_t>(s.grid.cells);
  w.put<double>(s.grid.half_width);
  w.put<double>(s.dt_field);
  w.put<std::uint64_t>(s.ref_count);
  w.put<double>(s.params.a());
  w.put<double>(s.params.beta());
  w.put<std::uint64_t>(s.params.n());
  w.put<std::uint64_t>(s.seed);
  w.put<std::uint64_t>(s.fields.size());
  auto value = [&](double v) {
    if (precision == FieldPrecision::f32)
      w.put<float>(static_cast<float>(v));
    else
      w.put<double>(v);
  };
  for (std::size_t k = 0; k < s.fields.size(); ++k) {
    const FieldGrid& g = s.fields[k];
    w.put<double>(s.times[k]);
    w.put<double>(g.leaked);
    w.put<double>(g.centroid.x);
    w.put<double>(g.centroid.y);
    Vec2 mom = k < s.momentum.size() ? s.momentum[k] : Vec2{};
    w.put<double>(mom.x);
    w.put<double>(mom.y);
    for (double d : g.density) value(d);
    for (const Vec2& f : g.force) value(f.x), value(f.y);
  }
  w.finish(path);
}

MeanFieldSeries read_series(const std::string& path) {
  detail::ByteReader r(path);
  r.expect_magic(kSeriesMagic);
  MeanFieldSeries s;
  auto prec = r.get<std::uint32_t>();
  auto samp = r.get<std::uint32_t>();
  auto kern = r.get<std::uint32_t>();
  if (prec > 1 || samp > 1 || kern > 1) throw CorruptContainer("series header has an unknown enum value");
  s.grid.sampling = samp == 0 ? KernelSampling::point : KernelSampling::tent;
  s.kernel = kern == 0 ? KernelKind::cutoff : KernelKind::coulomb;
  s.grid.cells = r.get<std::int32_t>();
  s.grid.half_width = r.get<double>();
  s.dt_field = r.get<double>();
  s.ref_count = r.get<std::uint64_t>();
  double a = r.get<double>();
  double beta = r.get<double>();
  auto n = r.get<std::uint64_t>();
  s.seed = r.get<std::uint64_t>();
  auto count = r.get<std::uint64_t>();
  try {
    s.grid.validate();
    s.params = ForceParams(a, beta, n);
  } catch (const DomainError& e) {
    throw CorruptContainer(std::string("series header is invalid: ") + e.what());
  }
  const std::size_t cells = static_cast<std::size_t>(s.grid.cells) * s.grid.cells;
  auto value = [&]() -> double { return prec == 0 ? static_cast<double>(r.get<float>()) : r.get<double>(); };
  if (count > (1u << 24)) throw CorruptContainer("series header claims too many snapshots");
  for (std::uint64_t k = 0; k < count; ++k) {
    FieldGrid g;
    g.spec = s.grid;
    s.times.push_back(r.get<double>());
    g.leaked = r.get<double>();
    g.centroid.x = r.get<double>();
    g.centroid.y = r.get<double>();
    double mx = r.get<double>();
    double my = r.get<double>();
    s.momentum.push_back({mx, my});
    g.density.resize(cells);
    g.force.resize(cells);
    for (auto& d : g.density) d = value();
    for (auto& f : g.force) f.x = value(), f.y = value();
    s.fields.push_back(std::move(g));
  }
  if (!r.at_end()) throw CorruptContainer("series container has trailing bytes");
  return s;
}

void quantize_f32(MeanFieldSeries& series) {
  auto q = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  for (auto& g : series.fields) {
    for (auto& d : g.density) d = q(d);
    for (auto& f : g.force) f = {q(f.x), q(f.y)};
  }
}

}  // namespace mflab
