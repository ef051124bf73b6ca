#include "mflab/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "binary_io.hpp"
#include "mflab/errors.hpp"
#include "mflab/parallel.hpp"

namespace mflab {

double default_time_step(const ForceParams& p, const DensityModel& model) {
  model.validate();
  return std::min(1e-2, 0.1 * p.cutoff() / (4.0 * model.velocity_scale));
}

namespace {

void check_finite(const PhaseState& s) {
  for (std::size_t i = 0; i < s.size(); ++i)
    if (!is_finite(s.q[i]) || !is_finite(s.p[i]))
      throw IntegratorBlowUp(i, "integrator produced a non-finite state at particle " + std::to_string(i));
}

void check_step(double dt) {
  if (!std::isfinite(dt) || dt == 0.0) throw DomainError("time step must be finite and nonzero");
}

}  // namespace

NewtonIntegrator::NewtonIntegrator(PhaseState state, const ForceParams& p, ForceMethod method, unsigned threads)
    : state_(std::move(state)), params_(p), method_(method), threads_(threads) {
  if (state_.q.size() != state_.p.size()) throw ContractViolation("NewtonIntegrator: malformed state");
  force_ = total_force(state_, params_, method_, threads_);
}

void NewtonIntegrator::step(double dt) {
  check_step(dt);
  const std::size_t n = state_.size();
  const double half = 0.5 * dt;
  for (std::size_t i = 0; i < n; ++i) {
    state_.p[i] += half * force_[i];
    state_.q[i] += dt * state_.p[i];
  }
  check_finite(state_);
  force_ = total_force(state_, params_, method_, threads_);
  for (std::size_t i = 0; i < n; ++i) state_.p[i] += half * force_[i];
  check_finite(state_);
}

PhaseState step_newton(const PhaseState& state, const ForceParams& p, double dt, ForceMethod method,
                       unsigned threads) {
  check_step(dt);
  NewtonIntegrator it(state, p, method, threads);
  it.step(dt);
  return it.state();
}

double system_energy(const PhaseState& s, const ForceParams& p) {
  if (s.q.size() != s.p.size()) throw ContractViolation("system_energy: malformed state");
  const std::size_t n = s.size();
  double kin = 0.0;
  for (const Vec2& v : s.p) kin += 0.5 * norm2(v);
  if (!s.valid()) throw DomainError("system_energy: non-finite state");
  const double c2 = p.cutoff() * p.cutoff();
  const double inner0 = -p.a() * std::log(p.cutoff()), slope = -0.5 * p.a() * p.n_pow_2beta();
  // outer pairs: one log per product of up to 8 squared distances, flushed
  // early before the product can leave the normal range
  double quad = 0.0, logs = 0.0, prod = 1.0;
  int held = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      Vec2 d = s.q[i] - s.q[j];
      double r2 = norm2(d);
      if (r2 <= c2) {
        quad += slope * (r2 - c2) + inner0;
      } else {
        prod *= r2;
        if (++held == 8 || prod > 1e150 || prod < 1e-150) logs += std::log(prod), prod = 1.0, held = 0;
      }
    }
  logs += std::log(prod);
  double pot = quad - 0.5 * p.a() * logs;
  return kin + pot / static_cast<double>(p.n());
}

Vec2 total_momentum(const PhaseState& s) {
  Vec2 t{};
  for (const Vec2& v : s.p) t += v;
  return t;
}

TrajectoryPair run_pair(const PhaseState& state0, const ForceParams& p, const MeanFieldSeries& series, double dt,
                        double t_end, std::size_t stride, ForceMethod method, unsigned threads) {
  if (!state0.valid()) throw ContractViolation("run_pair: initial state is malformed or non-finite");
  std::vector<double> times = snapshot_times(dt, t_end, stride);
  const std::size_t steps = (times.size() - 1) * stride;

  TrajectoryPair out;
  out.params = p;
  out.dt = dt;
  out.stride = stride;
  out.meta.ref_count = series.ref_count;
  out.phi = lift_flow(state0, series, dt, stride, t_end, threads);
  out.psi = TrackSet(state0.size(), times);

  NewtonIntegrator it(state0, p, method, threads);
  auto record = [&](std::size_t s) {
    const PhaseState& st = it.state();
    for (std::size_t i = 0; i < st.size(); ++i) {
      out.psi.q_at(i, s) = st.q[i];
      out.psi.p_at(i, s) = st.p[i];
    }
  };
  record(0);
  for (std::size_t k = 1; k <= steps; ++k) {
    it.step(dt);
    if (k % stride == 0) record(k / stride);
  }
  return out;
}

namespace {
constexpr char kTrajMagic[9] = "MFLTRJ01";

void put_tracks(detail::ByteWriter& w, const TrackSet& t) {
  for (const Vec2& v : t.q) w.put(v.x), w.put(v.y);
  for (const Vec2& v : t.p) w.put(v.x), w.put(v.y);
  for (std::uint8_t e : t.extrapolated) w.put(e);
}

void get_tracks(detail::ByteReader& r, TrackSet& t) {
  for (Vec2& v : t.q) v.x = r.get<double>(), v.y = r.get<double>();
  for (Vec2& v : t.p) v.x = r.get<double>(), v.y = r.get<double>();
  for (std::uint8_t& e : t.extrapolated) e = r.get<std::uint8_t>();
}
}  // namespace

void write_trajectory(const std::string& path, const TrajectoryPair& pair) {
  detail::ByteWriter w;
  w.put_bytes(kTrajMagic, 8);
  w.put<std::uint64_t>(pair.size());
  w.put<std::uint64_t>(pair.times().size());
  w.put<std::uint64_t>(pair.stride);
  w.put<double>(pair.dt);
  w.put<double>(pair.params.a());
  w.put<double>(pair.params.beta());
  w.put<std::uint64_t>(pair.params.n());
  w.put<std::uint64_t>(pair.meta.seed);
  w.put<std::uint32_t>(pair.meta.model.kind == DensityModel::Kind::gaussian_product ? 0 : 1);
  w.put<double>(pair.meta.model.position_scale);
  w.put<double>(pair.meta.model.velocity_scale);
  w.put<std::uint64_t>(pair.meta.ref_count);
  for (double t : pair.times()) w.put(t);
  put_tracks(w, pair.psi);
  put_tracks(w, pair.phi);
  w.finish(path);
}

TrajectoryPair read_trajectory(const std::string& path) {
  detail::ByteReader r(path);
  r.expect_magic(kTrajMagic);
  TrajectoryPair pair;
  auto n = r.get<std::uint64_t>();
  auto steps = r.get<std::uint64_t>();
  if (n > (1ull << 32) || steps > (1ull << 32)) throw CorruptContainer("trajectory header is implausible");
  pair.stride = r.get<std::uint64_t>();
  pair.dt = r.get<double>();
  double a = r.get<double>();
  double beta = r.get<double>();
  auto pn = r.get<std::uint64_t>();
  pair.meta.seed = r.get<std::uint64_t>();
  auto kind = r.get<std::uint32_t>();
  if (kind > 1) throw CorruptContainer("trajectory header has an unknown density kind");
  pair.meta.model.kind = kind == 0 ? DensityModel::Kind::gaussian_product : DensityModel::Kind::uniform_disk_maxwellian;
  pair.meta.model.position_scale = r.get<double>();
  pair.meta.model.velocity_scale = r.get<double>();
  pair.meta.ref_count = r.get<std::uint64_t>();
  try {
    pair.params = ForceParams(a, beta, pn);
  } catch (const DomainError& e) {
    throw CorruptContainer(std::string("trajectory header is invalid: ") + e.what());
  }
  std::vector<double> times(steps);
  for (double& t : times) t = r.get<double>();
  pair.psi = TrackSet(n, times);
  pair.phi = TrackSet(n, times);
  get_tracks(r, pair.psi);
  get_tracks(r, pair.phi);
  if (!r.at_end()) throw CorruptContainer("trajectory container has trailing bytes");
  return pair;
}

void write_trajectory_csv(const std::string& path, const TrajectoryPair& pair) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "time,max_phase_dev,mean_phase_dev,max_pos_dev,max_mom_dev,psi_energy\n";
  out << std::setprecision(17);
  for (std::size_t s = 0; s < pair.times().size(); ++s) {
    double mx = 0, mean = 0, mq = 0, mp = 0;
    for (std::size_t i = 0; i < pair.size(); ++i) {
      double dq = norm(pair.psi.q_at(i, s) - pair.phi.q_at(i, s));
      double dp = norm(pair.psi.p_at(i, s) - pair.phi.p_at(i, s));
      double d = std::max(dq, dp);
      mx = std::max(mx, d), mq = std::max(mq, dq), mp = std::max(mp, dp);
      mean += d;
    }
    if (pair.size() > 0) mean /= static_cast<double>(pair.size());
    out << pair.times()[s] << ',' << mx << ',' << mean << ',' << mq << ',' << mp << ','
        << system_energy(pair.psi.snapshot(s), pair.params) << '\n';
  }
}

}  // namespace mflab
