// Acceptance run: one verdict line per criterion, tolerances pinned here.
// Usage: mflab-acceptance [--criterion K ...] [--threads T] [--cache DIR]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mflab/classify.hpp"
#include "mflab/dynamics.hpp"
#include "mflab/forces.hpp"
#include "mflab/harness.hpp"
#include "mflab/meanfield.hpp"
#include "mflab/metrics.hpp"
#include "mflab/rng.hpp"

using namespace mflab;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeed = 1;  // acceptance seed; calibration runs use another

struct Verdict {
  std::vector<CheckLine> lines;
  void add(std::string name, bool pass, std::string detail = {}) {
    lines.push_back({std::move(name), pass, std::move(detail)});
  }
  void add(const std::vector<CheckLine>& more) { lines.insert(lines.end(), more.begin(), more.end()); }
  bool pass() const {
    return std::all_of(lines.begin(), lines.end(), [](const CheckLine& l) { return l.pass; });
  }
};

struct Context {
  unsigned threads = 1;
  std::string cache;
  std::string out;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double calibration(const std::string& name) {
  std::ifstream in(fs::path(MFLAB_CALIBRATION_DIR) / (name + ".json"));
  if (!in) throw std::runtime_error("missing calibration artifact " + name);
  nlohmann::json j;
  in >> j;
  return j.at("value").get<double>();
}

Vec2 unit(double ang) { return {std::cos(ang), std::sin(ang)}; }

// 1: kernel branches and the Lipschitz transfer
Verdict kernels(const Context&) {
  Verdict v;
  Engine rng = make_engine(derive_seed(kSeed, {1}));
  std::uniform_real_distribution<double> u(0.0, 1.0);

  double worst = 0.0;
  for (int k = 0; k < 10000; ++k) {
    ForceParams p(std::exp(4.0 * u(rng) - 2.0), 0.05 + 1.95 * u(rng),
                  1 + static_cast<std::uint64_t>(std::exp(u(rng) * std::log(1e5))));
    Vec2 q = p.cutoff() * unit(2.0 * std::numbers::pi * u(rng));
    Vec2 in = pair_force_inner(q, p), out = pair_force_outer(q, p);
    worst = std::max(worst, norm(in - out) / std::max(norm(in), norm(out)));
  }
  v.add("force branches agree on the cut-off circle", worst <= 1e-12, "max relative gap " + num(worst));

  double gap = 0.0;
  for (int k = 0; k < 10000; ++k) {
    ForceParams p(1.0, 0.05 + 1.95 * u(rng), 1 + static_cast<std::uint64_t>(std::exp(u(rng) * std::log(1e5))));
    double inner = 2.0 * p.n_pow_2beta();
    double outer = 8.0 / (4.0 * p.cutoff() * p.cutoff());
    double at = fluct_bound(2.0 * p.cutoff() * unit(2.0 * std::numbers::pi * u(rng)), p);
    gap = std::max({gap, std::abs(inner - outer) / inner, std::abs(at - inner) / inner});
  }
  // both branch formulas equal 2 N^(2 beta) exactly; the two evaluations
  // differ only by the rounding of pow and a division (a few ulp)
  const double ulp8 = 8.0 * std::numeric_limits<double>::epsilon();
  v.add("fluctuation kernel continuous at twice the cut-off", gap <= ulp8,
        "max relative gap " + num(gap) + " (8 ulp = " + num(ulp8) + ")");

  const double c = calibration("lipschitz_constant");
  double ratio = 0.0;
  std::size_t checked = 0;
  while (checked < 100000) {
    ForceParams p(1.0, 0.05 + 1.95 * u(rng), 1 + static_cast<std::uint64_t>(std::exp(u(rng) * std::log(1e4))));
    double eps = p.cutoff();
    double amag = eps * std::exp(std::log(1e-2) + u(rng) * std::log(1e4));
    Vec2 a = amag * unit(2.0 * std::numbers::pi * u(rng));
    double bmag = u(rng) < 0.5 ? amag : amag * std::exp(u(rng) * std::log(4.0));
    Vec2 b = bmag * unit(2.0 * std::numbers::pi * u(rng));
    Vec2 cc = b + std::min(eps, amag / 3.0) * std::pow(u(rng), 0.25) * unit(2.0 * std::numbers::pi * u(rng));
    if (norm(cc) < amag || norm(b - cc) == 0.0) continue;
    ++checked;
    ratio = std::max(ratio, norm(pair_force(b, p) - pair_force(cc, p)) / (fluct_bound(a, p) * norm(b - cc)));
  }
  v.add("Lipschitz transfer with the frozen constant", c <= 8.0 && ratio <= c * (1.0 + 1e-12),
        "C = " + num(c) + ", largest quotient " + num(ratio) + " over 1e5 samples");
  return v;
}

// 2: tree vs naive, naive thread invariance
Verdict engines(const Context&) {
  Verdict v;
  const std::size_t n = 4096;
  ForceParams p(1.0, 1.0, n);
  double worst = 0.0, spread = 0.0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    PhaseState st = sample(DensityModel{}, n, derive_seed(kSeed, {2, s}));
    auto exact = total_force(st, p);
    auto tree = total_force(st, p, ForceMethod::tree(0.5));
    for (std::size_t j = 0; j < n; ++j)
      worst = std::max(worst, norm(tree[j] - exact[j]) / std::max(norm(exact[j]), 1e-300));
    for (unsigned t : {2u, 4u}) {
      auto other = total_force(st, p, ForceMethod::naive(), t);
      for (std::size_t j = 0; j < n; ++j)
        spread = std::max(spread, norm(other[j] - exact[j]) / std::max(norm(exact[j]), 1e-300));
    }
  }
  v.add("tree(0.5) vs naive on three N=4096 states", worst <= 1e-3, "max relative error " + num(worst));
  v.add("naive sum independent of the thread count", spread <= 1e-12, "max relative spread " + num(spread));
  return v;
}

// 3: Verlet on N=512, beta=1, a=1, T=1
Verdict integrator(const Context&) {
  Verdict v;
  const std::size_t n = 512;
  ForceParams p(1.0, 1.0, n);
  DensityModel model{};
  const double dt0 = default_time_step(p, model);
  const long steps0 = std::lround(1.0 / dt0);
  // energy error E(t) - E(0) on a shared time grid (every 40 coarse steps),
  // pooled over seeds 1..4; ratio of RMS at dt and dt/2
  double sum2[2] = {0.0, 0.0};
  std::size_t count[2] = {0, 0};
  double reversal = 0.0, momentum = 0.0;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    PhaseState s0 = sample(model, n, seed);
    const double e0 = system_energy(s0, p);
    const Vec2 p0 = total_momentum(s0);
    for (int f : {1, 2}) {
      NewtonIntegrator it(s0, p);
      const double dt = dt0 / f;
      const long every = 40L * f;
      for (long k = 1; k <= steps0 * f; ++k) {
        it.step(dt);
        if (k % every == 0) {
          double e = system_energy(it.state(), p) - e0;
          sum2[f - 1] += e * e;
          ++count[f - 1];
        }
        if (f == 1 && k % (steps0 / 4) == 0) {
          PhaseState back = step_newton(step_newton(it.state(), p, dt), p, -dt);
          for (std::size_t i = 0; i < n; ++i)
            reversal = std::max(reversal, phase_distance(back.q[i], back.p[i], it.state().q[i], it.state().p[i]));
        }
      }
      momentum = std::max(momentum, norm(total_momentum(it.state()) - p0));
    }
  }
  double ratio = std::sqrt(sum2[0] / count[0]) / std::sqrt(sum2[1] / count[1]);
  v.add("energy drift ratio under dt-halving in [3.5, 4.5]", ratio >= 3.5 && ratio <= 4.5,
        "pooled RMS ratio " + num(ratio) + " (dt = " + num(dt0) + ", seeds 1-4)");
  v.add("one step forward and back returns the state", reversal <= 1e-12, "max phase error " + num(reversal));
  v.add("total momentum drift <= 1e-10", momentum <= 1e-10, "max drift " + num(momentum));
  return v;
}

// 4: grid convolution vs direct Monte Carlo summation
Verdict solver(const Context&) {
  Verdict v;
  DensityModel model{};
  const std::uint64_t m = 1u << 16;
  ForceParams p(1.0, 1.0, 1024);
  GridSpec g{8.0, 256};
  PhaseState ens = sample(model, m, derive_seed(kSeed, {4}));
  FieldGrid grid = deposit(ens.q, g);
  FieldSolver fs(g, p);
  fs.solve(grid);
  PhaseState probes = sample(model, 100, derive_seed(kSeed, {4, 1}));
  auto direct = [&](Vec2 x) {
    Vec2 acc{};
    for (Vec2 q : ens.q) acc += pair_force(x - q, p);
    return (1.0 / static_cast<double>(m)) * acc;
  };
  double num2 = 0.0, den2 = 0.0, worst_probe = 0.0;
  for (Vec2 x : probes.q) {
    Vec2 a = interpolate(grid, p.a(), x).force, b = direct(x);
    num2 += norm2(a - b);
    den2 += norm2(b);
    worst_probe = std::max(worst_probe, norm(a - b));
  }
  double rel = std::sqrt(num2 / den2);
  v.add("grid vs direct summation at 100 probes", rel <= 0.02,
        "relative error " + num(rel) + " (l2 over all probes), largest probe gap " + num(worst_probe));

  // at the centre of a radially symmetric density the force vanishes up to
  // sampling noise: compare with 4 standard errors of the direct estimate
  Vec2 centre = interpolate(grid, p.a(), Vec2{0.0, 0.0}).force;
  double second = 0.0;
  for (Vec2 q : ens.q) second += norm2(pair_force(-1.0 * q, p));
  double stderr_ = std::sqrt(second / static_cast<double>(m) / static_cast<double>(m));
  v.add("zero force at the centre within the M^-1/2 noise bound", norm(centre) <= 4.0 * stderr_,
        "|F(0)| = " + num(norm(centre)) + ", 4 standard errors = " + num(4.0 * stderr_));
  return v;
}

ExperimentConfig base(ExperimentKind kind) {
  ExperimentConfig c;
  c.kind = kind;
  c.beta = 1.0;
  c.a = 1.0;
  c.sigma = 0.05;
  c.m = 1u << 16;
  c.grid = GridSpec{8.0, 256};
  c.master_seed = kSeed;
  return c;
}

RunOptions run_options(const Context& ctx) {
  RunOptions o;
  o.threads = ctx.threads;
  o.cache_dir = ctx.cache;
  return o;
}

void save(const Context& ctx, const EnsembleResult& r) {
  if (!ctx.out.empty()) write_result(r, ctx.out, to_string(r.config.kind));
}

// 5: deviation scaling of psi vs the lifted effective flow
Verdict deviation(const Context& ctx) {
  Verdict v;
  auto c = base(ExperimentKind::deviation_scaling);
  c.t_end = 0.5;
  c.dt = 0.01;
  c.stride = 5;
  c.n_grid = {256, 512, 1024, 2048, 4096};
  c.trials = 50;
  auto r = run_experiment(c, run_options(ctx));
  save(ctx, r);
  v.add(check_result(r));

  // step-size refinement on the first 10 trials at both ends of the grid
  auto fine = c;
  fine.dt = c.dt / 2;
  fine.stride = c.stride * 2;
  fine.n_grid = {256, 4096};
  fine.trials = 10;
  auto rf = run_experiment(fine, run_options(ctx));
  double change = 0.0;
  for (std::uint64_t n : fine.n_grid) {
    std::vector<double> coarse;
    for (auto& row : r.rows)
      if (row.n == n && row.trial < 10) coarse.push_back(row.values[0]);
    std::vector<TrialRow> sub;
    for (auto& row : r.rows)
      if (row.n == n && row.trial < 10) sub.push_back(row);
    auto s = summarize(r.columns, r.events, sub, {n});
    double a = s[0].median, b = rf.summary(n, "sup_deviation").median;
    change = std::max(change, std::abs(a - b) / b);
  }
  v.add("median stable under dt/2 (N = 256, 4096; 10 trials)", change <= 0.05, "max relative change " + num(change));
  return v;
}

// 6: collision probability against its analytic envelope
Verdict collision(const Context& ctx) {
  Verdict v;
  auto c = base(ExperimentKind::collision_prob);
  c.t_end = 0.3;
  c.dt = 0.01;
  c.n_grid = {256, 512, 1024, 2048, 4096};
  c.trials = 100000;
  c.collision = {{0.2, 0.3}, 0.1, {0.0, 0.1, 0.2}};
  auto r = run_experiment(c, run_options(ctx));
  save(ctx, r);
  CheckThresholds t;
  t.collision_constant = calibration("collision_constant");
  v.add(check_result(r, t));
  return v;
}

// 7: frequency of a nonempty bad set
Verdict bad_set(const Context& ctx) {
  Verdict v;
  auto c = base(ExperimentKind::bad_set);
  c.t_end = 0.5;
  c.dt = 0.01;
  c.n_grid = {256, 512, 1024, 2048, 4096};
  c.trials = 600;
  auto r = run_experiment(c, run_options(ctx));
  save(ctx, r);
  v.add(check_result(r));
  return v;
}

// 8: law-of-large-numbers fluctuation
Verdict lln(const Context& ctx) {
  Verdict v;
  auto c = base(ExperimentKind::lln);
  c.t_end = 0.5;
  c.dt = 0.01;
  c.n_grid = {512, 1024, 2048};
  c.trials = 200;
  c.lln_fresh = 16384;
  auto r = run_experiment(c, run_options(ctx));
  save(ctx, r);
  v.add(check_result(r));
  return v;
}

// 9: cut-off removal, phi^N vs phi^infinity
Verdict phi(const Context& ctx) {
  Verdict v;
  auto c = base(ExperimentKind::phi_convergence);
  c.t_end = 0.5;
  c.dt = 0.01;
  c.n_grid = {64, 128, 256, 512, 1024, 2048, 4096};
  c.trials = 64;
  c.grid.sampling = KernelSampling::tent;
  auto r = run_experiment(c, run_options(ctx));
  save(ctx, r);
  v.add(check_result(r));
  return v;
}

// exhaustive argmin over snapshots, earliest on ties
bool in_class_scan(const Track& a, const Track& b, const CollisionClassSpec& s) {
  std::optional<std::size_t> best;
  double bd = 0.0;
  for (std::size_t k = 0; k < a.times.size(); ++k) {
    double t = a.times[k], tol = 1e-9 * std::max(1.0, std::abs(t));
    if (t < s.t1 - tol || t > s.t2 + tol) continue;
    double d = norm(a.q[k] - b.q[k]);
    if (!best || d < bd) best = k, bd = d;
  }
  if (!best) return false;
  double dv = norm(a.p[*best] - b.p[*best]);
  return bd >= s.r && bd <= s.R && dv >= s.v && dv <= s.V;
}

// every pair, lowest-index witness
Partition exhaustive_partition(const TrackSet& phi, double rb, double vb) {
  Partition part;
  part.r_bad = rb;
  part.v_bad = vb;
  CollisionClassSpec spec{0.0, rb, 0.0, vb};
  for (std::size_t i = 0; i < phi.n; ++i) {
    bool bad = false;
    for (std::size_t j = 0; j < phi.n && !bad; ++j) {
      if (j == i || !in_class(track(phi, i), track(phi, j), spec)) continue;
      part.bad.push_back(i);
      part.witness.push_back({j, min_encounter(track(phi, i), track(phi, j))});
      bad = true;
    }
    if (!bad) part.good.push_back(i);
  }
  return part;
}

// 10: classification oracles
Verdict classification(const Context& ctx) {
  Verdict v;
  DensityModel model{};
  const std::uint64_t sizes[] = {256, 512, 1024, 2048};
  bool same = true;
  std::size_t bad_total = 0, ensembles = 0;
  std::size_t partners = 0, uncovered = 0, targets = 0;
  bool counts_ok = true;
  for (std::size_t e = 0; e < 20; ++e) {
    std::uint64_t n = sizes[e % 4];
    ForceParams p(1.0, 1.0, n);
    auto series = evolve_reference(model, p, 1u << 14, 0.02, 0.5, GridSpec{8.0, 128}, derive_seed(kSeed, {10, e}));
    PhaseState st = sample(model, n, derive_seed(kSeed, {10, e, 1}));
    TrackSet phi = lift_flow(st, series, 0.02, 1, 0.5, ctx.threads);
    // nominal radii, and radii 20x larger so bad sets are well populated
    for (double scale : {1.0, 20.0}) {
      double rb = scale * bad_radius(n, 0.05), vb = scale * bad_velocity(n, 0.05);
      auto fast = partition_with_radii(phi, rb, vb, ctx.threads);
      same = same && fast == exhaustive_partition(phi, rb, vb);
      if (scale == 1.0) same = same && fast == partition_good_bad_bruteforce(phi, p, 0.05, ctx.threads);
      bad_total += fast.bad.size();
    }
    ++ensembles;
    if (e < 4) {
      double eta = 0.05;
      for (std::size_t tgt : {std::size_t{0}, std::size_t{n / 2}}) {
        auto h = cover_histogram(phi, tgt, eta, bad_radius(n, 0.05), bad_velocity(n, 0.05));
        std::size_t sum = 0;
        for (auto c : h.counts) sum += c;
        counts_ok = counts_ok && h.partners == n - 1 && sum == h.partners;
        partners += h.partners;
        uncovered += h.uncovered;
        ++targets;
      }
    }
  }
  v.add("accelerated partition equals brute force on 20 ensembles (N <= 2048)", same,
        std::to_string(ensembles) + " ensembles x 2 radii, " + std::to_string(bad_total) + " bad particles in total");

  Engine rng = make_engine(derive_seed(kSeed, {10, 99}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto series = evolve_reference(model, ForceParams(1.0, 1.0, 64), 1u << 14, 0.02, 0.5, GridSpec{8.0, 128}, 5);
  TrackSet phi = lift_flow(sample(model, 64, derive_seed(kSeed, {10, 98})), series, 0.02, 1, 0.5);
  std::size_t agree = 0, total = 0, positives = 0;
  for (int k = 0; k < 20000; ++k) {
    std::size_t i = static_cast<std::size_t>(u(rng) * 64), j = static_cast<std::size_t>(u(rng) * 64);
    if (i == j) continue;
    double r = 2.0 * u(rng), v0 = 2.0 * u(rng), t1 = 0.5 * u(rng);
    CollisionClassSpec s{r, r + 2.0 * u(rng), v0, v0 + 3.0 * u(rng), t1, t1 + 0.02 + 0.48 * u(rng)};  // at least one snapshot inside
    bool a = in_class(track(phi, i), track(phi, j), s), b = in_class_scan(track(phi, i), track(phi, j), s);
    agree += a == b;
    positives += a;
    ++total;
  }
  v.add("in_class agrees with an exhaustive time scan", agree == total,
        std::to_string(agree) + "/" + std::to_string(total) + " agree, " + std::to_string(positives) + " in class");
  v.add("cover histogram places every partner", uncovered == 0 && counts_ok,
        std::to_string(targets) + " targets, " + std::to_string(partners) + " partners, " +
            std::to_string(uncovered) + " uncovered");
  return v;
}

struct Criterion {
  int id;
  const char* title;
  double budget;  // seconds
  std::function<Verdict(const Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria 1-10"};
  std::vector<int> only;
  Context ctx;
  app.add_option("--criterion", only, "run only these criteria (1-10)");
  app.add_option("--threads", ctx.threads, "worker threads")->capture_default_str();
  app.add_option("--cache", ctx.cache, "reference series cache directory");
  app.add_option("--out", ctx.out, "write experiment CSV/JSON here");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all = {
      {1, "kernel correctness", 5, kernels},
      {2, "force-engine oracle equivalence", 30, engines},
      {3, "integrator quality", 120, integrator},
      {4, "mean-field solver cross-check", 120, solver},
      {5, "deviation scaling", 2400, deviation},
      {6, "collision probability", 900, collision},
      {7, "bad-set frequency", 1200, bad_set},
      {8, "LLN concentration", 900, lln},
      {9, "cut-off removal", 600, phi},
      {10, "classification oracles", 300, classification},
  };
  std::vector<std::string> summary;
  bool ok = true;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run(ctx);
    } catch (const std::exception& e) {
      v.add("ran to completion", false, e.what());
    }
    double secs = seconds_since(t0);
    v.add("runtime within " + num(c.budget) + " s", secs <= c.budget, num(secs) + " s");
    for (auto& l : v.lines)
      std::cout << "    " << (l.pass ? "ok   " : "FAIL ") << l.name << (l.detail.empty() ? "" : ": " + l.detail)
                << '\n';
    std::string line = std::string(v.pass() ? "PASS" : "FAIL") + " criterion " + std::to_string(c.id) + " " +
                       c.title + " (" + num(secs) + " s)";
    std::cout << line << '\n' << std::flush;
    summary.push_back(line);
    ok = ok && v.pass();
  }
  if (summary.size() > 1) {
    std::cout << "\nsummary\n";
    for (auto& s : summary) std::cout << s << '\n';
  }
  return ok ? 0 : 1;
}
