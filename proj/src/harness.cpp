#include "mflab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "mflab/classify.hpp"
#include "mflab/dynamics.hpp"
#include "mflab/errors.hpp"
#include "mflab/parallel.hpp"
#include "mflab/rng.hpp"

namespace mflab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSeriesTag = 0x5E1E5;
constexpr std::uint64_t kFreshTag = 0xF2E5;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct KindName {
  ExperimentKind kind;
  const char* name;
  std::uint64_t tag;
};
constexpr KindName kKinds[] = {
    {ExperimentKind::deviation_scaling, "deviation_scaling", 0xDE71A7},
    {ExperimentKind::collision_prob, "collision_prob", 0xC011DE},
    {ExperimentKind::lln, "lln", 0x11A},
    {ExperimentKind::bad_set, "bad_set", 0xBAD5E7},
    {ExperimentKind::phi_convergence, "phi_convergence", 0x9B0BE5},
    {ExperimentKind::single_run, "single_run", 0x51A6},
};

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

template <class T>
T field(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  double pos = q * static_cast<double>(v.size() - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

bool close(double a, double b) {
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
  return std::abs(a - b) <= 1e-12 * std::max({1.0, std::abs(a), std::abs(b)});
}

std::string collision_column(double e, double w) { return "hit_e" + short_num(e) + "_w" + short_num(w); }

}  // namespace

std::string to_string(ExperimentKind kind) {
  for (auto& k : kKinds)
    if (k.kind == kind) return k.name;
  return "unknown";
}

ExperimentKind experiment_kind_from_string(const std::string& name) {
  for (auto& k : kKinds)
    if (name == k.name) return k.kind;
  throw ConfigError("unknown experiment kind '" + name + "'");
}

std::uint64_t kind_tag(ExperimentKind kind) {
  for (auto& k : kKinds)
    if (k.kind == kind) return k.tag;
  return 0;
}

void ExperimentConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  auto pos = [&](double v, const char* name) {
    need(std::isfinite(v) && v > 0.0, std::string(name) + " must be finite and positive");
  };
  need(schema == kConfigSchema, "schema " + std::to_string(schema) + " is not supported");
  pos(model.position_scale, "model.position_scale");
  pos(model.velocity_scale, "model.velocity_scale");
  pos(beta, "beta");
  need(beta <= 2.0, "beta must be at most 2");
  need(std::isfinite(a) && a != 0.0, "a must be finite and nonzero");
  need(std::isfinite(sigma), "sigma must be finite");
  pos(t_end, "T");
  pos(dt, "dt");
  need(stride >= 1, "stride must be at least 1");
  need(!n_grid.empty(), "N_grid must not be empty");
  for (std::size_t k = 0; k < n_grid.size(); ++k) {
    need(n_grid[k] >= 1, "N_grid entries must be positive");
    need(k == 0 || n_grid[k] > n_grid[k - 1], "N_grid must be strictly increasing");
  }
  need(m >= 1, "M must be positive");
  pos(grid.half_width, "grid.L");
  need(grid.cells >= 2, "grid.G must be at least 2");
  need(method.kind == ForceMethod::Kind::naive || (method.theta > 0.0 && method.theta < 1.0),
       "force_method.theta must lie in (0, 1)");
  switch (kind) {
    case ExperimentKind::collision_prob:
      need(!collision.exponents.empty(), "collision.exponents is required");
      need(!collision.windows.empty(), "collision.windows is required");
      for (double e : collision.exponents) pos(e, "collision.exponents");
      need(collision.t1 >= 0.0, "collision.t1 must be nonnegative");
      for (double w : collision.windows) need(std::isfinite(w) && w >= 0.0, "collision.windows must be nonnegative");
      need(collision.t1 + *std::max_element(collision.windows.begin(), collision.windows.end()) <= t_end + 1e-12,
           "collision windows must end by T");
      break;
    case ExperimentKind::lln:
      need(lln_fresh >= 1, "lln.fresh must be positive");
      break;
    case ExperimentKind::single_run:
      need(n_grid.size() == 1, "single_run takes exactly one N");
      break;
    default:
      break;
  }
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["schema"] = c.schema;
  j["kind"] = to_string(c.kind);
  j["model"] = {{"kind", to_string(c.model.kind)},
                {"position_scale", c.model.position_scale},
                {"velocity_scale", c.model.velocity_scale}};
  j["beta"] = c.beta;
  j["a"] = c.a;
  j["sigma"] = c.sigma;
  j["T"] = c.t_end;
  j["dt"] = c.dt;
  j["stride"] = c.stride;
  j["N_grid"] = c.n_grid;
  j["trials"] = c.trials;
  j["M"] = c.m;
  j["grid"] = {{"L", c.grid.half_width}, {"G", c.grid.cells}, {"sampling", to_string(c.grid.sampling)}};
  j["master_seed"] = c.master_seed;
  j["force_method"] = {{"kind", c.method.kind == ForceMethod::Kind::naive ? "naive" : "tree"},
                       {"theta", c.method.theta},
                       {"order", c.method.order}};
  j["collision"] = {{"exponents", c.collision.exponents}, {"t1", c.collision.t1}, {"windows", c.collision.windows}};
  j["lln"] = {{"fresh", c.lln_fresh}};
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  const std::string w = "config";
  check_keys(j,
             {"schema", "kind", "model", "beta", "a", "sigma", "T", "dt", "stride", "N_grid", "trials", "M", "grid",
              "master_seed", "force_method", "collision", "lln", "comment"},
             w);
  if (!j.contains("schema")) throw ConfigError("config: missing schema");
  if (!j.contains("kind")) throw ConfigError("config: missing kind");
  ExperimentConfig c;
  c.schema = field<int>(j, "schema", 0, w);
  c.kind = experiment_kind_from_string(field<std::string>(j, "kind", "", w));
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, {"kind", "position_scale", "velocity_scale"}, "config.model");
    try {
      c.model.kind = density_kind_from_string(field<std::string>(m, "kind", "gaussian_product", "config.model"));
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config.model.kind: ") + e.what());
    }
    c.model.position_scale = field<double>(m, "position_scale", 1.0, "config.model");
    c.model.velocity_scale = field<double>(m, "velocity_scale", 1.0, "config.model");
  }
  c.beta = field<double>(j, "beta", c.beta, w);
  c.a = field<double>(j, "a", c.a, w);
  c.sigma = field<double>(j, "sigma", c.sigma, w);
  c.t_end = field<double>(j, "T", c.t_end, w);
  c.dt = field<double>(j, "dt", c.dt, w);
  c.stride = field<std::size_t>(j, "stride", c.stride, w);
  c.n_grid = field<std::vector<std::uint64_t>>(j, "N_grid", {}, w);
  c.trials = field<std::size_t>(j, "trials", 0, w);
  c.m = field<std::uint64_t>(j, "M", c.m, w);
  c.master_seed = field<std::uint64_t>(j, "master_seed", c.master_seed, w);
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    check_keys(g, {"L", "G", "sampling"}, "config.grid");
    c.grid.half_width = field<double>(g, "L", c.grid.half_width, "config.grid");
    c.grid.cells = field<int>(g, "G", c.grid.cells, "config.grid");
    try {
      c.grid.sampling = kernel_sampling_from_string(field<std::string>(g, "sampling", "point", "config.grid"));
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config.grid.sampling: ") + e.what());
    }
  }
  if (j.contains("force_method")) {
    const auto& f = j["force_method"];
    check_keys(f, {"kind", "theta", "order"}, "config.force_method");
    auto kind = field<std::string>(f, "kind", "naive", "config.force_method");
    if (kind == "naive")
      c.method = ForceMethod::naive();
    else if (kind == "tree")
      c.method = ForceMethod::tree(field<double>(f, "theta", 0.5, "config.force_method"),
                                   field<int>(f, "order", 16, "config.force_method"));
    else
      throw ConfigError("config.force_method.kind: expected naive or tree");
  }
  if (j.contains("collision")) {
    const auto& k = j["collision"];
    check_keys(k, {"exponents", "t1", "windows"}, "config.collision");
    c.collision.exponents = field<std::vector<double>>(k, "exponents", {}, "config.collision");
    c.collision.t1 = field<double>(k, "t1", 0.0, "config.collision");
    c.collision.windows = field<std::vector<double>>(k, "windows", {}, "config.collision");
  }
  if (j.contains("lln")) {
    check_keys(j["lln"], {"fresh"}, "config.lln");
    c.lln_fresh = field<std::size_t>(j["lln"], "fresh", c.lln_fresh, "config.lln");
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

const ColumnSummary& EnsembleResult::summary(std::uint64_t n, const std::string& column) const {
  for (auto& s : aggregates)
    if (s.n == n && s.column == column) return s;
  throw ContractViolation("no summary for N = " + std::to_string(n) + " column " + column);
}

std::vector<ColumnSummary> summarize(const std::vector<std::string>& columns, const std::vector<bool>& events,
                                     const std::vector<TrialRow>& rows, const std::vector<std::uint64_t>& n_grid) {
  std::vector<ColumnSummary> out;
  for (std::uint64_t n : n_grid) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      ColumnSummary s;
      s.n = n;
      s.column = columns[c];
      std::vector<double> v;
      for (auto& r : rows) {
        if (r.n != n) continue;
        if (r.failed) {
          ++s.failed;
          continue;
        }
        v.push_back(r.values[c]);
      }
      s.count = v.size();
      if (!v.empty()) {
        s.median = quantile(v, 0.5);
        s.q10 = quantile(v, 0.1);
        s.q90 = quantile(v, 0.9);
        double sum = 0.0;
        for (double x : v) sum += x;
        s.mean = sum / static_cast<double>(v.size());
        s.max = *std::max_element(v.begin(), v.end());
        if (events[c]) {
          std::size_t k = 0;
          for (double x : v) k += x != 0.0;
          s.ci = wilson_interval(k, v.size());
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

SeriesCache::SeriesCache(std::string dir, std::function<void(const std::string&)> log)
    : dir_(std::move(dir)), log_(std::move(log)) {
  if (!dir_.empty()) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw std::runtime_error("cache directory '" + dir_ + "' is unusable: " + ec.message());
  }
}

std::uint64_t SeriesCache::key(const DensityModel& model, const ForceParams& params, std::uint64_t m, double dt,
                               double t_end, const GridSpec& grid, std::uint64_t seed, KernelKind kind) {
  detail::ByteWriter w;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.kind));
  w.put(model.position_scale);
  w.put(model.velocity_scale);
  w.put(params.a());
  w.put(params.beta());
  w.put<std::uint64_t>(params.n());
  w.put<std::uint64_t>(m);
  w.put(dt);
  w.put(t_end);
  w.put(grid.half_width);
  w.put<std::int32_t>(grid.cells);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(grid.sampling));
  w.put<std::uint64_t>(seed);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(kind));
  const auto& b = w.bytes();
  return detail::fnv1a(b.data(), b.size());
}

std::string SeriesCache::path_for(std::uint64_t key) const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(key));
  return (fs::path(dir_) / ("series-" + std::string(buf) + ".bin")).string();
}

const MeanFieldSeries& SeriesCache::get(const DensityModel& model, const ForceParams& params, std::uint64_t m,
                                        double dt, double t_end, const GridSpec& grid, std::uint64_t seed,
                                        KernelKind kind, unsigned threads) {
  const std::uint64_t k = key(model, params, m, dt, t_end, grid, seed, kind);
  if (auto it = memory_.find(k); it != memory_.end()) return it->second;
  auto say = [&](const std::string& s) {
    if (log_) log_(s);
  };
  if (!dir_.empty()) {
    const std::string path = path_for(k);
    const std::string key_path = path + ".key";
    if (fs::exists(path)) {
      try {
        std::ifstream kin(key_path);
        std::uint64_t stored = 0;
        if (!(kin >> std::hex >> stored) || stored != k) throw CorruptContainer("key file does not match");
        MeanFieldSeries s = read_series(path);
        if (s.ref_count != m || s.seed != seed || s.kernel != kind || !(s.grid == grid) || s.dt_field != dt ||
            s.params.n() != params.n() || s.params.a() != params.a() || s.params.beta() != params.beta())
          throw CorruptContainer("header does not match the key");
        ++hits_;
        say("cache hit " + path);
        return memory_.emplace(k, std::move(s)).first->second;
      } catch (const CorruptContainer& e) {
        ++rejected_;
        say("cache rejected " + path + ": " + e.what());
      }
    }
  }
  ++misses_;
  MeanFieldSeries s = evolve_reference(model, params, m, dt, t_end, grid, seed, kind, threads);
  quantize_f32(s);
  if (!dir_.empty()) {
    const std::string path = path_for(k);
    write_series(path, s, FieldPrecision::f32);
    std::ofstream kout(path + ".key");
    kout << std::hex << k << "\n";
    say("cache store " + path);
  }
  return memory_.emplace(k, std::move(s)).first->second;
}

namespace {

struct Job {
  std::uint64_t n;
  std::size_t trial;
};

double snapshot_end(const ExperimentConfig& c, double t) {
  double span = c.dt * static_cast<double>(c.stride);
  return std::min(c.t_end, std::max(span, std::ceil(t / span - 1e-9) * span));
}

}  // namespace

EnsembleResult run_experiment(const ExperimentConfig& config, const RunOptions& opt) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  EnsembleResult r;
  r.config = config;
  const ExperimentConfig& c = config;
  SeriesCache cache(opt.cache_dir, opt.log);
  const std::uint64_t tag = kind_tag(c.kind);

  switch (c.kind) {
    case ExperimentKind::deviation_scaling:
      r.columns = {"sup_deviation", "exceeded", "bad_count", "tau", "delta_good", "delta_bad", "extrapolated"};
      r.events = {false, true, false, false, false, false, true};
      r.fit_column = "sup_deviation";
      r.fit_statistic = "median";
      break;
    case ExperimentKind::collision_prob:
      for (double e : c.collision.exponents)
        for (double w : c.collision.windows) {
          r.columns.push_back(collision_column(e, w));
          r.events.push_back(true);
        }
      break;
    case ExperimentKind::lln:
      r.columns = {"fluctuation", "scaled", "exceeded"};
      r.events = {false, false, true};
      r.fit_column = "fluctuation";
      r.fit_statistic = "median";
      break;
    case ExperimentKind::bad_set:
      r.columns = {"bad_count", "nonempty"};
      r.events = {false, true};
      r.fit_column = "nonempty";
      r.fit_statistic = "frequency";
      break;
    case ExperimentKind::phi_convergence:
      r.columns = {"deviation"};
      r.events = {false};
      r.fit_column = "deviation";
      r.fit_statistic = "max";
      break;
    case ExperimentKind::single_run:
      r.columns = {"sup_deviation", "exceeded", "bad_count", "energy_drift", "momentum_drift"};
      r.events = {false, true, false, false, false};
      break;
  }

  if (c.kind == ExperimentKind::single_run && !opt.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(opt.out_dir, ec);
    if (ec) throw std::runtime_error("output directory '" + opt.out_dir + "' is unusable: " + ec.message());
  }

  // reference series first, one per N (phi_convergence pairs them all on
  // the master seed and adds the un-cut kernel)
  std::map<std::uint64_t, const MeanFieldSeries*> series;
  const MeanFieldSeries* coulomb = nullptr;
  std::optional<PhaseState> probes;
  std::optional<TrackSet> probe_ref;
  if (c.trials > 0) {
    for (std::uint64_t n : c.n_grid) {
      bool paired = c.kind == ExperimentKind::phi_convergence;
      std::uint64_t seed = paired ? c.master_seed : derive_seed(c.master_seed, {n, kSeriesTag});
      series[n] = &cache.get(c.model, ForceParams(c.a, c.beta, n), c.m, c.dt, c.t_end, c.grid, seed,
                             KernelKind::cutoff, opt.threads);
    }
    if (c.kind == ExperimentKind::phi_convergence) {
      coulomb = &cache.get(c.model, ForceParams(c.a, c.beta, 1), c.m, c.dt, c.t_end, c.grid, c.master_seed,
                           KernelKind::coulomb, opt.threads);
      probes = sample(c.model, c.trials, derive_seed(c.master_seed, {tag}));
      probe_ref = lift_flow(*probes, *coulomb, c.dt, c.stride, c.t_end, opt.threads);
    }
  }

  std::vector<Job> jobs;
  for (std::uint64_t n : c.n_grid)
    for (std::size_t t = 0; t < c.trials; ++t) jobs.push_back({n, t});
  r.rows.resize(jobs.size());

  parallel_for(jobs.size(), opt.threads, [&](std::size_t k) {
    const Job job = jobs[k];
    TrialRow& row = r.rows[k];
    row.n = job.n;
    row.trial = job.trial;
    row.seed = derive_seed(c.master_seed, {job.n, job.trial, tag});
    try {
      if (opt.on_trial_start) opt.on_trial_start(job.n, job.trial);
      const MeanFieldSeries& s = *series.at(job.n);
      const ForceParams p(c.a, c.beta, job.n);
      switch (c.kind) {
        case ExperimentKind::deviation_scaling:
        case ExperimentKind::single_run: {
          PhaseState st = sample(c.model, job.n, row.seed);
          TrajectoryPair pair = run_pair(st, p, s, c.dt, c.t_end, c.stride, c.method, 1);
          pair.meta.seed = row.seed;
          pair.meta.model = c.model;
          Partition part = partition_good_bad(pair.phi, p, c.sigma, 1);
          DeviationReport rep = deviation_report(pair, part, c.sigma);
          if (c.kind == ExperimentKind::deviation_scaling) {
            row.values = {rep.max(),
                          rep.exceeded ? 1.0 : 0.0,
                          static_cast<double>(part.bad.size()),
                          rep.stop.tau,
                          rep.delta_good.empty() ? 0.0 : rep.delta_good.back(),
                          rep.delta_bad.empty() ? 0.0 : rep.delta_bad.back(),
                          pair.phi.any_extrapolated() ? 1.0 : 0.0};
          } else {
            PhaseState a0 = pair.psi.snapshot(0), a1 = pair.psi.snapshot(pair.psi.steps() - 1);
            double e0 = system_energy(a0, p), e1 = system_energy(a1, p);
            Vec2 m0 = total_momentum(a0), m1 = total_momentum(a1);
            row.values = {rep.max(), rep.exceeded ? 1.0 : 0.0, static_cast<double>(part.bad.size()),
                          std::abs(e1 - e0) / std::max(std::abs(e0), 1e-300),
                          norm(m1 - m0) / static_cast<double>(job.n)};
            if (!opt.out_dir.empty() && job.trial == 0) {
              write_trajectory((fs::path(opt.out_dir) / "trajectory.bin").string(), pair);
              write_trajectory_csv((fs::path(opt.out_dir) / "trajectory.csv").string(), pair);
            }
          }
          break;
        }
        case ExperimentKind::collision_prob: {
          PhaseState st = sample(c.model, 2, row.seed);
          double w_max = *std::max_element(c.collision.windows.begin(), c.collision.windows.end());
          TrackSet tr = lift_flow(st, s, c.dt, c.stride, snapshot_end(c, c.collision.t1 + w_max), 1);
          Track a = track(tr, 0), b = track(tr, 1);
          for (double e : c.collision.exponents) {
            const double th = std::pow(static_cast<double>(job.n), -e);
            for (double w : c.collision.windows)
              row.values.push_back(joint_hit(a, b, th, th, c.collision.t1, c.collision.t1 + w) ? 1.0 : 0.0);
          }
          break;
        }
        case ExperimentKind::lln: {
          PhaseState st = sample(c.model, job.n, row.seed);
          TrackSet phi = lift_flow(st, s, c.dt, c.stride, c.t_end, 1);
          PhaseState fs0 = sample(c.model, c.lln_fresh, derive_seed(row.seed, {kFreshTag}));
          TrackSet fresh = lift_flow(fs0, s, c.dt, c.stride, c.t_end, 1);
          double x = lln_fluctuation(phi, 0, 0.0, c.t_end, p, c.sigma, fresh);
          double scale = std::pow(static_cast<double>(job.n), lln_alpha(c.sigma));
          row.values = {x, scale * x, scale * x >= 1.0 ? 1.0 : 0.0};
          break;
        }
        case ExperimentKind::bad_set: {
          PhaseState st = sample(c.model, job.n, row.seed);
          TrackSet phi = lift_flow(st, s, c.dt, c.stride, c.t_end, 1);
          std::size_t bad = partition_good_bad(phi, p, c.sigma, 1).bad.size();
          row.values = {static_cast<double>(bad), bad > 0 ? 1.0 : 0.0};
          break;
        }
        case ExperimentKind::phi_convergence: {
          PhaseState one({probes->q[job.trial]}, {probes->p[job.trial]});
          TrackSet tr = lift_flow(one, s, c.dt, c.stride, c.t_end, 1);
          double worst = 0.0;
          for (std::size_t t = 0; t < tr.steps(); ++t)
            worst = std::max(worst, norm(tr.q_at(0, t) - probe_ref->q_at(job.trial, t)));
          row.values = {worst};
          break;
        }
      }
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
      row.values.assign(r.columns.size(), kNaN);
    }
  });

  for (auto& row : r.rows) r.failures += row.failed;
  r.aggregates = summarize(r.columns, r.events, r.rows, c.n_grid);

  if (c.kind == ExperimentKind::collision_prob)
    for (std::uint64_t n : c.n_grid)
      for (double e : c.collision.exponents)
        for (double w : c.collision.windows)
          r.extra["envelope_N" + std::to_string(n) + "_e" + short_num(e) + "_w" + short_num(w)] =
              collision_thresholds(n, e, e, c.collision.t1, c.collision.t1 + w).envelope;

  if (!r.fit_column.empty() && c.n_grid.size() >= 3) {
    std::vector<std::pair<double, double>> pts;
    bool usable = true;
    for (std::uint64_t n : c.n_grid) {
      const auto& s = r.summary(n, r.fit_column);
      double v = r.fit_statistic == "median" ? s.median : r.fit_statistic == "max" ? s.max : s.mean;
      if (s.count == 0 || !(v > 0.0) || !std::isfinite(v)) usable = false;
      pts.emplace_back(static_cast<double>(n), v);
    }
    if (usable) r.fit = fit_scaling(pts);
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (opt.log) {
    opt.log(to_string(c.kind) + ": " + std::to_string(r.rows.size()) + " rows, " + std::to_string(r.failures) +
            " failed, " + std::to_string(cache.hits()) + " cache hits, " + std::to_string(cache.misses()) +
            " computed");
  }
  return r;
}

namespace {

json summary_json(const ColumnSummary& s) {
  json j = {{"N", s.n},           {"column", s.column}, {"count", s.count}, {"failed", s.failed},
            {"median", s.median}, {"q10", s.q10},       {"q90", s.q90},     {"mean", s.mean},
            {"max", s.max}};
  if (s.ci)
    j["wilson"] = {{"successes", s.ci->successes},
                   {"trials", s.ci->trials},
                   {"estimate", s.ci->estimate},
                   {"lower", s.ci->lower},
                   {"upper", s.ci->upper}};
  return j;
}

std::string sanitize(std::string s) {
  for (char& ch : s)
    if (ch == ',' || ch == '\n' || ch == '\r' || ch == '"') ch = ';';
  return s;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void write_result(const EnsembleResult& r, const std::string& dir, const std::string& stem) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("output directory '" + dir + "' is unusable: " + ec.message());
  const fs::path base = fs::path(dir) / stem;
  {
    std::ofstream out(base.string() + ".csv");
    if (!out) throw std::runtime_error("cannot write '" + base.string() + ".csv'");
    out << "n,trial,seed,status";
    for (auto& col : r.columns) out << ',' << col;
    out << ",error\n";
    for (auto& row : r.rows) {
      out << row.n << ',' << row.trial << ',' << row.seed << ',' << (row.failed ? "failed" : "ok");
      for (double v : row.values) out << ',' << fmt(v);
      out << ',' << sanitize(row.error) << '\n';
    }
    if (!out) throw std::runtime_error("write to '" + base.string() + ".csv' failed");
  }
  json j;
  j["config"] = to_json(r.config);
  j["columns"] = r.columns;
  j["events"] = r.events;
  j["rows"] = r.rows.size();
  j["failures"] = r.failures;
  j["aggregates"] = json::array();
  for (auto& s : r.aggregates) j["aggregates"].push_back(summary_json(s));
  if (r.fit) {
    j["fit"] = {{"column", r.fit_column},      {"statistic", r.fit_statistic},        {"slope", r.fit->slope},
                {"intercept", r.fit->intercept}, {"r_squared", r.fit->r_squared},     {"slope_stderr", r.fit->slope_stderr},
                {"slope_ci95", r.fit->slope_ci95}, {"points", r.fit->points}};
  } else {
    j["fit"] = nullptr;
  }
  j["extra"] = r.extra;
  j["wall_seconds"] = r.wall_seconds;
  std::ofstream out(base.string() + ".json");
  if (!out) throw std::runtime_error("cannot write '" + base.string() + ".json'");
  out << j.dump(1) << '\n';
  if (!out) throw std::runtime_error("write to '" + base.string() + ".json' failed");
}

EnsembleResult load_result(const std::string& dir, const std::string& stem) {
  const fs::path base = fs::path(dir) / stem;
  std::ifstream jin(base.string() + ".json");
  if (!jin) throw std::runtime_error("cannot read '" + base.string() + ".json'");
  json j;
  try {
    jin >> j;
  } catch (const json::exception& e) {
    throw CorruptContainer("sidecar is not valid JSON: " + std::string(e.what()));
  }
  EnsembleResult r;
  try {
    r.config = config_from_json(j.at("config"));
    r.columns = j.at("columns").get<std::vector<std::string>>();
    r.events = j.at("events").get<std::vector<bool>>();
    r.failures = j.at("failures").get<std::size_t>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.extra = j.at("extra").get<std::map<std::string, double>>();
  } catch (const json::exception& e) {
    throw CorruptContainer("sidecar is missing fields: " + std::string(e.what()));
  }
  if (r.events.size() != r.columns.size()) throw CorruptContainer("sidecar column lists disagree");

  std::ifstream in(base.string() + ".csv");
  if (!in) throw std::runtime_error("cannot read '" + base.string() + ".csv'");
  std::string line;
  std::getline(in, line);
  if (split(line).size() != r.columns.size() + 5) throw CorruptContainer("csv header does not match the sidecar");
  while (std::getline(in, line)) {
    auto cells = split(line);
    if (cells.size() != r.columns.size() + 5) throw CorruptContainer("csv row with the wrong column count");
    TrialRow row;
    try {
      row.n = std::stoull(cells[0]);
      row.trial = std::stoull(cells[1]);
      row.seed = std::stoull(cells[2]);
      row.failed = cells[3] == "failed";
      for (std::size_t k = 0; k < r.columns.size(); ++k) row.values.push_back(std::stod(cells[4 + k]));
    } catch (const std::exception&) {
      throw CorruptContainer("unparseable csv row: " + line);
    }
    row.error = cells.back();
    r.rows.push_back(std::move(row));
  }
  std::size_t expected = r.config.trials * r.config.n_grid.size();
  if (r.rows.size() != expected || j.at("rows").get<std::size_t>() != expected)
    throw CorruptContainer("row count " + std::to_string(r.rows.size()) + " differs from the configured " +
                           std::to_string(expected));
  std::size_t failed = 0;
  for (auto& row : r.rows) failed += row.failed;
  if (failed != r.failures) throw CorruptContainer("failure count differs from the rows");

  r.aggregates = summarize(r.columns, r.events, r.rows, r.config.n_grid);
  const auto& stored = j.at("aggregates");
  if (stored.size() != r.aggregates.size()) throw CorruptContainer("aggregate count differs from the rows");
  for (std::size_t k = 0; k < stored.size(); ++k) {
    const auto& s = r.aggregates[k];
    const auto& t = stored[k];
    bool ok = t.at("N").get<std::uint64_t>() == s.n && t.at("column").get<std::string>() == s.column &&
              t.at("count").get<std::size_t>() == s.count && t.at("failed").get<std::size_t>() == s.failed;
    if (ok && s.count > 0)
      ok = close(t.at("median").get<double>(), s.median) && close(t.at("q10").get<double>(), s.q10) &&
           close(t.at("q90").get<double>(), s.q90) && close(t.at("mean").get<double>(), s.mean) &&
           close(t.at("max").get<double>(), s.max);
    if (ok && s.ci)
      ok = t.contains("wilson") && t["wilson"].at("successes").get<std::size_t>() == s.ci->successes &&
           close(t["wilson"].at("lower").get<double>(), s.ci->lower) &&
           close(t["wilson"].at("upper").get<double>(), s.ci->upper);
    if (!ok) throw CorruptContainer("aggregate for N = " + std::to_string(s.n) + " column " + s.column +
                                    " is not reproduced by the rows");
  }
  if (!j.at("fit").is_null()) {
    const auto& f = j["fit"];
    r.fit_column = f.at("column").get<std::string>();
    r.fit_statistic = f.at("statistic").get<std::string>();
    std::vector<std::pair<double, double>> pts;
    for (std::uint64_t n : r.config.n_grid) {
      const auto& s = r.summary(n, r.fit_column);
      double v = r.fit_statistic == "median" ? s.median : r.fit_statistic == "max" ? s.max : s.mean;
      pts.emplace_back(static_cast<double>(n), v);
    }
    r.fit = fit_scaling(pts);
    if (!close(r.fit->slope, f.at("slope").get<double>())) throw CorruptContainer("fit is not reproduced by the rows");
  }
  return r;
}

std::string collision_column_name(double exponent, double window) { return collision_column(exponent, window); }

double collision_envelope(const EnsembleResult& r, std::uint64_t n, double exponent, double window) {
  auto it = r.extra.find("envelope_N" + std::to_string(n) + "_e" + short_num(exponent) + "_w" + short_num(window));
  if (it == r.extra.end()) throw ContractViolation("no collision envelope recorded for that point");
  return it->second;
}

std::vector<CheckLine> check_result(const EnsembleResult& r, const CheckThresholds& t) {
  std::vector<CheckLine> out;
  const auto& grid = r.config.n_grid;
  auto series = [&](const std::string& col, auto stat) {
    std::vector<double> v;
    for (std::uint64_t n : grid) v.push_back(stat(r.summary(n, col)));
    return v;
  };
  auto cis = [&](const std::string& col) {
    std::vector<WilsonInterval> v;
    for (std::uint64_t n : grid) {
      const auto& s = r.summary(n, col);
      v.push_back(s.ci ? *s.ci : WilsonInterval{});
    }
    return v;
  };
  auto list = [](const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : " ") + short_num(x);
    return s;
  };
  auto strictly_down = [](const std::vector<double>& v) {
    for (std::size_t k = 1; k < v.size(); ++k)
      if (!(v[k] < v[k - 1])) return false;
    return true;
  };
  auto freqs = [&](const std::vector<WilsonInterval>& v) {
    std::vector<double> e;
    for (auto& w : v) e.push_back(w.estimate);
    return e;
  };
  auto fit_line = [&](const std::string& name, double limit, std::optional<double> r2) {
    CheckLine l{name, false, "no fit"};
    if (r.fit) {
      l.pass = r.fit->slope <= limit && (!r2 || r.fit->r_squared >= *r2);
      l.detail = "slope " + short_num(r.fit->slope) + " (95% +-" + short_num(r.fit->slope_ci95) + "), r2 " +
                 short_num(r.fit->r_squared) + ", need slope <= " + short_num(limit) +
                 (r2 ? ", r2 >= " + short_num(*r2) : std::string());
    }
    return l;
  };
  std::size_t failed = r.failures;
  out.push_back({"trials completed", failed == 0 || failed * 10 < r.rows.size(),
                 std::to_string(r.rows.size() - failed) + "/" + std::to_string(r.rows.size())});

  switch (r.config.kind) {
    case ExperimentKind::deviation_scaling: {
      auto med = series("sup_deviation", [](const ColumnSummary& s) { return s.median; });
      out.push_back({"median sup-deviation strictly decreasing", strictly_down(med), list(med)});
      out.push_back(fit_line("log-log slope of the median", t.deviation_slope, t.deviation_r2));
      auto ex = cis("exceeded");
      out.push_back({"threshold exceedance nonincreasing within CI", nonincreasing_within_ci(ex), list(freqs(ex))});
      break;
    }
    case ExperimentKind::collision_prob: {
      bool mono = true, under = true;
      double worst = 0.0;
      for (std::uint64_t n : grid)
        for (double e : r.config.collision.exponents) {
          double prev = -1.0;
          for (double w : r.config.collision.windows) {
            const auto& s = r.summary(n, collision_column(e, w));
            mono = mono && s.ci && s.ci->estimate >= prev;
            if (s.ci) prev = s.ci->estimate;
            if (t.collision_constant && s.ci) {
              double bound = *t.collision_constant * collision_envelope(r, n, e, w);
              under = under && s.ci->lower <= bound;
              worst = std::max(worst, s.ci->lower / collision_envelope(r, n, e, w));
            }
          }
        }
      out.push_back({"estimates nondecreasing in window length", mono, ""});
      if (t.collision_constant)
        out.push_back({"estimates within C*envelope", under,
                       "C " + short_num(*t.collision_constant) + ", largest lower/envelope " + short_num(worst)});
      break;
    }
    case ExperimentKind::lln: {
      auto med = series("fluctuation", [](const ColumnSummary& s) { return s.median; });
      out.push_back({"median fluctuation strictly decreasing", strictly_down(med), list(med)});
      auto ex = cis("exceeded");
      out.push_back({"exceedance of N^-alpha nonincreasing within CI", nonincreasing_within_ci(ex), list(freqs(ex))});
      break;
    }
    case ExperimentKind::bad_set: {
      auto ex = cis("nonempty");
      out.push_back({"nonempty bad set frequency nonincreasing within CI", nonincreasing_within_ci(ex),
                     list(freqs(ex))});
      bool all_nonzero = true;
      for (auto& w : ex) all_nonzero = all_nonzero && w.successes > 0;
      if (all_nonzero)
        out.push_back(fit_line("log-log slope of the frequency", t.bad_set_slope, std::nullopt));
      else
        out.push_back({"log-log slope of the frequency", true, "skipped: some frequency is zero"});
      break;
    }
    case ExperimentKind::phi_convergence: {
      auto mx = series("deviation", [](const ColumnSummary& s) { return s.max; });
      bool mono = true;
      for (std::size_t k = 1; k < mx.size(); ++k) mono = mono && mx[k] <= mx[k - 1];
      out.push_back({"sup deviation nonincreasing", mono, list(mx)});
      out.push_back(fit_line("log-log slope of the sup deviation", t.phi_slope, std::nullopt));
      break;
    }
    case ExperimentKind::single_run: {
      auto mom = series("momentum_drift", [](const ColumnSummary& s) { return s.max; });
      out.push_back({"momentum drift <= 1e-10", mom[0] <= 1e-10, list(mom)});
      break;
    }
  }
  return out;
}

}  // namespace mflab
