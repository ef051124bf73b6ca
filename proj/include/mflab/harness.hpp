#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mflab/density.hpp"
#include "mflab/forces.hpp"
#include "mflab/meanfield.hpp"
#include "mflab/metrics.hpp"

namespace mflab {

/// Malformed or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { deviation_scaling, collision_prob, lln, bad_set, phi_convergence, single_run };

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& name);

/// Seed tag mixed into every trial seed of a kind.
std::uint64_t kind_tag(ExperimentKind kind);

inline constexpr int kConfigSchema = 1;

struct CollisionSettings {
  std::vector<double> exponents;  // a_k = b_k
  double t1 = 0.0;
  std::vector<double> windows;    // window lengths t2 - t1
};

struct ExperimentConfig {
  int schema = kConfigSchema;
  ExperimentKind kind = ExperimentKind::single_run;
  DensityModel model{};
  double beta = 1.0;
  double a = 1.0;
  double sigma = 0.05;
  double t_end = 0.5;
  double dt = 0.01;
  std::size_t stride = 1;
  std::vector<std::uint64_t> n_grid;
  std::size_t trials = 0;  // per N; probe count for phi_convergence
  std::uint64_t m = 1u << 16;  // reference ensemble size
  GridSpec grid{};
  std::uint64_t master_seed = 1;
  ForceMethod method = ForceMethod::naive();
  CollisionSettings collision;
  std::size_t lln_fresh = 2048;  // Monte Carlo partners per lln trial

  /// Throws ConfigError naming the first bad field.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Missing optional fields take the defaults above; unknown keys are
/// rejected so typos do not silently fall back.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

struct TrialRow {
  std::uint64_t n = 0;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  std::vector<double> values;  // NaN when failed
  friend bool operator==(const TrialRow&, const TrialRow&) = default;
};

struct ColumnSummary {
  std::uint64_t n = 0;
  std::string column;
  std::size_t count = 0;  // completed trials
  std::size_t failed = 0;
  double median = 0.0, q10 = 0.0, q90 = 0.0, mean = 0.0, max = 0.0;
  std::optional<WilsonInterval> ci;  // event columns only
};

struct EnsembleResult {
  ExperimentConfig config;
  std::vector<std::string> columns;
  std::vector<bool> events;  // column holds 0/1 indicators
  std::vector<TrialRow> rows;
  std::vector<ColumnSummary> aggregates;
  std::optional<ScalingFit> fit;
  std::string fit_column, fit_statistic;
  std::size_t failures = 0;
  double wall_seconds = 0.0;
  std::map<std::string, double> extra;  // kind-specific scalars (envelopes, ...)

  const ColumnSummary& summary(std::uint64_t n, const std::string& column) const;
};

/// Per-N summaries of every column, skipping failed rows.
std::vector<ColumnSummary> summarize(const std::vector<std::string>& columns, const std::vector<bool>& events,
                                     const std::vector<TrialRow>& rows, const std::vector<std::uint64_t>& n_grid);

/// Persistent store for reference series keyed by the hash of everything
/// that determines them. Freshly computed series are rounded through f32
/// before use, so a cache hit reproduces a fresh compute bit for bit.
class SeriesCache {
 public:
  /// Empty dir keeps series in memory only.
  explicit SeriesCache(std::string dir = {}, std::function<void(const std::string&)> log = nullptr);

  const MeanFieldSeries& get(const DensityModel& model, const ForceParams& params, std::uint64_t m, double dt,
                             double t_end, const GridSpec& grid, std::uint64_t seed, KernelKind kind,
                             unsigned threads = 1);

  static std::uint64_t key(const DensityModel& model, const ForceParams& params, std::uint64_t m, double dt,
                           double t_end, const GridSpec& grid, std::uint64_t seed, KernelKind kind);
  std::string path_for(std::uint64_t key) const;

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }
  std::size_t rejected() const { return rejected_; }

 private:
  std::string dir_;
  std::function<void(const std::string&)> log_;
  std::map<std::uint64_t, MeanFieldSeries> memory_;
  std::size_t hits_ = 0, misses_ = 0, rejected_ = 0;
};

struct RunOptions {
  unsigned threads = 1;
  std::string cache_dir;
  /// single_run writes its trajectory container and summary CSV here.
  std::string out_dir;
  std::function<void(const std::string&)> log;
  /// Called before each trial; an exception here fails that trial only.
  std::function<void(std::uint64_t n, std::size_t trial)> on_trial_start;
};

/// Runs every (N, trial) of the configured kind. Trial seeds are
/// derive_seed(master, {N, trial, kind_tag}); rows come back in (N, trial)
/// order whatever the thread count. A trial that throws is kept as a failed
/// row and the run goes on.
EnsembleResult run_experiment(const ExperimentConfig& config, const RunOptions& opt = {});

/// <stem>.csv holds the rows, <stem>.json the config echo, aggregates, fit
/// and wall-clock metadata. Throws std::runtime_error when unwritable.
void write_result(const EnsembleResult& r, const std::string& dir, const std::string& stem);

/// Reads both files back and recomputes the aggregates from the rows;
/// throws CorruptContainer when they disagree with the sidecar.
EnsembleResult load_result(const std::string& dir, const std::string& stem);

/// One verdict of a --check run or of the acceptance binary.
struct CheckLine {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct CheckThresholds {
  double deviation_slope = -0.25;
  double deviation_r2 = 0.9;
  double bad_set_slope = -0.2;
  double phi_slope = -0.8;
  /// Frozen collision constant; the envelope check is skipped when unset.
  std::optional<double> collision_constant;
};

/// Direction-and-exponent checks for the result's kind.
std::vector<CheckLine> check_result(const EnsembleResult& r, const CheckThresholds& t = {});

/// Collision envelope at (N, exponent, window) as stored in r.extra.
double collision_envelope(const EnsembleResult& r, std::uint64_t n, double exponent, double window);
std::string collision_column_name(double exponent, double window);

}  // namespace mflab
