// Command-line front end: one subcommand per experiment kind plus sample,
// simulate and classify.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mflab/classify.hpp"
#include "mflab/dynamics.hpp"
#include "mflab/errors.hpp"
#include "mflab/harness.hpp"

namespace fs = std::filesystem;
using namespace mflab;

namespace {

enum Exit { kOk = 0, kConfig = 1, kRuntime = 2, kCheck = 3 };

struct Common {
  std::string config;
  std::string out = "results";
  unsigned threads = 1;
  std::string cache;
  std::optional<std::uint64_t> seed;
  bool check = false;
  std::string calibration = MFLAB_CALIBRATION_DIR;
};

void add_common(CLI::App* app, Common& c, bool needs_config) {
  auto* opt = app->add_option("--config", c.config, "experiment config (JSON)");
  if (needs_config) opt->required();
  app->add_option("--out", c.out, "output directory")->capture_default_str();
  app->add_option("--threads", c.threads, "worker threads (0 = all cores)")->capture_default_str();
  app->add_option("--cache", c.cache, "reference series cache directory");
  app->add_option("--seed", c.seed, "master seed, overrides the config");
}

ExperimentConfig load(const Common& c, std::optional<ExperimentKind> expect) {
  ExperimentConfig cfg = load_config(c.config);
  if (c.seed) cfg.master_seed = *c.seed;
  if (expect && cfg.kind != *expect)
    throw ConfigError("config kind is " + to_string(cfg.kind) + ", this subcommand runs " + to_string(*expect));
  return cfg;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

int report(const EnsembleResult& r, const Common& c) {
  write_result(r, c.out, to_string(r.config.kind));
  std::cout << to_string(r.config.kind) << ": " << r.rows.size() << " rows (" << r.failures << " failed) in "
            << r.wall_seconds << " s -> " << (fs::path(c.out) / to_string(r.config.kind)).string()
            << ".{csv,json}\n";
  for (std::uint64_t n : r.config.n_grid)
    for (std::size_t k = 0; k < r.columns.size(); ++k) {
      const auto& s = r.summary(n, r.columns[k]);
      std::cout << "  N=" << n << " " << r.columns[k] << ": ";
      if (s.ci)
        std::cout << s.ci->estimate << " [" << s.ci->lower << ", " << s.ci->upper << "]\n";
      else
        std::cout << "median " << s.median << " (q10 " << s.q10 << ", q90 " << s.q90 << ")\n";
    }
  if (r.fit)
    std::cout << "  fit " << r.fit_statistic << " " << r.fit_column << " ~ N^" << r.fit->slope << " (r2 "
              << r.fit->r_squared << ")\n";
  if (!c.check) return kOk;
  CheckThresholds t;
  if (r.config.kind == ExperimentKind::collision_prob) {
    std::ifstream in(fs::path(c.calibration) / "collision_constant.json");
    if (!in) throw ConfigError("collision check needs " + (fs::path(c.calibration) / "collision_constant.json").string());
    nlohmann::json j;
    in >> j;
    t.collision_constant = j.at("value").get<double>();
  }
  bool ok = true;
  for (auto& line : check_result(r, t)) {
    std::cout << (line.pass ? "PASS " : "FAIL ") << line.name << (line.detail.empty() ? "" : ": " + line.detail)
              << '\n';
    ok = ok && line.pass;
  }
  return ok ? kOk : kCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mean-field laboratory for the cut-off Coulomb N-body system"};
  app.require_subcommand(1);

  Common common;
  std::optional<std::uint64_t> sample_n;
  auto* sample_cmd = app.add_subcommand("sample", "draw initial data from the config's density");
  add_common(sample_cmd, common, true);
  sample_cmd->add_option("--n", sample_n, "number of samples (default: first N of the grid)");

  auto* simulate_cmd = app.add_subcommand("simulate", "single run: trajectory container and summary CSV");
  add_common(simulate_cmd, common, true);
  simulate_cmd->add_flag("--check", common.check, "exit 3 when an acceptance threshold fails");

  struct KindCmd {
    const char* name;
    const char* help;
    ExperimentKind kind;
  };
  const KindCmd kinds[] = {
      {"scaling", "deviation scaling of the microscopic vs mean-field flow", ExperimentKind::deviation_scaling},
      {"collision-prob", "probability that two mean-field tracks hit", ExperimentKind::collision_prob},
      {"lln", "law-of-large-numbers fluctuation statistic", ExperimentKind::lln},
      {"bad-set", "frequency of a nonempty bad set", ExperimentKind::bad_set},
      {"phi-convergence", "cut-off vs un-cut mean-field flow", ExperimentKind::phi_convergence},
  };
  std::vector<std::pair<CLI::App*, ExperimentKind>> kind_cmds;
  for (auto& k : kinds) {
    auto* cmd = app.add_subcommand(k.name, k.help);
    add_common(cmd, common, true);
    cmd->add_flag("--check", common.check, "exit 3 when an acceptance threshold fails");
    cmd->add_option("--calibration", common.calibration, "directory with frozen calibration constants")
        ->capture_default_str();
    kind_cmds.emplace_back(cmd, k.kind);
  }

  std::string trajectory;
  double sigma = 0.05;
  std::optional<std::size_t> cover_target;
  double eta = 0.05;
  auto* classify_cmd = app.add_subcommand("classify", "good/bad partition of a trajectory container");
  add_common(classify_cmd, common, false);
  classify_cmd->add_option("--trajectory", trajectory, "trajectory container from simulate")->required();
  classify_cmd->add_option("--sigma", sigma, "bad-class exponent offset")->capture_default_str();
  classify_cmd->add_option("--cover-target", cover_target, "also write the cover histogram of this particle");
  classify_cmd->add_option("--eta", eta, "cover band exponent")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    RunOptions opt;
    opt.threads = common.threads;
    opt.cache_dir = common.cache;
    opt.log = log_line;

    if (*sample_cmd) {
      ExperimentConfig cfg = load(common, std::nullopt);
      std::size_t n = sample_n.value_or(cfg.n_grid.front());
      PhaseState s = sample(cfg.model, n, cfg.master_seed);
      fs::create_directories(common.out);
      auto path = fs::path(common.out) / "samples.csv";
      std::ofstream out(path);
      if (!out) throw std::runtime_error("cannot write " + path.string());
      out << "qx,qy,px,py\n";
      out.precision(17);
      for (std::size_t i = 0; i < n; ++i) out << s.q[i].x << ',' << s.q[i].y << ',' << s.p[i].x << ',' << s.p[i].y << '\n';
      std::cout << "sample: " << n << " draws -> " << path.string() << '\n';
      return kOk;
    }
    if (*simulate_cmd) {
      ExperimentConfig cfg = load(common, ExperimentKind::single_run);
      opt.out_dir = common.out;
      return report(run_experiment(cfg, opt), common);
    }
    for (auto& [cmd, kind] : kind_cmds) {
      if (!*cmd) continue;
      ExperimentConfig cfg = load(common, kind);
      return report(run_experiment(cfg, opt), common);
    }
    if (*classify_cmd) {
      TrajectoryPair pair = read_trajectory(trajectory);
      Partition part = partition_good_bad(pair.phi, pair.params, sigma, common.threads);
      fs::create_directories(common.out);
      auto path = fs::path(common.out) / "partition.csv";
      write_partition_csv(path.string(), part, pair.size());
      std::cout << "classify: " << part.good.size() << " good, " << part.bad.size() << " bad -> " << path.string()
                << '\n';
      if (cover_target) {
        if (*cover_target >= pair.size()) throw ConfigError("--cover-target is out of range");
        auto hist = cover_histogram(pair.phi, *cover_target, eta, part.r_bad, part.v_bad);
        auto cpath = fs::path(common.out) / "cover.csv";
        write_cover_csv(cpath.string(), hist);
        std::cout << "cover: " << hist.partners << " partners, " << hist.uncovered << " uncovered -> "
                  << cpath.string() << '\n';
      }
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
