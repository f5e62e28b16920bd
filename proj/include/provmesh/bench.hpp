#pragma once

#include <filesystem>

#include "provmesh/model.hpp"

namespace provmesh {

// Desk-scale reproduction of the overhead methodology: paired two-map sleep
// workflows run with and without the observer->broker->integrator->store
// pipeline, medians over repetitions, bootstrap CIs, and the overhead
// percentage taken from the extreme values of the two intervals.

struct Workload {
  std::size_t total_tasks = 1000;  // split into two equal maps
  std::chrono::milliseconds task_duration{10};
  int workers = 8;
  int repetitions = 5;  // minimum per arm
  bool telemetry = false;
};

struct ArmStats {
  std::vector<double> times_s;
  double median = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  bool converged = false;  // CI width <= 10% of the median
  Json to_json() const;
};

struct BenchResult {
  Workload workload;
  ArmStats with_observability;
  ArmStats without_observability;
  // (hi_on - lo_off) / lo_off, the pessimistic extreme-of-interval reading.
  double overhead_pct = 0.0;
  double median_overhead_pct = 0.0;
  bool overhead_defined = false;  // both arms converged
  std::vector<std::uint64_t> events_persisted;  // per on-arm repetition
  bool zero_loss = false;  // every on-arm run persisted exactly total_tasks
  Json to_json() const;
};

struct BenchOptions {
  int max_repetitions = 9;
  double ci_width_fraction = 0.10;
  int bootstrap_resamples = 10000;
  std::uint64_t seed = 42;
  std::filesystem::path scratch_dir;  // empty: std::filesystem::temp_directory_path()
  std::chrono::milliseconds cooldown{100};
  bool store_fsync = true;
};

double median_of(std::vector<double> values);
// Percentile bootstrap CI of the median.
std::pair<double, double> bootstrap_median_ci(const std::vector<double>& values, int resamples,
                                              std::uint64_t seed, double confidence = 0.95);
double extreme_interval_overhead_pct(const ArmStats& without_obs, const ArmStats& with_obs);

// One arm of the workload; exposed for the CLI's on|off modes.
double run_workflow_once(const Workload& workload, bool observability,
                         const BenchOptions& options, std::uint64_t* events_persisted);

BenchResult run_benchmark(const Workload& workload, const BenchOptions& options = {});

std::vector<BenchResult> sweep(const std::vector<Workload>& workloads,
                               const BenchOptions& options = {});

// Scenario x with/without table, one row per workload.
Json results_table(const std::vector<BenchResult>& results);

}  // namespace provmesh
