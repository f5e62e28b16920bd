#include "provmesh/bench.hpp"

#include <algorithm>
#include <random>
#include <thread>

#include "provmesh/adapters.hpp"
#include "provmesh/integrator.hpp"
#include "provmesh/scheduler.hpp"
#include "provmesh/store.hpp"

namespace provmesh {

namespace fs = std::filesystem;

Json ArmStats::to_json() const {
  return Json{{"times_s", times_s}, {"median_s", median},       {"ci_lo_s", ci_lo},
              {"ci_hi_s", ci_hi},   {"converged", converged}};
}

Json BenchResult::to_json() const {
  return Json{{"tasks", workload.total_tasks},
              {"task_duration_ms", workload.task_duration.count()},
              {"workers", workload.workers},
              {"with_observability", with_observability.to_json()},
              {"without_observability", without_observability.to_json()},
              {"overhead_pct", overhead_pct},
              {"median_overhead_pct", median_overhead_pct},
              {"overhead_defined", overhead_defined},
              {"events_persisted", events_persisted},
              {"zero_loss", zero_loss}};
}

double median_of(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::pair<double, double> bootstrap_median_ci(const std::vector<double>& values, int resamples,
                                              std::uint64_t seed, double confidence) {
  if (values.empty()) return {0.0, 0.0};
  if (values.size() == 1) return {values[0], values[0]};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> medians;
  medians.reserve(static_cast<std::size_t>(resamples));
  std::vector<double> sample(values.size());
  for (int i = 0; i < resamples; ++i) {
    for (auto& s : sample) s = values[pick(rng)];
    medians.push_back(median_of(sample));
  }
  std::sort(medians.begin(), medians.end());
  double alpha = (1.0 - confidence) / 2.0;
  auto at = [&](double q) {
    double idx = q * static_cast<double>(medians.size() - 1);
    return medians[static_cast<std::size_t>(idx + 0.5)];
  };
  return {at(alpha), at(1.0 - alpha)};
}

double extreme_interval_overhead_pct(const ArmStats& without_obs, const ArmStats& with_obs) {
  if (without_obs.ci_lo <= 0.0) return 0.0;
  return 100.0 * (with_obs.ci_hi - without_obs.ci_lo) / without_obs.ci_lo;
}

namespace {

void register_bench_activities(MiniScheduler& scheduler) {
  // Timed wait, no spinning; the body allocates nothing beyond the result.
  scheduler.register_activity("sleep_ms", [](const Json& args) -> Json {
    std::int64_t ms = 0;
    if (auto it = args.find("n"); it != args.end() && it->is_number()) {
      ms = it->get<std::int64_t>();
    }
    if (ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(ms));
    return Json{{"out", ms}};
  });
}

fs::path scratch_root(const BenchOptions& options) {
  return options.scratch_dir.empty() ? fs::temp_directory_path() : options.scratch_dir;
}

ArmStats finalize_arm(std::vector<double> times, const BenchOptions& options) {
  ArmStats stats;
  stats.times_s = std::move(times);
  stats.median = median_of(stats.times_s);
  auto [lo, hi] =
      bootstrap_median_ci(stats.times_s, options.bootstrap_resamples, options.seed);
  stats.ci_lo = lo;
  stats.ci_hi = hi;
  stats.converged =
      stats.median > 0.0 ? (hi - lo) <= options.ci_width_fraction * stats.median : true;
  return stats;
}

}  // namespace

double run_workflow_once(const Workload& workload, bool observability,
                         const BenchOptions& options, std::uint64_t* events_persisted) {
  std::size_t per_map = workload.total_tasks / 2;
  std::vector<Json> inputs(per_map, Json(workload.task_duration.count()));

  MiniScheduler scheduler(workload.workers);
  register_bench_activities(scheduler);

  // Observability arm: full pipeline in-process, fresh store per run.
  std::shared_ptr<InProcBroker> broker;
  std::unique_ptr<Controller> controller;
  std::unique_ptr<TaskStore> store;
  std::unique_ptr<DataIntegrator> integrator;
  fs::path store_dir;
  if (observability) {
    broker = std::make_shared<InProcBroker>();
    store_dir = scratch_root(options) /
                ("provmesh-bench-" + generate_task_id());
    store = std::make_unique<TaskStore>(
        TaskStore::open(store_dir, TaskStore::Options{options.store_fsync}));
    integrator = std::make_unique<DataIntegrator>(*store, broker->make_client());
    integrator->start();

    controller = std::make_unique<Controller>(BrokerEndpoint::in_process(broker));
    ObserverConfig config;
    config.adapter_kind = AdapterKind::SchedulerPlugin;
    config.telemetry_enabled = workload.telemetry;
    config.campaign_id = "bench";
    auto observer = controller->register_observer(config);
    controller->start_all();
    scheduler.register_plugin(
        std::static_pointer_cast<SchedulerObserver>(observer)->plugin());
  }

  auto t0 = std::chrono::steady_clock::now();
  auto first = scheduler.map("sleep_ms", inputs, "bench-wf", "bench");
  scheduler.gather(first);
  auto second = scheduler.map("sleep_ms", inputs, "bench-wf", "bench");
  scheduler.gather(second);
  auto t1 = std::chrono::steady_clock::now();

  double elapsed = std::chrono::duration<double>(t1 - t0).count();

  if (observability) {
    controller->stop_all();
    integrator->stop();
    if (events_persisted) *events_persisted = store->size();
    store->close();
    scheduler.shutdown();
    std::error_code ec;
    fs::remove_all(store_dir, ec);
  } else {
    scheduler.shutdown();
  }
  return elapsed;
}

BenchResult run_benchmark(const Workload& workload, const BenchOptions& options) {
  BenchResult result;
  result.workload = workload;

  std::vector<double> on_times, off_times;
  int rep = 0;
  while (true) {
    // Paired-run fairness: alternate the arm order between repetitions so
    // machine drift decorrelates from the arm.
    bool off_first = rep % 2 == 0;
    for (int half = 0; half < 2; ++half) {
      bool run_off = (half == 0) == off_first;
      if (run_off) {
        off_times.push_back(run_workflow_once(workload, false, options, nullptr));
      } else {
        std::uint64_t persisted = 0;
        on_times.push_back(run_workflow_once(workload, true, options, &persisted));
        result.events_persisted.push_back(persisted);
      }
      std::this_thread::sleep_for(options.cooldown);
    }
    ++rep;
    if (rep >= workload.repetitions) {
      result.without_observability = finalize_arm(off_times, options);
      result.with_observability = finalize_arm(on_times, options);
      if ((result.without_observability.converged && result.with_observability.converged) ||
          rep >= options.max_repetitions) {
        break;
      }
    }
  }

  result.overhead_defined =
      result.without_observability.converged && result.with_observability.converged;
  result.overhead_pct =
      extreme_interval_overhead_pct(result.without_observability, result.with_observability);
  if (result.without_observability.median > 0.0) {
    result.median_overhead_pct =
        100.0 *
        (result.with_observability.median - result.without_observability.median) /
        result.without_observability.median;
  }
  result.zero_loss = !result.events_persisted.empty();
  for (std::uint64_t n : result.events_persisted) {
    if (n != workload.total_tasks) result.zero_loss = false;
  }
  return result;
}

std::vector<BenchResult> sweep(const std::vector<Workload>& workloads,
                               const BenchOptions& options) {
  std::vector<BenchResult> results;
  results.reserve(workloads.size());
  for (const Workload& w : workloads) {
    results.push_back(run_benchmark(w, options));
    std::this_thread::sleep_for(options.cooldown);
  }
  return results;
}

Json results_table(const std::vector<BenchResult>& results) {
  Json rows = Json::array();
  for (const auto& r : results) {
    rows.push_back(Json{
        {"scenario",
         std::to_string(r.workload.total_tasks) + " tasks x " +
             std::to_string(r.workload.task_duration.count()) + " ms x " +
             std::to_string(r.workload.workers) + " workers"},
        {"without_median_s", r.without_observability.median},
        {"without_ci", Json::array({r.without_observability.ci_lo, r.without_observability.ci_hi})},
        {"with_median_s", r.with_observability.median},
        {"with_ci", Json::array({r.with_observability.ci_lo, r.with_observability.ci_hi})},
        {"overhead_pct", r.overhead_pct},
        {"median_overhead_pct", r.median_overhead_pct},
        {"converged", r.overhead_defined},
        {"zero_loss", r.zero_loss}});
  }
  return Json{{"scenarios", rows}};
}

}  // namespace provmesh
