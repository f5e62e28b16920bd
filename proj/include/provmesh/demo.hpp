#pragma once

#include <filesystem>

#include "provmesh/service.hpp"
#include "provmesh/store.hpp"

namespace provmesh {

// Synthetic three-workflow campaign exercising all three adapters end to end:
//   wf1  instrument control writing the documented log grammar (log observer)
//   wf2  parallel training on the mini-scheduler (scheduler-plugin observer)
//   wf3  evaluation runs written as run-record files (record-store observer)
// wf2 tasks consume wf1's dataset paths; wf3 runs consume wf2's model paths,
// so backward lineage from any wf3 task reaches wf1.

struct DemoOptions {
  std::filesystem::path store_dir;  // empty: fresh temp directory
  std::string campaign_id = "demo_campaign";
  std::size_t wf1_tasks = 6;
  std::size_t wf2_tasks = 12;
  std::size_t wf3_tasks = 12;  // clamped to wf2_tasks (one evaluation per model)
  std::uint64_t seed = 7;
  std::size_t report_k = 3;
  bool keep_store = true;
  std::chrono::milliseconds poll_interval{50};
};

struct DemoResult {
  std::filesystem::path store_dir;
  std::size_t records = 0;
  std::size_t links = 0;
  std::map<std::string, std::size_t> records_per_workflow;
  LineageReport report;                      // k-best by generated.mse, minimized
  std::vector<std::string> expected_k_best;  // ground truth wf3 task ids, ascending mse
  std::map<std::string, double> mse_by_task;
  Json summary() const;
};

DemoResult run_ingest_demo(const DemoOptions& options = {});

}  // namespace provmesh
