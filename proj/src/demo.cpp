#include "provmesh/demo.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <thread>

#include "provmesh/adapters.hpp"
#include "provmesh/integrator.hpp"
#include "provmesh/scheduler.hpp"

namespace provmesh {

namespace fs = std::filesystem;

Json DemoResult::summary() const {
  Json per_wf = Json::object();
  for (const auto& [wf, n] : records_per_workflow) per_wf[wf] = n;
  return Json{{"store_dir", store_dir.string()},
              {"records", records},
              {"links", links},
              {"records_per_workflow", per_wf},
              {"expected_k_best", expected_k_best},
              {"report", report.to_json()}};
}

DemoResult run_ingest_demo(const DemoOptions& options) {
  DemoResult result;
  std::mt19937_64 rng(options.seed);
  std::size_t wf3_tasks = std::min(options.wf3_tasks, options.wf2_tasks);

  fs::path work_root = fs::temp_directory_path() / ("provmesh-demo-" + generate_task_id());
  fs::create_directories(work_root);
  fs::path store_dir = options.store_dir.empty() ? work_root / "store" : options.store_dir;
  fs::path log_path = work_root / "wf1.log";
  fs::path runs_dir = work_root / "wf3-runs";
  fs::create_directories(runs_dir);
  {
    std::ofstream touch(log_path);  // the log observer requires the file at registration
  }

  TaskStore store = TaskStore::open(store_dir);
  CampaignConfig campaign;
  campaign.campaign_id = options.campaign_id;
  campaign.workflows = {"wf1", "wf2", "wf3"};
  campaign.entity_keys = {"dataset", "model"};
  store.set_campaign(campaign);

  auto broker = std::make_shared<InProcBroker>();
  DataIntegrator integrator(store, broker->make_client(),
                            DataIntegrator::Options{"task_events", 256,
                                                    std::chrono::milliseconds(50)});
  integrator.start();

  Controller controller(BrokerEndpoint::in_process(broker));

  ObserverConfig log_cfg;
  log_cfg.adapter_kind = AdapterKind::LogFile;
  log_cfg.locator = log_path.string();
  log_cfg.poll_interval = options.poll_interval;
  log_cfg.campaign_id = options.campaign_id;
  log_cfg.default_activity_id = "acquire_image";
  controller.register_observer(log_cfg);

  ObserverConfig sched_cfg;
  sched_cfg.adapter_kind = AdapterKind::SchedulerPlugin;
  sched_cfg.campaign_id = options.campaign_id;
  auto sched_observer = controller.register_observer(sched_cfg);

  ObserverConfig runs_cfg;
  runs_cfg.adapter_kind = AdapterKind::RecordStore;
  runs_cfg.locator = runs_dir.string();
  runs_cfg.poll_interval = options.poll_interval;
  runs_cfg.campaign_id = options.campaign_id;
  runs_cfg.workflow_id = "wf3";
  runs_cfg.default_activity_id = "evaluate_model";
  controller.register_observer(runs_cfg);

  controller.start_all();

  // -------------------------------------------------------------------------
  // Workflow 1: instrument control script appending to its log file. Each
  // task scans one stage position and generates one raw dataset path.
  // -------------------------------------------------------------------------
  std::vector<std::string> datasets;
  {
    std::ofstream log(log_path, std::ios::app);
    std::uniform_real_distribution<double> exposure(0.5, 3.0);
    for (std::size_t i = 0; i < options.wf1_tasks; ++i) {
      std::string task = "wf1-t" + std::to_string(i);
      std::string dataset = "/data/raw/img_" + std::to_string(i) + ".raw";
      datasets.push_back(dataset);
      TimestampNs t0 = now_utc_ns();

      LogLineRecord submitted;
      submitted.timestamp = t0;
      submitted.level = "INFO";
      submitted.task_id = task;
      submitted.workflow_id = "wf1";
      submitted.kind = TaskStatus::Submitted;
      submitted.payload = Json{
          {"used", Json{{"position", i}, {"exposure_s", exposure(rng)}}},
          {"activity", "acquire_image"}};
      log << format_log_line(submitted) << '\n';

      LogLineRecord finished = submitted;
      finished.timestamp = t0 + 1'000'000;
      finished.kind = TaskStatus::Finished;
      finished.payload = Json{{"generated", Json{{"dataset", dataset}}},
                              {"activity", "acquire_image"}};
      log << format_log_line(finished) << '\n';
    }
  }

  // -------------------------------------------------------------------------
  // Workflow 2: hyperparameter search over the wf1 datasets on the scheduler.
  // Deterministic pseudo-metrics stand in for training results.
  // -------------------------------------------------------------------------
  std::vector<std::string> models;
  {
    MiniScheduler scheduler(4);
    scheduler.register_plugin(
        std::static_pointer_cast<SchedulerObserver>(sched_observer)->plugin());
    scheduler.register_activity("train_model", [](const Json& args) -> Json {
      std::uint64_t h = std::hash<std::string>{}(args.dump());
      double loss = 0.05 + static_cast<double>(h % 1000) / 2000.0;
      double accuracy = 1.0 - loss / 2.0;
      return Json{{"model", args.value("model_out", std::string{})},
                  {"loss", loss},
                  {"accuracy", accuracy}};
    });

    std::uniform_real_distribution<double> lr(1e-4, 1e-1);
    std::uniform_int_distribution<int> layers(2, 8);
    std::uniform_int_distribution<int> coin(0, 1);
    std::vector<TaskFuture> futures;
    for (std::size_t i = 0; i < options.wf2_tasks; ++i) {
      std::string model = "file:///models/" + options.campaign_id + "/m" + std::to_string(i) + ".pt";
      models.push_back(model);
      TaskSpec spec;
      spec.activity_id = "train_model";
      spec.workflow_id = "wf2";
      spec.campaign_id = options.campaign_id;
      spec.args = Json{{"dataset", datasets[i % datasets.size()]},
                       {"learning_rate", lr(rng)},
                       {"layers", layers(rng)},
                       {"batch_norm", coin(rng) == 1},
                       {"model_out", model}};
      futures.push_back(scheduler.submit(std::move(spec)));
    }
    scheduler.gather(futures);
    scheduler.shutdown();
  }

  // -------------------------------------------------------------------------
  // Workflow 3: evaluation runs; one run-record document per trained model
  // with a planted, known mse.
  // -------------------------------------------------------------------------
  {
    std::uniform_real_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < wf3_tasks; ++i) {
      std::string run_id = "wf3-r" + std::to_string(i);
      double mse = 0.1 + noise(rng);
      result.mse_by_task[run_id] = mse;
      TimestampNs t0 = now_utc_ns();
      Json doc{{"run_id", run_id},
               {"params", Json{{"model", models[i]}, {"split", "80/20"}}},
               {"metrics", Json{{"mse", mse},
                                {"plot", "/plots/" + options.campaign_id + "/p" +
                                             std::to_string(i) + ".png"}}},
               {"status", "FINISHED"},
               {"start_time", format_rfc3339_ns(t0)},
               {"end_time", format_rfc3339_ns(t0 + 2'000'000)}};
      std::ofstream f(runs_dir / (run_id + ".json"));
      f << doc.dump();
    }
  }

  std::vector<std::pair<double, std::string>> ranked;
  for (const auto& [task, mse] : result.mse_by_task) ranked.emplace_back(mse, task);
  std::sort(ranked.begin(), ranked.end());
  for (std::size_t i = 0; i < ranked.size() && i < options.report_k; ++i) {
    result.expected_k_best.push_back(ranked[i].second);
  }

  // Wait for the pipeline to drain: every task of every workflow visible.
  std::size_t expected = options.wf1_tasks + options.wf2_tasks + wf3_tasks;
  auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(30);
  while (store.size() < expected && std::chrono::steady_clock::now() < deadline) {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  // One extra poll cycle so late run-record updates settle, then stop.
  std::this_thread::sleep_for(2 * options.poll_interval);
  controller.stop_all();
  integrator.stop();

  result.store_dir = store_dir;
  result.records = store.size();
  result.links = store.links().size();
  for (const auto& doc : store.all_documents()) {
    result.records_per_workflow[doc.value("workflow_id", std::string{})] += 1;
  }

  QueryService service(store);
  result.report =
      service.lineage_report(options.campaign_id, options.report_k, "generated.mse", true);

  store.close();
  if (!options.keep_store && options.store_dir.empty()) {
    std::error_code ec;
    fs::remove_all(store_dir, ec);
  }
  std::error_code ec;
  fs::remove(log_path, ec);
  fs::remove_all(runs_dir, ec);
  if (options.store_dir.empty() && !options.keep_store) fs::remove_all(work_root, ec);
  return result;
}

}  // namespace provmesh
