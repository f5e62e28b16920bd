#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <chrono>
#include <map>
#include <mutex>

#include "provmesh/scheduler.hpp"

using namespace provmesh;

namespace {

void register_incr(MiniScheduler& s) {
  s.register_activity("incr", [](const Json& args) -> Json { return args.at("n").get<int>() + 1; });
}

void register_sleep(MiniScheduler& s) {
  s.register_activity("sleep_ms", [](const Json& args) -> Json {
    std::this_thread::sleep_for(std::chrono::milliseconds(args.at("n").get<int>()));
    return args.at("n");
  });
}

}  // namespace

TEST_CASE("map incr over range(1000) yields 1..1000") {
  MiniScheduler scheduler(4);
  register_incr(scheduler);
  std::vector<Json> inputs;
  for (int i = 0; i < 1000; ++i) inputs.push_back(i);
  auto futures = scheduler.map("incr", inputs);
  auto results = scheduler.gather(futures);
  REQUIRE(results.size() == 1000);
  for (int i = 0; i < 1000; ++i) CHECK(results[static_cast<std::size_t>(i)] == i + 1);
}

TEST_CASE("map over an empty input list") {
  MiniScheduler scheduler(2);
  register_incr(scheduler);
  auto futures = scheduler.map("incr", {});
  CHECK(futures.empty());
  CHECK(scheduler.gather(futures).empty());
}

TEST_CASE("unknown activity throws") {
  MiniScheduler scheduler(1);
  CHECK_THROWS_AS(scheduler.map("nope", {Json(1)}), UnknownActivity);
}

TEST_CASE("gather is idempotent and ordered") {
  MiniScheduler scheduler(3);
  register_incr(scheduler);
  auto futures = scheduler.map("incr", {Json(1), Json(2), Json(3)});
  auto first = scheduler.gather(futures);
  auto second = scheduler.gather(futures);
  CHECK(first == std::vector<Json>{2, 3, 4});
  CHECK(first == second);
}

TEST_CASE("gather reports exactly the failed task ids") {
  MiniScheduler scheduler(2);
  scheduler.register_activity("maybe_fail", [](const Json& args) -> Json {
    if (args.at("n").get<int>() == 2) throw std::runtime_error("boom");
    return args.at("n");
  });
  auto futures = scheduler.map("maybe_fail", {Json(1), Json(2), Json(3)});
  try {
    scheduler.gather(futures);
    FAIL("expected TaskFailed");
  } catch (const TaskFailed& e) {
    REQUIRE(e.task_ids.size() == 1);
    CHECK(e.task_ids[0] == futures[1].task_id());
  }
}

TEST_CASE("plugins observe SUBMITTED -> RUNNING -> terminal per task, no skips") {
  MiniScheduler scheduler(4);
  register_incr(scheduler);

  std::mutex mu;
  std::map<std::string, std::vector<TaskStatus>> transitions;
  scheduler.register_plugin(SchedulerPlugin{[&](const TaskTransition& t) {
    std::lock_guard lk(mu);
    transitions[t.task_id].push_back(t.new_status);
  }});

  auto futures = scheduler.map("incr", std::vector<Json>(50, Json(1)));
  scheduler.gather(futures);
  scheduler.shutdown();

  REQUIRE(transitions.size() == 50);
  for (const auto& [id, seq] : transitions) {
    REQUIRE(seq.size() == 3);
    CHECK(seq[0] == TaskStatus::Submitted);
    CHECK(seq[1] == TaskStatus::Running);
    CHECK(is_terminal(seq[2]));
  }
}

TEST_CASE("two plugins see identical transition sequences") {
  MiniScheduler scheduler(2);
  register_incr(scheduler);
  std::mutex mu;
  std::map<std::string, std::vector<TaskStatus>> a, b;
  scheduler.register_plugin(SchedulerPlugin{[&](const TaskTransition& t) {
    std::lock_guard lk(mu);
    a[t.task_id].push_back(t.new_status);
  }});
  scheduler.register_plugin(SchedulerPlugin{[&](const TaskTransition& t) {
    std::lock_guard lk(mu);
    b[t.task_id].push_back(t.new_status);
  }});
  scheduler.gather(scheduler.map("incr", std::vector<Json>(20, Json(5))));
  scheduler.shutdown();
  CHECK(a.size() == 20);
  CHECK(a == b);  // same per-task sequence for both plugins
}

TEST_CASE("a throwing plugin never disturbs task execution") {
  MiniScheduler scheduler(2);
  register_incr(scheduler);
  scheduler.register_plugin(
      SchedulerPlugin{[](const TaskTransition&) { throw std::runtime_error("plugin bug"); }});
  auto results = scheduler.gather(scheduler.map("incr", std::vector<Json>(10, Json(0))));
  CHECK(results.size() == 10);
  scheduler.shutdown();
  CHECK(scheduler.plugin_error_count() == 30);  // one per transition
}

TEST_CASE("zero plugins and a no-op plugin produce identical results") {
  std::vector<Json> inputs;
  for (int i = 0; i < 25; ++i) inputs.push_back(i);
  std::vector<Json> bare, observed;
  {
    MiniScheduler scheduler(3);
    register_incr(scheduler);
    bare = scheduler.gather(scheduler.map("incr", inputs));
  }
  {
    MiniScheduler scheduler(3);
    register_incr(scheduler);
    scheduler.register_plugin(SchedulerPlugin{[](const TaskTransition&) {}});
    observed = scheduler.gather(scheduler.map("incr", inputs));
  }
  CHECK(bare == observed);
}

TEST_CASE("at most W tasks run simultaneously") {
  const int workers = 3;
  MiniScheduler scheduler(workers);
  std::atomic<int> running{0};
  std::atomic<int> peak{0};
  scheduler.register_activity("probe", [&](const Json&) -> Json {
    int now = running.fetch_add(1) + 1;
    int seen = peak.load();
    while (now > seen && !peak.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    running.fetch_sub(1);
    return nullptr;
  });
  scheduler.gather(scheduler.map("probe", std::vector<Json>(30, Json(0))));
  CHECK(peak.load() <= workers);
  CHECK(peak.load() >= 1);
}

TEST_CASE("makespan tracks the analytic ideal for sleep tasks") {
  // 100 tasks x 10 ms on 4 workers: ideal makespan = ceil(100/4) x 10 ms.
  MiniScheduler scheduler(4);
  register_sleep(scheduler);
  auto t0 = std::chrono::steady_clock::now();
  scheduler.gather(scheduler.map("sleep_ms", std::vector<Json>(100, Json(10))));
  double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  double ideal = (100.0 / 4.0) * 0.010;
  CHECK(elapsed >= ideal * 0.95);
  CHECK(elapsed <= ideal * 1.5);  // 50% slack for scheduling overhead
}

TEST_CASE("submission is thread-safe across submitters") {
  MiniScheduler scheduler(4);
  register_incr(scheduler);
  std::vector<std::thread> submitters;
  std::mutex mu;
  std::vector<TaskFuture> futures;
  for (int s = 0; s < 4; ++s) {
    submitters.emplace_back([&scheduler, &mu, &futures, s] {
      for (int i = 0; i < 50; ++i) {
        auto f = scheduler.map("incr", {Json(s * 100 + i)});
        std::lock_guard lk(mu);
        futures.push_back(f[0]);
      }
    });
  }
  for (auto& t : submitters) t.join();
  auto results = scheduler.gather(futures);
  CHECK(results.size() == 200);
}
