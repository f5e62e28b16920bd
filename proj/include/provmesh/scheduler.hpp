#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "provmesh/model.hpp"

namespace provmesh {

// Embedded parallel task scheduler with plugin hooks on task state changes.
// It exists to host observer hooks and generate load, not to compete with
// real parallel computing systems: no work stealing, no distribution.

struct TaskSpec {
  std::string activity_id;
  std::string callable;  // registered function name; defaults to activity_id
  Json args = Json::object();
  std::string workflow_id = "wf";
  std::string campaign_id = "campaign";
};

// Notification passed to plugins on every state change, shaped like a
// TaskStateEvent minus transport concerns.
struct TaskTransition {
  std::string task_id;
  std::string workflow_id;
  std::string campaign_id;
  std::string activity_id;
  TaskStatus new_status = TaskStatus::Submitted;
  TimestampNs at = 0;
  Json args;          // populated on SUBMITTED
  Json result;        // populated on FINISHED
  std::string error;  // populated on ERROR
};

// Callbacks must not throw into the scheduler; exceptions are caught and
// counted. They run synchronously on the transitioning thread and are
// expected to be O(1) enqueue-only.
struct SchedulerPlugin {
  std::function<void(const TaskTransition&)> callback;
};

struct UnknownActivity : std::runtime_error {
  explicit UnknownActivity(const std::string& name)
      : std::runtime_error("unknown activity '" + name + "'") {}
};

struct TaskFailed : std::runtime_error {
  std::vector<std::string> task_ids;
  explicit TaskFailed(std::vector<std::string> ids);
};

class TaskFuture {
 public:
  const std::string& task_id() const;
  void wait() const;
  bool done() const;
  bool failed() const;      // valid after wait()
  Json result() const;      // blocks; throws TaskFailed on error
  std::string error() const;

 private:
  friend class MiniScheduler;
  struct State;
  std::shared_ptr<State> state_;
};

std::string generate_task_id();  // UUIDv4

class MiniScheduler {
 public:
  using ActivityFn = std::function<Json(const Json& args)>;

  explicit MiniScheduler(int workers);
  ~MiniScheduler();
  MiniScheduler(const MiniScheduler&) = delete;
  MiniScheduler& operator=(const MiniScheduler&) = delete;

  void register_activity(const std::string& name, ActivityFn fn);
  void register_plugin(SchedulerPlugin plugin);

  TaskFuture submit(TaskSpec spec);  // throws UnknownActivity

  // One task per input, executed with at most `workers` in flight. Each input
  // value becomes args {"n": value}.
  std::vector<TaskFuture> map(const std::string& activity, const std::vector<Json>& inputs,
                              const std::string& workflow_id = "wf",
                              const std::string& campaign_id = "campaign");

  // Blocks until all futures are terminal; returns outputs in input order.
  // Throws TaskFailed listing every failed task. Idempotent.
  std::vector<Json> gather(const std::vector<TaskFuture>& futures);

  void shutdown();  // drains the queue, joins workers; idempotent
  int workers() const { return static_cast<int>(workers_.size()); }
  std::uint64_t plugin_error_count() const;
  std::uint64_t completed_count() const;

 private:
  struct Queued;
  void worker_loop();
  void fire(const TaskTransition& t);

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Queued> queue_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
  std::map<std::string, ActivityFn> activities_;
  mutable std::mutex plugin_mu_;
  std::shared_ptr<const std::vector<SchedulerPlugin>> plugins_;
  std::atomic<std::uint64_t> plugin_errors_{0};
  std::atomic<std::uint64_t> completed_{0};
};

}  // namespace provmesh
