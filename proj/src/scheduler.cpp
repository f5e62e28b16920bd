#include "provmesh/scheduler.hpp"

#include <atomic>
#include <random>
#include <sstream>

namespace provmesh {

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
  std::ostringstream os;
  os << "task(s) failed:";
  for (const auto& id : ids) os << ' ' << id;
  return os.str();
}

}  // namespace

TaskFailed::TaskFailed(std::vector<std::string> ids)
    : std::runtime_error(join_ids(ids)), task_ids(std::move(ids)) {}

std::string generate_task_id() {
  thread_local std::mt19937_64 rng{std::random_device{}()};
  std::uint64_t hi = rng();
  std::uint64_t lo = rng();
  hi = (hi & 0xFFFFFFFFFFFF0FFFULL) | 0x0000000000004000ULL;  // version 4
  lo = (lo & 0x3FFFFFFFFFFFFFFFULL) | 0x8000000000000000ULL;  // variant 10
  char buf[37];
  std::snprintf(buf, sizeof(buf), "%08x-%04x-%04x-%04x-%012llx",
                static_cast<unsigned>(hi >> 32), static_cast<unsigned>((hi >> 16) & 0xFFFF),
                static_cast<unsigned>(hi & 0xFFFF), static_cast<unsigned>(lo >> 48),
                static_cast<unsigned long long>(lo & 0xFFFFFFFFFFFFULL));
  return buf;
}

struct TaskFuture::State {
  std::string task_id;
  mutable std::mutex m;
  mutable std::condition_variable cv;
  bool done = false;
  bool failed = false;
  Json result;
  std::string error;

  void finish(Json r) {
    std::lock_guard lk(m);
    result = std::move(r);
    done = true;
    cv.notify_all();
  }
  void fail(std::string e) {
    std::lock_guard lk(m);
    error = std::move(e);
    failed = true;
    done = true;
    cv.notify_all();
  }
};

const std::string& TaskFuture::task_id() const { return state_->task_id; }

void TaskFuture::wait() const {
  std::unique_lock lk(state_->m);
  state_->cv.wait(lk, [&] { return state_->done; });
}

bool TaskFuture::done() const {
  std::lock_guard lk(state_->m);
  return state_->done;
}

bool TaskFuture::failed() const {
  std::lock_guard lk(state_->m);
  return state_->failed;
}

Json TaskFuture::result() const {
  wait();
  std::lock_guard lk(state_->m);
  if (state_->failed) throw TaskFailed({state_->task_id});
  return state_->result;
}

std::string TaskFuture::error() const {
  std::lock_guard lk(state_->m);
  return state_->error;
}

struct MiniScheduler::Queued {
  TaskSpec spec;
  std::string task_id;
  ActivityFn fn;
  std::shared_ptr<TaskFuture::State> state;
};

MiniScheduler::MiniScheduler(int workers)
    : plugins_(std::make_shared<const std::vector<SchedulerPlugin>>()) {
  if (workers < 1) workers = 1;
  workers_.reserve(static_cast<std::size_t>(workers));
  for (int i = 0; i < workers; ++i) {
    workers_.emplace_back([this] { worker_loop(); });
  }
}

MiniScheduler::~MiniScheduler() { shutdown(); }

void MiniScheduler::register_activity(const std::string& name, ActivityFn fn) {
  std::lock_guard lk(mu_);
  activities_[name] = std::move(fn);
}

void MiniScheduler::register_plugin(SchedulerPlugin plugin) {
  std::lock_guard lk(plugin_mu_);
  auto next = std::make_shared<std::vector<SchedulerPlugin>>(*plugins_);
  next->push_back(std::move(plugin));
  plugins_ = std::move(next);
}

void MiniScheduler::fire(const TaskTransition& t) {
  std::shared_ptr<const std::vector<SchedulerPlugin>> plugins;
  {
    std::lock_guard lk(plugin_mu_);
    plugins = plugins_;
  }
  for (const auto& p : *plugins) {
    try {
      if (p.callback) p.callback(t);
    } catch (...) {
      plugin_errors_.fetch_add(1, std::memory_order_relaxed);
    }
  }
}

TaskFuture MiniScheduler::submit(TaskSpec spec) {
  if (spec.callable.empty()) spec.callable = spec.activity_id;
  Queued q;
  {
    std::lock_guard lk(mu_);
    auto it = activities_.find(spec.callable);
    if (it == activities_.end()) throw UnknownActivity(spec.callable);
    q.fn = it->second;
  }
  q.task_id = generate_task_id();
  q.state = std::make_shared<TaskFuture::State>();
  q.state->task_id = q.task_id;
  q.spec = std::move(spec);

  TaskTransition t;
  t.task_id = q.task_id;
  t.workflow_id = q.spec.workflow_id;
  t.campaign_id = q.spec.campaign_id;
  t.activity_id = q.spec.activity_id;
  t.new_status = TaskStatus::Submitted;
  t.at = now_utc_ns();
  t.args = q.spec.args;
  fire(t);

  TaskFuture f;
  f.state_ = q.state;
  {
    std::lock_guard lk(mu_);
    queue_.push_back(std::move(q));
  }
  cv_.notify_one();
  return f;
}

std::vector<TaskFuture> MiniScheduler::map(const std::string& activity,
                                           const std::vector<Json>& inputs,
                                           const std::string& workflow_id,
                                           const std::string& campaign_id) {
  std::vector<TaskFuture> futures;
  futures.reserve(inputs.size());
  for (const Json& in : inputs) {
    TaskSpec spec;
    spec.activity_id = activity;
    spec.args = Json{{"n", in}};
    spec.workflow_id = workflow_id;
    spec.campaign_id = campaign_id;
    futures.push_back(submit(std::move(spec)));
  }
  return futures;
}

std::vector<Json> MiniScheduler::gather(const std::vector<TaskFuture>& futures) {
  std::vector<Json> out;
  out.reserve(futures.size());
  std::vector<std::string> failed;
  for (const auto& f : futures) {
    f.wait();
    if (f.failed()) {
      failed.push_back(f.task_id());
    }
  }
  if (!failed.empty()) throw TaskFailed(std::move(failed));
  for (const auto& f : futures) {
    std::lock_guard lk(f.state_->m);
    out.push_back(f.state_->result);
  }
  return out;
}

void MiniScheduler::worker_loop() {
  for (;;) {
    Queued q;
    {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) {
        if (stopping_) return;
        continue;
      }
      q = std::move(queue_.front());
      queue_.pop_front();
    }

    TaskTransition t;
    t.task_id = q.task_id;
    t.workflow_id = q.spec.workflow_id;
    t.campaign_id = q.spec.campaign_id;
    t.activity_id = q.spec.activity_id;
    t.new_status = TaskStatus::Running;
    t.at = now_utc_ns();
    fire(t);

    try {
      Json result = q.fn(q.spec.args);
      t.new_status = TaskStatus::Finished;
      t.at = now_utc_ns();
      t.result = result;
      fire(t);
      q.state->finish(std::move(result));
    } catch (const std::exception& e) {
      t.new_status = TaskStatus::Error;
      t.at = now_utc_ns();
      t.error = e.what();
      fire(t);
      q.state->fail(e.what());
    } catch (...) {
      t.new_status = TaskStatus::Error;
      t.at = now_utc_ns();
      t.error = "unknown error";
      fire(t);
      q.state->fail("unknown error");
    }
    completed_.fetch_add(1, std::memory_order_relaxed);
  }
}

void MiniScheduler::shutdown() {
  {
    std::lock_guard lk(mu_);
    if (stopping_ && workers_.empty()) return;
    stopping_ = true;
  }
  cv_.notify_all();
  for (auto& w : workers_) {
    if (w.joinable()) w.join();
  }
  workers_.clear();
}

std::uint64_t MiniScheduler::plugin_error_count() const {
  return plugin_errors_.load(std::memory_order_relaxed);
}

std::uint64_t MiniScheduler::completed_count() const {
  return completed_.load(std::memory_order_relaxed);
}

}  // namespace provmesh
