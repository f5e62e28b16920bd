#pragma once

#include <map>

#include "provmesh/observer.hpp"
#include "provmesh/scheduler.hpp"

namespace provmesh {

// ---------------------------------------------------------------------------
// Scheduler-plugin observer (intra-scheduler strategy).
//
// Attach plugin() to a MiniScheduler. The callback builds a TaskStateEvent
// from each transition (used from the task args on SUBMITTED, generated from
// the result on FINISHED), applies the relevance filter, and enqueues it onto
// the emitter buffer — constant work on the scheduler's thread. Exceptions
// never propagate into the scheduler.
// ---------------------------------------------------------------------------

class SchedulerObserver final : public Observer {
 public:
  explicit SchedulerObserver(ObserverConfig config);
  SchedulerPlugin plugin();
  std::uint64_t callback_errors() const { return callback_errors_.load(); }

 private:
  void handle(const TaskTransition& t);
  std::atomic<std::uint64_t> callback_errors_{0};
};

// ---------------------------------------------------------------------------
// Log-file observer (external polling).
//
// Line grammar (one event per line):
//   <RFC3339> <LEVEL> task=<id> wf=<id> kind=<SUBMITTED|RUNNING|FINISHED|ERROR> <single-line JSON payload>
// The payload object either carries explicit sections ("used", "generated",
// "error", ...) or is treated whole as used (SUBMITTED/RUNNING) respectively
// generated (FINISHED). Malformed lines are counted, never fatal.
// ---------------------------------------------------------------------------

struct LogLineRecord {
  TimestampNs timestamp = 0;
  std::string level;
  std::string task_id;
  std::string workflow_id;
  TaskStatus kind = TaskStatus::Submitted;
  Json payload = Json::object();
};

std::optional<LogLineRecord> parse_log_line(std::string_view line);
std::string format_log_line(const LogLineRecord& rec);

class LogFileObserver final : public Observer {
 public:
  explicit LogFileObserver(ObserverConfig config);

  // One polling pass: reads bytes past the watermark, emits one event per
  // complete line, leaves the watermark before any trailing fragment. A file
  // rotation (inode change or size regression) resets the watermark to 0.
  void observe() override;

  struct Stats {
    std::uint64_t lines_parsed = 0;
    std::uint64_t malformed_lines = 0;
    std::uint64_t rotations = 0;
  };
  Stats stats() const;
  std::uint64_t watermark() const { return watermark_; }

 private:
  TaskStateEvent to_event(const LogLineRecord& rec) const;
  std::uint64_t watermark_ = 0;
  std::uint64_t inode_ = 0;
  mutable std::mutex stats_mu_;
  Stats stats_;
};

// ---------------------------------------------------------------------------
// Record-store observer (external polling).
//
// Watches a flat directory of run-record documents, one JSON file per run:
//   {"run_id": str, "params": {...}, "metrics": {...},
//    "status": "SUBMITTED|RUNNING|FINISHED|ERROR",
//    "start_time": rfc3339?, "end_time": rfc3339?}
// New runs emit a full event (params -> used, metrics -> generated); updated
// runs emit an event carrying only the changed fields. The watermark is the
// max mtime seen, re-scanned with 100 ms slack to tolerate coarse mtimes.
// ---------------------------------------------------------------------------

struct RunRecord {
  std::string run_id;
  Json params = Json::object();
  Json metrics = Json::object();
  TaskStatus status = TaskStatus::Running;
  std::optional<TimestampNs> start_time;
  std::optional<TimestampNs> end_time;
};

std::optional<RunRecord> parse_run_record(const Json& j);

class RecordStoreObserver final : public Observer {
 public:
  explicit RecordStoreObserver(ObserverConfig config);

  void observe() override;

  struct Stats {
    std::uint64_t runs_seen = 0;
    std::uint64_t events_emitted = 0;
    std::uint64_t unreadable_records = 0;
  };
  Stats stats() const;

 private:
  struct Snapshot {
    Json params;
    Json metrics;
    TaskStatus status;
  };
  TimestampNs watermark_ns_ = 0;
  std::map<std::string, Snapshot> snapshot_;
  mutable std::mutex stats_mu_;
  Stats stats_;
};

}  // namespace provmesh
