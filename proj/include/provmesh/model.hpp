#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

#include "provmesh/time_utils.hpp"

namespace provmesh {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Task status
// ---------------------------------------------------------------------------

enum class TaskStatus { Submitted, Running, Finished, Error };

// SUBMITTED(0) < RUNNING(1) < FINISHED(2) = ERROR(2). FINISHED and ERROR are
// equally terminal; between two terminal events the one that sorts first by
// (observed_at, sequence_no, ...) wins.
int status_rank(TaskStatus s);
bool is_terminal(TaskStatus s);
std::string_view to_string(TaskStatus s);
std::optional<TaskStatus> status_from_string(std::string_view s);

// ---------------------------------------------------------------------------
// Telemetry
// ---------------------------------------------------------------------------

struct Telemetry {
  double cpu_percent = 0.0;  // 0..100 x cores
  std::int64_t rss_bytes = 0;
  std::int64_t io_read_bytes = 0;
  std::int64_t io_write_bytes = 0;
  TimestampNs captured_at = 0;

  Json to_json() const;
  static std::optional<Telemetry> from_json(const Json& j);
  bool operator==(const Telemetry&) const = default;
};

// ---------------------------------------------------------------------------
// TaskStateEvent — the wire message an observer emits on a task state change.
// Canonical encoding is one UTF-8 JSON object per event; timestamps are
// RFC 3339 strings with nanoseconds.
// ---------------------------------------------------------------------------

struct TaskStateEvent {
  std::string task_id;
  std::string workflow_id;
  std::string campaign_id;
  std::string activity_id;
  TaskStatus new_status = TaskStatus::Submitted;
  TimestampNs observed_at = 0;
  // Partial TaskRecord fields carried by this transition. Recognized keys:
  // "used", "generated", "environment" (objects), "error", "stdout_tail",
  // "stderr_tail", "user" (strings). Unknown keys are ignored.
  Json payload = Json::object();
  std::optional<Telemetry> telemetry;
  std::string adapter_kind;
  std::uint64_t sequence_no = 0;

  Json to_json() const;
  std::string encode() const;
  bool operator==(const TaskStateEvent&) const = default;
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

enum class ValidationCode { MissingField, BadStatus, BadTimestamp };

struct ValidationError {
  ValidationCode code;
  std::string field;   // offending field
  std::string detail;
  std::string to_string() const;
};

// Semantic checks on a typed event: non-empty task_id, parseable timestamp,
// non-empty used/generated/environment keys, non-negative telemetry counters.
std::optional<ValidationError> validate_event(const TaskStateEvent& ev);

// Decode + validate one wire object. Shape errors (missing new_status, an
// unknown status string, an unparseable observed_at) are reported with the
// same error type so callers can count and skip.
struct EventParseResult {
  std::optional<TaskStateEvent> event;
  std::optional<ValidationError> error;
  bool ok() const { return event.has_value(); }
};
EventParseResult parse_event(const Json& wire);
EventParseResult decode_event(std::string_view bytes);

// ---------------------------------------------------------------------------
// Entity digests
// ---------------------------------------------------------------------------

// Deterministic SHA-256 hex digest of a value after canonical ordering of map
// keys (recursive). Type sensitive: digest(1) != digest("1").
std::string entity_digest(const Json& value);

// ---------------------------------------------------------------------------
// TaskRecord — one row of the task "fact table".
// ---------------------------------------------------------------------------

// Order stamp used for last-observed-wins merging. Comparison is lexicographic
// over (observed_at, sequence_no, adapter, fingerprint), which gives every
// event-carried value a total order independent of arrival order.
struct MergeStamp {
  TimestampNs observed_at = 0;
  std::uint64_t sequence_no = 0;
  std::string adapter;
  std::string fingerprint;

  auto operator<=>(const MergeStamp&) const = default;
  Json to_json() const;
  static MergeStamp from_json(const Json& j);
};

constexpr std::size_t kMaxTailBytes = 4096;  // stdout/stderr tails are bounded

struct TaskRecord {
  std::string task_id;
  std::string workflow_id;
  std::string campaign_id;
  std::string activity_id;
  TaskStatus status = TaskStatus::Submitted;
  Json used = Json::object();
  Json generated = Json::object();
  std::optional<TimestampNs> started_at;
  std::optional<TimestampNs> ended_at;
  std::optional<std::string> stdout_tail;
  std::optional<std::string> stderr_tail;
  std::optional<Telemetry> telemetry_at_start;
  std::optional<Telemetry> telemetry_at_end;
  Json environment = Json::object();
  std::string user;
  std::string adapter_kind;

  // Merge bookkeeping. Kept with the record (and persisted) so that merging
  // stays a pure, arrival-order-independent function of the event set.
  struct MergeState {
    std::map<std::string, MergeStamp> used_keys;
    std::map<std::string, MergeStamp> generated_keys;
    std::map<std::string, MergeStamp> environment_keys;
    std::map<std::string, MergeStamp> scalars;
    std::optional<MergeStamp> terminal;        // winning terminal event
    std::optional<TimestampNs> min_running_observed;
    std::optional<TimestampNs> min_observed;
    std::optional<MergeStamp> telemetry_start;  // earliest telemetry carrier
    std::optional<MergeStamp> telemetry_end;    // earliest terminal telemetry carrier
    bool operator==(const MergeState&) const = default;
  } merge_state;

  Json to_json() const;  // full document; bookkeeping lives under "merge"
  static TaskRecord from_json(const Json& j);
  bool operator==(const TaskRecord&) const = default;
};

struct TaskIdMismatch : std::runtime_error {
  TaskIdMismatch(const std::string& record_id, const std::string& event_id)
      : std::runtime_error("task_id mismatch: record '" + record_id +
                           "' vs event '" + event_id + "'") {}
};

// Folds one validated event into the stored record state (or creates the
// record when absent). Idempotent, and commutative in its effect on the final
// record: any permutation of a task's event set yields the same record.
TaskRecord merge_event(const std::optional<TaskRecord>& record, const TaskStateEvent& event);

// ---------------------------------------------------------------------------
// ProvenanceLink — a resolved cross-workflow used<->generated entity match.
// ---------------------------------------------------------------------------

struct ProvenanceLink {
  std::string producer_task_id;
  std::string consumer_task_id;
  std::string entity_key;           // producer-side generated key that matched
  std::string entity_value_digest;

  Json to_json() const;
  static std::optional<ProvenanceLink> from_json(const Json& j);
  bool operator==(const ProvenanceLink&) const = default;
};

// True for values that look like dataset/artifact references: strings with a
// URI scheme ("file://...", "s3://...") or absolute paths. Values under keys
// declared in CampaignConfig.entity_keys are eligible regardless of shape.
bool is_reference_value(const Json& value);

}  // namespace provmesh
