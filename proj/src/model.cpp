#include "provmesh/model.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstring>

namespace provmesh {

// ---------------------------------------------------------------------------
// Status
// ---------------------------------------------------------------------------

int status_rank(TaskStatus s) {
  switch (s) {
    case TaskStatus::Submitted: return 0;
    case TaskStatus::Running: return 1;
    case TaskStatus::Finished:
    case TaskStatus::Error: return 2;
  }
  return 0;
}

bool is_terminal(TaskStatus s) { return status_rank(s) == 2; }

std::string_view to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::Submitted: return "SUBMITTED";
    case TaskStatus::Running: return "RUNNING";
    case TaskStatus::Finished: return "FINISHED";
    case TaskStatus::Error: return "ERROR";
  }
  return "SUBMITTED";
}

std::optional<TaskStatus> status_from_string(std::string_view s) {
  if (s == "SUBMITTED") return TaskStatus::Submitted;
  if (s == "RUNNING") return TaskStatus::Running;
  if (s == "FINISHED") return TaskStatus::Finished;
  if (s == "ERROR") return TaskStatus::Error;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Telemetry
// ---------------------------------------------------------------------------

Json Telemetry::to_json() const {
  return Json{{"cpu_percent", cpu_percent},
              {"rss_bytes", rss_bytes},
              {"io_read_bytes", io_read_bytes},
              {"io_write_bytes", io_write_bytes},
              {"captured_at", format_rfc3339_ns(captured_at)}};
}

std::optional<Telemetry> Telemetry::from_json(const Json& j) {
  if (!j.is_object()) return std::nullopt;
  Telemetry t;
  t.cpu_percent = j.value("cpu_percent", 0.0);
  t.rss_bytes = j.value("rss_bytes", std::int64_t{0});
  t.io_read_bytes = j.value("io_read_bytes", std::int64_t{0});
  t.io_write_bytes = j.value("io_write_bytes", std::int64_t{0});
  if (auto it = j.find("captured_at"); it != j.end() && it->is_string()) {
    auto ts = parse_rfc3339_ns(it->get_ref<const std::string&>());
    if (!ts) return std::nullopt;
    t.captured_at = *ts;
  } else {
    return std::nullopt;
  }
  return t;
}

// ---------------------------------------------------------------------------
// TaskStateEvent wire form
// ---------------------------------------------------------------------------

Json TaskStateEvent::to_json() const {
  Json j{{"task_id", task_id},
         {"workflow_id", workflow_id},
         {"campaign_id", campaign_id},
         {"activity_id", activity_id},
         {"new_status", std::string(to_string(new_status))},
         {"observed_at", format_rfc3339_ns(observed_at)},
         {"payload", payload},
         {"adapter_kind", adapter_kind},
         {"sequence_no", sequence_no}};
  if (telemetry) j["telemetry"] = telemetry->to_json();
  return j;
}

std::string TaskStateEvent::encode() const { return to_json().dump(); }

EventParseResult parse_event(const Json& wire) {
  auto fail = [](ValidationCode code, std::string field, std::string detail) {
    return EventParseResult{std::nullopt, ValidationError{code, std::move(field), std::move(detail)}};
  };
  if (!wire.is_object()) {
    return fail(ValidationCode::MissingField, "event", "not a JSON object");
  }

  TaskStateEvent ev;
  auto get_str = [&](const char* key) -> std::string {
    auto it = wire.find(key);
    if (it != wire.end() && it->is_string()) return it->get<std::string>();
    return {};
  };
  ev.task_id = get_str("task_id");
  ev.workflow_id = get_str("workflow_id");
  ev.campaign_id = get_str("campaign_id");
  ev.activity_id = get_str("activity_id");
  ev.adapter_kind = get_str("adapter_kind");

  auto st = wire.find("new_status");
  if (st == wire.end() || !st->is_string()) {
    return fail(ValidationCode::MissingField, "new_status", "missing or not a string");
  }
  auto status = status_from_string(st->get_ref<const std::string&>());
  if (!status) {
    return fail(ValidationCode::BadStatus, "new_status",
                "unknown status '" + st->get<std::string>() + "'");
  }
  ev.new_status = *status;

  auto at = wire.find("observed_at");
  if (at == wire.end()) {
    return fail(ValidationCode::MissingField, "observed_at", "missing");
  }
  if (!at->is_string()) {
    return fail(ValidationCode::BadTimestamp, "observed_at", "not a string");
  }
  auto ts = parse_rfc3339_ns(at->get_ref<const std::string&>());
  if (!ts) {
    return fail(ValidationCode::BadTimestamp, "observed_at",
                "unparseable '" + at->get<std::string>() + "'");
  }
  ev.observed_at = *ts;

  if (auto it = wire.find("payload"); it != wire.end()) {
    if (!it->is_object()) {
      return fail(ValidationCode::MissingField, "payload", "not an object");
    }
    ev.payload = *it;
  }
  if (auto it = wire.find("telemetry"); it != wire.end() && !it->is_null()) {
    auto t = Telemetry::from_json(*it);
    if (!t) return fail(ValidationCode::BadTimestamp, "telemetry.captured_at", "unparseable");
    ev.telemetry = *t;
  }
  if (auto it = wire.find("sequence_no"); it != wire.end() && it->is_number()) {
    ev.sequence_no = it->get<std::uint64_t>();
  }

  if (auto err = validate_event(ev)) {
    return EventParseResult{std::nullopt, err};
  }
  return EventParseResult{std::move(ev), std::nullopt};
}

EventParseResult decode_event(std::string_view bytes) {
  Json j = Json::parse(bytes, nullptr, false);
  if (j.is_discarded()) {
    return EventParseResult{
        std::nullopt, ValidationError{ValidationCode::MissingField, "event", "invalid JSON"}};
  }
  return parse_event(j);
}

std::string ValidationError::to_string() const {
  const char* kind = "";
  switch (code) {
    case ValidationCode::MissingField: kind = "MissingField"; break;
    case ValidationCode::BadStatus: kind = "BadStatus"; break;
    case ValidationCode::BadTimestamp: kind = "BadTimestamp"; break;
  }
  return std::string(kind) + "(" + field + "): " + detail;
}

std::optional<ValidationError> validate_event(const TaskStateEvent& ev) {
  if (ev.task_id.empty()) {
    return ValidationError{ValidationCode::MissingField, "task_id", "empty"};
  }
  if (ev.observed_at <= 0) {
    return ValidationError{ValidationCode::BadTimestamp, "observed_at", "unset"};
  }
  for (const char* section : {"used", "generated", "environment"}) {
    auto it = ev.payload.find(section);
    if (it == ev.payload.end()) continue;
    if (!it->is_object()) {
      return ValidationError{ValidationCode::MissingField, std::string("payload.") + section,
                             "not an object"};
    }
    for (auto& [k, v] : it->items()) {
      (void)v;
      if (k.empty()) {
        return ValidationError{ValidationCode::MissingField, std::string("payload.") + section,
                               "empty key"};
      }
    }
  }
  if (ev.telemetry) {
    const Telemetry& t = *ev.telemetry;
    if (t.rss_bytes < 0 || t.io_read_bytes < 0 || t.io_write_bytes < 0 || t.cpu_percent < 0) {
      return ValidationError{ValidationCode::MissingField, "telemetry", "negative counter"};
    }
    if (t.captured_at <= 0) {
      return ValidationError{ValidationCode::BadTimestamp, "telemetry.captured_at", "unset"};
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Digests
// ---------------------------------------------------------------------------

std::string entity_digest(const Json& value) {
  // nlohmann's default object backing is std::map, so dump() is already
  // canonical under key reordering, recursively.
  std::string canon = value.dump();
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_Digest(canon.data(), canon.size(), md.data(), &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

bool is_reference_value(const Json& value) {
  if (!value.is_string()) return false;
  const std::string& s = value.get_ref<const std::string&>();
  if (s.empty()) return false;
  if (s[0] == '/') return true;  // absolute path
  // URI scheme: ALPHA *( ALPHA / DIGIT / "+" / "-" / "." ) "://"
  std::size_t i = 0;
  if (!std::isalpha(static_cast<unsigned char>(s[0]))) return false;
  while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '+' ||
                          s[i] == '-' || s[i] == '.')) {
    ++i;
  }
  return i + 2 < s.size() && s[i] == ':' && s[i + 1] == '/' && s[i + 2] == '/';
}

// ---------------------------------------------------------------------------
// MergeStamp
// ---------------------------------------------------------------------------

Json MergeStamp::to_json() const {
  return Json{{"o", observed_at}, {"s", sequence_no}, {"a", adapter}, {"f", fingerprint}};
}

MergeStamp MergeStamp::from_json(const Json& j) {
  MergeStamp m;
  m.observed_at = j.value("o", TimestampNs{0});
  m.sequence_no = j.value("s", std::uint64_t{0});
  m.adapter = j.value("a", std::string{});
  m.fingerprint = j.value("f", std::string{});
  return m;
}

// ---------------------------------------------------------------------------
// TaskRecord serialization
// ---------------------------------------------------------------------------

namespace {

Json stamp_map_to_json(const std::map<std::string, MergeStamp>& m) {
  Json j = Json::object();
  for (auto& [k, v] : m) j[k] = v.to_json();
  return j;
}

std::map<std::string, MergeStamp> stamp_map_from_json(const Json& j) {
  std::map<std::string, MergeStamp> m;
  if (!j.is_object()) return m;
  for (auto& [k, v] : j.items()) m[k] = MergeStamp::from_json(v);
  return m;
}

std::string truncate_tail(std::string_view text) {
  if (text.size() <= kMaxTailBytes) return std::string(text);
  std::string_view tail = text.substr(text.size() - kMaxTailBytes);
  // Do not start mid UTF-8 sequence.
  while (!tail.empty() && (static_cast<unsigned char>(tail.front()) & 0xC0) == 0x80) {
    tail.remove_prefix(1);
  }
  return std::string(tail);
}

}  // namespace

Json TaskRecord::to_json() const {
  Json j{{"task_id", task_id},
         {"workflow_id", workflow_id},
         {"campaign_id", campaign_id},
         {"activity_id", activity_id},
         {"status", std::string(to_string(status))},
         {"used", used},
         {"generated", generated},
         {"environment", environment},
         {"user", user},
         {"adapter_kind", adapter_kind}};
  j["started_at"] = started_at ? Json(format_rfc3339_ns(*started_at)) : Json(nullptr);
  j["ended_at"] = ended_at ? Json(format_rfc3339_ns(*ended_at)) : Json(nullptr);
  j["stdout_tail"] = stdout_tail ? Json(*stdout_tail) : Json(nullptr);
  j["stderr_tail"] = stderr_tail ? Json(*stderr_tail) : Json(nullptr);
  j["telemetry_at_start"] = telemetry_at_start ? telemetry_at_start->to_json() : Json(nullptr);
  j["telemetry_at_end"] = telemetry_at_end ? telemetry_at_end->to_json() : Json(nullptr);

  Json ms = Json::object();
  ms["used_keys"] = stamp_map_to_json(merge_state.used_keys);
  ms["generated_keys"] = stamp_map_to_json(merge_state.generated_keys);
  ms["environment_keys"] = stamp_map_to_json(merge_state.environment_keys);
  ms["scalars"] = stamp_map_to_json(merge_state.scalars);
  if (merge_state.terminal) ms["terminal"] = merge_state.terminal->to_json();
  if (merge_state.min_running_observed) ms["min_running_observed"] = *merge_state.min_running_observed;
  if (merge_state.min_observed) ms["min_observed"] = *merge_state.min_observed;
  if (merge_state.telemetry_start) ms["telemetry_start"] = merge_state.telemetry_start->to_json();
  if (merge_state.telemetry_end) ms["telemetry_end"] = merge_state.telemetry_end->to_json();
  j["merge"] = std::move(ms);
  return j;
}

TaskRecord TaskRecord::from_json(const Json& j) {
  TaskRecord r;
  r.task_id = j.value("task_id", std::string{});
  r.workflow_id = j.value("workflow_id", std::string{});
  r.campaign_id = j.value("campaign_id", std::string{});
  r.activity_id = j.value("activity_id", std::string{});
  if (auto s = status_from_string(j.value("status", std::string{}))) r.status = *s;
  if (auto it = j.find("used"); it != j.end() && it->is_object()) r.used = *it;
  if (auto it = j.find("generated"); it != j.end() && it->is_object()) r.generated = *it;
  if (auto it = j.find("environment"); it != j.end() && it->is_object()) r.environment = *it;
  r.user = j.value("user", std::string{});
  r.adapter_kind = j.value("adapter_kind", std::string{});
  auto get_ts = [&](const char* key) -> std::optional<TimestampNs> {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) return std::nullopt;
    return parse_rfc3339_ns(it->get_ref<const std::string&>());
  };
  r.started_at = get_ts("started_at");
  r.ended_at = get_ts("ended_at");
  if (auto it = j.find("stdout_tail"); it != j.end() && it->is_string())
    r.stdout_tail = it->get<std::string>();
  if (auto it = j.find("stderr_tail"); it != j.end() && it->is_string())
    r.stderr_tail = it->get<std::string>();
  if (auto it = j.find("telemetry_at_start"); it != j.end())
    r.telemetry_at_start = Telemetry::from_json(*it);
  if (auto it = j.find("telemetry_at_end"); it != j.end())
    r.telemetry_at_end = Telemetry::from_json(*it);

  if (auto it = j.find("merge"); it != j.end() && it->is_object()) {
    const Json& ms = *it;
    r.merge_state.used_keys = stamp_map_from_json(ms.value("used_keys", Json::object()));
    r.merge_state.generated_keys = stamp_map_from_json(ms.value("generated_keys", Json::object()));
    r.merge_state.environment_keys =
        stamp_map_from_json(ms.value("environment_keys", Json::object()));
    r.merge_state.scalars = stamp_map_from_json(ms.value("scalars", Json::object()));
    if (auto t = ms.find("terminal"); t != ms.end()) {
      r.merge_state.terminal = MergeStamp::from_json(*t);
    }
    if (auto t = ms.find("min_running_observed"); t != ms.end() && t->is_number()) {
      r.merge_state.min_running_observed = t->get<TimestampNs>();
    }
    if (auto t = ms.find("min_observed"); t != ms.end() && t->is_number()) {
      r.merge_state.min_observed = t->get<TimestampNs>();
    }
    if (auto t = ms.find("telemetry_start"); t != ms.end()) {
      r.merge_state.telemetry_start = MergeStamp::from_json(*t);
    }
    if (auto t = ms.find("telemetry_end"); t != ms.end()) {
      r.merge_state.telemetry_end = MergeStamp::from_json(*t);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// merge_event
// ---------------------------------------------------------------------------

namespace {

MergeStamp stamp_for(const TaskStateEvent& ev, const Json& value) {
  return MergeStamp{ev.observed_at, ev.sequence_no, ev.adapter_kind, entity_digest(value)};
}

// Applies last-observed-wins to one map entry: the greater stamp keeps the key.
void merge_map_key(Json& target, std::map<std::string, MergeStamp>& stamps,
                   const std::string& key, const Json& value, const MergeStamp& stamp) {
  auto it = stamps.find(key);
  if (it == stamps.end() || stamp > it->second) {
    target[key] = value;
    stamps[key] = stamp;
  }
}

void merge_scalar(std::string& field, const std::string& name,
                  std::map<std::string, MergeStamp>& stamps, const std::string& value,
                  const MergeStamp& stamp) {
  if (value.empty()) return;
  auto it = stamps.find(name);
  if (it == stamps.end() || stamp > it->second) {
    field = value;
    stamps[name] = stamp;
  }
}

void merge_optional_scalar(std::optional<std::string>& field, const std::string& name,
                           std::map<std::string, MergeStamp>& stamps, const std::string& value,
                           const MergeStamp& stamp) {
  auto it = stamps.find(name);
  if (it == stamps.end() || stamp > it->second) {
    field = truncate_tail(value);
    stamps[name] = stamp;
  }
}

}  // namespace

TaskRecord merge_event(const std::optional<TaskRecord>& record, const TaskStateEvent& ev) {
  if (record && record->task_id != ev.task_id) {
    throw TaskIdMismatch(record->task_id, ev.task_id);
  }
  TaskRecord r = record ? *record : TaskRecord{};
  r.task_id = ev.task_id;
  auto& ms = r.merge_state;

  const MergeStamp base = stamp_for(ev, Json(std::string(to_string(ev.new_status))));

  // Status: rank rule; among terminal events the smallest stamp wins and later
  // terminal events only fill absent fields.
  if (is_terminal(ev.new_status)) {
    if (!ms.terminal || base < *ms.terminal) {
      ms.terminal = base;
      r.status = ev.new_status;
      r.ended_at = ev.observed_at;
    }
  } else if (!ms.terminal && status_rank(ev.new_status) > status_rank(r.status)) {
    r.status = ev.new_status;
  } else if (!record) {
    r.status = ev.new_status;
  }

  // Timestamps: started_at = earliest RUNNING observation, falling back to the
  // earliest observation of any kind.
  if (!ms.min_observed || ev.observed_at < *ms.min_observed) {
    ms.min_observed = ev.observed_at;
  }
  if (ev.new_status == TaskStatus::Running &&
      (!ms.min_running_observed || ev.observed_at < *ms.min_running_observed)) {
    ms.min_running_observed = ev.observed_at;
  }
  r.started_at = ms.min_running_observed ? ms.min_running_observed : ms.min_observed;
  if (ms.terminal) r.ended_at = ms.terminal->observed_at;

  // Identity and context fields. Stamps carry the value's own fingerprint so
  // that even exact (observed_at, sequence_no, adapter) collisions resolve
  // identically under any arrival order.
  merge_scalar(r.workflow_id, "workflow_id", ms.scalars, ev.workflow_id,
               stamp_for(ev, Json(ev.workflow_id)));
  merge_scalar(r.campaign_id, "campaign_id", ms.scalars, ev.campaign_id,
               stamp_for(ev, Json(ev.campaign_id)));
  merge_scalar(r.activity_id, "activity_id", ms.scalars, ev.activity_id,
               stamp_for(ev, Json(ev.activity_id)));
  merge_scalar(r.adapter_kind, "adapter_kind", ms.scalars, ev.adapter_kind,
               stamp_for(ev, Json(ev.adapter_kind)));

  // Payload maps merge key-wise, last observed wins per key.
  if (auto it = ev.payload.find("used"); it != ev.payload.end() && it->is_object()) {
    for (auto& [k, v] : it->items()) {
      if (!k.empty()) merge_map_key(r.used, ms.used_keys, k, v, stamp_for(ev, v));
    }
  }
  if (auto it = ev.payload.find("generated"); it != ev.payload.end() && it->is_object()) {
    for (auto& [k, v] : it->items()) {
      if (!k.empty()) merge_map_key(r.generated, ms.generated_keys, k, v, stamp_for(ev, v));
    }
  }
  if (auto it = ev.payload.find("environment"); it != ev.payload.end() && it->is_object()) {
    for (auto& [k, v] : it->items()) {
      if (!k.empty()) merge_map_key(r.environment, ms.environment_keys, k, v, stamp_for(ev, v));
    }
  }
  if (auto it = ev.payload.find("user"); it != ev.payload.end() && it->is_string()) {
    merge_scalar(r.user, "user", ms.scalars, it->get<std::string>(), stamp_for(ev, *it));
  }
  if (auto it = ev.payload.find("stdout_tail"); it != ev.payload.end() && it->is_string()) {
    merge_optional_scalar(r.stdout_tail, "stdout_tail", ms.scalars, it->get<std::string>(),
                          stamp_for(ev, *it));
  }
  if (auto it = ev.payload.find("stderr_tail"); it != ev.payload.end() && it->is_string()) {
    merge_optional_scalar(r.stderr_tail, "stderr_tail", ms.scalars, it->get<std::string>(),
                          stamp_for(ev, *it));
  }
  // Error text from ERROR transitions lands in stderr_tail.
  if (auto it = ev.payload.find("error"); it != ev.payload.end() && it->is_string()) {
    merge_optional_scalar(r.stderr_tail, "stderr_tail", ms.scalars, it->get<std::string>(),
                          stamp_for(ev, *it));
  }

  // Telemetry: start = earliest carrier overall; end = earliest terminal carrier.
  if (ev.telemetry) {
    MergeStamp ts = stamp_for(ev, ev.telemetry->to_json());
    if (!ms.telemetry_start || ts < *ms.telemetry_start) {
      ms.telemetry_start = ts;
      r.telemetry_at_start = ev.telemetry;
    }
    if (is_terminal(ev.new_status) && (!ms.telemetry_end || ts < *ms.telemetry_end)) {
      ms.telemetry_end = ts;
      r.telemetry_at_end = ev.telemetry;
    }
  }

  return r;
}

// ---------------------------------------------------------------------------
// ProvenanceLink
// ---------------------------------------------------------------------------

Json ProvenanceLink::to_json() const {
  return Json{{"producer_task_id", producer_task_id},
              {"consumer_task_id", consumer_task_id},
              {"entity_key", entity_key},
              {"entity_value_digest", entity_value_digest}};
}

std::optional<ProvenanceLink> ProvenanceLink::from_json(const Json& j) {
  if (!j.is_object()) return std::nullopt;
  ProvenanceLink l;
  l.producer_task_id = j.value("producer_task_id", std::string{});
  l.consumer_task_id = j.value("consumer_task_id", std::string{});
  l.entity_key = j.value("entity_key", std::string{});
  l.entity_value_digest = j.value("entity_value_digest", std::string{});
  if (l.producer_task_id.empty() || l.consumer_task_id.empty()) return std::nullopt;
  return l;
}

}  // namespace provmesh
