#include "provmesh/adapters.hpp"

#include <sys/stat.h>

#include <fstream>

namespace provmesh {

// ---------------------------------------------------------------------------
// SchedulerObserver
// ---------------------------------------------------------------------------

SchedulerObserver::SchedulerObserver(ObserverConfig config) : Observer(std::move(config)) {}

SchedulerPlugin SchedulerObserver::plugin() {
  return SchedulerPlugin{[this](const TaskTransition& t) {
    try {
      handle(t);
    } catch (...) {
      callback_errors_.fetch_add(1, std::memory_order_relaxed);
    }
  }};
}

void SchedulerObserver::handle(const TaskTransition& t) {
  TaskStateEvent ev;
  ev.task_id = t.task_id;
  ev.workflow_id = t.workflow_id;
  ev.campaign_id = t.campaign_id;
  ev.activity_id = t.activity_id;
  ev.new_status = t.new_status;
  ev.observed_at = t.at;
  switch (t.new_status) {
    case TaskStatus::Submitted:
      if (t.args.is_object() && !t.args.empty()) ev.payload["used"] = t.args;
      break;
    case TaskStatus::Finished:
      // Object results map field-wise into generated; everything else lands
      // under "out".
      if (t.result.is_object()) {
        ev.payload["generated"] = t.result;
      } else if (!t.result.is_null()) {
        ev.payload["generated"] = Json{{"out", t.result}};
      }
      break;
    case TaskStatus::Error:
      ev.payload["error"] = t.error;
      break;
    case TaskStatus::Running:
      break;
  }
  if (config_.telemetry_enabled &&
      (t.new_status == TaskStatus::Running || is_terminal(t.new_status))) {
    ev.telemetry = sampler_.capture();
  }
  emit_event(std::move(ev));
}

// ---------------------------------------------------------------------------
// Log line grammar
// ---------------------------------------------------------------------------

namespace {

bool take_token(std::string_view& rest, std::string_view& token) {
  std::size_t sp = rest.find(' ');
  if (sp == std::string_view::npos || sp == 0) return false;
  token = rest.substr(0, sp);
  rest.remove_prefix(sp + 1);
  return true;
}

bool strip_prefix(std::string_view& token, std::string_view prefix) {
  if (token.substr(0, prefix.size()) != prefix) return false;
  token.remove_prefix(prefix.size());
  return !token.empty();
}

}  // namespace

std::optional<LogLineRecord> parse_log_line(std::string_view line) {
  LogLineRecord rec;
  std::string_view rest = line;
  std::string_view token;

  if (!take_token(rest, token)) return std::nullopt;
  auto ts = parse_rfc3339_ns(token);
  if (!ts) return std::nullopt;
  rec.timestamp = *ts;

  if (!take_token(rest, token)) return std::nullopt;
  for (char c : token) {
    if (c < 'A' || c > 'Z') return std::nullopt;
  }
  rec.level = std::string(token);

  if (!take_token(rest, token) || !strip_prefix(token, "task=")) return std::nullopt;
  rec.task_id = std::string(token);

  if (!take_token(rest, token) || !strip_prefix(token, "wf=")) return std::nullopt;
  rec.workflow_id = std::string(token);

  if (!take_token(rest, token) || !strip_prefix(token, "kind=")) return std::nullopt;
  auto kind = status_from_string(token);
  if (!kind) return std::nullopt;
  rec.kind = *kind;

  Json payload = Json::parse(rest, nullptr, false);
  if (payload.is_discarded() || !payload.is_object()) return std::nullopt;
  rec.payload = std::move(payload);
  return rec;
}

std::string format_log_line(const LogLineRecord& rec) {
  std::string out = format_rfc3339_ns(rec.timestamp);
  out += ' ';
  out += rec.level.empty() ? "INFO" : rec.level;
  out += " task=";
  out += rec.task_id;
  out += " wf=";
  out += rec.workflow_id;
  out += " kind=";
  out += to_string(rec.kind);
  out += ' ';
  out += rec.payload.dump();
  return out;
}

// ---------------------------------------------------------------------------
// LogFileObserver
// ---------------------------------------------------------------------------

LogFileObserver::LogFileObserver(ObserverConfig config) : Observer(std::move(config)) {}

TaskStateEvent LogFileObserver::to_event(const LogLineRecord& rec) const {
  TaskStateEvent ev;
  ev.task_id = rec.task_id;
  ev.workflow_id = rec.workflow_id;
  ev.new_status = rec.kind;
  ev.observed_at = rec.timestamp;  // provider timestamps take precedence

  static const char* kSections[] = {"used",        "generated", "error", "environment",
                                    "stdout_tail", "stderr_tail", "user", "activity"};
  bool structured = false;
  for (const char* s : kSections) {
    if (rec.payload.contains(s)) {
      structured = true;
      break;
    }
  }
  if (structured) {
    ev.payload = rec.payload;
    if (auto it = ev.payload.find("activity"); it != ev.payload.end() && it->is_string()) {
      ev.activity_id = it->get<std::string>();
      ev.payload.erase(it);
    }
  } else if (!rec.payload.empty()) {
    switch (rec.kind) {
      case TaskStatus::Finished:
        ev.payload["generated"] = rec.payload;
        break;
      case TaskStatus::Error:
        ev.payload["error"] = rec.payload.dump();
        break;
      default:
        ev.payload["used"] = rec.payload;
        break;
    }
  }
  return ev;
}

void LogFileObserver::observe() {
  struct stat st{};
  if (::stat(config_.locator.c_str(), &st) != 0) return;

  if (inode_ != 0 &&
      (static_cast<std::uint64_t>(st.st_ino) != inode_ ||
       static_cast<std::uint64_t>(st.st_size) < watermark_)) {
    // File rotated (or truncated+rewritten): start over. Downstream dedup
    // absorbs any re-read of surviving lines.
    watermark_ = 0;
    std::lock_guard lk(stats_mu_);
    stats_.rotations += 1;
  }
  inode_ = static_cast<std::uint64_t>(st.st_ino);
  if (static_cast<std::uint64_t>(st.st_size) <= watermark_) return;

  std::ifstream f(config_.locator, std::ios::binary);
  if (!f) return;
  f.seekg(static_cast<std::streamoff>(watermark_));
  std::string chunk(static_cast<std::size_t>(st.st_size - watermark_), '\0');
  f.read(chunk.data(), static_cast<std::streamsize>(chunk.size()));
  chunk.resize(static_cast<std::size_t>(f.gcount()));

  std::size_t consumed = 0;
  std::size_t pos = 0;
  while (pos < chunk.size()) {
    std::size_t nl = chunk.find('\n', pos);
    if (nl == std::string::npos) break;  // trailing fragment: leave it alone
    std::string_view line(chunk.data() + pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) {
      if (auto rec = parse_log_line(line)) {
        emit_event(to_event(*rec));
        std::lock_guard lk(stats_mu_);
        stats_.lines_parsed += 1;
      } else {
        std::lock_guard lk(stats_mu_);
        stats_.malformed_lines += 1;
      }
    }
    pos = nl + 1;
    consumed = pos;
  }
  watermark_ += consumed;
}

LogFileObserver::Stats LogFileObserver::stats() const {
  std::lock_guard lk(stats_mu_);
  return stats_;
}

// ---------------------------------------------------------------------------
// RecordStoreObserver
// ---------------------------------------------------------------------------

std::optional<RunRecord> parse_run_record(const Json& j) {
  if (!j.is_object()) return std::nullopt;
  RunRecord r;
  if (auto it = j.find("run_id"); it != j.end() && it->is_string()) {
    r.run_id = it->get<std::string>();
  }
  if (r.run_id.empty()) return std::nullopt;
  if (auto it = j.find("params"); it != j.end() && it->is_object()) r.params = *it;
  if (auto it = j.find("metrics"); it != j.end() && it->is_object()) r.metrics = *it;
  if (auto it = j.find("status"); it != j.end() && it->is_string()) {
    auto s = status_from_string(it->get_ref<const std::string&>());
    if (!s) return std::nullopt;
    r.status = *s;
  }
  auto get_ts = [&](const char* key) -> std::optional<TimestampNs> {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) return std::nullopt;
    return parse_rfc3339_ns(it->get_ref<const std::string&>());
  };
  r.start_time = get_ts("start_time");
  r.end_time = get_ts("end_time");
  return r;
}

RecordStoreObserver::RecordStoreObserver(ObserverConfig config) : Observer(std::move(config)) {}

void RecordStoreObserver::observe() {
  namespace fs = std::filesystem;
  constexpr TimestampNs kSlackNs = 100'000'000;  // re-scan 100 ms back

  TimestampNs cutoff = watermark_ns_ > kSlackNs ? watermark_ns_ - kSlackNs : 0;
  TimestampNs max_seen = watermark_ns_;

  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(config_.locator, ec)) {
    if (ec) break;
    if (!entry.is_regular_file(ec) || entry.path().extension() != ".json") continue;

    struct stat st{};
    if (::stat(entry.path().c_str(), &st) != 0) continue;
    TimestampNs mtime_ns =
        static_cast<TimestampNs>(st.st_mtim.tv_sec) * 1'000'000'000 + st.st_mtim.tv_nsec;
    if (mtime_ns < cutoff) continue;
    if (mtime_ns > max_seen) max_seen = mtime_ns;

    std::ifstream f(entry.path());
    Json doc = Json::parse(f, nullptr, false);
    auto rec = doc.is_discarded() ? std::nullopt : parse_run_record(doc);
    if (!rec) {
      std::lock_guard lk(stats_mu_);
      stats_.unreadable_records += 1;
      continue;
    }

    auto snap = snapshot_.find(rec->run_id);
    Json used_delta = Json::object();
    Json generated_delta = Json::object();
    bool is_new = snap == snapshot_.end();
    if (is_new) {
      used_delta = rec->params;
      generated_delta = rec->metrics;
    } else {
      for (auto& [k, v] : rec->params.items()) {
        if (!snap->second.params.contains(k) || snap->second.params[k] != v) used_delta[k] = v;
      }
      for (auto& [k, v] : rec->metrics.items()) {
        if (!snap->second.metrics.contains(k) || snap->second.metrics[k] != v) {
          generated_delta[k] = v;
        }
      }
      bool status_changed = snap->second.status != rec->status;
      if (used_delta.empty() && generated_delta.empty() && !status_changed) {
        continue;  // slack re-scan of an unchanged run
      }
    }

    TaskStateEvent ev;
    ev.task_id = rec->run_id;
    ev.new_status = rec->status;
    if (is_terminal(rec->status) && rec->end_time) {
      ev.observed_at = *rec->end_time;
    } else if (rec->start_time) {
      ev.observed_at = *rec->start_time;
    }
    if (!used_delta.empty()) ev.payload["used"] = used_delta;
    if (!generated_delta.empty()) ev.payload["generated"] = generated_delta;
    if (config_.telemetry_enabled) ev.telemetry = sampler_.capture();
    emit_event(std::move(ev));

    snapshot_[rec->run_id] = Snapshot{rec->params, rec->metrics, rec->status};
    std::lock_guard lk(stats_mu_);
    if (is_new) stats_.runs_seen += 1;
    stats_.events_emitted += 1;
  }
  watermark_ns_ = max_seen;
}

RecordStoreObserver::Stats RecordStoreObserver::stats() const {
  std::lock_guard lk(stats_mu_);
  return stats_;
}

}  // namespace provmesh
