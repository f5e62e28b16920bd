#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "provmesh/model.hpp"

using namespace provmesh;

namespace {

TaskStateEvent make_event(const std::string& task, TaskStatus status, TimestampNs at,
                          std::uint64_t seq, Json payload = Json::object()) {
  TaskStateEvent ev;
  ev.task_id = task;
  ev.workflow_id = "wf1";
  ev.campaign_id = "c1";
  ev.activity_id = "act";
  ev.new_status = status;
  ev.observed_at = at;
  ev.sequence_no = seq;
  ev.payload = std::move(payload);
  ev.adapter_kind = "SCHEDULER_PLUGIN";
  return ev;
}

TaskRecord fold(const std::vector<TaskStateEvent>& events) {
  std::optional<TaskRecord> rec;
  for (const auto& ev : events) rec = merge_event(rec, ev);
  return *rec;
}

}  // namespace

TEST_CASE("rfc3339 round trip at nanosecond resolution") {
  TimestampNs t = 1'754'700'000'123'456'789;
  std::string s = format_rfc3339_ns(t);
  CHECK(s.size() == 30);
  CHECK(s.back() == 'Z');
  auto back = parse_rfc3339_ns(s);
  REQUIRE(back.has_value());
  CHECK(*back == t);

  CHECK(parse_rfc3339_ns("2023-06-01T10:00:00Z").has_value());
  CHECK(parse_rfc3339_ns("2023-06-01T10:00:00.5Z") ==
        parse_rfc3339_ns("2023-06-01T10:00:00.500000000Z"));
  // Offsets normalize to UTC.
  CHECK(parse_rfc3339_ns("2023-06-01T12:00:00+02:00") == parse_rfc3339_ns("2023-06-01T10:00:00Z"));
  CHECK_FALSE(parse_rfc3339_ns("not a timestamp").has_value());
  CHECK_FALSE(parse_rfc3339_ns("2023-13-01T10:00:00Z").has_value());
  CHECK_FALSE(parse_rfc3339_ns("2023-06-01T10:00:00").has_value());
}

TEST_CASE("rfc3339 lexicographic order matches chronological order") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<TimestampNs> dist(0, 4'000'000'000'000'000'000LL);
  for (int i = 0; i < 200; ++i) {
    TimestampNs a = dist(rng), b = dist(rng);
    CHECK((a < b) == (format_rfc3339_ns(a) < format_rfc3339_ns(b)));
  }
}

TEST_CASE("validate_event rejects the documented invariant violations") {
  auto ok = make_event("t1", TaskStatus::Finished, 1000, 0,
                       Json{{"generated", Json{{"loss", 0.2}}}});
  CHECK_FALSE(validate_event(ok).has_value());

  SUBCASE("empty task_id -> MissingField(task_id)") {
    auto ev = ok;
    ev.task_id = "";
    auto err = validate_event(ev);
    REQUIRE(err.has_value());
    CHECK(err->code == ValidationCode::MissingField);
    CHECK(err->field == "task_id");
  }
  SUBCASE("unknown status string -> BadStatus") {
    Json wire = ok.to_json();
    wire["new_status"] = "PAUSED";
    auto parsed = parse_event(wire);
    REQUIRE_FALSE(parsed.ok());
    CHECK(parsed.error->code == ValidationCode::BadStatus);
    CHECK(parsed.error->field == "new_status");
  }
  SUBCASE("unset observed_at -> BadTimestamp") {
    auto ev = ok;
    ev.observed_at = 0;
    auto err = validate_event(ev);
    REQUIRE(err.has_value());
    CHECK(err->code == ValidationCode::BadTimestamp);
  }
  SUBCASE("empty payload key -> MissingField naming the section") {
    auto ev = ok;
    ev.payload = Json{{"used", Json{{"", 1}}}};
    auto err = validate_event(ev);
    REQUIRE(err.has_value());
    CHECK(err->field == "payload.used");
  }
  SUBCASE("negative telemetry counter rejected") {
    auto ev = ok;
    Telemetry t;
    t.rss_bytes = -1;
    t.captured_at = 5;
    ev.telemetry = t;
    CHECK(validate_event(ev).has_value());
  }
}

TEST_CASE("event wire encoding round-trips through decode") {
  auto ev = make_event("t-42", TaskStatus::Running, 123'456'789'000LL, 7,
                       Json{{"used", Json{{"x", 1}, {"nested", Json{{"a", Json::array({1, 2})}}}}}});
  Telemetry t;
  t.cpu_percent = 55.5;
  t.rss_bytes = 1 << 20;
  t.captured_at = 99'000'000'000LL;
  ev.telemetry = t;

  auto decoded = decode_event(ev.encode());
  REQUIRE(decoded.ok());
  CHECK(*decoded.event == ev);

  CHECK_FALSE(decode_event("{not json").ok());
  CHECK_FALSE(decode_event("[1,2,3]").ok());
}

TEST_CASE("entity_digest canonicalizes and distinguishes types") {
  CHECK(entity_digest(Json{{"a", 1}, {"b", 2}}) == entity_digest(Json{{"b", 2}, {"a", 1}}));
  // Pure function of the canonical form: stable across calls and processes.
  CHECK(entity_digest(Json("file:///data/img_001.raw")) ==
        entity_digest(Json("file:///data/img_001.raw")));
  CHECK(entity_digest(Json("file:///data/img_001.raw")).size() == 64);
  CHECK(entity_digest(Json(1)) != entity_digest(Json("1")));
  CHECK(entity_digest(Json(1)) != entity_digest(Json(2)));
  // Nested key order does not matter either.
  Json a = Json::parse(R"({"outer":{"x":1,"y":[1,{"k":2}]}})");
  Json b = Json::parse(R"({"outer":{"y":[1,{"k":2}],"x":1}})");
  CHECK(entity_digest(a) == entity_digest(b));
}

TEST_CASE("is_reference_value recognizes schemes and absolute paths") {
  CHECK(is_reference_value(Json("/data/raw/img.raw")));
  CHECK(is_reference_value(Json("file:///models/m1.pt")));
  CHECK(is_reference_value(Json("s3://bucket/key")));
  CHECK_FALSE(is_reference_value(Json("plain string")));
  CHECK_FALSE(is_reference_value(Json(17)));
  CHECK_FALSE(is_reference_value(Json("relative/path")));
}

TEST_CASE("merge_event: first event creates the record") {
  auto ev = make_event("t1", TaskStatus::Submitted, 1000, 0, Json{{"used", Json{{"x", 1}}}});
  TaskRecord rec = merge_event(std::nullopt, ev);
  CHECK(rec.task_id == "t1");
  CHECK(rec.status == TaskStatus::Submitted);
  CHECK(rec.used == Json{{"x", 1}});
  CHECK(rec.workflow_id == "wf1");
  REQUIRE(rec.started_at.has_value());
  CHECK(*rec.started_at == 1000);  // earliest observation, RUNNING never seen
  CHECK_FALSE(rec.ended_at.has_value());
}

TEST_CASE("merge_event: normal lifecycle completes the record") {
  auto submitted = make_event("t1", TaskStatus::Submitted, 1000, 0, Json{{"used", Json{{"x", 1}}}});
  auto running = make_event("t1", TaskStatus::Running, 2000, 1);
  Telemetry tel;
  tel.cpu_percent = 10;
  tel.captured_at = 3000;
  auto finished =
      make_event("t1", TaskStatus::Finished, 3000, 2, Json{{"generated", Json{{"loss", 0.2}}}});
  finished.telemetry = tel;

  TaskRecord rec = fold({submitted, running, finished});
  CHECK(rec.status == TaskStatus::Finished);
  CHECK(*rec.started_at == 2000);
  CHECK(*rec.ended_at == 3000);
  CHECK(rec.generated == Json{{"loss", 0.2}});
  REQUIRE(rec.telemetry_at_end.has_value());
  CHECK(rec.telemetry_at_end->cpu_percent == 10);
}

TEST_CASE("merge_event: late RUNNING backfills started_at but not status") {
  auto finished =
      make_event("t1", TaskStatus::Finished, 5000, 3, Json{{"generated", Json{{"y", 2}}}});
  auto late_running = make_event("t1", TaskStatus::Running, 2000, 1);

  TaskRecord rec = merge_event(std::nullopt, finished);
  CHECK(*rec.started_at == 5000);
  rec = merge_event(rec, late_running);
  CHECK(rec.status == TaskStatus::Finished);
  CHECK(*rec.started_at == 2000);  // backfilled from the RUNNING observation
  CHECK(*rec.ended_at == 5000);
  CHECK(rec.generated == Json{{"y", 2}});
}

TEST_CASE("merge_event: task id mismatch throws") {
  auto a = merge_event(std::nullopt, make_event("t1", TaskStatus::Submitted, 1, 0));
  CHECK_THROWS_AS(merge_event(a, make_event("t2", TaskStatus::Submitted, 2, 1)), TaskIdMismatch);
}

TEST_CASE("merge_event: status rank enumeration over all 4x4 orderings") {
  // Fold every ordered pair of statuses and check the resulting status against
  // the rank rule with earliest-terminal-wins.
  const TaskStatus all[] = {TaskStatus::Submitted, TaskStatus::Running, TaskStatus::Finished,
                            TaskStatus::Error};
  for (TaskStatus first : all) {
    for (TaskStatus second : all) {
      auto e1 = make_event("t", first, 1000, 0);
      auto e2 = make_event("t", second, 2000, 1);
      TaskRecord rec = fold({e1, e2});

      TaskStatus expected;
      if (is_terminal(first)) {
        expected = first;  // the earlier terminal wins regardless of the later event
      } else if (is_terminal(second)) {
        expected = second;
      } else {
        expected = status_rank(first) >= status_rank(second) ? first : second;
      }
      CAPTURE(static_cast<int>(first));
      CAPTURE(static_cast<int>(second));
      CHECK(rec.status == expected);

      // Arrival order must not matter.
      TaskRecord swapped = fold({e2, e1});
      CHECK(swapped.status == rec.status);
    }
  }
}

TEST_CASE("merge_event: idempotent under re-application") {
  auto e1 = make_event("t", TaskStatus::Submitted, 1000, 0, Json{{"used", Json{{"x", 1}}}});
  auto e2 = make_event("t", TaskStatus::Finished, 2000, 1, Json{{"generated", Json{{"y", 2}}}});
  TaskRecord once = fold({e1, e2});
  TaskRecord twice = fold({e1, e1, e2, e2, e2});
  CHECK(once == twice);
}

TEST_CASE("merge_event: last-observed-wins per key by (observed_at, sequence_no)") {
  auto early = make_event("t", TaskStatus::Running, 1000, 0, Json{{"used", Json{{"x", "old"}}}});
  auto late = make_event("t", TaskStatus::Running, 2000, 1, Json{{"used", Json{{"x", "new"}}}});
  CHECK(fold({early, late}).used["x"] == "new");
  CHECK(fold({late, early}).used["x"] == "new");

  // Same observed_at: sequence_no breaks the tie.
  auto tie_lo = make_event("t", TaskStatus::Running, 1000, 1, Json{{"used", Json{{"x", "lo"}}}});
  auto tie_hi = make_event("t", TaskStatus::Running, 1000, 2, Json{{"used", Json{{"x", "hi"}}}});
  CHECK(fold({tie_lo, tie_hi}).used["x"] == "hi");
  CHECK(fold({tie_hi, tie_lo}).used["x"] == "hi");
}

TEST_CASE("merge_event: error text lands in stderr_tail and is bounded") {
  auto err = make_event("t", TaskStatus::Error, 1000, 0,
                        Json{{"error", std::string(10'000, 'x')}});
  TaskRecord rec = merge_event(std::nullopt, err);
  CHECK(rec.status == TaskStatus::Error);
  REQUIRE(rec.stderr_tail.has_value());
  CHECK(rec.stderr_tail->size() == kMaxTailBytes);
}

TEST_CASE("record document round-trips including merge bookkeeping") {
  auto e1 = make_event("t", TaskStatus::Submitted, 1000, 0, Json{{"used", Json{{"x", 1}}}});
  auto e2 = make_event("t", TaskStatus::Finished, 2000, 1,
                       Json{{"generated", Json{{"model", "file:///m.pt"}}}});
  Telemetry tel;
  tel.cpu_percent = 5;
  tel.captured_at = 2000;
  e2.telemetry = tel;
  TaskRecord rec = fold({e1, e2});

  TaskRecord back = TaskRecord::from_json(rec.to_json());
  CHECK(back == rec);

  // Merging into the deserialized record behaves like merging into the live one.
  auto e3 = make_event("t", TaskStatus::Running, 1500, 2);
  CHECK(merge_event(back, e3) == merge_event(rec, e3));
}

TEST_CASE("merge fold is arrival-order independent (property)") {
  std::mt19937_64 rng(20260809);
  std::uniform_int_distribution<int> status_d(0, 3);
  std::uniform_int_distribution<int> count_d(1, 5);
  std::uniform_int_distribution<TimestampNs> at_d(1, 50);
  std::uniform_int_distribution<int> key_d(0, 2);
  const char* keys[] = {"a", "b", "c"};

  for (int trial = 0; trial < 300; ++trial) {
    int n = count_d(rng);
    std::vector<TaskStateEvent> events;
    for (int i = 0; i < n; ++i) {
      TaskStatus st = static_cast<TaskStatus>(status_d(rng));
      Json payload = Json::object();
      Json section = Json::object();
      section[keys[key_d(rng)]] = trial * 100 + i;
      payload[status_rank(st) == 2 ? "generated" : "used"] = section;
      auto ev = make_event("t", st, at_d(rng), static_cast<std::uint64_t>(i), payload);
      if (status_d(rng) == 0) ev.telemetry = Telemetry{1.0 * i, 10, 0, 0, at_d(rng)};
      events.push_back(std::move(ev));
    }
    std::sort(events.begin(), events.end(), [](const auto& a, const auto& b) {
      return a.sequence_no < b.sequence_no;
    });

    TaskRecord reference = fold(events);
    std::vector<TaskStateEvent> perm = events;
    for (int shuffle = 0; shuffle < 20; ++shuffle) {
      std::shuffle(perm.begin(), perm.end(), rng);
      TaskRecord got = fold(perm);
      REQUIRE(got == reference);
    }
  }
}
