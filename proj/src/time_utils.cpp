#include "provmesh/time_utils.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>

namespace provmesh {

namespace {

constexpr std::int64_t kNsPerSec = 1'000'000'000;

bool parse_fixed_int(std::string_view s, std::size_t pos, std::size_t len, int& out) {
  if (pos + len > s.size()) return false;
  int v = 0;
  for (std::size_t i = pos; i < pos + len; ++i) {
    char c = s[i];
    if (c < '0' || c > '9') return false;
    v = v * 10 + (c - '0');
  }
  out = v;
  return true;
}

}  // namespace

TimestampNs now_utc_ns() {
  using namespace std::chrono;
  return duration_cast<nanoseconds>(system_clock::now().time_since_epoch()).count();
}

std::string format_rfc3339_ns(TimestampNs ns) {
  std::int64_t secs = ns / kNsPerSec;
  std::int64_t frac = ns % kNsPerSec;
  if (frac < 0) {
    frac += kNsPerSec;
    secs -= 1;
  }
  std::time_t t = static_cast<std::time_t>(secs);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%09lldZ",
                tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday, tm.tm_hour,
                tm.tm_min, tm.tm_sec, static_cast<long long>(frac));
  return buf;
}

std::optional<TimestampNs> parse_rfc3339_ns(std::string_view s) {
  // YYYY-MM-DDTHH:MM:SS[.fffffffff](Z|+HH:MM|-HH:MM)
  int year, mon, day, hour, min, sec;
  if (!parse_fixed_int(s, 0, 4, year)) return std::nullopt;
  if (s.size() < 19 || s[4] != '-' || s[7] != '-' ||
      (s[10] != 'T' && s[10] != 't' && s[10] != ' ') || s[13] != ':' ||
      s[16] != ':') {
    return std::nullopt;
  }
  if (!parse_fixed_int(s, 5, 2, mon) || !parse_fixed_int(s, 8, 2, day) ||
      !parse_fixed_int(s, 11, 2, hour) || !parse_fixed_int(s, 14, 2, min) ||
      !parse_fixed_int(s, 17, 2, sec)) {
    return std::nullopt;
  }
  if (mon < 1 || mon > 12 || day < 1 || day > 31 || hour > 23 || min > 59 || sec > 60) {
    return std::nullopt;
  }

  std::size_t pos = 19;
  std::int64_t frac = 0;
  if (pos < s.size() && s[pos] == '.') {
    ++pos;
    std::size_t digits = 0;
    std::int64_t scale = kNsPerSec / 10;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
      if (digits < 9) {
        frac += (s[pos] - '0') * scale;
        scale /= 10;
      }
      ++digits;
      ++pos;
    }
    if (digits == 0) return std::nullopt;
  }

  if (pos >= s.size()) return std::nullopt;
  std::int64_t offset_sec = 0;
  char c = s[pos];
  if (c == 'Z' || c == 'z') {
    ++pos;
  } else if (c == '+' || c == '-') {
    int oh, om;
    if (pos + 6 > s.size() || s[pos + 3] != ':' ||
        !parse_fixed_int(s, pos + 1, 2, oh) || !parse_fixed_int(s, pos + 4, 2, om)) {
      return std::nullopt;
    }
    offset_sec = oh * 3600 + om * 60;
    if (c == '-') offset_sec = -offset_sec;
    pos += 6;
  } else {
    return std::nullopt;
  }
  if (pos != s.size()) return std::nullopt;

  std::tm tm{};
  tm.tm_year = year - 1900;
  tm.tm_mon = mon - 1;
  tm.tm_mday = day;
  tm.tm_hour = hour;
  tm.tm_min = min;
  tm.tm_sec = sec;
  std::time_t epoch = timegm(&tm);
  if (epoch == static_cast<std::time_t>(-1) && year != 1969) return std::nullopt;
  return (static_cast<std::int64_t>(epoch) - offset_sec) * kNsPerSec + frac;
}

}  // namespace provmesh
