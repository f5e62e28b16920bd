#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace provmesh {

// UTC timestamps carried as nanoseconds since the Unix epoch.
using TimestampNs = std::int64_t;

TimestampNs now_utc_ns();

// Fixed-width RFC 3339 with nanosecond fraction, e.g.
// "2026-08-09T12:34:56.000000001Z". Lexicographic order of two formatted
// strings matches chronological order.
std::string format_rfc3339_ns(TimestampNs ns);

// Accepts 'Z' or a numeric UTC offset, and 0..9 fractional digits.
std::optional<TimestampNs> parse_rfc3339_ns(std::string_view text);

}  // namespace provmesh
