#include "provmesh/telemetry.hpp"

#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

namespace provmesh {

namespace {

// utime + stime in seconds, from /proc/self/stat fields 14 and 15.
std::optional<double> read_cpu_seconds() {
  std::ifstream f("/proc/self/stat");
  if (!f) return std::nullopt;
  std::string line;
  std::getline(f, line);
  // comm (field 2) may contain spaces; skip past the closing paren.
  auto paren = line.rfind(')');
  if (paren == std::string::npos) return std::nullopt;
  std::istringstream rest(line.substr(paren + 1));
  std::string tok;
  // After ')' the next field is state (3); utime is field 14 overall.
  unsigned long utime = 0, stime = 0;
  for (int field = 3; field <= 15 && (rest >> tok); ++field) {
    if (field == 14) utime = std::strtoul(tok.c_str(), nullptr, 10);
    if (field == 15) stime = std::strtoul(tok.c_str(), nullptr, 10);
  }
  long hz = sysconf(_SC_CLK_TCK);
  if (hz <= 0) hz = 100;
  return static_cast<double>(utime + stime) / static_cast<double>(hz);
}

std::optional<std::int64_t> read_rss_bytes() {
  std::ifstream f("/proc/self/statm");
  if (!f) return std::nullopt;
  long long total = 0, resident = 0;
  f >> total >> resident;
  if (!f) return std::nullopt;
  long page = sysconf(_SC_PAGESIZE);
  if (page <= 0) page = 4096;
  return resident * page;
}

void read_io_bytes(std::int64_t& read_bytes, std::int64_t& write_bytes) {
  read_bytes = 0;
  write_bytes = 0;
  std::ifstream f("/proc/self/io");
  if (!f) return;
  std::string key;
  std::int64_t value;
  while (f >> key >> value) {
    if (key == "read_bytes:") read_bytes = value;
    if (key == "write_bytes:") write_bytes = value;
  }
}

}  // namespace

TelemetrySampler::TelemetrySampler() {
  if (auto cpu = read_cpu_seconds()) {
    last_cpu_seconds_ = *cpu;
    last_wall_ns_ = now_utc_ns();
  }
}

std::optional<Telemetry> TelemetrySampler::capture() {
  auto cpu = read_cpu_seconds();
  auto rss = read_rss_bytes();
  if (!cpu || !rss) return std::nullopt;

  Telemetry t;
  TimestampNs now = now_utc_ns();
  if (last_cpu_seconds_ >= 0 && now > last_wall_ns_) {
    double wall_s = static_cast<double>(now - last_wall_ns_) / 1e9;
    double busy_s = *cpu - last_cpu_seconds_;
    if (busy_s < 0) busy_s = 0;
    t.cpu_percent = 100.0 * busy_s / wall_s;
  }
  last_cpu_seconds_ = *cpu;
  last_wall_ns_ = now;

  t.rss_bytes = *rss;
  read_io_bytes(t.io_read_bytes, t.io_write_bytes);

  // captured_at strictly increases per sampler.
  if (now <= last_captured_at_) now = last_captured_at_ + 1;
  last_captured_at_ = now;
  t.captured_at = now;
  return t;
}

}  // namespace provmesh
