#pragma once

#include <optional>

#include "provmesh/model.hpp"

namespace provmesh {

// Best-effort process telemetry from /proc. Sampling never fails the emission
// path: on any read error capture() returns nullopt.
class TelemetrySampler {
 public:
  TelemetrySampler();
  std::optional<Telemetry> capture();

 private:
  double last_cpu_seconds_ = -1.0;
  TimestampNs last_wall_ns_ = 0;
  TimestampNs last_captured_at_ = 0;
};

}  // namespace provmesh
