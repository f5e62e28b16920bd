#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include "provmesh/broker.hpp"
#include "provmesh/model.hpp"
#include "provmesh/telemetry.hpp"

namespace provmesh {

// Environment variable that overrides the broker address ("host:port").
constexpr const char* kBrokerEnvVar = "PROVMESH_BROKER";

enum class AdapterKind { SchedulerPlugin, LogFile, RecordStore };

std::string_view to_string(AdapterKind k);
std::optional<AdapterKind> adapter_kind_from_string(std::string_view s);

struct BufferPolicy {
  std::size_t min_capacity = 16;
  std::size_t max_capacity = 1024;
  std::chrono::milliseconds flush_interval{250};
  bool dynamic = true;

  static BufferPolicy fixed(std::size_t capacity, std::chrono::milliseconds interval) {
    return BufferPolicy{capacity, capacity, interval, false};
  }
};

struct ObserverConfig {
  AdapterKind adapter_kind = AdapterKind::SchedulerPlugin;
  std::string locator;  // file path (LOG_FILE) or directory (RECORD_STORE)
  std::chrono::milliseconds poll_interval{500};
  // Glob patterns over qualified payload keys ("used.x", "generated.loss").
  // Empty filter means everything is relevant.
  std::vector<std::string> relevance_filter;
  bool telemetry_enabled = false;
  BufferPolicy buffer;
  // Campaign context stamped onto events whose provider does not carry it.
  std::string campaign_id = "campaign";
  std::string workflow_id;  // default workflow for providers without one
  std::string default_activity_id;
  std::string channel = "task_events";
};

struct BadConfig : std::runtime_error {
  std::string field;
  BadConfig(std::string field_name, const std::string& why)
      : std::runtime_error("bad config field '" + field_name + "': " + why),
        field(std::move(field_name)) {}
};
struct UnknownAdapterKind : std::runtime_error {
  explicit UnknownAdapterKind(const std::string& s)
      : std::runtime_error("unknown adapter kind '" + s + "'") {}
};
struct BrokerUnreachable : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Glob over qualified payload keys; '*' and '?' wildcards.
bool glob_match(std::string_view pattern, std::string_view text);
bool is_relevant(const TaskStateEvent& ev, const std::vector<std::string>& patterns);

// ---------------------------------------------------------------------------
// EventEmitter: buffered asynchronous emission.
//
// emit() appends to an in-memory buffer and never blocks on the network; a
// dedicated flusher thread publishes the buffer in bulk when it reaches the
// current capacity or when flush_interval elapses. With dynamic sizing on,
// capacity tracks the observed event rate over a ~2 s exponentially weighted
// window: capacity = clamp(round(rate x flush_interval), min, max).
// ---------------------------------------------------------------------------

class EventEmitter {
 public:
  EventEmitter(BufferPolicy policy, std::string channel);
  ~EventEmitter();

  void start(std::unique_ptr<BrokerClient> client);
  void stop();  // flushes remaining events, joins the flusher; idempotent

  // Stamps observed_at (when unset) and sequence_no, then buffers. If the
  // buffer has grown to 4x max_capacity (broker stalled), degrades to a
  // synchronous flush instead of dropping.
  void emit(TaskStateEvent ev);

  struct Metrics {
    std::uint64_t emitted = 0;
    std::uint64_t bulk_publishes = 0;
    std::uint64_t timer_flushes = 0;
    std::uint64_t dropped_events = 0;
    std::uint64_t retries = 0;
    std::size_t capacity = 0;
  };
  Metrics metrics() const;
  std::size_t current_capacity() const { return capacity_.load(); }
  bool running() const { return running_.load(); }

  // The capacity rule, exposed for direct verification.
  static std::size_t compute_capacity(double rate_per_sec, const BufferPolicy& policy);

 private:
  void flusher_loop();
  void flush_locked(std::unique_lock<std::mutex>& lk, bool timer);
  void publish_with_retry(std::vector<std::string> batch);
  void observe_rate(std::size_t n);

  BufferPolicy policy_;
  std::string channel_;
  std::unique_ptr<BrokerClient> client_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::string> buffer_;
  std::atomic<bool> running_{false};
  bool stop_requested_ = false;
  std::thread flusher_;

  std::atomic<std::size_t> capacity_;
  std::atomic<std::uint64_t> seq_{0};
  // EWMA rate estimation (2 s window).
  double rate_per_sec_ = 0.0;
  TimestampNs rate_window_start_ = 0;
  std::size_t rate_window_count_ = 0;

  std::atomic<std::uint64_t> emitted_{0};
  std::atomic<std::uint64_t> bulk_publishes_{0};
  std::atomic<std::uint64_t> timer_flushes_{0};
  std::atomic<std::uint64_t> dropped_{0};
  std::atomic<std::uint64_t> retries_{0};
};

// ---------------------------------------------------------------------------
// Observer base + Controller
// ---------------------------------------------------------------------------

class Observer {
 public:
  explicit Observer(ObserverConfig config);
  virtual ~Observer();

  const ObserverConfig& config() const { return config_; }
  EventEmitter& emitter() { return *emitter_; }

  void start(std::unique_ptr<BrokerClient> client);
  void stop();
  bool started() const { return started_.load(); }

  // One polling pass; a no-op for push-style adapters. Public so tests and
  // tools can drive polls deterministically.
  virtual void observe() {}

 protected:
  virtual void on_start() {}
  virtual void on_stop() {}
  bool uses_poll_loop() const;
  void emit_event(TaskStateEvent ev);  // applies relevance filter, then emits

  ObserverConfig config_;
  std::unique_ptr<EventEmitter> emitter_;
  TelemetrySampler sampler_;

 private:
  void poll_loop();
  std::atomic<bool> started_{false};
  std::atomic<bool> stop_requested_{false};
  std::thread poll_thread_;
  std::mutex poll_mu_;
  std::condition_variable poll_cv_;
};

// Broker endpoint: an in-process hub or a TCP address. PROVMESH_BROKER, when
// set, overrides the TCP address (and switches an in-process endpoint to TCP).
struct BrokerEndpoint {
  std::shared_ptr<InProcBroker> inproc;
  std::string tcp_address;

  static BrokerEndpoint in_process(std::shared_ptr<InProcBroker> hub);
  static BrokerEndpoint tcp(std::string address);
  std::unique_ptr<BrokerClient> connect() const;  // throws BrokerUnreachable
};

class Controller {
 public:
  explicit Controller(BrokerEndpoint endpoint);
  ~Controller();

  // Validates the config and constructs the observer; it is not observing
  // until start_all(). Throws BadConfig.
  std::shared_ptr<Observer> register_observer(const ObserverConfig& config);

  // Launches every registered observer. Atomic: if the broker is unreachable
  // no observer is left half-started. Throws BrokerUnreachable.
  void start_all();

  // Flushes all buffers, terminates polling loops, closes connections.
  // Idempotent.
  void stop_all();

  const std::vector<std::shared_ptr<Observer>>& observers() const { return observers_; }

  // Parses the controller configuration file: one "[observer <name>]" section
  // per observer with ObserverConfig keys.
  static std::vector<ObserverConfig> parse_config_file(const std::filesystem::path& path);

 private:
  BrokerEndpoint endpoint_;
  std::vector<std::shared_ptr<Observer>> observers_;
  bool started_ = false;
};

}  // namespace provmesh
