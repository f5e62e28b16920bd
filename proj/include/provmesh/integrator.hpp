#pragma once

#include <atomic>
#include <memory>
#include <thread>

#include "provmesh/broker.hpp"
#include "provmesh/store.hpp"

namespace provmesh {

// Consumes the event channel into the store: decode -> validate -> dedup by
// (task_id, new_status, sequence_no) -> buffer; the buffer drains via
// bulk_upsert when full or on a 250 ms tick, and newly terminal records get
// their provenance links resolved.
class DataIntegrator {
 public:
  struct Options {
    std::string channel = "task_events";
    std::size_t batch_capacity = 512;
    std::chrono::milliseconds tick{250};
  };

  DataIntegrator(TaskStore& store, std::unique_ptr<BrokerClient> client);
  DataIntegrator(TaskStore& store, std::unique_ptr<BrokerClient> client, Options options);
  ~DataIntegrator();

  void start();
  // Keeps consuming until the channel runs dry, drains the buffer, then
  // terminates the loop. Safe to call twice.
  void stop();

  struct Metrics {
    std::uint64_t consumed = 0;
    std::uint64_t deduped = 0;
    std::uint64_t decode_failures = 0;
    std::uint64_t upserted = 0;
    std::uint64_t links_created = 0;
  };
  Metrics metrics() const;

  // Synchronous ingestion of already-decoded messages; the consume loop and
  // tests share this path.
  void ingest_messages(const std::vector<std::string>& messages);
  void drain();

 private:
  void consume_loop();

  TaskStore& store_;
  std::unique_ptr<BrokerClient> client_;
  Options options_;

  std::thread loop_;
  std::atomic<bool> running_{false};
  std::atomic<bool> stop_requested_{false};

  std::mutex mu_;
  std::vector<TaskStateEvent> buffer_;
  std::unordered_set<std::string> seen_;
  std::chrono::steady_clock::time_point last_drain_ = std::chrono::steady_clock::now();

  std::atomic<std::uint64_t> consumed_{0};
  std::atomic<std::uint64_t> deduped_{0};
  std::atomic<std::uint64_t> decode_failures_{0};
  std::atomic<std::uint64_t> upserted_{0};
  std::atomic<std::uint64_t> links_created_{0};
};

}  // namespace provmesh
