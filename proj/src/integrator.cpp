#include "provmesh/integrator.hpp"

namespace provmesh {

DataIntegrator::DataIntegrator(TaskStore& store, std::unique_ptr<BrokerClient> client)
    : DataIntegrator(store, std::move(client), Options{}) {}

DataIntegrator::DataIntegrator(TaskStore& store, std::unique_ptr<BrokerClient> client,
                               Options options)
    : store_(store), client_(std::move(client)), options_(std::move(options)) {}

DataIntegrator::~DataIntegrator() { stop(); }

void DataIntegrator::start() {
  if (running_.exchange(true)) return;
  stop_requested_ = false;
  client_->subscribe(options_.channel);
  loop_ = std::thread([this] { consume_loop(); });
}

void DataIntegrator::ingest_messages(const std::vector<std::string>& messages) {
  std::lock_guard lk(mu_);
  for (const auto& msg : messages) {
    consumed_.fetch_add(1, std::memory_order_relaxed);
    auto parsed = decode_event(msg);
    if (!parsed.ok()) {
      decode_failures_.fetch_add(1, std::memory_order_relaxed);
      continue;
    }
    TaskStateEvent& ev = *parsed.event;
    std::string dedup_key = ev.task_id + "\x1f" + std::string(to_string(ev.new_status)) + "\x1f" +
                            std::to_string(ev.sequence_no);
    if (!seen_.insert(std::move(dedup_key)).second) {
      deduped_.fetch_add(1, std::memory_order_relaxed);
      continue;
    }
    buffer_.push_back(std::move(ev));
  }
}

void DataIntegrator::drain() {
  std::vector<TaskStateEvent> batch;
  {
    std::lock_guard lk(mu_);
    if (buffer_.empty()) {
      last_drain_ = std::chrono::steady_clock::now();
      return;
    }
    batch.swap(buffer_);
    last_drain_ = std::chrono::steady_clock::now();
  }
  auto outcome = store_.bulk_upsert(batch);
  upserted_.fetch_add(outcome.applied, std::memory_order_relaxed);
  for (const auto& id : outcome.link_candidates) {
    auto fresh = store_.link_provenance(id);
    links_created_.fetch_add(fresh.size(), std::memory_order_relaxed);
  }
}

void DataIntegrator::consume_loop() {
  while (true) {
    bool stopping = stop_requested_.load();
    std::vector<std::string> messages;
    try {
      messages = client_->pull(options_.channel,
                               stopping ? std::chrono::milliseconds(50) : options_.tick,
                               options_.batch_capacity);
    } catch (const std::exception&) {
      if (stopping) break;
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
      continue;
    }
    if (!messages.empty()) ingest_messages(messages);

    bool due;
    std::size_t buffered;
    {
      std::lock_guard lk(mu_);
      buffered = buffer_.size();
      due = std::chrono::steady_clock::now() - last_drain_ >= options_.tick;
    }
    if (buffered >= options_.batch_capacity || due || stopping) drain();
    if (stopping && messages.empty()) break;  // channel ran dry after stop
  }
  drain();
}

void DataIntegrator::stop() {
  if (!running_.load()) return;
  stop_requested_ = true;
  if (loop_.joinable()) loop_.join();
  running_ = false;
  client_->close();
}

DataIntegrator::Metrics DataIntegrator::metrics() const {
  Metrics m;
  m.consumed = consumed_.load();
  m.deduped = deduped_.load();
  m.decode_failures = decode_failures_.load();
  m.upserted = upserted_.load();
  m.links_created = links_created_.load();
  return m;
}

}  // namespace provmesh
