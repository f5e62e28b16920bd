#include "provmesh/observer.hpp"

#include <cstdlib>
#include <fstream>

#include "provmesh/adapters.hpp"

namespace provmesh {

std::string_view to_string(AdapterKind k) {
  switch (k) {
    case AdapterKind::SchedulerPlugin: return "SCHEDULER_PLUGIN";
    case AdapterKind::LogFile: return "LOG_FILE";
    case AdapterKind::RecordStore: return "RECORD_STORE";
  }
  return "SCHEDULER_PLUGIN";
}

std::optional<AdapterKind> adapter_kind_from_string(std::string_view s) {
  if (s == "SCHEDULER_PLUGIN") return AdapterKind::SchedulerPlugin;
  if (s == "LOG_FILE") return AdapterKind::LogFile;
  if (s == "RECORD_STORE") return AdapterKind::RecordStore;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Relevance filtering
// ---------------------------------------------------------------------------

bool glob_match(std::string_view pattern, std::string_view text) {
  std::size_t p = 0, t = 0;
  std::size_t star_p = std::string_view::npos, star_t = 0;
  while (t < text.size()) {
    if (p < pattern.size() && (pattern[p] == text[t] || pattern[p] == '?')) {
      ++p;
      ++t;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star_p = p++;
      star_t = t;
    } else if (star_p != std::string_view::npos) {
      p = star_p + 1;
      t = ++star_t;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

bool is_relevant(const TaskStateEvent& ev, const std::vector<std::string>& patterns) {
  if (patterns.empty()) return true;
  auto match_section = [&](const char* section) {
    auto it = ev.payload.find(section);
    if (it == ev.payload.end() || !it->is_object()) return false;
    for (auto& [k, v] : it->items()) {
      (void)v;
      std::string qualified = std::string(section) + "." + k;
      for (const auto& pat : patterns) {
        if (glob_match(pat, qualified)) return true;
      }
    }
    return false;
  };
  return match_section("used") || match_section("generated");
}

// ---------------------------------------------------------------------------
// EventEmitter
// ---------------------------------------------------------------------------

EventEmitter::EventEmitter(BufferPolicy policy, std::string channel)
    : policy_(policy), channel_(std::move(channel)) {
  capacity_ = policy_.dynamic ? policy_.min_capacity : policy_.max_capacity;
}

EventEmitter::~EventEmitter() { stop(); }

std::size_t EventEmitter::compute_capacity(double rate_per_sec, const BufferPolicy& policy) {
  double interval_s = static_cast<double>(policy.flush_interval.count()) / 1000.0;
  auto target = static_cast<long long>(std::llround(rate_per_sec * interval_s));
  if (target < static_cast<long long>(policy.min_capacity)) return policy.min_capacity;
  if (target > static_cast<long long>(policy.max_capacity)) return policy.max_capacity;
  return static_cast<std::size_t>(target);
}

void EventEmitter::start(std::unique_ptr<BrokerClient> client) {
  std::lock_guard lk(mu_);
  if (running_) return;
  client_ = std::move(client);
  stop_requested_ = false;
  running_ = true;
  rate_window_start_ = now_utc_ns();
  rate_window_count_ = 0;
  flusher_ = std::thread([this] { flusher_loop(); });
}

void EventEmitter::stop() {
  {
    std::lock_guard lk(mu_);
    if (!running_) return;
    stop_requested_ = true;
  }
  cv_.notify_all();
  if (flusher_.joinable()) flusher_.join();
  std::unique_lock lk(mu_);
  if (!buffer_.empty()) {
    std::vector<std::string> batch;
    batch.swap(buffer_);
    lk.unlock();
    publish_with_retry(std::move(batch));
    lk.lock();
  }
  if (client_) client_->close();
  client_.reset();
  running_ = false;
}

void EventEmitter::observe_rate(std::size_t n) {
  // Called under mu_. Folds the finished window into an exponentially
  // weighted rate once the ~2 s window elapses.
  rate_window_count_ += n;
  TimestampNs now = now_utc_ns();
  double dt_s = static_cast<double>(now - rate_window_start_) / 1e9;
  if (dt_s >= 2.0) {
    double inst = static_cast<double>(rate_window_count_) / dt_s;
    double alpha = 1.0 - std::exp(-dt_s / 2.0);
    rate_per_sec_ = rate_per_sec_ + alpha * (inst - rate_per_sec_);
    rate_window_start_ = now;
    rate_window_count_ = 0;
    if (policy_.dynamic) {
      capacity_ = compute_capacity(rate_per_sec_, policy_);
    }
  }
}

void EventEmitter::emit(TaskStateEvent ev) {
  if (!running_) {
    dropped_.fetch_add(1, std::memory_order_relaxed);
    return;
  }
  if (ev.observed_at == 0) ev.observed_at = now_utc_ns();
  ev.sequence_no = seq_.fetch_add(1, std::memory_order_relaxed);
  std::string encoded = ev.encode();

  std::unique_lock lk(mu_);
  buffer_.push_back(std::move(encoded));
  emitted_.fetch_add(1, std::memory_order_relaxed);
  observe_rate(1);
  std::size_t size = buffer_.size();
  std::size_t cap = capacity_.load(std::memory_order_relaxed);
  if (size >= 4 * policy_.max_capacity) {
    // Backpressure: broker is not keeping up; flush on the caller's thread
    // rather than dropping.
    flush_locked(lk, false);
    return;
  }
  lk.unlock();
  if (size >= cap) cv_.notify_one();
}

void EventEmitter::flush_locked(std::unique_lock<std::mutex>& lk, bool timer) {
  if (buffer_.empty()) return;
  std::vector<std::string> batch;
  batch.swap(buffer_);
  lk.unlock();
  if (timer) timer_flushes_.fetch_add(1, std::memory_order_relaxed);
  publish_with_retry(std::move(batch));
  lk.lock();
}

void EventEmitter::publish_with_retry(std::vector<std::string> batch) {
  if (batch.empty()) return;
  const int kAttempts = 3;
  std::chrono::milliseconds backoff{25};
  for (int attempt = 1; attempt <= kAttempts; ++attempt) {
    try {
      client_->publish_bulk(channel_, batch);
      bulk_publishes_.fetch_add(1, std::memory_order_relaxed);
      return;
    } catch (const std::exception&) {
      if (attempt == kAttempts) break;
      retries_.fetch_add(1, std::memory_order_relaxed);
      std::this_thread::sleep_for(backoff);
      backoff *= 4;
    }
  }
  dropped_.fetch_add(batch.size(), std::memory_order_relaxed);
}

void EventEmitter::flusher_loop() {
  std::unique_lock lk(mu_);
  auto last_flush = std::chrono::steady_clock::now();
  while (!stop_requested_) {
    cv_.wait_until(lk, last_flush + policy_.flush_interval, [&] {
      return stop_requested_ ||
             buffer_.size() >= capacity_.load(std::memory_order_relaxed);
    });
    if (stop_requested_) break;
    bool timer = buffer_.size() < capacity_.load(std::memory_order_relaxed);
    auto now = std::chrono::steady_clock::now();
    if (timer && now - last_flush < policy_.flush_interval) continue;
    flush_locked(lk, timer);
    last_flush = std::chrono::steady_clock::now();
  }
}

EventEmitter::Metrics EventEmitter::metrics() const {
  Metrics m;
  m.emitted = emitted_.load();
  m.bulk_publishes = bulk_publishes_.load();
  m.timer_flushes = timer_flushes_.load();
  m.dropped_events = dropped_.load();
  m.retries = retries_.load();
  m.capacity = capacity_.load();
  return m;
}

// ---------------------------------------------------------------------------
// Observer base
// ---------------------------------------------------------------------------

Observer::Observer(ObserverConfig config)
    : config_(std::move(config)),
      emitter_(std::make_unique<EventEmitter>(config_.buffer, config_.channel)) {}

Observer::~Observer() { stop(); }

bool Observer::uses_poll_loop() const {
  return config_.adapter_kind == AdapterKind::LogFile ||
         config_.adapter_kind == AdapterKind::RecordStore;
}

void Observer::start(std::unique_ptr<BrokerClient> client) {
  if (started_.exchange(true)) return;
  stop_requested_ = false;
  emitter_->start(std::move(client));
  on_start();
  if (uses_poll_loop()) {
    poll_thread_ = std::thread([this] { poll_loop(); });
  }
}

void Observer::poll_loop() {
  std::unique_lock lk(poll_mu_);
  while (!stop_requested_) {
    lk.unlock();
    observe();
    lk.lock();
    poll_cv_.wait_for(lk, config_.poll_interval, [&] { return stop_requested_.load(); });
  }
}

void Observer::stop() {
  if (!started_.exchange(false)) return;
  stop_requested_ = true;
  poll_cv_.notify_all();
  if (poll_thread_.joinable()) poll_thread_.join();
  on_stop();
  emitter_->stop();
}

void Observer::emit_event(TaskStateEvent ev) {
  if (ev.adapter_kind.empty()) ev.adapter_kind = std::string(to_string(config_.adapter_kind));
  if (ev.campaign_id.empty()) ev.campaign_id = config_.campaign_id;
  if (ev.workflow_id.empty()) ev.workflow_id = config_.workflow_id;
  if (ev.activity_id.empty()) ev.activity_id = config_.default_activity_id;
  if (!is_relevant(ev, config_.relevance_filter)) return;
  emitter_->emit(std::move(ev));
}

// ---------------------------------------------------------------------------
// BrokerEndpoint
// ---------------------------------------------------------------------------

BrokerEndpoint BrokerEndpoint::in_process(std::shared_ptr<InProcBroker> hub) {
  BrokerEndpoint e;
  e.inproc = std::move(hub);
  return e;
}

BrokerEndpoint BrokerEndpoint::tcp(std::string address) {
  BrokerEndpoint e;
  e.tcp_address = std::move(address);
  return e;
}

std::unique_ptr<BrokerClient> BrokerEndpoint::connect() const {
  const char* env = std::getenv(kBrokerEnvVar);
  try {
    if (env && *env) return connect_tcp(std::string(env));
    if (inproc) return inproc->make_client();
    if (!tcp_address.empty()) return connect_tcp(tcp_address);
  } catch (const std::exception& e) {
    throw BrokerUnreachable(e.what());
  }
  throw BrokerUnreachable("no broker endpoint configured");
}

// ---------------------------------------------------------------------------
// Controller
// ---------------------------------------------------------------------------

Controller::Controller(BrokerEndpoint endpoint) : endpoint_(std::move(endpoint)) {}

Controller::~Controller() { stop_all(); }

std::shared_ptr<Observer> Controller::register_observer(const ObserverConfig& config) {
  if (config.buffer.min_capacity < 1) {
    throw BadConfig("buffer.min_capacity", "must be >= 1");
  }
  if (config.buffer.min_capacity > config.buffer.max_capacity) {
    throw BadConfig("buffer.max_capacity", "must be >= min_capacity");
  }
  if (config.buffer.flush_interval.count() <= 0) {
    throw BadConfig("buffer.flush_interval", "must be > 0");
  }

  std::shared_ptr<Observer> obs;
  switch (config.adapter_kind) {
    case AdapterKind::SchedulerPlugin:
      obs = std::make_shared<SchedulerObserver>(config);
      break;
    case AdapterKind::LogFile: {
      if (config.poll_interval.count() <= 0) throw BadConfig("poll_interval", "must be > 0");
      if (config.locator.empty() || !std::filesystem::is_regular_file(config.locator)) {
        throw BadConfig("locator", "log file does not exist: '" + config.locator + "'");
      }
      obs = std::make_shared<LogFileObserver>(config);
      break;
    }
    case AdapterKind::RecordStore: {
      if (config.poll_interval.count() <= 0) throw BadConfig("poll_interval", "must be > 0");
      if (config.locator.empty() || !std::filesystem::is_directory(config.locator)) {
        throw BadConfig("locator", "run-record directory does not exist: '" + config.locator + "'");
      }
      obs = std::make_shared<RecordStoreObserver>(config);
      break;
    }
  }
  observers_.push_back(obs);
  return obs;
}

void Controller::start_all() {
  if (started_) return;
  // Connect every observer first so a dead broker leaves nothing half-started.
  std::vector<std::unique_ptr<BrokerClient>> clients;
  clients.reserve(observers_.size());
  for (std::size_t i = 0; i < observers_.size(); ++i) {
    clients.push_back(endpoint_.connect());
  }
  for (std::size_t i = 0; i < observers_.size(); ++i) {
    observers_[i]->start(std::move(clients[i]));
  }
  started_ = true;
}

void Controller::stop_all() {
  if (!started_) return;
  for (auto& obs : observers_) obs->stop();
  started_ = false;
}

// ---------------------------------------------------------------------------
// Config file parsing
// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_bool(const std::string& v) { return v == "true" || v == "1" || v == "yes" || v == "on"; }

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    std::size_t comma = v.find(',', pos);
    std::string item = trim(v.substr(pos, comma == std::string::npos ? comma : comma - pos));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace

std::vector<ObserverConfig> Controller::parse_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw BadConfig("file", "cannot open '" + path.string() + "'");

  std::vector<ObserverConfig> configs;
  ObserverConfig* current = nullptr;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[' && t.back() == ']') {
      std::string section = trim(t.substr(1, t.size() - 2));
      if (section.rfind("observer", 0) != 0) {
        throw BadConfig("section", "unknown section '" + section + "' (line " +
                                       std::to_string(line_no) + ")");
      }
      configs.emplace_back();
      current = &configs.back();
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos || !current) {
      throw BadConfig("line", "expected 'key = value' inside an [observer] section (line " +
                                  std::to_string(line_no) + ")");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key == "adapter_kind") {
      auto k = adapter_kind_from_string(value);
      if (!k) throw UnknownAdapterKind(value);
      current->adapter_kind = *k;
    } else if (key == "locator") {
      current->locator = value;
    } else if (key == "poll_interval_ms") {
      current->poll_interval = std::chrono::milliseconds(std::stoll(value));
    } else if (key == "filter") {
      current->relevance_filter = split_list(value);
    } else if (key == "telemetry_enabled") {
      current->telemetry_enabled = parse_bool(value);
    } else if (key == "campaign_id") {
      current->campaign_id = value;
    } else if (key == "workflow_id") {
      current->workflow_id = value;
    } else if (key == "activity_id") {
      current->default_activity_id = value;
    } else if (key == "channel") {
      current->channel = value;
    } else if (key == "buffer.min_capacity") {
      current->buffer.min_capacity = static_cast<std::size_t>(std::stoull(value));
    } else if (key == "buffer.max_capacity") {
      current->buffer.max_capacity = static_cast<std::size_t>(std::stoull(value));
    } else if (key == "buffer.flush_interval_ms") {
      current->buffer.flush_interval = std::chrono::milliseconds(std::stoll(value));
    } else if (key == "buffer.dynamic") {
      current->buffer.dynamic = parse_bool(value);
    } else {
      throw BadConfig(key, "unknown key (line " + std::to_string(line_no) + ")");
    }
  }
  return configs;
}

}  // namespace provmesh
