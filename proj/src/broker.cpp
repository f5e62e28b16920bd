#include "provmesh/broker.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>
#include <set>

#include <json.hpp>

namespace provmesh {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// ChannelHub
// ---------------------------------------------------------------------------

ChannelHub::Channel& ChannelHub::channel(const std::string& name) {
  std::lock_guard lk(mu_);
  auto& slot = channels_[name];
  if (!slot) slot = std::make_unique<Channel>();
  return *slot;
}

void ChannelHub::subscribe(const std::string& name) {
  Channel& ch = channel(name);
  std::lock_guard lk(ch.m);
  ch.subscribers += 1;
}

void ChannelHub::unsubscribe(const std::string& name) {
  Channel& ch = channel(name);
  std::lock_guard lk(ch.m);
  if (ch.subscribers > 0) ch.subscribers -= 1;
  if (ch.subscribers == 0) ch.q.clear();  // no persistence semantics
}

std::size_t ChannelHub::publish(const std::string& name, const std::vector<std::string>& messages) {
  Channel& ch = channel(name);
  std::lock_guard lk(ch.m);
  if (ch.subscribers == 0) return 0;  // dropped: nobody is listening
  for (const auto& m : messages) ch.q.push_back(m);
  ch.cv.notify_all();
  return messages.size();
}

std::vector<std::string> ChannelHub::pull(const std::string& name,
                                          std::chrono::milliseconds timeout,
                                          std::size_t max_messages) {
  Channel& ch = channel(name);
  std::unique_lock lk(ch.m);
  ch.cv.wait_for(lk, timeout, [&] { return !ch.q.empty() || down_; });
  std::vector<std::string> out;
  std::size_t n = std::min(max_messages, ch.q.size());
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(std::move(ch.q.front()));
    ch.q.pop_front();
  }
  return out;
}

void ChannelHub::shutdown() {
  down_ = true;
  std::lock_guard lk(mu_);
  for (auto& [_, ch] : channels_) {
    std::lock_guard clk(ch->m);
    ch->cv.notify_all();
  }
}

// ---------------------------------------------------------------------------
// In-process client
// ---------------------------------------------------------------------------

namespace {

class InProcClient final : public BrokerClient {
 public:
  explicit InProcClient(ChannelHub& hub) : hub_(&hub) {}
  ~InProcClient() override { close(); }

  void publish_bulk(const std::string& channel, const std::vector<std::string>& messages) override {
    if (!hub_) throw BrokerDisconnected("client closed");
    for (const auto& m : messages) {
      if (m.size() > kMaxMessageBytes) throw OversizedMessage("message exceeds 1 MiB");
    }
    hub_->publish(channel, messages);
  }

  void subscribe(const std::string& channel) override {
    if (!hub_) throw BrokerDisconnected("client closed");
    hub_->subscribe(channel);
    subscriptions_.insert(channel);
  }

  std::vector<std::string> pull(const std::string& channel, std::chrono::milliseconds timeout,
                                std::size_t max_messages) override {
    if (!hub_) throw BrokerDisconnected("client closed");
    return hub_->pull(channel, timeout, max_messages);
  }

  void close() override {
    if (!hub_) return;
    for (const auto& c : subscriptions_) hub_->unsubscribe(c);
    subscriptions_.clear();
    hub_ = nullptr;
  }

 private:
  ChannelHub* hub_;
  std::set<std::string> subscriptions_;
};

// ---------------------------------------------------------------------------
// Framing helpers
// ---------------------------------------------------------------------------

bool send_all(int fd, const void* data, std::size_t len) {
  const char* p = static_cast<const char*>(data);
  while (len > 0) {
    ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
    if (n <= 0) {
      if (n < 0 && errno == EINTR) continue;
      return false;
    }
    p += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

bool recv_all(int fd, void* data, std::size_t len) {
  char* p = static_cast<char*>(data);
  while (len > 0) {
    ssize_t n = ::recv(fd, p, len, 0);
    if (n <= 0) {
      if (n < 0 && errno == EINTR) continue;
      return false;
    }
    p += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

bool write_frame(int fd, const std::string& payload) {
  std::uint32_t len = htonl(static_cast<std::uint32_t>(payload.size()));
  if (!send_all(fd, &len, sizeof(len))) return false;
  return send_all(fd, payload.data(), payload.size());
}

// Returns false on clean EOF or error; oversized frames break the connection.
bool read_frame(int fd, std::string& payload) {
  std::uint32_t len_be = 0;
  if (!recv_all(fd, &len_be, sizeof(len_be))) return false;
  std::uint32_t len = ntohl(len_be);
  if (len > kMaxFrameBytes) return false;
  payload.resize(len);
  if (len > 0 && !recv_all(fd, payload.data(), len)) return false;
  return true;
}

int dial(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  std::string port_s = std::to_string(port);
  if (getaddrinfo(host.c_str(), port_s.c_str(), &hints, &res) != 0) return -1;
  int fd = -1;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  freeaddrinfo(res);
  if (fd >= 0) {
    int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  return fd;
}

// ---------------------------------------------------------------------------
// TCP client
// ---------------------------------------------------------------------------

class TcpClient final : public BrokerClient {
 public:
  TcpClient(int fd) : fd_(fd) {}
  ~TcpClient() override { close(); }

  void publish_bulk(const std::string& channel, const std::vector<std::string>& messages) override {
    for (const auto& m : messages) {
      if (m.size() > kMaxMessageBytes) throw OversizedMessage("message exceeds 1 MiB");
    }
    // Split into frames under the frame cap; each split publishes atomically
    // and in order on the same connection, preserving per-publisher FIFO.
    std::size_t begin = 0;
    while (begin < messages.size() || messages.empty()) {
      std::size_t bytes = 0;
      std::size_t end = begin;
      while (end < messages.size()) {
        std::size_t cost = messages[end].size() + 64;
        if (end > begin && bytes + cost > kMaxFrameBytes - 4096) break;
        bytes += cost;
        ++end;
      }
      Json req{{"op", "pub"}, {"channel", channel}};
      req["messages"] = Json::array();
      for (std::size_t i = begin; i < end; ++i) req["messages"].push_back(messages[i]);
      request(req, std::chrono::milliseconds(30000));
      if (messages.empty()) break;
      begin = end;
    }
  }

  void subscribe(const std::string& channel) override {
    request(Json{{"op", "sub"}, {"channel", channel}}, std::chrono::milliseconds(30000));
  }

  std::vector<std::string> pull(const std::string& channel, std::chrono::milliseconds timeout,
                                std::size_t max_messages) override {
    Json req{{"op", "pull"},
             {"channel", channel},
             {"max", max_messages},
             {"timeout_ms", timeout.count()}};
    Json resp = request(req, timeout + std::chrono::milliseconds(30000));
    std::vector<std::string> out;
    if (auto it = resp.find("messages"); it != resp.end() && it->is_array()) {
      out.reserve(it->size());
      for (auto& m : *it) out.push_back(m.get<std::string>());
    }
    return out;
  }

  void close() override {
    std::lock_guard lk(mu_);
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  Json request(const Json& req, std::chrono::milliseconds read_budget) {
    std::lock_guard lk(mu_);
    if (fd_ < 0) throw BrokerDisconnected("connection closed");
    timeval tv{};
    tv.tv_sec = read_budget.count() / 1000;
    tv.tv_usec = (read_budget.count() % 1000) * 1000;
    setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    if (!write_frame(fd_, req.dump())) {
      ::close(fd_);
      fd_ = -1;
      throw BrokerDisconnected("send failed");
    }
    std::string payload;
    if (!read_frame(fd_, payload)) {
      ::close(fd_);
      fd_ = -1;
      throw BrokerDisconnected("connection lost");
    }
    Json resp = Json::parse(payload, nullptr, false);
    if (resp.is_discarded()) throw BrokerError("malformed broker reply");
    if (resp.value("op", std::string{}) == "err") {
      throw BrokerError("broker error: " + resp.value("error", std::string{"unknown"}));
    }
    return resp;
  }

  std::mutex mu_;
  int fd_;
};

}  // namespace

std::unique_ptr<BrokerClient> InProcBroker::make_client() {
  return std::make_unique<InProcClient>(hub_);
}

std::unique_ptr<BrokerClient> connect_tcp(const std::string& host, std::uint16_t port) {
  int fd = dial(host, port);
  if (fd < 0) {
    throw BrokerDisconnected("cannot connect to " + host + ":" + std::to_string(port));
  }
  return std::make_unique<TcpClient>(fd);
}

std::unique_ptr<BrokerClient> connect_tcp(const std::string& address) {
  auto pos = address.rfind(':');
  if (pos == std::string::npos) throw BrokerError("broker address must be host:port");
  std::string host = address.substr(0, pos);
  int port = std::atoi(address.c_str() + pos + 1);
  if (port <= 0 || port > 65535) throw BrokerError("bad broker port in '" + address + "'");
  return connect_tcp(host, static_cast<std::uint16_t>(port));
}

// ---------------------------------------------------------------------------
// TCP server
// ---------------------------------------------------------------------------

TcpBrokerServer::TcpBrokerServer(std::string host, std::uint16_t port)
    : host_(std::move(host)), port_(port) {}

TcpBrokerServer::~TcpBrokerServer() { stop(); }

void TcpBrokerServer::start() {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw BrokerError("socket() failed");
  int one = 1;
  setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port_);
  if (host_ == "0.0.0.0" || host_.empty()) {
    addr.sin_addr.s_addr = INADDR_ANY;
  } else if (inet_pton(AF_INET, host_.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw BrokerError("bad listen host " + host_);
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(listen_fd_, 128) != 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw BrokerError("cannot listen on " + host_ + ":" + std::to_string(port_));
  }
  if (port_ == 0) {
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
  }
  stopping_ = false;
  accept_thread_ = std::thread([this] { accept_loop(); });
}

void TcpBrokerServer::accept_loop() {
  while (!stopping_) {
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (stopping_) break;
      if (errno == EINTR) continue;
      break;
    }
    int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    std::lock_guard lk(conn_mu_);
    conn_fds_.push_back(fd);
    conn_threads_.emplace_back([this, fd] { serve_connection(fd); });
  }
}

void TcpBrokerServer::serve_connection(int fd) {
  std::set<std::string> subscriptions;
  std::string payload;
  while (!stopping_ && read_frame(fd, payload)) {
    Json req = Json::parse(payload, nullptr, false);
    Json resp;
    if (req.is_discarded() || !req.is_object()) {
      resp = Json{{"op", "err"}, {"error", "malformed frame payload"}};
    } else {
      std::string op = req.value("op", std::string{});
      std::string channel = req.value("channel", std::string{"task_events"});
      if (op == "pub") {
        std::vector<std::string> msgs;
        bool oversized = false;
        if (auto it = req.find("messages"); it != req.end() && it->is_array()) {
          msgs.reserve(it->size());
          for (auto& m : *it) {
            std::string s = m.is_string() ? m.get<std::string>() : m.dump();
            if (s.size() > kMaxMessageBytes) {
              oversized = true;
              break;
            }
            msgs.push_back(std::move(s));
          }
        }
        if (oversized) {
          resp = Json{{"op", "err"}, {"error", "oversized message"}};
        } else {
          std::size_t n = hub_.publish(channel, msgs);
          resp = Json{{"op", "ack"}, {"n", n}};
        }
      } else if (op == "sub") {
        if (!subscriptions.count(channel)) {
          hub_.subscribe(channel);
          subscriptions.insert(channel);
        }
        resp = Json{{"op", "ack"}};
      } else if (op == "pull") {
        auto timeout = std::chrono::milliseconds(req.value("timeout_ms", std::int64_t{1000}));
        std::size_t max = req.value("max", std::size_t{4096});
        auto msgs = hub_.pull(channel, timeout, max);
        resp = Json{{"op", "ack"}, {"messages", msgs}};
      } else {
        resp = Json{{"op", "err"}, {"error", "unknown op '" + op + "'"}};
      }
    }
    if (!write_frame(fd, resp.dump())) break;
  }
  for (const auto& c : subscriptions) hub_.unsubscribe(c);
  ::close(fd);
}

void TcpBrokerServer::stop() {
  if (stopping_.exchange(true)) {
    if (accept_thread_.joinable()) accept_thread_.join();
    return;
  }
  hub_.shutdown();
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  {
    std::lock_guard lk(conn_mu_);
    for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  if (accept_thread_.joinable()) accept_thread_.join();
  std::vector<std::thread> threads;
  {
    std::lock_guard lk(conn_mu_);
    threads.swap(conn_threads_);
  }
  for (auto& t : threads) {
    if (t.joinable()) t.join();
  }
}

}  // namespace provmesh
