#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace provmesh {

// Channel-based pub/sub with bulk publish. Delivery is at-least-once; order
// is preserved per publisher connection, unordered across publishers. There is
// no persistence: messages published on a channel with no subscriber are
// dropped, and nothing is replayed after a resubscribe.

constexpr std::size_t kMaxMessageBytes = 1u << 20;   // 1 MiB per message
constexpr std::size_t kMaxFrameBytes = 16u << 20;    // 16 MiB per TCP frame

struct BrokerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BrokerDisconnected : BrokerError {
  using BrokerError::BrokerError;
};
struct OversizedMessage : BrokerError {
  using BrokerError::BrokerError;
};

class BrokerClient {
 public:
  virtual ~BrokerClient() = default;
  // All-or-nothing append of the batch from this publisher's view; returns
  // after the broker acknowledged the enqueue.
  virtual void publish_bulk(const std::string& channel,
                            const std::vector<std::string>& messages) = 0;
  virtual void subscribe(const std::string& channel) = 0;
  // Blocking pull: waits until at least one message or the timeout elapses.
  // An empty result is the timeout signal, not an error.
  virtual std::vector<std::string> pull(const std::string& channel,
                                        std::chrono::milliseconds timeout,
                                        std::size_t max_messages = 4096) = 0;
  virtual void close() = 0;
};

// Shared channel table used by both the in-process hub and the TCP server.
class ChannelHub {
 public:
  void subscribe(const std::string& channel);
  void unsubscribe(const std::string& channel);
  std::size_t publish(const std::string& channel, const std::vector<std::string>& messages);
  // max_bytes bounds the summed message size of one batch (at least one
  // message is returned regardless); the TCP server uses it to keep reply
  // frames under the frame cap.
  std::vector<std::string> pull(const std::string& channel, std::chrono::milliseconds timeout,
                                std::size_t max_messages,
                                std::size_t max_bytes = kMaxFrameBytes);
  void shutdown();  // wakes all pullers

 private:
  struct Channel {
    std::mutex m;
    std::condition_variable cv;
    std::deque<std::string> q;
    int subscribers = 0;
  };
  Channel& channel(const std::string& name);
  std::mutex mu_;
  std::map<std::string, std::unique_ptr<Channel>> channels_;
  std::atomic<bool> down_{false};
};

class InProcBroker {
 public:
  std::unique_ptr<BrokerClient> make_client();
  ChannelHub& hub() { return hub_; }

 private:
  ChannelHub hub_;
};

// TCP broker. Wire protocol: length-prefixed frames (4-byte big-endian payload
// length, then payload). The payload is one JSON object:
//   {"op":"pub","channel":c,"messages":[...]}        -> {"op":"ack","n":N}
//   {"op":"sub","channel":c}                          -> {"op":"ack"}
//   {"op":"pull","channel":c,"max":M,"timeout_ms":T}  -> {"op":"ack","messages":[...]}
// Errors come back as {"op":"err","error":text}.
class TcpBrokerServer {
 public:
  // port 0 binds an ephemeral port; read it back with port().
  TcpBrokerServer(std::string host, std::uint16_t port);
  ~TcpBrokerServer();
  void start();  // throws BrokerError on bind failure
  void stop();
  std::uint16_t port() const { return port_; }
  const std::string& host() const { return host_; }
  std::string address() const { return host_ + ":" + std::to_string(port_); }

 private:
  void accept_loop();
  void serve_connection(int fd);

  std::string host_;
  std::uint16_t port_;
  int listen_fd_ = -1;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex conn_mu_;
  std::vector<std::thread> conn_threads_;
  std::vector<int> conn_fds_;
  ChannelHub hub_;
};

// Connects a TCP broker client; throws BrokerDisconnected if unreachable.
std::unique_ptr<BrokerClient> connect_tcp(const std::string& host, std::uint16_t port);
std::unique_ptr<BrokerClient> connect_tcp(const std::string& address);  // "host:port"

}  // namespace provmesh
