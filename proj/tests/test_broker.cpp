#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <thread>

#include "provmesh/broker.hpp"

#include <json.hpp>

using namespace provmesh;
using Json = nlohmann::json;

namespace {

std::vector<std::string> pull_all(BrokerClient& client, const std::string& channel,
                                  std::size_t expected,
                                  std::chrono::milliseconds idle = std::chrono::milliseconds(500)) {
  std::vector<std::string> out;
  while (out.size() < expected) {
    auto batch = client.pull(channel, idle);
    if (batch.empty()) break;
    for (auto& m : batch) out.push_back(std::move(m));
  }
  return out;
}

void run_conservation_suite(BrokerClient& pub, BrokerClient& sub) {
  sub.subscribe("task_events");

  SUBCASE("bulk of 1000 arrives intact") {
    std::vector<std::string> messages;
    for (int i = 0; i < 1000; ++i) messages.push_back("m" + std::to_string(i));
    pub.publish_bulk("task_events", messages);
    auto got = pull_all(sub, "task_events", 1000);
    CHECK(got == messages);
  }

  SUBCASE("empty bulk is an acknowledged no-op") {
    pub.publish_bulk("task_events", {});
    CHECK(sub.pull("task_events", std::chrono::milliseconds(50)).empty());
  }

  SUBCASE("pull with nothing pending times out with an empty batch") {
    auto t0 = std::chrono::steady_clock::now();
    auto got = sub.pull("task_events", std::chrono::milliseconds(100));
    CHECK(got.empty());
    CHECK(std::chrono::steady_clock::now() - t0 >= std::chrono::milliseconds(80));
  }
}

}  // namespace

TEST_CASE("in-process broker: conservation and pull semantics") {
  InProcBroker broker;
  auto pub = broker.make_client();
  auto sub = broker.make_client();
  run_conservation_suite(*pub, *sub);
}

TEST_CASE("tcp broker: conservation and pull semantics") {
  TcpBrokerServer server("127.0.0.1", 0);
  server.start();
  auto pub = connect_tcp("127.0.0.1", server.port());
  auto sub = connect_tcp("127.0.0.1", server.port());
  run_conservation_suite(*pub, *sub);
  server.stop();
}

TEST_CASE("messages published with no subscriber are not replayed") {
  InProcBroker broker;
  auto pub = broker.make_client();
  pub->publish_bulk("task_events", {"lost"});
  auto sub = broker.make_client();
  sub->subscribe("task_events");
  CHECK(sub->pull("task_events", std::chrono::milliseconds(50)).empty());
  pub->publish_bulk("task_events", {"kept"});
  auto got = sub->pull("task_events", std::chrono::milliseconds(500));
  REQUIRE(got.size() == 1);
  CHECK(got[0] == "kept");
}

TEST_CASE("oversized message is rejected") {
  InProcBroker broker;
  auto pub = broker.make_client();
  std::string big(kMaxMessageBytes + 1, 'x');
  CHECK_THROWS_AS(pub->publish_bulk("task_events", {big}), OversizedMessage);
}

TEST_CASE("tcp: connecting to a dead port raises BrokerDisconnected") {
  CHECK_THROWS_AS(connect_tcp("127.0.0.1", 1), BrokerDisconnected);
}

TEST_CASE("tcp: per-publisher FIFO with two concurrent publishers") {
  TcpBrokerServer server("127.0.0.1", 0);
  server.start();
  auto sub = connect_tcp("127.0.0.1", server.port());
  sub->subscribe("task_events");

  const int kPerPublisher = 5000;
  auto publisher = [&](int id) {
    auto client = connect_tcp("127.0.0.1", server.port());
    std::vector<std::string> batch;
    for (int i = 0; i < kPerPublisher; ++i) {
      batch.push_back(Json{{"p", id}, {"seq", i}}.dump());
      if (batch.size() == 250) {
        client->publish_bulk("task_events", batch);
        batch.clear();
      }
    }
    if (!batch.empty()) client->publish_bulk("task_events", batch);
  };
  std::thread p1(publisher, 1), p2(publisher, 2);
  p1.join();
  p2.join();

  auto got = pull_all(*sub, "task_events", 2 * kPerPublisher);
  REQUIRE(got.size() == 2 * kPerPublisher);
  std::map<int, int> next;
  for (const auto& m : got) {
    Json j = Json::parse(m);
    int p = j["p"].get<int>();
    CHECK(j["seq"].get<int>() == next[p]);  // strictly monotone per publisher
    next[p] += 1;
  }
  server.stop();
}

TEST_CASE("tcp: large bulks split transparently under the frame cap") {
  TcpBrokerServer server("127.0.0.1", 0);
  server.start();
  auto pub = connect_tcp("127.0.0.1", server.port());
  auto sub = connect_tcp("127.0.0.1", server.port());
  sub->subscribe("task_events");

  // ~40 x 900 KiB = ~36 MiB of payload, forcing multiple frames.
  std::vector<std::string> messages(40, std::string(900 * 1024, 'y'));
  pub->publish_bulk("task_events", messages);
  auto got = pull_all(*sub, "task_events", messages.size(), std::chrono::milliseconds(2000));
  REQUIRE(got.size() == messages.size());
  for (const auto& m : got) CHECK(m.size() == messages[0].size());
  server.stop();
}
