#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "maestro/chat_client.hpp"
#include "support.hpp"

using namespace maestro;

namespace {

// Local OpenAI-style server that fails the first `failures` requests with
// `failure_status`.
class FakeServer {
 public:
  FakeServer(int failures, int failure_status) : failures_(failures), status_(failure_status) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const int n = requests_++;
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      if (n < failures_) {
        res.status = status_;
        return;
      }
      const auto j = nlohmann::json::parse(req.body);
      const std::string content = "echo " + j["messages"].back()["content"].get<std::string>();
      res.set_content(test_support::chat_reply(content).body, "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  int requests() const { return requests_; }
  std::string last_body() const { return last_body_; }
  std::string last_auth() const { return last_auth_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  int failures_;
  int status_;
  std::atomic<int> requests_{0};
  std::string last_body_;
  std::string last_auth_;
};

EndpointSpec spec_for(const FakeServer& s) {
  EndpointSpec e;
  e.base_url = s.base_url();
  e.model_name = "test-model";
  e.max_retries = 3;
  e.backoff_base = std::chrono::milliseconds(1);
  e.request_timeout = std::chrono::milliseconds(5000);
  return e;
}

}  // namespace

TEST(SplitUrl, OriginAndPrefix) {
  EXPECT_EQ(HttplibTransport::split_url("http://h:8000/v1/"), std::make_pair(std::string("http://h:8000"), std::string("/v1")));
  EXPECT_EQ(HttplibTransport::split_url("http://h:8000"), std::make_pair(std::string("http://h:8000"), std::string("")));
}

TEST(ChatClient, RequestShapeAndBearerHeader) {
  FakeServer server(0, 200);
  ::setenv("MAESTRO_API_KEY", "sk-test", 1);
  ChatClient client(spec_for(server));
  const auto reply = client.complete({{"system", "s"}, {"user", "hello"}}, 0.25);
  ::unsetenv("MAESTRO_API_KEY");
  EXPECT_EQ(reply, "echo hello");
  EXPECT_EQ(server.last_auth(), "Bearer sk-test");
  const auto body = nlohmann::json::parse(server.last_body());
  EXPECT_EQ(body["model"], "test-model");
  EXPECT_EQ(body["temperature"], 0.25);
  EXPECT_EQ(body["top_p"], 0.95);
  EXPECT_EQ(body["max_tokens"], 512);
  EXPECT_EQ(body["messages"].size(), 2u);
}

TEST(ChatClient, RetriesServerErrorsWithBackoff) {
  FakeServer server(2, 503);
  std::vector<std::chrono::milliseconds> sleeps;
  ChatClient client(spec_for(server), std::make_shared<HttplibTransport>(),
                    [&](std::chrono::milliseconds d) { sleeps.push_back(d); });
  EXPECT_EQ(client.complete({{"user", "x"}}, 0.7), "echo x");
  EXPECT_EQ(server.requests(), 3);
  EXPECT_EQ(sleeps, (std::vector<std::chrono::milliseconds>{std::chrono::milliseconds(1), std::chrono::milliseconds(2)}));
}

TEST(ChatClient, RetriesRateLimits) {
  FakeServer server(1, 429);
  ChatClient client(spec_for(server), std::make_shared<HttplibTransport>(), test_support::no_sleep);
  EXPECT_EQ(client.complete({{"user", "y"}}, 0.7), "echo y");
  EXPECT_EQ(server.requests(), 2);
}

TEST(ChatClient, ClientErrorsAreNotRetried) {
  FakeServer server(10, 400);
  ChatClient client(spec_for(server), std::make_shared<HttplibTransport>(), test_support::no_sleep);
  EXPECT_THROW(client.complete({{"user", "z"}}, 0.7), TransportError);
  EXPECT_EQ(server.requests(), 1);
}

TEST(ChatClient, GivesUpAfterMaxRetries) {
  FakeServer server(100, 500);
  ChatClient client(spec_for(server), std::make_shared<HttplibTransport>(), test_support::no_sleep);
  EXPECT_THROW(client.complete({{"user", "z"}}, 0.7), TransportError);
  EXPECT_EQ(server.requests(), 4);
}

TEST(ChatClient, UnreachableHostIsATransportError) {
  EndpointSpec e;
  e.base_url = "http://127.0.0.1:1/v1";
  e.max_retries = 1;
  e.request_timeout = std::chrono::milliseconds(500);
  ChatClient client(e, std::make_shared<HttplibTransport>(), test_support::no_sleep);
  EXPECT_THROW(client.complete({{"user", "z"}}, 0.7), TransportError);
}

TEST(ChatClient, MalformedBodyIsRetriedThenFails) {
  auto t = std::make_shared<test_support::ScriptedTransport>(std::vector<HttpResponse>{{200, "{\"choices\": []}"}});
  EndpointSpec e;
  e.base_url = "http://example.invalid";
  e.max_retries = 2;
  ChatClient client(e, t, test_support::no_sleep);
  EXPECT_THROW(client.complete({{"user", "z"}}, 0.7), TransportError);
  EXPECT_EQ(t->calls(), 3u);
}

TEST(EndpointSpec, ValidationAndJson) {
  EndpointSpec e;
  EXPECT_THROW(e.validate(), Error);
  e.base_url = "http://x";
  e.nucleus_p = 0;
  EXPECT_THROW(e.validate(), Error);
  e.nucleus_p = 0.9;
  e.request_timeout = std::chrono::milliseconds(1234);
  const nlohmann::json j = e;
  const auto back = j.get<EndpointSpec>();
  EXPECT_EQ(back.request_timeout, std::chrono::milliseconds(1234));
  EXPECT_EQ(back.nucleus_p, 0.9);
}
