#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "descevo/http_provider.hpp"

using namespace descevo;
using namespace std::chrono_literals;

namespace {

// Local chat endpoint answering from a per-call status list (200 after the list runs out).
class FakeEndpoint {
 public:
  explicit FakeEndpoint(std::vector<int> statuses) : statuses_(std::move(statuses)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const auto n = hits_.fetch_add(1);
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      const int status = n < statuses_.size() ? statuses_[n] : 200;
      res.status = status;
      if (status == 200) {
        json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "{\"hen\": [\"red comb\"]}"}}}}}},
                      {"usage", {{"prompt_tokens", 11}, {"completion_tokens", 7}}}};
        res.set_content(reply.dump(), "application/json");
      } else {
        res.set_content("{\"error\": \"nope\"}", "application/json");
      }
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~FakeEndpoint() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  std::size_t hits() const { return hits_.load(); }
  std::string last_body() const { return last_body_; }
  std::string last_auth() const { return last_auth_; }

 private:
  httplib::Server server_;
  std::vector<int> statuses_;
  std::atomic<std::size_t> hits_{0};
  std::string last_body_, last_auth_;
  int port_ = 0;
  std::thread thread_;
};

HttpProviderConfig config_for(const std::string& url, std::string key_env = "") {
  HttpProviderConfig c;
  c.endpoint = url;
  c.model = "test-model";
  c.api_key_env = std::move(key_env);
  c.timeout = 5s;
  return c;
}

ChatRequest hello() {
  ChatRequest r;
  r.system = "sys";
  r.user = "describe a hen";
  r.temperature = 0.7;
  r.max_tokens = 99;
  return r;
}

}  // namespace

TEST(Endpoint, ParsesSchemeHostPortAndPath) {
  const auto a = parse_endpoint("https://api.example.com/v1/chat/completions");
  EXPECT_EQ(a.scheme_host_port, "https://api.example.com");
  EXPECT_EQ(a.path, "/v1/chat/completions");
  const auto b = parse_endpoint("http://localhost:8080");
  EXPECT_EQ(b.scheme_host_port, "http://localhost:8080");
  EXPECT_EQ(b.path, "/");
  EXPECT_THROW(parse_endpoint("ftp://x/y"), ConfigError);
}

TEST(HttpProvider, SendsChatBodyAndReturnsContent) {
  FakeEndpoint server({});
  ::setenv("DESCEVO_TEST_KEY", "sk-test", 1);
  HttpProvider p(config_for(server.url(), "DESCEVO_TEST_KEY"));
  EXPECT_EQ(p.complete(hello()), "{\"hen\": [\"red comb\"]}");
  const auto body = json::parse(server.last_body());
  EXPECT_EQ(body["model"], "test-model");
  EXPECT_EQ(body["messages"][0]["content"], "sys");
  EXPECT_EQ(body["messages"][1]["role"], "user");
  EXPECT_DOUBLE_EQ(body["temperature"].get<double>(), 0.7);
  EXPECT_EQ(body["max_tokens"], 99);
  EXPECT_EQ(server.last_auth(), "Bearer sk-test");
  EXPECT_EQ(p.usage().prompt_tokens, 11u);
  EXPECT_EQ(p.usage().completion_tokens, 7u);
}

TEST(HttpProvider, RetriesTransientStatusWithTheConfiguredDelays) {
  FakeEndpoint server({503, 429});
  std::vector<std::chrono::milliseconds> slept;
  HttpProvider p(config_for(server.url()), [&](std::chrono::milliseconds d) { slept.push_back(d); });
  EXPECT_EQ(p.complete(hello()), "{\"hen\": [\"red comb\"]}");
  EXPECT_EQ(server.hits(), 3u);
  EXPECT_EQ(slept, (std::vector<std::chrono::milliseconds>{1s, 4s}));
}

TEST(HttpProvider, ClientErrorsAreNotRetried) {
  FakeEndpoint server({400});
  std::vector<std::chrono::milliseconds> slept;
  HttpProvider p(config_for(server.url()), [&](std::chrono::milliseconds d) { slept.push_back(d); });
  try {
    p.complete(hello());
    FAIL();
  } catch (const ProviderError& e) {
    EXPECT_NE(std::string(e.what()).find("400"), std::string::npos);
  }
  EXPECT_EQ(server.hits(), 1u);
  EXPECT_TRUE(slept.empty());
}

TEST(HttpProvider, GivesUpAfterEveryDelayIsSpent) {
  FakeEndpoint server({500, 500, 500, 500, 500});
  std::vector<std::chrono::milliseconds> slept;
  HttpProvider p(config_for(server.url()), [&](std::chrono::milliseconds d) { slept.push_back(d); });
  EXPECT_THROW(p.complete(hello()), ProviderError);
  EXPECT_EQ(server.hits(), 4u);
  EXPECT_EQ(slept.size(), 3u);
}

TEST(HttpProvider, TransportFailureIsRetriedThenReported) {
  std::size_t sleeps = 0;
  HttpProvider p(config_for("http://127.0.0.1:1/v1/chat/completions"),  // nothing listens on port 1
                 [&](std::chrono::milliseconds) { ++sleeps; });
  try {
    p.complete(hello());
    FAIL();
  } catch (const ProviderError& e) {
    EXPECT_NE(std::string(e.what()).find("transport error"), std::string::npos);
  }
  EXPECT_EQ(sleeps, 3u);
}

TEST(HttpProvider, MissingKeyIsAConfigError) {
  ::unsetenv("DESCEVO_TEST_MISSING_KEY");
  EXPECT_THROW(HttpProvider(config_for("http://127.0.0.1:1/", "DESCEVO_TEST_MISSING_KEY")), ConfigError);
}

TEST(HttpProvider, MalformedCompletionIsAProviderError) {
  httplib::Server server;
  server.Post("/", [](const httplib::Request&, httplib::Response& res) { res.set_content("{\"choices\": []}", "application/json"); });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  HttpProvider p(config_for("http://127.0.0.1:" + std::to_string(port) + "/"));
  EXPECT_THROW(p.complete(hello()), ProviderError);
  server.stop();
  t.join();
}
