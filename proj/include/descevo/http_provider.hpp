#pragma once

#include <chrono>
#include <cstdlib>
#include <functional>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "descevo/error.hpp"
#include "descevo/provider.hpp"

namespace descevo {

struct HttpProviderConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4";
  std::string api_key_env = "OPENAI_API_KEY";  // empty: send no Authorization header
  std::vector<std::chrono::milliseconds> retry_delays = {std::chrono::seconds(1), std::chrono::seconds(4),
                                                         std::chrono::seconds(16)};
  std::chrono::seconds timeout{180};
};

struct ParsedUrl {
  std::string scheme_host_port;  // e.g. "https://api.openai.com:443"
  std::string path;
};

inline ParsedUrl parse_endpoint(const std::string& url) {
  static const std::regex re(R"(^(https?)://([^/:]+)(:[0-9]+)?(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw ConfigError("invalid endpoint URL: " + url);
  return {m[1].str() + "://" + m[2].str() + m[3].str(), m[4].matched ? m[4].str() : std::string("/")};
}

inline bool is_transient_status(int status) noexcept {
  return status == 408 || status == 429 || status >= 500;
}

/// Chat-completions client (OpenAI-style JSON). Retries transient failures after
/// each delay in `retry_delays`; any other failure is a ProviderError carrying the status.
class HttpProvider final : public LlmProvider {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit HttpProvider(HttpProviderConfig config,
                        Sleeper sleeper = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })
      : config_(std::move(config)), url_(parse_endpoint(config_.endpoint)), sleeper_(std::move(sleeper)) {
    if (!config_.api_key_env.empty()) {
      const char* key = std::getenv(config_.api_key_env.c_str());
      if (key == nullptr || *key == '\0') {
        throw ConfigError("environment variable " + config_.api_key_env + " is not set");
      }
      api_key_ = key;
    }
  }

  static json request_body(const ChatRequest& req, const std::string& model) {
    return {{"model", model},
            {"messages", json::array({{{"role", "system"}, {"content", req.system}},
                                      {{"role", "user"}, {"content", req.user}}})},
            {"temperature", req.temperature},
            {"max_tokens", req.max_tokens}};
  }

 protected:
  std::string do_complete(const ChatRequest& req) override {
    const std::string body = request_body(req, config_.model).dump();
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

    std::string last_error;
    for (std::size_t attempt = 0;; ++attempt) {
      httplib::Client client(url_.scheme_host_port);
      client.set_connection_timeout(std::chrono::seconds(30));
      client.set_read_timeout(config_.timeout);
      client.set_write_timeout(config_.timeout);
      auto res = client.Post(url_.path, headers, body, "application/json");

      if (res && res->status == 200) return parse_completion(res->body);
      if (res && !is_transient_status(res->status)) {
        throw ProviderError("chat endpoint returned HTTP " + std::to_string(res->status) + ": " +
                                res->body.substr(0, 300),
                            res->status);
      }
      last_error = res ? "HTTP " + std::to_string(res->status) : "transport error: " + httplib::to_string(res.error());
      if (attempt >= config_.retry_delays.size()) break;
      sleeper_(config_.retry_delays[attempt]);
    }
    throw ProviderError("chat endpoint failed after " + std::to_string(config_.retry_delays.size() + 1) +
                        " attempts: " + last_error);
  }

 private:
  std::string parse_completion(const std::string& body) {
    json j = json::parse(body, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw ProviderError("chat endpoint returned invalid JSON");
    try {
      if (j.contains("usage") && j["usage"].is_object()) {
        add_tokens(j["usage"].value("prompt_tokens", 0ULL), j["usage"].value("completion_tokens", 0ULL));
      }
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw ProviderError(std::string("unexpected chat completion shape: ") + e.what());
    }
  }

  HttpProviderConfig config_;
  ParsedUrl url_;
  Sleeper sleeper_;
  std::string api_key_;
};

}  // namespace descevo
