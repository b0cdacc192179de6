#pragma once

// LLM providers: the interface plus the in-process and replay implementations.
// The HTTP client lives in http_provider.hpp so that only its users pull in
// cpp-httplib.

#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "descevo/error.hpp"
#include "descevo/prompts.hpp"
#include "descevo/rng.hpp"
#include "descevo/types.hpp"

namespace descevo {

struct Usage {
  std::uint64_t calls = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;

  friend bool operator==(const Usage&, const Usage&) = default;
};

inline void to_json(json& j, const Usage& u) {
  j = {{"calls", u.calls}, {"prompt_tokens", u.prompt_tokens}, {"completion_tokens", u.completion_tokens}};
}

/// Digest that keys replay scripts: SHA-256 of system, 0x1F, user.
inline std::string request_digest(const ChatRequest& req) {
  std::string bytes;
  bytes.reserve(req.system.size() + req.user.size() + 1);
  bytes += req.system;
  bytes.push_back('\x1f');
  bytes += req.user;
  return sha256_hex(bytes);
}

/// Source of chat completions. Implementations must tolerate concurrent complete() calls.
class LlmProvider {
 public:
  virtual ~LlmProvider() = default;

  std::string complete(const ChatRequest& req) {
    calls_.fetch_add(1, std::memory_order_relaxed);
    return do_complete(req);
  }

  Usage usage() const noexcept {
    return {calls_.load(), prompt_tokens_.load(), completion_tokens_.load()};
  }

 protected:
  virtual std::string do_complete(const ChatRequest& req) = 0;

  void add_tokens(std::uint64_t prompt, std::uint64_t completion) noexcept {
    prompt_tokens_.fetch_add(prompt, std::memory_order_relaxed);
    completion_tokens_.fetch_add(completion, std::memory_order_relaxed);
  }

 private:
  std::atomic<std::uint64_t> calls_{0};
  std::atomic<std::uint64_t> prompt_tokens_{0};
  std::atomic<std::uint64_t> completion_tokens_{0};
};

/// Pops queued responses in call order.
class ScriptedProvider final : public LlmProvider {
 public:
  ScriptedProvider() = default;
  explicit ScriptedProvider(std::vector<std::string> responses) : queue_(responses.begin(), responses.end()) {}

  void push(std::string response) {
    std::lock_guard lock(mutex_);
    queue_.push_back(std::move(response));
  }

  std::size_t pending() const {
    std::lock_guard lock(mutex_);
    return queue_.size();
  }

 protected:
  std::string do_complete(const ChatRequest&) override {
    std::lock_guard lock(mutex_);
    if (queue_.empty()) throw ProviderError("scripted provider has no responses left");
    auto r = std::move(queue_.front());
    queue_.pop_front();
    return r;
  }

 private:
  mutable std::mutex mutex_;
  std::deque<std::string> queue_;
};

/// Answers with a callable; used by simulations and tests that react to the request.
class FunctionProvider final : public LlmProvider {
 public:
  using Fn = std::function<std::string(const ChatRequest&)>;

  explicit FunctionProvider(Fn fn) : fn_(std::move(fn)) {}

 protected:
  std::string do_complete(const ChatRequest& req) override { return fn_(req); }

 private:
  Fn fn_;
};

/// Looks responses up by request digest.
///
/// Script format: a JSON object mapping hex digest to either a response string
/// or an array of responses; an array is indexed by the request's variant
/// (modulo its length), so K identical mutation prompts can replay K samples.
class ReplayProvider final : public LlmProvider {
 public:
  explicit ReplayProvider(const json& script) {
    if (!script.is_object()) throw ConfigError("replay script must be a JSON object");
    for (const auto& [digest, value] : script.items()) {
      std::vector<std::string> responses;
      if (value.is_string()) {
        responses.push_back(value.get<std::string>());
      } else if (value.is_array() && !value.empty()) {
        for (const auto& r : value) {
          if (!r.is_string()) throw ConfigError("replay responses must be strings (digest " + digest + ")");
          responses.push_back(r.get<std::string>());
        }
      } else {
        throw ConfigError("replay entry " + digest + " must be a string or a non-empty array");
      }
      responses_.emplace(digest, std::move(responses));
    }
  }

  static json read_script(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("replay script not found: " + path.string());
    json j = json::parse(read_text_file(path), nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw ConfigError("replay script is not valid JSON: " + path.string());
    return j;
  }

  static ReplayProvider load(const std::filesystem::path& path) { return ReplayProvider(read_script(path)); }

  std::size_t size() const noexcept { return responses_.size(); }

 protected:
  std::string do_complete(const ChatRequest& req) override {
    const auto digest = request_digest(req);
    auto it = responses_.find(digest);
    if (it == responses_.end()) throw ProviderError("replay miss for request digest " + digest);
    return it->second[req.tag.variant % it->second.size()];
  }

 private:
  std::map<std::string, std::vector<std::string>> responses_;  // read-only after construction
};

/// Forwards to another provider and records every answer as a replay script.
class RecordingProvider final : public LlmProvider {
 public:
  explicit RecordingProvider(LlmProvider& inner) : inner_(inner) {}

  json script() const {
    std::lock_guard lock(mutex_);
    json j = json::object();
    for (const auto& [digest, by_variant] : recorded_) {
      if (by_variant.size() == 1 && by_variant.count(0)) {
        j[digest] = by_variant.at(0);
        continue;
      }
      json arr = json::array();
      const std::size_t n = by_variant.rbegin()->first + 1;
      for (std::size_t v = 0; v < n; ++v) {
        auto it = by_variant.find(v);
        arr.push_back(it != by_variant.end() ? it->second : by_variant.begin()->second);
      }
      j[digest] = std::move(arr);
    }
    return j;
  }

  void save(const std::filesystem::path& path) const { write_text_file(path, script().dump(2) + "\n"); }

 protected:
  std::string do_complete(const ChatRequest& req) override {
    auto response = inner_.complete(req);
    std::lock_guard lock(mutex_);
    recorded_[request_digest(req)].insert_or_assign(req.tag.variant, response);
    return response;
  }

 private:
  LlmProvider& inner_;
  mutable std::mutex mutex_;
  std::map<std::string, std::map<std::size_t, std::string>> recorded_;
};

}  // namespace descevo
