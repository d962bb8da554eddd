#pragma once

#include <chrono>
#include <cstdlib>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
// resolv.h macro, collides with Eigen parameter names
#undef _res
#include <nlohmann/json.hpp>

#include "maestro/core.hpp"

namespace maestro {

// OpenAI-compatible chat-completions endpoint.
struct EndpointSpec {
  std::string base_url;  // e.g. http://localhost:8000/v1
  std::string model_name;
  double temperature = 0.7;
  double nucleus_p = 0.95;
  int max_tokens = 512;
  std::chrono::milliseconds request_timeout{60000};
  int max_retries = 3;
  std::chrono::milliseconds backoff_base{500};

  void validate() const {
    if (base_url.empty()) throw Error("EndpointSpec: empty base_url");
    if (temperature < 0) throw Error("EndpointSpec: temperature must be >= 0");
    if (!(nucleus_p > 0 && nucleus_p <= 1)) throw Error("EndpointSpec: nucleus_p must be in (0,1]");
    if (max_tokens < 1) throw Error("EndpointSpec: max_tokens must be >= 1");
    if (max_retries < 0) throw Error("EndpointSpec: max_retries must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const EndpointSpec& e) {
  j = nlohmann::json{{"base_url", e.base_url},
                     {"model_name", e.model_name},
                     {"temperature", e.temperature},
                     {"nucleus_p", e.nucleus_p},
                     {"max_tokens", e.max_tokens},
                     {"request_timeout_ms", e.request_timeout.count()},
                     {"max_retries", e.max_retries},
                     {"backoff_base_ms", e.backoff_base.count()}};
}

inline void from_json(const nlohmann::json& j, EndpointSpec& e) {
  EndpointSpec d;
  e.base_url = j.value("base_url", d.base_url);
  e.model_name = j.value("model_name", d.model_name);
  e.temperature = j.value("temperature", d.temperature);
  e.nucleus_p = j.value("nucleus_p", d.nucleus_p);
  e.max_tokens = j.value("max_tokens", d.max_tokens);
  e.request_timeout = std::chrono::milliseconds(j.value("request_timeout_ms", d.request_timeout.count()));
  e.max_retries = j.value("max_retries", d.max_retries);
  e.backoff_base = std::chrono::milliseconds(j.value("backoff_base_ms", d.backoff_base.count()));
}

class TransportError : public Error {
 public:
  using Error::Error;
};

struct HttpResponse {
  int status = 0;  // 0: no response (connection failure, timeout)
  std::string body;
};

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post_json(const std::string& base_url, const std::string& path,
                                 const std::string& body, const HttpHeaders& headers,
                                 std::chrono::milliseconds timeout) const = 0;
};

class HttplibTransport final : public HttpTransport {
 public:
  HttpResponse post_json(const std::string& base_url, const std::string& path,
                         const std::string& body, const HttpHeaders& headers,
                         std::chrono::milliseconds timeout) const override {
    auto [origin, prefix] = split_url(base_url);
    httplib::Client client(origin);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(prefix + path, h, body, "application/json");
    if (!res) return {};
    return {res->status, res->body};
  }

  // "http://host:port/v1" -> {"http://host:port", "/v1"}
  static std::pair<std::string, std::string> split_url(const std::string& url) {
    const auto scheme = url.find("://");
    const auto host_start = scheme == std::string::npos ? 0 : scheme + 3;
    const auto slash = url.find('/', host_start);
    if (slash == std::string::npos) return {url, ""};
    std::string prefix = url.substr(slash);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, slash), prefix};
  }
};

struct ChatMessage {
  std::string role;
  std::string content;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline void real_sleep(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }

// Chat-completions client with exponential-backoff retries. Safe to call from
// concurrent tasks as long as the transport is.
class ChatClient {
 public:
  explicit ChatClient(EndpointSpec spec,
                      std::shared_ptr<const HttpTransport> transport = std::make_shared<HttplibTransport>(),
                      Sleeper sleeper = real_sleep)
      : spec_(std::move(spec)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {
    spec_.validate();
  }

  const EndpointSpec& spec() const noexcept { return spec_; }

  static nlohmann::json request_body(const EndpointSpec& spec, const std::vector<ChatMessage>& messages,
                                     double temperature) {
    nlohmann::json msgs = nlohmann::json::array();
    for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    return {{"model", spec.model_name},
            {"messages", msgs},
            {"temperature", temperature},
            {"top_p", spec.nucleus_p},
            {"max_tokens", spec.max_tokens}};
  }

  std::string complete(const std::vector<ChatMessage>& messages, double temperature) const {
    const std::string body = request_body(spec_, messages, temperature).dump();
    HttpHeaders headers;
    if (const char* key = std::getenv("MAESTRO_API_KEY"); key && *key)
      headers.emplace_back("Authorization", std::string("Bearer ") + key);

    std::string last_error;
    auto delay = spec_.backoff_base;
    for (int attempt = 0; attempt <= spec_.max_retries; ++attempt) {
      if (attempt > 0) {
        sleeper_(delay);
        delay *= 2;
      }
      const auto res = transport_->post_json(spec_.base_url, "/chat/completions", body, headers,
                                             spec_.request_timeout);
      if (res.status == 0) {
        last_error = "no response";
        continue;
      }
      if (res.status != 200) {
        last_error = "HTTP " + std::to_string(res.status);
        if (res.status == 429 || res.status >= 500) continue;
        break;
      }
      try {
        const auto j = nlohmann::json::parse(res.body);
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const std::exception& e) {
        last_error = std::string("malformed response: ") + e.what();
      }
    }
    throw TransportError("chat completion failed after " + std::to_string(spec_.max_retries + 1) +
                         " attempts: " + last_error);
  }

 private:
  EndpointSpec spec_;
  std::shared_ptr<const HttpTransport> transport_;
  Sleeper sleeper_;
};

}  // namespace maestro
