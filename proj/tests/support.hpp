#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "maestro/chat_client.hpp"

namespace maestro::test_support {

// Scripted transport: replies are returned in order, the last one repeats.
class ScriptedTransport final : public HttpTransport {
 public:
  explicit ScriptedTransport(std::vector<HttpResponse> replies) : replies_(std::move(replies)) {}

  HttpResponse post_json(const std::string&, const std::string& path, const std::string& body,
                         const HttpHeaders&, std::chrono::milliseconds) const override {
    std::lock_guard lock(mu_);
    paths_.push_back(path);
    bodies_.push_back(body);
    const auto i = std::min(calls_++, replies_.size() - 1);
    return replies_[i];
  }

  std::size_t calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }
  std::vector<std::string> bodies() const {
    std::lock_guard lock(mu_);
    return bodies_;
  }

 private:
  std::vector<HttpResponse> replies_;
  mutable std::mutex mu_;
  mutable std::size_t calls_ = 0;
  mutable std::vector<std::string> paths_;
  mutable std::vector<std::string> bodies_;
};

inline HttpResponse chat_reply(const std::string& content) {
  nlohmann::json j = {{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
  return {200, j.dump()};
}

inline void no_sleep(std::chrono::milliseconds) {}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("maestro-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

}  // namespace maestro::test_support
