#pragma once

// Chat-completion-style HTTP client for real-LLM expansion generation, with
// retries, typed failures, and a bounded-parallelism batch helper that
// restores input order before anything is persisted.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "expandr/expansion.hpp"
#include "httplib.h"
#include "json.hpp"

namespace expandr::external {

struct EndpointConfig {
  std::string url;  // e.g. http://127.0.0.1:8089/v1/chat/completions
  std::string model = "default";
  double timeout_s = 30.0;
  int max_retries = 2;
  int in_flight = 4;
  std::string api_key_env = "EXPANDR_API_KEY";
};

enum class ExternalErrorKind { kHttpStatus, kTimeout, kMalformedBody, kConnection };

struct ExternalError : std::runtime_error {
  ExternalErrorKind kind;
  ExternalError(ExternalErrorKind k, const std::string& what)
      : std::runtime_error(what), kind(k) {}
};

namespace detail {

struct SplitUrl {
  std::string base;  // scheme://host:port
  std::string path;  // /path or /
};

inline SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw std::invalid_argument("endpoint url must include a scheme: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace detail

/// One chat-completion request; retried up to max_retries extra attempts.
/// `on_retry` fires once per retry so callers can count or log them.
inline std::string external_generate(const EndpointConfig& config,
                                     const std::string& prompt, double temperature,
                                     const std::function<void()>& on_retry = {}) {
  const auto url = detail::split_url(config.url);
  nlohmann::json body;
  body["model"] = config.model;
  body["messages"] = nlohmann::json::array({
      nlohmann::json{{"role", "user"}, {"content", prompt}},
  });
  body["temperature"] = temperature;
  const std::string payload = body.dump();

  httplib::Headers headers;
  if (const char* key = std::getenv(config.api_key_env.c_str());
      key != nullptr && key[0] != '\0') {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  std::optional<ExternalError> last_error;
  for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
    if (attempt > 0) {
      if (on_retry) on_retry();
      std::this_thread::sleep_for(std::chrono::milliseconds(20 * attempt));
    }
    httplib::Client client(url.base);
    const auto timeout_ms =
        std::chrono::milliseconds(static_cast<long long>(config.timeout_s * 1000.0));
    client.set_connection_timeout(timeout_ms);
    client.set_read_timeout(timeout_ms);
    client.set_write_timeout(timeout_ms);

    auto result = client.Post(url.path, headers, payload, "application/json");
    if (!result) {
      const auto err = result.error();
      const auto kind = (err == httplib::Error::ConnectionTimeout ||
                         err == httplib::Error::Read || err == httplib::Error::Write)
                            ? ExternalErrorKind::kTimeout
                            : ExternalErrorKind::kConnection;
      last_error = ExternalError(kind, "request to " + config.url +
                                           " failed: " + httplib::to_string(err));
      continue;
    }
    if (result->status < 200 || result->status >= 300) {
      last_error = ExternalError(ExternalErrorKind::kHttpStatus,
                                 "endpoint returned HTTP " +
                                     std::to_string(result->status));
      continue;
    }
    nlohmann::json response = nlohmann::json::parse(result->body, nullptr, false);
    if (response.is_discarded() || !response.contains("choices") ||
        !response["choices"].is_array() || response["choices"].empty() ||
        !response["choices"][0].contains("message") ||
        !response["choices"][0]["message"].contains("content") ||
        !response["choices"][0]["message"]["content"].is_string()) {
      // Malformed payloads are not transient; fail immediately.
      throw ExternalError(ExternalErrorKind::kMalformedBody,
                          "response body is not a chat completion");
    }
    return response["choices"][0]["message"]["content"].get<std::string>();
  }
  throw *last_error;
}

class ExternalGenerator : public expansion::Generator {
 public:
  explicit ExternalGenerator(EndpointConfig config) : config_(std::move(config)) {}

  std::string generate(const expansion::GenRequest& request) override {
    return external_generate(config_, request.prompt, request.temperature,
                             [this] { retries_.fetch_add(1); });
  }

  std::string source_name() const override { return "external"; }

  int retries() const { return retries_.load(); }

 private:
  EndpointConfig config_;
  std::atomic<int> retries_{0};
};

/// Per-item outcome of a parallel generation batch.
template <class T>
struct BatchResult {
  std::optional<T> value;
  std::string error;  // empty on success

  bool ok() const { return value.has_value(); }
};

/// Run `work(i)` for i in [0, n) with at most `in_flight` worker threads.
/// Results land at their input index, so downstream files stay in input
/// order no matter how responses interleave.
template <class T>
std::vector<BatchResult<T>> run_bounded(std::size_t n, int in_flight,
                                        const std::function<T(std::size_t)>& work) {
  std::vector<BatchResult<T>> results(n);
  if (n == 0) return results;
  const int workers = std::max(1, std::min<int>(in_flight, static_cast<int>(n)));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        results[i].value = work(i);
      } catch (const std::exception& e) {
        results[i].error = e.what();
      }
    }
  };
  if (workers == 1) {
    worker();
    return results;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (int w = 0; w < workers; ++w) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  return results;
}

}  // namespace expandr::external
