#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <semaphore>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "uniref/rewards.hpp"

namespace uniref {

inline constexpr const char* kRubricVersion = "uniref-rubric-1";

/// Original rubric text served with the mock judge.
const std::string& rubric_text();

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

struct RetryPolicy {
  double base_seconds = 1.0;
  double factor = 2.0;
  int max_attempts = 5;
};

struct RemoteJudgeConfig {
  std::string endpoint;  // e.g. http://127.0.0.1:8080
  std::string api_key;
  RetryPolicy retry;
  int max_in_flight = 4;
  double timeout_seconds = 30.0;
  std::string rubric_version = kRubricVersion;
};

/// Endpoint from JUDGE_URL and bearer token from JUDGE_API_KEY.
RemoteJudgeConfig remote_config_from_env();

std::string make_judge_request(const std::vector<RasterImage>& references, const Instruction& instruction,
                               const RasterImage& candidate, const std::string& rubric_version);
/// Parse and validate a response body; throws MalformedResponse carrying the body.
RewardBreakdown parse_judge_response(const std::string& body);

/// Client for the judge wire protocol: POST {endpoint}/v1/judge.
class RemoteJudge : public Judge {
 public:
  using Sleeper = std::function<void(double seconds)>;

  explicit RemoteJudge(RemoteJudgeConfig config, Sleeper sleeper = {});

  RewardBreakdown judge(const std::vector<RasterImage>& references, const Instruction& instruction,
                        const RasterImage& candidate) override;
  std::string kind() const override { return "remote"; }

  /// Attempts used by the most recent completed call on this judge.
  int last_attempts() const { return last_attempts_.load(); }

 private:
  RemoteJudgeConfig config_;
  Sleeper sleeper_;
  std::string host_;
  std::string path_;
  std::unique_ptr<std::counting_semaphore<1024>> slots_;
  std::atomic<int> last_attempts_{0};
};

/// HTTP server speaking the judge protocol, scoring with the programmatic judge.
class MockJudgeServer {
 public:
  explicit MockJudgeServer(std::string api_key = {}, JudgeThresholds thresholds = {});
  ~MockJudgeServer();
  MockJudgeServer(const MockJudgeServer&) = delete;
  MockJudgeServer& operator=(const MockJudgeServer&) = delete;

  /// Serve on a background thread; port 0 picks a free port. Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Serve on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();
  std::int64_t requests_served() const { return served_.load(); }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
  std::atomic<std::int64_t> served_{0};
};

}  // namespace uniref
