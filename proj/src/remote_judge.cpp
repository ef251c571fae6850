#include "uniref/remote_judge.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>

#include <httplib.h>
#include <json.hpp>

namespace uniref {
namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string encode_image(const RasterImage& img) { return base64_encode(encode_png(img)); }

RasterImage decode_image(const std::string& b64) {
  const auto bytes = base64_decode(b64);
  return decode_png(bytes);
}

double score_field(const nlohmann::json& j, const char* key, const std::string& body) {
  if (!j.contains(key)) throw MalformedResponse(std::string("judge response lacks '") + key + "'", body);
  const auto& v = j.at(key);
  if (!v.is_number()) throw MalformedResponse(std::string("judge score '") + key + "' is not a number", body);
  const double x = v.get<double>();
  if (!std::isfinite(x) || x < 0.0 || x > 10.0)
    throw MalformedResponse(std::string("judge score '") + key + "' outside [0, 10]", body);
  return x;
}

}  // namespace

const std::string& rubric_text() {
  static const std::string text =
      "Score the candidate from 0 to 10 on three axes. Integration: every instructed element appears in its "
      "assigned cell. Consistency: each element keeps the color and shape it has in its reference. Quality: "
      "everything outside the elements is clean background. This rubric is original to this project.";
  return text;
}

std::string base64_encode(std::span<const std::uint8_t> in) {
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t n = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  if (i < in.size()) {
    std::uint32_t n = in[i] << 16;
    if (i + 1 < in.size()) n |= in[i + 1] << 8;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += i + 1 < in.size() ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw InvalidArgument("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      if (pad > 0 || (v[k] = value(c)) < 0) throw InvalidArgument("invalid base64 character");
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((n >> 8) & 255));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n & 255));
  }
  return out;
}

RemoteJudgeConfig remote_config_from_env() {
  RemoteJudgeConfig c;
  if (const char* url = std::getenv("JUDGE_URL")) c.endpoint = url;
  if (const char* key = std::getenv("JUDGE_API_KEY")) c.api_key = key;
  return c;
}

std::string make_judge_request(const std::vector<RasterImage>& refs, const Instruction& instruction,
                               const RasterImage& candidate, const std::string& rubric_version) {
  nlohmann::ordered_json j;
  j["instruction"] = instruction.text();
  j["references"] = nlohmann::ordered_json::array();
  for (const auto& r : refs) j["references"].push_back(encode_image(r));
  j["candidate"] = encode_image(candidate);
  j["rubric_version"] = rubric_version;
  return j.dump();
}

RewardBreakdown parse_judge_response(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    throw MalformedResponse("judge response is not valid JSON", body);
  }
  if (!j.is_object()) throw MalformedResponse("judge response is not a JSON object", body);
  RewardBreakdown b;
  b.integration = score_field(j, "integration", body);
  b.consistency = score_field(j, "consistency", body);
  b.quality = score_field(j, "quality", body);
  if (j.contains("rationale")) {
    if (!j.at("rationale").is_string()) throw MalformedResponse("judge rationale is not a string", body);
    b.rationale = j.at("rationale").get<std::string>();
  }
  return b;
}

RemoteJudge::RemoteJudge(RemoteJudgeConfig config, Sleeper sleeper)
    : config_(std::move(config)), sleeper_(std::move(sleeper)) {
  if (config_.endpoint.empty()) throw InvalidArgument("remote judge endpoint is not configured (set JUDGE_URL)");
  if (config_.retry.max_attempts < 1) throw InvalidArgument("retry policy needs at least one attempt");
  if (config_.max_in_flight < 1 || config_.max_in_flight > 1024)
    throw InvalidArgument("max_in_flight must lie in [1, 1024]");
  const auto scheme = config_.endpoint.find("://");
  const auto path_start = config_.endpoint.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  host_ = config_.endpoint.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : config_.endpoint.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  path_ = prefix + "/v1/judge";
  slots_ = std::make_unique<std::counting_semaphore<1024>>(config_.max_in_flight);
  if (!sleeper_)
    sleeper_ = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
}

RewardBreakdown RemoteJudge::judge(const std::vector<RasterImage>& refs, const Instruction& instruction,
                                   const RasterImage& candidate) {
  const std::string body = make_judge_request(refs, instruction, candidate, config_.rubric_version);
  slots_->acquire();
  struct Release {
    std::counting_semaphore<1024>* s;
    ~Release() { s->release(); }
  } release{slots_.get()};

  httplib::Client client(host_);
  const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  if (!config_.api_key.empty()) client.set_bearer_token_auth(config_.api_key);

  std::string last_error;
  double wait = config_.retry.base_seconds;
  for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
    auto res = client.Post(path_, body, "application/json");
    if (res && res->status >= 200 && res->status < 300) {
      last_attempts_ = attempt;
      return parse_judge_response(res->body);
    }
    if (res && res->status < 500) {
      last_attempts_ = attempt;
      throw JudgeUnavailable("judge rejected the request with HTTP " + std::to_string(res->status) + ": " +
                             res->body);
    }
    last_error = res ? "HTTP " + std::to_string(res->status) : "transport error: " + httplib::to_string(res.error());
    if (attempt < config_.retry.max_attempts) {
      sleeper_(wait);
      wait *= config_.retry.factor;
    }
  }
  last_attempts_ = config_.retry.max_attempts;
  throw JudgeUnavailable("judge unavailable after " + std::to_string(config_.retry.max_attempts) +
                         " attempts; last error: " + last_error);
}

struct MockJudgeServer::Impl {
  httplib::Server server;
  std::string api_key;
  ProgrammaticJudge judge;
};

MockJudgeServer::MockJudgeServer(std::string api_key, JudgeThresholds thresholds)
    : impl_(std::make_unique<Impl>()) {
  impl_->api_key = std::move(api_key);
  impl_->judge = ProgrammaticJudge(thresholds);
  impl_->server.Post("/v1/judge", [this](const httplib::Request& req, httplib::Response& res) {
    if (!impl_->api_key.empty() && req.get_header_value("Authorization") != "Bearer " + impl_->api_key) {
      res.status = 401;
      res.set_content(R"({"error":"unauthorized"})", "application/json");
      return;
    }
    try {
      const auto j = nlohmann::json::parse(req.body);
      std::vector<RasterImage> refs;
      for (const auto& r : j.at("references")) refs.push_back(decode_image(r.get<std::string>()));
      const Instruction ins = parse_instruction(j.at("instruction").get<std::string>());
      const RasterImage cand = decode_image(j.at("candidate").get<std::string>());
      const RewardBreakdown b = ProgrammaticJudge(impl_->judge).judge(refs, ins, cand);
      nlohmann::ordered_json out;
      out["integration"] = b.integration;
      out["consistency"] = b.consistency;
      out["quality"] = b.quality;
      out["rationale"] = "programmatic mock judge, rubric " + j.value("rubric_version", std::string(kRubricVersion));
      res.set_content(out.dump(), "application/json");
      ++served_;
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
    }
  });
  impl_->server.Get("/v1/rubric", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(nlohmann::json{{"version", kRubricVersion}, {"text", rubric_text()}}.dump(), "application/json");
  });
}

MockJudgeServer::~MockJudgeServer() { stop(); }

int MockJudgeServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw IoError("mock judge cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void MockJudgeServer::run(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw IoError("mock judge cannot listen on " + host + ":" + std::to_string(port));
}

void MockJudgeServer::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace uniref
