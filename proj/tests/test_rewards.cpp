#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "uniref/remote_judge.hpp"
#include "uniref/rewards.hpp"
#include "uniref/taskgen.hpp"

// After Eigen: resolv.h, pulled in by httplib, defines a `_res` macro.
#include <httplib.h>

using namespace uniref;

namespace {

GeneratedSample two_element_composition() {
  SceneSpec spec;
  spec.kind = TaskKind::Compose;
  spec.elements = {{{Shape::Square, 10, 0}, 1, Cell::TopLeft}, {{Shape::Disc, 12, 2}, 2, Cell::BottomRight}};
  spec.directives = {{Action::Place, 1, Cell::TopLeft, {}, {}}, {Action::Place, 2, Cell::BottomRight, {}, {}}};
  return {render(spec, "c0"), spec};
}

void paint_cell(RasterImage& img, Cell cell, Rgb color) {
  const int r0 = (static_cast<int>(cell) / 2) * 16, c0 = (static_cast<int>(cell) % 2) * 16;
  for (int r = r0; r < r0 + 16; ++r)
    for (int c = c0; c < c0 + 16; ++c) img.set(r, c, color);
}

// Test server scripted by a handler; binds an ephemeral port.
struct ScriptedServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  explicit ScriptedServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server.Post("/v1/judge", handler);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~ScriptedServer() {
    server.stop();
    thread.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

RemoteJudgeConfig remote_config(const std::string& url) {
  RemoteJudgeConfig c;
  c.endpoint = url;
  c.timeout_seconds = 5;
  return c;
}

}  // namespace

TEST_CASE("total reward weighting") {
  CHECK(total_reward({10, 10, 10, 0, ""}, {}) == doctest::Approx(10.0));
  CHECK(total_reward({4, 9, 9, 0, ""}, {1, 0, 0}) == doctest::Approx(4.0));
  CHECK(total_reward({8, 4, 4, 0, ""}, {2, 1, 1}) == doctest::Approx(6.0));
  CHECK_THROWS_AS(total_reward({1, 1, 1, 0, ""}, {0, 0, 0}), InvalidArgument);
  CHECK_THROWS_AS(total_reward({1, 1, 1, 0, ""}, {-1, 1, 1}), InvalidArgument);
}

TEST_CASE("programmatic judge oracle cases") {
  const auto g = two_element_composition();
  const auto& s = g.sample;
  ProgrammaticJudge judge;
  const auto full = score(judge, s.references, s.instruction, s.target, {});
  CHECK(full.integration == 10.0);
  CHECK(full.consistency == 10.0);
  CHECK(full.quality == 10.0);
  CHECK(full.total == doctest::Approx(10.0));

  const RasterImage blank(32, 32, kBackground);
  CHECK(judge.judge(s.references, s.instruction, blank).integration == 0.0);
  CHECK(judge.recall(s.references, s.instruction, blank) == 0.0);

  RasterImage half = s.target;
  paint_cell(half, Cell::BottomRight, kBackground);
  CHECK(judge.judge(s.references, s.instruction, half).integration == doctest::Approx(5.0));
  CHECK(judge.recall(s.references, s.instruction, half) == doctest::Approx(0.5));

  const auto again = judge.judge(s.references, s.instruction, half);
  CHECK(again.consistency == judge.judge(s.references, s.instruction, half).consistency);
  CHECK_THROWS_AS(judge.judge(s.references, s.instruction, RasterImage(16, 16)), InvalidArgument);
}

TEST_CASE("quality never increases with noise amplitude") {
  const auto g = two_element_composition();
  const auto& s = g.sample;
  ProgrammaticJudge judge;
  Rng rng(1);
  std::vector<double> u(s.target.pixels().size());
  for (auto& x : u) x = 2 * uniform01(rng) - 1;
  double prev = judge.judge(s.references, s.instruction, s.target).quality;
  for (double amp : {10.0, 40.0, 90.0}) {
    RasterImage noisy = s.target;
    auto px = noisy.pixels();
    for (std::size_t i = 0; i < px.size(); ++i)
      px[i] = static_cast<std::uint8_t>(std::clamp(std::lround(px[i] + amp * u[i]), 0L, 255L));
    const double q = judge.judge(s.references, s.instruction, noisy).quality;
    CHECK(q <= prev);
    prev = q;
  }
}

TEST_CASE("edit removal counts as detected when the element is gone") {
  SceneSpec spec;
  spec.kind = TaskKind::Edit;
  spec.elements = {{{Shape::Square, 8, 0}, 1, Cell::TopLeft}, {{Shape::Triangle, 10, 3}, 1, Cell::TopRight}};
  spec.directives = {{Action::Remove, 1, Cell::TopRight, {}, {}}};
  const auto s = render(spec, "e0");
  ProgrammaticJudge judge;
  CHECK(judge.judge(s.references, s.instruction, s.target).integration == 10.0);
  CHECK(judge.judge(s.references, s.instruction, s.references[0]).integration == 0.0);
}

TEST_CASE("reward log lines round trip and concurrent appends stay whole") {
  const auto path = (std::filesystem::temp_directory_path() / "uniref_test_rewards.jsonl").string();
  std::filesystem::remove(path);
  RewardRecord rec{"run", 3, "c000001", 2, {8, 7, 9, 8, "why"}, 0.5, "programmatic", utc_timestamp()};
  CHECK(reward_record_from_json(to_json_line(rec)).scores.integration == 8);
  {
    RewardLog log(path);
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t)
      threads.emplace_back([&, t] {
        for (int i = 0; i < 50; ++i) {
          RewardRecord r = rec;
          r.group_index = t * 100 + i;
          r.advantage = std::nullopt;
          log.append(r);
        }
      });
    for (auto& th : threads) th.join();
  }
  std::ifstream in(path);
  int n = 0;
  for (std::string line; std::getline(in, line); ++n) {
    const auto back = reward_record_from_json(line);
    CHECK(back.run_id == "run");
    CHECK_FALSE(back.advantage.has_value());
  }
  CHECK(n == 200);
  const auto full = reward_record_from_json(to_json_line(rec));
  CHECK(full.prompt_id == rec.prompt_id);
  CHECK(full.step == 3);
  CHECK(full.advantage == rec.advantage);
  CHECK(full.timestamp == rec.timestamp);
  CHECK(full.scores.rationale == "why");
}

TEST_CASE("judge wire format") {
  const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 251, 252, 253};
  CHECK(base64_decode(base64_encode(bytes)) == bytes);
  CHECK(base64_encode(std::vector<std::uint8_t>{'M', 'a'}) == "TWE=");
  const auto g = two_element_composition();
  const auto req = nlohmann::json::parse(make_judge_request(g.sample.references, g.sample.instruction, g.sample.target, kRubricVersion));
  CHECK(req.at("references").size() == 2);
  CHECK(req.at("rubric_version") == kRubricVersion);
  CHECK(req.at("instruction").is_string());
  CHECK(decode_png(base64_decode(req.at("candidate").get<std::string>())) == g.sample.target);

  const auto ok = parse_judge_response(R"({"integration":8,"consistency":7,"quality":9,"rationale":"fine"})");
  CHECK(ok.integration == 8);
  CHECK(ok.rationale == "fine");
  CHECK_THROWS_AS(parse_judge_response(R"({"integration":11,"consistency":7,"quality":9})"), MalformedResponse);
  CHECK_THROWS_AS(parse_judge_response(R"({"integration":"8","consistency":7,"quality":9})"), MalformedResponse);
  CHECK_THROWS_AS(parse_judge_response("not json"), MalformedResponse);
}

TEST_CASE("remote judge against scripted endpoints") {
  const auto g = two_element_composition();
  const auto& s = g.sample;

  SUBCASE("fixed scores") {
    ScriptedServer srv([](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"integration":8,"consistency":7,"quality":9,"rationale":"ok"})", "application/json");
    });
    RemoteJudge judge(remote_config(srv.url()));
    const auto b = judge.judge(s.references, s.instruction, s.target);
    CHECK(b.integration == 8);
    CHECK(b.consistency == 7);
    CHECK(b.quality == 9);
    CHECK(judge.last_attempts() == 1);
  }
  SUBCASE("out of range score is malformed and carries the body") {
    ScriptedServer srv([](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"integration":11,"consistency":7,"quality":9})", "application/json");
    });
    RemoteJudge judge(remote_config(srv.url()));
    try {
      judge.judge(s.references, s.instruction, s.target);
      FAIL("expected MalformedResponse");
    } catch (const MalformedResponse& e) {
      CHECK(e.body().find("11") != std::string::npos);
    }
  }
  SUBCASE("two transient failures then success") {
    std::atomic<int> calls{0};
    ScriptedServer srv([&](const httplib::Request&, httplib::Response& res) {
      if (++calls <= 2) {
        res.status = 503;
        return;
      }
      res.set_content(R"({"integration":5,"consistency":6,"quality":7})", "application/json");
    });
    std::vector<double> waits;
    RemoteJudge judge(remote_config(srv.url()), [&](double s) { waits.push_back(s); });
    const auto b = judge.judge(s.references, s.instruction, s.target);
    CHECK(b.quality == 7);
    CHECK(judge.last_attempts() == 3);
    CHECK(waits == std::vector<double>{1.0, 2.0});
  }
  SUBCASE("exhausted retries") {
    ScriptedServer srv([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
    std::vector<double> waits;
    RemoteJudge judge(remote_config(srv.url()), [&](double s) { waits.push_back(s); });
    CHECK_THROWS_AS(judge.judge(s.references, s.instruction, s.target), JudgeUnavailable);
    CHECK(judge.last_attempts() == 5);
    CHECK(waits == std::vector<double>{1.0, 2.0, 4.0, 8.0});
  }
  SUBCASE("unreachable endpoint") {
    auto cfg = remote_config("http://127.0.0.1:1");
    cfg.retry.max_attempts = 2;
    RemoteJudge judge(cfg, [](double) {});
    CHECK_THROWS_AS(judge.judge(s.references, s.instruction, s.target), JudgeUnavailable);
  }
  CHECK_THROWS_AS(RemoteJudge(RemoteJudgeConfig{}), InvalidArgument);
}

TEST_CASE("mock server round trips programmatic scores and enforces the token") {
  MockJudgeServer mock("secret");
  const int port = mock.start();
  auto cfg = remote_config("http://127.0.0.1:" + std::to_string(port));
  cfg.api_key = "secret";
  RemoteJudge remote(cfg);
  ProgrammaticJudge local;
  const auto data = generate_dataset(5, 10);
  for (const auto& g : data) {
    const auto& s = g.sample;
    RasterImage degraded = s.target;
    paint_cell(degraded, Cell::TopLeft, kBackground);
    for (const RasterImage* img : std::vector<const RasterImage*>{&s.target, &degraded}) {
      const auto a = remote.judge(s.references, s.instruction, *img);
      const auto b = local.judge(s.references, s.instruction, *img);
      CHECK(a.integration == b.integration);
      CHECK(a.consistency == b.consistency);
      CHECK(a.quality == b.quality);
    }
  }
  CHECK(mock.requests_served() == 20);

  cfg.api_key = "wrong";
  RemoteJudge bad(cfg, [](double) {});
  CHECK_THROWS_AS(bad.judge(data[0].sample.references, data[0].sample.instruction, data[0].sample.target),
                  JudgeUnavailable);
  httplib::Client client("127.0.0.1", port);
  const auto rubric = client.Get("/v1/rubric");
  REQUIRE(rubric);
  CHECK(nlohmann::json::parse(rubric->body).at("version") == kRubricVersion);
  mock.stop();
}
