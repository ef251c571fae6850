#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "uniref/checkpoint.hpp"
#include "uniref/cli.hpp"
#include "uniref/evaluate.hpp"
#include "uniref/plot.hpp"
#include "uniref/run_config.hpp"
#include "uniref/taskgen.hpp"

using namespace uniref;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ModelParams small_model() {
  ModelConfig c;
  c.layers = 1;
  c.width = 32;
  c.heads = 2;
  return init_params(c, 3);
}

int count(const std::string& hay, const std::string& needle) {
  int n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("evaluate: oracle ceiling, smoke run and aggregate consistency") {
  const auto data = training_samples(generate_dataset(31, 12));
  ProgrammaticJudge judge;
  EvalOptions opt;
  opt.sampling.steps = 4;
  const auto oracle = evaluate(std::nullopt, data, judge, opt);
  CHECK(oracle.overall.count == 12);
  CHECK(oracle.overall.recall == 1.0);
  CHECK(oracle.overall.mse == 0.0);
  CHECK(oracle.overall.mean_reward == doctest::Approx(10.0));

  const auto p = small_model();
  auto report = evaluate(PolicyView(p), data, judge, opt);
  CHECK(report.rows.size() == 12);
  CHECK(report.failures == 0);
  CHECK(std::isfinite(report.overall.mean_reward));
  CHECK(std::isfinite(report.overall.mse));
  const auto before = report;
  aggregate(report);
  CHECK(report.overall == before.overall);
  double sum = 0;
  for (const auto& r : report.rows) sum += r.mse;
  CHECK(report.overall.mse == doctest::Approx(sum / 12).epsilon(1e-12));
  std::size_t by_k = 0;
  for (const auto& [k, agg] : report.by_k) by_k += agg.count;
  CHECK(by_k == 12);
  CHECK(report.by_kind.count("edit") + report.by_kind.count("compose") == report.by_kind.size());

  const auto dir = fresh_dir("uniref_test_eval");
  write_report(report, dir.string());
  const auto j = json::parse(slurp(dir / "report.json"));
  CHECK(j.at("rows").size() == 12);
  CHECK(slurp(dir / "report.txt").find("all ") != std::string::npos);
  CHECK_THROWS_AS(evaluate(std::nullopt, {}, judge, opt), InvalidArgument);
}

TEST_CASE("plot: stage markers, phase annotation, malformed lines, empty input") {
  const auto dir = fresh_dir("uniref_test_plot");
  {
    std::ofstream sft(dir / "sft.jsonl");
    for (int s = 0; s < 2000; ++s)
      sft << json{{"step", s}, {"loss", 1.0 / (1 + s)}, {"lr", 1e-3}, {"budget", s < 700 ? 4096 : s < 1400 ? 9216 : 16384}, {"wall_ms", 1.0}}.dump() << "\n";
    std::ofstream rl(dir / "rl.jsonl");
    for (int s = 0; s < 20; ++s)
      rl << json{{"step", s}, {"phase", s < 10 ? "composition" : "editing"}, {"mean_reward", s * 0.1}, {"reward_std", 1.0},
                 {"clip_fraction", 0.1}, {"mean_kl", 0.0}, {"loss", 0.0}, {"wall_ms", 2.0}}.dump() << "\n";
  }
  const auto out = dir / "charts";
  const auto files = plot_metrics({(dir / "sft.jsonl").string(), (dir / "rl.jsonl").string()}, out.string());
  REQUIRE(files.size() == 3);
  const auto loss_svg = slurp(files[0]);
  CHECK(count(loss_svg, "class=\"marker\"") == 3);
  const auto reward_svg = slurp(files[1]);
  CHECK(reward_svg.find("editing") != std::string::npos);
  CHECK(count(reward_svg, "class=\"marker\"") == 2);
  CHECK(count(reward_svg, "class=\"series\"") == 2);
  CHECK(slurp(files[2]).find("mean KL") != std::string::npos);

  const auto again = plot_metrics({(dir / "sft.jsonl").string(), (dir / "rl.jsonl").string()}, (dir / "charts2").string());
  for (std::size_t i = 0; i < files.size(); ++i) CHECK(slurp(files[i]) == slurp(again[i]));

  std::ofstream(dir / "bad.jsonl") << "{\"step\":0,\"loss\":1,\"budget\":1}\n{oops\n";
  try {
    plot_metrics({(dir / "bad.jsonl").string()}, out.string());
    FAIL("expected rejection");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  std::ofstream(dir / "empty.jsonl") << "";
  CHECK(plot_metrics({(dir / "empty.jsonl").string()}, (dir / "none").string()).empty());
  CHECK_FALSE(fs::exists(dir / "none"));
}

TEST_CASE("run config: defaults, schema, overrides and rejection") {
  const auto d = default_config();
  const auto schema = config_schema();
  CHECK(schema.at("additionalProperties") == false);
  CHECK(schema.at("properties").at("sft").at("properties").at("steps").at("type") == "integer");
  const auto leaves = config_leaf_paths();
  CHECK(std::find(leaves.begin(), leaves.end(), "rl.group_size") != leaves.end());
  CHECK(std::find(leaves.begin(), leaves.end(), "judge.weights.quality") != leaves.end());

  auto cfg = load_run_config("", {"sft.steps=7", "rl.beta=0.1", "judge.kind=remote", "out_dir=123"});
  CHECK(cfg.sft().steps == 7);
  CHECK(cfg.rl().beta == 0.1);
  CHECK(cfg.out_dir() == "123");
  CHECK(cfg.rl().phases.size() == 1);
  CHECK(cfg.rl().phases[0].kind == TaskKind::Compose);
  CHECK(load_run_config("", {"rl.noise_level=2"}).rl().noise_level == 2.0);

  CHECK_THROWS_AS(load_run_config("", {"sft.stepz=7"}), ConfigError);
  CHECK_THROWS_AS(load_run_config("", {"sft.steps=1.5"}), ConfigError);
  CHECK_THROWS_AS(load_run_config("", {"sft.steps=\"x\""}), ConfigError);
  CHECK_THROWS_AS(load_run_config("", {"judge.kind=oracle"}), ConfigError);
  CHECK_THROWS_AS(load_run_config("", {"sample.mode=fast"}), ConfigError);
  CHECK_THROWS_AS(load_run_config("", {"rl.group_size=1"}), InvalidArgument);
  CHECK_THROWS_AS(load_run_config("", {"sft.schedule=[{\"step\":0}]"}), ConfigError);

  const auto dir = fresh_dir("uniref_test_config");
  std::ofstream(dir / "c.json") << R"({"seed": 5, "sft": {"steps": 3, "adam": {"beta2": 0.9}}})";
  cfg = load_run_config((dir / "c.json").string(), {"sft.steps=4"});
  CHECK(cfg.seed() == 5);
  CHECK(cfg.sft().steps == 4);
  CHECK(cfg.sft().adam.beta2 == 0.9);
  CHECK(cfg.sft().adam.beta1 == 0.9);
  std::ofstream(dir / "bad.json") << R"({"sft": {"unknown": 1}})";
  CHECK_THROWS_AS(load_run_config((dir / "bad.json").string(), {}), ConfigError);
  CHECK_THROWS_AS(cfg.require({"data.train"}), ConfigError);

  write_resolved_config(cfg, dir.string());
  CHECK(json::parse(slurp(dir / "config.json")) == cfg.doc);
}

TEST_CASE("canonicalization drops wall-clock fields only") {
  const std::string a = "{\"step\":0,\"loss\":1.5,\"wall_ms\":3.2}\n{\"step\":1,\"timestamp\":\"x\",\"loss\":1.0,\"wall_ms\":9}\n";
  const std::string b = "{\"step\":0,\"loss\":1.5,\"wall_ms\":7.0}\n{\"step\":1,\"timestamp\":\"y\",\"loss\":1.0,\"wall_ms\":1}\n";
  CHECK(canonicalize_metrics(a) == canonicalize_metrics(b));
  CHECK(canonicalize_metrics(a).find("loss") != std::string::npos);
  CHECK(canonicalize_metrics(a) != canonicalize_metrics("{\"step\":0,\"loss\":1.4}\n"));
}

TEST_CASE("cli end to end") {
  const auto dir = fresh_dir("uniref_test_cli");
  const auto data = (dir / "d").string();
  REQUIRE(run_cli({"gen-data", "--count", "12", "--seed", "7", "--out", data}) == 0);
  CHECK(json::parse(slurp(fs::path(data) / "manifest.json")).at("records").size() == 12);
  CHECK(json::parse(slurp(fs::path(data) / "config.json")).at("seed") == 7);
  CHECK_FALSE(fs::exists(fs::path(data) / ".uniref.lock"));

  std::ofstream(dir / "c.json") << R"({"sft": {"steps": 2}})";
  CHECK(run_cli({"train-sft", "--config", (dir / "c.json").string(), "--out", (dir / "s").string()}) != 0);

  const auto sft_dir = (dir / "s").string();
  const std::vector<std::string> train = {"train-sft", "--config", (dir / "c.json").string(), "--data", data,
                                          "--out", sft_dir, "--model.layers", "1", "--model.width=32",
                                          "--set", "model.heads=2", "--sft.batch_size", "2",
                                          "--set", "sft.schedule=[{\"step\":0,\"budget\":1024}]"};
  REQUIRE(run_cli(train) == 0);
  const auto ckpt = (fs::path(sft_dir) / "ckpt_2.bin").string();
  REQUIRE(fs::exists(ckpt));
  CHECK(load_checkpoint(ckpt).params.config().layers == 1);
  const auto resolved = json::parse(slurp(fs::path(sft_dir) / "config.json"));
  CHECK(resolved.at("sft").at("steps") == 2);
  CHECK(resolved.at("model").at("width") == 32);

  // A second writer is refused while the lock exists.
  std::ofstream(fs::path(sft_dir) / ".uniref.lock") << "1\n";
  CHECK(run_cli(train) != 0);
  fs::remove(fs::path(sft_dir) / ".uniref.lock");

  const std::string ref = fs::directory_iterator(fs::path(data) / "images")->path().string();
  const auto png = (dir / "out" / "x.png").string();
  CHECK(run_cli({"sample", "--ckpt", ckpt, "--refs", ref, ref, "--instruction",
                 "PLACE REF_1 CELL_TL PLACE REF_2 CELL_BR", "--out", png}) == 0);
  CHECK(read_png(png).height() == 32);

  CHECK(run_cli({"eval", "--ckpt", ckpt, "--data", data, "--out", (dir / "e").string(), "--sample.steps", "3"}) == 0);
  CHECK(json::parse(slurp(dir / "e" / "report.json")).at("rows").size() == 12);
  CHECK(run_cli({"eval", "--oracle", "--data", data, "--out", (dir / "o").string()}) == 0);
  CHECK(json::parse(slurp(dir / "o" / "report.json")).at("overall").at("recall") == 1.0);

  CHECK(run_cli({"train-rl", "--ckpt", ckpt, "--data", data, "--out", (dir / "r").string(), "--rl.group_size", "2",
                 "--rl.steps", "3", "--rl.prompts_per_step", "1", "--set",
                 "rl.phases=[{\"name\":\"composition\",\"kind\":\"compose\",\"steps\":2}]"}) == 0);
  CHECK(fs::exists(dir / "r" / "rl_ckpt_2.bin"));
  CHECK(fs::exists(dir / "r" / "rewards.jsonl"));

  CHECK(run_cli({"plot", "--metrics", (fs::path(sft_dir) / "metrics.jsonl").string(), (dir / "r" / "metrics.jsonl").string(),
                 "--out", (dir / "p").string()}) == 0);
  CHECK(fs::exists(dir / "p" / "config.json"));

  CHECK(run_cli({"frobnicate"}) != 0);
  CHECK(run_cli({"gen-data", "--count", "3", "--out", (dir / "x").string(), "--nonsense", "1"}) != 0);
  CHECK(run_cli({"gen-data", "--count", "three", "--out", (dir / "x").string()}) != 0);
  CHECK(run_cli({"--print-schema"}) == 0);
}
