#include "uniref/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "uniref/checkpoint.hpp"
#include "uniref/evaluate.hpp"
#include "uniref/plot.hpp"
#include "uniref/remote_judge.hpp"
#include "uniref/run_config.hpp"
#include "uniref/taskgen.hpp"

namespace uniref {
namespace fs = std::filesystem;

namespace {

/// Exclusive marker file; a second writer into the same directory fails fast.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = (fs::path(dir) / ".uniref.lock").string();
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw IoError("output directory " + dir + " is locked by another run (remove " + path_ + " if stale)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::string> flags;  // named flags, translated to overrides; applied last
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_file, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.sets, "Override a config leaf, e.g. --set sft.steps=100")->take_all();
  sub->allow_extras();
  sub->footer("Every config leaf is also accepted as a dotted flag, e.g. --rl.group_size 8.");
}

// Named flag -> config override, only when the user supplied it.
template <typename T>
void bind_flag(CLI::App* sub, Common& c, const std::string& flag, const std::string& key, const std::string& help) {
  auto value = std::make_shared<T>();
  sub->add_option(flag, *value, help)->each([&c, key, value](const std::string& v) { c.flags.push_back(key + "=" + v); });
}

// Unrecognized `--a.b=v` / `--a.b v` arguments become overrides when they name a config leaf.
std::vector<std::string> dotted_overrides(const std::vector<std::string>& extras) {
  const auto leaves = config_leaf_paths();
  std::vector<std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw CLI::ExtrasError({a});
    std::string key = a.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("flag " + a + " needs a value");
      value = extras[++i];
    }
    if (std::find(leaves.begin(), leaves.end(), key) == leaves.end()) throw CLI::ExtrasError({a});
    out.push_back(key + "=" + value);
  }
  return out;
}

RunConfig resolve(const Common& c, CLI::App* sub) {
  std::vector<std::string> overrides = c.sets;
  for (auto& o : dotted_overrides(sub->remaining())) overrides.push_back(std::move(o));
  overrides.insert(overrides.end(), c.flags.begin(), c.flags.end());
  return load_run_config(c.config_file, overrides);
}

std::unique_ptr<Judge> make_judge(const RunConfig& cfg) {
  if (cfg.doc.at("judge").at("kind").get<std::string>() == "remote") {
    auto rc = cfg.remote_judge();
    if (rc.endpoint.empty()) throw ConfigError("judge.kind is remote but no endpoint is set (judge.endpoint or JUDGE_URL)");
    return std::make_unique<RemoteJudge>(rc);
  }
  return std::make_unique<ProgrammaticJudge>(cfg.thresholds());
}

ModelParams initial_params(const RunConfig& cfg) {
  const auto init = cfg.doc.at("model").at("init").get<std::string>();
  if (!init.empty()) return load_checkpoint(init).params;
  return init_params(cfg.model(), derive_seed(cfg.seed(), 0x1417));
}

std::vector<TrainingSample> load_samples(const std::string& dir) { return training_samples(read_dataset(dir)); }

int cmd_gen_data(const RunConfig& cfg) {
  cfg.require({"out_dir"});
  const int count = cfg.doc.at("gen").at("count").get<int>();
  if (count <= 0) throw ConfigError("gen.count must be positive");
  DirLock lock(cfg.out_dir());
  const auto samples = generate_dataset(cfg.seed(), count, cfg.gen());
  const auto manifest = write_dataset(samples, cfg.out_dir(), cfg.doc.at("gen").at("patch_pixels").get<int>());
  write_resolved_config(cfg, cfg.out_dir());
  std::cout << "wrote " << manifest.ids.size() << " samples to " << cfg.out_dir() << "\n";
  return 0;
}

int cmd_train_sft(const RunConfig& cfg) {
  cfg.require({"data.train", "out_dir"});
  DirLock lock(cfg.out_dir());
  write_resolved_config(cfg, cfg.out_dir());
  const auto data = load_samples(cfg.data_path("train"));
  const auto sft = cfg.sft();
  const auto result = train_sft(sft, data, initial_params(cfg), [&](const SftMetrics& m) {
    if (m.step % 100 == 0 || m.step + 1 == sft.steps)
      std::cerr << "step " << m.step << " loss " << m.loss << " budget " << m.budget << "\n";
  });
  std::cout << "final checkpoint " << (result.checkpoints.empty() ? "(none)" : result.checkpoints.back()) << "\n";
  return 0;
}

int cmd_train_rl(const RunConfig& cfg) {
  cfg.require({"data.prompts", "model.init", "out_dir"});
  DirLock lock(cfg.out_dir());
  write_resolved_config(cfg, cfg.out_dir());
  const auto rl = cfg.rl();
  const auto all = load_samples(cfg.data_path("prompts"));
  std::vector<std::vector<TrainingSample>> prompts;
  for (const auto& phase : rl.phases) {
    std::vector<TrainingSample> subset;
    std::copy_if(all.begin(), all.end(), std::back_inserter(subset),
                 [&](const TrainingSample& s) { return s.kind == phase.kind; });
    if (subset.empty()) throw InvalidArgument("prompt set has no " + kind_name(phase.kind) + " samples for phase " + phase.name);
    prompts.push_back(std::move(subset));
  }
  auto judge = make_judge(cfg);
  const auto base = load_checkpoint(cfg.doc.at("model").at("init").get<std::string>()).params;
  const auto result = train_rl(rl, prompts, base, *judge, [](const RlMetrics& m) {
    std::cerr << "step " << m.step << " [" << m.phase << "] reward " << m.mean_reward
              << (m.skipped ? " (skipped)" : "") << "\n";
  });
  std::cout << "final checkpoint " << (result.checkpoints.empty() ? "(none)" : result.checkpoints.back()) << "\n";
  return 0;
}

int cmd_sample(const RunConfig& cfg, const std::vector<std::string>& refs, const std::string& instruction,
               const std::string& out_png) {
  cfg.require({"model.init"});
  if (refs.empty()) throw InvalidArgument("at least one --refs image is required");
  const fs::path out(out_png);
  const std::string dir = out.parent_path().empty() ? "." : out.parent_path().string();
  DirLock lock(dir);
  std::vector<RasterImage> images;
  for (const auto& r : refs) images.push_back(read_png(r));
  const auto instr = parse_instruction(instruction);
  const auto params = load_checkpoint(cfg.doc.at("model").at("init").get<std::string>()).params;
  Rng rng(cfg.seed());
  const auto result = sample(params, images, instr, cfg.sample(), rng);
  write_png(result.image, out_png);
  std::ofstream(fs::path(dir) / (out.stem().string() + ".config.json")) << cfg.doc.dump(2) << "\n";
  std::cout << "wrote " << out_png << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, bool oracle) {
  cfg.require({"data.eval", "out_dir"});
  if (!oracle) cfg.require({"model.init"});
  DirLock lock(cfg.out_dir());
  write_resolved_config(cfg, cfg.out_dir());
  const auto data = load_samples(cfg.data_path("eval"));
  auto judge = make_judge(cfg);
  std::optional<ModelParams> params;
  std::optional<PolicyView> policy;
  if (!oracle) {
    params = load_checkpoint(cfg.doc.at("model").at("init").get<std::string>()).params;
    policy.emplace(*params);
  }
  const auto report = evaluate(policy, data, *judge, cfg.eval());
  write_report(report, cfg.out_dir());
  std::cout << report_table(report);
  return 0;
}

int cmd_plot(const RunConfig& cfg, const std::vector<std::string>& metrics) {
  cfg.require({"out_dir"});
  DirLock lock(cfg.out_dir());
  write_resolved_config(cfg, cfg.out_dir());
  for (const auto& p : plot_metrics(metrics, cfg.out_dir())) std::cout << "wrote " << p << "\n";
  return 0;
}

int cmd_judge_mock(const RunConfig& cfg, const std::string& host, int port, const std::string& api_key) {
  std::optional<DirLock> lock;
  if (!cfg.out_dir().empty()) {
    lock.emplace(cfg.out_dir());
    write_resolved_config(cfg, cfg.out_dir());
  }
  MockJudgeServer server(api_key, cfg.thresholds());
  std::cout << "mock judge listening on " << host << ":" << port << std::endl;
  server.run(host, port);
  return 0;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

std::string canonicalize_metrics(const std::string& jsonl) {
  std::istringstream in(jsonl);
  std::string out, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    j.erase("wall_ms");
    j.erase("timestamp");
    out += j.dump() + "\n";
  }
  return out;
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"uniref: multi-reference generation lab", "uniref"};
  app.require_subcommand(1);
  bool print_schema = false;
  app.add_flag("--print-schema", print_schema, "Print the config JSON Schema and exit");

  Common gen_c, sft_c, rl_c, sample_c, eval_c, plot_c, mock_c;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_common(gen, gen_c);
  bind_flag<int>(gen, gen_c, "--count", "gen.count", "Number of samples");
  bind_flag<std::uint64_t>(gen, gen_c, "--seed", "seed", "Generation seed");
  bind_flag<std::string>(gen, gen_c, "--out", "out_dir", "Output directory");

  auto* sft = app.add_subcommand("train-sft", "Supervised flow-matching training");
  add_common(sft, sft_c);
  bind_flag<std::string>(sft, sft_c, "--data", "data.train", "Training dataset directory");
  bind_flag<std::string>(sft, sft_c, "--out", "out_dir", "Output directory");
  bind_flag<std::uint64_t>(sft, sft_c, "--seed", "seed", "Seed");
  bind_flag<std::int64_t>(sft, sft_c, "--steps", "sft.steps", "Optimization steps");
  bind_flag<int>(sft, sft_c, "--workers", "workers", "Worker threads");

  auto* rl = app.add_subcommand("train-rl", "Policy optimization from an SFT checkpoint");
  add_common(rl, rl_c);
  bind_flag<std::string>(rl, rl_c, "--data", "data.prompts", "Prompt dataset directory");
  bind_flag<std::string>(rl, rl_c, "--ckpt", "model.init", "Starting checkpoint");
  bind_flag<std::string>(rl, rl_c, "--out", "out_dir", "Output directory");
  bind_flag<std::uint64_t>(rl, rl_c, "--seed", "seed", "Seed");
  bind_flag<int>(rl, rl_c, "--workers", "workers", "Worker threads");

  std::vector<std::string> refs;
  std::string instruction, out_png;
  auto* smp = app.add_subcommand("sample", "Generate one image");
  add_common(smp, sample_c);
  bind_flag<std::string>(smp, sample_c, "--ckpt", "model.init", "Checkpoint");
  bind_flag<std::uint64_t>(smp, sample_c, "--seed", "seed", "Seed");
  bind_flag<std::string>(smp, sample_c, "--mode", "sample.mode", "ode or sde");
  smp->add_option("--refs", refs, "Reference PNGs in order")->required()->check(CLI::ExistingFile);
  smp->add_option("--instruction", instruction, "Instruction tokens, e.g. \"PLACE REF_1 CELL_TL\"")->required();
  smp->add_option("--out", out_png, "Output PNG path")->required();

  bool oracle = false;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  add_common(ev, eval_c);
  bind_flag<std::string>(ev, eval_c, "--ckpt", "model.init", "Checkpoint");
  bind_flag<std::string>(ev, eval_c, "--data", "data.eval", "Evaluation dataset directory");
  bind_flag<std::string>(ev, eval_c, "--out", "out_dir", "Output directory");
  bind_flag<std::string>(ev, eval_c, "--mode", "eval.mode", "ode (default) or sde");
  bind_flag<int>(ev, eval_c, "--workers", "workers", "Worker threads");
  ev->add_flag("--oracle", oracle, "Score ground-truth targets instead of model samples");

  std::vector<std::string> metrics;
  auto* plt = app.add_subcommand("plot", "Render SVG charts from metrics files");
  add_common(plt, plot_c);
  plt->add_option("--metrics", metrics, "metrics.jsonl files")->required()->check(CLI::ExistingFile);
  bind_flag<std::string>(plt, plot_c, "--out", "out_dir", "Output directory");

  std::string host = "127.0.0.1", api_key;
  int port = 8080;
  if (const char* k = std::getenv("JUDGE_API_KEY")) api_key = k;
  auto* mock = app.add_subcommand("judge-mock", "Serve the judge protocol backed by the programmatic judge");
  add_common(mock, mock_c);
  mock->add_option("--host", host, "Bind address");
  mock->add_option("--port", port, "Port");
  mock->add_option("--api-key", api_key, "Required bearer token (default JUDGE_API_KEY)");
  bind_flag<std::string>(mock, mock_c, "--out", "out_dir", "Optional output directory for the resolved config");

  // --print-schema works without a subcommand.
  if (std::find(args.begin(), args.end(), "--print-schema") != args.end()) {
    std::cout << config_schema().dump(2) << "\n";
    return 0;
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) return cmd_gen_data(resolve(gen_c, gen));
    if (sft->parsed()) return cmd_train_sft(resolve(sft_c, sft));
    if (rl->parsed()) return cmd_train_rl(resolve(rl_c, rl));
    if (smp->parsed()) return cmd_sample(resolve(sample_c, smp), refs, instruction, out_png);
    if (ev->parsed()) return cmd_eval(resolve(eval_c, ev), oracle);
    if (plt->parsed()) return cmd_plot(resolve(plot_c, plt), metrics);
    if (mock->parsed()) return cmd_judge_mock(resolve(mock_c, mock), host, port, api_key);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: unknown argument " << one_line(e.what()) << "\n" << app.help();
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 1;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args);
}

}  // namespace uniref
