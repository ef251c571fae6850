#include "uniref/run_config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace uniref {

using nlohmann::json;

namespace {

json adam_json(const AdamConfig& a) {
  return {{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay}};
}

AdamConfig adam_from(const json& j) {
  return {j.at("beta1").get<double>(), j.at("beta2").get<double>(), j.at("eps").get<double>(),
          j.at("weight_decay").get<double>()};
}

const char* type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

bool compatible(const json& expected, const json& given) {
  if (expected.is_number_float()) return given.is_number();
  if (expected.is_number_integer()) return given.is_number_integer();
  if (expected.is_boolean()) return given.is_boolean();
  if (expected.is_string()) return given.is_string();
  if (expected.is_array()) return given.is_array();
  if (expected.is_object()) return given.is_object();
  return false;
}

void collect_leaves(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object())
      collect_leaves(*it, path, out);
    else
      out.push_back(path);
  }
}

json schema_of(const json& j) {
  if (j.is_object()) {
    json props = json::object();
    for (auto it = j.begin(); it != j.end(); ++it) props[it.key()] = schema_of(*it);
    return {{"type", "object"}, {"properties", props}, {"additionalProperties", false}};
  }
  if (j.is_array()) {
    json s = {{"type", "array"}};
    if (!j.empty()) s["items"] = schema_of(j.front());
    return s;
  }
  return {{"type", type_name(j)}, {"default", j}};
}

SampleMode mode_from(const std::string& s, const std::string& key) {
  if (s == "ode") return SampleMode::Deterministic;
  if (s == "sde") return SampleMode::Stochastic;
  throw ConfigError(key + ": expected \"ode\" or \"sde\", got \"" + s + "\"");
}

TaskKind kind_from(const std::string& s, const std::string& key) {
  if (s == "compose" || s == "composition") return TaskKind::Compose;
  if (s == "edit" || s == "editing") return TaskKind::Edit;
  throw ConfigError(key + ": unknown task kind \"" + s + "\"");
}

// Convert, turning nlohmann type errors inside nested arrays into ConfigError.
template <typename F>
auto convert(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace

json default_config() {
  const ModelConfig m;
  const SftConfig s;
  const RlConfig r;
  const TaskGenConfig g;
  const RemoteJudgeConfig rj;
  const SampleOptions so;
  json schedule = json::array();
  for (const auto& st : s.schedule.stages()) schedule.push_back({{"step", st.step_threshold}, {"budget", st.budget}});
  // Runs default to a single composition phase; editing can be appended as a second phase.
  const json phases = json::array({{{"name", "composition"}, {"kind", "compose"}, {"steps", 100}}});
  return {
      {"seed", 0},
      {"out_dir", ""},
      {"workers", 1},
      {"data", {{"train", ""}, {"eval", ""}, {"prompts", ""}}},
      {"model",
       {{"layers", m.layers}, {"width", m.width}, {"heads", m.heads}, {"ff_mult", m.ff_mult},
        {"rope_base", m.rope_base}, {"rope_heads", m.rope_heads}, {"init", ""}}},
      {"gen",
       {{"count", 1000}, {"min_size", g.min_size}, {"max_size", g.max_size}, {"k_min", g.k_range.first},
        {"k_max", g.k_range.second}, {"edit_fraction", g.edit_fraction}, {"patch_pixels", 4}}},
      {"sft",
       {{"steps", s.steps}, {"batch_size", s.batch_size}, {"peak_lr", s.peak_lr}, {"warmup_steps", s.warmup_steps},
        {"schedule", schedule}, {"logit_location", s.logit_location}, {"logit_scale", s.logit_scale},
        {"patch_pixels", s.patch_pixels}, {"adam", adam_json(s.adam)}, {"grad_clip", s.grad_clip},
        {"checkpoint_every", s.checkpoint_every}}},
      {"rl",
       {{"group_size", r.group_size}, {"steps", r.steps}, {"noise_level", r.noise_level}, {"beta", r.beta},
        {"clip_eps", r.clip_eps}, {"lr", r.lr}, {"adapter_rank", r.adapter_rank},
        {"adapter_alpha", r.adapter_alpha}, {"full_params", r.full_params}, {"phases", phases},
        {"prompts_per_step", r.prompts_per_step}, {"reuse", r.reuse}, {"budget", r.budget},
        {"patch_pixels", r.patch_pixels}, {"height", r.height}, {"width", r.width}, {"time_eps", r.time_eps},
        {"advantage_floor", r.advantage_floor}, {"adam", adam_json(r.adam)}, {"grad_clip", r.grad_clip},
        {"checkpoint_every", r.checkpoint_every}, {"run_id", r.run_id}}},
      {"judge",
       {{"kind", "programmatic"},
        {"weights", {{"integration", 1.0}, {"consistency", 1.0}, {"quality", 1.0}}},
        {"thresholds", {{"color", JudgeThresholds{}.color}, {"area", JudgeThresholds{}.area}}},
        {"endpoint", ""},
        {"retry",
         {{"base_seconds", rj.retry.base_seconds}, {"factor", rj.retry.factor},
          {"max_attempts", rj.retry.max_attempts}}},
        {"max_in_flight", rj.max_in_flight},
        {"timeout_seconds", rj.timeout_seconds}}},
      {"sample",
       {{"steps", so.steps}, {"mode", "ode"}, {"noise_level", so.noise_level}, {"time_eps", so.time_eps},
        {"budget", so.budget}, {"height", so.height}, {"width", so.width}}},
      {"eval", {{"mode", "ode"}, {"seed", 0}}},
  };
}

json config_schema() {
  json s = schema_of(default_config());
  s["$schema"] = "https://json-schema.org/draft/2020-12/schema";
  s["title"] = "uniref run configuration";
  return s;
}

std::vector<std::string> config_leaf_paths() {
  std::vector<std::string> out;
  collect_leaves(default_config(), "", out);
  return out;
}

void merge_config(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError((prefix.empty() ? "config" : prefix) + ": expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown key " + path);
    json& slot = base[it.key()];
    if (!compatible(slot, *it))
      throw ConfigError(path + ": expected " + type_name(slot) + ", got " + type_name(*it));
    if (slot.is_object())
      merge_config(slot, *it, path);
    else
      slot = slot.is_number_float() ? json(it->get<double>()) : *it;
  }
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override \"" + assignment + "\" is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  // A string leaf should take the raw text even if it happens to parse as JSON.
  const json* cursor = &config;
  for (const auto& p : parts) {
    if (!cursor->is_object() || !cursor->contains(p)) throw ConfigError("unknown key " + path);
    cursor = &cursor->at(p);
  }
  if (cursor->is_string()) patch = raw;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_config(config, patch);
}

std::uint64_t RunConfig::seed() const { return doc.at("seed").get<std::uint64_t>(); }
std::string RunConfig::out_dir() const { return doc.at("out_dir").get<std::string>(); }
int RunConfig::workers() const { return doc.at("workers").get<int>(); }
std::string RunConfig::data_path(const std::string& key) const { return doc.at("data").at(key).get<std::string>(); }

ModelConfig RunConfig::model() const {
  const auto& j = doc.at("model");
  ModelConfig m;
  m.layers = j.at("layers").get<int>();
  m.width = j.at("width").get<int>();
  m.heads = j.at("heads").get<int>();
  m.ff_mult = j.at("ff_mult").get<int>();
  m.rope_base = j.at("rope_base").get<double>();
  m.rope_heads = j.at("rope_heads").get<int>();
  const int patch = doc.at("sft").at("patch_pixels").get<int>();
  m.channels = 3 * patch * patch;
  return m;
}

SftConfig RunConfig::sft() const {
  const auto& j = doc.at("sft");
  SftConfig s;
  s.steps = j.at("steps").get<std::int64_t>();
  s.batch_size = j.at("batch_size").get<int>();
  s.peak_lr = j.at("peak_lr").get<double>();
  s.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
  s.schedule = convert("sft.schedule", [&] {
    std::vector<BudgetSchedule::Stage> stages;
    for (const auto& st : j.at("schedule")) stages.push_back({st.at("step").get<std::int64_t>(), st.at("budget").get<std::int64_t>()});
    return BudgetSchedule(std::move(stages));
  });
  s.logit_location = j.at("logit_location").get<double>();
  s.logit_scale = j.at("logit_scale").get<double>();
  s.patch_pixels = j.at("patch_pixels").get<int>();
  s.adam = adam_from(j.at("adam"));
  s.grad_clip = j.at("grad_clip").get<double>();
  s.checkpoint_every = j.at("checkpoint_every").get<std::int64_t>();
  s.seed = seed();
  s.workers = workers();
  s.out_dir = out_dir();
  return s;
}

RlConfig RunConfig::rl() const {
  const auto& j = doc.at("rl");
  RlConfig r;
  r.group_size = j.at("group_size").get<int>();
  r.steps = j.at("steps").get<int>();
  r.noise_level = j.at("noise_level").get<double>();
  r.beta = j.at("beta").get<double>();
  r.clip_eps = j.at("clip_eps").get<double>();
  r.lr = j.at("lr").get<double>();
  r.adapter_rank = j.at("adapter_rank").get<int>();
  r.adapter_alpha = j.at("adapter_alpha").get<double>();
  r.full_params = j.at("full_params").get<bool>();
  r.phases = convert("rl.phases", [&] {
    std::vector<RlPhase> phases;
    for (const auto& p : j.at("phases")) {
      const auto name = p.at("name").get<std::string>();
      phases.push_back({name, kind_from(p.at("kind").get<std::string>(), "rl.phases." + name),
                        p.at("steps").get<std::int64_t>()});
    }
    return phases;
  });
  r.prompts_per_step = j.at("prompts_per_step").get<int>();
  r.reuse = j.at("reuse").get<int>();
  r.budget = j.at("budget").get<std::int64_t>();
  r.patch_pixels = j.at("patch_pixels").get<int>();
  r.height = j.at("height").get<int>();
  r.width = j.at("width").get<int>();
  r.time_eps = j.at("time_eps").get<double>();
  r.advantage_floor = j.at("advantage_floor").get<double>();
  r.adam = adam_from(j.at("adam"));
  r.grad_clip = j.at("grad_clip").get<double>();
  r.checkpoint_every = j.at("checkpoint_every").get<std::int64_t>();
  r.run_id = j.at("run_id").get<std::string>();
  r.weights = weights();
  r.seed = seed();
  r.workers = workers();
  r.out_dir = out_dir();
  return r;
}

TaskGenConfig RunConfig::gen() const {
  const auto& j = doc.at("gen");
  TaskGenConfig g;
  g.min_size = j.at("min_size").get<int>();
  g.max_size = j.at("max_size").get<int>();
  g.k_range = {j.at("k_min").get<int>(), j.at("k_max").get<int>()};
  g.edit_fraction = j.at("edit_fraction").get<double>();
  g.thresholds = thresholds();
  return g;
}

RewardWeights RunConfig::weights() const {
  const auto& j = doc.at("judge").at("weights");
  RewardWeights w{j.at("integration").get<double>(), j.at("consistency").get<double>(), j.at("quality").get<double>()};
  return w;
}

JudgeThresholds RunConfig::thresholds() const {
  const auto& j = doc.at("judge").at("thresholds");
  return {j.at("color").get<double>(), j.at("area").get<double>()};
}

RemoteJudgeConfig RunConfig::remote_judge() const {
  const auto& j = doc.at("judge");
  RemoteJudgeConfig c = remote_config_from_env();
  if (const auto e = j.at("endpoint").get<std::string>(); !e.empty()) c.endpoint = e;
  c.retry = {j.at("retry").at("base_seconds").get<double>(), j.at("retry").at("factor").get<double>(),
             j.at("retry").at("max_attempts").get<int>()};
  c.max_in_flight = j.at("max_in_flight").get<int>();
  c.timeout_seconds = j.at("timeout_seconds").get<double>();
  return c;
}

SampleOptions RunConfig::sample() const {
  const auto& j = doc.at("sample");
  SampleOptions o;
  o.steps = j.at("steps").get<int>();
  o.mode = mode_from(j.at("mode").get<std::string>(), "sample.mode");
  o.noise_level = j.at("noise_level").get<double>();
  o.time_eps = j.at("time_eps").get<double>();
  o.budget = j.at("budget").get<std::int64_t>();
  o.height = j.at("height").get<int>();
  o.width = j.at("width").get<int>();
  o.patch_pixels = doc.at("sft").at("patch_pixels").get<int>();
  return o;
}

EvalOptions RunConfig::eval() const {
  EvalOptions e;
  e.sampling = sample();
  e.sampling.mode = mode_from(doc.at("eval").at("mode").get<std::string>(), "eval.mode");
  e.seed = doc.at("eval").at("seed").get<std::uint64_t>();
  e.workers = workers();
  e.weights = weights();
  e.thresholds = thresholds();
  return e;
}

void RunConfig::require(const std::vector<std::string>& paths) const {
  for (const auto& path : paths) {
    const json* cursor = &doc;
    std::stringstream ss(path);
    for (std::string p; std::getline(ss, p, '.');) cursor = &cursor->at(p);
    if (!cursor->is_string() || cursor->get<std::string>().empty())
      throw ConfigError("missing required setting " + path);
  }
}

RunConfig load_run_config(const std::string& file, const std::vector<std::string>& overrides) {
  json doc = default_config();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open config " + file);
    json patch = json::parse(in, nullptr, false);
    if (patch.is_discarded()) throw ConfigError(file + ": not valid JSON");
    merge_config(doc, patch);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig cfg{doc};
  // Build every typed view once so malformed values fail before any work starts.
  cfg.model().validate();
  cfg.sft();
  cfg.rl().validate();
  cfg.weights().validate();
  cfg.sample().validate();
  cfg.eval();
  cfg.gen();
  const auto kind = doc.at("judge").at("kind").get<std::string>();
  if (kind != "programmatic" && kind != "remote")
    throw ConfigError("judge.kind: expected \"programmatic\" or \"remote\", got \"" + kind + "\"");
  return cfg;
}

void write_resolved_config(const RunConfig& config, const std::string& directory) {
  std::filesystem::create_directories(directory);
  const auto path = (std::filesystem::path(directory) / "config.json").string();
  std::ofstream out(path, std::ios::trunc);
  out << config.doc.dump(2) << "\n";
  if (!out) throw IoError("cannot write " + path);
}

}  // namespace uniref
