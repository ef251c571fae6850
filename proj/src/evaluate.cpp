#include "uniref/evaluate.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace uniref {
namespace {

void add(EvalAggregate& a, const EvalRow& r) {
  ++a.count;
  a.mean_reward += r.scores.total;
  a.recall += r.recall;
  a.mse += r.mse;
}

void finish(EvalAggregate& a) {
  if (a.count == 0) return;
  a.mean_reward /= double(a.count);
  a.recall /= double(a.count);
  a.mse /= double(a.count);
}

nlohmann::ordered_json agg_json(const EvalAggregate& a) {
  return {{"count", a.count}, {"mean_reward", a.mean_reward}, {"recall", a.recall}, {"mse", a.mse}};
}

}  // namespace

std::string kind_name(TaskKind k) { return k == TaskKind::Edit ? "edit" : "compose"; }

double pixel_mse(const RasterImage& a, const RasterImage& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw InvalidArgument("pixel_mse: image sizes differ");
  const auto pa = a.pixels(), pb = b.pixels();
  double s = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const double d = (double(pa[i]) - double(pb[i])) / 255.0;
    s += d * d;
  }
  return pa.empty() ? 0.0 : s / double(pa.size());
}

EvalReport evaluate(const std::optional<PolicyView>& policy, const std::vector<TrainingSample>& dataset, Judge& judge,
                    const EvalOptions& options) {
  if (dataset.empty()) throw InvalidArgument("evaluation dataset is empty");
  options.sampling.validate();
  EvalReport report;
  report.rows.resize(dataset.size());
  const ProgrammaticJudge oracle(options.thresholds);
  parallel_for(static_cast<int>(dataset.size()), options.workers, [&](int i) {
    const TrainingSample& s = dataset[i];
    EvalRow& row = report.rows[i];
    row.id = s.id;
    row.kind = s.kind;
    row.num_references = s.num_references();
    try {
      RasterImage out = s.target;
      if (policy) {
        Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(i)));
        out = sample(*policy, s.references, s.instruction, options.sampling, rng).image;
      }
      row.mse = pixel_mse(out, s.target);
      row.recall = oracle.recall(s.references, s.instruction, out);
      row.scores = score(judge, s.references, s.instruction, out, options.weights);
    } catch (const Error& e) {
      row.error = e.what();
    }
  });
  aggregate(report);
  return report;
}

void aggregate(EvalReport& report) {
  report.overall = {};
  report.by_k.clear();
  report.by_kind.clear();
  report.failures = 0;
  for (const auto& r : report.rows) {
    if (!r.error.empty()) {
      ++report.failures;
      continue;
    }
    add(report.overall, r);
    add(report.by_k[r.num_references], r);
    add(report.by_kind[kind_name(r.kind)], r);
  }
  finish(report.overall);
  for (auto& [k, a] : report.by_k) finish(a);
  for (auto& [k, a] : report.by_kind) finish(a);
}

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["overall"] = agg_json(report.overall);
  j["failures"] = report.failures;
  j["by_k"] = nlohmann::ordered_json::object();
  for (const auto& [k, a] : report.by_k) j["by_k"][std::to_string(k)] = agg_json(a);
  j["by_kind"] = nlohmann::ordered_json::object();
  for (const auto& [k, a] : report.by_kind) j["by_kind"][k] = agg_json(a);
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    nlohmann::ordered_json row{{"id", r.id},
                               {"kind", kind_name(r.kind)},
                               {"k", r.num_references},
                               {"mse", r.mse},
                               {"recall", r.recall},
                               {"integration", r.scores.integration},
                               {"consistency", r.scores.consistency},
                               {"quality", r.scores.quality},
                               {"total", r.scores.total}};
    if (!r.error.empty()) row["error"] = r.error;
    j["rows"].push_back(std::move(row));
  }
  return j.dump(2) + "\n";
}

std::string report_table(const EvalReport& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  const auto line = [&](const std::string& name, const EvalAggregate& a) {
    os << std::left << std::setw(12) << name << std::right << std::setw(7) << a.count << std::setw(12) << a.mean_reward
       << std::setw(10) << a.recall << std::setw(10) << a.mse << "\n";
  };
  os << std::left << std::setw(12) << "split" << std::right << std::setw(7) << "n" << std::setw(12) << "reward"
     << std::setw(10) << "recall" << std::setw(10) << "mse" << "\n";
  line("all", report.overall);
  for (const auto& [k, a] : report.by_kind) line(k, a);
  for (const auto& [k, a] : report.by_k) line("K=" + std::to_string(k), a);
  if (report.failures) os << report.failures << " sample(s) failed; see report.json\n";
  return os.str();
}

void write_report(const EvalReport& report, const std::string& directory) {
  std::filesystem::create_directories(directory);
  const auto put = [&](const char* name, const std::string& text) {
    std::ofstream out(std::filesystem::path(directory) / name, std::ios::trunc);
    out << text;
    if (!out) throw IoError(std::string("cannot write ") + name + " in " + directory);
  };
  put("report.json", report_json(report));
  put("report.txt", report_table(report));
}

}  // namespace uniref
