#include "uniref/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "uniref/common.hpp"

namespace uniref {
namespace {

constexpr double kW = 720, kH = 420, kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Record {
  int line = 0;
  nlohmann::json j;
};

std::vector<Record> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path);
  std::vector<Record> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (!j.is_object() || !j.contains("step") || !j.at("step").is_number()) throw std::runtime_error("no step field");
      out.push_back({n, std::move(j)});
    } catch (const std::exception& e) {
      throw InvalidArgument(path + ":" + std::to_string(n) + ": malformed metrics line (" + e.what() + ")");
    }
  }
  return out;
}

double number(const Record& r, const char* key, const std::string& path) {
  if (!r.j.contains(key)) throw InvalidArgument(path + ":" + std::to_string(r.line) + ": missing field " + key);
  const auto& v = r.j.at(key);
  if (v.is_null()) return std::nan("");
  if (!v.is_number()) throw InvalidArgument(path + ":" + std::to_string(r.line) + ": field " + key + " is not numeric");
  return v.get<double>();
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};

}  // namespace

std::string render_svg(const Chart& c) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : c.series)
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  for (const auto& m : c.markers) x0 = std::min(x0, m.x), x1 = std::max(x1, m.x);
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  const auto sx = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  const auto sy = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << num(kW / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(c.title) << "</text>\n";
  o << "<rect x=\"" << num(kLeft) << "\" y=\"" << num(kTop) << "\" width=\"" << num(pw) << "\" height=\"" << num(ph)
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0, xv = x0 + (x1 - x0) * i / 4.0;
    o << "<text x=\"" << num(kLeft - 6) << "\" y=\"" << num(sy(yv) + 4) << "\" text-anchor=\"end\">" << tick(yv) << "</text>\n";
    o << "<text x=\"" << num(sx(xv)) << "\" y=\"" << num(kTop + ph + 16) << "\" text-anchor=\"middle\">" << tick(xv) << "</text>\n";
  }
  o << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"" << num(kH - 10) << "\" text-anchor=\"middle\">" << escape(c.x_label) << "</text>\n";
  o << "<text x=\"16\" y=\"" << num(kTop + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << num(kTop + ph / 2) << ")\">" << escape(c.y_label) << "</text>\n";
  for (const auto& m : c.markers) {
    o << "<line class=\"marker\" x1=\"" << num(sx(m.x)) << "\" y1=\"" << num(kTop) << "\" x2=\"" << num(sx(m.x))
      << "\" y2=\"" << num(kTop + ph) << "\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n";
    o << "<text x=\"" << num(sx(m.x) + 3) << "\" y=\"" << num(kTop + 12) << "\" fill=\"#555\">" << escape(m.label) << "</text>\n";
  }
  int legend = 0;
  for (const auto& s : c.series) {
    o << "<polyline class=\"series\" fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      o << (first ? "" : " ") << num(sx(x)) << "," << num(sy(y));
      first = false;
    }
    o << "\"/>\n";
    const double ly = kTop + 14 + 16 * legend++;
    o << "<text x=\"" << num(kLeft + pw - 8) << "\" y=\"" << num(ly) << "\" text-anchor=\"end\" fill=\"" << s.color
      << "\">" << escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::vector<std::string> plot_metrics(const std::vector<std::string>& files, const std::string& out_dir) {
  std::vector<std::string> written;
  std::vector<Chart> charts;
  std::vector<std::string> names;
  for (const auto& path : files) {
    const auto recs = read_lines(path);
    if (recs.empty()) continue;
    const std::string stem = std::filesystem::path(path).stem().string();
    const std::string parent = std::filesystem::path(path).parent_path().filename().string();
    const std::string tag = parent.empty() ? stem : parent + "_" + stem;
    if (recs.front().j.contains("phase")) {
      Chart reward{"RL mean reward", "step", "mean reward", {}, {}};
      Chart clipkl{"RL clip fraction and KL", "step", "value", {}, {}};
      Series clip{"clip fraction", kPalette[0], {}}, kl{"mean KL", kPalette[1], {}};
      std::map<std::string, std::size_t> phase_series;
      std::string current;
      for (const auto& r : recs) {
        const double step = number(r, "step", path);
        const auto phase = r.j.at("phase").is_string() ? r.j.at("phase").get<std::string>() : std::string("?");
        if (phase != current) {
          reward.markers.push_back({step, phase});
          clipkl.markers.push_back({step, phase});
          current = phase;
        }
        auto it = phase_series.find(phase);
        if (it == phase_series.end()) {
          it = phase_series.emplace(phase, reward.series.size()).first;
          reward.series.push_back({phase, kPalette[reward.series.size() % 6], {}});
        }
        reward.series[it->second].points.emplace_back(step, number(r, "mean_reward", path));
        clip.points.emplace_back(step, number(r, "clip_fraction", path));
        kl.points.emplace_back(step, number(r, "mean_kl", path));
      }
      clipkl.series = {clip, kl};
      charts.push_back(reward);
      names.push_back(tag + "_reward.svg");
      charts.push_back(clipkl);
      names.push_back(tag + "_clip_kl.svg");
    } else {
      Chart loss{"SFT loss", "step", "loss", {}, {}};
      Series s{"loss", kPalette[0], {}};
      double last_budget = -1;
      for (const auto& r : recs) {
        const double step = number(r, "step", path);
        const double budget = number(r, "budget", path);
        s.points.emplace_back(step, number(r, "loss", path));
        if (budget != last_budget) {
          loss.markers.push_back({step, "budget " + tick(budget)});
          last_budget = budget;
        }
      }
      loss.series.push_back(s);
      charts.push_back(loss);
      names.push_back(tag + "_loss.svg");
    }
  }
  if (charts.empty()) {
    std::cerr << "warning: no metrics records found; no charts written\n";
    return written;
  }
  std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < charts.size(); ++i) {
    const auto p = (std::filesystem::path(out_dir) / names[i]).string();
    std::ofstream out(p, std::ios::trunc);
    out << render_svg(charts[i]);
    if (!out) throw IoError("cannot write chart " + p);
    written.push_back(p);
  }
  return written;
}

}  // namespace uniref
