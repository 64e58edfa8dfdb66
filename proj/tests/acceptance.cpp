// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "deepgrade/binary_io.hpp"
#include "deepgrade/classify/svm.hpp"
#include "deepgrade/config.hpp"
#include "deepgrade/grading.hpp"
#include "deepgrade/phantom.hpp"
#include "deepgrade/rng.hpp"

namespace fs = std::filesystem;
using namespace deepgrade;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  int code = -1;
  double seconds = 0.0;
  std::string out;
};

Outcome run(const std::string& cmd, const fs::path& log) {
  const auto t0 = Clock::now();
  const int status = std::system((cmd + " >\"" + log.string() + "\" 2>&1").c_str());
  Outcome o;
  o.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = detail::read_text(log);
  while (!o.out.empty() && o.out.back() == '\n') o.out.pop_back();
  return o;
}

std::string last_line(const std::string& s) {
  const auto p = s.rfind('\n');
  return p == std::string::npos ? s : s.substr(p + 1);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

int failures = 0;

void verdict(int id, bool ok, const std::string& detail) {
  std::cout << "criterion " << id << ": " << (ok ? "PASS" : "FAIL") << "  " << detail << std::endl;
  if (!ok) ++failures;
}

void suite(int id, const std::string& exe, double limit, const fs::path& work) {
  const auto o = run("\"" + exe + "\"", work / ("suite" + std::to_string(id) + ".log"));
  verdict(id, o.code == 0 && o.seconds < limit,
          fmt("exit %.0f, %.1f s (limit %.0f s)", o.code, o.seconds, limit));
}

/// Rank (1-based) of structure id on descending scores with id tie-break.
std::size_t rank_of(const std::vector<double>& scores, unsigned id) {
  const auto r = grading::rank_structures(scores, scores.size());
  for (std::size_t i = 0; i < r.size(); ++i)
    if (r[i].id == id) return i + 1;
  return scores.size() + 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance gate"};
  std::string cli, gradient, oracle, workdir = "acceptance_work";
  std::vector<int> only;
  app.add_option("--cli", cli)->required();
  app.add_option("--gradient-suite", gradient)->required();
  app.add_option("--oracle-suite", oracle)->required();
  app.add_option("--workdir", workdir);
  app.add_option("--only", only, "criteria to run (default: all)");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  const fs::path work = fs::absolute(workdir);
  fs::remove_all(work);
  fs::create_directories(work);

  if (wanted(1)) suite(1, gradient, 120.0, work);
  if (wanted(2)) suite(2, oracle, 300.0, work);

  if (wanted(3) || wanted(4) || wanted(5) || wanted(6)) {
    RunConfig cfg;
    cfg.workdir = work / "run";
    const auto cfg_path = work / "config.json";
    std::ofstream(cfg_path) << to_json(cfg).dump(2);
    const std::string base = "\"" + cli + "\" --config \"" + cfg_path.string() + "\" ";

    const auto ph = run(base + "phantom", work / "phantom.log");
    const auto ev = run(base + "evaluate", work / "evaluate.log");
    const double minutes = (ph.seconds + ev.seconds) / 60.0;
    nlohmann::json report;
    if (ph.code == 0 && ev.code == 0) report = nlohmann::json::parse(detail::read_text(last_line(ev.out)));
    else std::cerr << ph.out << "\n" << ev.out << "\n";
    const bool ok_run = !report.is_null();

    if (wanted(3)) {
      if (!ok_run) {
        verdict(3, false, "pipeline failed");
      } else {
        const double f = report["mean"]["fused"]["bacc"], g = report["mean"]["gcn"]["bacc"],
                     s = report["mean"]["svm"]["bacc"];
        verdict(3, f >= 0.90 && f >= std::max(g, s) - 0.02 && minutes < 20.0,
                fmt("fused BACC %.4f, GCN %.4f, SVM %.4f, %.1f min", f, g, s, minutes));
      }
    }

    if (wanted(4)) {
      if (!ok_run) {
        verdict(4, false, "pipeline failed");
      } else {
        bool ok = true;
        std::string d;
        for (auto dx : {Diagnosis::AD, Diagnosis::FTD}) {
          const std::string name(to_string(dx));
          const auto affected = phantom::affected_structures(cfg.phantom, dx);
          const auto scores = report["localization"][name]["scores"].get<std::vector<double>>();
          std::size_t worst = 0;
          for (unsigned id : affected) worst = std::max(worst, rank_of(scores, id));
          ok &= worst <= affected.size() + 1;
          d += name + " worst affected rank " + std::to_string(worst) + "/" + std::to_string(affected.size() + 1) + ", ";
        }
        const auto cn = report["localization"]["CN"]["scores"].get<std::vector<double>>();
        const double cn_max = *std::max_element(cn.begin(), cn.end());
        ok &= cn_max <= -0.3;
        verdict(4, ok, d + fmt("CN max score %.4f", cn_max));
      }
    }

    if (wanted(5)) {
      if (!ok_run) {
        verdict(5, false, "pipeline failed");
      } else {
        bool ok = true;
        std::string d;
        for (const auto& r : report["repetitions"]) {
          const double f = r["fit_bacc"]["fused"], g = r["fit_bacc"]["gcn"], s = r["fit_bacc"]["svm"];
          ok &= f >= std::max(g, s);
          d += fmt("rep: %.4f vs max(%.4f, %.4f); ", f, g, s);
        }
        verdict(5, ok && !report["repetitions"].empty(), d);
      }
    }

    if (wanted(6)) {
      if (!ok_run) {
        verdict(6, false, "pipeline failed");
      } else {
        const auto first = detail::read_text(last_line(ev.out));
        const auto again = run(base + "evaluate", work / "evaluate2.log");
        const bool same = again.code == 0 && detail::read_text(last_line(again.out)) == first;
        verdict(6, same, same ? "report.json byte-identical across two runs" : "reports differ");
      }
    }
  }

  if (wanted(7)) {
    const auto g = classify::c_grid(500, -5, 5);
    bool ok = g.size() == 500 && std::abs(g.front() / 1e-5 - 1.0) <= 1e-12 && std::abs(g.back() / 1e5 - 1.0) <= 1e-12;
    double worst = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double want = std::pow(10.0, -5.0 + 10.0 * static_cast<double>(i) / 499.0);
      worst = std::max(worst, std::abs(g[i] / want - 1.0));
      if (i) ok &= g[i] > g[i - 1];
    }
    ok &= worst <= 1e-12;
    verdict(7, ok, fmt("%.0f points, endpoints %.3g and %.3g, worst relative deviation %.2e", g.size(), g.front(),
                       g.back(), worst));
  }

  if (wanted(8)) {
    Rng rng(8);
    bool ok = true;
    int cases = 0;
    for (int t = 0; t < 500; ++t) {
      const std::size_t k = 2 + rng.index(4);
      std::vector<int> cls;
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t n = 1 + rng.index(200); n > 0; --n) cls.push_back(static_cast<int>(c));
      const auto w = classify::balanced_weights(cls, k);
      for (std::size_t c = 0; c < k; ++c) {
        const auto nc = static_cast<std::uint64_t>(std::count(cls.begin(), cls.end(), static_cast<int>(c)));
        const auto r = classify::balanced_weight_exact(cls.size(), k, nc);
        // num / den == N / (K N_c) as integers, and the floating weight is that rational rounded.
        ok &= r.num * k * nc == cls.size() * r.den;
        ok &= w[c] == static_cast<double>(r.num) / static_cast<double>(r.den);
        ++cases;
      }
    }
    verdict(8, ok, std::to_string(cases) + " class weights checked against N/(K*N_c)");
  }

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criterion(s) failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
