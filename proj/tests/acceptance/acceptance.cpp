// Desk-scale acceptance run: one PASS/FAIL line per criterion.
//
// usage: acceptance [artifact_root]
// Stages reuse up-to-date artifacts under the root, so a rerun only repeats
// the oracle checks and the determinism replay.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "socialgf/binary_io.hpp"
#include "socialgf/evaluation.hpp"
#include "socialgf/oracles.hpp"
#include "socialgf/pipeline.hpp"

namespace {

using namespace socialgf;
using nlohmann::json;
using oracles::OracleResult;
namespace fs = std::filesystem;
namespace pl = socialgf::pipeline;

// Pinned thresholds.
constexpr double kGradientRuntimeS = 60;
constexpr double kPointMassRuntimeS = 300;
constexpr double kGaussianRuntimeS = 600;
constexpr double kNavPlusMinSuccess = 0.5;
constexpr double kNavOriginalMaxSuccess = 0.05;
constexpr double kNavTrainingBudgetS = 3600;
constexpr double kAdaptMinSuccess = 0.2;
constexpr double kAdaptEvalBudgetS = 900;
constexpr double kGrassRatio = 2.0;

fs::path g_root;
std::ofstream g_log;

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

struct Run {
  pl::RunConfig config;
  pl::Options options;
};

Run run_of(const std::string& name) {
  Run r{pl::load_config(fs::path(SOCIALGF_CONFIG_DIR) / (name + ".json")), {}};
  r.options.out = g_root / name;
  r.options.log = &g_log;
  return r;
}

// Wall time of every stage that wrote output, kept next to the artifacts so
// that runtime limits still apply when a later run finds them up to date.
json load_timings() {
  const auto p = g_root / "timings.json";
  return fs::exists(p) ? json::parse(io::read_text(p)) : json::object();
}

// Runs the listed stages; returns the recorded wall seconds of those stages.
double stages(const Run& r, std::initializer_list<const char*> names) {
  auto timings = load_timings();
  double total = 0.0;
  for (const std::string s : names) {
    const auto t = std::chrono::steady_clock::now();
    pl::Status st = pl::Status::up_to_date;
    if (s == "collect") st = pl::cmd_collect(r.config, r.options);
    else if (s == "train-gf") st = pl::cmd_train_gf(r.config, r.options);
    else if (s == "train-marl") st = pl::cmd_train_marl(r.config, r.options);
    else if (s == "evaluate") st = pl::cmd_evaluate(r.config, r.options);
    else if (s == "cross-match") st = pl::cmd_cross_match(r.config, r.options);
    else if (s == "render") st = pl::cmd_render(r.config, r.options);
    const std::string key = r.options.out.filename().string() + "/" + s;
    if (st == pl::Status::written) timings[key] = seconds_since(t);
    const double dt = timings.value(key, 0.0);
    total += dt;
    std::cout << "  " << key << ": " << (st == pl::Status::written ? "written" : "up to date") << " ("
              << static_cast<int>(dt) << " s)\n"
              << std::flush;
  }
  io::write_text(g_root / "timings.json", timings.dump(1) + "\n");
  return total;
}

json eval_report(const Run& r) { return json::parse(io::read_text(pl::eval_path(r.options))); }

double success_of(const json& report, const std::string& method) {
  for (const auto& e : report.at("results")) {
    if (e.at("method") == method) return e.at("report").at("success_rate").get<double>();
  }
  throw std::runtime_error("no evaluation result for method " + method);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

OracleResult timed(OracleResult r, double seconds, double limit) {
  r.detail += " runtime=" + fmt(seconds) + "s (limit " + fmt(limit) + "s)";
  r.passed = r.passed && seconds <= limit;
  return r;
}

template <typename Fn>
OracleResult guarded(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {name, 0.0, 0.0, false, std::string("error: ") + e.what()};
  }
}

template <typename Fn>
OracleResult timed_oracle(Fn&& fn, double limit) {
  const auto t = std::chrono::steady_clock::now();
  auto r = fn();
  return timed(std::move(r), seconds_since(t), limit);
}

OracleResult nav_smoke() {
  const auto plus = run_of("vanilla_nav2_plus");
  const auto original = run_of("vanilla_nav2_original");
  double train_s = stages(plus, {"collect", "train-gf"});
  train_s += stages(plus, {"train-marl"});
  train_s += stages(original, {"train-marl"});
  stages(plus, {"evaluate"});
  stages(original, {"evaluate"});
  const double s_plus = success_of(eval_report(plus), "SocialGFsPlus");
  const double s_orig = success_of(eval_report(original), "OriginalReward");
  OracleResult r{"nav_rl_smoke", s_plus, kNavPlusMinSuccess, false, {}};
  r.passed = s_plus >= kNavPlusMinSuccess && s_orig <= kNavOriginalMaxSuccess && train_s <= kNavTrainingBudgetS;
  r.detail = "SocialGFsPlus success=" + fmt(s_plus) + " (>= " + fmt(kNavPlusMinSuccess) +
             "), OriginalReward success=" + fmt(s_orig) + " (<= " + fmt(kNavOriginalMaxSuccess) +
             "), training " + fmt(train_s) + "s (limit " + fmt(kNavTrainingBudgetS) + "s)";
  return r;
}

void grassland_training() {
  stages(run_of("grassland22_socialgfs"), {"collect", "train-gf", "train-marl"});
  stages(run_of("grassland22_original"), {"train-marl"});
  stages(run_of("grassland22_reward_engineering"), {"train-marl"});
}

OracleResult adaptation_smoke() {
  grassland_training();
  const auto adapted = run_of("vanilla_nav2_adapted");
  const double eval_s = stages(adapted, {"evaluate"});
  const auto report = eval_report(adapted);
  const double s_star = success_of(report, "SocialGFsStar");
  const double s_rand = success_of(report, "Random");
  OracleResult r{"adaptation_smoke", s_star, kAdaptMinSuccess, false, {}};
  r.passed = s_star >= kAdaptMinSuccess && s_star > s_rand && eval_s <= kAdaptEvalBudgetS;
  r.detail = "swapped sheep policy success=" + fmt(s_star) + " (>= " + fmt(kAdaptMinSuccess) +
             ", > random " + fmt(s_rand) + "), evaluation " + fmt(eval_s) + "s (limit " + fmt(kAdaptEvalBudgetS) + "s)";
  return r;
}

std::size_t index_of(const json& names, const std::string& m) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == m) return i;
  }
  throw std::runtime_error("method " + m + " missing from the tournament");
}

OracleResult grassland_smoke() {
  grassland_training();
  const auto run = run_of("grassland22_socialgfs");
  stages(run, {"cross-match"});
  const auto table = json::parse(io::read_text(pl::cross_match_path(run.options)));
  const auto w = index_of(table.at("wolf_methods"), "SocialGFs");
  const auto& row = table.at("cells").at(w);
  const double trained = row.at(index_of(table.at("sheep_methods"), "SocialGFs")).at("grass_per_100_steps").get<double>();
  const double random = row.at(index_of(table.at("sheep_methods"), "Random")).at("grass_per_100_steps").get<double>();
  const double ratio = random > 0.0 ? trained / random : (trained > 0.0 ? 1e9 : 0.0);
  OracleResult r{"grassland_smoke", ratio, kGrassRatio, ratio >= kGrassRatio, {}};
  r.detail = "grass per sheep per 100 steps vs SocialGFs wolves: SocialGFs sheep " + fmt(trained) + ", random sheep " +
             fmt(random);
  return r;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == ".lock") continue;
    out[fs::relative(e.path(), root).string()] = io::read_text(e.path());
  }
  return out;
}

OracleResult determinism() {
  int differing = 0;
  std::size_t files = 0;
  for (const std::string name : {"smoke_nav2", "smoke_grassland"}) {
    std::map<std::string, std::string> trees[2];
    for (int k = 0; k < 2; ++k) {
      auto r = run_of(name);
      r.options.out = g_root / "replay" / (name + "_" + std::to_string(k));
      fs::remove_all(r.options.out);
      const bool grass = r.config.scenario.scenario == world::Scenario::grassland;
      stages(r, {"collect", "train-gf", "train-marl", "evaluate", "render"});
      if (grass) stages(r, {"cross-match"});
      trees[k] = tree(r.options.out);
    }
    files += trees[0].size();
    for (const auto& [path, bytes] : trees[0]) {
      const auto it = trees[1].find(path);
      if (it == trees[1].end() || it->second != bytes) ++differing;
    }
    if (trees[1].size() != trees[0].size()) ++differing;
  }
  return {"determinism", static_cast<double>(differing), 0.0, differing == 0 && files > 0,
          std::to_string(files) + " artifacts replayed into fresh directories; differing=" + std::to_string(differing)};
}

OracleResult report_schemas() {
  int violations = 0;
  std::string notes;
  auto check = [&](const std::string& what, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      ++violations;
      notes += " " + what + ": " + e.what() + ";";
    }
  };
  check("cross_match", [&] {
    const auto j = json::parse(io::read_text(pl::cross_match_path(run_of("grassland22_socialgfs").options)));
    evaluation::check_cross_match_schema(j);
    if (j.at("wolf_methods").size() != 4 || j.at("sheep_methods").size() != 4 || j.at("cells").size() != 4) {
      throw std::runtime_error("expected a 4x4 wolf/sheep matrix");
    }
  });
  // Method x population table assembled from the three navigation reports.
  check("nav_table", [&] {
    evaluation::NavTable t;
    t.scenario = "vanilla_nav";
    t.populations = {"2"};
    for (const std::string name : {"vanilla_nav2_original", "vanilla_nav2_plus", "vanilla_nav2_adapted"}) {
      const auto run = run_of(name);
      const auto per_run = json::parse(io::read_text(run.options.out / "reports" / "nav_table.json"));
      evaluation::check_nav_table_schema(per_run);
      const auto report = eval_report(run);
      for (const auto& e : report.at("results")) {
        const auto& rep = e.at("report");
        t.methods.push_back(e.at("method").get<std::string>());
        t.cells.push_back({{rep.at("success_rate").get<double>(), rep.at("occupation_rate").get<double>(),
                            rep.at("episodes").get<int>()}});
      }
    }
    t.config_hash = "acceptance";
    const auto j = evaluation::to_json(t);
    evaluation::check_nav_table_schema(j);
    io::write_text(g_root / "nav_table_combined.json", j.dump(1) + "\n");
    io::write_text(g_root / "nav_table_combined.txt",
                   evaluation::to_text(t, "success_rate") + "\n" + evaluation::to_text(t, "occupation_rate"));
    if (t.methods.size() != 4) throw std::runtime_error("expected four navigation methods");
  });
  return {"report_schemas", static_cast<double>(violations), 0.0, violations == 0,
          violations == 0 ? "cross_match 4x4 and method x population nav table validate" : notes};
}

}  // namespace

int main(int argc, char** argv) {
  g_root = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_artifacts");
  fs::create_directories(g_root);
  g_log.open(g_root / "progress.jsonl", std::ios::app);

  std::vector<std::pair<int, OracleResult>> results;
  auto record = [&](int id, OracleResult r) {
    std::cout << "C" << id << " " << oracles::to_line(r) << '\n' << std::flush;
    results.emplace_back(id, std::move(r));
  };

  record(1, guarded("gradient_exactness",
                    [] { return timed_oracle([] { return oracles::gradient_exactness(); }, kGradientRuntimeS); }));
  record(2, guarded("dsm_point_mass",
                    [] { return timed_oracle([] { return oracles::dsm_point_mass(); }, kPointMassRuntimeS); }));
  record(3, guarded("dsm_gaussian",
                    [] { return timed_oracle([] { return oracles::dsm_gaussian(); }, kGaussianRuntimeS); }));
  record(4, guarded("permutation_invariance", [] { return oracles::permutation_invariance(); }));
  record(5, guarded("event_equivalence", [] { return oracles::event_equivalence(); }));
  record(6, guarded("gae_equivalence", [] { return oracles::gae_equivalence(); }));
  record(7, guarded("shaping_monotonicity", [] { return oracles::shaping_monotonicity(); }));
  record(8, guarded("nav_rl_smoke", nav_smoke));
  record(9, guarded("adaptation_smoke", adaptation_smoke));
  record(10, guarded("grassland_smoke", grassland_smoke));
  record(11, guarded("determinism", determinism));
  record(12, guarded("report_schemas", report_schemas));

  int failed = 0;
  std::cout << "\nsummary\n";
  for (const auto& [id, r] : results) {
    std::cout << "  C" << id << " " << (r.passed ? "PASS" : "FAIL") << " " << r.name << '\n';
    failed += r.passed ? 0 : 1;
  }
  std::cout << (results.size() - failed) << "/" << results.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
