// socialgf: config-driven pipeline driver.
//
// Exit codes: 0 ok, 1 runtime or verification failure, 2 usage or config error.
// Progress goes to stderr as JSON lines; the final status line goes to stdout.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "socialgf/errors.hpp"
#include "socialgf/oracles.hpp"
#include "socialgf/pipeline.hpp"

namespace {

using namespace socialgf;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "artifacts";
  std::optional<std::int64_t> budget;
  bool force = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Flags& f, bool needs_config = true) {
  auto* c = cmd->add_option("--config", f.config, "run configuration (JSON)")->check(CLI::ExistingFile);
  if (needs_config) c->required();
  cmd->add_option("--seed", f.seed, "override the configuration seed");
  cmd->add_option("--out", f.out, "artifact directory")->capture_default_str();
  cmd->add_option("--budget", f.budget, "override ppo.total_steps (environment steps)");
  cmd->add_flag("--force", f.force, "overwrite artifacts produced by a different configuration");
  cmd->add_flag("--quiet", f.quiet, "suppress JSON-lines progress on stderr");
}

pipeline::RunConfig config_of(const Flags& f) {
  return pipeline::with_overrides(pipeline::load_config(f.config), f.seed, f.budget);
}

pipeline::Options options_of(const Flags& f) {
  return {f.out, f.force, f.quiet ? nullptr : &std::cerr};
}

int report(const char* command, pipeline::Status s) {
  std::cout << command << ": " << (s == pipeline::Status::up_to_date ? "up to date" : "written") << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Social gradient fields: example collection, score-field training, MARL and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pipeline::kToolVersion);

  Flags f;
  std::string category;
  std::optional<std::uint64_t> episode_seed;
  int dsm_steps = 20000;
  bool flip = false;
  bool verify_json = false;

  auto* collect = app.add_subcommand("collect", "harvest event-triggered examples into datasets/");
  add_common(collect, f);
  auto* train_gf = app.add_subcommand("train-gf", "train gradient fields from the dataset");
  add_common(train_gf, f);
  train_gf->add_option("--category", category, "train only this field");
  auto* train_marl = app.add_subcommand("train-marl", "train per-role PPO policies");
  add_common(train_marl, f);
  auto* evaluate = app.add_subcommand("evaluate", "evaluate policies; navigation runs also write nav_table");
  add_common(evaluate, f);
  auto* cross = app.add_subcommand("cross-match", "wolf x sheep tournament");
  add_common(cross, f);
  auto* render = app.add_subcommand("render", "dump frames and field quivers for one episode");
  add_common(render, f);
  render->add_option("--episode-seed", episode_seed, "episode seed (default derived from the run seed)");
  auto* verify = app.add_subcommand("verify", "run the oracle self-check suite");
  verify->add_option("--dsm-steps", dsm_steps, "training steps for the DSM oracles")->capture_default_str();
  verify->add_flag("--flip-dsm-target", flip, "mutation check: regress onto the negated DSM target");
  verify->add_flag("--json", verify_json, "print one JSON object per oracle");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*verify) {
      bool ok = true;
      for (const auto& r : oracles::run_all({dsm_steps, flip})) {
        std::cout << (verify_json ? oracles::to_json(r).dump() : oracles::to_line(r)) << '\n' << std::flush;
        ok = ok && r.passed;
      }
      std::cout << (ok ? "verify: all oracles passed" : "verify: FAILED") << '\n';
      return ok ? 0 : 1;
    }
    const auto c = config_of(f);
    const auto o = options_of(f);
    if (*collect) return report("collect", pipeline::cmd_collect(c, o));
    if (*train_gf) return report("train-gf", pipeline::cmd_train_gf(c, o, category));
    if (*train_marl) return report("train-marl", pipeline::cmd_train_marl(c, o));
    if (*evaluate) return report("evaluate", pipeline::cmd_evaluate(c, o));
    if (*cross) return report("cross-match", pipeline::cmd_cross_match(c, o));
    if (*render) return report("render", pipeline::cmd_render(c, o, episode_seed));
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
