#pragma once

// Deterministic evaluation: tournaments, grass and navigation metrics, field
// quivers and frame dumps. Episodes use mean actions and per-episode seeds
// derived from the report seed, so a report is a pure function of its inputs.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "socialgf/marl.hpp"

namespace socialgf::evaluation {

using marl::PolicyMap;
using marl::Role;

// Per-episode seeds shared by every matchup of a report.
std::vector<std::uint64_t> episode_seeds(std::uint64_t seed, int episodes);

struct RoleStats {
  double mean = 0.0;    // per-episode return, averaged over the role's agents
  double std_error = 0.0;
};

struct EvalReport {
  std::map<Role, RoleStats> returns;
  double grass_per_100 = 0.0;  // per sheep
  double success_rate = 0.0;
  double occupation_rate = 0.0;
  int episodes = 0;
  std::string config_hash;
};

EvalReport evaluate(const world::ScenarioConfig& scenario, const PolicyMap& policies, int episodes,
                    std::uint64_t seed);
nlohmann::json to_json(const EvalReport& r);

// Affine map sending min to 0.1 and max to 1.0; all-equal inputs map to 1.0.
std::vector<double> normalize_rewards(const std::vector<double>& raw);

// Mean grass-eaten events per sheep per 100 steps. Grassland only.
double grass_rate(const world::ScenarioConfig& scenario, const PolicyMap& policies, int episodes,
                  std::uint64_t seed);

struct NavMetrics {
  double success_rate = 0.0;
  double occupation_rate = 0.0;
  int episodes = 0;
};

// Navigation scenarios only.
NavMetrics nav_metrics(const world::ScenarioConfig& scenario, const PolicyMap& policies, int episodes,
                       std::uint64_t seed);

struct NamedPolicy {
  std::string method;
  const marl::RolePolicy* policy = nullptr;  // null: uniform random actions
};

struct MatchupCell {
  double wolf_reward = 0.0;
  double sheep_reward = 0.0;
  double wolf_normalized = 0.0;
  double sheep_normalized = 0.0;
  double grass_per_100 = 0.0;
};

// Rows are wolf methods, columns sheep methods.
struct CrossMatchReport {
  std::vector<std::string> wolf_methods;
  std::vector<std::string> sheep_methods;
  std::vector<std::vector<MatchupCell>> cells;
  std::string scale;
  int episodes = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

// Needs >= 2 methods per side; every policy is checked against the scenario
// before any episode runs. Rewards are normalized per side over the matrix.
CrossMatchReport cross_match(const world::ScenarioConfig& scenario, const std::vector<NamedPolicy>& wolves,
                             const std::vector<NamedPolicy>& sheep, int episodes, std::uint64_t seed);
nlohmann::json to_json(const CrossMatchReport& r);
std::string to_text(const CrossMatchReport& r);

// Method x population table of navigation metrics.
struct NavTable {
  std::string scenario;
  std::vector<std::string> methods;
  std::vector<std::string> populations;
  std::vector<std::vector<NavMetrics>> cells;  // [method][population]
  std::string config_hash;
};

nlohmann::json to_json(const NavTable& t);
// metric: "success_rate" or "occupation_rate".
std::string to_text(const NavTable& t, const std::string& metric);

// Validates the machine-readable records; throws DataError describing the first violation.
void check_cross_match_schema(const nlohmann::json& j);
void check_nav_table_schema(const nlohmann::json& j);

struct GridSpec {
  int nx = 40;
  int ny = 40;
  double half_width = 1.0;
};

struct QuiverPoint {
  double x = 0.0, y = 0.0, u = 0.0, v = 0.0;
};

struct QuiverGrid {
  GridSpec grid;
  std::vector<QuiverPoint> points;  // row-major over y then x
};

QuiverGrid field_quiver(const std::function<world::Vec2(world::Vec2)>& probe, const GridSpec& grid = {});
// Moves `agent` of `scene` over the grid; everything else stays where it is.
QuiverGrid field_quiver(const scorefield::GradientField& field, const world::WorldState& scene,
                        std::size_t agent, const GridSpec& grid = {});
std::string to_csv(const QuiverGrid& q);

struct RenderOptions {
  bool images = false;
  int image_size = 256;
};

// Writes frames.jsonl (one record per step) and, optionally, frame_NNN.ppm
// images into out_dir. Returns the written paths.
std::vector<std::filesystem::path> render_frames(const world::ScenarioConfig& scenario,
                                                 const PolicyMap& policies, std::uint64_t seed,
                                                 const std::filesystem::path& out_dir,
                                                 const RenderOptions& options = {});

}  // namespace socialgf::evaluation
