#pragma once

// Deterministic 2D particle world: Grassland (wolves, sheep, grass, obstacles)
// and the three cooperative navigation games.

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "socialgf/rng.hpp"

namespace socialgf::world {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2& operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  double norm() const { return std::hypot(x, y); }
  bool operator==(const Vec2&) const = default;
};

enum class Kind { sheep, wolf, nav_agent, landmark, grass, obstacle };
enum class Color { none, red, green };

std::string_view to_string(Kind k);
std::string_view to_string(Color c);

struct EntityKind {
  Kind tag = Kind::obstacle;
  Color color = Color::none;
  bool operator==(const EntityKind&) const = default;
};

inline bool is_agent(Kind k) { return k == Kind::sheep || k == Kind::wolf || k == Kind::nav_agent; }

struct EntityState {
  Vec2 position;
  Vec2 velocity;
  double radius = 0.05;
  EntityKind kind;
  bool alive = true;
  bool operator==(const EntityState&) const = default;
};

// 2D force command; components are clipped to [-1, 1] by step().
struct ActionVector {
  double fx = 0.0;
  double fy = 0.0;
};

enum class Scenario { grassland, vanilla_nav, color_nav, team_nav };

std::string_view to_string(Scenario s);
Scenario parse_scenario(std::string_view s);
inline bool is_navigation(Scenario s) { return s != Scenario::grassland; }

struct Physics {
  double dt = 0.1;
  double damping = 0.25;
  double mass = 1.0;
  // Multiplies the clipped action into a force.
  double force_scale = 4.0;
  double contact_stiffness = 100.0;
  bool operator==(const Physics&) const = default;
};

struct ScenarioConfig {
  Scenario scenario = Scenario::vanilla_nav;
  int wolves = 0;
  int sheep = 0;
  // VanillaNav: agent count (landmarks equal it). ColorNav: agents per color.
  // TeamNav: agents per team.
  int agents = 0;
  // TeamNav landmark count; derived for the other navigation games.
  int landmarks = 0;
  int grass = 0;
  int obstacles = 0;
  // Fixed obstacle centres; when empty, `obstacles` are placed at random on reset.
  std::vector<Vec2> obstacle_positions;

  double half_width = 1.0;
  Physics physics;
  double wolf_max_speed = 1.0;
  double sheep_max_speed = 1.3;
  double nav_max_speed = 1.0;

  double wolf_radius = 0.075;
  double sheep_radius = 0.05;
  double nav_agent_radius = 0.15;
  double landmark_radius = 0.05;
  double grass_radius = 0.03;
  double obstacle_radius = 0.15;

  int episode_length = 100;

  static ScenarioConfig grassland(int wolves, int sheep);
  static ScenarioConfig vanilla_nav(int agents);
  static ScenarioConfig color_nav(int agents_per_color);
  static ScenarioConfig team_nav(int team_size, int landmarks);

  // Throws ConfigError on invalid populations or constants.
  void validate() const;

  int agent_count() const;
  int landmark_count() const;
  double max_speed(Kind k) const;
  double radius(Kind k) const;
  bool operator==(const ScenarioConfig&) const = default;
};

nlohmann::json to_json(const ScenarioConfig& c);
// Accepts schema_version 1; unknown keys are rejected to keep configs honest.
ScenarioConfig scenario_from_json(const nlohmann::json& j);

enum class EventKind { sheep_eaten, grass_eaten, landmark_occupied, success };
std::string_view to_string(EventKind k);

// Participants: sheep_eaten {wolf, sheep}; grass_eaten {sheep, grass};
// landmark_occupied {landmark, agent}; success {all agents, ascending}.
struct Event {
  EventKind kind = EventKind::success;
  std::vector<std::size_t> participants;
  std::uint64_t timestep = 0;
  bool operator==(const Event&) const = default;
  auto operator<=>(const Event& o) const {
    if (auto c = kind <=> o.kind; c != 0) return c;
    if (auto c = participants <=> o.participants; c != 0) return c;
    return timestep <=> o.timestep;
  }
};

// Entity order is fixed per scenario: Grassland wolves, sheep, grass, obstacles;
// navigation agents then landmarks (red before green where colored).
struct WorldState {
  std::vector<EntityState> entities;
  std::uint64_t timestep = 0;
  ScenarioConfig config;
  Rng rng;

  // Entity indices of the controllable agents, in entity order.
  std::vector<std::size_t> agents() const;
  std::vector<std::size_t> indices_of(Kind k) const;
  bool operator==(const WorldState&) const = default;
};

WorldState reset(const ScenarioConfig& config, std::uint64_t seed);

struct StepResult {
  WorldState state;
  std::vector<Event> events;
  // Entity states at detection time, before eaten entities respawn. Empty when
  // no events fired.
  std::vector<EntityState> event_frame;
};

// One action per agent (WorldState::agents() order). Throws UsageError naming
// the agent when an action is non-finite.
StepResult step(WorldState state, std::span<const ActionVector> actions);

bool overlaps(const EntityState& a, const EntityState& b);

// Events implied by the current geometry, in canonical (sorted) order.
std::vector<Event> detect_events(const WorldState& state);

// Per landmark (landmark order), whether it is correctly occupied right now.
std::vector<bool> landmark_occupancy(const WorldState& state);
bool success_predicate(const WorldState& state);

std::vector<double> observe_baseline(const WorldState& state, std::size_t agent);
std::size_t baseline_observation_size(const ScenarioConfig& config, Kind agent_kind);

// agent is an entity index.
double reward_original(const WorldState& state, std::span<const Event> events, std::size_t agent);
double reward_engineering(const WorldState& state, std::span<const Event> events,
                          std::size_t agent);

// One line-delimited trajectory record.
nlohmann::json trajectory_record(const WorldState& state, std::span<const Event> events);

}  // namespace socialgf::world
