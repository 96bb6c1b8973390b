#include "socialgf/world.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "socialgf/errors.hpp"

namespace socialgf::world {

std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::sheep:
      return "sheep";
    case Kind::wolf:
      return "wolf";
    case Kind::nav_agent:
      return "nav_agent";
    case Kind::landmark:
      return "landmark";
    case Kind::grass:
      return "grass";
    case Kind::obstacle:
      return "obstacle";
  }
  return "?";
}

std::string_view to_string(Color c) {
  switch (c) {
    case Color::none:
      return "none";
    case Color::red:
      return "red";
    case Color::green:
      return "green";
  }
  return "?";
}

std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::grassland:
      return "grassland";
    case Scenario::vanilla_nav:
      return "vanilla_nav";
    case Scenario::color_nav:
      return "color_nav";
    case Scenario::team_nav:
      return "team_nav";
  }
  return "?";
}

Scenario parse_scenario(std::string_view s) {
  if (s == "grassland") return Scenario::grassland;
  if (s == "vanilla_nav") return Scenario::vanilla_nav;
  if (s == "color_nav") return Scenario::color_nav;
  if (s == "team_nav") return Scenario::team_nav;
  throw ConfigError("unknown scenario: " + std::string(s));
}

std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::sheep_eaten:
      return "sheep_eaten";
    case EventKind::grass_eaten:
      return "grass_eaten";
    case EventKind::landmark_occupied:
      return "landmark_occupied";
    case EventKind::success:
      return "success";
  }
  return "?";
}

// ------------------------------------------------------------ ScenarioConfig

ScenarioConfig ScenarioConfig::grassland(int wolves, int sheep) {
  ScenarioConfig c;
  c.scenario = Scenario::grassland;
  c.wolves = wolves;
  c.sheep = sheep;
  c.grass = 5;
  c.obstacles = 2;
  return c;
}

ScenarioConfig ScenarioConfig::vanilla_nav(int agents) {
  ScenarioConfig c;
  c.scenario = Scenario::vanilla_nav;
  c.agents = agents;
  return c;
}

ScenarioConfig ScenarioConfig::color_nav(int agents_per_color) {
  ScenarioConfig c;
  c.scenario = Scenario::color_nav;
  c.agents = agents_per_color;
  return c;
}

ScenarioConfig ScenarioConfig::team_nav(int team_size, int landmarks) {
  ScenarioConfig c;
  c.scenario = Scenario::team_nav;
  c.agents = team_size;
  c.landmarks = landmarks;
  return c;
}

int ScenarioConfig::agent_count() const {
  switch (scenario) {
    case Scenario::grassland:
      return wolves + sheep;
    case Scenario::vanilla_nav:
      return agents;
    case Scenario::color_nav:
    case Scenario::team_nav:
      return 2 * agents;
  }
  return 0;
}

int ScenarioConfig::landmark_count() const {
  switch (scenario) {
    case Scenario::grassland:
      return 0;
    case Scenario::vanilla_nav:
      return agents;
    case Scenario::color_nav:
      return 2 * agents;
    case Scenario::team_nav:
      return landmarks;
  }
  return 0;
}

double ScenarioConfig::max_speed(Kind k) const {
  switch (k) {
    case Kind::wolf:
      return wolf_max_speed;
    case Kind::sheep:
      return sheep_max_speed;
    case Kind::nav_agent:
      return nav_max_speed;
    default:
      return 0.0;
  }
}

double ScenarioConfig::radius(Kind k) const {
  switch (k) {
    case Kind::sheep:
      return sheep_radius;
    case Kind::wolf:
      return wolf_radius;
    case Kind::nav_agent:
      return nav_agent_radius;
    case Kind::landmark:
      return landmark_radius;
    case Kind::grass:
      return grass_radius;
    case Kind::obstacle:
      return obstacle_radius;
  }
  return 0.0;
}

void ScenarioConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("scenario config: " + m); };
  const auto in_scale = [](int v) { return v == 2 || v == 4 || v == 8; };
  switch (scenario) {
    case Scenario::grassland:
      if (!in_scale(wolves) || !in_scale(sheep)) {
        fail("grassland scale must be drawn from {2,4,8}x{2,4,8}, got " + std::to_string(wolves) +
             "-" + std::to_string(sheep));
      }
      if (grass < 1) fail("grassland needs at least one grass pellet");
      if (agents != 0 || landmarks != 0) fail("grassland has no navigation agents or landmarks");
      break;
    case Scenario::vanilla_nav:
    case Scenario::color_nav:
      if (agents < 1) fail("navigation needs at least one agent");
      if (wolves || sheep || grass) fail("navigation has no wolves, sheep or grass");
      break;
    case Scenario::team_nav: {
      const bool ok = (agents == 2 && landmarks == 3) || (agents == 3 && landmarks == 5) ||
                      (agents == 4 && landmarks == 6) || (agents == 5 && landmarks == 7);
      if (!ok) fail("team navigation (team size, landmarks) must be one of (2,3),(3,5),(4,6),(5,7)");
      if (wolves || sheep || grass) fail("navigation has no wolves, sheep or grass");
      break;
    }
  }
  if (obstacles < 0 || grass < 0) fail("counts must be non-negative");
  if (!obstacle_positions.empty() && static_cast<int>(obstacle_positions.size()) != obstacles) {
    fail("obstacle_positions must list exactly `obstacles` centres");
  }
  if (!(half_width > 0)) fail("half_width must be positive");
  if (!(physics.dt > 0) || physics.damping < 0 || physics.damping >= 1 || !(physics.mass > 0) ||
      physics.force_scale < 0 || physics.contact_stiffness < 0) {
    fail("invalid physics constants");
  }
  for (double r : {wolf_radius, sheep_radius, nav_agent_radius, landmark_radius, grass_radius,
                   obstacle_radius}) {
    if (!(r > 0)) fail("radii must be positive");
  }
  for (double s : {wolf_max_speed, sheep_max_speed, nav_max_speed}) {
    if (!(s > 0)) fail("max speeds must be positive");
  }
  if (episode_length < 1) fail("episode_length must be >= 1");
}

nlohmann::json to_json(const ScenarioConfig& c) {
  nlohmann::json obstacles = nlohmann::json::array();
  for (const auto& p : c.obstacle_positions) obstacles.push_back({p.x, p.y});
  return {
      {"schema_version", 1},
      {"scenario", to_string(c.scenario)},
      {"wolves", c.wolves},
      {"sheep", c.sheep},
      {"agents", c.agents},
      {"landmarks", c.landmarks},
      {"grass", c.grass},
      {"obstacles", c.obstacles},
      {"obstacle_positions", obstacles},
      {"half_width", c.half_width},
      {"physics",
       {{"dt", c.physics.dt},
        {"damping", c.physics.damping},
        {"mass", c.physics.mass},
        {"force_scale", c.physics.force_scale},
        {"contact_stiffness", c.physics.contact_stiffness}}},
      {"max_speed", {{"wolf", c.wolf_max_speed}, {"sheep", c.sheep_max_speed}, {"nav_agent", c.nav_max_speed}}},
      {"radius",
       {{"wolf", c.wolf_radius},
        {"sheep", c.sheep_radius},
        {"nav_agent", c.nav_agent_radius},
        {"landmark", c.landmark_radius},
        {"grass", c.grass_radius},
        {"obstacle", c.obstacle_radius}}},
      {"episode_length", c.episode_length},
  };
}

namespace {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

}  // namespace

ScenarioConfig scenario_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw ConfigError("scenario config must be an object");
    const int version = j.value("schema_version", 1);
    if (version != 1) throw ConfigError("unsupported scenario schema_version " + std::to_string(version));
    reject_unknown(j,
                   {"schema_version", "scenario", "wolves", "sheep", "agents", "landmarks", "grass",
                    "obstacles", "obstacle_positions", "half_width", "physics", "max_speed",
                    "radius", "episode_length"},
                   "scenario");
    ScenarioConfig c;
    c.scenario = parse_scenario(j.at("scenario").get<std::string>());
    // Grassland pellet and obstacle counts default to the factory values.
    if (c.scenario == Scenario::grassland) c = ScenarioConfig::grassland(0, 0);
    read_opt(j, "wolves", c.wolves);
    read_opt(j, "sheep", c.sheep);
    read_opt(j, "agents", c.agents);
    read_opt(j, "landmarks", c.landmarks);
    read_opt(j, "grass", c.grass);
    read_opt(j, "obstacles", c.obstacles);
    if (auto it = j.find("obstacle_positions"); it != j.end()) {
      for (const auto& p : *it) c.obstacle_positions.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
    read_opt(j, "half_width", c.half_width);
    if (auto it = j.find("physics"); it != j.end()) {
      reject_unknown(*it, {"dt", "damping", "mass", "force_scale", "contact_stiffness"}, "physics");
      read_opt(*it, "dt", c.physics.dt);
      read_opt(*it, "damping", c.physics.damping);
      read_opt(*it, "mass", c.physics.mass);
      read_opt(*it, "force_scale", c.physics.force_scale);
      read_opt(*it, "contact_stiffness", c.physics.contact_stiffness);
    }
    if (auto it = j.find("max_speed"); it != j.end()) {
      reject_unknown(*it, {"wolf", "sheep", "nav_agent"}, "max_speed");
      read_opt(*it, "wolf", c.wolf_max_speed);
      read_opt(*it, "sheep", c.sheep_max_speed);
      read_opt(*it, "nav_agent", c.nav_max_speed);
    }
    if (auto it = j.find("radius"); it != j.end()) {
      reject_unknown(*it, {"wolf", "sheep", "nav_agent", "landmark", "grass", "obstacle"}, "radius");
      read_opt(*it, "wolf", c.wolf_radius);
      read_opt(*it, "sheep", c.sheep_radius);
      read_opt(*it, "nav_agent", c.nav_agent_radius);
      read_opt(*it, "landmark", c.landmark_radius);
      read_opt(*it, "grass", c.grass_radius);
      read_opt(*it, "obstacle", c.obstacle_radius);
    }
    read_opt(j, "episode_length", c.episode_length);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed scenario config: ") + e.what());
  }
}

// ---------------------------------------------------------------- WorldState

std::vector<std::size_t> WorldState::agents() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entities.size(); ++i) {
    if (is_agent(entities[i].kind.tag)) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> WorldState::indices_of(Kind k) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entities.size(); ++i) {
    if (entities[i].kind.tag == k) out.push_back(i);
  }
  return out;
}

bool overlaps(const EntityState& a, const EntityState& b) {
  return (a.position - b.position).norm() < a.radius + b.radius;
}

namespace {

constexpr int kPlacementRetries = 1000;

// Uniform position inside the bounds that does not overlap any placed entity.
Vec2 free_position(const std::vector<EntityState>& placed, double radius, double half_width,
                   Rng& rng, std::optional<std::size_t> skip = std::nullopt) {
  const double lim = half_width - radius;
  if (lim <= 0) throw ConfigError("entity radius exceeds world half-width");
  for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
    const Vec2 p{rng.uniform(-lim, lim), rng.uniform(-lim, lim)};
    bool clear = true;
    for (std::size_t i = 0; i < placed.size() && clear; ++i) {
      if (skip && *skip == i) continue;
      if ((placed[i].position - p).norm() < placed[i].radius + radius) clear = false;
    }
    if (clear) return p;
  }
  throw ConfigError("infeasible packing: could not place an entity of radius " +
                    std::to_string(radius) + " after " + std::to_string(kPlacementRetries) +
                    " attempts");
}

EntityState make_entity(const ScenarioConfig& c, Kind k, Color color = Color::none) {
  EntityState e;
  e.kind = {k, color};
  e.radius = c.radius(k);
  return e;
}

bool color_matters(Scenario s) { return s == Scenario::color_nav; }

// Maximum bipartite matching (Kuhn) of agents onto landmarks over `edges`.
std::size_t max_matching(std::size_t agents, std::size_t landmarks,
                         const std::vector<std::vector<std::size_t>>& edges) {
  std::vector<int> owner(landmarks, -1);
  std::size_t matched = 0;
  for (std::size_t a = 0; a < agents; ++a) {
    std::vector<char> seen(landmarks, 0);
    std::function<bool(std::size_t)> augment = [&](std::size_t u) {
      for (std::size_t l : edges[u]) {
        if (seen[l]) continue;
        seen[l] = 1;
        if (owner[l] < 0 || augment(static_cast<std::size_t>(owner[l]))) {
          owner[l] = static_cast<int>(u);
          return true;
        }
      }
      return false;
    };
    if (augment(a)) ++matched;
  }
  return matched;
}

// Overlapping (i, j) pairs, i < j, found by sweeping along x.
std::vector<std::pair<std::size_t, std::size_t>> overlapping_pairs(
    const std::vector<EntityState>& es) {
  double max_r = 0.0;
  for (const auto& e : es) max_r = std::max(max_r, e.radius);
  std::vector<std::size_t> order(es.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return es[a].position.x < es[b].position.x || (es[a].position.x == es[b].position.x && a < b);
  });
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < order.size(); ++s) {
    const auto& a = es[order[s]];
    for (std::size_t t = s + 1; t < order.size(); ++t) {
      const auto& b = es[order[t]];
      if (b.position.x - a.position.x >= a.radius + max_r) break;
      if (overlaps(a, b)) out.emplace_back(std::min(order[s], order[t]), std::max(order[s], order[t]));
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool occupant_counts(const EntityState& agent, const EntityState& landmark, Scenario s) {
  return !color_matters(s) || agent.kind.color == landmark.kind.color;
}

}  // namespace

WorldState reset(const ScenarioConfig& config, std::uint64_t seed) {
  config.validate();
  WorldState w;
  w.config = config;
  w.rng = Rng(derive_seed(seed, 0x776f726c64ULL));
  auto& es = w.entities;
  const double hw = config.half_width;

  // Placement order: obstacles, landmarks, grass, agents. Entity order is set afterwards.
  std::vector<EntityState> placed;
  std::vector<EntityState> obstacles;
  for (int i = 0; i < config.obstacles; ++i) {
    auto e = make_entity(config, Kind::obstacle);
    e.position = config.obstacle_positions.empty()
                     ? free_position(placed, e.radius, hw, w.rng)
                     : config.obstacle_positions[static_cast<std::size_t>(i)];
    placed.push_back(e);
    obstacles.push_back(e);
  }
  auto place = [&](EntityState e) {
    e.position = free_position(placed, e.radius, hw, w.rng);
    placed.push_back(e);
    return e;
  };

  switch (config.scenario) {
    case Scenario::grassland: {
      std::vector<EntityState> grass;
      for (int i = 0; i < config.grass; ++i) grass.push_back(place(make_entity(config, Kind::grass)));
      for (int i = 0; i < config.wolves; ++i) es.push_back(place(make_entity(config, Kind::wolf)));
      for (int i = 0; i < config.sheep; ++i) es.push_back(place(make_entity(config, Kind::sheep)));
      es.insert(es.end(), grass.begin(), grass.end());
      break;
    }
    case Scenario::vanilla_nav: {
      std::vector<EntityState> lm;
      for (int i = 0; i < config.agents; ++i) lm.push_back(place(make_entity(config, Kind::landmark)));
      for (int i = 0; i < config.agents; ++i) es.push_back(place(make_entity(config, Kind::nav_agent)));
      es.insert(es.end(), lm.begin(), lm.end());
      break;
    }
    case Scenario::color_nav: {
      std::vector<EntityState> lm;
      for (Color c : {Color::red, Color::green}) {
        for (int i = 0; i < config.agents; ++i) lm.push_back(place(make_entity(config, Kind::landmark, c)));
      }
      for (Color c : {Color::red, Color::green}) {
        for (int i = 0; i < config.agents; ++i) es.push_back(place(make_entity(config, Kind::nav_agent, c)));
      }
      es.insert(es.end(), lm.begin(), lm.end());
      break;
    }
    case Scenario::team_nav: {
      std::vector<EntityState> lm;
      for (int i = 0; i < config.landmarks; ++i) lm.push_back(place(make_entity(config, Kind::landmark)));
      for (Color c : {Color::red, Color::green}) {
        for (int i = 0; i < config.agents; ++i) es.push_back(place(make_entity(config, Kind::nav_agent, c)));
      }
      es.insert(es.end(), lm.begin(), lm.end());
      break;
    }
  }
  es.insert(es.end(), obstacles.begin(), obstacles.end());
  return w;
}

std::vector<Event> detect_events(const WorldState& state) {
  const auto& es = state.entities;
  const auto s = state.config.scenario;
  const auto t = state.timestep;
  std::vector<Event> events;
  const auto pairs = overlapping_pairs(es);

  if (s == Scenario::grassland) {
    std::vector<std::size_t> grass_eater(es.size(), es.size());
    for (auto [i, j] : pairs) {
      const Kind ki = es[i].kind.tag;
      const Kind kj = es[j].kind.tag;
      if ((ki == Kind::wolf && kj == Kind::sheep) || (ki == Kind::sheep && kj == Kind::wolf)) {
        const auto wolf = ki == Kind::wolf ? i : j;
        const auto sheep = ki == Kind::wolf ? j : i;
        events.push_back({EventKind::sheep_eaten, {wolf, sheep}, t});
      } else if ((ki == Kind::sheep && kj == Kind::grass) || (ki == Kind::grass && kj == Kind::sheep)) {
        const auto sheep = ki == Kind::sheep ? i : j;
        const auto grass = ki == Kind::sheep ? j : i;
        // Lowest-index overlapping sheep eats the pellet.
        grass_eater[grass] = std::min(grass_eater[grass], sheep);
      }
    }
    for (std::size_t g = 0; g < es.size(); ++g) {
      if (grass_eater[g] < es.size()) events.push_back({EventKind::grass_eaten, {grass_eater[g], g}, t});
    }
  } else {
    const auto agents = state.agents();
    const auto landmarks = state.indices_of(Kind::landmark);
    for (auto [i, j] : pairs) {
      const Kind ki = es[i].kind.tag;
      const Kind kj = es[j].kind.tag;
      if (ki == Kind::nav_agent && kj == Kind::landmark && occupant_counts(es[i], es[j], s)) {
        events.push_back({EventKind::landmark_occupied, {j, i}, t});
      } else if (ki == Kind::landmark && kj == Kind::nav_agent && occupant_counts(es[j], es[i], s)) {
        events.push_back({EventKind::landmark_occupied, {i, j}, t});
      }
    }
    if (success_predicate(state)) events.push_back({EventKind::success, agents, t});
  }
  std::sort(events.begin(), events.end());
  return events;
}

std::vector<bool> landmark_occupancy(const WorldState& state) {
  const auto& es = state.entities;
  const auto s = state.config.scenario;
  const auto agents = state.agents();
  const auto landmarks = state.indices_of(Kind::landmark);
  std::vector<bool> out;
  for (auto l : landmarks) {
    bool red = false, green = false, any = false;
    for (auto a : agents) {
      if (!overlaps(es[a], es[l])) continue;
      if (!occupant_counts(es[a], es[l], s)) continue;
      any = true;
      red = red || es[a].kind.color == Color::red;
      green = green || es[a].kind.color == Color::green;
    }
    out.push_back(s == Scenario::team_nav ? (red && green) : any);
  }
  return out;
}

bool success_predicate(const WorldState& state) {
  const auto s = state.config.scenario;
  if (s == Scenario::grassland) return false;
  const auto& es = state.entities;
  const auto agents = state.agents();
  const auto landmarks = state.indices_of(Kind::landmark);
  if (s == Scenario::team_nav) {
    const auto occ = landmark_occupancy(state);
    return std::all_of(occ.begin(), occ.end(), [](bool b) { return b; });
  }
  // Vanilla and color: a conflict-free assignment covering every landmark.
  for (Color c : s == Scenario::color_nav ? std::vector<Color>{Color::red, Color::green}
                                          : std::vector<Color>{Color::none}) {
    std::vector<std::size_t> group_agents, group_landmarks;
    for (auto a : agents) {
      if (es[a].kind.color == c) group_agents.push_back(a);
    }
    for (auto l : landmarks) {
      if (es[l].kind.color == c) group_landmarks.push_back(l);
    }
    std::vector<std::vector<std::size_t>> edges(group_agents.size());
    for (std::size_t i = 0; i < group_agents.size(); ++i) {
      for (std::size_t j = 0; j < group_landmarks.size(); ++j) {
        if (overlaps(es[group_agents[i]], es[group_landmarks[j]])) edges[i].push_back(j);
      }
    }
    if (max_matching(group_agents.size(), group_landmarks.size(), edges) != group_landmarks.size()) {
      return false;
    }
  }
  return true;
}

StepResult step(WorldState state, std::span<const ActionVector> actions) {
  const auto agents = state.agents();
  if (actions.size() != agents.size()) {
    throw UsageError("expected " + std::to_string(agents.size()) + " actions, got " +
                     std::to_string(actions.size()));
  }
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (!std::isfinite(actions[i].fx) || !std::isfinite(actions[i].fy)) {
      throw UsageError("non-finite action for agent " + std::to_string(i));
    }
  }
  const auto& cfg = state.config;
  const auto& ph = cfg.physics;
  const double hw = cfg.half_width;
  auto& es = state.entities;
  const auto obstacles = state.indices_of(Kind::obstacle);

  // Forces are computed from the pre-step configuration for every agent.
  std::vector<Vec2> forces(agents.size());
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const auto& e = es[agents[i]];
    Vec2 f{std::clamp(actions[i].fx, -1.0, 1.0), std::clamp(actions[i].fy, -1.0, 1.0)};
    f = f * ph.force_scale;
    for (auto o : obstacles) {
      const Vec2 d = e.position - es[o].position;
      const double dist = d.norm();
      const double pen = e.radius + es[o].radius - dist;
      if (pen > 0 && dist > 0) f += d * (ph.contact_stiffness * pen / dist);
    }
    if (const double over = e.position.x + e.radius - hw; over > 0) f.x -= ph.contact_stiffness * over;
    if (const double over = -hw - (e.position.x - e.radius); over > 0) f.x += ph.contact_stiffness * over;
    if (const double over = e.position.y + e.radius - hw; over > 0) f.y -= ph.contact_stiffness * over;
    if (const double over = -hw - (e.position.y - e.radius); over > 0) f.y += ph.contact_stiffness * over;
    forces[i] = f;
  }
  for (std::size_t i = 0; i < agents.size(); ++i) {
    auto& e = es[agents[i]];
    e.velocity = e.velocity * (1.0 - ph.damping) + forces[i] * (ph.dt / ph.mass);
    const double vmax = cfg.max_speed(e.kind.tag);
    if (const double speed = e.velocity.norm(); speed > vmax) e.velocity = e.velocity * (vmax / speed);
    e.position += e.velocity * ph.dt;
    if (e.position.x > hw || e.position.x < -hw) {
      e.position.x = std::clamp(e.position.x, -hw, hw);
      e.velocity.x = 0.0;
    }
    if (e.position.y > hw || e.position.y < -hw) {
      e.position.y = std::clamp(e.position.y, -hw, hw);
      e.velocity.y = 0.0;
    }
  }
  state.timestep += 1;

  StepResult r;
  r.events = detect_events(state);
  if (!r.events.empty()) r.event_frame = es;
  // Consequences: eaten sheep and eaten grass reappear at random free spots.
  for (const auto& ev : r.events) {
    std::size_t target = es.size();
    if (ev.kind == EventKind::sheep_eaten) target = ev.participants[1];
    if (ev.kind == EventKind::grass_eaten) target = ev.participants[1];
    if (target == es.size()) continue;
    es[target].position = free_position(es, es[target].radius, hw, state.rng, target);
    es[target].velocity = {};
  }
  r.state = std::move(state);
  return r;
}

// --------------------------------------------------------------- observations

std::size_t baseline_observation_size(const ScenarioConfig& c, Kind agent_kind) {
  (void)agent_kind;
  const std::size_t n = static_cast<std::size_t>(c.agent_count());
  const std::size_t l = static_cast<std::size_t>(c.landmark_count());
  switch (c.scenario) {
    case Scenario::grassland:
      return 4 + 4 * (n - 1) + 2 * static_cast<std::size_t>(c.grass) +
             2 * static_cast<std::size_t>(c.obstacles);
    case Scenario::vanilla_nav:
      return 4 + 4 * (n - 1) + 2 * l;
    case Scenario::color_nav:
    case Scenario::team_nav:
      return 6 + 6 * (n - 1) + 4 * l;
  }
  return 0;
}

std::vector<double> observe_baseline(const WorldState& state, std::size_t agent) {
  const auto& es = state.entities;
  if (agent >= es.size() || !is_agent(es[agent].kind.tag)) throw UsageError("not an agent index");
  const auto& self = es[agent];
  if (!self.alive) throw UsageError("agent is not alive");
  const bool colored = state.config.scenario == Scenario::color_nav ||
                       state.config.scenario == Scenario::team_nav;
  auto color_one_hot = [](std::vector<double>& out, Color c) {
    out.push_back(c == Color::red ? 1.0 : 0.0);
    out.push_back(c == Color::green ? 1.0 : 0.0);
  };
  std::vector<double> out = {self.position.x, self.position.y, self.velocity.x, self.velocity.y};
  if (colored) color_one_hot(out, self.kind.color);
  for (std::size_t i = 0; i < es.size(); ++i) {
    if (i == agent || !is_agent(es[i].kind.tag)) continue;
    const Vec2 d = es[i].position - self.position;
    out.insert(out.end(), {d.x, d.y, es[i].velocity.x, es[i].velocity.y});
    if (colored) color_one_hot(out, es[i].kind.color);
  }
  for (Kind k : {Kind::landmark, Kind::grass, Kind::obstacle}) {
    for (std::size_t i = 0; i < es.size(); ++i) {
      if (es[i].kind.tag != k) continue;
      const Vec2 d = es[i].position - self.position;
      out.insert(out.end(), {d.x, d.y});
      if (colored && k == Kind::landmark) color_one_hot(out, es[i].kind.color);
    }
  }
  return out;
}

// -------------------------------------------------------------------- rewards

double reward_original(const WorldState& state, std::span<const Event> events, std::size_t agent) {
  const Kind k = state.entities.at(agent).kind.tag;
  double r = 0.0;
  bool eaten = false;
  for (const auto& ev : events) {
    switch (ev.kind) {
      case EventKind::sheep_eaten:
        if (k == Kind::wolf && ev.participants[0] == agent) r += 5.0;
        if (k == Kind::sheep && ev.participants[1] == agent) eaten = true;
        break;
      case EventKind::grass_eaten:
        if (k == Kind::sheep && ev.participants[0] == agent) r += 2.0;
        break;
      case EventKind::success:
        if (k == Kind::nav_agent) r += 10.0;
        break;
      case EventKind::landmark_occupied:
        break;
    }
  }
  if (eaten) r -= 5.0;
  return r;
}

double reward_engineering(const WorldState& state, std::span<const Event> events,
                          std::size_t agent) {
  const auto& es = state.entities;
  const auto& self = es.at(agent);
  double r = reward_original(state, events, agent);
  auto min_distance = [&](auto&& accept) {
    double best = -1.0;
    for (const auto& e : es) {
      if (&e == &self || !accept(e)) continue;
      const double d = (e.position - self.position).norm();
      if (best < 0 || d < best) best = d;
    }
    return best < 0 ? 0.0 : best;
  };
  switch (self.kind.tag) {
    case Kind::wolf:
      r -= min_distance([](const EntityState& e) { return e.kind.tag == Kind::sheep; });
      break;
    case Kind::sheep:
      r -= min_distance([](const EntityState& e) { return e.kind.tag == Kind::grass; });
      break;
    case Kind::nav_agent: {
      const auto s = state.config.scenario;
      r -= min_distance([&](const EntityState& e) {
        return e.kind.tag == Kind::landmark && occupant_counts(self, e, s);
      });
      const bool occupies = std::any_of(events.begin(), events.end(), [&](const Event& ev) {
        return ev.kind == EventKind::landmark_occupied && ev.participants[1] == agent;
      });
      if (occupies) r += 1.0;
      break;
    }
    default:
      break;
  }
  return r;
}

nlohmann::json trajectory_record(const WorldState& state, std::span<const Event> events) {
  nlohmann::json ents = nlohmann::json::array();
  for (const auto& e : state.entities) {
    ents.push_back({{"kind", to_string(e.kind.tag)},
                    {"color", to_string(e.kind.color)},
                    {"x", e.position.x},
                    {"y", e.position.y},
                    {"vx", e.velocity.x},
                    {"vy", e.velocity.y},
                    {"r", e.radius},
                    {"alive", e.alive}});
  }
  nlohmann::json evs = nlohmann::json::array();
  for (const auto& ev : events) {
    evs.push_back({{"kind", to_string(ev.kind)}, {"participants", ev.participants}, {"t", ev.timestep}});
  }
  return {{"t", state.timestep}, {"scenario", to_string(state.config.scenario)}, {"entities", ents},
          {"events", evs}};
}

}  // namespace socialgf::world
