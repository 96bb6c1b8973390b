#include "socialgf/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "socialgf/errors.hpp"

namespace socialgf::evaluation {

using world::Kind;

namespace {

std::string role_name(Role r) { return std::string(examples::to_string(r)); }

RoleStats stats_of(const std::vector<double>& xs) {
  RoleStats s;
  if (xs.empty()) return s;
  const double n = static_cast<double>(xs.size());
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std_error = std::sqrt(ss / (n - 1.0) / n);
  }
  return s;
}

void check_policies(const world::ScenarioConfig& scenario, const PolicyMap& policies) {
  for (Role r : marl::scenario_roles(scenario)) {
    const auto it = policies.find(r);
    if (it == policies.end()) throw UsageError("no policy given for role " + role_name(r));
    if (it->second) marl::check_compatible(*it->second, scenario);
  }
}

std::string fixed(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::vector<std::uint64_t> episode_seeds(std::uint64_t seed, int episodes) {
  if (episodes < 0) throw UsageError("episode count must be >= 0");
  std::vector<std::uint64_t> s(static_cast<std::size_t>(episodes));
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = derive_seed(seed, 0xe9a1, i);
  return s;
}

EvalReport evaluate(const world::ScenarioConfig& scenario, const PolicyMap& policies, int episodes,
                    std::uint64_t seed) {
  if (episodes < 1) throw UsageError("evaluation needs at least one episode");
  check_policies(scenario, policies);
  const auto seeds = episode_seeds(seed, episodes);
  const auto outcomes = marl::run_episodes(scenario, policies, seeds, true);
  EvalReport r;
  r.episodes = episodes;
  for (Role role : marl::scenario_roles(scenario)) {
    std::vector<double> xs;
    for (const auto& o : outcomes) xs.push_back(o.mean_return.at(role));
    r.returns[role] = stats_of(xs);
  }
  const double n = static_cast<double>(outcomes.size());
  if (world::is_navigation(scenario.scenario)) {
    double s = 0.0, occ = 0.0;
    for (const auto& o : outcomes) {
      s += o.final_success ? 1.0 : 0.0;
      occ += o.occupation;
    }
    r.success_rate = s / n;
    r.occupation_rate = occ / n;
  } else {
    double grass = 0.0;
    for (const auto& o : outcomes) grass += o.grass_eaten;
    r.grass_per_100 = grass / n / scenario.sheep * 100.0 / scenario.episode_length;
  }
  return r;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json roles = nlohmann::json::object();
  for (const auto& [role, s] : r.returns) roles[role_name(role)] = {{"mean", s.mean}, {"std_error", s.std_error}};
  return {{"schema", "eval_report/v1"},
          {"units", "return = per-episode sum of event rewards, averaged over the role's agents"},
          {"returns", roles},
          {"grass_per_100_steps", r.grass_per_100},
          {"success_rate", r.success_rate},
          {"occupation_rate", r.occupation_rate},
          {"episodes", r.episodes},
          {"config_hash", r.config_hash}};
}

std::vector<double> normalize_rewards(const std::vector<double>& raw) {
  if (raw.empty()) return {};
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  const double min = *lo, max = *hi;
  std::vector<double> out(raw.size(), 1.0);
  if (!(max > min)) return out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] == min) out[i] = 0.1;
    else if (raw[i] == max) out[i] = 1.0;
    else out[i] = 0.1 + 0.9 * (raw[i] - min) / (max - min);
  }
  return out;
}

double grass_rate(const world::ScenarioConfig& scenario, const PolicyMap& policies, int episodes,
                  std::uint64_t seed) {
  if (scenario.scenario != world::Scenario::grassland) throw UsageError("grass_rate needs a grassland scenario");
  return evaluate(scenario, policies, episodes, seed).grass_per_100;
}

NavMetrics nav_metrics(const world::ScenarioConfig& scenario, const PolicyMap& policies, int episodes,
                       std::uint64_t seed) {
  if (!world::is_navigation(scenario.scenario)) throw UsageError("nav_metrics needs a navigation scenario");
  const auto r = evaluate(scenario, policies, episodes, seed);
  return {r.success_rate, r.occupation_rate, r.episodes};
}

// ---------------------------------------------------------------------------
// Tournaments

CrossMatchReport cross_match(const world::ScenarioConfig& scenario, const std::vector<NamedPolicy>& wolves,
                             const std::vector<NamedPolicy>& sheep, int episodes, std::uint64_t seed) {
  if (scenario.scenario != world::Scenario::grassland) throw UsageError("cross_match needs a grassland scenario");
  if (wolves.size() < 2 || sheep.size() < 2) throw UsageError("cross_match needs at least two methods per side");
  if (episodes < 1) throw UsageError("cross_match needs at least one episode");
  for (const auto& w : wolves) {
    if (w.policy) marl::check_compatible(*w.policy, scenario);
  }
  for (const auto& s : sheep) {
    if (s.policy) marl::check_compatible(*s.policy, scenario);
  }
  CrossMatchReport r;
  r.scale = std::to_string(scenario.wolves) + "-" + std::to_string(scenario.sheep);
  r.episodes = episodes;
  r.seed = seed;
  for (const auto& w : wolves) r.wolf_methods.push_back(w.method);
  for (const auto& s : sheep) r.sheep_methods.push_back(s.method);
  r.cells.assign(wolves.size(), std::vector<MatchupCell>(sheep.size()));
  std::vector<double> wolf_raw, sheep_raw;
  for (std::size_t i = 0; i < wolves.size(); ++i) {
    for (std::size_t j = 0; j < sheep.size(); ++j) {
      const PolicyMap pm{{Role::wolf, wolves[i].policy}, {Role::sheep, sheep[j].policy}};
      const auto e = evaluate(scenario, pm, episodes, seed);
      auto& c = r.cells[i][j];
      c.wolf_reward = e.returns.at(Role::wolf).mean;
      c.sheep_reward = e.returns.at(Role::sheep).mean;
      c.grass_per_100 = e.grass_per_100;
      wolf_raw.push_back(c.wolf_reward);
      sheep_raw.push_back(c.sheep_reward);
    }
  }
  const auto wn = normalize_rewards(wolf_raw);
  const auto sn = normalize_rewards(sheep_raw);
  for (std::size_t i = 0; i < wolves.size(); ++i) {
    for (std::size_t j = 0; j < sheep.size(); ++j) {
      r.cells[i][j].wolf_normalized = wn[i * sheep.size() + j];
      r.cells[i][j].sheep_normalized = sn[i * sheep.size() + j];
    }
  }
  return r;
}

nlohmann::json to_json(const CrossMatchReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& row : r.cells) {
    nlohmann::json jr = nlohmann::json::array();
    for (const auto& c : row) {
      jr.push_back({{"wolf_reward", c.wolf_reward},
                    {"sheep_reward", c.sheep_reward},
                    {"wolf_normalized", c.wolf_normalized},
                    {"sheep_normalized", c.sheep_normalized},
                    {"grass_per_100_steps", c.grass_per_100}});
    }
    cells.push_back(jr);
  }
  return {{"schema", "cross_match/v1"},
          {"units", "per-episode mean reward; rows = wolf method, columns = sheep method"},
          {"scale", r.scale},
          {"wolf_methods", r.wolf_methods},
          {"sheep_methods", r.sheep_methods},
          {"cells", cells},
          {"episodes", r.episodes},
          {"seed", r.seed},
          {"config_hash", r.config_hash}};
}

std::string to_text(const CrossMatchReport& r) {
  std::ostringstream os;
  os << "Cross-match rewards, grassland " << r.scale << ", " << r.episodes
     << " episodes (per-episode mean; cell = wolf / sheep)\n";
  auto table = [&](bool normalized) {
    os << "wolf \\ sheep";
    for (const auto& s : r.sheep_methods) os << " | " << s;
    os << "\n";
    for (std::size_t i = 0; i < r.cells.size(); ++i) {
      os << r.wolf_methods[i];
      for (const auto& c : r.cells[i]) {
        const double w = normalized ? c.wolf_normalized : c.wolf_reward;
        const double s = normalized ? c.sheep_normalized : c.sheep_reward;
        os << " | " << fixed(w) << " / " << fixed(s);
      }
      os << "\n";
    }
  };
  table(false);
  os << "\nNormalized to [0.1, 1] per side\n";
  table(true);
  return os.str();
}

nlohmann::json to_json(const NavTable& t) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& row : t.cells) {
    nlohmann::json jr = nlohmann::json::array();
    for (const auto& c : row) {
      jr.push_back({{"success_rate", c.success_rate}, {"occupation_rate", c.occupation_rate}, {"episodes", c.episodes}});
    }
    cells.push_back(jr);
  }
  return {{"schema", "nav_table/v1"},
          {"scenario", t.scenario},
          {"methods", t.methods},
          {"populations", t.populations},
          {"cells", cells},
          {"config_hash", t.config_hash}};
}

std::string to_text(const NavTable& t, const std::string& metric) {
  if (metric != "success_rate" && metric != "occupation_rate") {
    throw UsageError("unknown navigation metric '" + metric + "'");
  }
  std::ostringstream os;
  os << (metric == "success_rate" ? "Final-step success rate" : "Occupation rate") << ", " << t.scenario << "\n";
  os << "method";
  for (const auto& p : t.populations) os << " | " << p;
  os << "\n";
  for (std::size_t i = 0; i < t.methods.size(); ++i) {
    os << t.methods[i];
    for (const auto& c : t.cells.at(i)) {
      os << " | " << fixed(metric == "success_rate" ? c.success_rate : c.occupation_rate);
    }
    os << "\n";
  }
  return os.str();
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw DataError("schema violation: " + what);
}

void require_names(const nlohmann::json& j, const char* key, std::size_t min) {
  require(j.contains(key) && j[key].is_array() && j[key].size() >= min,
          std::string(key) + " must be an array of at least " + std::to_string(min) + " names");
  for (const auto& s : j[key]) require(s.is_string(), std::string(key) + " entries must be strings");
}

bool in_unit(const nlohmann::json& v, double lo, double hi) {
  return v.is_number() && v.get<double>() >= lo - 1e-12 && v.get<double>() <= hi + 1e-12;
}

}  // namespace

void check_cross_match_schema(const nlohmann::json& j) {
  require(j.is_object(), "report must be an object");
  require(j.value("schema", "") == "cross_match/v1", "schema tag must be cross_match/v1");
  require_names(j, "wolf_methods", 2);
  require_names(j, "sheep_methods", 2);
  require(j.contains("episodes") && j["episodes"].is_number_integer() && j["episodes"].get<int>() > 0,
          "episodes must be a positive integer");
  require(j.contains("scale") && j["scale"].is_string(), "scale must be a string");
  const auto rows = j["wolf_methods"].size(), cols = j["sheep_methods"].size();
  require(j.contains("cells") && j["cells"].is_array() && j["cells"].size() == rows, "cells must have one row per wolf method");
  for (const auto& row : j["cells"]) {
    require(row.is_array() && row.size() == cols, "each cells row must have one entry per sheep method");
    for (const auto& c : row) {
      require(c.contains("wolf_reward") && c["wolf_reward"].is_number(), "wolf_reward must be a number");
      require(c.contains("sheep_reward") && c["sheep_reward"].is_number(), "sheep_reward must be a number");
      require(c.contains("wolf_normalized") && in_unit(c["wolf_normalized"], 0.1, 1.0), "wolf_normalized must lie in [0.1, 1]");
      require(c.contains("sheep_normalized") && in_unit(c["sheep_normalized"], 0.1, 1.0), "sheep_normalized must lie in [0.1, 1]");
      require(c.contains("grass_per_100_steps") && c["grass_per_100_steps"].is_number() &&
                  c["grass_per_100_steps"].get<double>() >= 0.0,
              "grass_per_100_steps must be a non-negative number");
    }
  }
}

void check_nav_table_schema(const nlohmann::json& j) {
  require(j.is_object(), "report must be an object");
  require(j.value("schema", "") == "nav_table/v1", "schema tag must be nav_table/v1");
  require(j.contains("scenario") && j["scenario"].is_string(), "scenario must be a string");
  require_names(j, "methods", 1);
  require_names(j, "populations", 1);
  const auto rows = j["methods"].size(), cols = j["populations"].size();
  require(j.contains("cells") && j["cells"].is_array() && j["cells"].size() == rows, "cells must have one row per method");
  for (const auto& row : j["cells"]) {
    require(row.is_array() && row.size() == cols, "each cells row must have one entry per population");
    for (const auto& c : row) {
      require(c.contains("success_rate") && in_unit(c["success_rate"], 0.0, 1.0), "success_rate must lie in [0, 1]");
      require(c.contains("occupation_rate") && in_unit(c["occupation_rate"], 0.0, 1.0), "occupation_rate must lie in [0, 1]");
      require(c.contains("episodes") && c["episodes"].is_number_integer(), "episodes must be an integer");
    }
  }
}

// ---------------------------------------------------------------------------
// Quivers

namespace {

std::vector<world::Vec2> grid_points(const GridSpec& g) {
  if (g.nx < 1 || g.ny < 1 || !(g.half_width > 0.0)) throw UsageError("quiver grid must be non-empty");
  std::vector<world::Vec2> pts;
  pts.reserve(static_cast<std::size_t>(g.nx * g.ny));
  auto coord = [&](int i, int n) { return n == 1 ? 0.0 : -g.half_width + 2.0 * g.half_width * i / (n - 1); };
  for (int iy = 0; iy < g.ny; ++iy) {
    for (int ix = 0; ix < g.nx; ++ix) pts.push_back({coord(ix, g.nx), coord(iy, g.ny)});
  }
  return pts;
}

}  // namespace

QuiverGrid field_quiver(const std::function<world::Vec2(world::Vec2)>& probe, const GridSpec& grid) {
  QuiverGrid q{grid, {}};
  for (const auto& p : grid_points(grid)) {
    const auto v = probe(p);
    q.points.push_back({p.x, p.y, v.x, v.y});
  }
  return q;
}

QuiverGrid field_quiver(const scorefield::GradientField& field, const world::WorldState& scene,
                        std::size_t agent, const GridSpec& grid) {
  if (agent >= scene.entities.size()) throw UsageError("quiver probe agent out of range");
  const auto pts = grid_points(grid);
  std::vector<world::WorldState> states(pts.size(), scene);
  std::vector<examples::Configuration> configs(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    states[i].entities[agent].position = pts[i];
    configs[i] = examples::gather(states[i], agent, field.category.layout);
  }
  const auto values = scorefield::eval_field_batch(field, configs);
  QuiverGrid q{grid, {}};
  for (std::size_t i = 0; i < pts.size(); ++i) q.points.push_back({pts[i].x, pts[i].y, values[i].x, values[i].y});
  return q;
}

std::string to_csv(const QuiverGrid& q) {
  std::ostringstream os;
  os.precision(10);
  os << "x,y,u,v\n";
  for (const auto& p : q.points) os << p.x << "," << p.y << "," << p.u << "," << p.v << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Frames

namespace {

using Rgb = std::array<std::uint8_t, 3>;

Rgb color_of(const world::EntityState& e) {
  using world::Color;
  switch (e.kind.tag) {
    case Kind::wolf:
      return {220, 40, 40};
    case Kind::sheep:
      return {40, 80, 220};
    case Kind::grass:
      return {60, 170, 60};
    case Kind::obstacle:
      return {120, 120, 120};
    case Kind::landmark:
      if (e.kind.color == Color::red) return {240, 150, 150};
      if (e.kind.color == Color::green) return {150, 220, 150};
      return {20, 20, 20};
    case Kind::nav_agent:
      if (e.kind.color == Color::red) return {220, 40, 40};
      if (e.kind.color == Color::green) return {40, 170, 40};
      return {40, 80, 220};
  }
  return {0, 0, 0};
}

std::string hex(const Rgb& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

int draw_rank(Kind k) {
  switch (k) {
    case Kind::obstacle:
      return 0;
    case Kind::landmark:
      return 1;
    case Kind::grass:
      return 2;
    default:
      return 3;
  }
}

std::vector<std::uint8_t> rasterize(const world::WorldState& s, int size) {
  std::vector<std::uint8_t> img(static_cast<std::size_t>(size * size * 3), 255);
  const double hw = s.config.half_width;
  const double scale = size / (2.0 * hw);
  std::vector<std::size_t> order(s.entities.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return draw_rank(s.entities[a].kind.tag) < draw_rank(s.entities[b].kind.tag);
  });
  for (auto idx : order) {
    const auto& e = s.entities[idx];
    if (!e.alive) continue;
    const auto c = color_of(e);
    const double cx = (e.position.x + hw) * scale;
    const double cy = (hw - e.position.y) * scale;
    const double r = std::max(1.0, e.radius * scale);
    const int x0 = std::max(0, static_cast<int>(cx - r)), x1 = std::min(size - 1, static_cast<int>(cx + r));
    const int y0 = std::max(0, static_cast<int>(cy - r)), y1 = std::min(size - 1, static_cast<int>(cy + r));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        if (dx * dx + dy * dy > r * r) continue;
        auto* px = &img[static_cast<std::size_t>((y * size + x) * 3)];
        px[0] = c[0];
        px[1] = c[1];
        px[2] = c[2];
      }
    }
  }
  return img;
}

}  // namespace

std::vector<std::filesystem::path> render_frames(const world::ScenarioConfig& scenario,
                                                 const PolicyMap& policies, std::uint64_t seed,
                                                 const std::filesystem::path& out_dir,
                                                 const RenderOptions& options) {
  check_policies(scenario, policies);
  if (options.images && options.image_size < 8) throw UsageError("image size must be >= 8");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create frame directory " + out_dir.string() + ": " + ec.message());

  std::vector<std::string> lines;
  std::vector<world::WorldState> frames;
  const std::vector<std::uint64_t> seeds = {seed};
  marl::run_episodes(scenario, policies, seeds, true,
                     [&](std::size_t, const world::WorldState& s, std::span<const world::Event> events) {
                       if (s.timestep == 0) return;
                       auto rec = world::trajectory_record(s, events);
                       for (std::size_t i = 0; i < s.entities.size(); ++i) {
                         rec["entities"][i]["rgb"] = hex(color_of(s.entities[i]));
                       }
                       lines.push_back(rec.dump());
                       if (options.images) frames.push_back(s);
                     });

  std::vector<std::filesystem::path> written;
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  const auto jsonl = out_dir / "frames.jsonl";
  io::write_text(jsonl, text);
  written.push_back(jsonl);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.ppm", f + 1);
    const auto path = out_dir / name;
    const auto img = rasterize(frames[f], options.image_size);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << "P6\n" << options.image_size << " " << options.image_size << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    if (!os) throw IoError("write failed for " + path.string());
    written.push_back(path);
  }
  return written;
}

}  // namespace socialgf::evaluation
