#include "socialgf/examples.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "socialgf/binary_io.hpp"
#include "socialgf/errors.hpp"
#include "socialgf/parallel.hpp"

namespace socialgf::examples {

using world::EntityState;
using world::Kind;
using world::Scenario;
using world::ScenarioConfig;
using world::Vec2;

namespace {

constexpr std::array<std::string_view, kSlotKindCount> kSlotNames = {
    "self", "wolf", "sheep", "grass", "obstacle", "world_center",
    "ally", "ally_other", "landmark", "landmark_match", "landmark_other"};

}  // namespace

std::string_view to_string(SlotKind k) { return kSlotNames[static_cast<std::size_t>(k)]; }

SlotKind parse_slot_kind(std::string_view s) {
  for (std::size_t i = 0; i < kSlotNames.size(); ++i) {
    if (kSlotNames[i] == s) return static_cast<SlotKind>(i);
  }
  throw ConfigError("unknown slot kind: " + std::string(s));
}

std::string_view to_string(Polarity p) { return p == Polarity::attractive ? "attractive" : "repulsive"; }

Polarity parse_polarity(std::string_view s) {
  if (s == "attractive") return Polarity::attractive;
  if (s == "repulsive") return Polarity::repulsive;
  throw ConfigError("unknown polarity: " + std::string(s));
}

std::string_view to_string(Role r) {
  switch (r) {
    case Role::wolf:
      return "wolf";
    case Role::sheep:
      return "sheep";
    case Role::nav_agent:
      return "nav_agent";
    case Role::any:
      return "any";
  }
  return "?";
}

Role parse_role(std::string_view s) {
  if (s == "wolf") return Role::wolf;
  if (s == "sheep") return Role::sheep;
  if (s == "nav_agent") return Role::nav_agent;
  if (s == "any") return Role::any;
  throw ConfigError("unknown role: " + std::string(s));
}

bool role_matches(Role r, Kind k) {
  switch (r) {
    case Role::wolf:
      return k == Kind::wolf;
    case Role::sheep:
      return k == Kind::sheep;
    case Role::nav_agent:
      return k == Kind::nav_agent;
    case Role::any:
      return world::is_agent(k);
  }
  return false;
}

std::size_t ExampleCategory::entity_count() const {
  std::size_t n = 0;
  for (const auto& g : layout) n += static_cast<std::size_t>(g.count);
  return n;
}

nlohmann::json to_json(const ExampleCategory& c) {
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& g : c.layout) layout.push_back({{"kind", to_string(g.kind)}, {"count", g.count}});
  return {{"name", c.name},
          {"polarity", to_string(c.polarity)},
          {"role", to_string(c.role)},
          {"layout", layout}};
}

ExampleCategory category_from_json(const nlohmann::json& j) {
  try {
    ExampleCategory c;
    c.name = j.at("name").get<std::string>();
    c.polarity = parse_polarity(j.at("polarity").get<std::string>());
    c.role = parse_role(j.at("role").get<std::string>());
    for (const auto& g : j.at("layout")) {
      c.layout.push_back({parse_slot_kind(g.at("kind").get<std::string>()), g.at("count").get<int>()});
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed category descriptor: ") + e.what());
  }
}

ExampleCategory standard_category(std::string_view name, const ScenarioConfig& config) {
  const bool grass = config.scenario == Scenario::grassland;
  auto only = [&](bool ok) {
    if (!ok) {
      throw ConfigError("category '" + std::string(name) + "' does not apply to scenario " +
                        std::string(world::to_string(config.scenario)));
    }
  };
  ExampleCategory c;
  c.name = std::string(name);
  c.layout = {{SlotKind::self, 1}};
  if (name == "grass_eaten") {
    only(grass);
    c.role = Role::sheep;
    c.layout.push_back({SlotKind::grass, config.grass});
  } else if (name == "sheep_chasing") {
    only(grass);
    c.role = Role::wolf;
    c.layout.push_back({SlotKind::sheep, config.sheep});
  } else if (name == "wolf_avoid") {
    only(grass);
    c.role = Role::sheep;
    c.polarity = Polarity::repulsive;
    c.layout.push_back({SlotKind::wolf, config.wolves});
  } else if (name == "boundary_avoid") {
    c.role = Role::any;
    c.layout.push_back({SlotKind::world_center, 1});
    c.layout.push_back({SlotKind::obstacle, config.obstacles});
  } else if (name == "navigation") {
    only(!grass);
    c.role = Role::nav_agent;
    const int n = config.agents;
    switch (config.scenario) {
      case Scenario::vanilla_nav:
        c.layout.push_back({SlotKind::ally, n - 1});
        c.layout.push_back({SlotKind::landmark, n});
        break;
      case Scenario::color_nav:
        c.layout.push_back({SlotKind::ally, n - 1});
        c.layout.push_back({SlotKind::ally_other, n});
        c.layout.push_back({SlotKind::landmark_match, n});
        c.layout.push_back({SlotKind::landmark_other, n});
        break;
      case Scenario::team_nav:
        c.layout.push_back({SlotKind::ally, n - 1});
        c.layout.push_back({SlotKind::ally_other, n});
        c.layout.push_back({SlotKind::landmark, config.landmarks});
        break;
      case Scenario::grassland:
        break;
    }
  } else {
    throw ConfigError("unknown example category: " + std::string(name));
  }
  return c;
}

std::vector<std::string> default_categories(const ScenarioConfig& config) {
  if (config.scenario == Scenario::grassland) {
    return {"boundary_avoid", "grass_eaten", "sheep_chasing", "wolf_avoid"};
  }
  return {"boundary_avoid", "navigation"};
}

bool kind_available(SlotKind k, Scenario s) {
  switch (k) {
    case SlotKind::self:
    case SlotKind::obstacle:
    case SlotKind::world_center:
      return true;
    case SlotKind::wolf:
    case SlotKind::sheep:
    case SlotKind::grass:
      return s == Scenario::grassland;
    case SlotKind::ally:
    case SlotKind::landmark:
      return world::is_navigation(s);
    case SlotKind::ally_other:
      return s == Scenario::color_nav || s == Scenario::team_nav;
    case SlotKind::landmark_match:
    case SlotKind::landmark_other:
      return s == Scenario::color_nav;
  }
  return false;
}

namespace {

void check_layout(const Layout& layout) {
  if (layout.empty() || layout.front().kind != SlotKind::self || layout.front().count != 1) {
    throw UsageError("layout must start with a single self slot");
  }
}

bool selects(SlotKind k, const EntityState& self, const EntityState& e) {
  switch (k) {
    case SlotKind::wolf:
      return e.kind.tag == Kind::wolf;
    case SlotKind::sheep:
      return e.kind.tag == Kind::sheep;
    case SlotKind::grass:
      return e.kind.tag == Kind::grass;
    case SlotKind::obstacle:
      return e.kind.tag == Kind::obstacle;
    case SlotKind::ally:
      return e.kind.tag == Kind::nav_agent && e.kind.color == self.kind.color;
    case SlotKind::ally_other:
      return e.kind.tag == Kind::nav_agent && e.kind.color != self.kind.color;
    case SlotKind::landmark:
      return e.kind.tag == Kind::landmark;
    case SlotKind::landmark_match:
      return e.kind.tag == Kind::landmark && e.kind.color == self.kind.color;
    case SlotKind::landmark_other:
      return e.kind.tag == Kind::landmark && e.kind.color != self.kind.color;
    case SlotKind::self:
    case SlotKind::world_center:
      return false;
  }
  return false;
}

}  // namespace

Configuration gather(const std::vector<EntityState>& entities, const ScenarioConfig& config,
                     std::size_t agent, const Layout& layout) {
  check_layout(layout);
  if (agent >= entities.size()) throw UsageError("agent index out of range");
  const auto& self = entities[agent];
  Configuration c;
  c.groups.reserve(layout.size());
  for (const auto& g : layout) {
    if (!kind_available(g.kind, config.scenario)) {
      throw AdaptationError("slot kind '" + std::string(to_string(g.kind)) +
                            "' has no source in scenario " +
                            std::string(world::to_string(config.scenario)));
    }
    std::vector<Vec2> pos;
    if (g.kind == SlotKind::self) {
      pos.push_back({});
    } else if (g.kind == SlotKind::world_center) {
      pos.push_back(Vec2{} - self.position);
    } else {
      for (std::size_t i = 0; i < entities.size(); ++i) {
        if (i != agent && selects(g.kind, self, entities[i])) {
          pos.push_back(entities[i].position - self.position);
        }
      }
    }
    c.groups.push_back(std::move(pos));
  }
  return c;
}

Configuration gather(const world::WorldState& state, std::size_t agent, const Layout& layout) {
  return gather(state.entities, state.config, agent, layout);
}

ExampleRecord to_record(const Configuration& c) {
  ExampleRecord r;
  for (const auto& g : c.groups) {
    for (const auto& p : g) {
      r.coords.push_back(p.x);
      r.coords.push_back(p.y);
    }
  }
  return r;
}

Configuration from_record(const ExampleRecord& r, const Layout& layout) {
  std::size_t n = 0;
  for (const auto& g : layout) n += static_cast<std::size_t>(g.count);
  if (r.coords.size() != 2 * n) {
    throw UsageError("record width " + std::to_string(r.coords.size()) + " does not match layout width " +
                     std::to_string(2 * n));
  }
  Configuration c;
  std::size_t k = 0;
  for (const auto& g : layout) {
    std::vector<Vec2> pos;
    for (int i = 0; i < g.count; ++i, k += 2) pos.push_back({r.coords[k], r.coords[k + 1]});
    c.groups.push_back(std::move(pos));
  }
  return c;
}

namespace {

const std::vector<Vec2>* group_of(const Configuration& c, const Layout& layout, SlotKind k) {
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].kind == k) return &c.groups[i];
  }
  return nullptr;
}

bool any_within(const std::vector<Vec2>* pts, Vec2 at, double reach) {
  if (!pts) return false;
  return std::any_of(pts->begin(), pts->end(), [&](Vec2 p) { return (p - at).norm() < reach; });
}

// Every landmark gets a distinct touching agent (brute force; populations are small).
bool perfect_cover(std::vector<Vec2> agents, const std::vector<Vec2>& landmarks, double reach) {
  if (landmarks.size() > agents.size()) return false;
  std::vector<std::size_t> idx(agents.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  do {
    bool ok = true;
    for (std::size_t l = 0; l < landmarks.size() && ok; ++l) {
      ok = (agents[idx[l]] - landmarks[l]).norm() < reach;
    }
    if (ok) return true;
  } while (std::next_permutation(idx.begin(), idx.end()));
  return false;
}

bool clear_of_walls(Vec2 pos, double radius, double half_width) {
  return std::abs(pos.x) + radius <= half_width && std::abs(pos.y) + radius <= half_width;
}

}  // namespace

bool satisfies_predicate(const ExampleCategory& category, const ExampleRecord& record,
                         const ScenarioConfig& config) {
  const auto c = from_record(record, category.layout);
  const Vec2 self = c.groups[0][0];
  const auto& L = category.layout;
  const std::string& n = category.name;
  if (n == "grass_eaten") {
    return any_within(group_of(c, L, SlotKind::grass), self, config.sheep_radius + config.grass_radius);
  }
  if (n == "sheep_chasing") {
    return any_within(group_of(c, L, SlotKind::sheep), self, config.wolf_radius + config.sheep_radius);
  }
  if (n == "wolf_avoid") {
    return any_within(group_of(c, L, SlotKind::wolf), self, config.wolf_radius + config.sheep_radius);
  }
  if (n == "boundary_avoid") {
    const auto* center = group_of(c, L, SlotKind::world_center);
    if (!center || center->size() != 1) return false;
    double r = std::numeric_limits<double>::infinity();
    if (config.scenario == Scenario::grassland) {
      r = std::min(config.wolf_radius, config.sheep_radius);
    } else {
      r = config.nav_agent_radius;
    }
    const Vec2 absolute = self - (*center)[0];
    if (!clear_of_walls(absolute, r, config.half_width)) return false;
    return !any_within(group_of(c, L, SlotKind::obstacle), self, r + config.obstacle_radius);
  }
  if (n == "navigation") {
    const double reach = config.nav_agent_radius + config.landmark_radius;
    std::vector<Vec2> team = {self};
    if (const auto* a = group_of(c, L, SlotKind::ally)) team.insert(team.end(), a->begin(), a->end());
    const std::vector<Vec2> none;
    const auto* other = group_of(c, L, SlotKind::ally_other);
    switch (config.scenario) {
      case Scenario::vanilla_nav:
        return perfect_cover(team, *group_of(c, L, SlotKind::landmark), reach);
      case Scenario::color_nav:
        return perfect_cover(team, *group_of(c, L, SlotKind::landmark_match), reach) &&
               perfect_cover(other ? *other : none, *group_of(c, L, SlotKind::landmark_other), reach);
      case Scenario::team_nav: {
        for (const auto& lm : *group_of(c, L, SlotKind::landmark)) {
          const bool mine = any_within(&team, lm, reach);
          const bool theirs = any_within(other, lm, reach);
          if (!mine || !theirs) return false;
        }
        return true;
      }
      case Scenario::grassland:
        return false;
    }
  }
  throw ConfigError("no predicate for category '" + n + "'");
}

// ------------------------------------------------------------------ policies

namespace {

world::ActionVector clip_action(Vec2 f) {
  return {std::clamp(f.x, -1.0, 1.0), std::clamp(f.y, -1.0, 1.0)};
}

Vec2 toward(Vec2 from, Vec2 to, double gain) {
  const Vec2 d = to - from;
  const double n = d.norm();
  if (n < 1e-12) return {};
  return d * (std::min(1.0, gain * n) / n);
}

}  // namespace

std::vector<world::ActionVector> RandomPolicy::act(const world::WorldState& state, Rng& rng) const {
  std::vector<world::ActionVector> out(state.agents().size());
  for (auto& a : out) a = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
  return out;
}

std::vector<world::ActionVector> ScriptedGreedyPolicy::act(const world::WorldState& state,
                                                           Rng& rng) const {
  const auto& es = state.entities;
  const auto agents = state.agents();
  const auto sc = state.config.scenario;
  auto nearest = [&](std::size_t from, auto&& accept) {
    std::size_t best = es.size();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < es.size(); ++i) {
      if (i == from || !accept(i)) continue;
      const double d = (es[i].position - es[from].position).norm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    return std::pair{best, best_d};
  };
  std::vector<char> claimed_red(es.size(), 0), claimed_green(es.size(), 0), claimed(es.size(), 0);
  std::vector<world::ActionVector> out;
  out.reserve(agents.size());
  for (auto a : agents) {
    const auto& self = es[a];
    Vec2 f{};
    switch (self.kind.tag) {
      case Kind::wolf: {
        auto [s, d] = nearest(a, [&](std::size_t i) { return es[i].kind.tag == Kind::sheep; });
        if (s < es.size()) f = toward(self.position, es[s].position, 4.0);
        break;
      }
      case Kind::sheep: {
        auto [w, dw] = nearest(a, [&](std::size_t i) { return es[i].kind.tag == Kind::wolf; });
        if (w < es.size() && dw < flee_radius_) {
          f = toward(es[w].position, self.position, 1e9);
        } else {
          auto [g, dg] = nearest(a, [&](std::size_t i) { return es[i].kind.tag == Kind::grass; });
          if (g < es.size()) f = toward(self.position, es[g].position, 4.0);
        }
        break;
      }
      case Kind::nav_agent: {
        // Claims are per team (color) so that each team spreads over the landmarks.
        auto& claims = sc == Scenario::vanilla_nav ? claimed
                       : self.kind.color == world::Color::red ? claimed_red
                                                               : claimed_green;
        auto usable = [&](std::size_t i) {
          if (es[i].kind.tag != Kind::landmark) return false;
          return sc != Scenario::color_nav || es[i].kind.color == self.kind.color;
        };
        auto [l, dl] = nearest(a, [&](std::size_t i) { return usable(i) && !claims[i]; });
        if (l == es.size()) std::tie(l, dl) = nearest(a, usable);
        if (l < es.size()) {
          claims[l] = 1;
          f = toward(self.position, es[l].position, 4.0);
        }
        break;
      }
      default:
        break;
    }
    f.x += noise_ * rng.normal();
    f.y += noise_ * rng.normal();
    out.push_back(clip_action(f));
  }
  return out;
}

// ----------------------------------------------------------------- collection

namespace {

bool non_colliding(const std::vector<EntityState>& es, std::size_t a, double half_width) {
  if (!clear_of_walls(es[a].position, es[a].radius, half_width)) return false;
  for (const auto& e : es) {
    if (e.kind.tag == Kind::obstacle && world::overlaps(e, es[a])) return false;
  }
  return true;
}

using EpisodeRecords = std::map<std::string, std::vector<ExampleRecord>>;

EpisodeRecords run_episode(const ScenarioConfig& scenario, const BehaviorPolicy& policy,
                           const std::map<std::string, ExampleCategory>& cats,
                           const CollectionConfig& cfg, std::uint64_t seed, std::uint64_t episode) {
  EpisodeRecords out;
  auto state = world::reset(scenario, derive_seed(seed, episode));
  Rng rng(derive_seed(seed, episode, 0x706f6cULL));
  auto wants = [&](const char* name) { return cats.count(name) != 0; };
  auto add = [&](const char* name, const std::vector<EntityState>& frame, std::size_t agent) {
    out[name].push_back(to_record(gather(frame, scenario, agent, cats.at(name).layout)));
  };
  auto boundary_frame = [&]() {
    if (!wants("boundary_avoid")) return;
    if (state.timestep % static_cast<std::uint64_t>(cfg.boundary_interval) != 0) return;
    for (auto a : state.agents()) {
      if (non_colliding(state.entities, a, scenario.half_width)) add("boundary_avoid", state.entities, a);
    }
  };
  boundary_frame();
  bool succeeded = false;
  for (int t = 0; t < scenario.episode_length; ++t) {
    const auto actions = policy.act(state, rng);
    auto r = world::step(std::move(state), actions);
    std::vector<std::size_t> fled;
    for (const auto& ev : r.events) {
      switch (ev.kind) {
        case world::EventKind::sheep_eaten:
          if (wants("sheep_chasing")) add("sheep_chasing", r.event_frame, ev.participants[0]);
          if (wants("wolf_avoid") &&
              std::find(fled.begin(), fled.end(), ev.participants[1]) == fled.end()) {
            fled.push_back(ev.participants[1]);
            add("wolf_avoid", r.event_frame, ev.participants[1]);
          }
          break;
        case world::EventKind::grass_eaten:
          if (wants("grass_eaten")) add("grass_eaten", r.event_frame, ev.participants[0]);
          break;
        case world::EventKind::success:
          // Only the first Success frame: agents tend to stay put afterwards.
          if (wants("navigation") && !succeeded) {
            for (auto a : ev.participants) add("navigation", r.event_frame, a);
          }
          succeeded = true;
          break;
        case world::EventKind::landmark_occupied:
          break;
      }
    }
    state = std::move(r.state);
    boundary_frame();
  }
  return out;
}

}  // namespace

ExampleSets collect_examples(const ScenarioConfig& scenario, const BehaviorPolicy& policy,
                             const CollectionConfig& config, std::uint64_t seed) {
  scenario.validate();
  if (config.n_target < 1) throw ConfigError("n_target must be >= 1");
  if (config.max_episodes < 1) throw ConfigError("max_episodes must be >= 1");
  if (config.boundary_interval < 1) throw ConfigError("boundary_interval must be >= 1");
  const auto names = config.categories.empty() ? default_categories(scenario) : config.categories;
  std::map<std::string, ExampleCategory> cats;
  for (const auto& n : names) cats.emplace(n, standard_category(n, scenario));

  const auto target = static_cast<std::size_t>(config.n_target);
  std::map<std::string, std::vector<ExampleRecord>> acc;
  for (const auto& [n, c] : cats) acc[n];
  auto filled = [&] {
    return std::all_of(acc.begin(), acc.end(), [&](const auto& kv) { return kv.second.size() >= target; });
  };

  const std::size_t chunk = std::max<std::size_t>(1, worker_count());
  std::size_t next = 0;
  const auto total = static_cast<std::size_t>(config.max_episodes);
  while (!filled() && next < total) {
    const std::size_t n = std::min(chunk, total - next);
    std::vector<EpisodeRecords> results(n);
    parallel_for(n, [&](std::size_t i) {
      results[i] = run_episode(scenario, policy, cats, config, seed, next + i);
    });
    // Merge strictly in episode order so the output is independent of chunking.
    for (auto& res : results) {
      if (filled()) break;
      for (auto& [name, recs] : res) {
        auto& dst = acc[name];
        for (auto& r : recs) {
          if (dst.size() < target) dst.push_back(std::move(r));
        }
      }
    }
    next += n;
  }
  for (const auto& [name, recs] : acc) {
    if (recs.size() < target) {
      throw StarvationError(name, "category '" + name + "' starved: " + std::to_string(recs.size()) +
                                      "/" + std::to_string(target) + " records after " +
                                      std::to_string(total) + " episodes");
    }
  }
  ExampleSets sets;
  for (auto& [name, recs] : acc) {
    ExampleSet s;
    s.category = cats.at(name);
    s.records = std::move(recs);
    s.provenance = {world::to_json(scenario), seed, policy.name()};
    sets.emplace(name, std::move(s));
  }
  return sets;
}

// -------------------------------------------------------------------- storage

namespace {

constexpr std::uint32_t kDatasetVersion = 1;

void write_category(io::Writer& w, const ExampleCategory& c) {
  w.str(c.name);
  w.u8(static_cast<std::uint8_t>(c.polarity));
  w.u8(static_cast<std::uint8_t>(c.role));
  w.u64(c.layout.size());
  for (const auto& g : c.layout) {
    w.u8(static_cast<std::uint8_t>(g.kind));
    w.i64(g.count);
  }
}

ExampleCategory read_category(io::Reader& r) {
  ExampleCategory c;
  c.name = r.str();
  const auto pol = r.u8();
  const auto role = r.u8();
  if (pol > 1 || role > 3) throw DataError("corrupt category descriptor");
  c.polarity = static_cast<Polarity>(pol);
  c.role = static_cast<Role>(role);
  const auto groups = r.u64();
  if (groups > 64) throw DataError("corrupt category layout");
  for (std::uint64_t i = 0; i < groups; ++i) {
    const auto kind = r.u8();
    const auto count = r.i64();
    if (kind >= kSlotKindCount || count < 0 || count > 1'000'000) {
      throw DataError("corrupt category layout");
    }
    c.layout.push_back({static_cast<SlotKind>(kind), static_cast<int>(count)});
  }
  return c;
}

io::Writer encode_body(const ExampleSets& sets) {
  io::Writer w;
  w.magic("SGFD");
  w.u32(kDatasetVersion);
  w.u64(sets.size());
  for (const auto& [name, s] : sets) {
    write_category(w, s.category);
    w.str(nlohmann::json{{"scenario", s.provenance.scenario},
                         {"seed", s.provenance.seed},
                         {"policy", s.provenance.policy},
                         {"metadata", s.provenance.metadata}}
              .dump());
    const auto width = s.category.record_width();
    w.u64(s.records.size());
    w.u64(width);
    for (const auto& r : s.records) {
      if (r.coords.size() != width) throw UsageError("record width mismatch in category " + name);
      for (double v : r.coords) w.f64(v);
    }
  }
  return w;
}

}  // namespace

std::vector<std::uint8_t> encode_dataset(const ExampleSets& sets) {
  auto w = encode_body(sets);
  const auto sum = io::fnv1a(w.bytes().data(), w.bytes().size());
  w.u64(sum);
  return w.bytes();
}

std::uint64_t dataset_checksum(const ExampleSets& sets) {
  const auto w = encode_body(sets);
  return io::fnv1a(w.bytes().data(), w.bytes().size());
}

ExampleSets decode_dataset(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw DataError("dataset truncated");
  io::Reader r(bytes);
  r.expect_magic("SGFD");
  const auto version = r.u32();
  if (version != kDatasetVersion) {
    throw DataError("unsupported dataset version " + std::to_string(version) + " (expected " +
                    std::to_string(kDatasetVersion) + ")");
  }
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 7; i >= 0; --i) stored = (stored << 8) | bytes[body + static_cast<std::size_t>(i)];
  if (io::fnv1a(bytes.data(), body) != stored) throw DataError("dataset checksum mismatch (corrupt file)");

  ExampleSets sets;
  const auto count = r.u64();
  for (std::uint64_t k = 0; k < count; ++k) {
    ExampleSet s;
    s.category = read_category(r);
    try {
      const auto prov = nlohmann::json::parse(r.str());
      s.provenance = {prov.at("scenario"), prov.at("seed").get<std::uint64_t>(),
                      prov.at("policy").get<std::string>(), prov.value("metadata", nlohmann::json::object())};
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("corrupt provenance block: ") + e.what());
    }
    const auto n = r.u64();
    const auto width = r.u64();
    if (width != s.category.record_width()) throw DataError("record width disagrees with layout");
    if (n == 0) throw DataError("empty category '" + s.category.name + "'");
    if (n * width * 8 > bytes.size()) throw DataError("dataset truncated");
    s.records.resize(n);
    for (auto& rec : s.records) {
      rec.coords.resize(width);
      for (auto& v : rec.coords) v = r.f64();
    }
    sets.emplace(s.category.name, std::move(s));
  }
  if (r.position() != body) throw DataError("trailing bytes in dataset");
  return sets;
}

void save_dataset(const ExampleSets& sets, const std::filesystem::path& path) {
  io::Writer w;
  for (auto b : encode_dataset(sets)) w.u8(b);
  w.save(path);
}

ExampleSets load_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::Reader::open(path).bytes());
}

}  // namespace socialgf::examples
