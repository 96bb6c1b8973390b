#include "socialgf/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "socialgf/marl.hpp"
#include "socialgf/numerics.hpp"
#include "socialgf/representation.hpp"
#include "socialgf/scorefield.hpp"
#include "socialgf/world.hpp"

namespace socialgf::oracles {

using numerics::Activation;
using numerics::DenseTensor;
using numerics::ParamStore;

nlohmann::json to_json(const OracleResult& r) {
  return {{"name", r.name},
          {"passed", r.passed},
          {"measured", r.measured},
          {"tolerance", r.tolerance},
          {"detail", r.detail}};
}

std::string to_line(const OracleResult& r) {
  std::ostringstream os;
  os << (r.passed ? "PASS " : "FAIL ") << r.name << " measured=" << r.measured << " tolerance=" << r.tolerance;
  if (!r.detail.empty()) os << " " << r.detail;
  return os.str();
}

namespace {

OracleResult below(std::string name, double measured, double tolerance, std::string detail = {}) {
  return {std::move(name), measured, tolerance, std::isfinite(measured) && measured < tolerance,
          std::move(detail)};
}

DenseTensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return DenseTensor(std::move(shape), std::move(v));
}

DenseTensor with_entry(const DenseTensor& t, std::size_t i, double v) {
  std::vector<double> values(t.values().begin(), t.values().end());
  values[i] = v;
  return DenseTensor(t.shape(), std::move(values));
}

// Central difference of f at every entry of x.
std::vector<double> central_differences(const std::function<double(const DenseTensor&)>& f,
                                        const DenseTensor& x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    g[i] = (f(with_entry(x, i, x[i] + h)) - f(with_entry(x, i, x[i] - h))) / (2.0 * h);
  }
  return g;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3}); }

}  // namespace

OracleResult gradient_exactness(int nets, std::uint64_t seed) {
  Rng rng(seed);
  const Activation acts[] = {Activation::relu, Activation::tanh, Activation::identity};
  double worst = 0.0;
  for (int n = 0; n < nets; ++n) {
    const std::size_t in = 1 + rng.index(5), h1 = 2 + rng.index(8), h2 = 2 + rng.index(8), out = 1 + rng.index(3);
    auto p = ParamStore::mlp({in, h1, h2, out}, acts[n % 3], Activation::identity);
    numerics::orthogonal_init(p, rng, 1.0);
    for (std::size_t i = 0; i < p.layers().size(); ++i) {
      const auto name = "layers." + std::to_string(i) + ".bias";
      p.set(name, random_tensor(p.get(name).shape(), rng, 0.3));
    }
    const auto input = random_tensor({3, in}, rng, 1.0);
    const auto weights = random_tensor({3, out}, rng, 1.0);
    auto objective = [&](const ParamStore& q, const DenseTensor& x) {
      const auto y = numerics::mlp_forward(q, x).output;
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * weights[i];
      return s;
    };
    const auto fwd = numerics::mlp_forward(p, input);
    const auto grads = numerics::backprop(p, fwd.tape, weights);
    const auto dx = central_differences([&](const DenseTensor& x) { return objective(p, x); }, input, 1e-5);
    for (std::size_t i = 0; i < dx.size(); ++i) worst = std::max(worst, rel_err(dx[i], grads.input[i]));
    for (std::size_t k = 0; k < p.params().size(); ++k) {
      const auto name = p.params()[k].name;
      const auto fd = central_differences(
          [&](const DenseTensor& w) {
            auto q = p;
            q.set(name, w);
            return objective(q, input);
          },
          p.params()[k].value, 1e-5);
      for (std::size_t i = 0; i < fd.size(); ++i) worst = std::max(worst, rel_err(fd[i], grads.params.values[k][i]));
    }
  }
  return below("gradient_exactness", worst, 1e-6, std::to_string(nets) + " random nets");
}

namespace {

const examples::Layout kSelfOnly = {{examples::SlotKind::self, 1}};

examples::ExampleSet point_set(std::vector<std::vector<double>> points) {
  examples::ExampleSet s;
  s.category = {"oracle", examples::Polarity::attractive, examples::Role::any, kSelfOnly};
  for (auto& p : points) s.records.push_back({std::move(p)});
  return s;
}

examples::Configuration at(double x, double y) { return examples::Configuration{{{{x, y}}}}; }

}  // namespace

OracleResult dsm_point_mass(int steps, std::uint64_t seed, bool negate_target) {
  const double x0 = 0.6, y0 = -0.4;
  const double t = 0.3;
  scorefield::TrainConfig cfg;
  cfg.steps = steps;
  cfg.fixed_t = t;
  cfg.negate_target = negate_target;
  const auto field = scorefield::train_gf(point_set({{x0, y0}}), cfg, seed).field;
  const double sigma = std::pow(cfg.schedule.sigma0, t);
  // Probes within two noise scales of the point.
  double num = 0.0, den = 0.0;
  for (int i = -4; i <= 4; ++i) {
    for (int j = -4; j <= 4; ++j) {
      const double px = x0 + sigma * i / 2.0, py = y0 + sigma * j / 2.0;
      const auto got = scorefield::eval_field_at(field, at(px, py), t);
      const double wx = (x0 - px) / (sigma * sigma), wy = (y0 - py) / (sigma * sigma);
      num += (got.x - wx) * (got.x - wx) + (got.y - wy) * (got.y - wy);
      den += wx * wx + wy * wy;
    }
  }
  return below("dsm_point_mass", std::sqrt(num / den), 0.1, "fixed t=0.3, 81 probes");
}

OracleResult dsm_gaussian(int steps, std::uint64_t seed, bool negate_target, std::vector<double> times) {
  const double mx = 0.3, my = -0.2, s = 0.5;
  Rng rng(seed);
  std::vector<std::vector<double>> pts(10000);
  for (auto& p : pts) p = {mx + s * rng.normal(), my + s * rng.normal()};
  scorefield::TrainConfig cfg;
  cfg.steps = steps;
  cfg.negate_target = negate_target;
  const auto field = scorefield::train_gf(point_set(std::move(pts)), cfg, seed + 1).field;
  double worst = 0.0;
  std::ostringstream detail;
  for (double t : times) {
    const double var = s * s + std::pow(cfg.schedule.sigma0, 2.0 * t);
    double num = 0.0, den = 0.0;
    for (int i = -10; i <= 10; ++i) {
      for (int j = -10; j <= 10; ++j) {
        const double dx = 2.0 * s * i / 10.0, dy = 2.0 * s * j / 10.0;
        if (dx * dx + dy * dy > 4.0 * s * s) continue;
        const auto got = scorefield::eval_field_at(field, at(mx + dx, my + dy), t);
        const double wx = -dx / var, wy = -dy / var;
        num += (got.x - wx) * (got.x - wx) + (got.y - wy) * (got.y - wy);
        den += wx * wx + wy * wy;
      }
    }
    const double e = std::sqrt(num / den);
    worst = std::max(worst, e);
    detail << "t=" << t << ":" << e << " ";
  }
  return below("dsm_gaussian", worst, 0.15, detail.str());
}

OracleResult permutation_invariance(std::uint64_t seed) {
  using examples::SlotKind;
  Rng rng(seed);
  const examples::Layout layout = {{SlotKind::self, 1}, {SlotKind::grass, 4}, {SlotKind::wolf, 3}};
  scorefield::GradientField field;
  field.category = {"oracle", examples::Polarity::attractive, examples::Role::any, layout};
  field.net = scorefield::ScoreNetwork::create(layout, 32, rng);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    examples::Configuration c;
    c.groups = {{{rng.normal(), rng.normal()}}, {}, {}};
    for (int i = 0; i < 4; ++i) c.groups[1].push_back({rng.normal(), rng.normal()});
    for (int i = 0; i < 3; ++i) c.groups[2].push_back({rng.normal(), rng.normal()});
    const auto base = scorefield::eval_field(field, c);
    for (int k = 0; k < 5; ++k) {
      auto d = c;
      for (std::size_t g = 1; g < d.groups.size(); ++g) {
        auto& v = d.groups[g];
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
      }
      const auto out = scorefield::eval_field(field, d);
      worst = std::max({worst, std::abs(out.x - base.x), std::abs(out.y - base.y)});
    }
  }
  return below("permutation_invariance", worst, 1e-9, "50 scenes x 5 shuffles");
}

namespace {

using world::Color;
using world::EntityState;
using world::Event;
using world::EventKind;
using world::Kind;
using world::Scenario;

bool brute_assignment(const std::vector<EntityState>& es, std::vector<std::size_t> ag,
                      const std::vector<std::size_t>& lm) {
  if (lm.size() > ag.size()) return false;
  std::sort(ag.begin(), ag.end());
  do {
    bool ok = true;
    for (std::size_t k = 0; k < lm.size() && ok; ++k) {
      const auto d = es[ag[k]].position - es[lm[k]].position;
      ok = d.norm() < es[ag[k]].radius + es[lm[k]].radius;
    }
    if (ok) return true;
  } while (std::next_permutation(ag.begin(), ag.end()));
  return false;
}

std::vector<Event> pairwise_events(const world::WorldState& s) {
  const auto& es = s.entities;
  const auto n = es.size();
  auto touch = [&](std::size_t i, std::size_t j) {
    const double dx = es[i].position.x - es[j].position.x;
    const double dy = es[i].position.y - es[j].position.y;
    return std::sqrt(dx * dx + dy * dy) < es[i].radius + es[j].radius;
  };
  std::vector<Event> out;
  const auto sc = s.config.scenario;
  if (sc == Scenario::grassland) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (es[i].kind.tag == Kind::wolf && es[j].kind.tag == Kind::sheep && touch(i, j)) {
          out.push_back({EventKind::sheep_eaten, {i, j}, s.timestep});
        }
      }
    }
    for (std::size_t g = 0; g < n; ++g) {
      if (es[g].kind.tag != Kind::grass) continue;
      for (std::size_t i = 0; i < n; ++i) {
        if (es[i].kind.tag == Kind::sheep && touch(i, g)) {
          out.push_back({EventKind::grass_eaten, {i, g}, s.timestep});
          break;
        }
      }
    }
  } else {
    std::vector<std::size_t> agents;
    for (std::size_t i = 0; i < n; ++i) {
      if (es[i].kind.tag == Kind::nav_agent) agents.push_back(i);
    }
    bool success = true;
    for (std::size_t l = 0; l < n; ++l) {
      if (es[l].kind.tag != Kind::landmark) continue;
      bool red = false, green = false;
      for (auto a : agents) {
        if (!touch(a, l)) continue;
        if (sc == Scenario::color_nav && es[a].kind.color != es[l].kind.color) continue;
        out.push_back({EventKind::landmark_occupied, {l, a}, s.timestep});
        red = red || es[a].kind.color == Color::red;
        green = green || es[a].kind.color == Color::green;
      }
      if (sc == Scenario::team_nav && !(red && green)) success = false;
    }
    if (sc != Scenario::team_nav) {
      for (Color c : {Color::none, Color::red, Color::green}) {
        std::vector<std::size_t> ag, lm;
        for (std::size_t i = 0; i < n; ++i) {
          if (es[i].kind.color != c) continue;
          if (es[i].kind.tag == Kind::nav_agent) ag.push_back(i);
          if (es[i].kind.tag == Kind::landmark) lm.push_back(i);
        }
        if (!lm.empty() && !brute_assignment(es, ag, lm)) success = false;
      }
    }
    if (success) out.push_back({EventKind::success, agents, s.timestep});
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

OracleResult event_equivalence(int states_per_scenario) {
  using world::ScenarioConfig;
  const std::vector<ScenarioConfig> scenarios = {
      ScenarioConfig::grassland(2, 2), ScenarioConfig::grassland(4, 8), ScenarioConfig::vanilla_nav(3),
      ScenarioConfig::color_nav(2),    ScenarioConfig::team_nav(2, 3),  ScenarioConfig::team_nav(3, 5)};
  int mismatches = 0, states = 0, with_events = 0;
  for (const auto& cfg : scenarios) {
    for (int k = 0; k < states_per_scenario; ++k) {
      const auto seed = static_cast<std::uint64_t>(k);
      auto s = world::reset(cfg, seed);
      // Squeeze everything into a small box so that contacts are frequent.
      Rng rng(seed * 7919 + 1);
      const double box = 0.15 + 0.5 * rng.uniform();
      for (auto& e : s.entities) e.position = {rng.uniform(-box, box), rng.uniform(-box, box)};
      const auto got = world::detect_events(s);
      mismatches += got != pairwise_events(s);
      with_events += !got.empty();
      ++states;
    }
  }
  auto r = below("event_equivalence", mismatches, 0.5,
                 std::to_string(states) + " states, " + std::to_string(with_events) + " with events");
  r.tolerance = 0.0;
  return r;
}

OracleResult gae_equivalence(int sequences, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int k = 0; k < sequences; ++k) {
    const std::size_t T = 100;
    std::vector<double> r(T), v(T);
    std::vector<std::uint8_t> d(T);
    for (std::size_t t = 0; t < T; ++t) {
      r[t] = rng.normal();
      v[t] = rng.normal();
      d[t] = rng.uniform() < 0.05 ? 1 : 0;
    }
    const double boot = rng.normal(), gamma = rng.uniform(0.8, 1.0), lambda = rng.uniform(0.0, 1.0);
    const auto got = marl::compute_gae(r, v, d, boot, gamma, lambda);
    for (std::size_t t = 0; t < T; ++t) {
      // A_t = sum_k (gamma lambda)^k delta_{t+k}, cut after the first terminal step.
      double a = 0.0, w = 1.0;
      for (std::size_t u = t; u < T; ++u) {
        const double next = u + 1 < T ? v[u + 1] : boot;
        const double delta = r[u] + gamma * next * (d[u] ? 0.0 : 1.0) - v[u];
        a += w * delta;
        if (d[u]) break;
        w *= gamma * lambda;
      }
      worst = std::max({worst, std::abs(got.advantages[t] - a), std::abs(got.returns[t] - (a + v[t]))});
    }
  }
  return below("gae_equivalence", worst, 1e-10, std::to_string(sequences) + " sequences of 100 steps");
}

OracleResult shaping_monotonicity() {
  const double mx = 0.4, my = -0.3, s2 = 0.05, sigma0 = 25.0, t0 = 0.01;
  const double var = s2 + std::pow(sigma0, 2.0 * t0);
  representation::GFRepresentation rep;
  rep.slots = {{"goal", examples::Polarity::attractive, nullptr, ""}};
  const representation::ShapingConfig shaping{0.01, true};
  int violations = 0;
  double previous = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 50; ++i) {
    const double a = 1.0 - i / 50.0;
    const double x = mx + 1.2 * a, y = my - 0.7 * a;
    const std::vector<double> obs = {0.0, 0.0, -(x - mx) / var, -(y - my) / var};
    const double penalty = -representation::shaped_reward(0.0, representation::attractive_magnitude(obs, rep), shaping);
    if (i > 0 && !(penalty < previous)) ++violations;
    previous = penalty;
  }
  auto r = below("shaping_monotonicity", violations, 0.5, "51 points on a straight approach");
  r.tolerance = 0.0;
  return r;
}

std::vector<OracleResult> run_all(const VerifyOptions& options) {
  return {gradient_exactness(),
          dsm_point_mass(options.dsm_steps, 7, options.flip_dsm_target),
          dsm_gaussian(options.dsm_steps, 11, options.flip_dsm_target),
          permutation_invariance(),
          event_equivalence(),
          gae_equivalence(),
          shaping_monotonicity()};
}

}  // namespace socialgf::oracles
