#include "socialgf/marl.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "socialgf/errors.hpp"
#include "socialgf/parallel.hpp"

namespace socialgf::marl {

using representation::ObservationQuery;
using world::Kind;

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

double clip1(double v) { return std::clamp(v, -1.0, 1.0); }

std::string role_name(Role r) { return std::string(examples::to_string(r)); }

}  // namespace

std::string_view to_string(MethodVariant v) {
  switch (v) {
    case MethodVariant::original_reward:
      return "OriginalReward";
    case MethodVariant::reward_engineering:
      return "RewardEngineering";
    case MethodVariant::social_gfs:
      return "SocialGFs";
    case MethodVariant::social_gfs_plus:
      return "SocialGFsPlus";
    case MethodVariant::social_gfs_star:
      return "SocialGFsStar";
  }
  return "?";
}

MethodVariant parse_variant(std::string_view s) {
  for (auto v : {MethodVariant::original_reward, MethodVariant::reward_engineering, MethodVariant::social_gfs,
                 MethodVariant::social_gfs_plus, MethodVariant::social_gfs_star}) {
    if (s == to_string(v)) return v;
  }
  throw ConfigError("unknown method variant '" + std::string(s) +
                    "' (expected OriginalReward, RewardEngineering, SocialGFs, SocialGFsPlus or SocialGFsStar)");
}

bool uses_fields(MethodVariant v) {
  return v == MethodVariant::social_gfs || v == MethodVariant::social_gfs_plus ||
         v == MethodVariant::social_gfs_star;
}

std::vector<Role> scenario_roles(const world::ScenarioConfig& config) {
  if (config.scenario == world::Scenario::grassland) return {Role::wolf, Role::sheep};
  return {Role::nav_agent};
}

Role role_of(Kind k) {
  switch (k) {
    case Kind::wolf:
      return Role::wolf;
    case Kind::sheep:
      return Role::sheep;
    case Kind::nav_agent:
      return Role::nav_agent;
    default:
      throw UsageError("entity kind " + std::string(world::to_string(k)) + " is not an agent");
  }
}

// ---------------------------------------------------------------------------
// Value normalization

void ValueNormalizer::update(std::span<const double> values) {
  if (values.empty()) return;
  const double n = static_cast<double>(values.size());
  const double m = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  const double v_batch = ss / n;
  if (count == 0.0) {
    mean = m;
    var = v_batch;
    count = n;
    return;
  }
  const double total = count + n;
  const double delta = m - mean;
  var = (var * count + v_batch * n + delta * delta * count * n / total) / total;
  mean += delta * n / total;
  count = total;
}

double ValueNormalizer::stddev() const { return std::sqrt(std::max(var, 1e-8)); }

// ---------------------------------------------------------------------------
// Policies

std::array<double, 2> RolePolicy::log_std() const {
  const auto& t = actor.get("log_std");
  return {t[0], t[1]};
}

void check_compatible(const RolePolicy& policy, const world::ScenarioConfig& scenario) {
  const auto roles = scenario_roles(scenario);
  if (std::find(roles.begin(), roles.end(), policy.role) == roles.end()) {
    throw AdaptationError("role " + role_name(policy.role) + " does not exist in scenario " +
                          std::string(world::to_string(scenario.scenario)));
  }
  const auto state = world::reset(scenario, 0);
  std::size_t agent = 0;
  for (auto a : state.agents()) {
    if (role_of(state.entities[a].kind.tag) == policy.role) {
      agent = a;
      break;
    }
  }
  const ObservationQuery q{&state, agent};
  const auto obs = observe(policy, std::span<const ObservationQuery>(&q, 1));
  (void)obs;
}

RolePolicy make_role_policy(Role role, MethodVariant variant, const world::ScenarioConfig& scenario,
                            std::optional<representation::GFRepresentation> rep,
                            representation::ShapingConfig shaping, std::size_t hidden, Rng& rng) {
  RolePolicy p;
  p.role = role;
  p.variant = variant;
  shaping.validate();
  if (variant == MethodVariant::social_gfs_plus) shaping.enabled = true;
  if (variant != MethodVariant::social_gfs_plus && variant != MethodVariant::social_gfs_star) {
    shaping.enabled = false;
  }
  if (uses_fields(variant)) {
    if (!rep) throw ConfigError(std::string(to_string(variant)) + " needs a field representation");
    if (variant != MethodVariant::social_gfs_star && rep->role != role && rep->role != Role::any) {
      throw ConfigError("representation role " + role_name(rep->role) + " does not match policy role " +
                        role_name(role));
    }
    if (shaping.enabled && !rep->has_attractive_field()) {
      throw ConfigError("shaping enabled but the representation has no attractive field");
    }
    p.representation = std::move(rep);
  } else if (rep) {
    throw ConfigError(std::string(to_string(variant)) + " uses baseline observations; drop the representation");
  }
  p.shaping = shaping;
  std::size_t in = 0;
  if (p.representation) {
    in = p.representation->observation_size();
  } else {
    Kind k = Kind::nav_agent;
    if (role == Role::wolf) k = Kind::wolf;
    if (role == Role::sheep) k = Kind::sheep;
    in = world::baseline_observation_size(scenario, k);
  }
  p.actor = numerics::ParamStore::mlp({in, hidden, hidden, 2}, numerics::Activation::tanh,
                                      numerics::Activation::identity);
  numerics::orthogonal_init(p.actor, rng, 0.01);
  p.actor.add_extra("log_std", numerics::DenseTensor::vector({0.0, 0.0}));
  p.critic = numerics::ParamStore::mlp({in, hidden, hidden, 1}, numerics::Activation::tanh,
                                       numerics::Activation::identity);
  numerics::orthogonal_init(p.critic, rng, 1.0);
  check_compatible(p, scenario);
  return p;
}

Matrix observe(const RolePolicy& policy, std::span<const ObservationQuery> queries) {
  const std::size_t w = policy.observation_size();
  Matrix m(static_cast<Eigen::Index>(queries.size()), static_cast<Eigen::Index>(w));
  auto fill = [&](std::size_t row, const std::vector<double>& v) {
    if (v.size() != w) {
      throw UsageError("observation width " + std::to_string(v.size()) + " does not match the " +
                       role_name(policy.role) + " actor input width " + std::to_string(w));
    }
    std::copy(v.begin(), v.end(), m.row(static_cast<Eigen::Index>(row)).data());
  };
  if (policy.representation) {
    const auto rows = representation::compose_observations(queries, *policy.representation);
    for (std::size_t i = 0; i < rows.size(); ++i) fill(i, rows[i]);
  } else {
    for (std::size_t i = 0; i < queries.size(); ++i) fill(i, world::observe_baseline(*queries[i].state, queries[i].agent));
  }
  return m;
}

double gaussian_log_prob(std::span<const double> x, std::span<const double> mean,
                         std::span<const double> log_std) {
  double lp = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    const double z = (x[d] - mean[d]) / std::exp(log_std[d]);
    lp += -0.5 * z * z - log_std[d] - kHalfLog2Pi;
  }
  return lp;
}

namespace {

Matrix single_row(const RolePolicy& policy, std::span<const double> observation) {
  if (observation.size() != policy.observation_size()) {
    throw UsageError("observation width " + std::to_string(observation.size()) + " does not match actor input " +
                     std::to_string(policy.observation_size()));
  }
  Matrix m(1, static_cast<Eigen::Index>(observation.size()));
  std::copy(observation.begin(), observation.end(), m.data());
  return m;
}

}  // namespace

ActionSample sample_action(const RolePolicy& policy, std::span<const double> observation, Rng& rng) {
  const auto row = single_row(policy, observation);
  const Matrix mean = numerics::forward(policy.actor, row, nullptr);
  const Matrix value = numerics::forward(policy.critic, row, nullptr);
  const auto ls = policy.log_std();
  ActionSample s;
  for (int d = 0; d < 2; ++d) s.raw[static_cast<std::size_t>(d)] = mean(0, d) + std::exp(ls[static_cast<std::size_t>(d)]) * rng.normal();
  const std::array<double, 2> mu = {mean(0, 0), mean(0, 1)};
  s.log_prob = gaussian_log_prob(s.raw, mu, ls);
  s.action = {clip1(s.raw[0]), clip1(s.raw[1])};
  s.value = policy.value_norm.denormalize(value(0, 0));
  return s;
}

world::ActionVector mean_action(const RolePolicy& policy, std::span<const double> observation) {
  const Matrix mean = numerics::forward(policy.actor, single_row(policy, observation), nullptr);
  return {clip1(mean(0, 0)), clip1(mean(0, 1))};
}

// ---------------------------------------------------------------------------
// Configuration

void PPOConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("ppo learning_rate must be > 0");
  if (!(adam_epsilon > 0.0)) throw ConfigError("ppo adam_epsilon must be > 0");
  if (!(clip > 0.0)) throw ConfigError("ppo clip must be > 0");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("ppo gamma must lie in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("ppo gae_lambda must lie in [0, 1]");
  if (!(entropy_coef >= 0.0)) throw ConfigError("ppo entropy_coef must be >= 0");
  if (epochs < 1) throw ConfigError("ppo epochs must be >= 1");
  if (minibatches < 1) throw ConfigError("ppo minibatches must be >= 1");
  if (!(max_grad_norm > 0.0)) throw ConfigError("ppo max_grad_norm must be > 0");
  if (n_envs < 1) throw ConfigError("ppo n_envs must be >= 1");
  if (total_steps < 0) throw ConfigError("ppo total_steps must be >= 0");
  if (hidden < 1) throw ConfigError("ppo hidden must be >= 1");
  if (eval_every < 0 || eval_episodes < 0) throw ConfigError("ppo eval_every / eval_episodes must be >= 0");
}

nlohmann::json to_json(const PPOConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"adam_epsilon", c.adam_epsilon},
          {"clip", c.clip},                   {"gamma", c.gamma},
          {"gae_lambda", c.gae_lambda},       {"entropy_coef", c.entropy_coef},
          {"epochs", c.epochs},               {"minibatches", c.minibatches},
          {"max_grad_norm", c.max_grad_norm}, {"n_envs", c.n_envs},
          {"total_steps", c.total_steps},     {"hidden", c.hidden},
          {"eval_every", c.eval_every},       {"eval_episodes", c.eval_episodes}};
}

PPOConfig ppo_config_from_json(const nlohmann::json& j) {
  PPOConfig c;
  const auto known = to_json(c);
  try {
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw ConfigError("unknown ppo key '" + key + "'");
    }
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.clip = j.value("clip", c.clip);
    c.gamma = j.value("gamma", c.gamma);
    c.gae_lambda = j.value("gae_lambda", c.gae_lambda);
    c.entropy_coef = j.value("entropy_coef", c.entropy_coef);
    c.epochs = j.value("epochs", c.epochs);
    c.minibatches = j.value("minibatches", c.minibatches);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
    c.n_envs = j.value("n_envs", c.n_envs);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.hidden = j.value("hidden", c.hidden);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed ppo config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Lockstep simulation shared by rollouts and evaluation

namespace {

struct SimulationResult {
  std::vector<EpisodeOutcome> outcomes;
  RolloutBuffer buffer;
};

struct RoleGroup {
  Role role;
  const RolePolicy* policy;
  std::vector<std::size_t> agent_slots;  // positions in WorldState::agents()
};

SimulationResult simulate(const world::ScenarioConfig& scenario, const PolicyMap& policies,
                          std::span<const std::uint64_t> reset_seeds, std::span<const std::uint64_t> noise_seeds,
                          bool deterministic, bool record, const EpisodeObserver& observer) {
  const std::size_t n = reset_seeds.size();
  SimulationResult out;
  out.outcomes.resize(n);
  if (n == 0) return out;

  std::vector<world::WorldState> states(n);
  parallel_for(n, [&](std::size_t e) { states[e] = world::reset(scenario, reset_seeds[e]); });
  const auto agents = states[0].agents();
  const std::size_t A = agents.size();

  std::vector<RoleGroup> groups;
  std::vector<std::size_t> group_of(A);
  std::vector<std::size_t> index_in_group(A);
  for (Role r : scenario_roles(scenario)) {
    const auto it = policies.find(r);
    if (it == policies.end()) throw UsageError("no policy given for role " + role_name(r));
    RoleGroup g{r, it->second, {}};
    for (std::size_t k = 0; k < A; ++k) {
      if (role_of(states[0].entities[agents[k]].kind.tag) == r) {
        group_of[k] = groups.size();
        index_in_group[k] = g.agent_slots.size();
        g.agent_slots.push_back(k);
      }
    }
    groups.push_back(std::move(g));
  }
  for (const auto& g : groups) {
    if (g.policy && g.policy->role != g.role && !g.policy->representation) {
      throw AdaptationError("policy for role " + role_name(g.policy->role) + " cannot act as " + role_name(g.role));
    }
  }

  std::vector<Rng> noise;
  noise.reserve(n);
  for (std::size_t e = 0; e < n; ++e) noise.emplace_back(noise_seeds[e]);
  const std::size_t T = static_cast<std::size_t>(scenario.episode_length);

  auto observe_group = [&](const RoleGroup& g) {
    std::vector<ObservationQuery> q;
    q.reserve(n * g.agent_slots.size());
    for (std::size_t e = 0; e < n; ++e) {
      for (auto k : g.agent_slots) q.push_back({&states[e], agents[k]});
    }
    try {
      return observe(*g.policy, q);
    } catch (const AdaptationError& err) {
      throw AdaptationError(role_name(g.role) + " policy: " + err.what());
    }
  };

  std::vector<Matrix> obs(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (groups[gi].policy) obs[gi] = observe_group(groups[gi]);
  }

  auto& buf = out.buffer;
  if (record) {
    buf.horizon = T;
    buf.n_envs = n;
    buf.sequences.resize(n * A);
    for (std::size_t e = 0; e < n; ++e) {
      for (std::size_t k = 0; k < A; ++k) {
        auto& s = buf.sequences[e * A + k];
        const auto& g = groups[group_of[k]];
        if (!g.policy) throw UsageError("cannot record rollouts for a random " + role_name(g.role));
        s.role = g.role;
        s.env = e;
        s.agent = agents[k];
        s.obs_width = g.policy->observation_size();
        s.observations.reserve(T * s.obs_width);
        s.actions.reserve(2 * T);
        s.log_probs.reserve(T);
        s.rewards.reserve(T);
        s.values.reserve(T);
        s.dones.reserve(T);
      }
    }
  }

  if (observer) {
    for (std::size_t e = 0; e < n; ++e) observer(e, states[e], {});
  }

  std::vector<std::vector<double>> original_return(n, std::vector<double>(A, 0.0));
  std::vector<std::vector<double>> variant_return(n, std::vector<double>(A, 0.0));
  std::vector<std::vector<world::ActionVector>> actions(n, std::vector<world::ActionVector>(A));
  std::vector<world::StepResult> results(n);
  std::vector<double> occupied_steps(n, 0.0);
  const bool navigation = world::is_navigation(scenario.scenario);

  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const auto& g = groups[gi];
      const std::size_t per_env = g.agent_slots.size();
      if (!g.policy) {
        for (std::size_t e = 0; e < n; ++e) {
          for (auto k : g.agent_slots) actions[e][k] = {noise[e].uniform(-1.0, 1.0), noise[e].uniform(-1.0, 1.0)};
        }
        continue;
      }
      const Matrix mean = numerics::forward(g.policy->actor, obs[gi], nullptr);
      Matrix value;
      if (record) value = numerics::forward(g.policy->critic, obs[gi], nullptr);
      const auto ls = g.policy->log_std();
      for (std::size_t e = 0; e < n; ++e) {
        for (std::size_t j = 0; j < per_env; ++j) {
          const auto row = static_cast<Eigen::Index>(e * per_env + j);
          const auto k = g.agent_slots[j];
          const std::array<double, 2> mu = {mean(row, 0), mean(row, 1)};
          if (deterministic) {
            actions[e][k] = {clip1(mu[0]), clip1(mu[1])};
            continue;
          }
          std::array<double, 2> raw{};
          for (std::size_t d = 0; d < 2; ++d) raw[d] = mu[d] + std::exp(ls[d]) * noise[e].normal();
          actions[e][k] = {clip1(raw[0]), clip1(raw[1])};
          if (record) {
            auto& s = buf.sequences[e * A + k];
            const auto r = obs[gi].row(row);
            s.observations.insert(s.observations.end(), r.data(), r.data() + r.size());
            s.actions.push_back(raw[0]);
            s.actions.push_back(raw[1]);
            s.log_probs.push_back(gaussian_log_prob(raw, mu, ls));
            s.values.push_back(g.policy->value_norm.denormalize(value(row, 0)));
          }
        }
      }
    }

    parallel_for(n, [&](std::size_t e) { results[e] = world::step(states[e], actions[e]); });
    for (std::size_t e = 0; e < n; ++e) states[e] = results[e].state;

    std::vector<Matrix> next(groups.size());
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      if (groups[gi].policy) next[gi] = observe_group(groups[gi]);
    }

    for (std::size_t e = 0; e < n; ++e) {
      const auto& events = results[e].events;
      for (const auto& ev : events) {
        if (ev.kind == world::EventKind::grass_eaten) ++out.outcomes[e].grass_eaten;
        if (ev.kind == world::EventKind::sheep_eaten) ++out.outcomes[e].sheep_eaten;
      }
      for (std::size_t k = 0; k < A; ++k) {
        const auto& g = groups[group_of[k]];
        const double original = world::reward_original(states[e], events, agents[k]);
        double reward = original;
        if (g.policy) {
          if (g.policy->variant == MethodVariant::reward_engineering) {
            reward = world::reward_engineering(states[e], events, agents[k]);
          }
          if (g.policy->shaping.enabled && g.policy->representation) {
            const auto row = next[group_of[k]].row(static_cast<Eigen::Index>(e * g.agent_slots.size() + index_in_group[k]));
            const double mag = representation::attractive_magnitude(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                                                                   *g.policy->representation);
            reward = representation::shaped_reward(reward, mag, g.policy->shaping);
          }
        }
        original_return[e][k] += original;
        variant_return[e][k] += reward;
        if (record && !deterministic) {
          auto& s = buf.sequences[e * A + k];
          s.rewards.push_back(reward);
          s.dones.push_back(t + 1 == T ? 1 : 0);
        }
      }
      if (navigation) {
        const auto occ = world::landmark_occupancy(states[e]);
        if (!occ.empty()) {
          occupied_steps[e] += static_cast<double>(std::count(occ.begin(), occ.end(), true)) /
                               static_cast<double>(occ.size());
        }
      }
      if (observer) observer(e, states[e], events);
    }
    obs = std::move(next);
  }

  for (std::size_t e = 0; e < n; ++e) {
    auto& o = out.outcomes[e];
    o.steps = T;
    for (const auto& g : groups) {
      double sum = 0.0;
      for (auto k : g.agent_slots) sum += original_return[e][k];
      o.mean_return[g.role] = g.agent_slots.empty() ? 0.0 : sum / static_cast<double>(g.agent_slots.size());
    }
    if (navigation) {
      o.occupation = occupied_steps[e] / static_cast<double>(T);
      o.final_success = world::success_predicate(states[e]);
      const auto occ = world::landmark_occupancy(states[e]);
      o.final_occupation = occ.empty() ? 0.0
                                       : static_cast<double>(std::count(occ.begin(), occ.end(), true)) /
                                             static_cast<double>(occ.size());
    }
  }

  if (record) {
    for (const auto& g : groups) {
      double orig = 0.0, var = 0.0;
      std::size_t count = 0;
      for (std::size_t e = 0; e < n; ++e) {
        for (auto k : g.agent_slots) {
          orig += original_return[e][k];
          var += variant_return[e][k];
          ++count;
        }
      }
      buf.mean_original_return[g.role] = count ? orig / static_cast<double>(count) : 0.0;
      buf.mean_variant_return[g.role] = count ? var / static_cast<double>(count) : 0.0;
    }
    if (world::is_navigation(scenario.scenario)) {
      for (const auto& o : out.outcomes) buf.success.push_back(o.final_success ? 1.0 : 0.0);
    }
  }
  return out;
}

}  // namespace

PolicyMap policy_map(const PolicyCheckpoint& checkpoint) {
  PolicyMap m;
  for (const auto& [role, p] : checkpoint.roles) m[role] = &p;
  return m;
}

RolloutBuffer collect_rollouts(const world::ScenarioConfig& scenario, const PolicyCheckpoint& checkpoint,
                               int n_envs, std::uint64_t seed) {
  if (n_envs < 1) throw UsageError("collect_rollouts needs at least one environment");
  std::vector<std::uint64_t> resets(static_cast<std::size_t>(n_envs));
  std::vector<std::uint64_t> noises(resets.size());
  for (std::size_t e = 0; e < resets.size(); ++e) {
    resets[e] = derive_seed(seed, e, 1);
    noises[e] = derive_seed(seed, e, 2);
  }
  return simulate(scenario, policy_map(checkpoint), resets, noises, false, true, {}).buffer;
}

std::vector<EpisodeOutcome> run_episodes(const world::ScenarioConfig& scenario, const PolicyMap& policies,
                                         std::span<const std::uint64_t> seeds, bool deterministic,
                                         const EpisodeObserver& observer) {
  std::vector<std::uint64_t> noises(seeds.size());
  for (std::size_t e = 0; e < seeds.size(); ++e) noises[e] = derive_seed(seeds[e], 0x5eed);
  return simulate(scenario, policies, seeds, noises, deterministic, false, observer).outcomes;
}

// ---------------------------------------------------------------------------
// Advantages

GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      std::span<const std::uint8_t> dones, double bootstrap_value, double gamma,
                      double lambda) {
  const std::size_t T = rewards.size();
  if (values.size() != T || dones.size() != T) throw UsageError("gae sequences differ in length");
  GaeResult r;
  r.advantages.assign(T, 0.0);
  r.returns.assign(T, 0.0);
  double gae = 0.0;
  for (std::size_t i = T; i-- > 0;) {
    const double live = dones[i] ? 0.0 : 1.0;
    const double next_value = i + 1 == T ? bootstrap_value : values[i + 1];
    const double delta = rewards[i] + gamma * next_value * live - values[i];
    gae = delta + gamma * lambda * live * gae;
    r.advantages[i] = gae;
    r.returns[i] = gae + values[i];
  }
  return r;
}

void compute_gae(RolloutBuffer& buffer, double gamma, double lambda) {
  for (auto& s : buffer.sequences) {
    if (s.values.size() != s.length() || s.dones.size() != s.length()) {
      throw UsageError("rollout sequence is missing value estimates");
    }
    auto r = compute_gae(s.rewards, s.values, s.dones, s.bootstrap_value, gamma, lambda);
    s.advantages = std::move(r.advantages);
    s.returns = std::move(r.returns);
  }
  buffer.advantages_ready = true;
}

void normalize_advantages(std::vector<double>& advantages) {
  const std::size_t n = advantages.size();
  if (n < 2) return;
  const double mean = std::accumulate(advantages.begin(), advantages.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double a : advantages) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  for (auto& a : advantages) a = sd > 1e-12 ? (a - mean) / sd : a - mean;
}

// ---------------------------------------------------------------------------
// PPO

ActorLoss actor_loss(const RolePolicy& policy, const Matrix& observations, const Matrix& actions,
                     std::span<const double> old_log_probs, std::span<const double> advantages,
                     const PPOConfig& config) {
  const auto N = static_cast<std::size_t>(observations.rows());
  if (static_cast<std::size_t>(actions.rows()) != N || old_log_probs.size() != N || advantages.size() != N ||
      actions.cols() != 2) {
    throw UsageError("actor_loss batch shapes disagree");
  }
  numerics::Tape tape;
  const Matrix mean = numerics::forward(policy.actor, observations, &tape);
  const auto ls = policy.log_std();
  const std::array<double, 2> inv_var = {std::exp(-2.0 * ls[0]), std::exp(-2.0 * ls[1])};

  ActorLoss out;
  out.grads = numerics::GradientSet::zeros_like(policy.actor);
  Matrix upstream = Matrix::Zero(static_cast<Eigen::Index>(N), 2);
  std::array<double, 2> d_log_std = {0.0, 0.0};
  const double invN = 1.0 / static_cast<double>(std::max<std::size_t>(N, 1));
  double objective = 0.0, kl = 0.0, clipped = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const std::array<double, 2> a = {actions(row, 0), actions(row, 1)};
    const std::array<double, 2> mu = {mean(row, 0), mean(row, 1)};
    const double lp = gaussian_log_prob(a, mu, ls);
    const double ratio = std::exp(lp - old_log_probs[i]);
    const double A = advantages[i];
    const double unclipped = ratio * A;
    const double clipped_term = std::clamp(ratio, 1.0 - config.clip, 1.0 + config.clip) * A;
    objective += std::min(unclipped, clipped_term);
    kl += old_log_probs[i] - lp;
    if (std::abs(ratio - 1.0) > config.clip) clipped += 1.0;
    const bool active = !((A > 0.0 && ratio > 1.0 + config.clip) || (A < 0.0 && ratio < 1.0 - config.clip));
    if (!active) continue;
    const double g = -A * ratio * invN;  // dLoss/dlogp
    for (std::size_t d = 0; d < 2; ++d) {
      const double diff = a[d] - mu[d];
      upstream(row, static_cast<Eigen::Index>(d)) = g * diff * inv_var[d];
      d_log_std[d] += g * (diff * diff * inv_var[d] - 1.0);
    }
  }
  out.surrogate = objective * invN;
  out.entropy = 2.0 * (0.5 + kHalfLog2Pi) + ls[0] + ls[1];
  out.loss = -out.surrogate - config.entropy_coef * out.entropy;
  out.approx_kl = kl * invN;
  out.clip_fraction = clipped * invN;
  numerics::backward(policy.actor, tape, upstream, out.grads);
  auto& gls = out.grads["log_std"];
  gls[0] = d_log_std[0] - config.entropy_coef;
  gls[1] = d_log_std[1] - config.entropy_coef;
  return out;
}

OptimizerState make_optimizers(const PolicyCheckpoint& checkpoint, const PPOConfig& config) {
  const numerics::AdamConfig adam{config.learning_rate, 0.9, 0.999, config.adam_epsilon};
  OptimizerState s;
  for (const auto& [role, p] : checkpoint.roles) {
    s[role] = {numerics::AdamState::for_params(p.actor, adam), numerics::AdamState::for_params(p.critic, adam)};
  }
  return s;
}

namespace {

std::string batch_summary(Role role, int epoch, const Matrix& obs, std::span<const double> adv,
                          std::span<const double> returns) {
  std::ostringstream os;
  os << "role " << examples::to_string(role) << ", epoch " << epoch << ", batch " << obs.rows() << "x"
     << obs.cols();
  if (obs.size() > 0) os << ", obs range [" << obs.minCoeff() << ", " << obs.maxCoeff() << "]";
  if (!adv.empty()) {
    const auto [lo, hi] = std::minmax_element(adv.begin(), adv.end());
    os << ", advantages [" << *lo << ", " << *hi << "]";
  }
  if (!returns.empty()) {
    const auto [lo, hi] = std::minmax_element(returns.begin(), returns.end());
    os << ", returns [" << *lo << ", " << *hi << "]";
  }
  return os.str();
}

}  // namespace

std::map<Role, PPOStats> ppo_update(PolicyCheckpoint& checkpoint, const RolloutBuffer& buffer,
                                    const PPOConfig& config, OptimizerState& optimizers,
                                    std::uint64_t key) {
  if (!buffer.advantages_ready) throw UsageError("ppo_update called before compute_gae");
  std::map<Role, PPOStats> stats;
  for (auto& [role, policy] : checkpoint.roles) {
    std::vector<const AgentSequence*> seqs;
    std::size_t N = 0;
    for (const auto& s : buffer.sequences) {
      if (s.role != role) continue;
      if (s.obs_width != policy.observation_size()) throw UsageError("rollout width differs from the actor input");
      seqs.push_back(&s);
      N += s.length();
    }
    if (N == 0) continue;
    const auto w = static_cast<Eigen::Index>(policy.observation_size());
    Matrix obs(static_cast<Eigen::Index>(N), w);
    Matrix act(static_cast<Eigen::Index>(N), 2);
    std::vector<double> old_lp, adv, ret;
    old_lp.reserve(N);
    adv.reserve(N);
    ret.reserve(N);
    std::size_t row = 0;
    for (const auto* s : seqs) {
      std::copy(s->observations.begin(), s->observations.end(), obs.row(static_cast<Eigen::Index>(row)).data());
      std::copy(s->actions.begin(), s->actions.end(), act.row(static_cast<Eigen::Index>(row)).data());
      old_lp.insert(old_lp.end(), s->log_probs.begin(), s->log_probs.end());
      adv.insert(adv.end(), s->advantages.begin(), s->advantages.end());
      ret.insert(ret.end(), s->returns.begin(), s->returns.end());
      row += s->length();
    }
    normalize_advantages(adv);
    policy.value_norm.update(ret);
    std::vector<double> target(N);
    for (std::size_t i = 0; i < N; ++i) target[i] = policy.value_norm.normalize(ret[i]);

    auto& opt = optimizers.at(role);
    PPOStats st;
    st.samples = N;
    int iterations = 0;
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    const auto mb_count = static_cast<std::size_t>(config.minibatches);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      if (mb_count > 1) {
        Rng rng(derive_seed(key, static_cast<std::uint64_t>(role), static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = N; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
      }
      for (std::size_t mb = 0; mb < mb_count; ++mb) {
        const std::size_t begin = N * mb / mb_count;
        const std::size_t end = N * (mb + 1) / mb_count;
        if (end == begin) continue;
        const auto m = static_cast<Eigen::Index>(end - begin);
        Matrix o(m, w), a(m, 2);
        std::vector<double> lp(end - begin), ad(end - begin), tg(end - begin);
        for (std::size_t i = begin; i < end; ++i) {
          const auto src = static_cast<Eigen::Index>(order[i]);
          const auto dst = static_cast<Eigen::Index>(i - begin);
          o.row(dst) = obs.row(src);
          a.row(dst) = act.row(src);
          lp[i - begin] = old_lp[order[i]];
          ad[i - begin] = adv[order[i]];
          tg[i - begin] = target[order[i]];
        }

        auto al = actor_loss(policy, o, a, lp, ad, config);
        if (!std::isfinite(al.loss)) {
          throw TrainingError("non-finite actor loss: " + batch_summary(role, epoch, o, ad, ret));
        }
        st.actor_grad_norm += al.grads.clip_norm(config.max_grad_norm);
        numerics::adam_step(policy.actor, al.grads, opt.actor);

        numerics::Tape tape;
        const Matrix v = numerics::forward(policy.critic, o, &tape);
        Matrix dv(m, 1);
        double vloss = 0.0;
        for (Eigen::Index i = 0; i < m; ++i) {
          const double diff = v(i, 0) - tg[static_cast<std::size_t>(i)];
          vloss += diff * diff;
          dv(i, 0) = diff / static_cast<double>(m);
        }
        vloss /= static_cast<double>(m);
        if (!std::isfinite(vloss)) {
          throw TrainingError("non-finite value loss: " + batch_summary(role, epoch, o, ad, ret));
        }
        auto cg = numerics::GradientSet::zeros_like(policy.critic);
        numerics::backward(policy.critic, tape, dv, cg);
        st.critic_grad_norm += cg.clip_norm(config.max_grad_norm);
        numerics::adam_step(policy.critic, cg, opt.critic);

        st.policy_loss += -al.surrogate;
        st.value_loss += vloss;
        st.entropy += al.entropy;
        st.approx_kl += al.approx_kl;
        st.clip_fraction += al.clip_fraction;
        ++iterations;
      }
    }
    if (iterations > 0) {
      const double k = 1.0 / iterations;
      st.policy_loss *= k;
      st.value_loss *= k;
      st.entropy *= k;
      st.approx_kl *= k;
      st.clip_fraction *= k;
      st.actor_grad_norm *= k;
      st.critic_grad_norm *= k;
    }
    stats[role] = st;
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Training

PolicyCheckpoint initial_checkpoint(const world::ScenarioConfig& scenario,
                                    const std::map<Role, RoleSetup>& roles, const PPOConfig& config,
                                    std::uint64_t seed) {
  scenario.validate();
  config.validate();
  PolicyCheckpoint ckpt;
  for (Role r : scenario_roles(scenario)) {
    const auto it = roles.find(r);
    if (it == roles.end()) throw ConfigError("no setup for role " + role_name(r));
    Rng rng(derive_seed(seed, 0x1417, static_cast<std::uint64_t>(r)));
    ckpt.roles[r] = make_role_policy(r, it->second.variant, scenario, it->second.representation,
                                     it->second.shaping, config.hidden, rng);
  }
  for (const auto& [r, setup] : roles) {
    if (!ckpt.roles.count(r)) throw ConfigError("role " + role_name(r) + " does not exist in this scenario");
  }
  ckpt.metadata = {{"scenario", world::to_json(scenario)}, {"seed", seed}, {"steps_trained", 0}};
  return ckpt;
}

namespace {

nlohmann::json eval_snapshot(const world::ScenarioConfig& scenario, const PolicyCheckpoint& ckpt,
                             int episodes, std::uint64_t seed) {
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(episodes));
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = derive_seed(seed, 0xe7a1, i);
  const auto outcomes = run_episodes(scenario, policy_map(ckpt), seeds, true);
  nlohmann::json roles = nlohmann::json::object();
  double success = 0.0, grass = 0.0;
  for (const auto& o : outcomes) {
    success += o.final_success ? 1.0 : 0.0;
    grass += o.grass_eaten;
  }
  for (const auto& [r, p] : ckpt.roles) {
    double sum = 0.0;
    for (const auto& o : outcomes) sum += o.mean_return.at(r);
    roles[role_name(r)] = outcomes.empty() ? 0.0 : sum / static_cast<double>(outcomes.size());
  }
  const double n = std::max<double>(1.0, static_cast<double>(outcomes.size()));
  nlohmann::json j = {{"episodes", outcomes.size()}, {"mean_return", roles}};
  if (world::is_navigation(scenario.scenario)) j["success_rate"] = success / n;
  else j["grass_per_100_steps"] = grass / n * 100.0 / scenario.episode_length;
  return j;
}

}  // namespace

TrainOutput train(const world::ScenarioConfig& scenario, PolicyCheckpoint start, const PPOConfig& config,
                  std::uint64_t seed, const std::function<void(const nlohmann::json&)>& on_record) {
  scenario.validate();
  config.validate();
  const auto roles = scenario_roles(scenario);
  for (Role r : roles) {
    const auto it = start.roles.find(r);
    if (it == start.roles.end()) throw ConfigError("checkpoint has no policy for role " + role_name(r));
    check_compatible(it->second, scenario);
  }
  if (start.roles.size() != roles.size()) throw ConfigError("checkpoint has roles absent from the scenario");

  TrainOutput out{std::move(start), {}};
  const std::int64_t per_update = static_cast<std::int64_t>(config.n_envs) * scenario.episode_length;
  const std::int64_t updates = config.total_steps / per_update;
  if (updates == 0) return out;

  auto optimizers = make_optimizers(out.checkpoint, config);
  for (std::int64_t u = 0; u < updates; ++u) {
    const auto uu = static_cast<std::uint64_t>(u);
    auto buffer = collect_rollouts(scenario, out.checkpoint, config.n_envs, derive_seed(seed, uu, 0xb0));
    compute_gae(buffer, config.gamma, config.gae_lambda);
    const auto stats = ppo_update(out.checkpoint, buffer, config, optimizers, derive_seed(seed, uu, 0xb1));

    nlohmann::json rec = {{"update", u + 1}, {"step", (u + 1) * per_update}};
    nlohmann::json rj = nlohmann::json::object();
    for (const auto& [r, st] : stats) {
      rj[role_name(r)] = {{"variant_return", buffer.mean_variant_return.at(r)},
                          {"original_return", buffer.mean_original_return.at(r)},
                          {"policy_loss", st.policy_loss},
                          {"value_loss", st.value_loss},
                          {"entropy", st.entropy},
                          {"approx_kl", st.approx_kl},
                          {"clip_fraction", st.clip_fraction}};
    }
    rec["roles"] = rj;
    if (!buffer.success.empty()) {
      rec["rollout_success_rate"] =
          std::accumulate(buffer.success.begin(), buffer.success.end(), 0.0) / static_cast<double>(buffer.success.size());
    }
    const bool last = u + 1 == updates;
    if (config.eval_every > 0 && config.eval_episodes > 0 && ((u + 1) % config.eval_every == 0 || last)) {
      rec["eval"] = eval_snapshot(scenario, out.checkpoint, config.eval_episodes, seed);
    }
    if (on_record) on_record(rec);
    out.curve.push_back(std::move(rec));
  }
  auto& meta = out.checkpoint.metadata;
  meta["steps_trained"] = meta.value("steps_trained", std::int64_t{0}) + updates * per_update;
  meta["ppo"] = to_json(config);
  meta["train_seed"] = seed;
  return out;
}

// ---------------------------------------------------------------------------
// Adaptation

RolePolicy swap_policy_representation(const RolePolicy& source, Role new_role,
                                      const std::map<std::string, representation::FieldHandle>& fields,
                                      const representation::SlotMapping& mapping) {
  if (!source.representation) {
    throw ConfigError(std::string(to_string(source.variant)) + " policies have no field representation to swap");
  }
  RolePolicy p = source;
  p.role = new_role;
  p.variant = MethodVariant::social_gfs_star;
  p.representation = representation::swap_representation(*source.representation, fields, mapping);
  // Shaping is a training-time signal of the source game; a transferred policy acts without it.
  p.shaping.enabled = false;
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint container

std::vector<std::uint8_t> encode_checkpoint(const PolicyCheckpoint& checkpoint) {
  io::Writer w;
  w.magic("SGFC");
  w.u32(kCheckpointVersion);
  w.str(checkpoint.metadata.dump());
  w.u64(checkpoint.roles.size());
  for (const auto& [role, p] : checkpoint.roles) {
    w.str(role_name(role));
    w.str(std::string(to_string(p.variant)));
    w.u8(p.representation ? 1 : 0);
    if (p.representation) {
      const auto& rep = *p.representation;
      w.str(role_name(rep.role));
      w.u8(rep.include_velocity ? 1 : 0);
      w.u64(rep.slots.size());
      for (const auto& s : rep.slots) {
        w.str(s.name);
        w.str(std::string(examples::to_string(s.polarity)));
        w.str(s.field_path);
        w.u8(s.zero_fill() ? 0 : 1);
        if (!s.zero_fill()) scorefield::write_field(w, *s.field);
      }
    }
    w.f64(p.shaping.lambda);
    w.u8(p.shaping.enabled ? 1 : 0);
    numerics::write_params(w, p.actor);
    numerics::write_params(w, p.critic);
    w.f64(p.value_norm.mean);
    w.f64(p.value_norm.var);
    w.f64(p.value_norm.count);
  }
  auto bytes = w.bytes();
  const auto sum = io::fnv1a(bytes.data(), bytes.size());
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(sum >> (8 * i)));
  return bytes;
}

PolicyCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw DataError("policy checkpoint truncated");
  io::Reader r(bytes);
  r.expect_magic("SGFC");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported policy checkpoint version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 7; i >= 0; --i) stored = (stored << 8) | bytes[body + static_cast<std::size_t>(i)];
  if (io::fnv1a(bytes.data(), body) != stored) throw DataError("policy checkpoint checksum mismatch (corrupt file)");

  PolicyCheckpoint c;
  try {
    c.metadata = nlohmann::json::parse(r.str());
    const auto n = r.u64();
    for (std::uint64_t k = 0; k < n; ++k) {
      RolePolicy p;
      p.role = examples::parse_role(r.str());
      p.variant = parse_variant(r.str());
      if (r.u8()) {
        representation::GFRepresentation rep;
        rep.role = examples::parse_role(r.str());
        rep.include_velocity = r.u8() != 0;
        const auto slots = r.u64();
        for (std::uint64_t s = 0; s < slots; ++s) {
          representation::GFSlot slot;
          slot.name = r.str();
          slot.polarity = examples::parse_polarity(r.str());
          slot.field_path = r.str();
          if (r.u8()) slot.field = std::make_shared<const scorefield::GradientField>(scorefield::read_field(r));
          rep.slots.push_back(std::move(slot));
        }
        p.representation = std::move(rep);
      }
      p.shaping.lambda = r.f64();
      p.shaping.enabled = r.u8() != 0;
      p.actor = numerics::read_params(r);
      p.critic = numerics::read_params(r);
      p.value_norm.mean = r.f64();
      p.value_norm.var = r.f64();
      p.value_norm.count = r.f64();
      const auto role = p.role;
      c.roles[role] = std::move(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("corrupt policy checkpoint: ") + e.what());
  }
  if (r.position() != body) throw DataError("trailing bytes in policy checkpoint");
  return c;
}

void save_checkpoint(const PolicyCheckpoint& checkpoint, const std::filesystem::path& path) {
  io::Writer w;
  for (auto b : encode_checkpoint(checkpoint)) w.u8(b);
  w.save(path);
}

PolicyCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::Reader::open(path).bytes());
}

}  // namespace socialgf::marl
