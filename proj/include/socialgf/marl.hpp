#pragma once

// Per-role PPO over baseline or gradient-field observations.
//
// Every role (wolf, sheep, navigation agent) owns an independent actor and
// critic; agents of one role share them. Environments run in lockstep for one
// full episode per rollout, so a buffer holds exactly n_envs episodes.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "socialgf/representation.hpp"

namespace socialgf::marl {

using examples::Role;
using numerics::Matrix;

enum class MethodVariant { original_reward, reward_engineering, social_gfs, social_gfs_plus, social_gfs_star };

std::string_view to_string(MethodVariant v);
MethodVariant parse_variant(std::string_view s);
bool uses_fields(MethodVariant v);

// Roles present in a scenario, in entity order.
std::vector<Role> scenario_roles(const world::ScenarioConfig& config);
Role role_of(world::Kind k);

// Running mean / variance of returns (parallel Welford merge per batch).
struct ValueNormalizer {
  double mean = 0.0;
  double var = 1.0;
  double count = 0.0;

  void update(std::span<const double> values);
  double stddev() const;
  double normalize(double v) const { return (v - mean) / stddev(); }
  double denormalize(double v) const { return v * stddev() + mean; }
  bool operator==(const ValueNormalizer&) const = default;
};

struct RolePolicy {
  Role role = Role::any;
  MethodVariant variant = MethodVariant::original_reward;
  // Present exactly for field-based variants.
  std::optional<representation::GFRepresentation> representation;
  representation::ShapingConfig shaping;
  // Actor: tanh MLP to a 2D mean, plus the extra parameter "log_std" (2 values).
  numerics::ParamStore actor;
  numerics::ParamStore critic;
  ValueNormalizer value_norm;

  std::size_t observation_size() const { return actor.input_width(); }
  std::array<double, 2> log_std() const;
};

struct PolicyCheckpoint {
  std::map<Role, RolePolicy> roles;
  // scenario, seed, config hash, steps trained, manifests and other provenance.
  nlohmann::json metadata = nlohmann::json::object();
};

// Fresh policy for `role` in `scenario`. Field variants need a representation
// whose role matches; SocialGFsPlus needs shaping enabled.
RolePolicy make_role_policy(Role role, MethodVariant variant, const world::ScenarioConfig& scenario,
                            std::optional<representation::GFRepresentation> rep,
                            representation::ShapingConfig shaping, std::size_t hidden, Rng& rng);

// Throws AdaptationError / UsageError when `policy` cannot act in `scenario`.
void check_compatible(const RolePolicy& policy, const world::ScenarioConfig& scenario);

// Observation rows for a batch of agents, one row each.
Matrix observe(const RolePolicy& policy, std::span<const representation::ObservationQuery> queries);

struct ActionSample {
  world::ActionVector action;     // clipped to [-1, 1]^2
  std::array<double, 2> raw{};    // pre-clip draw
  double log_prob = 0.0;          // of the pre-clip draw
  double value = 0.0;             // denormalized critic estimate
};

ActionSample sample_action(const RolePolicy& policy, std::span<const double> observation, Rng& rng);
world::ActionVector mean_action(const RolePolicy& policy, std::span<const double> observation);
double gaussian_log_prob(std::span<const double> x, std::span<const double> mean,
                         std::span<const double> log_std);

struct PPOConfig {
  double learning_rate = 7e-4;
  double adam_epsilon = 1e-5;
  double clip = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double entropy_coef = 0.01;
  int epochs = 10;
  int minibatches = 1;
  double max_grad_norm = 0.5;
  int n_envs = 32;
  std::int64_t total_steps = 500000;
  std::size_t hidden = 64;
  // Deterministic evaluation snapshot every `eval_every` updates (0 disables).
  int eval_every = 10;
  int eval_episodes = 32;

  void validate() const;
};

nlohmann::json to_json(const PPOConfig& c);
// Missing keys keep defaults; unknown keys are rejected.
PPOConfig ppo_config_from_json(const nlohmann::json& j);

// One agent's trajectory over the rollout horizon.
struct AgentSequence {
  Role role = Role::any;
  std::size_t env = 0;
  std::size_t agent = 0;  // entity index
  std::size_t obs_width = 0;
  std::vector<double> observations;  // horizon x obs_width
  std::vector<double> actions;       // horizon x 2, pre-clip
  std::vector<double> log_probs;
  std::vector<double> rewards;       // variant reward
  std::vector<double> values;
  std::vector<std::uint8_t> dones;   // episode ended after this step
  double bootstrap_value = 0.0;      // value after the last step when not done
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t length() const { return rewards.size(); }
};

struct RolloutBuffer {
  std::size_t horizon = 0;
  std::size_t n_envs = 0;
  std::vector<AgentSequence> sequences;  // env-major, entity order within an env
  bool advantages_ready = false;
  // Per-env episode summaries under the original (event) reward.
  std::vector<double> success;  // final-step success, navigation only
  std::map<Role, double> mean_variant_return;
  std::map<Role, double> mean_original_return;
};

// Uniform random actions for a role are requested with a null policy.
using PolicyMap = std::map<Role, const RolePolicy*>;

// One episode per environment, stochastic actions.
RolloutBuffer collect_rollouts(const world::ScenarioConfig& scenario, const PolicyCheckpoint& checkpoint,
                               int n_envs, std::uint64_t seed);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// dones[t] marks the end of an episode after step t (no bootstrapping past it).
GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      std::span<const std::uint8_t> dones, double bootstrap_value, double gamma,
                      double lambda);
void compute_gae(RolloutBuffer& buffer, double gamma, double lambda);
// In place; zero mean and unit standard deviation when size > 1.
void normalize_advantages(std::vector<double>& advantages);

struct ActorLoss {
  double loss = 0.0;
  double surrogate = 0.0;  // mean of the clipped objective
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  numerics::GradientSet grads;
};

// Clipped surrogate plus entropy bonus over a batch of rows.
ActorLoss actor_loss(const RolePolicy& policy, const Matrix& observations, const Matrix& actions,
                     std::span<const double> old_log_probs, std::span<const double> advantages,
                     const PPOConfig& config);

struct PPOStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double actor_grad_norm = 0.0;
  double critic_grad_norm = 0.0;
  std::size_t samples = 0;
};

struct RoleOptimizer {
  numerics::AdamState actor;
  numerics::AdamState critic;
};
using OptimizerState = std::map<Role, RoleOptimizer>;

OptimizerState make_optimizers(const PolicyCheckpoint& checkpoint, const PPOConfig& config);

// Updates every role from its own sequences only. Throws TrainingError with a
// batch summary when a loss turns non-finite.
std::map<Role, PPOStats> ppo_update(PolicyCheckpoint& checkpoint, const RolloutBuffer& buffer,
                                    const PPOConfig& config, OptimizerState& optimizers,
                                    std::uint64_t key);

struct RoleSetup {
  MethodVariant variant = MethodVariant::original_reward;
  std::optional<representation::GFRepresentation> representation;
  representation::ShapingConfig shaping;
};

PolicyCheckpoint initial_checkpoint(const world::ScenarioConfig& scenario,
                                    const std::map<Role, RoleSetup>& roles, const PPOConfig& config,
                                    std::uint64_t seed);

struct TrainOutput {
  PolicyCheckpoint checkpoint;
  std::vector<nlohmann::json> curve;
};

// Trains `start` for floor(total_steps / (n_envs * episode_length)) updates.
// A zero budget returns `start` unchanged. Every update appends one record
// (step, per-role rewards and losses); snapshots add an "eval" block.
TrainOutput train(const world::ScenarioConfig& scenario, PolicyCheckpoint start, const PPOConfig& config,
                  std::uint64_t seed, const std::function<void(const nlohmann::json&)>& on_record = {});

struct EpisodeOutcome {
  std::map<Role, double> mean_return;  // original reward, summed over the episode, averaged over agents
  int grass_eaten = 0;
  int sheep_eaten = 0;
  bool final_success = false;
  // Fraction of landmarks correctly occupied: at the last step, and averaged over all steps.
  double final_occupation = 0.0;
  double occupation = 0.0;
  std::size_t steps = 0;
};

// Called once after reset (empty events) and after every step.
using EpisodeObserver =
    std::function<void(std::size_t episode, const world::WorldState&, std::span<const world::Event>)>;

// Runs one episode per seed in lockstep. deterministic=true uses mean actions.
std::vector<EpisodeOutcome> run_episodes(const world::ScenarioConfig& scenario, const PolicyMap& policies,
                                         std::span<const std::uint64_t> seeds, bool deterministic,
                                         const EpisodeObserver& observer = {});

PolicyMap policy_map(const PolicyCheckpoint& checkpoint);

// Policy adapted to a new scenario: same parameters, swapped representation.
RolePolicy swap_policy_representation(const RolePolicy& source, Role new_role,
                                      const std::map<std::string, representation::FieldHandle>& fields,
                                      const representation::SlotMapping& mapping);

// Checkpoint container ("SGFC", version 1) with embedded fields and an FNV-1a trailer.
std::vector<std::uint8_t> encode_checkpoint(const PolicyCheckpoint& checkpoint);
PolicyCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const PolicyCheckpoint& checkpoint, const std::filesystem::path& path);
PolicyCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace socialgf::marl
