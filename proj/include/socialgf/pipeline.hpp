#pragma once

// Config-driven orchestration: collect -> train-gf -> train-marl -> evaluate /
// cross-match -> render. Every artifact embeds the hash of the configuration
// sections it depends on (its stage hash) and the tool version; a rerun whose
// stage hash matches the artifact on disk is a no-op.
//
// Artifact layout under the output root:
//   datasets/examples.sgfd
//   fields/<category>.sgff, fields/<category>.curve.json
//   policies/policy.sgfc, policies/curve.jsonl, policies/<role>.manifest.json
//   reports/eval.json, reports/nav_table.json, reports/cross_match.{json,txt}
//   frames/seed_<n>/frames.jsonl (+ images, quiver CSVs, render.json)

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "socialgf/marl.hpp"
#include "socialgf/scorefield.hpp"

namespace socialgf::pipeline {

inline constexpr const char* kToolVersion = "socialgf 1.0.0";

struct CollectionBlock {
  std::string policy = "scripted_greedy";  // or "random"
  double noise = 0.3;
  double flee_radius = 0.4;
  examples::CollectionConfig config;
};

// A field is either trained here (train block) or loaded from an existing checkpoint.
struct FieldBlock {
  std::optional<scorefield::TrainConfig> train;
  std::optional<std::filesystem::path> path;
};

struct SlotBlock {
  std::string name;
  // Defaults to the field's category polarity.
  std::optional<examples::Polarity> polarity;
  std::optional<std::string> field;  // key into fields; empty: zero-filled slot
};

struct RoleBlock {
  marl::MethodVariant variant = marl::MethodVariant::original_reward;
  std::vector<SlotBlock> slots;
  bool include_velocity = true;
  representation::ShapingConfig shaping;
};

// Representation swap applied to a loaded policy before use (policy transfer).
// Replacement fields are this configuration's fields.
struct AdaptBlock {
  examples::Role from = examples::Role::any;
  examples::Role to = examples::Role::any;
  representation::SlotMapping mapping;
};

// Policy source for evaluation and tournaments. No checkpoint: uniform random.
// A relative checkpoint path resolves against the output root.
struct PolicyRef {
  std::string method;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<AdaptBlock> adapt;
};

struct EvaluationBlock {
  int episodes = 100;
  std::optional<std::uint64_t> seed;
  // Empty: this run's own policy.
  std::vector<PolicyRef> policies;
};

struct CrossMatchBlock {
  int episodes = 50;
  std::optional<std::uint64_t> seed;
  std::vector<PolicyRef> wolves;
  std::vector<PolicyRef> sheep;
};

struct RenderBlock {
  bool images = false;
  int image_size = 256;
  int quiver_cells = 40;
};

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  world::ScenarioConfig scenario;
  CollectionBlock collection;
  std::map<std::string, FieldBlock> fields;
  std::map<examples::Role, RoleBlock> roles;
  marl::PPOConfig ppo;
  EvaluationBlock evaluation;
  std::optional<CrossMatchBlock> cross_match;
  RenderBlock render;
  nlohmann::json source;  // the parsed document, after overrides
};

// Throws ConfigError naming the offending key. Unknown keys are rejected.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

// Applies --seed / --budget overrides to the document and reparses it, so
// that overrides take part in every stage hash.
RunConfig with_overrides(const RunConfig& config, std::optional<std::uint64_t> seed,
                         std::optional<std::int64_t> budget);

// Hex FNV-1a of the canonical (sorted-key, compact) JSON dump.
std::string hash_json(const nlohmann::json& j);
std::string config_hash(const RunConfig& c);

// Stage hashes; each covers the stage's own section plus its upstream stages.
std::string collect_hash(const RunConfig& c);
std::string field_hash(const RunConfig& c, const std::string& category);
std::string marl_hash(const RunConfig& c);

struct Options {
  std::filesystem::path out = "artifacts";
  bool force = false;
  // Machine-readable progress, one JSON object per line.
  std::ostream* log = nullptr;
};

enum class Status { written, up_to_date };

// Each command returns whether it wrote anything. Errors are exceptions:
// ConfigError / UsageError for bad input or missing upstream artifacts
// (messages name the producing command), other errors for failures.
Status cmd_collect(const RunConfig& c, const Options& o);
// Empty category: every field with a train block.
Status cmd_train_gf(const RunConfig& c, const Options& o, const std::string& category = {});
Status cmd_train_marl(const RunConfig& c, const Options& o);
Status cmd_evaluate(const RunConfig& c, const Options& o);
Status cmd_cross_match(const RunConfig& c, const Options& o);
Status cmd_render(const RunConfig& c, const Options& o, std::optional<std::uint64_t> episode_seed = {});

// Paths of the artifacts written by each stage.
std::filesystem::path dataset_path(const Options& o);
std::filesystem::path field_path(const Options& o, const std::string& category);
std::filesystem::path policy_path(const Options& o);
std::filesystem::path eval_path(const Options& o);
std::filesystem::path cross_match_path(const Options& o);

// Exclusive lock on the output root (a .lock file created with O_EXCL).
class ArtifactLock {
 public:
  explicit ArtifactLock(const std::filesystem::path& root);
  ~ArtifactLock();
  ArtifactLock(const ArtifactLock&) = delete;
  ArtifactLock& operator=(const ArtifactLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace socialgf::pipeline
