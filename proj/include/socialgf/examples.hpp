#pragma once

// Event-triggered example harvesting. Each record is an agent-centric snapshot:
// a flat list of 2D positions following the category layout, beneficiary first
// and at the origin.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "socialgf/world.hpp"

namespace socialgf::examples {

// Which world entities feed a layout group, seen from the beneficiary.
// ally / ally_other: other navigation agents of the same / a different color.
// landmark_match / landmark_other: landmarks of the same / a different color.
// world_center: a virtual entity at the absolute origin.
enum class SlotKind {
  self,
  wolf,
  sheep,
  grass,
  obstacle,
  world_center,
  ally,
  ally_other,
  landmark,
  landmark_match,
  landmark_other,
};
inline constexpr std::size_t kSlotKindCount = 11;

std::string_view to_string(SlotKind k);
SlotKind parse_slot_kind(std::string_view s);

struct SlotGroup {
  SlotKind kind = SlotKind::self;
  int count = 1;
  bool operator==(const SlotGroup&) const = default;
};

// Ordered groups; the first is always {self, 1}.
using Layout = std::vector<SlotGroup>;

enum class Polarity { attractive, repulsive };
enum class Role { wolf, sheep, nav_agent, any };

std::string_view to_string(Polarity p);
std::string_view to_string(Role r);
Polarity parse_polarity(std::string_view s);
Role parse_role(std::string_view s);
bool role_matches(Role r, world::Kind k);

struct ExampleCategory {
  std::string name;
  Polarity polarity = Polarity::attractive;
  Role role = Role::any;
  Layout layout;

  std::size_t entity_count() const;
  std::size_t record_width() const { return 2 * entity_count(); }
  bool operator==(const ExampleCategory&) const = default;
};

nlohmann::json to_json(const ExampleCategory& c);
ExampleCategory category_from_json(const nlohmann::json& j);

// Named categories resolved against a scenario's populations. Throws
// ConfigError for unknown names or names that do not apply to the scenario.
ExampleCategory standard_category(std::string_view name, const world::ScenarioConfig& config);
std::vector<std::string> default_categories(const world::ScenarioConfig& config);

struct ExampleRecord {
  std::vector<double> coords;
  bool operator==(const ExampleRecord&) const = default;
};

struct Provenance {
  nlohmann::json scenario;
  std::uint64_t seed = 0;
  std::string policy;
  // Free-form stamps (config hash, tool version) added by the pipeline.
  nlohmann::json metadata = nlohmann::json::object();
  bool operator==(const Provenance&) const = default;
};

struct ExampleSet {
  ExampleCategory category;
  std::vector<ExampleRecord> records;
  Provenance provenance;
  bool operator==(const ExampleSet&) const = default;
};

using ExampleSets = std::map<std::string, ExampleSet>;

// Per-group positions relative to the beneficiary. Group counts may differ from
// the layout's nominal counts (populations vary between scenarios).
struct Configuration {
  std::vector<std::vector<world::Vec2>> groups;
  bool operator==(const Configuration&) const = default;
};

// Throws AdaptationError when a group's kind has no source in the scenario
// (e.g. sheep in a navigation game).
Configuration gather(const world::WorldState& state, std::size_t agent, const Layout& layout);
// Same, over an explicit entity list (used for pre-respawn event frames).
Configuration gather(const std::vector<world::EntityState>& entities,
                     const world::ScenarioConfig& config, std::size_t agent, const Layout& layout);
bool kind_available(SlotKind k, world::Scenario s);

ExampleRecord to_record(const Configuration& c);
// Throws UsageError when the record width does not match the layout.
Configuration from_record(const ExampleRecord& r, const Layout& layout);

// Re-checks the category's defining predicate on a record (agent-centric
// geometry and the scenario's radii). boundary_avoid checks non-collision.
bool satisfies_predicate(const ExampleCategory& category, const ExampleRecord& record,
                         const world::ScenarioConfig& config);

class BehaviorPolicy {
 public:
  virtual ~BehaviorPolicy() = default;
  virtual std::string name() const = 0;
  // One action per agent; must be safe to call concurrently.
  virtual std::vector<world::ActionVector> act(const world::WorldState& state, Rng& rng) const = 0;
};

class RandomPolicy : public BehaviorPolicy {
 public:
  std::string name() const override { return "random"; }
  std::vector<world::ActionVector> act(const world::WorldState& state, Rng& rng) const override;
};

// Wolves chase the nearest sheep; sheep flee a wolf within flee_radius and
// otherwise seek the nearest grass; navigation agents seek the nearest
// landmark not yet claimed by a lower-index teammate. Gaussian action noise
// keeps the snapshots diverse.
class ScriptedGreedyPolicy : public BehaviorPolicy {
 public:
  explicit ScriptedGreedyPolicy(double noise = 0.3, double flee_radius = 0.4)
      : noise_(noise), flee_radius_(flee_radius) {}
  std::string name() const override { return "scripted_greedy"; }
  std::vector<world::ActionVector> act(const world::WorldState& state, Rng& rng) const override;

 private:
  double noise_;
  double flee_radius_;
};

struct CollectionConfig {
  // Empty selects default_categories(scenario).
  std::vector<std::string> categories;
  int n_target = 1000;
  int max_episodes = 5000;
  // boundary_avoid frames are taken every `boundary_interval` steps.
  int boundary_interval = 50;
};

// Throws StarvationError naming the first starved category when max_episodes
// run out. Deterministic for a given (config, policy, seed) and worker count.
ExampleSets collect_examples(const world::ScenarioConfig& scenario, const BehaviorPolicy& policy,
                             const CollectionConfig& config, std::uint64_t seed);

// Dataset container ("SGFD", version 1) ending in an FNV-1a checksum of all
// preceding bytes.
void save_dataset(const ExampleSets& sets, const std::filesystem::path& path);
// Throws DataError on version mismatch, checksum mismatch, truncation or an
// empty category.
ExampleSets load_dataset(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_dataset(const ExampleSets& sets);
ExampleSets decode_dataset(const std::vector<std::uint8_t>& bytes);
// The checksum stored in the container for these sets.
std::uint64_t dataset_checksum(const ExampleSets& sets);

}  // namespace socialgf::examples
