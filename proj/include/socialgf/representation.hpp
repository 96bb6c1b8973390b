#pragma once

// Gradient-field observations, shaped rewards and representation swapping.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "socialgf/scorefield.hpp"

namespace socialgf::representation {

using FieldHandle = std::shared_ptr<const scorefield::GradientField>;

// One observation slot. A null field is a zero-fill slot: it contributes (0, 0).
struct GFSlot {
  std::string name;
  examples::Polarity polarity = examples::Polarity::attractive;
  FieldHandle field;
  // Where the field was loaded from, if anywhere; kept for manifests.
  std::string field_path;

  bool zero_fill() const { return field == nullptr; }
};

struct GFRepresentation {
  examples::Role role = examples::Role::any;
  std::vector<GFSlot> slots;
  bool include_velocity = true;

  std::size_t observation_size() const { return 2 * slots.size() + (include_velocity ? 2 : 0); }
  // Offset of slot k inside an observation vector.
  std::size_t slot_offset(std::size_t k) const { return (include_velocity ? 2 : 0) + 2 * k; }
  bool has_attractive_field() const;
};

struct ShapingConfig {
  double lambda = 0.01;
  bool enabled = false;
  void validate() const;
  bool operator==(const ShapingConfig&) const = default;
};

struct ObservationQuery {
  const world::WorldState* state = nullptr;
  std::size_t agent = 0;
};

// [velocity?, gf_1, ..., gf_n]. Throws AdaptationError naming the slot when the
// scenario lacks an entity kind the slot's field needs.
std::vector<double> compose_observation(const world::WorldState& state, std::size_t agent,
                                        const GFRepresentation& rep);
// Batched form; each field is evaluated once over all queries.
std::vector<std::vector<double>> compose_observations(std::span<const ObservationQuery> queries,
                                                      const GFRepresentation& rep);

// Sum of attractive-slot Euclidean norms read off a composed observation.
double attractive_magnitude(std::span<const double> observation, const GFRepresentation& rep);
// raw - lambda * attractive_magnitude when enabled; raw otherwise.
double shaped_reward(double raw, double attractive_magnitude, const ShapingConfig& shaping);
double shaped_reward(double raw, const world::WorldState& state, std::size_t agent,
                     const GFRepresentation& rep, const ShapingConfig& shaping);

// Old slot name -> name of a field in the replacement set, or "zero".
struct SlotMapping {
  std::map<std::string, std::string> assignments;
  // Directive for slots absent from `assignments` ("zero" or a field name).
  // Without one, an unmapped slot is a configuration error.
  std::optional<std::string> fallback;
};

inline constexpr const char* kZeroFill = "zero";

// New representation in the old slot order; the role is kept. Throws
// ConfigError for unmapped slots (no fallback) or unknown field names.
GFRepresentation swap_representation(const GFRepresentation& old_rep,
                                     const std::map<std::string, FieldHandle>& replacements,
                                     const SlotMapping& mapping);

// Manifest: role, velocity flag, slots (name, polarity, field path or null).
nlohmann::json manifest_to_json(const GFRepresentation& rep, const ShapingConfig& shaping);
// Field paths are resolved against base_dir. Loaded fields are cached per path.
std::pair<GFRepresentation, ShapingConfig> manifest_from_json(const nlohmann::json& j,
                                                              const std::filesystem::path& base_dir);

}  // namespace socialgf::representation
