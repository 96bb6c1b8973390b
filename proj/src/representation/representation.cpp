#include "socialgf/representation.hpp"

#include <algorithm>
#include <cmath>

#include "socialgf/errors.hpp"

namespace socialgf::representation {

using examples::Polarity;

bool GFRepresentation::has_attractive_field() const {
  for (const auto& s : slots) {
    if (s.polarity == Polarity::attractive && !s.zero_fill()) return true;
  }
  return false;
}

void ShapingConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("shaping lambda must be >= 0");
}

std::vector<std::vector<double>> compose_observations(std::span<const ObservationQuery> queries,
                                                      const GFRepresentation& rep) {
  std::vector<std::vector<double>> out(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto& st = *queries[q].state;
    out[q].assign(rep.observation_size(), 0.0);
    if (rep.include_velocity) {
      const auto& e = st.entities.at(queries[q].agent);
      out[q][0] = e.velocity.x;
      out[q][1] = e.velocity.y;
    }
  }
  std::vector<examples::Configuration> configs(queries.size());
  for (std::size_t k = 0; k < rep.slots.size(); ++k) {
    const auto& slot = rep.slots[k];
    if (slot.zero_fill()) continue;
    for (std::size_t q = 0; q < queries.size(); ++q) {
      try {
        configs[q] = examples::gather(*queries[q].state, queries[q].agent, slot.field->category.layout);
      } catch (const AdaptationError& e) {
        throw AdaptationError("representation slot " + std::to_string(k) + " (" + slot.name + "): " + e.what());
      }
    }
    const auto values = scorefield::eval_field_batch(*slot.field, configs);
    const auto off = rep.slot_offset(k);
    for (std::size_t q = 0; q < queries.size(); ++q) {
      out[q][off] = values[q].x;
      out[q][off + 1] = values[q].y;
    }
  }
  return out;
}

std::vector<double> compose_observation(const world::WorldState& state, std::size_t agent,
                                        const GFRepresentation& rep) {
  const ObservationQuery q{&state, agent};
  return compose_observations(std::span<const ObservationQuery>(&q, 1), rep)[0];
}

double attractive_magnitude(std::span<const double> observation, const GFRepresentation& rep) {
  if (observation.size() != rep.observation_size()) throw UsageError("observation does not match representation");
  double sum = 0.0;
  for (std::size_t k = 0; k < rep.slots.size(); ++k) {
    if (rep.slots[k].polarity != Polarity::attractive) continue;
    const auto off = rep.slot_offset(k);
    sum += std::hypot(observation[off], observation[off + 1]);
  }
  return sum;
}

double shaped_reward(double raw, double magnitude, const ShapingConfig& shaping) {
  if (!shaping.enabled) return raw;
  return raw - shaping.lambda * magnitude;
}

double shaped_reward(double raw, const world::WorldState& state, std::size_t agent,
                     const GFRepresentation& rep, const ShapingConfig& shaping) {
  if (!shaping.enabled) return raw;
  if (!rep.has_attractive_field()) throw ConfigError("shaping needs at least one attractive field");
  return shaped_reward(raw, attractive_magnitude(compose_observation(state, agent, rep), rep), shaping);
}

GFRepresentation swap_representation(const GFRepresentation& old_rep,
                                     const std::map<std::string, FieldHandle>& replacements,
                                     const SlotMapping& mapping) {
  for (const auto& [name, directive] : mapping.assignments) {
    const bool known = std::any_of(old_rep.slots.begin(), old_rep.slots.end(),
                                   [&](const GFSlot& s) { return s.name == name; });
    if (!known) throw ConfigError("slot mapping names unknown slot '" + name + "'");
  }
  GFRepresentation rep = old_rep;
  for (auto& slot : rep.slots) {
    std::string directive;
    if (auto it = mapping.assignments.find(slot.name); it != mapping.assignments.end()) {
      directive = it->second;
    } else if (mapping.fallback) {
      directive = *mapping.fallback;
    } else {
      throw ConfigError("slot '" + slot.name + "' is unmapped and no fallback directive was given");
    }
    if (directive == kZeroFill) {
      slot.field = nullptr;
      slot.field_path.clear();
      continue;
    }
    const auto it = replacements.find(directive);
    if (it == replacements.end() || !it->second) {
      throw ConfigError("slot '" + slot.name + "' maps to unknown field '" + directive + "'");
    }
    slot.field = it->second;
    slot.field_path.clear();
    // The slot keeps its name and polarity: the policy's input wiring is unchanged.
  }
  return rep;
}

nlohmann::json manifest_to_json(const GFRepresentation& rep, const ShapingConfig& shaping) {
  nlohmann::json slots = nlohmann::json::array();
  for (const auto& s : rep.slots) {
    nlohmann::json j = {{"name", s.name}, {"polarity", std::string(examples::to_string(s.polarity))}};
    if (s.zero_fill()) {
      j["field"] = nullptr;
    } else {
      j["field"] = s.field_path;
      j["category"] = examples::to_json(s.field->category);
    }
    slots.push_back(j);
  }
  return {{"schema_version", 1},
          {"role", std::string(examples::to_string(rep.role))},
          {"include_velocity", rep.include_velocity},
          {"slots", slots},
          {"shaping", {{"enabled", shaping.enabled}, {"lambda", shaping.lambda}}}};
}

std::pair<GFRepresentation, ShapingConfig> manifest_from_json(const nlohmann::json& j,
                                                              const std::filesystem::path& base_dir) {
  try {
    if (j.value("schema_version", 1) != 1) throw ConfigError("unsupported manifest schema_version");
    GFRepresentation rep;
    rep.role = examples::parse_role(j.at("role").get<std::string>());
    rep.include_velocity = j.value("include_velocity", true);
    std::map<std::string, FieldHandle> cache;
    for (const auto& s : j.at("slots")) {
      GFSlot slot;
      slot.name = s.at("name").get<std::string>();
      slot.polarity = examples::parse_polarity(s.at("polarity").get<std::string>());
      if (!s.at("field").is_null()) {
        slot.field_path = s.at("field").get<std::string>();
        auto& h = cache[slot.field_path];
        if (!h) {
          const auto path = base_dir / slot.field_path;
          if (!std::filesystem::exists(path)) {
            throw ConfigError("manifest field '" + path.string() + "' does not exist (run train-gf first)");
          }
          h = std::make_shared<scorefield::GradientField>(scorefield::load_field(path));
        }
        slot.field = h;
      }
      rep.slots.push_back(std::move(slot));
    }
    ShapingConfig shaping;
    if (auto it = j.find("shaping"); it != j.end()) {
      shaping.enabled = it->value("enabled", false);
      shaping.lambda = it->value("lambda", 0.01);
    }
    shaping.validate();
    if (shaping.enabled && !rep.has_attractive_field()) {
      throw ConfigError("shaping enabled but the representation has no attractive field");
    }
    return {std::move(rep), shaping};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed representation manifest: ") + e.what());
  }
}

}  // namespace socialgf::representation
