#include "socialgf/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "socialgf/binary_io.hpp"
#include "socialgf/errors.hpp"
#include "socialgf/evaluation.hpp"

namespace socialgf::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using examples::Role;

namespace {

std::string role_str(Role r) { return std::string(examples::to_string(r)); }

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* n : known) ok = ok || k == n;
    if (!ok) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

scorefield::TrainConfig parse_train_block(const json& j, const std::string& where) {
  reject_unknown(j,
                 {"steps", "batch", "learning_rate", "beta1", "beta2", "hidden", "t0", "sigma0", "t_min", "t_max",
                  "log_every"},
                 where);
  scorefield::TrainConfig t;
  read_opt(j, "steps", t.steps);
  read_opt(j, "batch", t.batch);
  read_opt(j, "learning_rate", t.learning_rate);
  read_opt(j, "beta1", t.beta1);
  read_opt(j, "beta2", t.beta2);
  read_opt(j, "hidden", t.hidden);
  read_opt(j, "t0", t.t0);
  read_opt(j, "sigma0", t.schedule.sigma0);
  read_opt(j, "t_min", t.schedule.t_min);
  read_opt(j, "t_max", t.schedule.t_max);
  read_opt(j, "log_every", t.log_every);
  t.schedule.validate();
  if (t.steps < 1 || t.batch < 1 || t.hidden < 1 || t.log_every < 1) {
    throw ConfigError(where + ": steps, batch, hidden and log_every must be positive");
  }
  if (t.t0 < t.schedule.t_min || t.t0 > t.schedule.t_max) throw ConfigError(where + ": t0 outside [t_min, t_max]");
  return t;
}

PolicyRef parse_policy_ref(const json& j, const std::string& where) {
  reject_unknown(j, {"method", "checkpoint", "adapt"}, where);
  PolicyRef p;
  p.method = j.at("method").get<std::string>();
  if (auto it = j.find("checkpoint"); it != j.end() && !it->is_null()) p.checkpoint = it->get<std::string>();
  if (auto it = j.find("adapt"); it != j.end()) {
    reject_unknown(*it, {"from_role", "to_role", "assignments", "fallback"}, where + ".adapt");
    if (!p.checkpoint) throw ConfigError(where + ": adapt needs a checkpoint");
    AdaptBlock a;
    a.from = examples::parse_role(it->at("from_role").get<std::string>());
    a.to = examples::parse_role(it->at("to_role").get<std::string>());
    a.mapping.assignments = it->value("assignments", std::map<std::string, std::string>{});
    if (auto f = it->find("fallback"); f != it->end() && !f->is_null()) a.mapping.fallback = f->get<std::string>();
    p.adapt = std::move(a);
  }
  return p;
}

std::vector<PolicyRef> parse_policy_list(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + " must be an array");
  std::vector<PolicyRef> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(parse_policy_ref(j[i], where + "[" + std::to_string(i) + "]"));
  }
  return out;
}

std::optional<std::uint64_t> opt_seed(const json& j) {
  if (auto it = j.find("seed"); it != j.end() && !it->is_null()) return it->get<std::uint64_t>();
  return std::nullopt;
}

RunConfig parse_unchecked(const json& j) {
  reject_unknown(j,
                 {"schema_version", "name", "seed", "scenario", "collection", "fields", "roles", "ppo", "evaluation",
                  "cross_match", "render"},
                 "config");
  if (j.value("schema_version", 1) != 1) throw ConfigError("unsupported config schema_version");
  RunConfig c;
  c.source = j;
  read_opt(j, "name", c.name);
  read_opt(j, "seed", c.seed);
  if (!j.contains("scenario")) throw ConfigError("config needs a scenario section");
  c.scenario = world::scenario_from_json(j.at("scenario"));

  if (auto it = j.find("fields"); it != j.end()) {
    if (!it->is_object()) throw ConfigError("fields must be an object keyed by field name");
    for (const auto& [name, block] : it->items()) {
      const std::string where = "fields." + name;
      FieldBlock f;
      if (block.contains("path")) {
        if (block.size() != 1) throw ConfigError(where + ": a path entry takes no training keys");
        f.path = block.at("path").get<std::string>();
      } else {
        f.train = parse_train_block(block, where);
        // Trained fields are named after the example category they learn.
        examples::standard_category(name, c.scenario);
      }
      c.fields.emplace(name, std::move(f));
    }
  }

  if (auto it = j.find("collection"); it != j.end()) {
    reject_unknown(*it,
                   {"policy", "noise", "flee_radius", "categories", "n_target", "max_episodes", "boundary_interval"},
                   "collection");
    read_opt(*it, "policy", c.collection.policy);
    read_opt(*it, "noise", c.collection.noise);
    read_opt(*it, "flee_radius", c.collection.flee_radius);
    read_opt(*it, "categories", c.collection.config.categories);
    read_opt(*it, "n_target", c.collection.config.n_target);
    read_opt(*it, "max_episodes", c.collection.config.max_episodes);
    read_opt(*it, "boundary_interval", c.collection.config.boundary_interval);
  }
  if (c.collection.policy != "scripted_greedy" && c.collection.policy != "random") {
    throw ConfigError("collection.policy must be scripted_greedy or random");
  }
  if (c.collection.config.categories.empty()) {
    for (const auto& [name, f] : c.fields) {
      if (f.train) c.collection.config.categories.push_back(name);
    }
  }
  for (const auto& [name, f] : c.fields) {
    const auto& cats = c.collection.config.categories;
    if (f.train && std::find(cats.begin(), cats.end(), name) == cats.end()) {
      throw ConfigError("fields." + name + " is trained but not collected (add it to collection.categories)");
    }
  }

  if (auto it = j.find("roles"); it != j.end()) {
    if (!it->is_object()) throw ConfigError("roles must be an object keyed by role");
    for (const auto& [name, block] : it->items()) {
      const std::string where = "roles." + name;
      reject_unknown(block, {"variant", "slots", "include_velocity", "shaping"}, where);
      RoleBlock r;
      r.variant = marl::parse_variant(block.at("variant").get<std::string>());
      read_opt(block, "include_velocity", r.include_velocity);
      r.shaping.enabled = r.variant == marl::MethodVariant::social_gfs_plus;
      if (auto s = block.find("shaping"); s != block.end()) {
        reject_unknown(*s, {"enabled", "lambda"}, where + ".shaping");
        read_opt(*s, "enabled", r.shaping.enabled);
        read_opt(*s, "lambda", r.shaping.lambda);
      }
      r.shaping.validate();
      for (const auto& sj : block.value("slots", json::array())) {
        reject_unknown(sj, {"name", "polarity", "field"}, where + ".slots");
        SlotBlock slot;
        slot.name = sj.at("name").get<std::string>();
        if (auto p = sj.find("polarity"); p != sj.end()) slot.polarity = examples::parse_polarity(p->get<std::string>());
        if (auto f = sj.find("field"); f != sj.end() && !f->is_null()) {
          slot.field = f->get<std::string>();
          if (!c.fields.count(*slot.field)) {
            throw ConfigError(where + ": slot '" + slot.name + "' references field '" + *slot.field +
                              "' which has neither a training block nor a checkpoint path");
          }
        }
        r.slots.push_back(std::move(slot));
      }
      if (marl::uses_fields(r.variant) && r.slots.empty()) {
        throw ConfigError(where + ": " + std::string(marl::to_string(r.variant)) + " needs representation slots");
      }
      if (!marl::uses_fields(r.variant) && !r.slots.empty()) {
        throw ConfigError(where + ": " + std::string(marl::to_string(r.variant)) + " takes no representation slots");
      }
      c.roles.emplace(examples::parse_role(name), std::move(r));
    }
  }

  if (auto it = j.find("ppo"); it != j.end()) c.ppo = marl::ppo_config_from_json(*it);
  c.ppo.validate();

  if (auto it = j.find("evaluation"); it != j.end()) {
    reject_unknown(*it, {"episodes", "seed", "policies"}, "evaluation");
    read_opt(*it, "episodes", c.evaluation.episodes);
    c.evaluation.seed = opt_seed(*it);
    if (auto p = it->find("policies"); p != it->end()) c.evaluation.policies = parse_policy_list(*p, "evaluation.policies");
  }
  if (c.evaluation.episodes < 1) throw ConfigError("evaluation.episodes must be positive");

  if (auto it = j.find("cross_match"); it != j.end()) {
    reject_unknown(*it, {"episodes", "seed", "wolves", "sheep"}, "cross_match");
    CrossMatchBlock m;
    read_opt(*it, "episodes", m.episodes);
    m.seed = opt_seed(*it);
    m.wolves = parse_policy_list(it->at("wolves"), "cross_match.wolves");
    m.sheep = parse_policy_list(it->at("sheep"), "cross_match.sheep");
    if (m.episodes < 1) throw ConfigError("cross_match.episodes must be positive");
    c.cross_match = std::move(m);
  }

  if (auto it = j.find("render"); it != j.end()) {
    reject_unknown(*it, {"images", "image_size", "quiver_cells"}, "render");
    read_opt(*it, "images", c.render.images);
    read_opt(*it, "image_size", c.render.image_size);
    read_opt(*it, "quiver_cells", c.render.quiver_cells);
    if (c.render.image_size < 16 || c.render.quiver_cells < 2) {
      throw ConfigError("render.image_size >= 16 and render.quiver_cells >= 2 are required");
    }
  }
  return c;
}

}  // namespace

RunConfig parse_config(const json& j) {
  try {
    return parse_unchecked(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

RunConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

RunConfig with_overrides(const RunConfig& config, std::optional<std::uint64_t> seed,
                         std::optional<std::int64_t> budget) {
  json j = config.source;
  if (seed) j["seed"] = *seed;
  if (budget) {
    if (*budget < 1) throw ConfigError("--budget must be positive");
    j["ppo"]["total_steps"] = *budget;
  }
  return parse_config(j);
}

std::string hash_json(const json& j) {
  // nlohmann::json keeps object keys sorted, so dump() is canonical.
  return io::hex64(io::fnv1a(j.dump()));
}

std::string config_hash(const RunConfig& c) { return hash_json(c.source); }

std::string collect_hash(const RunConfig& c) {
  const auto& cc = c.collection;
  return hash_json({{"stage", "collect"},
                    {"scenario", world::to_json(c.scenario)},
                    {"seed", c.seed},
                    {"policy", cc.policy},
                    {"noise", cc.noise},
                    {"flee_radius", cc.flee_radius},
                    {"categories", cc.config.categories},
                    {"n_target", cc.config.n_target},
                    {"max_episodes", cc.config.max_episodes},
                    {"boundary_interval", cc.config.boundary_interval}});
}

namespace {

json train_block_json(const scorefield::TrainConfig& t) {
  return {{"steps", t.steps},   {"batch", t.batch},   {"learning_rate", t.learning_rate},
          {"beta1", t.beta1},   {"beta2", t.beta2},   {"hidden", t.hidden},
          {"t0", t.t0},         {"sigma0", t.schedule.sigma0}, {"t_min", t.schedule.t_min},
          {"t_max", t.schedule.t_max}};
}

fs::path resolve(const Options& o, const fs::path& p) { return p.is_absolute() ? p : o.out / p; }

json stamp(const std::string& stage, const std::string& hash, const RunConfig& c) {
  return {{"stage", stage}, {"config_hash", hash}, {"run_config_hash", config_hash(c)}, {"tool_version", kToolVersion}};
}

void emit(const Options& o, const json& j) {
  if (o.log) (*o.log) << j.dump() << '\n' << std::flush;
}

// True when `path` holds an artifact with the expected hash. A differing or
// unreadable artifact is an error unless --force was given.
bool up_to_date(const Options& o, const fs::path& path, const std::string& expected,
                const std::function<std::string()>& read_hash, const std::string& what) {
  if (!fs::exists(path)) return false;
  std::string found;
  try {
    found = read_hash();
  } catch (const std::exception& e) {
    if (o.force) return false;
    throw UsageError(what + " " + path.string() + " is unreadable (" + e.what() + "); pass --force to overwrite");
  }
  if (found == expected) {
    emit(o, {{"event", "status"}, {"artifact", path.string()}, {"status", "up to date"}, {"config_hash", expected}});
    return true;
  }
  if (!o.force) {
    throw UsageError(what + " " + path.string() + " was produced by a different configuration (hash " + found +
                     ", expected " + expected + "); pass --force to overwrite");
  }
  return false;
}

std::string dataset_hash_of(const examples::ExampleSets& sets) {
  if (sets.empty()) return {};
  return sets.begin()->second.provenance.metadata.value("config_hash", std::string{});
}

std::string json_file_hash(const fs::path& p) {
  return json::parse(io::read_text(p)).at("config_hash").get<std::string>();
}

void ensure_dirs(const Options& o) {
  for (const char* d : {"datasets", "fields", "policies", "reports", "frames"}) fs::create_directories(o.out / d);
}

// Field checkpoints referenced by the configuration, keyed by field name.
struct LoadedFields {
  std::map<std::string, representation::FieldHandle> handles;
  std::map<std::string, std::string> paths;   // as recorded in manifests
  std::map<std::string, std::string> hashes;  // embedded stage hash or file hash
};

std::string field_source_hash(const RunConfig& c, const Options& o, const std::string& name) {
  const auto& f = c.fields.at(name);
  if (f.train) return field_hash(c, name);
  const auto p = resolve(o, *f.path);
  if (!fs::exists(p)) return "missing";
  const auto bytes = io::Reader::open(p).bytes();
  return "file:" + io::hex64(io::fnv1a(bytes.data(), bytes.size()));
}

LoadedFields load_fields(const RunConfig& c, const Options& o, const std::vector<std::string>& names) {
  LoadedFields out;
  for (const auto& name : names) {
    if (out.handles.count(name)) continue;
    const auto& f = c.fields.at(name);
    fs::path p;
    if (f.train) {
      p = field_path(o, name);
      if (!fs::exists(p)) {
        throw ConfigError("field checkpoint " + p.string() + " not found; run `socialgf train-gf --category " + name +
                          "` first");
      }
    } else {
      p = resolve(o, *f.path);
      if (!fs::exists(p)) throw ConfigError("field checkpoint " + p.string() + " (fields." + name + ".path) not found");
    }
    auto field = scorefield::load_field(p);
    if (f.train) {
      const auto expected = field_hash(c, name);
      const auto found = field.metadata.value("config_hash", std::string{});
      if (found != expected && !o.force) {
        throw UsageError("field " + p.string() + " was trained under a different configuration (hash " + found +
                         ", expected " + expected + "); rerun `socialgf train-gf` or pass --force");
      }
    }
    out.hashes[name] = field_source_hash(c, o, name);
    out.paths[name] = f.train ? fs::path("fields") / (name + ".sgff") : *f.path;
    out.handles[name] = std::make_shared<const scorefield::GradientField>(std::move(field));
  }
  return out;
}

std::vector<std::string> referenced_fields(const RunConfig& c) {
  std::vector<std::string> names;
  for (const auto& [role, r] : c.roles) {
    for (const auto& s : r.slots) {
      if (s.field && std::find(names.begin(), names.end(), *s.field) == names.end()) names.push_back(*s.field);
    }
  }
  return names;
}

std::vector<std::string> all_field_names(const RunConfig& c) {
  std::vector<std::string> names;
  for (const auto& [n, f] : c.fields) names.push_back(n);
  return names;
}

}  // namespace

std::string field_hash(const RunConfig& c, const std::string& category) {
  const auto it = c.fields.find(category);
  if (it == c.fields.end() || !it->second.train) throw UsageError("field '" + category + "' has no training block");
  return hash_json({{"stage", "train-gf"},
                    {"collect", collect_hash(c)},
                    {"category", category},
                    {"train", train_block_json(*it->second.train)},
                    {"seed", c.seed}});
}

std::string marl_hash(const RunConfig& c) {
  json fields = json::object();
  for (const auto& name : referenced_fields(c)) {
    const auto& f = c.fields.at(name);
    fields[name] = f.train ? json(field_hash(c, name)) : json(f.path->string());
  }
  return hash_json({{"stage", "train-marl"},
                    {"scenario", world::to_json(c.scenario)},
                    {"roles", c.source.value("roles", json::object())},
                    {"ppo", marl::to_json(c.ppo)},
                    {"fields", fields},
                    {"seed", c.seed}});
}

fs::path dataset_path(const Options& o) { return o.out / "datasets" / "examples.sgfd"; }
fs::path field_path(const Options& o, const std::string& category) { return o.out / "fields" / (category + ".sgff"); }
fs::path policy_path(const Options& o) { return o.out / "policies" / "policy.sgfc"; }
fs::path eval_path(const Options& o) { return o.out / "reports" / "eval.json"; }
fs::path cross_match_path(const Options& o) { return o.out / "reports" / "cross_match.json"; }

ArtifactLock::ArtifactLock(const fs::path& root) : path_(root / ".lock") {
  fs::create_directories(root);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw UsageError("artifact directory " + root.string() + " is locked by another invocation (remove " +
                       path_.string() + " if no other run is active)");
    }
    throw IoError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
  }
  const auto pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

ArtifactLock::~ArtifactLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// Commands

Status cmd_collect(const RunConfig& c, const Options& o) {
  ArtifactLock lock(o.out);
  ensure_dirs(o);
  const auto path = dataset_path(o);
  const auto hash = collect_hash(c);
  if (up_to_date(o, path, hash, [&] { return dataset_hash_of(examples::load_dataset(path)); }, "dataset")) {
    return Status::up_to_date;
  }
  if (c.collection.config.categories.empty()) {
    throw ConfigError("nothing to collect: no trained fields and no collection.categories");
  }
  std::unique_ptr<examples::BehaviorPolicy> policy;
  if (c.collection.policy == "random") policy = std::make_unique<examples::RandomPolicy>();
  else policy = std::make_unique<examples::ScriptedGreedyPolicy>(c.collection.noise, c.collection.flee_radius);
  auto sets = examples::collect_examples(c.scenario, *policy, c.collection.config, derive_seed(c.seed, 0xc011ULL));
  for (auto& [name, s] : sets) {
    s.provenance.metadata = stamp("collect", hash, c);
    emit(o, {{"event", "collected"}, {"category", name}, {"records", s.records.size()}});
  }
  examples::save_dataset(sets, path);
  emit(o, {{"event", "written"}, {"artifact", path.string()}, {"config_hash", hash}});
  return Status::written;
}

Status cmd_train_gf(const RunConfig& c, const Options& o, const std::string& category) {
  ArtifactLock lock(o.out);
  ensure_dirs(o);
  std::vector<std::string> names;
  if (!category.empty()) {
    const auto it = c.fields.find(category);
    if (it == c.fields.end()) throw UsageError("no field named '" + category + "' in the configuration");
    if (!it->second.train) throw UsageError("field '" + category + "' is loaded from a path and is not trained here");
    names.push_back(category);
  } else {
    for (const auto& [n, f] : c.fields) {
      if (f.train) names.push_back(n);
    }
  }
  if (names.empty()) throw ConfigError("no field has a training block");

  const auto dpath = dataset_path(o);
  if (!fs::exists(dpath)) {
    throw ConfigError("dataset " + dpath.string() + " not found; run `socialgf collect` with this config first");
  }
  std::optional<examples::ExampleSets> sets;
  Status status = Status::up_to_date;
  for (const auto& name : names) {
    const auto path = field_path(o, name);
    const auto hash = field_hash(c, name);
    if (up_to_date(o, path, hash, [&] { return scorefield::load_field(path).metadata.at("config_hash").get<std::string>(); },
                   "field")) {
      continue;
    }
    if (!sets) {
      sets = examples::load_dataset(dpath);
      const auto found = dataset_hash_of(*sets);
      if (found != collect_hash(c) && !o.force) {
        throw UsageError("dataset " + dpath.string() + " was collected under a different configuration (hash " + found +
                         ", expected " + collect_hash(c) + "); rerun `socialgf collect` or pass --force");
      }
    }
    const auto it = sets->find(name);
    if (it == sets->end()) {
      throw ConfigError("dataset has no '" + name + "' category; add it to collection.categories and rerun `socialgf collect`");
    }
    const auto& cfg = *c.fields.at(name).train;
    auto result = scorefield::train_gf(it->second, cfg, derive_seed(c.seed, 0x6f, io::fnv1a(name)),
                                       [&](const scorefield::CurvePoint& p) {
                                         emit(o, {{"event", "train-gf"}, {"category", name}, {"step", p.step},
                                                  {"loss", p.loss}});
                                       });
    result.field.metadata = stamp("train-gf", hash, c);
    result.field.metadata["records"] = it->second.records.size();
    scorefield::save_field(result.field, path);
    json curve = json::array();
    for (const auto& p : result.curve) curve.push_back({{"step", p.step}, {"loss", p.loss}});
    io::write_text(o.out / "fields" / (name + ".curve.json"),
                   json{{"config_hash", hash}, {"initial_loss", result.initial_loss}, {"curve", curve}}.dump(1) + "\n");
    emit(o, {{"event", "written"}, {"artifact", path.string()}, {"config_hash", hash}});
    status = Status::written;
  }
  return status;
}

namespace {

std::map<Role, marl::RoleSetup> role_setups(const RunConfig& c, const LoadedFields& fields) {
  std::map<Role, marl::RoleSetup> setups;
  for (const auto& [role, r] : c.roles) {
    marl::RoleSetup s;
    s.variant = r.variant;
    s.shaping = r.shaping;
    if (marl::uses_fields(r.variant)) {
      representation::GFRepresentation rep;
      rep.role = role;
      rep.include_velocity = r.include_velocity;
      for (const auto& sb : r.slots) {
        representation::GFSlot slot;
        slot.name = sb.name;
        if (sb.field) {
          slot.field = fields.handles.at(*sb.field);
          slot.field_path = fields.paths.at(*sb.field);
          slot.polarity = sb.polarity.value_or(slot.field->category.polarity);
        } else {
          slot.polarity = sb.polarity.value_or(examples::Polarity::attractive);
        }
        rep.slots.push_back(std::move(slot));
      }
      s.representation = std::move(rep);
    }
    setups.emplace(role, std::move(s));
  }
  return setups;
}

}  // namespace

Status cmd_train_marl(const RunConfig& c, const Options& o) {
  ArtifactLock lock(o.out);
  ensure_dirs(o);
  if (c.roles.empty()) throw ConfigError("no roles configured for training");
  const auto path = policy_path(o);
  const auto hash = marl_hash(c);
  if (up_to_date(o, path, hash,
                 [&] { return marl::load_checkpoint(path).metadata.at("config_hash").get<std::string>(); }, "policy")) {
    return Status::up_to_date;
  }
  const auto fields = load_fields(c, o, referenced_fields(c));
  const auto setups = role_setups(c, fields);
  auto start = marl::initial_checkpoint(c.scenario, setups, c.ppo, derive_seed(c.seed, 0x1a17ULL));
  std::ostringstream curve;
  auto out = marl::train(c.scenario, std::move(start), c.ppo, derive_seed(c.seed, 0x7a1ULL), [&](const json& rec) {
    curve << rec.dump() << '\n';
    json e = rec;
    e["event"] = "train-marl";
    emit(o, e);
  });
  auto& meta = out.checkpoint.metadata;
  meta.update(stamp("train-marl", hash, c));
  meta["fields"] = fields.hashes;
  json manifests = json::object();
  for (const auto& [role, p] : out.checkpoint.roles) {
    if (!p.representation) continue;
    const auto m = representation::manifest_to_json(*p.representation, p.shaping);
    manifests[role_str(role)] = m;
    io::write_text(o.out / "policies" / (role_str(role) + ".manifest.json"), m.dump(1) + "\n");
  }
  meta["manifests"] = manifests;
  marl::save_checkpoint(out.checkpoint, path);
  io::write_text(o.out / "policies" / "curve.jsonl", curve.str());
  emit(o, {{"event", "written"}, {"artifact", path.string()}, {"config_hash", hash}});
  return Status::written;
}

namespace {

// A policy ready to act, with the provenance of where it came from.
struct ResolvedPolicy {
  std::string method;
  std::optional<marl::PolicyCheckpoint> checkpoint;  // empty: random for every role
  std::string source_hash;                           // "random" or the checkpoint's embedded hash
};

ResolvedPolicy resolve_policy(const RunConfig& c, const Options& o, const PolicyRef& ref, const LoadedFields& fields) {
  ResolvedPolicy out{ref.method, std::nullopt, "random"};
  if (!ref.checkpoint) return out;
  const auto p = resolve(o, *ref.checkpoint);
  const bool own = fs::weakly_canonical(p) == fs::weakly_canonical(policy_path(o));
  if (!fs::exists(p)) {
    throw ConfigError("policy checkpoint " + p.string() + " not found; run `socialgf train-marl`" +
                      (own ? std::string(" with this config") : std::string(" for the run that produces it")) + " first");
  }
  auto ckpt = marl::load_checkpoint(p);
  out.source_hash = ckpt.metadata.value("config_hash", std::string{});
  if (own && out.source_hash != marl_hash(c) && !o.force) {
    throw UsageError("policy " + p.string() + " was trained under a different configuration (hash " + out.source_hash +
                     ", expected " + marl_hash(c) + "); rerun `socialgf train-marl` or pass --force");
  }
  if (ref.adapt) {
    const auto it = ckpt.roles.find(ref.adapt->from);
    if (it == ckpt.roles.end()) {
      throw ConfigError("checkpoint " + p.string() + " has no " + role_str(ref.adapt->from) + " policy to adapt");
    }
    marl::PolicyCheckpoint adapted;
    adapted.metadata = ckpt.metadata;
    adapted.roles[ref.adapt->to] =
        marl::swap_policy_representation(it->second, ref.adapt->to, fields.handles, ref.adapt->mapping);
    ckpt = std::move(adapted);
  }
  for (const auto& [role, pol] : ckpt.roles) {
    const auto roles = marl::scenario_roles(c.scenario);
    if (std::find(roles.begin(), roles.end(), role) != roles.end()) marl::check_compatible(pol, c.scenario);
  }
  out.checkpoint = std::move(ckpt);
  return out;
}

marl::PolicyMap map_of(const RunConfig& c, const ResolvedPolicy& p) {
  marl::PolicyMap m;
  for (Role r : marl::scenario_roles(c.scenario)) {
    const marl::RolePolicy* pol = nullptr;
    if (p.checkpoint) {
      const auto it = p.checkpoint->roles.find(r);
      if (it != p.checkpoint->roles.end()) pol = &it->second;
    }
    m[r] = pol;
  }
  return m;
}

LoadedFields fields_for_adaptation(const RunConfig& c, const Options& o, const std::vector<PolicyRef>& refs) {
  const bool any = std::any_of(refs.begin(), refs.end(), [](const PolicyRef& r) { return r.adapt.has_value(); });
  return any ? load_fields(c, o, all_field_names(c)) : LoadedFields{};
}

// The shared variant name when every role uses one, else the run name.
std::string own_label(const RunConfig& c) {
  std::string label;
  for (const auto& [role, r] : c.roles) {
    const std::string v(marl::to_string(r.variant));
    if (!label.empty() && label != v) return c.name;
    label = v;
  }
  return label.empty() ? c.name : label;
}

std::string population_label(const world::ScenarioConfig& s) {
  switch (s.scenario) {
    case world::Scenario::grassland:
      return std::to_string(s.wolves) + "-" + std::to_string(s.sheep);
    case world::Scenario::team_nav:
      return std::to_string(s.agents) + "-" + std::to_string(s.landmarks);
    default:
      return std::to_string(s.agents);
  }
}

}  // namespace

Status cmd_evaluate(const RunConfig& c, const Options& o) {
  ArtifactLock lock(o.out);
  ensure_dirs(o);
  auto refs = c.evaluation.policies;
  if (refs.empty()) refs.push_back({own_label(c), fs::path("policies") / "policy.sgfc", std::nullopt});
  const auto fields = fields_for_adaptation(c, o, refs);
  std::vector<ResolvedPolicy> policies;
  for (const auto& r : refs) policies.push_back(resolve_policy(c, o, r, fields));

  const std::uint64_t seed = c.evaluation.seed.value_or(derive_seed(c.seed, 0xe7a1ULL));
  json sources = json::array();
  for (const auto& p : policies) sources.push_back({{"method", p.method}, {"source", p.source_hash}});
  const auto hash = hash_json({{"stage", "evaluate"},
                               {"scenario", world::to_json(c.scenario)},
                               {"evaluation", c.source.value("evaluation", json::object())},
                               {"episodes", c.evaluation.episodes},
                               {"seed", seed},
                               {"sources", sources}});
  const auto path = eval_path(o);
  if (up_to_date(o, path, hash, [&] { return json_file_hash(path); }, "report")) return Status::up_to_date;

  const bool nav = world::is_navigation(c.scenario.scenario);
  json results = json::array();
  evaluation::NavTable table;
  table.scenario = std::string(world::to_string(c.scenario.scenario));
  table.populations = {population_label(c.scenario)};
  table.config_hash = hash;
  for (const auto& p : policies) {
    auto report = evaluation::evaluate(c.scenario, map_of(c, p), c.evaluation.episodes, seed);
    report.config_hash = hash;
    results.push_back({{"method", p.method}, {"source", p.source_hash}, {"report", evaluation::to_json(report)}});
    emit(o, {{"event", "evaluated"}, {"method", p.method}, {"report", evaluation::to_json(report)}});
    if (nav) {
      table.methods.push_back(p.method);
      table.cells.push_back({{report.success_rate, report.occupation_rate, report.episodes}});
    }
  }
  if (nav) {
    const auto tj = evaluation::to_json(table);
    evaluation::check_nav_table_schema(tj);
    io::write_text(o.out / "reports" / "nav_table.json", tj.dump(1) + "\n");
    io::write_text(o.out / "reports" / "nav_table.txt",
                   "success rate\n" + evaluation::to_text(table, "success_rate") + "\noccupation rate\n" +
                       evaluation::to_text(table, "occupation_rate"));
  }
  const json doc = {{"schema", "eval_run/v1"},
                    {"config_hash", hash},
                    {"tool_version", kToolVersion},
                    {"scenario", world::to_json(c.scenario)},
                    {"episodes", c.evaluation.episodes},
                    {"seed", seed},
                    {"results", results}};
  io::write_text(path, doc.dump(1) + "\n");
  emit(o, {{"event", "written"}, {"artifact", path.string()}, {"config_hash", hash}});
  return Status::written;
}

Status cmd_cross_match(const RunConfig& c, const Options& o) {
  if (!c.cross_match) throw ConfigError("the configuration has no cross_match section");
  if (c.scenario.scenario != world::Scenario::grassland) throw ConfigError("cross-match needs a grassland scenario");
  ArtifactLock lock(o.out);
  ensure_dirs(o);
  const auto& m = *c.cross_match;
  std::vector<PolicyRef> all = m.wolves;
  all.insert(all.end(), m.sheep.begin(), m.sheep.end());
  const auto fields = fields_for_adaptation(c, o, all);
  std::vector<ResolvedPolicy> wolves, sheep;
  for (const auto& r : m.wolves) wolves.push_back(resolve_policy(c, o, r, fields));
  for (const auto& r : m.sheep) sheep.push_back(resolve_policy(c, o, r, fields));

  const std::uint64_t seed = m.seed.value_or(derive_seed(c.seed, 0xc4a5ULL));
  json sources = json::object();
  for (const auto* side : {&wolves, &sheep}) {
    for (const auto& p : *side) sources[p.method] = p.source_hash;
  }
  const auto hash = hash_json({{"stage", "cross-match"},
                               {"scenario", world::to_json(c.scenario)},
                               {"cross_match", c.source.at("cross_match")},
                               {"seed", seed},
                               {"sources", sources}});
  const auto path = cross_match_path(o);
  if (up_to_date(o, path, hash, [&] { return json_file_hash(path); }, "report")) return Status::up_to_date;

  auto named = [&](const std::vector<ResolvedPolicy>& side, Role role) {
    std::vector<evaluation::NamedPolicy> out;
    for (const auto& p : side) {
      const marl::RolePolicy* pol = nullptr;
      if (p.checkpoint) {
        const auto it = p.checkpoint->roles.find(role);
        if (it == p.checkpoint->roles.end()) {
          throw ConfigError("method '" + p.method + "' has no " + role_str(role) + " policy");
        }
        pol = &it->second;
      }
      out.push_back({p.method, pol});
    }
    return out;
  };
  auto report = evaluation::cross_match(c.scenario, named(wolves, Role::wolf), named(sheep, Role::sheep), m.episodes, seed);
  report.config_hash = hash;
  auto j = evaluation::to_json(report);
  evaluation::check_cross_match_schema(j);
  j["tool_version"] = kToolVersion;
  io::write_text(path, j.dump(1) + "\n");
  io::write_text(o.out / "reports" / "cross_match.txt", evaluation::to_text(report));
  emit(o, {{"event", "written"}, {"artifact", path.string()}, {"config_hash", hash}});
  return Status::written;
}

Status cmd_render(const RunConfig& c, const Options& o, std::optional<std::uint64_t> episode_seed) {
  ArtifactLock lock(o.out);
  ensure_dirs(o);
  const std::uint64_t seed = episode_seed.value_or(derive_seed(c.seed, 0x4e4dULL));
  const PolicyRef own{own_label(c), fs::path("policies") / "policy.sgfc", std::nullopt};
  const auto policy = resolve_policy(c, o, own, {});
  const auto hash = hash_json({{"stage", "render"},
                               {"policy", policy.source_hash},
                               {"render", c.source.value("render", json::object())},
                               {"seed", seed}});
  const auto dir = o.out / "frames" / ("seed_" + std::to_string(seed));
  const auto marker = dir / "render.json";
  if (up_to_date(o, marker, hash, [&] { return json_file_hash(marker); }, "frames")) return Status::up_to_date;
  fs::create_directories(dir);

  auto written = evaluation::render_frames(c.scenario, map_of(c, policy), seed, dir,
                                           {c.render.images, c.render.image_size});
  const auto scene = world::reset(c.scenario, seed);
  for (const auto& [role, p] : policy.checkpoint->roles) {
    if (!p.representation) continue;
    std::optional<std::size_t> agent;
    for (auto a : scene.agents()) {
      if (!agent && marl::role_of(scene.entities[a].kind.tag) == role) agent = a;
    }
    if (!agent) continue;
    for (const auto& slot : p.representation->slots) {
      if (slot.zero_fill()) continue;
      const evaluation::GridSpec grid{c.render.quiver_cells, c.render.quiver_cells, c.scenario.half_width};
      const auto q = evaluation::field_quiver(*slot.field, scene, *agent, grid);
      const auto qp = dir / ("quiver_" + role_str(role) + "_" + slot.name + ".csv");
      io::write_text(qp, evaluation::to_csv(q));
      written.push_back(qp);
    }
  }
  json files = json::array();
  for (const auto& f : written) files.push_back(f.filename().string());
  io::write_text(marker, json{{"config_hash", hash}, {"tool_version", kToolVersion}, {"seed", seed}, {"files", files}}
                             .dump(1) + "\n");
  emit(o, {{"event", "written"}, {"artifact", dir.string()}, {"files", files.size()}, {"config_hash", hash}});
  return Status::written;
}

}  // namespace socialgf::pipeline
