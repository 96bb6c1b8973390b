#include "socialgf/scorefield.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "socialgf/errors.hpp"

namespace socialgf::scorefield {

using examples::Configuration;
using examples::ExampleRecord;
using numerics::Matrix;

double NoiseSchedule::sigma(double t) const { return std::pow(sigma0, t); }
double NoiseSchedule::weight(double t) const {
  const double s = sigma(t);
  return s * s;
}

void NoiseSchedule::validate() const {
  if (!(sigma0 > 1.0)) throw ConfigError("noise schedule: sigma0 must exceed 1");
  if (!(t_min > 0.0) || !(t_min < t_max)) throw ConfigError("noise schedule: need 0 < t_min < t_max");
}

namespace {

// Counter-based draws so that sample noise depends only on (key, index).
double keyed_uniform(std::uint64_t key, std::uint64_t i, std::uint64_t j) {
  return static_cast<double>(derive_seed(key, i, j) >> 11) * 0x1p-53;
}

double keyed_normal(std::uint64_t key, std::uint64_t i, std::uint64_t j) {
  const double u1 = keyed_uniform(key, i, 2 * j);
  const double u2 = keyed_uniform(key, i, 2 * j + 1);
  return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::size_t> signature(const Configuration& c) {
  std::vector<std::size_t> s;
  s.reserve(c.groups.size());
  for (const auto& g : c.groups) s.push_back(g.size());
  return s;
}

void check_configuration(const ScoreNetwork& net, const Configuration& c) {
  if (c.groups.size() != net.layout.size()) {
    throw UsageError("configuration has " + std::to_string(c.groups.size()) +
                     " groups but the field layout has " + std::to_string(net.layout.size()));
  }
  if (c.groups[0].size() != 1) throw UsageError("configuration must hold exactly one self position");
  for (const auto& g : c.groups) {
    for (const auto& p : g) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw UsageError("non-finite configuration");
    }
  }
}

}  // namespace

ScoreNetwork ScoreNetwork::create(const examples::Layout& layout, std::size_t hidden, Rng& rng) {
  if (layout.empty() || layout.front().kind != examples::SlotKind::self) {
    throw ConfigError("score network layout must start with the self slot");
  }
  if (hidden == 0) throw ConfigError("hidden width must be positive");
  ScoreNetwork n;
  n.layout = layout;
  using numerics::Activation;
  n.embed = numerics::ParamStore::mlp({kFeatureWidth, hidden, hidden}, Activation::relu, Activation::relu);
  n.head = numerics::ParamStore::mlp({hidden * layout.size(), hidden, hidden, 2}, Activation::relu,
                                     Activation::identity);
  numerics::orthogonal_init(n.embed, rng, std::sqrt(2.0));
  numerics::orthogonal_init(n.head, rng, 1.0);
  return n;
}

NetworkPass network_forward(const ScoreNetwork& net, const NoiseSchedule& schedule,
                            std::span<const Configuration> batch, std::span<const double> ts,
                            bool record_tape) {
  if (batch.empty()) throw UsageError("empty batch");
  if (ts.size() != batch.size()) throw UsageError("one time value per configuration is required");
  for (const auto& c : batch) check_configuration(net, c);
  NetworkPass pass;
  pass.group_sizes = signature(batch[0]);
  for (const auto& c : batch) {
    if (signature(c) != pass.group_sizes) throw UsageError("batch mixes group sizes");
  }
  std::size_t set_size = 0;
  for (auto s : pass.group_sizes) set_size += s;
  const auto B = static_cast<Eigen::Index>(batch.size());
  const auto S = static_cast<Eigen::Index>(set_size);
  const bool relative = net.has_context();
  constexpr std::size_t K = examples::kSlotKindCount;

  Matrix x = Matrix::Zero(B * S, static_cast<Eigen::Index>(kFeatureWidth));
  pass.sigmas.resize(batch.size());
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& c = batch[static_cast<std::size_t>(b)];
    const double t = ts[static_cast<std::size_t>(b)];
    const double sigma = schedule.sigma(t);
    pass.sigmas[static_cast<std::size_t>(b)] = sigma;
    const double scale = 1.0 / std::sqrt(1.0 + sigma * sigma);
    const Vec2 self = c.groups[0][0];
    Eigen::Index row = b * S;
    for (std::size_t g = 0; g < c.groups.size(); ++g) {
      const auto kind = static_cast<Eigen::Index>(net.layout[g].kind);
      for (const auto& p : c.groups[g]) {
        Vec2 v = p;
        if (relative) v = g == 0 ? Vec2{} : p - self;
        x(row, 0) = v.x * scale;
        x(row, 1) = v.y * scale;
        x(row, 2 + kind) = 1.0;
        x(row, 2 + K) = t;
        x(row, 3 + K) = sigma / schedule.sigma0;
        x(row, 4 + K) = 1.0 / sigma;
        ++row;
      }
    }
  }
  const Matrix e = numerics::forward(net.embed, x, record_tape ? &pass.embed_tape : nullptr);
  const auto H = e.cols();
  Matrix pooled(B, H * static_cast<Eigen::Index>(net.layout.size()));
  std::size_t begin = 0;
  for (std::size_t g = 0; g < pass.group_sizes.size(); ++g) {
    const std::size_t end = begin + pass.group_sizes[g];
    pooled.middleCols(static_cast<Eigen::Index>(g) * H, H) = numerics::set_mean_pool(e, set_size, begin, end);
    begin = end;
  }
  pass.scores = numerics::forward(net.head, pooled, record_tape ? &pass.head_tape : nullptr);
  for (Eigen::Index b = 0; b < B; ++b) pass.scores.row(b) /= pass.sigmas[static_cast<std::size_t>(b)];
  return pass;
}

void network_backward(const ScoreNetwork& net, const NetworkPass& pass, const Matrix& d_scores,
                      numerics::GradientSet& embed_grads, numerics::GradientSet& head_grads) {
  Matrix d_out = d_scores;
  for (Eigen::Index b = 0; b < d_out.rows(); ++b) d_out.row(b) /= pass.sigmas[static_cast<std::size_t>(b)];
  const Matrix d_pooled = numerics::backward(net.head, pass.head_tape, d_out, head_grads);
  std::size_t set_size = 0;
  for (auto s : pass.group_sizes) set_size += s;
  const auto H = static_cast<Eigen::Index>(net.hidden());
  Matrix d_e = Matrix::Zero(d_out.rows() * static_cast<Eigen::Index>(set_size), H);
  std::size_t begin = 0;
  for (std::size_t g = 0; g < pass.group_sizes.size(); ++g) {
    const std::size_t end = begin + pass.group_sizes[g];
    d_e += numerics::set_mean_pool_backward(d_pooled.middleCols(static_cast<Eigen::Index>(g) * H, H),
                                            set_size, begin, end);
    begin = end;
  }
  numerics::backward(net.embed, pass.embed_tape, d_e, embed_grads);
}

Perturbation perturb_with(const ExampleRecord& record, double sigma, std::span<const double> z) {
  if (z.size() != record.coords.size()) throw UsageError("one noise draw per coordinate is required");
  Perturbation p;
  p.noisy.coords.resize(record.coords.size());
  p.target.resize(record.coords.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    p.noisy.coords[i] = record.coords[i] + sigma * z[i];
    p.target[i] = (record.coords[i] - p.noisy.coords[i]) / (sigma * sigma);
  }
  return p;
}

Perturbation perturb(const ExampleRecord& record, double t, const NoiseSchedule& schedule, Rng& rng) {
  if (t < schedule.t_min || t > schedule.t_max) throw UsageError("perturbation time outside [t_min, t_max]");
  std::vector<double> z(record.coords.size());
  for (auto& v : z) v = rng.normal();
  return perturb_with(record, schedule.sigma(t), z);
}

LossResult dsm_loss(const ScoreNetwork& net, std::span<const ExampleRecord> batch,
                    const NoiseSchedule& schedule, std::uint64_t key, DsmMode mode) {
  if (batch.empty()) throw ConfigError("DSM loss needs a non-empty batch");
  const std::size_t B = batch.size();
  std::vector<Configuration> configs(B);
  std::vector<double> ts(B);
  std::vector<Vec2> targets(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double t = mode.fixed_t ? *mode.fixed_t
                                  : schedule.t_min + (schedule.t_max - schedule.t_min) * keyed_uniform(key, b, 0);
    const double sigma = schedule.sigma(t);
    const double z[2] = {keyed_normal(key, b, 1), keyed_normal(key, b, 2)};
    const ExampleRecord self{{batch[b].coords.at(0), batch[b].coords.at(1)}};
    const auto p = perturb_with(self, sigma, z);
    configs[b] = examples::from_record(batch[b], net.layout);
    configs[b].groups[0][0] = {p.noisy.coords[0], p.noisy.coords[1]};
    targets[b] = {p.target[0], p.target[1]};
    if (mode.negate_target) targets[b] = targets[b] * -1.0;
    ts[b] = t;
  }
  const auto pass = network_forward(net, schedule, configs, ts, true);
  Matrix d_scores(static_cast<Eigen::Index>(B), 2);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto i = static_cast<Eigen::Index>(b);
    const double w = mode.fixed_t ? 1.0 : schedule.weight(ts[b]);
    const double dx = pass.scores(i, 0) - targets[b].x;
    const double dy = pass.scores(i, 1) - targets[b].y;
    total += w * (dx * dx + dy * dy);
    d_scores(i, 0) = 2.0 * w * dx / static_cast<double>(B);
    d_scores(i, 1) = 2.0 * w * dy / static_cast<double>(B);
  }
  LossResult r;
  r.loss = total / static_cast<double>(B);
  if (!std::isfinite(r.loss)) {
    const auto [lo, hi] = std::minmax_element(ts.begin(), ts.end());
    throw TrainingError("non-finite DSM loss on a batch of " + std::to_string(B) + " records (t in [" +
                        std::to_string(*lo) + ", " + std::to_string(*hi) + "], key " +
                        std::to_string(key) + ")");
  }
  r.embed_grads = numerics::GradientSet::zeros_like(net.embed);
  r.head_grads = numerics::GradientSet::zeros_like(net.head);
  network_backward(net, pass, d_scores, r.embed_grads, r.head_grads);
  return r;
}

TrainResult train_gf(const examples::ExampleSet& set, const TrainConfig& config, std::uint64_t seed,
                     const std::function<void(const CurvePoint&)>& on_log) {
  config.schedule.validate();
  if (set.records.empty()) throw ConfigError("cannot train a field on empty category '" + set.category.name + "'");
  if (config.steps < 1 || config.batch < 1 || config.log_every < 1) {
    throw ConfigError("steps, batch and log_every must be positive");
  }
  if (config.t0 < config.schedule.t_min || config.t0 > config.schedule.t_max) {
    throw ConfigError("t0 must lie in [t_min, t_max]");
  }
  if (config.fixed_t && (*config.fixed_t < config.schedule.t_min || *config.fixed_t > config.schedule.t_max)) {
    throw ConfigError("fixed_t must lie in [t_min, t_max]");
  }
  const auto width = set.category.record_width();
  for (const auto& r : set.records) {
    if (r.coords.size() != width) throw ConfigError("record width disagrees with the category layout");
  }

  Rng init(derive_seed(seed, 0x696e6974ULL));
  TrainResult result;
  result.field.net = ScoreNetwork::create(set.category.layout, config.hidden, init);
  result.field.schedule = config.schedule;
  result.field.t0 = config.t0;
  result.field.category = set.category;
  auto& net = result.field.net;

  const numerics::AdamConfig adam{config.learning_rate, config.beta1, config.beta2, 1e-8};
  auto embed_state = numerics::AdamState::for_params(net.embed, adam);
  auto head_state = numerics::AdamState::for_params(net.head, adam);

  const std::size_t n = set.records.size();
  std::vector<ExampleRecord> batch(static_cast<std::size_t>(config.batch));
  double window = 0.0;
  int over = 0;
  for (int step = 0; step < config.steps; ++step) {
    const std::uint64_t key = derive_seed(seed, 0x647361ULL, static_cast<std::uint64_t>(step));
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto idx = static_cast<std::size_t>(keyed_uniform(key, b, 7) * static_cast<double>(n));
      batch[b] = set.records[std::min(idx, n - 1)];
    }
    auto loss = dsm_loss(net, batch, config.schedule, key, DsmMode{config.fixed_t, config.negate_target});
    if (step == 0) result.initial_loss = loss.loss;
    over = loss.loss > config.divergence_factor * result.initial_loss ? over + 1 : 0;
    if (over >= config.divergence_window) {
      throw TrainingError("DSM training diverged at step " + std::to_string(step) + ": loss " +
                          std::to_string(loss.loss) + " vs initial " + std::to_string(result.initial_loss));
    }
    numerics::adam_step(net.embed, loss.embed_grads, embed_state);
    numerics::adam_step(net.head, loss.head_grads, head_state);
    window += loss.loss;
    if ((step + 1) % config.log_every == 0) {
      const CurvePoint p{step + 1, window / config.log_every};
      result.curve.push_back(p);
      if (on_log) on_log(p);
      window = 0.0;
    }
  }
  return result;
}

std::vector<Vec2> eval_field_batch(const GradientField& field, std::span<const Configuration> configs,
                                   std::optional<double> t) {
  const double time = t.value_or(field.t0);
  std::vector<Vec2> out(configs.size());
  // Evaluate each group-size signature as one batch.
  std::map<std::vector<std::size_t>, std::vector<std::size_t>> by_signature;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    check_configuration(field.net, configs[i]);
    by_signature[signature(configs[i])].push_back(i);
  }
  for (const auto& [sig, idx] : by_signature) {
    std::vector<Configuration> sub;
    sub.reserve(idx.size());
    for (auto i : idx) sub.push_back(configs[i]);
    const std::vector<double> ts(sub.size(), time);
    const auto pass = network_forward(field.net, field.schedule, sub, ts, false);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Vec2 v{pass.scores(static_cast<Eigen::Index>(k), 0), pass.scores(static_cast<Eigen::Index>(k), 1)};
      if (!std::isfinite(v.x) || !std::isfinite(v.y)) throw TrainingError("field produced a non-finite value");
      out[idx[k]] = v;
    }
  }
  return out;
}

Vec2 eval_field_at(const GradientField& field, const Configuration& config, double t) {
  return eval_field_batch(field, std::span<const Configuration>(&config, 1), t)[0];
}

Vec2 eval_field(const GradientField& field, const Configuration& config) {
  return eval_field_at(field, config, field.t0);
}

std::vector<double> analytic_gaussian_score(std::span<const double> mean, double s2,
                                            const NoiseSchedule& schedule, double t,
                                            std::span<const double> x) {
  if (!(s2 > 0)) throw ConfigError("data variance must be positive");
  if (mean.size() != x.size()) throw UsageError("mean and x differ in dimension");
  const double var = s2 + schedule.weight(t);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = -(x[i] - mean[i]) / var;
  return out;
}

std::vector<Vec2> langevin_descend(const std::function<Vec2(Vec2)>& score, Vec2 start, int steps,
                                   double eta, Rng& rng) {
  if (steps < 1) throw ConfigError("langevin needs at least one step");
  if (!(eta > 0)) throw ConfigError("langevin step size must be positive");
  std::vector<Vec2> path{start};
  Vec2 x = start;
  const double noise = std::sqrt(2.0 * eta);
  for (int i = 0; i < steps; ++i) {
    const Vec2 s = score(x);
    x = x + s * eta + Vec2{rng.normal(), rng.normal()} * noise;
    path.push_back(x);
  }
  return path;
}

std::vector<Vec2> langevin_descend(const GradientField& field, const Configuration& start, int steps,
                                   double eta, Rng& rng) {
  Configuration c = start;
  return langevin_descend(
      [&](Vec2 p) {
        c.groups.at(0).at(0) = p;
        return eval_field(field, c);
      },
      start.groups.at(0).at(0), steps, eta, rng);
}

// ----------------------------------------------------------------- checkpoint

namespace {
constexpr std::uint32_t kFieldVersion = 1;
}

void write_field(io::Writer& w, const GradientField& field) {
  w.magic("SGFF");
  w.u32(kFieldVersion);
  w.str(examples::to_json(field.category).dump());
  w.f64(field.schedule.sigma0);
  w.f64(field.schedule.t_max);
  w.f64(field.schedule.t_min);
  w.f64(field.t0);
  w.str(field.metadata.dump());
  numerics::write_params(w, field.net.embed);
  numerics::write_params(w, field.net.head);
}

GradientField read_field(io::Reader& r) {
  r.expect_magic("SGFF");
  const auto version = r.u32();
  if (version != kFieldVersion) {
    throw DataError("unsupported field checkpoint version " + std::to_string(version));
  }
  GradientField f;
  try {
    f.category = examples::category_from_json(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt field category: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("corrupt field category: ") + e.what());
  }
  f.schedule.sigma0 = r.f64();
  f.schedule.t_max = r.f64();
  f.schedule.t_min = r.f64();
  f.t0 = r.f64();
  try {
    f.metadata = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt field metadata: ") + e.what());
  }
  f.net.layout = f.category.layout;
  f.net.embed = numerics::read_params(r);
  f.net.head = numerics::read_params(r);
  if (f.net.embed.input_width() != kFeatureWidth ||
      f.net.head.input_width() != f.net.embed.output_width() * f.net.layout.size() ||
      f.net.head.output_width() != 2) {
    throw DataError("field checkpoint network shapes disagree with its layout");
  }
  return f;
}

void save_field(const GradientField& field, const std::filesystem::path& path) {
  io::Writer w;
  write_field(w, field);
  w.save(path);
}

GradientField load_field(const std::filesystem::path& path) {
  auto r = io::Reader::open(path);
  auto f = read_field(r);
  if (!r.at_end()) throw DataError("trailing bytes in field checkpoint " + path.string());
  return f;
}

}  // namespace socialgf::scorefield
