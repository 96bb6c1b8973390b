#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "socialgf/errors.hpp"
#include "socialgf/scorefield.hpp"

using namespace socialgf;
using namespace socialgf::scorefield;
using namespace socialgf::examples;
using numerics::DenseTensor;

namespace {

const Layout kSelfOnly = {{SlotKind::self, 1}};

ExampleSet synthetic_set(std::vector<std::vector<double>> points) {
  ExampleSet s;
  s.category = {"synthetic", Polarity::attractive, Role::any, kSelfOnly};
  for (auto& p : points) s.records.push_back({std::move(p)});
  return s;
}

Configuration at(double x, double y) { return Configuration{{{{x, y}}}}; }

void set_matrix(numerics::ParamStore& p, const std::string& name, std::size_t rows, std::size_t cols,
                const std::vector<std::pair<std::pair<std::size_t, std::size_t>, double>>& entries) {
  std::vector<double> v(rows * cols, 0.0);
  for (const auto& [rc, value] : entries) v[rc.first * cols + rc.second] = value;
  p.set(name, DenseTensor({rows, cols}, v));
}

void set_vector(numerics::ParamStore& p, const std::string& name, std::vector<double> v) {
  const auto n = v.size();
  p.set(name, DenseTensor({n}, std::move(v)));
}

Configuration context_config(Rng& rng) {
  Configuration c;
  c.groups = {{{rng.normal(), rng.normal()}}, {}, {}};
  for (int i = 0; i < 3; ++i) c.groups[1].push_back({rng.normal(), rng.normal()});
  for (int i = 0; i < 2; ++i) c.groups[2].push_back({rng.normal(), rng.normal()});
  return c;
}

const Layout kContext = {{SlotKind::self, 1}, {SlotKind::grass, 3}, {SlotKind::obstacle, 2}};

}  // namespace

TEST_CASE("noise schedule") {
  NoiseSchedule s;
  CHECK(s.sigma(0.0) == 1.0);
  CHECK(s.sigma(1.0) == doctest::Approx(25.0));
  CHECK(s.weight(0.5) == doctest::Approx(25.0));
  CHECK(s.sigma(0.3) < s.sigma(0.6));
  CHECK_NOTHROW(s.validate());
  CHECK_THROWS_AS((NoiseSchedule{1.0, 1.0, 0.01}.validate()), ConfigError);
  CHECK_THROWS_AS((NoiseSchedule{25.0, 0.5, 0.6}.validate()), ConfigError);
}

TEST_CASE("perturbation arithmetic and statistics") {
  const ExampleRecord x{{0.5, -1.0}};
  const std::vector<double> zero = {0.0, 0.0};
  const auto p0 = perturb_with(x, 2.0, zero);
  CHECK(p0.noisy == x);
  CHECK(p0.target == zero);

  const auto scalar = perturb_with(ExampleRecord{{0.0}}, 1.0, std::vector<double>{1.0});
  CHECK(scalar.noisy.coords[0] == 1.0);
  CHECK(scalar.target[0] == -1.0);

  NoiseSchedule sched;
  Rng rng(11);
  const double t = 0.4;
  double sum = 0.0, sum2 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto p = perturb(ExampleRecord{{0.25}}, t, sched, rng);
    const double d = p.noisy.coords[0] - 0.25;
    sum += d;
    sum2 += d * d;
  }
  const double var = sum2 / n - (sum / n) * (sum / n);
  CHECK(std::abs(var / sched.weight(t) - 1.0) < 0.03);
  CHECK_THROWS_AS(perturb(x, 2.0, sched, rng), UsageError);
}

TEST_CASE("a network whose output equals the target has zero loss") {
  // Self-only layout at a fixed time: build weights so that
  // s(x~) = (x0 - x~) / sigma^2 exactly, using relu units kept positive by an offset.
  NoiseSchedule sched;
  const double t = 0.2;
  const double sigma = sched.sigma(t);
  const double c = 1.0 / std::sqrt(1.0 + sigma * sigma);
  const double M = 50.0;
  const std::vector<double> x0 = {0.4, -0.7};
  Rng rng(1);
  auto net = ScoreNetwork::create(kSelfOnly, 4, rng);
  const auto F = kFeatureWidth;
  set_matrix(net.embed, "layers.0.weight", 4, F, {{{0, 0}, 1.0}, {{1, 1}, 1.0}});
  set_vector(net.embed, "layers.0.bias", {M, M, 0, 0});
  set_matrix(net.embed, "layers.1.weight", 4, 4, {{{0, 0}, 1.0}, {{1, 1}, 1.0}});
  set_vector(net.embed, "layers.1.bias", {0, 0, 0, 0});
  set_matrix(net.head, "layers.0.weight", 4, 4, {{{0, 0}, 1.0}, {{1, 1}, 1.0}});
  set_vector(net.head, "layers.0.bias", {0, 0, 0, 0});
  set_matrix(net.head, "layers.1.weight", 4, 4, {{{0, 0}, 1.0}, {{1, 1}, 1.0}});
  set_vector(net.head, "layers.1.bias", {0, 0, 0, 0});
  const double k = 1.0 / (c * sigma);
  set_matrix(net.head, "layers.2.weight", 2, 4, {{{0, 0}, -k}, {{1, 1}, -k}});
  set_vector(net.head, "layers.2.bias", {x0[0] / sigma + M * k, x0[1] / sigma + M * k});

  std::vector<ExampleRecord> batch(64, ExampleRecord{x0});
  const auto r = dsm_loss(net, batch, sched, 99, DsmMode{t});
  CHECK(r.loss < 1e-20);
}

TEST_CASE("zero-output network: expected loss from the closed form") {
  Rng rng(2);
  auto net = ScoreNetwork::create(kContext, 8, rng);
  set_matrix(net.head, "layers.2.weight", 2, 8, {});
  set_vector(net.head, "layers.2.bias", {0.0, 0.0});
  NoiseSchedule sched;
  std::vector<ExampleRecord> batch;
  for (int i = 0; i < 20000; ++i) batch.push_back(to_record(context_config(rng)));
  // Unweighted fixed-sigma loss: E|z / sigma|^2 = 2 / sigma^2 for a 2D output.
  const double t = 0.3;
  const auto fixed = dsm_loss(net, batch, sched, 5, DsmMode{t});
  CHECK(std::abs(fixed.loss * sched.weight(t) / 2.0 - 1.0) < 0.03);
  // lambda-weighted loss: lambda * 2 / sigma^2 = 2, independent of t.
  const auto weighted = dsm_loss(net, batch, sched, 6);
  CHECK(std::abs(weighted.loss / 2.0 - 1.0) < 0.03);
}

TEST_CASE("DSM gradients match central differences") {
  Rng rng(3);
  auto net = ScoreNetwork::create(kContext, 8, rng);
  NoiseSchedule sched;
  std::vector<ExampleRecord> batch;
  for (int i = 0; i < 6; ++i) batch.push_back(to_record(context_config(rng)));
  const auto base = dsm_loss(net, batch, sched, 17);
  double worst = 0.0;
  for (int which = 0; which < 2; ++which) {
    auto& store = which == 0 ? net.embed : net.head;
    const auto& grads = which == 0 ? base.embed_grads : base.head_grads;
    for (std::size_t pi = 0; pi < store.params().size(); ++pi) {
      const auto name = store.params()[pi].name;
      const auto original = store.params()[pi].value;
      for (int probe = 0; probe < 6; ++probe) {
        const std::size_t k = rng.index(original.size());
        const double h = 1e-5;
        auto eval = [&](double delta) {
          std::vector<double> v(original.values().begin(), original.values().end());
          v[k] += delta;
          store.set(name, DenseTensor(original.shape(), v));
          return dsm_loss(net, batch, sched, 17).loss;
        };
        const double fd = (eval(h) - eval(-h)) / (2 * h);
        store.set(name, original);
        const double an = grads.values[pi][k];
        worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3}));
      }
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("field output is invariant to same-kind shuffles and translations") {
  Rng rng(4);
  GradientField f;
  f.net = ScoreNetwork::create(kContext, 16, rng);
  f.category = {"ctx", Polarity::attractive, Role::any, kContext};
  for (int trial = 0; trial < 20; ++trial) {
    auto c = context_config(rng);
    const auto v = eval_field(f, c);
    auto shuffled = c;
    std::reverse(shuffled.groups[1].begin(), shuffled.groups[1].end());
    std::swap(shuffled.groups[2][0], shuffled.groups[2][1]);
    const auto w = eval_field(f, shuffled);
    CHECK(std::abs(v.x - w.x) < 1e-9);
    CHECK(std::abs(v.y - w.y) < 1e-9);
    auto moved = c;
    const Vec2 shift{rng.normal(), rng.normal()};
    for (auto& g : moved.groups) {
      for (auto& p : g) p += shift;
    }
    const auto m = eval_field(f, moved);
    CHECK(std::abs(v.x - m.x) < 1e-12);
    CHECK(std::abs(v.y - m.y) < 1e-12);
  }
}

TEST_CASE("eval_field validates the layout and accepts varying group sizes") {
  Rng rng(5);
  GradientField f;
  f.net = ScoreNetwork::create(kContext, 8, rng);
  f.category = {"ctx", Polarity::attractive, Role::any, kContext};
  auto c = context_config(rng);
  c.groups[1].push_back({0.1, 0.2});
  c.groups[2].clear();
  const auto v = eval_field(f, c);
  CHECK(std::isfinite(v.x));
  CHECK_THROWS_AS(eval_field(f, at(0, 0)), UsageError);
  // Batched evaluation agrees with one-at-a-time evaluation across signatures
  // (up to kernel-dependent rounding).
  std::vector<Configuration> mixed = {c, context_config(rng), c};
  const auto batched = eval_field_batch(f, mixed);
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    CHECK((batched[i] - eval_field(f, mixed[i])).norm() < 1e-12);
  }
}

TEST_CASE("training: determinism, errors and divergence guard") {
  const auto set = synthetic_set({{0.2, 0.1}, {-0.3, 0.4}});
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.batch = 16;
  cfg.log_every = 5;
  const auto a = train_gf(set, cfg, 7);
  const auto b = train_gf(set, cfg, 7);
  CHECK(a.field.net.embed.same_values(b.field.net.embed));
  CHECK(a.field.net.head.same_values(b.field.net.head));
  CHECK(a.curve.size() == 4);
  CHECK(a.field.t0 == 0.01);
  CHECK_THROWS_AS(train_gf(synthetic_set({}), cfg, 7), ConfigError);
  auto bad_t0 = cfg;
  bad_t0.t0 = 2.0;
  CHECK_THROWS_AS(train_gf(set, bad_t0, 7), ConfigError);
  auto touchy = cfg;
  touchy.divergence_factor = 1e-9;
  touchy.divergence_window = 3;
  CHECK_THROWS_WITH_AS(train_gf(set, touchy, 7), doctest::Contains("diverged"), TrainingError);
}

TEST_CASE("symmetric two-example field has no horizontal component at the origin") {
  const auto set = synthetic_set({{-0.5, 0.0}, {0.5, 0.0}});
  TrainConfig cfg;
  cfg.steps = 1500;
  cfg.batch = 128;
  const auto r = train_gf(set, cfg, 8);
  const auto v = eval_field(r.field, at(0.0, 0.0));
  const auto side = eval_field(r.field, at(1.5, 0.0));
  CHECK(std::abs(v.x) < 0.1 * std::abs(side.x));
}

TEST_CASE("states near the data have small scores") {
  Rng rng(9);
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 2000; ++i) pts.push_back({0.3 * rng.normal(), 0.3 * rng.normal()});
  const auto set = synthetic_set(pts);
  TrainConfig cfg;
  cfg.steps = 1500;
  cfg.batch = 128;
  const auto r = train_gf(set, cfg, 9);
  std::vector<double> probe, data;
  for (int i = 0; i < 400; ++i) {
    probe.push_back(eval_field(r.field, at(rng.uniform(-3, 3), rng.uniform(-3, 3))).norm());
    const auto& p = set.records[static_cast<std::size_t>(i)].coords;
    data.push_back(eval_field(r.field, at(p[0], p[1])).norm());
  }
  std::sort(probe.begin(), probe.end());
  std::sort(data.begin(), data.end());
  CHECK(data[data.size() / 2] < probe[probe.size() * 9 / 10]);
}

TEST_CASE("analytic Gaussian score") {
  NoiseSchedule sched;
  const std::vector<double> mean = {0.5, -0.5};
  CHECK(analytic_gaussian_score(mean, 1.0, sched, 0.3, mean) == std::vector<double>{0.0, 0.0});
  const std::vector<double> origin = {0.0, 0.0}, x = {2.0, 0.0};
  const auto s = analytic_gaussian_score(origin, 1.0, sched, 0.0, x);
  CHECK(s[0] == doctest::Approx(-1.0));
  CHECK(s[1] == 0.0);
  // Density oracle: finite differences of log N(mean, (s2 + sigma^2) I).
  const double s2 = 0.7, t = 0.2;
  const double var = s2 + sched.weight(t);
  auto log_density = [&](const DenseTensor& p) {
    double q = 0.0;
    for (std::size_t i = 0; i < 2; ++i) q += (p[i] - mean[i]) * (p[i] - mean[i]);
    return -q / (2 * var) - std::log(2 * std::numbers::pi * var);
  };
  const std::vector<double> probe = {1.3, 0.2};
  const auto fd = numerics::finite_diff_gradient(log_density, DenseTensor::vector(probe), 1e-5);
  const auto an = analytic_gaussian_score(mean, s2, sched, t, probe);
  for (std::size_t i = 0; i < 2; ++i) CHECK(fd[i] == doctest::Approx(an[i]).epsilon(1e-7));
  CHECK_THROWS_AS(analytic_gaussian_score(mean, 0.0, sched, t, probe), ConfigError);
}

TEST_CASE("Langevin diagnostics") {
  Rng rng(12);
  const double eta = 0.01;
  // Zero field: a pure random walk.
  Vec2 mean_end{};
  for (int chain = 0; chain < 400; ++chain) {
    const auto path = langevin_descend([](Vec2) { return Vec2{}; }, {1.0, 1.0}, 50, eta, rng);
    mean_end += (path.back() - Vec2{1.0, 1.0}) * (1.0 / 400);
  }
  // Per-coordinate std of the mean displacement is sqrt(2 eta 50 / 400) = 0.05.
  CHECK(std::abs(mean_end.x) < 0.2);
  CHECK(std::abs(mean_end.y) < 0.2);

  // Gaussian field: mean distance to the mean shrinks over the first 100 steps.
  NoiseSchedule sched;
  const std::vector<double> mu = {0.2, -0.1};
  auto gauss = [&](Vec2 p) {
    const std::vector<double> x = {p.x, p.y};
    const auto s = analytic_gaussian_score(mu, 0.1, sched, 0.01, x);
    return Vec2{s[0], s[1]};
  };
  double d0 = 0.0, d100 = 0.0;
  for (int chain = 0; chain < 200; ++chain) {
    const auto path = langevin_descend(gauss, {3.0, 3.0}, 100, 0.05, rng);
    d0 += (path.front() - Vec2{mu[0], mu[1]}).norm();
    d100 += (path.back() - Vec2{mu[0], mu[1]}).norm();
  }
  CHECK(d100 < d0);

  // Point-mass field at fixed sigma: iterates settle near x0.
  const Vec2 x0{-0.4, 0.6};
  const double sigma = 0.2;
  auto point = [&](Vec2 p) { return (x0 - p) * (1.0 / (sigma * sigma)); };
  Vec2 centroid{};
  for (int chain = 0; chain < 200; ++chain) {
    const auto path = langevin_descend(point, {1.0, -1.0}, 300, 0.002, rng);
    centroid += path.back() * (1.0 / 200);
  }
  CHECK((centroid - x0).norm() < 0.05);
}

TEST_CASE("field checkpoints round-trip and reject other versions") {
  const auto set = synthetic_set({{0.2, 0.1}});
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.batch = 8;
  cfg.log_every = 5;
  const auto r = train_gf(set, cfg, 2);
  const auto dir = std::filesystem::temp_directory_path() / "socialgf_test_scorefield";
  std::filesystem::create_directories(dir);
  save_field(r.field, dir / "f.sgff");
  const auto back = load_field(dir / "f.sgff");
  CHECK(back.category == r.field.category);
  CHECK(back.schedule == r.field.schedule);
  CHECK(back.net.embed.same_values(r.field.net.embed));
  CHECK(eval_field(back, at(0.3, 0.3)) == eval_field(r.field, at(0.3, 0.3)));
  io::Writer w;
  write_field(w, r.field);
  auto bytes = w.bytes();
  bytes[4] = 7;
  io::Reader reader(bytes);
  CHECK_THROWS_AS(read_field(reader), DataError);
}

TEST_CASE("smoothed loss halves on every scenario category") {
  CollectionConfig cc;
  cc.n_target = 300;
  for (const auto& sc : {world::ScenarioConfig::grassland(2, 2), world::ScenarioConfig::vanilla_nav(2)}) {
    const auto sets = collect_examples(sc, ScriptedGreedyPolicy(), cc, 21);
    for (const auto& [name, set] : sets) {
      TrainConfig cfg;
      cfg.steps = 400;
      cfg.batch = 64;
      const auto r = train_gf(set, cfg, 3);
      INFO(name);
      CHECK(r.curve.back().loss <= 0.5 * r.initial_loss);
    }
  }
}
