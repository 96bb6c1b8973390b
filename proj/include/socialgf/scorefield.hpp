#pragma once

// Time-conditioned score networks over agent-centric configurations, trained by
// denoising score matching and evaluated as per-agent gradient fields.
//
// Network: a shared per-entity embedder, one mean pool per non-self layout group,
// and a head over [self embedding, pools...] producing h; the score is h / sigma(t).
// When the layout has context groups, positions enter relative to the
// beneficiary (whose own position feature is zero), so outputs are exactly
// translation invariant. Self-only layouts see the beneficiary's position.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "socialgf/examples.hpp"
#include "socialgf/numerics.hpp"

namespace socialgf::scorefield {

using world::Vec2;

struct NoiseSchedule {
  double sigma0 = 25.0;
  double t_max = 1.0;
  double t_min = 0.01;

  double sigma(double t) const;
  // lambda(t) = sigma(t)^2
  double weight(double t) const;
  void validate() const;
  bool operator==(const NoiseSchedule&) const = default;
};

// Per-entity feature row: [x, y, slot-kind one-hot, t, sigma / sigma0, 1 / sigma].
inline constexpr std::size_t kFeatureWidth = 2 + examples::kSlotKindCount + 3;

struct ScoreNetwork {
  examples::Layout layout;
  numerics::ParamStore embed;
  numerics::ParamStore head;

  static ScoreNetwork create(const examples::Layout& layout, std::size_t hidden, Rng& rng);
  bool has_context() const { return layout.size() > 1; }
  std::size_t hidden() const { return embed.output_width(); }
};

// Scores for a batch of configurations sharing one group-size signature.
// sigmas/ts are per configuration. Throws UsageError on layout mismatch.
struct NetworkPass {
  numerics::Matrix scores;  // [batch, 2]
  numerics::Tape embed_tape;
  numerics::Tape head_tape;
  std::vector<std::size_t> group_sizes;
  std::vector<double> sigmas;
};

NetworkPass network_forward(const ScoreNetwork& net, const NoiseSchedule& schedule,
                            std::span<const examples::Configuration> batch,
                            std::span<const double> ts, bool record_tape);
// Accumulates parameter gradients for dLoss/dScores.
void network_backward(const ScoreNetwork& net, const NetworkPass& pass,
                      const numerics::Matrix& d_scores, numerics::GradientSet& embed_grads,
                      numerics::GradientSet& head_grads);

struct Perturbation {
  examples::ExampleRecord noisy;
  // (x - noisy) / sigma^2, per coordinate.
  std::vector<double> target;
};

// Gaussian perturbation of every coordinate at time t.
Perturbation perturb(const examples::ExampleRecord& record, double t, const NoiseSchedule& schedule,
                     Rng& rng);
// Same with explicit standard-normal draws z (one per coordinate).
Perturbation perturb_with(const examples::ExampleRecord& record, double sigma,
                          std::span<const double> z);

// weighted: lambda(t) * |s - target|^2 with t ~ U(t_min, t_max).
// fixed_sigma: |s - target|^2 at a fixed time for every sample.
struct DsmMode {
  std::optional<double> fixed_t;
  // Mutation hook for the self-check: regress onto the negated target.
  bool negate_target = false;
};

struct LossResult {
  double loss = 0.0;
  numerics::GradientSet embed_grads;
  numerics::GradientSet head_grads;
};

// Mean loss over the batch. Noise enters the beneficiary slot; context slots
// stay clean, matching how fields are queried. Draws are keyed by
// (key, sample index). Throws TrainingError with batch diagnostics when the
// loss is non-finite.
LossResult dsm_loss(const ScoreNetwork& net, std::span<const examples::ExampleRecord> batch,
                    const NoiseSchedule& schedule, std::uint64_t key, DsmMode mode = {});

struct GradientField {
  ScoreNetwork net;
  NoiseSchedule schedule;
  double t0 = 0.01;
  examples::ExampleCategory category;
  // Free-form stamps (config hash, tool version) added by the pipeline.
  nlohmann::json metadata = nlohmann::json::object();
};

struct TrainConfig {
  int steps = 20000;
  int batch = 256;
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::size_t hidden = 64;
  double t0 = 0.01;
  NoiseSchedule schedule;
  std::optional<double> fixed_t;
  bool negate_target = false;  // see DsmMode
  int log_every = 100;
  double divergence_factor = 1e3;
  int divergence_window = 1000;
};

struct CurvePoint {
  int step = 0;
  double loss = 0.0;  // mean over the logging window
};

struct TrainResult {
  GradientField field;
  std::vector<CurvePoint> curve;
  double initial_loss = 0.0;
};

TrainResult train_gf(const examples::ExampleSet& set, const TrainConfig& config, std::uint64_t seed,
                     const std::function<void(const CurvePoint&)>& on_log = {});

// Field value at t0 (or an explicit t). Always finite.
Vec2 eval_field(const GradientField& field, const examples::Configuration& config);
Vec2 eval_field_at(const GradientField& field, const examples::Configuration& config, double t);
std::vector<Vec2> eval_field_batch(const GradientField& field,
                                   std::span<const examples::Configuration> configs,
                                   std::optional<double> t = std::nullopt);

// -(x - mean) / (s2 + sigma(t)^2) per coordinate.
std::vector<double> analytic_gaussian_score(std::span<const double> mean, double s2,
                                            const NoiseSchedule& schedule, double t,
                                            std::span<const double> x);

// x <- x + eta * score(x) + sqrt(2 eta) z. Returns every iterate, start included.
std::vector<Vec2> langevin_descend(const std::function<Vec2(Vec2)>& score, Vec2 start, int steps,
                                   double eta, Rng& rng);
// Moves the beneficiary of `start` under the field; other entities stay put.
std::vector<Vec2> langevin_descend(const GradientField& field, const examples::Configuration& start,
                                   int steps, double eta, Rng& rng);

// Field checkpoint ("SGFF", version 1).
void save_field(const GradientField& field, const std::filesystem::path& path);
GradientField load_field(const std::filesystem::path& path);
void write_field(io::Writer& w, const GradientField& field);
GradientField read_field(io::Reader& r);

}  // namespace socialgf::scorefield
