#pragma once

// Small reverse-mode kernel for stacks of affine + pointwise layers.
//
// Everything is 64-bit. A forward pass records a Tape holding the input and the
// post-activation output of each layer; backprop walks it in reverse. Tapes are
// bound to the (store id, generation) pair of the ParamStore that produced them,
// so reusing a tape after the parameters changed is reported instead of silently
// producing wrong gradients.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "socialgf/binary_io.hpp"
#include "socialgf/rng.hpp"

namespace socialgf::numerics {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

class DenseTensor {
 public:
  DenseTensor() = default;
  // Throws ConfigError when the shape product differs from the value count or a
  // value is NaN/Inf.
  DenseTensor(std::vector<std::size_t> shape, std::vector<double> values);

  static DenseTensor zeros(std::vector<std::size_t> shape);
  static DenseTensor vector(std::vector<double> values);
  static DenseTensor from_matrix(const Matrix& m);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::span<const double> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }

  // Rank-1 tensors are viewed as a single row.
  std::size_t rows() const;
  std::size_t cols() const;
  ConstMatrixMap as_matrix() const;

  bool operator==(const DenseTensor&) const = default;

 private:
  friend class ParamStore;
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

enum class Activation { relu, tanh, identity };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view s);

struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::identity;
  bool operator==(const LayerSpec&) const = default;
};

struct NamedTensor {
  std::string name;
  DenseTensor value;
  bool operator==(const NamedTensor&) const = default;
};

class ParamStore {
 public:
  ParamStore();
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  // widths = {in, h1, ..., out}; hidden layers use `hidden`, the last layer `output`.
  // Parameters start at zero; see orthogonal_init.
  static ParamStore mlp(const std::vector<std::size_t>& widths, Activation hidden,
                        Activation output);
  static ParamStore from_layers(std::vector<LayerSpec> layers);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  std::size_t input_width() const;
  std::size_t output_width() const;

  const DenseTensor& get(std::string_view name) const;
  void set(std::string_view name, DenseTensor value);
  // Non-layer parameter, e.g. a global log standard deviation.
  void add_extra(std::string name, DenseTensor value);

  std::uint64_t id() const { return id_; }
  std::uint64_t generation() const { return generation_; }

  // Raw mutable storage for optimizers. Bumps the generation.
  std::vector<double*> mutable_data();

  // Parameter equality (ids and generations are ignored).
  bool same_values(const ParamStore& other) const;

 private:
  std::size_t index_of(std::string_view name) const;

  std::vector<LayerSpec> layers_;
  std::vector<NamedTensor> params_;
  std::uint64_t id_;
  std::uint64_t generation_ = 0;
};

// Orthogonal initialization per layer. Hidden layers use gain sqrt(2) for relu
// and 5/3 for tanh (1 for identity); the last layer uses output_gain. Biases are
// zeroed. Extras are left untouched.
void orthogonal_init(ParamStore& params, Rng& rng, double output_gain);

struct Tape {
  std::uint64_t store_id = 0;
  std::uint64_t generation = 0;
  // activations[0] is the input; activations[i + 1] is layer i's output.
  std::vector<Matrix> activations;
};

struct ForwardResult {
  DenseTensor output;
  Tape tape;
};

// Gradient buffers aligned with ParamStore::params(). Unlike DenseTensor they may
// hold non-finite values so that the optimizer can name the offending parameter.
struct GradientSet {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;

  static GradientSet zeros_like(const ParamStore& params);
  void add(const GradientSet& other);
  void scale(double factor);
  double norm() const;
  // Scales in place when the global norm exceeds max_norm; returns the pre-clip norm.
  double clip_norm(double max_norm);
  std::vector<double>& operator[](std::string_view name);
  const std::vector<double>& operator[](std::string_view name) const;
};

struct BackpropResult {
  GradientSet params;
  DenseTensor input;
};

// input is [batch, in] (or a single row). Throws ConfigError on width mismatch.
ForwardResult mlp_forward(const ParamStore& params, const DenseTensor& input);
// upstream is dLoss/dOutput, [batch, out]. Parameter gradients are summed over the batch.
BackpropResult backprop(const ParamStore& params, const Tape& tape, const DenseTensor& upstream);

// Matrix-level variants used on hot paths. `tape` may be null for inference.
Matrix forward(const ParamStore& params, const Matrix& input, Tape* tape);
// Accumulates parameter gradients into grads and returns dLoss/dInput.
Matrix backward(const ParamStore& params, const Tape& tape, const Matrix& upstream,
                GradientSet& grads);

// Mean over set positions [begin, end) of a [batch * set_size, width] row block.
Matrix set_mean_pool(const Matrix& rows, std::size_t set_size, std::size_t begin,
                     std::size_t end);
// Adjoint of set_mean_pool: spreads [batch, width] back onto [batch * set_size, width].
Matrix set_mean_pool_backward(const Matrix& upstream, std::size_t set_size, std::size_t begin,
                              std::size_t end);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool operator==(const AdamConfig&) const = default;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;

  static AdamState for_params(const ParamStore& params, AdamConfig config);
  bool operator==(const AdamState&) const = default;
};

// Bias-corrected Adam. Throws TrainingError naming the parameter if any gradient
// component is non-finite, before touching the parameters.
void adam_step(ParamStore& params, const GradientSet& grads, AdamState& state);

// Central differences per coordinate.
DenseTensor finite_diff_gradient(const std::function<double(const DenseTensor&)>& f,
                                 const DenseTensor& point, double h);

// Checkpoint container ("SGFP", version 1): layer specs, extras and parameter
// arrays as little-endian IEEE-754 doubles. Round-trips bit-exactly.
void write_params(io::Writer& w, const ParamStore& params);
ParamStore read_params(io::Reader& r);
void save_params(const std::filesystem::path& path, const ParamStore& params);
ParamStore load_params(const std::filesystem::path& path);

void write_adam(io::Writer& w, const AdamState& s);
AdamState read_adam(io::Reader& r);

}  // namespace socialgf::numerics
