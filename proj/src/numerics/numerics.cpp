#include "socialgf/numerics.hpp"

#include <atomic>
#include <cmath>
#include <numeric>

#include "socialgf/errors.hpp"

namespace socialgf::numerics {

namespace {

std::atomic<std::uint64_t> next_store_id{1};

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void apply_activation(Matrix& m, Activation a) {
  switch (a) {
    case Activation::relu:
      m = m.cwiseMax(0.0);
      break;
    case Activation::tanh:
      m = m.array().tanh().matrix();
      break;
    case Activation::identity:
      break;
  }
}

// Multiplies upstream in place by the activation derivative, expressed through
// the post-activation output y.
void activation_backward(Matrix& upstream, const Matrix& y, Activation a) {
  switch (a) {
    case Activation::relu:
      upstream = (y.array() > 0.0).select(upstream, 0.0);
      break;
    case Activation::tanh:
      upstream.array() *= (1.0 - y.array().square());
      break;
    case Activation::identity:
      break;
  }
}

std::string weight_name(std::size_t i) { return "layers." + std::to_string(i) + ".weight"; }
std::string bias_name(std::size_t i) { return "layers." + std::to_string(i) + ".bias"; }

double hidden_gain(Activation a) {
  switch (a) {
    case Activation::relu:
      return std::sqrt(2.0);
    case Activation::tanh:
      return 5.0 / 3.0;
    case Activation::identity:
      return 1.0;
  }
  return 1.0;
}

}  // namespace

// ---------------------------------------------------------------- DenseTensor

DenseTensor::DenseTensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (product(shape_) != values_.size()) {
    throw ConfigError("tensor shape product " + std::to_string(product(shape_)) +
                      " != value count " + std::to_string(values_.size()));
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      throw ConfigError("non-finite tensor value at index " + std::to_string(i));
    }
  }
}

DenseTensor DenseTensor::zeros(std::vector<std::size_t> shape) {
  const auto n = product(shape);
  return DenseTensor(std::move(shape), std::vector<double>(n, 0.0));
}

DenseTensor DenseTensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return DenseTensor({n}, std::move(values));
}

DenseTensor DenseTensor::from_matrix(const Matrix& m) {
  return DenseTensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                     std::vector<double>(m.data(), m.data() + m.size()));
}

std::size_t DenseTensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() == 2) return shape_[0];
  throw UsageError("rows() requires a rank-1 or rank-2 tensor");
}

std::size_t DenseTensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() == 2) return shape_[1];
  throw UsageError("cols() requires a rank-1 or rank-2 tensor");
}

ConstMatrixMap DenseTensor::as_matrix() const {
  return ConstMatrixMap(values_.data(), static_cast<Eigen::Index>(rows()),
                        static_cast<Eigen::Index>(cols()));
}

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
    case Activation::identity:
      return "identity";
  }
  return "identity";
}

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation tag: " + std::string(s));
}

// ----------------------------------------------------------------- ParamStore

ParamStore::ParamStore() : id_(next_store_id++) {}

ParamStore::ParamStore(const ParamStore& other)
    : layers_(other.layers_), params_(other.params_), id_(next_store_id++),
      generation_(other.generation_) {}

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this != &other) {
    layers_ = other.layers_;
    params_ = other.params_;
    id_ = next_store_id++;
    generation_ = other.generation_;
  }
  return *this;
}

ParamStore ParamStore::mlp(const std::vector<std::size_t>& widths, Activation hidden,
                           Activation output) {
  if (widths.size() < 2) throw ConfigError("an MLP needs at least input and output widths");
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    layers.push_back({widths[i], widths[i + 1], last ? output : hidden});
  }
  return from_layers(std::move(layers));
}

ParamStore ParamStore::from_layers(std::vector<LayerSpec> layers) {
  ParamStore p;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.in == 0 || l.out == 0) throw ConfigError("layer widths must be positive");
    if (i > 0 && layers[i - 1].out != l.in) {
      throw ConfigError("layer " + std::to_string(i) + " input width " + std::to_string(l.in) +
                        " does not match previous output " + std::to_string(layers[i - 1].out));
    }
    p.params_.push_back({weight_name(i), DenseTensor::zeros({l.out, l.in})});
    p.params_.push_back({bias_name(i), DenseTensor::zeros({l.out})});
  }
  p.layers_ = std::move(layers);
  return p;
}

std::size_t ParamStore::input_width() const {
  return layers_.empty() ? 0 : layers_.front().in;
}

std::size_t ParamStore::output_width() const {
  return layers_.empty() ? 0 : layers_.back().out;
}

std::size_t ParamStore::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw UsageError("unknown parameter: " + std::string(name));
}

const DenseTensor& ParamStore::get(std::string_view name) const {
  return params_[index_of(name)].value;
}

void ParamStore::set(std::string_view name, DenseTensor value) {
  auto& slot = params_[index_of(name)];
  if (slot.value.shape() != value.shape()) {
    throw ConfigError("shape mismatch when setting " + std::string(name));
  }
  slot.value = std::move(value);
  ++generation_;
}

void ParamStore::add_extra(std::string name, DenseTensor value) {
  for (const auto& p : params_) {
    if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
  }
  params_.push_back({std::move(name), std::move(value)});
  ++generation_;
}

std::vector<double*> ParamStore::mutable_data() {
  ++generation_;
  std::vector<double*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.value.values_.data());
  return out;
}

bool ParamStore::same_values(const ParamStore& other) const {
  return layers_ == other.layers_ && params_ == other.params_;
}

void orthogonal_init(ParamStore& params, Rng& rng, double output_gain) {
  const auto& layers = params.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const double gain = i + 1 == layers.size() ? output_gain : hidden_gain(l.activation);
    const auto big = static_cast<Eigen::Index>(std::max(l.in, l.out));
    Matrix g(big, big);
    for (Eigen::Index r = 0; r < big; ++r) {
      for (Eigen::Index c = 0; c < big; ++c) g(r, c) = rng.normal();
    }
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    // Sign fix so the distribution is uniform over orthogonal matrices.
    const Matrix rmat = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index c = 0; c < big; ++c) {
      if (rmat(c, c) < 0) q.col(c) *= -1.0;
    }
    Matrix w = gain * q.topLeftCorner(static_cast<Eigen::Index>(l.out),
                                      static_cast<Eigen::Index>(l.in));
    params.set(weight_name(i), DenseTensor::from_matrix(w));
    params.set(bias_name(i), DenseTensor::zeros({l.out}));
  }
}

// -------------------------------------------------------------- GradientSet

GradientSet GradientSet::zeros_like(const ParamStore& params) {
  GradientSet g;
  for (const auto& p : params.params()) {
    g.names.push_back(p.name);
    g.values.emplace_back(p.value.size(), 0.0);
  }
  return g;
}

void GradientSet::add(const GradientSet& other) {
  if (other.values.size() != values.size()) throw UsageError("gradient set size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (other.values[i].size() != values[i].size()) {
      throw UsageError("gradient shape mismatch for " + names[i]);
    }
    for (std::size_t j = 0; j < values[i].size(); ++j) values[i][j] += other.values[i][j];
  }
}

void GradientSet::scale(double factor) {
  for (auto& v : values) {
    for (auto& x : v) x *= factor;
  }
}

double GradientSet::norm() const {
  double s = 0.0;
  for (const auto& v : values) {
    for (double x : v) s += x * x;
  }
  return std::sqrt(s);
}

double GradientSet::clip_norm(double max_norm) {
  const double n = norm();
  if (n > max_norm && n > 0.0) scale(max_norm / n);
  return n;
}

std::vector<double>& GradientSet::operator[](std::string_view name) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return values[i];
  }
  throw UsageError("unknown gradient: " + std::string(name));
}

const std::vector<double>& GradientSet::operator[](std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return values[i];
  }
  throw UsageError("unknown gradient: " + std::string(name));
}

// ---------------------------------------------------------- forward/backward

Matrix forward(const ParamStore& params, const Matrix& input, Tape* tape) {
  const auto& layers = params.layers();
  if (layers.empty()) throw ConfigError("empty network");
  if (static_cast<std::size_t>(input.cols()) != layers.front().in) {
    throw ConfigError("input width " + std::to_string(input.cols()) + " != network input " +
                      std::to_string(layers.front().in));
  }
  if (tape) {
    tape->store_id = params.id();
    tape->generation = params.generation();
    tape->activations.clear();
    tape->activations.reserve(layers.size() + 1);
    tape->activations.push_back(input);
  }
  Matrix x = input;
  const auto& ps = params.params();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto w = ps[2 * i].value.as_matrix();
    const auto b = ps[2 * i + 1].value.as_matrix();
    Matrix y = x * w.transpose();
    y.rowwise() += b.row(0);
    apply_activation(y, layers[i].activation);
    if (tape) tape->activations.push_back(y);
    x = std::move(y);
  }
  return x;
}

Matrix backward(const ParamStore& params, const Tape& tape, const Matrix& upstream,
                GradientSet& grads) {
  const auto& layers = params.layers();
  if (tape.store_id != params.id() || tape.generation != params.generation()) {
    throw UsageError("stale or mismatched tape: parameters changed since the forward pass");
  }
  if (tape.activations.size() != layers.size() + 1) throw UsageError("tape layer count mismatch");
  const auto& out = tape.activations.back();
  if (upstream.rows() != out.rows() || upstream.cols() != out.cols()) {
    throw UsageError("upstream shape does not match the network output");
  }
  if (grads.values.size() != params.params().size()) {
    throw UsageError("gradient set does not match parameter store");
  }
  const auto& ps = params.params();
  Matrix g = upstream;
  for (std::size_t k = layers.size(); k-- > 0;) {
    activation_backward(g, tape.activations[k + 1], layers[k].activation);
    const Matrix& x = tape.activations[k];
    MatrixMap gw(grads.values[2 * k].data(), static_cast<Eigen::Index>(layers[k].out),
                 static_cast<Eigen::Index>(layers[k].in));
    gw.noalias() += g.transpose() * x;
    MatrixMap gb(grads.values[2 * k + 1].data(), 1, static_cast<Eigen::Index>(layers[k].out));
    gb += g.colwise().sum();
    const auto w = ps[2 * k].value.as_matrix();
    g = g * w;
  }
  return g;
}

ForwardResult mlp_forward(const ParamStore& params, const DenseTensor& input) {
  ForwardResult r;
  Matrix out = forward(params, Matrix(input.as_matrix()), &r.tape);
  r.output = DenseTensor::from_matrix(out);
  return r;
}

BackpropResult backprop(const ParamStore& params, const Tape& tape, const DenseTensor& upstream) {
  BackpropResult r;
  r.params = GradientSet::zeros_like(params);
  Matrix gin = backward(params, tape, Matrix(upstream.as_matrix()), r.params);
  r.input = DenseTensor::from_matrix(gin);
  return r;
}

Matrix set_mean_pool(const Matrix& rows, std::size_t set_size, std::size_t begin,
                     std::size_t end) {
  if (set_size == 0 || rows.rows() % static_cast<Eigen::Index>(set_size) != 0 || begin > end ||
      end > set_size) {
    throw UsageError("invalid set pooling layout");
  }
  const auto batch = rows.rows() / static_cast<Eigen::Index>(set_size);
  Matrix out = Matrix::Zero(batch, rows.cols());
  if (begin == end) return out;
  const double inv = 1.0 / static_cast<double>(end - begin);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (std::size_t s = begin; s < end; ++s) {
      out.row(b) += rows.row(b * static_cast<Eigen::Index>(set_size) + static_cast<Eigen::Index>(s));
    }
    out.row(b) *= inv;
  }
  return out;
}

Matrix set_mean_pool_backward(const Matrix& upstream, std::size_t set_size, std::size_t begin,
                              std::size_t end) {
  if (set_size == 0 || begin > end || end > set_size) throw UsageError("invalid set pooling layout");
  const auto batch = upstream.rows();
  Matrix out = Matrix::Zero(batch * static_cast<Eigen::Index>(set_size), upstream.cols());
  if (begin == end) return out;
  const double inv = 1.0 / static_cast<double>(end - begin);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (std::size_t s = begin; s < end; ++s) {
      out.row(b * static_cast<Eigen::Index>(set_size) + static_cast<Eigen::Index>(s)) =
          upstream.row(b) * inv;
    }
  }
  return out;
}

// ----------------------------------------------------------------------- Adam

AdamState AdamState::for_params(const ParamStore& params, AdamConfig config) {
  AdamState s;
  s.config = config;
  for (const auto& p : params.params()) {
    s.first.emplace_back(p.value.size(), 0.0);
    s.second.emplace_back(p.value.size(), 0.0);
  }
  return s;
}

void adam_step(ParamStore& params, const GradientSet& grads, AdamState& state) {
  const auto& ps = params.params();
  if (grads.values.size() != ps.size() || state.first.size() != ps.size()) {
    throw UsageError("Adam: gradient/state count does not match parameters");
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (grads.values[i].size() != ps[i].value.size() ||
        state.first[i].size() != ps[i].value.size()) {
      throw UsageError("Adam: shape mismatch for " + ps[i].name);
    }
    for (double g : grads.values[i]) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient for parameter " + ps[i].name);
    }
  }
  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  auto data = params.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& m = state.first[i];
    auto& v = state.second[i];
    const auto& g = grads.values[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[i][j] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

DenseTensor finite_diff_gradient(const std::function<double(const DenseTensor&)>& f,
                                 const DenseTensor& point, double h) {
  if (!(h > 0.0)) throw ConfigError("finite-difference step must be positive");
  std::vector<double> base(point.values().begin(), point.values().end());
  std::vector<double> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += h;
    minus[i] -= h;
    grad[i] = (f(DenseTensor(point.shape(), std::move(plus))) -
               f(DenseTensor(point.shape(), std::move(minus)))) /
              (2.0 * h);
  }
  return DenseTensor(point.shape(), std::move(grad));
}

// ----------------------------------------------------------------- checkpoint

namespace {
constexpr std::uint32_t kParamsVersion = 1;
}

void write_params(io::Writer& w, const ParamStore& params) {
  w.magic("SGFP");
  w.u32(kParamsVersion);
  w.u64(params.layers().size());
  for (const auto& l : params.layers()) {
    w.u64(l.in);
    w.u64(l.out);
    w.str(to_string(l.activation));
  }
  w.u64(params.params().size());
  for (const auto& p : params.params()) {
    w.str(p.name);
    w.u64(p.value.shape().size());
    for (auto d : p.value.shape()) w.u64(d);
    w.f64s(std::vector<double>(p.value.values().begin(), p.value.values().end()));
  }
}

ParamStore read_params(io::Reader& r) {
  r.expect_magic("SGFP");
  const auto version = r.u32();
  if (version != kParamsVersion) {
    throw DataError("parameter checkpoint version " + std::to_string(version) +
                    " is not supported (expected " + std::to_string(kParamsVersion) + ")");
  }
  std::vector<LayerSpec> layers(r.u64());
  for (auto& l : layers) {
    l.in = r.u64();
    l.out = r.u64();
    l.activation = parse_activation(r.str());
  }
  ParamStore p = ParamStore::from_layers(layers);
  const auto count = r.u64();
  if (count < 2 * layers.size()) throw DataError("parameter checkpoint missing layer tensors");
  for (std::size_t i = 0; i < count; ++i) {
    auto name = r.str();
    std::vector<std::size_t> shape(r.u64());
    for (auto& d : shape) d = r.u64();
    auto values = r.f64s();
    DenseTensor t;
    try {
      t = DenseTensor(std::move(shape), std::move(values));
    } catch (const ConfigError& e) {
      throw DataError(std::string("corrupt parameter tensor ") + name + ": " + e.what());
    }
    if (i < 2 * layers.size()) {
      p.set(name, std::move(t));
    } else {
      p.add_extra(std::move(name), std::move(t));
    }
  }
  return p;
}

void save_params(const std::filesystem::path& path, const ParamStore& params) {
  io::Writer w;
  write_params(w, params);
  w.save(path);
}

ParamStore load_params(const std::filesystem::path& path) {
  auto r = io::Reader::open(path);
  return read_params(r);
}

void write_adam(io::Writer& w, const AdamState& s) {
  w.f64(s.config.learning_rate);
  w.f64(s.config.beta1);
  w.f64(s.config.beta2);
  w.f64(s.config.epsilon);
  w.u64(s.step);
  w.u64(s.first.size());
  for (std::size_t i = 0; i < s.first.size(); ++i) {
    w.f64s(s.first[i]);
    w.f64s(s.second[i]);
  }
}

AdamState read_adam(io::Reader& r) {
  AdamState s;
  s.config.learning_rate = r.f64();
  s.config.beta1 = r.f64();
  s.config.beta2 = r.f64();
  s.config.epsilon = r.f64();
  s.step = r.u64();
  const auto n = r.u64();
  for (std::size_t i = 0; i < n; ++i) {
    s.first.push_back(r.f64s());
    s.second.push_back(r.f64s());
  }
  return s;
}

}  // namespace socialgf::numerics
