#include "adlab/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <string>

#include "adlab/errors.hpp"
#include "adlab/io.hpp"
#include "adlab/rng.hpp"

namespace adlab {

std::size_t ModelParams::parameter_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) n += weights[i].size() + biases[i].size();
  return n;
}

void ModelParams::validate() const {
  if (layer_sizes.size() < 2) throw ContractError("model needs at least two layer sizes");
  const std::size_t L = layer_sizes.size() - 1;
  if (weights.size() != L || biases.size() != L) throw ContractError("model layer count does not match sizes");
  for (std::size_t i = 0; i < L; ++i) {
    const auto& W = weights[i];
    if (W.rank() != 2 || W.rows() != layer_sizes[i + 1] || W.cols() != layer_sizes[i]) {
      throw ContractError("weight " + std::to_string(i) + " does not chain with layer sizes");
    }
    if (biases[i].size() != layer_sizes[i + 1]) throw ContractError("bias " + std::to_string(i) + " has wrong length");
    if (!W.all_finite() || !biases[i].all_finite()) {
      throw ContractError("layer " + std::to_string(i) + " has non-finite parameters");
    }
  }
}

namespace {

void check_sizes(std::span<const std::size_t> sizes) {
  if (sizes.size() < 2) throw ConfigError("an MLP needs at least two layer sizes");
  for (auto s : sizes) {
    if (s == 0) throw ConfigError("layer sizes must be positive");
  }
}

}  // namespace

ModelParams zero_mlp(std::span<const std::size_t> layer_sizes) {
  check_sizes(layer_sizes);
  ModelParams m;
  m.layer_sizes.assign(layer_sizes.begin(), layer_sizes.end());
  for (std::size_t i = 0; i + 1 < layer_sizes.size(); ++i) {
    m.weights.push_back(Tensor::matrix(layer_sizes[i + 1], layer_sizes[i]));
    m.biases.emplace_back(std::vector<std::size_t>{layer_sizes[i + 1]}, 0.0);
  }
  return m;
}

ModelParams init_mlp(std::span<const std::size_t> layer_sizes, std::uint64_t seed) {
  ModelParams m = zero_mlp(layer_sizes);
  Rng rng(seed);
  for (std::size_t i = 0; i < m.weights.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer_sizes[i]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& w : m.weights[i].storage()) w = dist(rng);
  }
  return m;
}

BoundParams bind(Tape& tape, const ModelParams& model, bool requires_grad) {
  BoundParams b;
  b.weights.reserve(model.layers());
  b.biases.reserve(model.layers());
  for (std::size_t i = 0; i < model.layers(); ++i) {
    b.weights.push_back(tape.leaf(model.weights[i], requires_grad));
    b.biases.push_back(tape.leaf(model.biases[i], requires_grad));
  }
  return b;
}

Var forward(const BoundParams& params, Var x) {
  const std::size_t L = params.weights.size();
  if (L == 0) throw ContractError("forward: empty model");
  const std::size_t width = params.weights[0].value().cols();
  if (x.value().cols() != width) {
    throw DimensionError("forward: input width " + std::to_string(x.value().cols()) + " but model expects " +
                         std::to_string(width));
  }
  Var h = x;
  for (std::size_t i = 0; i < L; ++i) {
    h = linear(h, params.weights[i], params.biases[i]);
    if (i + 1 < L) h = relu(h);
  }
  return h;
}

Tensor forward(const ModelParams& model, const Tensor& x) {
  Tape tape;
  const BoundParams bp = bind(tape, model, false);
  return forward(bp, tape.constant(x)).value();
}

ModelParams gradients(const BoundParams& params, const ModelParams& like) {
  ModelParams g = like;
  for (std::size_t i = 0; i < like.layers(); ++i) {
    g.weights[i] = params.weights[i].grad();
    g.biases[i] = params.biases[i].grad();
  }
  return g;
}

void TeacherEmulation::validate() const {
  if (mode == EmulationMode::Sharpened && !(temperature > 0.0 && std::isfinite(temperature))) {
    throw ConfigError("teacher temperature must be positive");
  }
  if (mode == EmulationMode::Interpolated && !(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("teacher interpolation alpha must lie in [0,1]");
  }
}

std::string to_string(EmulationMode mode) {
  switch (mode) {
    case EmulationMode::AsTrained:
      return "as-trained";
    case EmulationMode::Sharpened:
      return "temperature-sharpened";
    case EmulationMode::Interpolated:
      return "label-interpolated";
  }
  return "?";
}

EmulationMode emulation_mode_from_string(const std::string& name) {
  if (name == "as-trained") return EmulationMode::AsTrained;
  if (name == "temperature-sharpened" || name == "sharpened") return EmulationMode::Sharpened;
  if (name == "label-interpolated" || name == "interpolated") return EmulationMode::Interpolated;
  throw ConfigError("unknown teacher emulation mode '" + name + "'");
}

ProbBatch emulate_teacher(const ProbBatch& probs, std::span<const int> labels, const TeacherEmulation& emu) {
  emu.validate();
  switch (emu.mode) {
    case EmulationMode::AsTrained:
      return probs;
    case EmulationMode::Sharpened: {
      Tensor z = probs.values();
      for (double& v : z.storage()) v = clamped_log(v) / emu.temperature;
      return softmax(z);
    }
    case EmulationMode::Interpolated: {
      if (labels.size() != probs.rows()) throw ContractError("emulate_teacher: one label per row required");
      Tensor t = probs.values();
      for (double& v : t.storage()) v *= (1.0 - emu.alpha);
      for (std::size_t r = 0; r < t.rows(); ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= t.cols()) {
          throw ContractError("emulate_teacher: label out of range");
        }
        t(r, static_cast<std::size_t>(labels[r])) += emu.alpha;
      }
      return ProbBatch(std::move(t));
    }
  }
  throw ConfigError("invalid emulation mode");
}

Teacher::Teacher(ModelParams params, TeacherEmulation emulation)
    : params_(std::move(params)), emulation_(emulation) {
  params_.validate();
  emulation_.validate();
}

Teacher::Teacher(const Teacher& other) : params_(other.params_), emulation_(other.emulation_) {}

Teacher& Teacher::operator=(const Teacher& other) {
  params_ = other.params_;
  emulation_ = other.emulation_;
  reset_counters();
  return *this;
}

Var Teacher::logits(Tape& tape, Var x, std::span<const int> labels) const {
  forward_calls_.fetch_add(1, std::memory_order_relaxed);
  const BoundParams bp = bind(tape, params_, false);
  Var z = forward(bp, x);
  switch (emulation_.mode) {
    case EmulationMode::AsTrained:
      break;
    case EmulationMode::Sharpened:
      z = scale(log_softmax(z), 1.0 / emulation_.temperature);
      break;
    case EmulationMode::Interpolated: {
      const ProbBatch eye = one_hot(labels, classes());
      Tensor shift = eye.values();
      for (double& v : shift.storage()) v *= emulation_.alpha;
      z = log_clamped(add(scale(softmax(z), 1.0 - emulation_.alpha), tape.constant(std::move(shift))));
      break;
    }
  }
  return backward_hook(z, [this] { backward_calls_.fetch_add(1, std::memory_order_relaxed); });
}

Tensor Teacher::logits(const Tensor& x, std::span<const int> labels) const {
  Tape tape;
  return logits(tape, tape.constant(x), labels).value();
}

ProbBatch Teacher::probs(const Tensor& x, std::span<const int> labels) const { return softmax(logits(x, labels)); }

Teacher::Counters Teacher::counters() const noexcept {
  return {forward_calls_.load(std::memory_order_relaxed), backward_calls_.load(std::memory_order_relaxed)};
}

void Teacher::reset_counters() const noexcept {
  forward_calls_.store(0, std::memory_order_relaxed);
  backward_calls_.store(0, std::memory_order_relaxed);
}

SwaState swa_update(const SwaState& state, const ModelParams& snapshot) {
  if (state.count == 0) return SwaState{snapshot, 1};
  if (state.averaged.layer_sizes != snapshot.layer_sizes) {
    throw ContractError("swa_update: snapshot shape differs from the running average");
  }
  SwaState next{state.averaged, state.count + 1};
  const double n = static_cast<double>(state.count);
  const double denom = n + 1.0;
  auto blend = [&](Tensor& avg, const Tensor& snap) {
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = (n * avg[i] + snap[i]) / denom;
  };
  for (std::size_t l = 0; l < snapshot.layers(); ++l) {
    blend(next.averaged.weights[l], snapshot.weights[l]);
    blend(next.averaged.biases[l], snapshot.biases[l]);
  }
  return next;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f64(std::string& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t checkpoint_size(const ModelParams& model) {
  return 12 + 4 * model.layer_sizes.size() + 8 * model.parameter_count();
}

std::string encode_checkpoint(const ModelParams& model) {
  model.validate();
  std::string out;
  out.reserve(checkpoint_size(model));
  out.append("ADLB", 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(model.layers()));
  for (auto s : model.layer_sizes) put_u32(out, static_cast<std::uint32_t>(s));
  for (std::size_t l = 0; l < model.layers(); ++l) {
    for (double w : model.weights[l].storage()) put_f64(out, w);
    for (double b : model.biases[l].storage()) put_f64(out, b);
  }
  return out;
}

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  const auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), "ADLB", 4) != 0) throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = in.pos();
  const auto version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const std::size_t count_at = in.pos();
  const auto L = in.u32("layer count");
  if (L == 0) throw FormatError("checkpoint declares zero layers", count_at);
  if (static_cast<std::uint64_t>(L + 1) * 4 > in.remaining()) {
    throw FormatError("checkpoint truncated in layer sizes", in.pos());
  }
  std::vector<std::size_t> sizes;
  for (std::uint32_t i = 0; i <= L; ++i) {
    const std::size_t at = in.pos();
    const auto s = in.u32("layer size");
    if (s == 0) throw FormatError("checkpoint layer size is zero", at);
    sizes.push_back(s);
  }
  ModelParams m = zero_mlp(sizes);
  if (8 * m.parameter_count() > in.remaining()) {
    throw FormatError("checkpoint truncated: parameters need " + std::to_string(8 * m.parameter_count()) +
                          " bytes, " + std::to_string(in.remaining()) + " available",
                      in.pos());
  }
  for (std::size_t l = 0; l < m.layers(); ++l) {
    for (double& w : m.weights[l].storage()) w = in.f64("weight");
    for (double& b : m.biases[l].storage()) b = in.f64("bias");
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after checkpoint payload", in.pos());
  return m;
}

void save_checkpoint(const ModelParams& model, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(model));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint(bytes);
}

}  // namespace adlab
