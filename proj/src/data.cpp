#include "adlab/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <numeric>

#include "adlab/errors.hpp"
#include "adlab/io.hpp"
#include "adlab/rng.hpp"

namespace adlab {

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.classes = classes;
  if (indices.empty()) return out;
  const std::size_t d = dims();
  out.x = Tensor::matrix(indices.size(), d);
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= size()) throw ContractError("dataset subset index out of range");
    std::copy_n(x.row(indices[r]).begin(), d, out.x.row(r).begin());
    out.labels.push_back(labels[indices[r]]);
  }
  return out;
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::GaussianMixture:
      return "gaussian-mixture";
    case DatasetKind::Concentric:
      return "concentric";
    case DatasetKind::IdxImage:
      return "idx-image";
  }
  return "?";
}

DatasetKind dataset_kind_from_string(const std::string& name) {
  for (auto k : {DatasetKind::GaussianMixture, DatasetKind::Concentric, DatasetKind::IdxImage}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown dataset kind '" + name + "'");
}

void DatasetSpec::validate() const {
  if (!(normalize_lo < normalize_hi)) throw ConfigError("dataset normalize_to needs lo < hi");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0,1)");
  if (kind == DatasetKind::IdxImage) {
    if (images_path.empty() || labels_path.empty()) throw ConfigError("idx-image datasets need images and labels paths");
    return;
  }
  if (!(class_margin > 0.0)) throw ConfigError("class_margin must be > 0");
  if (!(spread > 0.0)) throw ConfigError("spread must be > 0");
  if (dims < 2) throw ConfigError("synthetic datasets need dims >= 2");
  if (classes < 2) throw ConfigError("synthetic datasets need at least 2 classes");
  if (samples_per_class == 0) throw ConfigError("samples_per_class must be positive");
}

namespace {

constexpr std::size_t kMaxAttemptsPerSample = 2000;

Dataset shuffled(Dataset data, Rng& rng) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return data.subset(order);
}

bool inside_box(std::span<const double> p, double lo, double hi) {
  return std::all_of(p.begin(), p.end(), [&](double v) { return v >= lo && v <= hi; });
}

// Each sample keeps distance >= margin/2 from every bisector between its own
// centre and another class centre, so cross-class pairs sit >= margin apart.
Dataset gaussian_mixture(const DatasetSpec& s) {
  const double width = s.normalize_hi - s.normalize_lo;
  const double mid = s.normalize_lo + 0.5 * width;
  Rng rng(s.seed);
  std::uniform_real_distribution<double> offset(-0.15 * width, 0.15 * width);
  std::vector<std::vector<double>> centres(s.classes, std::vector<double>(s.dims, mid));
  for (std::size_t c = 0; c < s.classes; ++c) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(s.classes);
    centres[c][0] = mid + 0.3 * width * std::cos(angle);
    centres[c][1] = mid + 0.3 * width * std::sin(angle);
    for (std::size_t k = 2; k < s.dims; ++k) centres[c][k] = mid + offset(rng);
  }

  Dataset out;
  out.classes = s.classes;
  out.x = Tensor::matrix(s.classes * s.samples_per_class, s.dims);
  std::normal_distribution<double> noise(0.0, s.spread);
  std::vector<double> p(s.dims);
  std::size_t row = 0;
  for (std::size_t c = 0; c < s.classes; ++c) {
    for (std::size_t n = 0; n < s.samples_per_class; ++n) {
      bool accepted = false;
      for (std::size_t attempt = 0; attempt < kMaxAttemptsPerSample && !accepted; ++attempt) {
        for (std::size_t k = 0; k < s.dims; ++k) p[k] = centres[c][k] + noise(rng);
        if (!inside_box(p, s.normalize_lo, s.normalize_hi)) continue;
        accepted = true;
        for (std::size_t o = 0; o < s.classes && accepted; ++o) {
          if (o == c) continue;
          double dot = 0.0, norm2 = 0.0;
          for (std::size_t k = 0; k < s.dims; ++k) {
            const double dir = centres[c][k] - centres[o][k];
            dot += (p[k] - 0.5 * (centres[c][k] + centres[o][k])) * dir;
            norm2 += dir * dir;
          }
          accepted = dot / std::sqrt(norm2) >= 0.5 * s.class_margin;
        }
      }
      if (!accepted) throw ConfigError("class_margin too large for the requested spread; cannot place samples");
      std::copy(p.begin(), p.end(), out.x.row(row).begin());
      out.labels.push_back(static_cast<int>(c));
      ++row;
    }
  }
  return shuffled(std::move(out), rng);
}

// Class c occupies the radial band [c (spread + margin), c (spread + margin) + spread]
// in the first two dimensions.
Dataset concentric(const DatasetSpec& s) {
  const double width = s.normalize_hi - s.normalize_lo;
  const double mid = s.normalize_lo + 0.5 * width;
  const double pitch = s.spread + s.class_margin;
  const double outer = static_cast<double>(s.classes - 1) * pitch + s.spread;
  if (outer > 0.5 * width) throw ConfigError("concentric rings do not fit inside normalize_to; reduce spread or margin");
  Rng rng(s.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 0.05 * s.spread);
  Dataset out;
  out.classes = s.classes;
  out.x = Tensor::matrix(s.classes * s.samples_per_class, s.dims);
  std::size_t row = 0;
  for (std::size_t c = 0; c < s.classes; ++c) {
    for (std::size_t n = 0; n < s.samples_per_class; ++n) {
      const double r = static_cast<double>(c) * pitch + s.spread * unit(rng);
      const double angle = 2.0 * std::numbers::pi * unit(rng);
      auto p = out.x.row(row);
      p[0] = mid + r * std::cos(angle);
      p[1] = mid + r * std::sin(angle);
      for (std::size_t k = 2; k < s.dims; ++k) p[k] = std::clamp(mid + jitter(rng), s.normalize_lo, s.normalize_hi);
      out.labels.push_back(static_cast<int>(c));
      ++row;
    }
  }
  return shuffled(std::move(out), rng);
}

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t at, const char* what) {
  if (b.size() < at + 4) throw FormatError(std::string("IDX file truncated in ") + what, b.size());
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void append_double(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

}  // namespace

Dataset gen_dataset(const DatasetSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case DatasetKind::GaussianMixture:
      return gaussian_mixture(spec);
    case DatasetKind::Concentric:
      return concentric(spec);
    case DatasetKind::IdxImage:
      return load_idx(spec.images_path, spec.labels_path, spec.normalize_lo, spec.normalize_hi);
  }
  throw ConfigError("unknown dataset kind");
}

DataSplit split_dataset(const Dataset& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0,1)");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {0x5b1u}));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(data.size())));
  DataSplit out;
  out.train_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.test_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  out.train = data.subset(out.train_indices);
  out.test = data.subset(out.test_indices);
  return out;
}

Dataset decode_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("IDX normalization needs lo < hi");
  const auto img_magic = be32(images, 0, "image magic");
  if (img_magic != 0x00000803u) throw FormatError("bad IDX image magic", 0);
  const auto lbl_magic = be32(labels, 0, "label magic");
  if (lbl_magic != 0x00000801u) throw FormatError("bad IDX label magic", 0);
  const std::size_t n_images = be32(images, 4, "image count");
  const std::size_t rows = be32(images, 8, "image rows");
  const std::size_t cols = be32(images, 12, "image cols");
  const std::size_t n_labels = be32(labels, 4, "label count");
  if (n_images != n_labels) {
    throw FormatError("IDX image count " + std::to_string(n_images) + " does not match label count " +
                          std::to_string(n_labels),
                      4);
  }
  if (n_images == 0 || rows == 0 || cols == 0) throw FormatError("IDX header declares an empty dataset", 4);
  const std::size_t pixels = rows * cols;
  if (images.size() != 16 + n_images * pixels) {
    throw FormatError("IDX image payload has " + std::to_string(images.size() - 16) + " bytes, expected " +
                          std::to_string(n_images * pixels),
                      std::min(images.size(), 16 + n_images * pixels));
  }
  if (labels.size() != 8 + n_labels) {
    throw FormatError("IDX label payload has " + std::to_string(labels.size() - 8) + " bytes, expected " +
                          std::to_string(n_labels),
                      std::min(labels.size(), 8 + n_labels));
  }
  Dataset out;
  out.x = Tensor::matrix(n_images, pixels);
  const double scale = (hi - lo) / 255.0;
  for (std::size_t i = 0; i < n_images * pixels; ++i) out.x[i] = lo + scale * images[16 + i];
  out.labels.reserve(n_labels);
  int max_label = 0;
  for (std::size_t i = 0; i < n_labels; ++i) {
    out.labels.push_back(labels[8 + i]);
    max_label = std::max(max_label, static_cast<int>(labels[8 + i]));
  }
  out.classes = static_cast<std::size_t>(max_label) + 1;
  return out;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, double lo, double hi) {
  const auto img = read_file_bytes(images);
  const auto lbl = read_file_bytes(labels);
  return decode_idx(img, lbl, lo, hi);
}

std::string encode_dataset_csv(const Dataset& data) {
  std::string out = "label";
  for (std::size_t k = 0; k < data.dims(); ++k) out += ",f" + std::to_string(k);
  out += '\n';
  for (std::size_t r = 0; r < data.size(); ++r) {
    out += std::to_string(data.labels[r]);
    for (double v : data.x.row(r)) {
      out += ',';
      append_double(out, v);
    }
    out += '\n';
  }
  return out;
}

}  // namespace adlab
