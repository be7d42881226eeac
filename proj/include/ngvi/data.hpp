#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ngvi/errors.hpp"
#include "ngvi/network.hpp"
#include "ngvi/rng.hpp"
#include "ngvi/tensor.hpp"

// Dataset ingestion (IDX), synthetic generators, and data augmentation.
// Datasets are immutable after construction.

namespace ngvi::data {

struct Split {
  Tensor inputs;            // [N x d], flat row-major features
  std::vector<int> labels;  // in [0, K)
  std::int64_t n() const { return inputs.empty() ? 0 : inputs.dim(0); }
};

struct Dataset {
  Split train;
  Split val;
  int n_classes = 0;
  FeatureShape feature_shape;
  std::string name;

  std::int64_t n_orig() const { return train.n(); }

  void validate() const {
    for (const Split* sp : {&train, &val}) {
      for (int y : sp->labels) {
        if (y < 0 || y >= n_classes) {
          throw ConfigError("dataset " + name + ": label out of range");
        }
      }
      if (static_cast<std::int64_t>(sp->labels.size()) != sp->n()) {
        throw ConfigError("dataset " + name + ": label/input count mismatch");
      }
    }
  }
};

// --- IDX ---------------------------------------------------------------
// Big-endian header: 2 zero bytes, type code, rank, rank u32 dims, payload.
// Unsigned-byte image files (rank >= 2) are scaled to [0,1]; rank-1 files are
// label vectors and keep their raw integer values.

namespace detail {

inline std::uint32_t read_be_u32(std::istream& is, std::int64_t& offset) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw IoError("idx: truncated header at byte offset " + std::to_string(offset));
  }
  offset += 4;
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

inline Tensor load_idx(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("idx: cannot open " + path);
  std::int64_t offset = 0;
  unsigned char magic[4];
  if (!is.read(reinterpret_cast<char*>(magic), 4)) {
    throw IoError("idx: truncated magic at byte offset 0 in " + path);
  }
  offset = 4;
  if (magic[0] != 0 || magic[1] != 0) {
    throw IoError("idx: bad magic in " + path + " at byte offset 0");
  }
  const int type = magic[2];
  const int rank = magic[3];
  if (type != 0x08 && type != 0x0D) {
    throw IoError("idx: unsupported type code " + std::to_string(type) + " in " + path);
  }
  if (rank < 1 || rank > 4) {
    throw IoError("idx: unsupported rank " + std::to_string(rank) + " in " + path);
  }
  std::vector<std::int64_t> shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) d = detail::read_be_u32(is, offset);
  Tensor t(shape);
  const bool scale = (type == 0x08 && rank >= 2);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    if (type == 0x08) {
      unsigned char v;
      if (!is.read(reinterpret_cast<char*>(&v), 1)) {
        throw IoError("idx: truncated payload at byte offset " + std::to_string(offset) +
                      " in " + path);
      }
      offset += 1;
      t[i] = scale ? static_cast<double>(v) / 255.0 : static_cast<double>(v);
    } else {  // 0x0D: big-endian float32
      unsigned char b[4];
      if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw IoError("idx: truncated payload at byte offset " + std::to_string(offset) +
                      " in " + path);
      }
      offset += 4;
      std::uint32_t u = (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
                        (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
      float f;
      std::memcpy(&f, &u, 4);
      t[i] = static_cast<double>(f);
    }
  }
  return t;
}

// Write a u8 IDX file; values are expected in [0,1] for rank >= 2 (images)
// and integral in [0,255] for rank 1 (labels).
inline void write_idx_u8(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("idx: cannot write " + path);
  const unsigned char magic[4] = {0, 0, 0x08, static_cast<unsigned char>(t.rank())};
  os.write(reinterpret_cast<const char*>(magic), 4);
  for (int i = 0; i < t.rank(); ++i) {
    const std::uint32_t d = static_cast<std::uint32_t>(t.dim(i));
    const unsigned char b[4] = {static_cast<unsigned char>(d >> 24),
                                static_cast<unsigned char>(d >> 16),
                                static_cast<unsigned char>(d >> 8),
                                static_cast<unsigned char>(d)};
    os.write(reinterpret_cast<const char*>(b), 4);
  }
  const bool scaled = t.rank() >= 2;
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const double v = scaled ? t[i] * 255.0 : t[i];
    const unsigned char b = static_cast<unsigned char>(std::lround(v));
    os.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!os) throw IoError("idx: short write to " + path);
}

// FNV-1a 64 over a file, for fixture manifests.
inline std::uint64_t file_checksum(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checksum: cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char c;
  while (is.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Dataset dataset_from_idx(const std::string& train_images, const std::string& train_labels,
                                const std::string& val_images, const std::string& val_labels) {
  Dataset ds;
  ds.name = "idx";
  auto load_split = [](const std::string& ip, const std::string& lp) {
    Split sp;
    Tensor imgs = load_idx(ip);
    const std::int64_t n = imgs.dim(0);
    std::int64_t d = 1;
    for (int i = 1; i < imgs.rank(); ++i) d *= imgs.dim(i);
    sp.inputs = imgs.reshaped({n, d});
    Tensor lab = load_idx(lp);
    if (lab.rank() != 1 || lab.dim(0) != n) {
      throw IoError("idx: labels " + lp + " do not match image count");
    }
    sp.labels.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) sp.labels[static_cast<std::size_t>(i)] = static_cast<int>(lab[i]);
    return sp;
  };
  ds.train = load_split(train_images, train_labels);
  ds.val = load_split(val_images, val_labels);
  int k = 0;
  for (int y : ds.train.labels) k = std::max(k, y + 1);
  for (int y : ds.val.labels) k = std::max(k, y + 1);
  ds.n_classes = k;
  Tensor probe = load_idx(train_images);
  if (probe.rank() == 4) {
    ds.feature_shape = FeatureShape::image(probe.dim(1), probe.dim(2), probe.dim(3));
  } else if (probe.rank() == 3) {
    ds.feature_shape = FeatureShape::image(1, probe.dim(1), probe.dim(2));
  } else {
    ds.feature_shape = FeatureShape::flat(ds.train.inputs.dim(1));
  }
  ds.validate();
  return ds;
}

// --- synthetic generators ------------------------------------------------

enum class SyntheticKind { two_moons, gaussian_blobs, digits };

inline SyntheticKind synthetic_kind_from_string(const std::string& s) {
  if (s == "two-moons") return SyntheticKind::two_moons;
  if (s == "gaussian-blobs") return SyntheticKind::gaussian_blobs;
  if (s == "digits") return SyntheticKind::digits;
  throw ConfigError("unknown synthetic dataset kind: " + s);
}

struct SyntheticParams {
  std::int64_t n = 200;
  double noise = 0.1;
  // blobs
  int classes = 3;
  double center_radius = 5.0;
  std::vector<double> shift;  // optional offset added to every point
};

// 8x8 stroke templates for the ten digits, row-major, '1' = ink.
inline const std::array<const char*, 10>& digit_templates() {
  static const std::array<const char*, 10> t = {
      "00111100"
      "01000010"
      "01000110"
      "01001010"
      "01010010"
      "01100010"
      "01000010"
      "00111100",  // 0
      "00011000"
      "00111000"
      "00011000"
      "00011000"
      "00011000"
      "00011000"
      "00011000"
      "01111110",  // 1
      "00111100"
      "01000010"
      "00000010"
      "00000100"
      "00011000"
      "00100000"
      "01000000"
      "01111110",  // 2
      "00111100"
      "01000010"
      "00000010"
      "00011100"
      "00000010"
      "00000010"
      "01000010"
      "00111100",  // 3
      "00000100"
      "00001100"
      "00010100"
      "00100100"
      "01000100"
      "01111110"
      "00000100"
      "00000100",  // 4
      "01111110"
      "01000000"
      "01000000"
      "01111100"
      "00000010"
      "00000010"
      "01000010"
      "00111100",  // 5
      "00111100"
      "01000010"
      "01000000"
      "01111100"
      "01000010"
      "01000010"
      "01000010"
      "00111100",  // 6
      "01111110"
      "00000010"
      "00000100"
      "00001000"
      "00010000"
      "00100000"
      "00100000"
      "00100000",  // 7
      "00111100"
      "01000010"
      "01000010"
      "00111100"
      "01000010"
      "01000010"
      "01000010"
      "00111100",  // 8
      "00111100"
      "01000010"
      "01000010"
      "00111110"
      "00000010"
      "00000010"
      "01000010"
      "00111100",  // 9
  };
  return t;
}

namespace detail {

inline Split make_two_moons(std::int64_t n, double noise, RngStream& rng) {
  Split sp;
  sp.inputs = Tensor({n, 2});
  sp.labels.resize(static_cast<std::size_t>(n));
  const double pi = 3.14159265358979323846;
  for (std::int64_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 2);  // balanced within +-1
    const double t = pi * rng.uniform01();
    double x, y;
    if (cls == 0) {
      x = std::cos(t);
      y = std::sin(t);
    } else {
      x = 1.0 - std::cos(t);
      y = 0.5 - std::sin(t);
    }
    sp.inputs[i * 2 + 0] = x + noise * rng.normal();
    sp.inputs[i * 2 + 1] = y + noise * rng.normal();
    sp.labels[static_cast<std::size_t>(i)] = cls;
  }
  return sp;
}

inline Split make_blobs(std::int64_t n, double noise, int classes, double radius,
                        const std::vector<double>& shift, RngStream& rng) {
  Split sp;
  sp.inputs = Tensor({n, 2});
  sp.labels.resize(static_cast<std::size_t>(n));
  const double pi = 3.14159265358979323846;
  const double sx = shift.size() > 0 ? shift[0] : 0.0;
  const double sy = shift.size() > 1 ? shift[1] : 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % classes);
    const double angle = 2.0 * pi * cls / classes;
    sp.inputs[i * 2 + 0] = radius * std::cos(angle) + noise * rng.normal() + sx;
    sp.inputs[i * 2 + 1] = radius * std::sin(angle) + noise * rng.normal() + sy;
    sp.labels[static_cast<std::size_t>(i)] = cls;
  }
  return sp;
}

inline Split make_digits(std::int64_t n, double noise, RngStream& rng) {
  Split sp;
  sp.inputs = Tensor({n, 64});
  sp.labels.resize(static_cast<std::size_t>(n));
  const auto& templates = digit_templates();
  for (std::int64_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 10);
    const char* tpl = templates[static_cast<std::size_t>(cls)];
    for (std::int64_t j = 0; j < 64; ++j) {
      const double ink = tpl[j] == '1' ? 1.0 : 0.0;
      sp.inputs[i * 64 + j] = ink + noise * rng.normal();
    }
    sp.labels[static_cast<std::size_t>(i)] = cls;
  }
  return sp;
}

}  // namespace detail

// Deterministic for a fixed seed; classes balanced within +-1. Train and
// validation splits come from distinct derived streams.
inline Dataset make_synthetic(SyntheticKind kind, std::int64_t n_train, std::int64_t n_val,
                              const SyntheticParams& params, std::uint64_t seed) {
  if (n_train < 2) throw ConfigError("make_synthetic: n_train must be >= 2");
  Dataset ds;
  auto gen = [&](std::int64_t n, std::uint64_t stream) {
    RngStream rng(seed, stream);
    switch (kind) {
      case SyntheticKind::two_moons:
        return detail::make_two_moons(n, params.noise, rng);
      case SyntheticKind::gaussian_blobs:
        return detail::make_blobs(n, params.noise, params.classes, params.center_radius,
                                  params.shift, rng);
      case SyntheticKind::digits:
        return detail::make_digits(n, params.noise, rng);
    }
    throw ConfigError("make_synthetic: bad kind");
  };
  ds.train = gen(n_train, stream_tag("data.train"));
  ds.val = gen(n_val, stream_tag("data.val"));
  switch (kind) {
    case SyntheticKind::two_moons:
      ds.n_classes = 2;
      ds.feature_shape = FeatureShape::flat(2);
      ds.name = "two-moons";
      break;
    case SyntheticKind::gaussian_blobs:
      ds.n_classes = params.classes;
      ds.feature_shape = FeatureShape::flat(2);
      ds.name = "gaussian-blobs";
      break;
    case SyntheticKind::digits:
      ds.n_classes = 10;
      ds.feature_shape = FeatureShape::image(1, 8, 8);
      ds.name = "digits";
      break;
  }
  ds.validate();
  return ds;
}

// --- augmentation ---------------------------------------------------------

struct AugmentationSpec {
  std::int64_t pad = 0;
  std::int64_t crop = 0;        // output spatial size; 0 = no cropping
  bool hflip = false;           // each image flips with probability 0.5
  double hflip_probability = 0.5;
  double rho_override = 0.0;    // explicit rho; 0 = use the counting heuristic

  bool active() const { return pad > 0 || crop > 0 || hflip; }

  // The paper's counting argument: cropping contributes a factor 5 (four
  // corners and the centre), flipping a factor 2.
  double rho(const FeatureShape& shape) const {
    if (rho_override > 0.0) return rho_override;
    double r = 1.0;
    const bool crops = pad > 0 || (crop > 0 && crop < shape.h);
    if (crops) r *= 5.0;
    if (hflip) r *= 2.0;
    return r;
  }
};

// Effective dataset size N = rho * N_orig, feeding delta_tilde = tau*delta/N.
inline double effective_n(std::int64_t n_orig, const AugmentationSpec& spec,
                          const FeatureShape& shape) {
  return spec.rho(shape) * static_cast<double>(n_orig);
}

// Independent random crop (from the zero-padded canvas) and horizontal flip
// per image. Output spatial dims equal the crop size. Labels are untouched by
// construction (inputs only).
inline Tensor augment(const Tensor& batch, const FeatureShape& shape,
                      const AugmentationSpec& spec, RngStream& rng) {
  if (!shape.spatial) throw std::invalid_argument("augment: image-shaped inputs required");
  const std::int64_t m = batch.dim(0);
  const std::int64_t crop = spec.crop > 0 ? spec.crop : shape.h;
  const std::int64_t canvas_h = shape.h + 2 * spec.pad;
  const std::int64_t canvas_w = shape.w + 2 * spec.pad;
  if (crop > canvas_h || crop > canvas_w) {
    throw std::invalid_argument("augment: crop larger than padded canvas");
  }
  const std::int64_t pos_y = canvas_h - crop + 1;
  const std::int64_t pos_x = canvas_w - crop + 1;
  Tensor out({m, shape.c * crop * crop});
  for (std::int64_t i = 0; i < m; ++i) {
    const std::int64_t dy = pos_y > 1 ? rng.uniform_int(pos_y) : 0;
    const std::int64_t dx = pos_x > 1 ? rng.uniform_int(pos_x) : 0;
    const bool flip = spec.hflip && rng.bernoulli(spec.hflip_probability);
    for (std::int64_t c = 0; c < shape.c; ++c) {
      for (std::int64_t y = 0; y < crop; ++y) {
        const std::int64_t sy = y + dy - spec.pad;
        for (std::int64_t x = 0; x < crop; ++x) {
          const std::int64_t raw_x = x + dx - spec.pad;
          const std::int64_t sx = flip ? (shape.w - 1 - raw_x) : raw_x;
          double v = 0.0;
          if (sy >= 0 && sy < shape.h && sx >= 0 && sx < shape.w) {
            v = batch[i * shape.d + (c * shape.h + sy) * shape.w + sx];
          }
          out[i * shape.c * crop * crop + (c * crop + y) * crop + x] = v;
        }
      }
    }
  }
  return out;
}

// Shuffled index order for one epoch, Fisher-Yates.
inline std::vector<std::int64_t> shuffled_indices(std::int64_t n, RngStream& rng) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = rng.uniform_int(i + 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

inline std::pair<Tensor, std::vector<int>> take_batch(const Split& split,
                                                      const std::vector<std::int64_t>& order,
                                                      std::int64_t start, std::int64_t count) {
  const std::int64_t d = split.inputs.dim(1);
  Tensor inputs({count, d});
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t src = order[static_cast<std::size_t>(start + i)];
    std::copy(split.inputs.data() + src * d, split.inputs.data() + (src + 1) * d,
              inputs.data() + i * d);
    labels[static_cast<std::size_t>(i)] = split.labels[static_cast<std::size_t>(src)];
  }
  return {std::move(inputs), std::move(labels)};
}

}  // namespace ngvi::data
