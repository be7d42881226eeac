#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ngvi/errors.hpp"
#include "ngvi/rng.hpp"

namespace ngvi {

// Dense row-major array of 64-bit floats. The layout is fixed (row-major,
// last index fastest) so serialized tensors are portable. Value semantics:
// copies are deep, a published tensor is never mutated through another copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape)
      : shape_(std::move(shape)), values_(checked_numel(shape_), 0.0) {}

  Tensor(std::vector<std::int64_t> shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (checked_numel(shape_) != static_cast<std::int64_t>(values_.size())) {
      throw std::invalid_argument("Tensor: shape does not match value count");
    }
  }

  static Tensor full(std::vector<std::int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.values_.begin(), t.values_.end(), v);
    return t;
  }

  static Tensor vec(std::initializer_list<double> vals) {
    return Tensor({static_cast<std::int64_t>(vals.size())},
                  std::vector<double>(vals));
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(values_.size()); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double operator[](std::int64_t i) const { return values_[static_cast<std::size_t>(i)]; }
  double& operator[](std::int64_t i) { return values_[static_cast<std::size_t>(i)]; }

  // 2-d accessors; the caller is responsible for rank
  double at2(std::int64_t r, std::int64_t c) const { return values_[static_cast<std::size_t>(r * shape_[1] + c)]; }
  double& at2(std::int64_t r, std::int64_t c) { return values_[static_cast<std::size_t>(r * shape_[1] + c)]; }

  Tensor reshaped(std::vector<std::int64_t> new_shape) const {
    if (checked_numel(new_shape) != size()) {
      throw std::invalid_argument("reshape: element count mismatch");
    }
    return Tensor(std::move(new_shape), values_);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  double sum() const { return std::accumulate(values_.begin(), values_.end(), 0.0); }
  double mean() const { return values_.empty() ? 0.0 : sum() / static_cast<double>(values_.size()); }
  double max_value() const { return *std::max_element(values_.begin(), values_.end()); }
  double min_value() const { return *std::min_element(values_.begin(), values_.end()); }

  Tensor& operator+=(const Tensor& o) { return zip(o, [](double a, double b) { return a + b; }); }
  Tensor& operator-=(const Tensor& o) { return zip(o, [](double a, double b) { return a - b; }); }
  Tensor& operator*=(const Tensor& o) { return zip(o, [](double a, double b) { return a * b; }); }
  Tensor& operator*=(double c) {
    for (double& v : values_) v *= c;
    return *this;
  }
  Tensor& operator+=(double c) {
    for (double& v : values_) v += c;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, const Tensor& b) { return a *= b; }
  friend Tensor operator*(Tensor a, double c) { return a *= c; }
  friend Tensor operator*(double c, Tensor a) { return a *= c; }

  Tensor map(const std::function<double(double)>& f) const {
    Tensor out = *this;
    for (double& v : out.values_) v = f(v);
    return out;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << 'x';
      os << shape_[i];
    }
    os << ']';
    return os.str();
  }

 private:
  static std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  template <class F>
  Tensor& zip(const Tensor& o, F f) {
    if (!same_shape(o)) {
      throw std::invalid_argument("elementwise op: shape mismatch " +
                                  shape_string() + " vs " + o.shape_string());
    }
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] = f(values_[i], o.values_[i]);
    return *this;
  }

  std::vector<std::int64_t> shape_;
  std::vector<double> values_;
};

inline void check_finite(const Tensor& t, const std::string& context) {
  if (!t.all_finite()) throw NumericError(context + ": non-finite values");
}

// a:[m x k] * b:[k x n] -> [m x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + a.shape_string() +
                                " * " + b.shape_string());
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 tensor required");
  const std::int64_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

// mean + eps*stddev with eps ~ N(0, I), elementwise. A zero stddev entry
// returns the mean entry bitwise (the draw is still consumed, keeping stream
// positions independent of the values).
inline Tensor gaussian_sample(const Tensor& mean, const Tensor& stddev, RngStream& rng) {
  if (!mean.same_shape(stddev)) {
    throw std::invalid_argument("gaussian_sample: shape mismatch " + mean.shape_string() +
                                " vs " + stddev.shape_string());
  }
  Tensor out = mean;
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const double s = stddev[i];
    if (s < 0.0) throw std::invalid_argument("gaussian_sample: negative stddev element");
    const double eps = rng.normal();
    if (s != 0.0) out[i] = mean[i] + eps * s;
  }
  return out;
}

// Output spatial size of a convolution / crop with the usual formula.
inline std::int64_t conv_out_dim(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                                 std::int64_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// im2col. input is one example [C,H,W]; output column j holds the receptive
// field patch of output position j, so conv == W * unfold(A).
inline Tensor unfold(const Tensor& input, std::int64_t kernel, std::int64_t stride,
                     std::int64_t pad) {
  if (input.rank() != 3) throw std::invalid_argument("unfold: input must be [C,H,W]");
  if (kernel < 1 || stride < 1 || pad < 0) {
    throw std::invalid_argument("unfold: kernel/stride must be >= 1 and pad >= 0");
  }
  const std::int64_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h + 2 * pad < kernel || w + 2 * pad < kernel) {
    throw std::invalid_argument("unfold: kernel larger than padded input");
  }
  const std::int64_t ho = conv_out_dim(h, kernel, stride, pad);
  const std::int64_t wo = conv_out_dim(w, kernel, stride, pad);
  Tensor out({c * kernel * kernel, ho * wo});
  const std::int64_t cols = ho * wo;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t ki = 0; ki < kernel; ++ki) {
      for (std::int64_t kj = 0; kj < kernel; ++kj) {
        const std::int64_t row = (ch * kernel + ki) * kernel + kj;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + ki - pad;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride + kj - pad;
            double v = 0.0;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
              v = input[(ch * h + iy) * w + ix];
            }
            out[row * cols + oy * wo + ox] = v;
          }
        }
      }
    }
  }
  return out;
}

// Adjoint of unfold: scatter-add patch columns back onto a [C,H,W] image.
inline Tensor fold(const Tensor& cols_mat, std::int64_t c, std::int64_t h, std::int64_t w,
                   std::int64_t kernel, std::int64_t stride, std::int64_t pad) {
  const std::int64_t ho = conv_out_dim(h, kernel, stride, pad);
  const std::int64_t wo = conv_out_dim(w, kernel, stride, pad);
  if (cols_mat.rank() != 2 || cols_mat.dim(0) != c * kernel * kernel ||
      cols_mat.dim(1) != ho * wo) {
    throw std::invalid_argument("fold: shape mismatch");
  }
  Tensor out({c, h, w});
  const std::int64_t cols = ho * wo;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t ki = 0; ki < kernel; ++ki) {
      for (std::int64_t kj = 0; kj < kernel; ++kj) {
        const std::int64_t row = (ch * kernel + ki) * kernel + kj;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride + kj - pad;
            if (ix < 0 || ix >= w) continue;
            out[(ch * h + iy) * w + ix] += cols_mat[row * cols + oy * wo + ox];
          }
        }
      }
    }
  }
  return out;
}

// --- serialization ---------------------------------------------------------
// Binary form: u32 rank, u32 dims..., f64 payload, all little-endian.

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  // this codebase only targets little-endian hosts; assert at compile time
  static_assert(std::endian::native == std::endian::little);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& is, const char* what) {
  T v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw IoError(std::string("truncated input while reading ") + what);
  }
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim(i)));
  }
  for (std::int64_t i = 0; i < t.size(); ++i) detail::write_le<double>(os, t[i]);
}

inline Tensor read_tensor(std::istream& is) {
  const auto rank = detail::read_le<std::uint32_t>(is, "tensor rank");
  if (rank > 8) throw IoError("tensor rank " + std::to_string(rank) + " out of range");
  std::vector<std::int64_t> shape(rank);
  for (auto& d : shape) d = detail::read_le<std::uint32_t>(is, "tensor dim");
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = detail::read_le<double>(is, "tensor payload");
  return t;
}

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape()},
                        {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<std::vector<std::int64_t>>(),
                j.at("values").get<std::vector<double>>());
}

}  // namespace ngvi
