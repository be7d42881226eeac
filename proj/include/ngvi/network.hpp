#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ngvi/errors.hpp"
#include "ngvi/rng.hpp"
#include "ngvi/tensor.hpp"

// Minimal feed-forward network over flat [M x d] feature batches. Spatial
// layers carry their own geometry; between layers all activations travel
// row-major flattened. Gradients come in two independent routes: a standard
// minibatch backward and an exact per-example backward (the input to the
// Gauss-Newton diagonal). Batch normalisation statistics are treated as
// constants during backprop, which is the convention under which the
// per-example mean equals the minibatch gradient.

namespace ngvi {

enum class LayerKind { dense, conv2d, batchnorm, relu, flatten, avgpool };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::avgpool: return "avgpool";
  }
  return "?";
}

// Feature geometry between layers: either flat [d] or spatial [C,H,W].
struct FeatureShape {
  bool spatial = false;
  std::int64_t c = 0, h = 0, w = 0;  // valid when spatial
  std::int64_t d = 0;                // always the flat size

  static FeatureShape flat(std::int64_t d) { return {false, 0, 0, 0, d}; }
  static FeatureShape image(std::int64_t c, std::int64_t h, std::int64_t w) {
    return {true, c, h, w, c * h * w};
  }
  bool operator==(const FeatureShape&) const = default;
};

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::int64_t in = 0, out = 0;                          // dense
  bool bias = true;                                      // dense / conv2d
  std::int64_t c_in = 0, c_out = 0, kernel = 0, stride = 1, pad = 0;  // conv2d
  std::int64_t dim = 0;                                  // batchnorm

  static LayerSpec dense(std::int64_t in, std::int64_t out, bool bias = true) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in = in;
    s.out = out;
    s.bias = bias;
    return s;
  }
  static LayerSpec conv2d(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel,
                          std::int64_t stride = 1, std::int64_t pad = 0, bool bias = true) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.c_in = c_in;
    s.c_out = c_out;
    s.kernel = kernel;
    s.stride = stride;
    s.pad = pad;
    s.bias = bias;
    return s;
  }
  static LayerSpec batchnorm(std::int64_t dim) {
    LayerSpec s;
    s.kind = LayerKind::batchnorm;
    s.dim = dim;
    return s;
  }
  static LayerSpec relu() { return LayerSpec{LayerKind::relu}; }
  static LayerSpec flatten() { return LayerSpec{LayerKind::flatten}; }
  static LayerSpec avgpool() { return LayerSpec{LayerKind::avgpool}; }

  bool has_params() const {
    return kind == LayerKind::dense || kind == LayerKind::conv2d ||
           kind == LayerKind::batchnorm;
  }

  // dense/conv parameters live in one augmented matrix [rows x cols] whose
  // last column is the bias; batchnorm stores [gamma; beta].
  std::int64_t weight_rows() const {
    if (kind == LayerKind::dense) return out;
    if (kind == LayerKind::conv2d) return c_out;
    return 0;
  }
  std::int64_t weight_cols() const {
    if (kind == LayerKind::dense) return in + (bias ? 1 : 0);
    if (kind == LayerKind::conv2d) return c_in * kernel * kernel + (bias ? 1 : 0);
    return 0;
  }
  std::int64_t param_count() const {
    if (kind == LayerKind::batchnorm) return 2 * dim;
    return weight_rows() * weight_cols();
  }

  std::string describe(int index) const {
    return "layer " + std::to_string(index) + " (" + layer_kind_name(kind) + ")";
  }
};

// Shape-chain an input through a layer; throws on any mismatch.
inline FeatureShape chain_shape(const LayerSpec& s, const FeatureShape& in, int index) {
  const std::string where = s.describe(index);
  switch (s.kind) {
    case LayerKind::dense:
      if (in.spatial || in.d != s.in) {
        throw std::invalid_argument(where + ": expects flat input of size " +
                                    std::to_string(s.in) + ", got " + std::to_string(in.d));
      }
      return FeatureShape::flat(s.out);
    case LayerKind::conv2d: {
      if (!in.spatial || in.c != s.c_in) {
        throw std::invalid_argument(where + ": expects image input with " +
                                    std::to_string(s.c_in) + " channels");
      }
      if (in.h + 2 * s.pad < s.kernel || in.w + 2 * s.pad < s.kernel) {
        throw std::invalid_argument(where + ": kernel larger than padded input");
      }
      return FeatureShape::image(s.c_out, conv_out_dim(in.h, s.kernel, s.stride, s.pad),
                                 conv_out_dim(in.w, s.kernel, s.stride, s.pad));
    }
    case LayerKind::batchnorm:
      if (in.spatial || in.d != s.dim) {
        throw std::invalid_argument(where + ": expects flat input of size " +
                                    std::to_string(s.dim));
      }
      return in;
    case LayerKind::relu:
      return in;
    case LayerKind::flatten:
      return FeatureShape::flat(in.d);
    case LayerKind::avgpool:
      if (!in.spatial) throw std::invalid_argument(where + ": expects image input");
      return FeatureShape::flat(in.c);
  }
  throw std::invalid_argument(where + ": unknown layer kind");
}

struct BatchNormBuffers {
  Tensor running_mean;
  Tensor running_var;   // elementwise > 0
  double momentum = 0.1;
};

inline constexpr double kBatchNormEps = 1e-5;

struct NetworkModel {
  std::vector<LayerSpec> layers;
  std::vector<Tensor> params;          // flat per-layer parameter vectors
  std::vector<BatchNormBuffers> bn;    // parallel to layers; empty slots elsewhere
  FeatureShape input_shape;

  std::size_t layer_count() const { return layers.size(); }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
  }

  std::int64_t n_classes() const {
    FeatureShape sh = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      sh = chain_shape(layers[i], sh, static_cast<int>(i));
    }
    return sh.d;
  }

  bool has_batchnorm() const {
    for (const auto& l : layers) {
      if (l.kind == LayerKind::batchnorm) return true;
    }
    return false;
  }
};

// Xavier-normal weight init, zero bias; batchnorm starts at gamma=1, beta=0.
inline NetworkModel build_model(std::vector<LayerSpec> layers, FeatureShape input,
                                RngStream& rng) {
  NetworkModel m;
  m.layers = std::move(layers);
  m.input_shape = input;
  FeatureShape sh = input;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& s = m.layers[i];
    sh = chain_shape(s, sh, static_cast<int>(i));
    Tensor theta({0});  // paramless layers carry an empty rank-1 tensor
    BatchNormBuffers buf;
    if (s.kind == LayerKind::dense || s.kind == LayerKind::conv2d) {
      const std::int64_t rows = s.weight_rows(), cols = s.weight_cols();
      const std::int64_t fan_cols = s.bias ? cols - 1 : cols;
      theta = Tensor({rows * cols});
      const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_cols + rows));
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < fan_cols; ++c) {
          theta[r * cols + c] = std_dev * rng.normal();
        }
        // bias column stays zero
      }
    } else if (s.kind == LayerKind::batchnorm) {
      theta = Tensor({2 * s.dim});
      for (std::int64_t j = 0; j < s.dim; ++j) theta[j] = 1.0;
      buf.running_mean = Tensor({s.dim});
      buf.running_var = Tensor::full({s.dim}, 1.0);
    }
    m.params.push_back(std::move(theta));
    m.bn.push_back(std::move(buf));
  }
  return m;
}

enum class Mode { train, eval };

struct ForwardCache {
  Mode mode = Mode::train;
  std::int64_t batch = 0;
  std::vector<FeatureShape> in_shapes;   // input shape of each layer
  std::vector<Tensor> inputs;            // [M x d_in] per layer
  std::vector<std::vector<Tensor>> unfolded;  // conv: per example [rows x HW] (bias row incl.)
  std::vector<Tensor> bn_norm;           // batchnorm: normalised input [M x d]
  std::vector<Tensor> bn_invstd;         // batchnorm: 1/sqrt(var+eps) [d]
  std::vector<Tensor> bn_mean;           // batch mean [d]
  std::vector<Tensor> bn_var;            // batch variance [d]
  Tensor logits;
};

namespace detail {

// y = x_aug * W^T for augmented weight [rows x cols]; x [M x (cols-bias)]
inline Tensor affine_forward(const Tensor& x, const Tensor& theta, const LayerSpec& s) {
  const std::int64_t m = x.dim(0), rows = s.weight_rows(), cols = s.weight_cols();
  const std::int64_t in = s.bias ? cols - 1 : cols;
  Tensor y({m, rows});
  for (std::int64_t i = 0; i < m; ++i) {
    const double* xi = x.data() + i * in;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* wr = theta.data() + r * cols;
      double acc = s.bias ? wr[in] : 0.0;
      for (std::int64_t c = 0; c < in; ++c) acc += wr[c] * xi[c];
      y[i * rows + r] = acc;
    }
  }
  return y;
}

}  // namespace detail

// Forward pass. Train mode uses batch statistics in batchnorm layers and
// updates the running buffers; eval mode reads the running buffers and leaves
// the model untouched.
inline std::pair<Tensor, ForwardCache> forward(NetworkModel& model, const Tensor& batch,
                                               Mode mode) {
  if (batch.rank() != 2 || batch.dim(1) != model.input_shape.d) {
    throw std::invalid_argument("forward: batch must be [M x " +
                                std::to_string(model.input_shape.d) + "], got " +
                                batch.shape_string());
  }
  const std::int64_t m = batch.dim(0);
  if (m < 1) throw std::invalid_argument("forward: empty batch");

  ForwardCache cache;
  cache.mode = mode;
  cache.batch = m;
  cache.inputs.resize(model.layer_count());
  cache.in_shapes.resize(model.layer_count());
  cache.unfolded.resize(model.layer_count());
  cache.bn_norm.resize(model.layer_count());
  cache.bn_invstd.resize(model.layer_count());
  cache.bn_mean.resize(model.layer_count());
  cache.bn_var.resize(model.layer_count());

  Tensor x = batch;
  FeatureShape sh = model.input_shape;
  for (std::size_t li = 0; li < model.layer_count(); ++li) {
    const LayerSpec& s = model.layers[li];
    cache.inputs[li] = x;
    cache.in_shapes[li] = sh;
    const FeatureShape out_sh = chain_shape(s, sh, static_cast<int>(li));
    switch (s.kind) {
      case LayerKind::dense: {
        x = detail::affine_forward(x, model.params[li], s);
        break;
      }
      case LayerKind::conv2d: {
        const std::int64_t rows = s.weight_cols();  // unfold rows + bias row
        const std::int64_t hw = out_sh.h * out_sh.w;
        const Tensor w = model.params[li].reshaped({s.c_out, rows});
        Tensor y({m, out_sh.d});
        auto& unf = cache.unfolded[li];
        unf.reserve(static_cast<std::size_t>(m));
        for (std::int64_t i = 0; i < m; ++i) {
          Tensor img({sh.c, sh.h, sh.w},
                     std::vector<double>(x.data() + i * sh.d, x.data() + (i + 1) * sh.d));
          Tensor ma = unfold(img, s.kernel, s.stride, s.pad);
          if (s.bias) {
            Tensor aug({rows, hw});
            std::copy(ma.values().begin(), ma.values().end(), aug.values().begin());
            for (std::int64_t j = 0; j < hw; ++j) aug[(rows - 1) * hw + j] = 1.0;
            ma = std::move(aug);
          }
          const Tensor ms = matmul(w, ma);
          std::copy(ms.values().begin(), ms.values().end(), y.data() + i * out_sh.d);
          unf.push_back(std::move(ma));
        }
        x = std::move(y);
        break;
      }
      case LayerKind::batchnorm: {
        const std::int64_t d = s.dim;
        const Tensor& theta = model.params[li];
        Tensor mean({d}), var({d});
        if (mode == Mode::train) {
          if (m < 2) {
            throw std::invalid_argument(s.describe(static_cast<int>(li)) +
                                        ": train-mode batchnorm needs batch size >= 2");
          }
          for (std::int64_t j = 0; j < d; ++j) {
            double mu = 0.0;
            for (std::int64_t i = 0; i < m; ++i) mu += x[i * d + j];
            mu /= static_cast<double>(m);
            double v = 0.0;
            for (std::int64_t i = 0; i < m; ++i) {
              const double c = x[i * d + j] - mu;
              v += c * c;
            }
            v /= static_cast<double>(m);
            mean[j] = mu;
            var[j] = v;
          }
          auto& buf = model.bn[li];
          for (std::int64_t j = 0; j < d; ++j) {
            buf.running_mean[j] = (1.0 - buf.momentum) * buf.running_mean[j] + buf.momentum * mean[j];
            buf.running_var[j] = (1.0 - buf.momentum) * buf.running_var[j] + buf.momentum * var[j];
          }
        } else {
          mean = model.bn[li].running_mean;
          var = model.bn[li].running_var;
        }
        Tensor invstd({d});
        for (std::int64_t j = 0; j < d; ++j) invstd[j] = 1.0 / std::sqrt(var[j] + kBatchNormEps);
        Tensor norm({m, d}), y({m, d});
        for (std::int64_t i = 0; i < m; ++i) {
          for (std::int64_t j = 0; j < d; ++j) {
            const double a_hat = (x[i * d + j] - mean[j]) * invstd[j];
            norm[i * d + j] = a_hat;
            y[i * d + j] = theta[j] * a_hat + theta[d + j];
          }
        }
        cache.bn_norm[li] = std::move(norm);
        cache.bn_invstd[li] = std::move(invstd);
        cache.bn_mean[li] = std::move(mean);
        cache.bn_var[li] = std::move(var);
        x = std::move(y);
        break;
      }
      case LayerKind::relu: {
        for (auto& v : x.values()) v = v > 0.0 ? v : 0.0;
        break;
      }
      case LayerKind::flatten:
        break;  // layout is already flat row-major
      case LayerKind::avgpool: {
        const std::int64_t hw = sh.h * sh.w;
        Tensor y({m, sh.c});
        for (std::int64_t i = 0; i < m; ++i) {
          for (std::int64_t c = 0; c < sh.c; ++c) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < hw; ++j) acc += x[i * sh.d + c * hw + j];
            y[i * sh.c + c] = acc / static_cast<double>(hw);
          }
        }
        x = std::move(y);
        break;
      }
    }
    sh = out_sh;
  }
  cache.logits = x;
  check_finite(x, "forward: logits");
  return {std::move(x), std::move(cache)};
}

// Softmax cross-entropy over class indices. Returns the mean NLL and the
// gradient (softmax - onehot)/M of the mean loss w.r.t. the logits.
inline std::pair<double, Tensor> loss_and_grad(const Tensor& logits,
                                               const std::vector<int>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("loss_and_grad: logits must be [M x K]");
  const std::int64_t m = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != m) {
    throw std::invalid_argument("loss_and_grad: label count mismatch");
  }
  check_finite(logits, "loss_and_grad: logits");
  Tensor dlogits({m, k});
  double nll = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) {
      throw std::invalid_argument("loss_and_grad: label " + std::to_string(y) +
                                  " out of range for K=" + std::to_string(k));
    }
    const double* zi = logits.data() + i * k;
    double zmax = zi[0];
    for (std::int64_t j = 1; j < k; ++j) zmax = std::max(zmax, zi[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < k; ++j) denom += std::exp(zi[j] - zmax);
    const double log_denom = std::log(denom);
    nll += log_denom - (zi[y] - zmax);
    for (std::int64_t j = 0; j < k; ++j) {
      const double p = std::exp(zi[j] - zmax) / denom;
      dlogits[i * k + j] = (p - (j == y ? 1.0 : 0.0)) / static_cast<double>(m);
    }
  }
  return {nll / static_cast<double>(m), std::move(dlogits)};
}

inline Tensor softmax_rows(const Tensor& logits) {
  const std::int64_t m = logits.dim(0), k = logits.dim(1);
  Tensor out({m, k});
  for (std::int64_t i = 0; i < m; ++i) {
    const double* zi = logits.data() + i * k;
    double zmax = zi[0];
    for (std::int64_t j = 1; j < k; ++j) zmax = std::max(zmax, zi[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < k; ++j) denom += std::exp(zi[j] - zmax);
    for (std::int64_t j = 0; j < k; ++j) out[i * k + j] = std::exp(zi[j] - zmax) / denom;
  }
  return out;
}

// Per-layer gradients for each example: tensor [M x param_count(layer)].
// Rows are gradients of the example's own (unscaled) loss, so their mean
// recovers the minibatch gradient of the mean loss.
struct PerExampleGrads {
  std::vector<Tensor> per_layer;
  std::int64_t batch = 0;
};

namespace detail {

inline void check_cache(const NetworkModel& model, const ForwardCache& cache,
                        const Tensor& dlogits) {
  if (cache.inputs.size() != model.layer_count()) {
    throw std::invalid_argument("backward: cache does not match model");
  }
  if (dlogits.rank() != 2 || dlogits.dim(0) != cache.batch) {
    throw std::invalid_argument("backward: dlogits batch mismatch");
  }
}

// Propagate an upstream gradient [M x d_out] through one layer, producing the
// gradient w.r.t. the layer input. Shared by both backward routes; the two
// routes differ in how parameter gradients are accumulated.
inline Tensor propagate_input_grad(const NetworkModel& model, const ForwardCache& cache,
                                   std::size_t li, const Tensor& upstream) {
  const LayerSpec& s = model.layers[li];
  const FeatureShape in_sh = cache.in_shapes[li];
  const std::int64_t m = cache.batch;
  switch (s.kind) {
    case LayerKind::dense: {
      const std::int64_t rows = s.weight_rows(), cols = s.weight_cols();
      const std::int64_t in = s.bias ? cols - 1 : cols;
      const Tensor& theta = model.params[li];
      Tensor dx({m, in});
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t r = 0; r < rows; ++r) {
          const double g = upstream[i * rows + r];
          if (g == 0.0) continue;
          const double* wr = theta.data() + r * cols;
          for (std::int64_t c = 0; c < in; ++c) dx[i * in + c] += g * wr[c];
        }
      }
      return dx;
    }
    case LayerKind::conv2d: {
      const std::int64_t rows = s.weight_cols();
      const std::int64_t patch_rows = s.c_in * s.kernel * s.kernel;
      const FeatureShape out_sh = chain_shape(s, in_sh, static_cast<int>(li));
      const std::int64_t hw = out_sh.h * out_sh.w;
      const Tensor w = model.params[li].reshaped({s.c_out, rows});
      Tensor dx({m, in_sh.d});
      for (std::int64_t i = 0; i < m; ++i) {
        Tensor g({s.c_out, hw},
                 std::vector<double>(upstream.data() + i * out_sh.d,
                                     upstream.data() + (i + 1) * out_sh.d));
        // d(M_A) = W_w^T * G, excluding the bias row
        Tensor dma({patch_rows, hw});
        for (std::int64_t r = 0; r < s.c_out; ++r) {
          for (std::int64_t p = 0; p < patch_rows; ++p) {
            const double wv = w[r * rows + p];
            if (wv == 0.0) continue;
            for (std::int64_t j = 0; j < hw; ++j) dma[p * hw + j] += wv * g[r * hw + j];
          }
        }
        const Tensor dimg = fold(dma, in_sh.c, in_sh.h, in_sh.w, s.kernel, s.stride, s.pad);
        std::copy(dimg.values().begin(), dimg.values().end(), dx.data() + i * in_sh.d);
      }
      return dx;
    }
    case LayerKind::batchnorm: {
      // statistics treated as constants: dx = g * gamma * invstd
      const std::int64_t d = s.dim;
      const Tensor& theta = model.params[li];
      const Tensor& invstd = cache.bn_invstd[li];
      Tensor dx({m, d});
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < d; ++j) {
          dx[i * d + j] = upstream[i * d + j] * theta[j] * invstd[j];
        }
      }
      return dx;
    }
    case LayerKind::relu: {
      const Tensor& x = cache.inputs[li];
      Tensor dx = upstream;
      for (std::int64_t i = 0; i < dx.size(); ++i) {
        if (x[i] <= 0.0) dx[i] = 0.0;
      }
      return dx;
    }
    case LayerKind::flatten:
      return upstream;
    case LayerKind::avgpool: {
      const std::int64_t hw = in_sh.h * in_sh.w;
      Tensor dx({m, in_sh.d});
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t c = 0; c < in_sh.c; ++c) {
          const double g = upstream[i * in_sh.c + c] / static_cast<double>(hw);
          for (std::int64_t j = 0; j < hw; ++j) dx[i * in_sh.d + c * hw + j] = g;
        }
      }
      return dx;
    }
  }
  throw std::invalid_argument("backward: unknown layer kind");
}

}  // namespace detail

// Standard minibatch backward: per-layer gradients of the mean loss,
// accumulated in matrix form (no per-example materialisation).
inline std::vector<Tensor> backward(const NetworkModel& model, const ForwardCache& cache,
                                    const Tensor& dlogits) {
  detail::check_cache(model, cache, dlogits);
  const std::int64_t m = cache.batch;
  std::vector<Tensor> grads(model.layer_count());
  Tensor up = dlogits;
  for (std::size_t li_plus = model.layer_count(); li_plus > 0; --li_plus) {
    const std::size_t li = li_plus - 1;
    const LayerSpec& s = model.layers[li];
    switch (s.kind) {
      case LayerKind::dense: {
        const std::int64_t rows = s.weight_rows(), cols = s.weight_cols();
        const std::int64_t in = cols - (s.bias ? 1 : 0);
        const Tensor& x = cache.inputs[li];
        Tensor g({rows * cols});
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t c = 0; c < in; ++c) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < m; ++i) acc += up[i * rows + r] * x[i * in + c];
            g[r * cols + c] = acc;
          }
          if (s.bias) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < m; ++i) acc += up[i * rows + r];
            g[r * cols + in] = acc;
          }
        }
        grads[li] = std::move(g);
        break;
      }
      case LayerKind::conv2d: {
        const std::int64_t rows = s.weight_cols();
        const FeatureShape out_sh = chain_shape(s, cache.in_shapes[li], static_cast<int>(li));
        const std::int64_t hw = out_sh.h * out_sh.w;
        Tensor g({s.c_out * rows});
        for (std::int64_t i = 0; i < m; ++i) {
          const Tensor& ma = cache.unfolded[li][static_cast<std::size_t>(i)];
          for (std::int64_t r = 0; r < s.c_out; ++r) {
            for (std::int64_t p = 0; p < rows; ++p) {
              double acc = 0.0;
              for (std::int64_t j = 0; j < hw; ++j) {
                acc += up[i * out_sh.d + r * hw + j] * ma[p * hw + j];
              }
              g[r * rows + p] += acc;
            }
          }
        }
        grads[li] = std::move(g);
        break;
      }
      case LayerKind::batchnorm: {
        const std::int64_t d = s.dim;
        const Tensor& norm = cache.bn_norm[li];
        Tensor g({2 * d});
        for (std::int64_t j = 0; j < d; ++j) {
          double dg = 0.0, db = 0.0;
          for (std::int64_t i = 0; i < m; ++i) {
            dg += up[i * d + j] * norm[i * d + j];
            db += up[i * d + j];
          }
          g[j] = dg;
          g[d + j] = db;
        }
        grads[li] = std::move(g);
        break;
      }
      default:
        grads[li] = Tensor({0});
        break;
    }
    if (li > 0) up = detail::propagate_input_grad(model, cache, li, up);
  }
  return grads;
}

// Exact per-example gradients (each row is the gradient of that example's own
// loss). dlogits is the mean-loss gradient from loss_and_grad; rows are
// rescaled by M internally.
inline PerExampleGrads backward_per_example(const NetworkModel& model,
                                            const ForwardCache& cache,
                                            const Tensor& dlogits) {
  detail::check_cache(model, cache, dlogits);
  const std::int64_t m = cache.batch;
  PerExampleGrads out;
  out.batch = m;
  out.per_layer.resize(model.layer_count());

  Tensor up = dlogits * static_cast<double>(m);  // rows now d(loss_i)/dlogits_i
  for (std::size_t li_plus = model.layer_count(); li_plus > 0; --li_plus) {
    const std::size_t li = li_plus - 1;
    const LayerSpec& s = model.layers[li];
    switch (s.kind) {
      case LayerKind::dense: {
        const std::int64_t rows = s.weight_rows(), cols = s.weight_cols();
        const std::int64_t in = cols - (s.bias ? 1 : 0);
        const Tensor& x = cache.inputs[li];
        Tensor g({m, rows * cols});
        for (std::int64_t i = 0; i < m; ++i) {
          for (std::int64_t r = 0; r < rows; ++r) {
            const double gr = up[i * rows + r];
            double* row = g.data() + i * rows * cols + r * cols;
            for (std::int64_t c = 0; c < in; ++c) row[c] = gr * x[i * in + c];
            if (s.bias) row[in] = gr;
          }
        }
        out.per_layer[li] = std::move(g);
        break;
      }
      case LayerKind::conv2d: {
        const std::int64_t rows = s.weight_cols();
        const FeatureShape out_sh = chain_shape(s, cache.in_shapes[li], static_cast<int>(li));
        const std::int64_t hw = out_sh.h * out_sh.w;
        Tensor g({m, s.c_out * rows});
        for (std::int64_t i = 0; i < m; ++i) {
          const Tensor& ma = cache.unfolded[li][static_cast<std::size_t>(i)];
          double* row = g.data() + i * s.c_out * rows;
          for (std::int64_t r = 0; r < s.c_out; ++r) {
            for (std::int64_t p = 0; p < rows; ++p) {
              double acc = 0.0;
              for (std::int64_t j = 0; j < hw; ++j) {
                acc += up[i * out_sh.d + r * hw + j] * ma[p * hw + j];
              }
              row[r * rows + p] = acc;
            }
          }
        }
        out.per_layer[li] = std::move(g);
        break;
      }
      case LayerKind::batchnorm: {
        const std::int64_t d = s.dim;
        const Tensor& norm = cache.bn_norm[li];
        Tensor g({m, 2 * d});
        for (std::int64_t i = 0; i < m; ++i) {
          for (std::int64_t j = 0; j < d; ++j) {
            g[i * 2 * d + j] = up[i * d + j] * norm[i * d + j];
            g[i * 2 * d + d + j] = up[i * d + j];
          }
        }
        out.per_layer[li] = std::move(g);
        break;
      }
      default:
        out.per_layer[li] = Tensor({m, 0});
        break;
    }
    if (li > 0) up = detail::propagate_input_grad(model, cache, li, up);
  }
  return out;
}

// Gauss-Newton diagonal: square per-example gradients first, then average.
// This is the "sum outside the square" estimate, as opposed to squaring the
// averaged gradient.
inline std::vector<Tensor> gauss_newton_diag(const PerExampleGrads& grads) {
  if (grads.batch < 1) throw std::invalid_argument("gauss_newton_diag: empty batch");
  std::vector<Tensor> h;
  h.reserve(grads.per_layer.size());
  for (const Tensor& g : grads.per_layer) {
    const std::int64_t m = g.dim(0), n = g.dim(1);
    Tensor hl({n});
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        const double v = g[i * n + j];
        hl[j] += v * v;
      }
    }
    hl *= 1.0 / static_cast<double>(m);
    h.push_back(std::move(hl));
  }
  return h;
}

// Minibatch outer-product statistics of one dense layer: the input factor
// E[a a^T] (bias-augmented), the pre-activation-gradient factor E[g g^T],
// and the mean weight gradient. Used by the Kronecker-factored update.
struct LayerOuterStats {
  Tensor a_outer;
  Tensor s_outer;
  Tensor mean_grad;
  bool present = false;
};

inline std::vector<LayerOuterStats> layer_outer_stats(const NetworkModel& model,
                                                      const ForwardCache& cache,
                                                      const Tensor& dlogits) {
  detail::check_cache(model, cache, dlogits);
  const std::int64_t m = cache.batch;
  std::vector<LayerOuterStats> out(model.layer_count());
  Tensor up = dlogits * static_cast<double>(m);  // rows are per-example loss grads
  for (std::size_t li_plus = model.layer_count(); li_plus > 0; --li_plus) {
    const std::size_t li = li_plus - 1;
    const LayerSpec& s = model.layers[li];
    if (s.kind == LayerKind::dense) {
      const std::int64_t rows = s.weight_rows(), cols = s.weight_cols();
      const std::int64_t in = cols - (s.bias ? 1 : 0);
      const Tensor& x = cache.inputs[li];
      LayerOuterStats& st = out[li];
      st.present = true;
      st.a_outer = Tensor({cols, cols});
      st.s_outer = Tensor({rows, rows});
      st.mean_grad = Tensor({rows * cols});
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::int64_t i = 0; i < m; ++i) {
        std::vector<double> a(static_cast<std::size_t>(cols), 1.0);  // bias slot stays 1
        for (std::int64_t c = 0; c < in; ++c) a[static_cast<std::size_t>(c)] = x[i * in + c];
        for (std::int64_t p = 0; p < cols; ++p) {
          for (std::int64_t q = 0; q < cols; ++q) {
            st.a_outer[p * cols + q] +=
                inv_m * a[static_cast<std::size_t>(p)] * a[static_cast<std::size_t>(q)];
          }
        }
        for (std::int64_t r = 0; r < rows; ++r) {
          const double gr = up[i * rows + r];
          for (std::int64_t r2 = 0; r2 < rows; ++r2) {
            st.s_outer[r * rows + r2] += inv_m * gr * up[i * rows + r2];
          }
          for (std::int64_t c = 0; c < cols; ++c) {
            st.mean_grad[r * cols + c] += inv_m * gr * a[static_cast<std::size_t>(c)];
          }
        }
      }
    }
    if (li > 0) up = detail::propagate_input_grad(model, cache, li, up);
  }
  return out;
}

// Mean over the example axis, one tensor per layer.
inline std::vector<Tensor> mean_grads(const PerExampleGrads& grads) {
  std::vector<Tensor> out;
  out.reserve(grads.per_layer.size());
  for (const Tensor& g : grads.per_layer) {
    const std::int64_t m = g.dim(0), n = g.dim(1);
    Tensor gl({n});
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) gl[j] += g[i * n + j];
    }
    gl *= 1.0 / static_cast<double>(m);
    out.push_back(std::move(gl));
  }
  return out;
}

}  // namespace ngvi
