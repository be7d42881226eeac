#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "ngvi/errors.hpp"
#include "ngvi/linalg.hpp"
#include "ngvi/network.hpp"
#include "ngvi/optimizers.hpp"
#include "ngvi/rng.hpp"
#include "ngvi/tensor.hpp"

namespace ngvi {

// Diagonal Gaussian over the weights. sigma^2 = 1/(N(s + dt + gamma)) is
// always derived on demand, never stored. Batchnorm parameters are point
// estimates: their layers are flagged not-sampled and draws return the mean.
struct GaussianPosterior {
  std::vector<Tensor> mu;       // per layer
  std::vector<Tensor> s;        // per layer scale, elementwise >= 0
  std::vector<bool> sampled;    // false => layer is a point estimate
  double delta_tilde = 0.0;
  double gamma = 0.0;
  double n = 1.0;
  // per-parameter prior precision (continual learning); empty = isotropic
  std::vector<Tensor> prior_prec;

  Tensor sigma2(std::size_t li) const {
    const Tensor& sl = s[li];
    Tensor out({sl.size()});
    for (std::int64_t j = 0; j < sl.size(); ++j) {
      const double prec_term =
          prior_prec.empty() ? delta_tilde : prior_prec[li][j] / n;
      const double v = 1.0 / (n * (sl[j] + prec_term + gamma));
      if (!(v > 0.0) || !std::isfinite(v)) {
        throw NumericError("posterior: sigma^2 not positive and finite");
      }
      out[j] = v;
    }
    return out;
  }

  Tensor sigma(std::size_t li) const {
    Tensor out = sigma2(li);
    for (auto& v : out.values()) v = std::sqrt(v);
    return out;
  }
};

inline GaussianPosterior make_posterior(const NetworkModel& model, const OptimizerState& st,
                                        const Hyperparams& hp,
                                        const PriorOverride* prior = nullptr) {
  GaussianPosterior post;
  post.mu = model.params;
  post.s = st.s;
  post.delta_tilde = st.delta_tilde;
  post.gamma = hp.gamma;
  post.n = st.n_eff;
  post.sampled.reserve(model.layer_count());
  for (const auto& l : model.layers) {
    post.sampled.push_back(l.kind == LayerKind::dense || l.kind == LayerKind::conv2d);
  }
  if (prior != nullptr) post.prior_prec = prior->p0;
  return post;
}

// One draw of the full weight set: w = mu + eps*sigma per sampled layer,
// mu for point-estimated layers.
inline std::vector<Tensor> sample_weights(const GaussianPosterior& post, RngStream& rng) {
  std::vector<Tensor> out;
  out.reserve(post.mu.size());
  for (std::size_t li = 0; li < post.mu.size(); ++li) {
    if (post.mu[li].size() == 0 || !post.sampled[li]) {
      out.push_back(post.mu[li]);
      continue;
    }
    out.push_back(gaussian_sample(post.mu[li], post.sigma(li), rng));
  }
  return out;
}

// Matrix-variate Gaussian over one dense layer's weight [rows x cols]:
// row covariance Sigma1 = (S^gamma)^-1, column covariance
// Sigma2 = N/tau * (A^gamma)^-1, draw W = M + Sigma1^{1/2} E Sigma2^{1/2}.
struct KroneckerLayer {
  Tensor mean;        // [rows x cols]
  Tensor sigma1_half; // [rows x rows]
  Tensor sigma2_half; // [cols x cols]
};

struct KroneckerPosterior {
  // slot per layer; only dense layers carry a matrix-variate factor
  std::vector<std::optional<KroneckerLayer>> layers;
  std::vector<Tensor> mu;  // point fallback for the remaining layers
};

inline KroneckerPosterior make_kronecker_posterior(const NetworkModel& model,
                                                   const OptimizerState& st,
                                                   const Hyperparams& hp) {
  KroneckerPosterior post;
  post.mu = model.params;
  post.layers.resize(model.layer_count());
  for (std::size_t li = 0; li < model.layer_count(); ++li) {
    const LayerSpec& spec = model.layers[li];
    if (spec.kind != LayerKind::dense || !st.kfac[li].initialized) continue;
    auto [a_damped, s_damped] = kfac_damped_factors(st.kfac[li], hp.gamma);
    // both precision factors must be symmetric positive definite
    Tensor sigma1 = linalg::spd_inverse(s_damped);
    Tensor sigma2 = linalg::spd_inverse(a_damped) * (st.n_eff / st.tau_t);
    KroneckerLayer kl;
    kl.mean = model.params[li].reshaped({spec.weight_rows(), spec.weight_cols()});
    kl.sigma1_half = linalg::sym_sqrt(sigma1);
    kl.sigma2_half = linalg::sym_sqrt(sigma2);
    post.layers[li] = std::move(kl);
  }
  return post;
}

inline std::vector<Tensor> sample_weights(const KroneckerPosterior& post, RngStream& rng) {
  std::vector<Tensor> out;
  out.reserve(post.mu.size());
  for (std::size_t li = 0; li < post.mu.size(); ++li) {
    if (!post.layers[li].has_value()) {
      out.push_back(post.mu[li]);
      continue;
    }
    const KroneckerLayer& kl = *post.layers[li];
    const std::int64_t rows = kl.mean.dim(0), cols = kl.mean.dim(1);
    Tensor e({rows, cols});
    for (auto& v : e.values()) v = rng.normal();
    Tensor w = kl.mean + matmul(kl.sigma1_half, matmul(e, kl.sigma2_half));
    out.push_back(w.reshaped({rows * cols}));
  }
  return out;
}

// Tagged posterior handle used by prediction and evaluation.
struct Posterior {
  enum class Kind { point, diagonal, kronecker };
  Kind kind = Kind::point;
  GaussianPosterior diag;
  KroneckerPosterior kron;
  std::vector<Tensor> point_params;

  static Posterior point(const NetworkModel& model) {
    Posterior p;
    p.kind = Kind::point;
    p.point_params = model.params;
    return p;
  }
  static Posterior diagonal(GaussianPosterior g) {
    Posterior p;
    p.kind = Kind::diagonal;
    p.diag = std::move(g);
    return p;
  }
  static Posterior kronecker(KroneckerPosterior k) {
    Posterior p;
    p.kind = Kind::kronecker;
    p.kron = std::move(k);
    return p;
  }

  std::vector<Tensor> sample(RngStream& rng) const {
    switch (kind) {
      case Kind::point: return point_params;
      case Kind::diagonal: return sample_weights(diag, rng);
      case Kind::kronecker: return sample_weights(kron, rng);
    }
    return point_params;
  }

  // Parameters at the posterior mean, no sampling.
  std::vector<Tensor> point_view() const {
    switch (kind) {
      case Kind::point: return point_params;
      case Kind::diagonal: return diag.mu;
      case Kind::kronecker: return kron.mu;
    }
    return point_params;
  }
};

// Monte-Carlo predictive probabilities: the average of per-sample softmax
// outputs (not the softmax of averaged logits). Each sample c draws from its
// own derived stream, so results do not depend on how samples are scheduled.
inline Tensor predict_mc(const NetworkModel& model, const Posterior& post, const Tensor& inputs,
                         int mc_samples, std::uint64_t seed, std::uint64_t stream_base) {
  if (mc_samples < 1) throw std::invalid_argument("predict_mc: mc_samples must be >= 1");
  NetworkModel scratch = model;
  const std::int64_t m = inputs.dim(0);
  Tensor acc({m, model.n_classes()});
  for (int c = 0; c < mc_samples; ++c) {
    RngStream rng(seed, derive_stream({stream_base, static_cast<std::uint64_t>(c)}));
    scratch.params = post.sample(rng);
    auto [logits, cache] = forward(scratch, inputs, Mode::eval);
    (void)cache;
    acc += softmax_rows(logits);
  }
  acc *= 1.0 / static_cast<double>(mc_samples);
  return acc;
}

// Closed-form KL between the diagonal posterior and the isotropic prior
// N(0, I/delta), summed over sampled parameters.
inline double kl_to_isotropic_prior(const GaussianPosterior& post, double delta) {
  if (!(delta > 0.0)) throw ConfigError("elbo: prior precision delta must be > 0");
  double kl = 0.0;
  for (std::size_t li = 0; li < post.mu.size(); ++li) {
    if (!post.sampled[li] || post.mu[li].size() == 0) continue;
    const Tensor var = post.sigma2(li);
    const Tensor& mu = post.mu[li];
    for (std::int64_t j = 0; j < mu.size(); ++j) {
      kl += 0.5 * (delta * (mu[j] * mu[j] + var[j]) - 1.0 - std::log(delta * var[j]));
    }
  }
  return kl;
}

// ELBO diagnostic: -N E_q[mean loss] - tau KL(q || p), with the expectation
// estimated from mc_samples posterior draws on the given data subset.
inline double elbo_diagnostic(const NetworkModel& model, const GaussianPosterior& post,
                              const Tensor& inputs, const std::vector<int>& labels,
                              double delta, double tau, int mc_samples, std::uint64_t seed) {
  if (mc_samples < 1) throw std::invalid_argument("elbo: mc_samples must be >= 1");
  const double kl = kl_to_isotropic_prior(post, delta);
  NetworkModel scratch = model;
  double loss_acc = 0.0;
  for (int c = 0; c < mc_samples; ++c) {
    RngStream rng(seed, derive_stream({stream_tag("elbo"), static_cast<std::uint64_t>(c)}));
    scratch.params = sample_weights(post, rng);
    auto [logits, cache] = forward(scratch, inputs, Mode::eval);
    (void)cache;
    auto [nll, dlogits] = loss_and_grad(logits, labels);
    (void)dlogits;
    loss_acc += nll;
  }
  const double expected_loss = loss_acc / static_cast<double>(mc_samples);
  return -post.n * expected_loss - tau * kl;
}

}  // namespace ngvi
