#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ngvi/errors.hpp"
#include "ngvi/linalg.hpp"
#include "ngvi/network.hpp"
#include "ngvi/tensor.hpp"

// The optimizer family. All diagonal updates are elementwise and layer-wise
// (blocks are independent). Momentum follows the paper form m <- b1*m + (...)
// with no (1-b1) factor and no bias correction; a textbook Adam variant is
// available behind `standard_adam` for comparison runs only.
//
// Batch-normalisation parameters are point estimates throughout: they take
// the deterministic step with no prior-gradient / L2 / weight-decay term and
// are never sampled.

namespace ngvi {

struct Hyperparams {
  double alpha = 1e-3;          // learning rate
  double alpha_init = 0.0;      // warm-up start; active when warmup_epochs > 0
  int warmup_epochs = 0;
  double beta1 = 0.9;           // momentum rate
  double beta2 = 0.999;         // moving-average rate
  double delta = 1.0;           // prior precision (VI family)
  double gamma = 0.0;           // external damping
  double tau = 1.0;             // tempering target
  double tau_init = 1.0;        // tempering warm-up start
  int tau_warmup_epochs = 0;
  int train_mc_samples = 1;     // K, per worker
  double rho = 1.0;             // data augmentation factor
  double eps = 1e-8;            // Adam stability constant
  double l2 = 0.0;              // L2 coefficient (adds l2*w into the gradient)
  double weight_decay = 0.0;    // decoupled multiplicative shrink
  std::vector<int> decay_epochs;
  double decay_factor = 10.0;
  bool standard_adam = false;

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("hyperparams: alpha must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("hyperparams: beta1 must be in [0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("hyperparams: beta2 must be in (0,1)");
    if (!(delta >= 0.0)) throw ConfigError("hyperparams: delta must be >= 0");
    if (!(gamma >= 0.0)) throw ConfigError("hyperparams: gamma must be >= 0");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("hyperparams: tau must be in (0,1]");
    if (!(tau_init > 0.0 && tau_init <= 1.0)) {
      throw ConfigError("hyperparams: tau_init must be in (0,1]");
    }
    if (train_mc_samples < 1) throw ConfigError("hyperparams: train_mc_samples must be >= 1");
    if (!(rho >= 1.0)) throw ConfigError("hyperparams: rho must be >= 1");
    if (!(eps > 0.0)) throw ConfigError("hyperparams: eps must be > 0");
    if (!(l2 >= 0.0) || !(weight_decay >= 0.0)) {
      throw ConfigError("hyperparams: l2/weight_decay must be >= 0");
    }
    if (!(decay_factor > 0.0)) throw ConfigError("hyperparams: decay_factor must be > 0");
    if (warmup_epochs < 0 || tau_warmup_epochs < 0) {
      throw ConfigError("hyperparams: warm-up epoch counts must be >= 0");
    }
  }
};

// Learning-rate and tempering schedule at a given epoch.
struct ScheduledRates {
  double alpha = 0.0;
  double tau = 1.0;
};

inline ScheduledRates schedule_step(int epoch, const Hyperparams& hp) {
  ScheduledRates r;
  double a = hp.alpha;
  if (hp.warmup_epochs > 0 && epoch < hp.warmup_epochs) {
    const double f = static_cast<double>(epoch) / static_cast<double>(hp.warmup_epochs);
    a = hp.alpha_init + (hp.alpha - hp.alpha_init) * f;
  }
  for (int d : hp.decay_epochs) {
    if (epoch >= d) a /= hp.decay_factor;
  }
  r.alpha = a;
  double t = hp.tau;
  if (hp.tau_warmup_epochs > 0 && epoch < hp.tau_warmup_epochs) {
    const double f = static_cast<double>(epoch) / static_cast<double>(hp.tau_warmup_epochs);
    t = hp.tau_init + (hp.tau - hp.tau_init) * f;
  }
  r.tau = t;
  return r;
}

// Per-parameter prior (continual learning). When present it replaces the
// isotropic delta-tilde: the prior-gradient term becomes p0*(mu-mu0)/N and the
// denominator/decay term becomes p0/N.
struct PriorOverride {
  std::vector<Tensor> mu0;  // per layer
  std::vector<Tensor> p0;   // per layer, elementwise > 0
};

// Kronecker factors of one dense layer (noisy K-FAC).
struct KfacFactors {
  Tensor a;  // input factor  E[a a^T], bias-augmented, [cols x cols]
  Tensor s;  // output factor E[g g^T], [rows x rows]
  bool initialized = false;
};

struct OptimizerState {
  std::vector<Tensor> m;  // momentum per layer
  std::vector<Tensor> s;  // scale per layer, elementwise >= 0
  std::vector<KfacFactors> kfac;  // per layer, dense layers only
  long step = 0;
  double n_eff = 1.0;         // rho * N_orig
  double delta_tilde = 0.0;   // tau * delta / N, refreshed with the schedule
  double tau_t = 1.0;
  double alpha_t = 0.0;

  void refresh_schedule(const Hyperparams& hp, int epoch) {
    const ScheduledRates r = schedule_step(epoch, hp);
    alpha_t = r.alpha;
    tau_t = r.tau;
    delta_tilde = r.tau * hp.delta / n_eff;
  }
};

inline OptimizerState init_optimizer_state(const NetworkModel& model, const Hyperparams& hp,
                                           double n_orig) {
  OptimizerState st;
  st.n_eff = hp.rho * n_orig;
  st.m.reserve(model.layer_count());
  st.s.reserve(model.layer_count());
  st.kfac.resize(model.layer_count());
  for (const auto& l : model.layers) {
    st.m.emplace_back(Tensor({l.param_count()}));
    st.s.emplace_back(Tensor({l.param_count()}));
  }
  st.refresh_schedule(hp, 0);
  return st;
}

namespace detail {

inline void check_grad_finite(const Tensor& g, const LayerSpec& spec, int li) {
  if (!g.all_finite()) {
    throw NumericError(spec.describe(li) + ": non-finite gradient");
  }
}

}  // namespace detail

// SGD with heavy-ball momentum: m <- b1*m + (g + l2*w); w <- w - a*m, plus an
// optional decoupled weight-decay shrink. Batchnorm layers skip l2/decay.
inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                     OptimizerState& st, const Hyperparams& hp,
                     const std::vector<LayerSpec>& layers) {
  const double a = st.alpha_t;
  for (std::size_t li = 0; li < params.size(); ++li) {
    if (layers[li].param_count() == 0) continue;
    detail::check_grad_finite(grads[li], layers[li], static_cast<int>(li));
    const bool regularized = layers[li].kind != LayerKind::batchnorm;
    Tensor& w = params[li];
    Tensor& m = st.m[li];
    for (std::int64_t j = 0; j < w.size(); ++j) {
      const double g = grads[li][j] + (regularized ? hp.l2 * w[j] : 0.0);
      m[j] = hp.beta1 * m[j] + g;
      w[j] -= a * m[j];
      if (regularized && hp.weight_decay > 0.0) w[j] -= a * hp.weight_decay * w[j];
    }
  }
  ++st.step;
}

// Adam in the paper's form:
//   s <- (1-b2) s + b2 (g + l2 w)^2
//   m <- b1 m + (g + l2 w)
//   w <- w - a m / (sqrt(s) + eps)
// No bias correction; b1 = 0 gives the exact two-line update. The
// standard_adam flag switches to the textbook update (bias-corrected, decay
// rates 1-b1 / 1-b2) for comparison runs.
inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                      OptimizerState& st, const Hyperparams& hp,
                      const std::vector<LayerSpec>& layers) {
  const double a = st.alpha_t;
  const long t = st.step + 1;
  for (std::size_t li = 0; li < params.size(); ++li) {
    if (layers[li].param_count() == 0) continue;
    detail::check_grad_finite(grads[li], layers[li], static_cast<int>(li));
    const bool regularized = layers[li].kind != LayerKind::batchnorm;
    Tensor& w = params[li];
    Tensor& m = st.m[li];
    Tensor& s = st.s[li];
    if (!hp.standard_adam) {
      for (std::int64_t j = 0; j < w.size(); ++j) {
        const double g = grads[li][j] + (regularized ? hp.l2 * w[j] : 0.0);
        s[j] = (1.0 - hp.beta2) * s[j] + hp.beta2 * g * g;
        m[j] = hp.beta1 * m[j] + g;
        w[j] -= a * m[j] / (std::sqrt(s[j]) + hp.eps);
        if (regularized && hp.weight_decay > 0.0) w[j] -= a * hp.weight_decay * w[j];
      }
    } else {
      const double b1 = 1.0 - hp.beta1, b2 = 1.0 - hp.beta2;
      const double corr1 = 1.0 - std::pow(b1, static_cast<double>(t));
      const double corr2 = 1.0 - std::pow(b2, static_cast<double>(t));
      for (std::int64_t j = 0; j < w.size(); ++j) {
        const double g = grads[li][j] + (regularized ? hp.l2 * w[j] : 0.0);
        m[j] = b1 * m[j] + (1.0 - b1) * g;
        s[j] = b2 * s[j] + (1.0 - b2) * g * g;
        const double mhat = m[j] / corr1;
        const double vhat = s[j] / corr2;
        w[j] -= a * mhat / (std::sqrt(vhat) + hp.eps);
        if (regularized && hp.weight_decay > 0.0) w[j] -= a * hp.weight_decay * w[j];
      }
    }
  }
  ++st.step;
}

namespace detail {

// Shared VOGN/OGN update. The caller decides where the gradients were
// evaluated (sampled weights for VOGN, the mean for OGN); the arithmetic is
// identical:
//   m <- b1 m + (g + prior_grad)
//   s <- (1 - tau b2) s + b2 h
//   mu <- mu - a m / (s + prior_prec + gamma)
// with prior_grad = dt*mu and prior_prec = dt, or the per-parameter override.
// No square root on s. Batchnorm layers drop the prior-gradient term.
inline void natural_diag_step(std::vector<Tensor>& mu, const std::vector<Tensor>& gbar,
                              const std::vector<Tensor>& hdiag, OptimizerState& st,
                              const Hyperparams& hp, const std::vector<LayerSpec>& layers,
                              const PriorOverride* prior) {
  const double a = st.alpha_t;
  const double dt = st.delta_tilde;
  for (std::size_t li = 0; li < mu.size(); ++li) {
    if (layers[li].param_count() == 0) continue;
    detail::check_grad_finite(gbar[li], layers[li], static_cast<int>(li));
    const bool point_estimated = layers[li].kind == LayerKind::batchnorm;
    const bool has_override = prior != nullptr && !point_estimated;
    Tensor& w = mu[li];
    Tensor& m = st.m[li];
    Tensor& s = st.s[li];
    for (std::int64_t j = 0; j < w.size(); ++j) {
      const double h = hdiag[li][j];
      if (h < 0.0) {
        throw NumericError(layers[li].describe(static_cast<int>(li)) +
                           ": negative Gauss-Newton diagonal element");
      }
      double prior_grad = 0.0;
      double prior_prec = dt;
      if (has_override) {
        prior_prec = prior->p0[li][j] / st.n_eff;
        prior_grad = prior_prec * (w[j] - prior->mu0[li][j]);
      } else if (!point_estimated) {
        prior_grad = dt * w[j];
      }
      m[j] = hp.beta1 * m[j] + (gbar[li][j] + prior_grad);
      s[j] = (1.0 - st.tau_t * hp.beta2) * s[j] + hp.beta2 * h;
      const double denom = s[j] + prior_prec + hp.gamma;
      if (!(denom > 0.0)) {
        throw NumericError(layers[li].describe(static_cast<int>(li)) +
                           ": non-positive update denominator");
      }
      w[j] -= a * m[j] / denom;
    }
  }
  ++st.step;
}

}  // namespace detail

// VOGN mean update (Alg. 1 lines 17-19). gbar/hdiag must come from weights
// sampled at sigma = (1/(N(s+dt+gamma)))^{1/2}.
inline void vogn_step(std::vector<Tensor>& mu, const std::vector<Tensor>& gbar,
                      const std::vector<Tensor>& hdiag, OptimizerState& st,
                      const Hyperparams& hp, const std::vector<LayerSpec>& layers,
                      const PriorOverride* prior = nullptr) {
  detail::natural_diag_step(mu, gbar, hdiag, st, hp, layers, prior);
}

// OGN: the deterministic variant; gradients evaluated at the mean.
inline void ogn_step(std::vector<Tensor>& w, const std::vector<Tensor>& gbar,
                     const std::vector<Tensor>& hdiag, OptimizerState& st,
                     const Hyperparams& hp, const std::vector<LayerSpec>& layers,
                     const PriorOverride* prior = nullptr) {
  detail::natural_diag_step(w, gbar, hdiag, st, hp, layers, prior);
}

// Scale initialisation: the Gauss-Newton diagonal of the first minibatch at
// the initialised mean (no sampling).
inline std::vector<Tensor> init_scale(NetworkModel& model, const Tensor& inputs,
                                      const std::vector<int>& labels) {
  auto [logits, cache] = forward(model, inputs, Mode::train);
  auto [nll, dlogits] = loss_and_grad(logits, labels);
  (void)nll;
  const PerExampleGrads grads = backward_per_example(model, cache, dlogits);
  return gauss_newton_diag(grads);
}

// One noisy K-FAC update for a dense layer with weight stored [rows x cols]
// (rows = outputs, cols = inputs + bias):
//   A <- (1-bt) A + bt E[a a^T],  S <- (1-bt) S + bt E[g g^T],  bt = b2 tau/N
//   pi^2 = avg_eig(A)/avg_eig(S); Ag = A + pi sqrt(gamma) I; Sg = S + sqrt(gamma)/pi I
//   W <- W - a [Sg]^-1 (E[grad] + dt W) [Ag]^-1
// which is the matrix-variate natural-gradient update written for this
// storage orientation. Average eigenvalues are computed as trace/dim.
inline void noisy_kfac_layer_step(Tensor& w_flat, KfacFactors& f, const LayerOuterStats& stats,
                                  const Hyperparams& hp, double alpha_t, double tau_t,
                                  double delta_tilde, double n_eff, const LayerSpec& spec,
                                  int li) {
  if (spec.kind != LayerKind::dense) {
    throw std::invalid_argument(spec.describe(li) + ": noisy K-FAC supports dense layers only");
  }
  const std::int64_t rows = spec.weight_rows(), cols = spec.weight_cols();
  detail::check_grad_finite(stats.mean_grad, spec, li);
  const double bt = hp.beta2 * tau_t / n_eff;
  if (!f.initialized) {
    f.a = stats.a_outer;
    f.s = stats.s_outer;
    f.initialized = true;
  } else {
    f.a = f.a * (1.0 - bt) + stats.a_outer * bt;
    f.s = f.s * (1.0 - bt) + stats.s_outer * bt;
  }
  const double avg_a = linalg::trace(f.a) / static_cast<double>(cols);
  const double avg_s = linalg::trace(f.s) / static_cast<double>(rows);
  if (!(avg_s > 0.0) || !std::isfinite(avg_a / avg_s)) {
    throw NumericError(spec.describe(li) + ": K-FAC pi is not finite (zero output factor)");
  }
  const double pi = std::sqrt(avg_a / avg_s);
  const double root_gamma = std::sqrt(hp.gamma);
  Tensor a_damped = f.a;
  Tensor s_damped = f.s;
  for (std::int64_t i = 0; i < cols; ++i) a_damped[i * cols + i] += pi * root_gamma;
  for (std::int64_t i = 0; i < rows; ++i) s_damped[i * rows + i] += root_gamma / pi;
  // throws NumericError when a damped factor is not positive definite
  const Tensor a_inv = linalg::spd_inverse(a_damped);
  const Tensor s_inv = linalg::spd_inverse(s_damped);

  Tensor g = stats.mean_grad.reshaped({rows, cols});
  const Tensor w = w_flat.reshaped({rows, cols});
  for (std::int64_t i = 0; i < g.size(); ++i) g[i] += delta_tilde * w[i];
  const Tensor update = matmul(s_inv, matmul(g, a_inv));
  for (std::int64_t i = 0; i < w_flat.size(); ++i) w_flat[i] -= alpha_t * update[i];
}

// Damped factors as used for both the update and the posterior covariance.
inline std::pair<Tensor, Tensor> kfac_damped_factors(const KfacFactors& f, double gamma) {
  const std::int64_t cols = f.a.dim(0), rows = f.s.dim(0);
  const double avg_a = linalg::trace(f.a) / static_cast<double>(cols);
  const double avg_s = linalg::trace(f.s) / static_cast<double>(rows);
  if (!(avg_s > 0.0)) throw NumericError("kfac_damped_factors: zero output factor");
  const double pi = std::sqrt(avg_a / avg_s);
  const double root_gamma = std::sqrt(gamma);
  Tensor a_damped = f.a;
  Tensor s_damped = f.s;
  for (std::int64_t i = 0; i < cols; ++i) a_damped[i * cols + i] += pi * root_gamma;
  for (std::int64_t i = 0; i < rows; ++i) s_damped[i * rows + i] += root_gamma / pi;
  return {a_damped, s_damped};
}

}  // namespace ngvi
