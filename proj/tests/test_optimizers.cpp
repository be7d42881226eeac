#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ngvi/linalg.hpp"
#include "ngvi/network.hpp"
#include "ngvi/optimizers.hpp"
#include "ngvi/rng.hpp"

using namespace ngvi;

namespace {

// one-layer scalar setup shared by the step tests
struct ScalarSetup {
  std::vector<LayerSpec> layers{LayerSpec::dense(1, 1, false)};
  std::vector<Tensor> params;
  OptimizerState st;
  Hyperparams hp;

  explicit ScalarSetup(double w0, double n_orig = 1.0) {
    params = {Tensor::vec({w0})};
    hp.alpha = 0.1;
    hp.beta1 = 0.0;
    hp.beta2 = 0.5;
    hp.delta = 0.0;
    NetworkModel dummy;
    dummy.layers = layers;
    dummy.params = params;
    st = init_optimizer_state(dummy, hp, n_orig);
  }
  void refresh() { st.refresh_schedule(hp, 0); }
};

// independent scalar recomputation of the three-line diagonal update
struct VognOracle {
  double m = 0, s = 0, mu = 0;
  void step(double g, double h, double alpha, double beta1, double beta2, double tau,
            double dt, double gamma) {
    m = beta1 * m + (g + dt * mu);
    s = (1 - tau * beta2) * s + beta2 * h;
    mu = mu - alpha * m / (s + dt + gamma);
  }
};

Tensor outer_mean(const std::vector<Tensor>& vecs) {
  const std::int64_t n = vecs[0].size();
  Tensor out({n, n});
  for (const auto& v : vecs) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) out[i * n + j] += v[i] * v[j];
    }
  }
  out *= 1.0 / static_cast<double>(vecs.size());
  return out;
}

// Gauss-Jordan inverse, independent of the library's Cholesky route
Tensor gj_inverse(Tensor a) {
  const std::int64_t n = a.dim(0);
  Tensor inv = linalg::identity(n);
  for (std::int64_t col = 0; col < n; ++col) {
    std::int64_t piv = col;
    for (std::int64_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    }
    for (std::int64_t c = 0; c < n; ++c) {
      std::swap(a[col * n + c], a[piv * n + c]);
      std::swap(inv[col * n + c], inv[piv * n + c]);
    }
    const double d = a[col * n + col];
    for (std::int64_t c = 0; c < n; ++c) {
      a[col * n + c] /= d;
      inv[col * n + c] /= d;
    }
    for (std::int64_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r * n + col];
      if (f == 0.0) continue;
      for (std::int64_t c = 0; c < n; ++c) {
        a[r * n + c] -= f * a[col * n + c];
        inv[r * n + c] -= f * inv[col * n + c];
      }
    }
  }
  return inv;
}

}  // namespace

TEST_CASE("adam: zero gradient is a fixed point") {
  ScalarSetup su(1.0);
  su.refresh();
  adam_step(su.params, {Tensor::vec({0.0})}, su.st, su.hp, su.layers);
  REQUIRE(su.params[0][0] == 1.0);
}

TEST_CASE("adam scalar step matches the frozen oracle value") {
  ScalarSetup su(1.0);
  su.refresh();
  adam_step(su.params, {Tensor::vec({0.1})}, su.st, su.hp, su.layers);
  REQUIRE(su.st.s[0][0] == Catch::Approx(0.005).epsilon(1e-12));
  REQUIRE(su.params[0][0] == Catch::Approx(0.8585786637626877).epsilon(1e-12));
}

TEST_CASE("adam step is insensitive to loss rescaling when eps is negligible") {
  const double scale = 7.0;
  ScalarSetup a(1.0), b(1.0);
  a.hp.eps = 1e-12;
  b.hp.eps = 1e-12;
  a.refresh();
  b.refresh();
  const double gs[] = {0.1, 0.2, -0.05, 0.15};
  for (double g : gs) {
    adam_step(a.params, {Tensor::vec({g})}, a.st, a.hp, a.layers);
    adam_step(b.params, {Tensor::vec({g * scale})}, b.st, b.hp, b.layers);
  }
  REQUIRE(std::abs(a.params[0][0] - b.params[0][0]) <
          1e-6 * std::max(std::abs(a.params[0][0]), 1.0));
}

TEST_CASE("adam names the layer on a non-finite gradient") {
  ScalarSetup su(1.0);
  su.refresh();
  REQUIRE_THROWS_WITH(
      adam_step(su.params, {Tensor::vec({std::nan("")})}, su.st, su.hp, su.layers),
      Catch::Matchers::ContainsSubstring("layer 0"));
}

TEST_CASE("standard adam variant takes the textbook bias-corrected step") {
  ScalarSetup su(1.0);
  su.hp.standard_adam = true;
  su.hp.beta1 = 0.1;    // decay rate 0.9
  su.hp.beta2 = 0.001;  // decay rate 0.999
  su.hp.eps = 1e-8;
  su.refresh();
  adam_step(su.params, {Tensor::vec({0.1})}, su.st, su.hp, su.layers);
  // first step of textbook adam: mhat = g, vhat = g^2 -> w -= alpha * g/(|g|+eps)
  REQUIRE(su.params[0][0] == Catch::Approx(1.0 - 0.1 * (0.1 / (0.1 + 1e-8))).epsilon(1e-10));
}

TEST_CASE("decoupled weight decay differs from l2") {
  ScalarSetup wd(2.0), l2(2.0);
  wd.hp.weight_decay = 0.5;
  l2.hp.l2 = 0.5;
  wd.refresh();
  l2.refresh();
  // zero data gradient: weight decay still shrinks multiplicatively
  adam_step(wd.params, {Tensor::vec({0.0})}, wd.st, wd.hp, wd.layers);
  REQUIRE(wd.params[0][0] == Catch::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-12));
  adam_step(l2.params, {Tensor::vec({0.0})}, l2.st, l2.hp, l2.layers);
  // l2 routes through the adaptive denominator instead
  REQUIRE(l2.params[0][0] != wd.params[0][0]);
  REQUIRE(l2.params[0][0] < 2.0);
}

TEST_CASE("batchnorm parameters are exempt from l2 and weight decay") {
  RngStream rng(4, 4);
  NetworkModel m = build_model({LayerSpec::dense(2, 3), LayerSpec::batchnorm(3),
                                LayerSpec::relu(), LayerSpec::dense(3, 2)},
                               FeatureShape::flat(2), rng);
  Hyperparams hp;
  hp.l2 = 0.5;
  hp.weight_decay = 0.5;
  OptimizerState st = init_optimizer_state(m, hp, 10.0);
  std::vector<Tensor> zero_grads;
  for (const auto& l : m.layers) zero_grads.emplace_back(Tensor({l.param_count()}));
  const Tensor bn_before = m.params[1];
  const Tensor dense_before = m.params[0];
  adam_step(m.params, zero_grads, st, hp, m.layers);
  for (std::int64_t j = 0; j < bn_before.size(); ++j) {
    REQUIRE(m.params[1][j] == bn_before[j]);
  }
  bool dense_moved = false;
  for (std::int64_t j = 0; j < dense_before.size(); ++j) {
    if (m.params[0][j] != dense_before[j]) dense_moved = true;
  }
  REQUIRE(dense_moved);
}

TEST_CASE("sgd with momentum accumulates and steps") {
  ScalarSetup su(1.0);
  su.hp.beta1 = 0.5;
  su.refresh();
  sgd_step(su.params, {Tensor::vec({1.0})}, su.st, su.hp, su.layers);
  REQUIRE(su.params[0][0] == Catch::Approx(1.0 - 0.1).epsilon(1e-12));
  sgd_step(su.params, {Tensor::vec({1.0})}, su.st, su.hp, su.layers);
  // m = 0.5*1 + 1 = 1.5
  REQUIRE(su.params[0][0] == Catch::Approx(0.9 - 0.1 * 1.5).epsilon(1e-12));
}

TEST_CASE("vogn: prior-gradient equilibrium is a fixed point") {
  ScalarSetup su(0.5, 100.0);
  su.hp.delta = 2.0;
  su.hp.tau = 1.0;
  su.refresh();
  const double dt = su.st.delta_tilde;
  REQUIRE(dt == Catch::Approx(2.0 / 100.0));
  // g = -dt*mu cancels the prior gradient; with beta1 = 0 nothing moves
  vogn_step(su.params, {Tensor::vec({-dt * 0.5})}, {Tensor::vec({0.04})}, su.st, su.hp,
            su.layers);
  REQUIRE(su.params[0][0] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("vogn scalar step matches the independent oracle") {
  ScalarSetup su(0.5, 1.0);
  su.hp.alpha = 0.1;
  su.hp.beta1 = 0.0;
  su.hp.beta2 = 0.1;
  su.hp.delta = 0.01;  // n_eff = 1, tau = 1 -> delta_tilde = 0.01
  su.hp.gamma = 0.0;
  su.refresh();
  su.st.s[0][0] = 0.1;
  VognOracle oracle;
  oracle.s = 0.1;
  oracle.mu = 0.5;
  oracle.step(0.2, 0.04, 0.1, 0.0, 0.1, 1.0, 0.01, 0.0);
  vogn_step(su.params, {Tensor::vec({0.2})}, {Tensor::vec({0.04})}, su.st, su.hp, su.layers);
  REQUIRE(su.st.s[0][0] == Catch::Approx(0.094).epsilon(1e-12));
  REQUIRE(su.params[0][0] == Catch::Approx(oracle.mu).epsilon(1e-12));
  REQUIRE(su.params[0][0] == Catch::Approx(0.30288461538461536).epsilon(1e-12));
}

TEST_CASE("vogn rejects a negative gauss-newton element") {
  ScalarSetup su(0.5);
  su.refresh();
  REQUIRE_THROWS_AS(vogn_step(su.params, {Tensor::vec({0.1})}, {Tensor::vec({-1.0})}, su.st,
                              su.hp, su.layers),
                    NumericError);
}

TEST_CASE("ogn and vogn share the identical update arithmetic") {
  ScalarSetup a(0.7, 10.0), b(0.7, 10.0);
  a.hp.delta = 0.5;
  b.hp.delta = 0.5;
  a.hp.beta1 = 0.9;
  b.hp.beta1 = 0.9;
  a.refresh();
  b.refresh();
  RngStream rng(9, 9);
  for (int i = 0; i < 500; ++i) {
    const double g = rng.normal() * 0.1;
    const double h = std::abs(rng.normal()) * 0.01;
    vogn_step(a.params, {Tensor::vec({g})}, {Tensor::vec({h})}, a.st, a.hp, a.layers);
    ogn_step(b.params, {Tensor::vec({g})}, {Tensor::vec({h})}, b.st, b.hp, b.layers);
    REQUIRE(a.params[0][0] == b.params[0][0]);
    REQUIRE(a.st.s[0][0] == b.st.s[0][0]);
  }
}

TEST_CASE("ogn converges to the regularised minimum of a quadratic") {
  // loss 0.5*(w-3)^2 with prior precision delta_tilde: stationary point at
  // (w - 3) + dt*w = 0  ->  w* = 3/(1 + dt)
  ScalarSetup su(0.0, 1.0);
  su.hp.alpha = 0.5;
  su.hp.beta1 = 0.0;
  su.hp.beta2 = 0.5;
  su.hp.delta = 0.01;
  su.hp.gamma = 0.5;
  su.refresh();
  const double w_star = 3.0 / (1.0 + su.st.delta_tilde);
  int steps_needed = -1;
  for (int i = 0; i < 200; ++i) {
    const double w = su.params[0][0];
    const double g = w - 3.0;
    ogn_step(su.params, {Tensor::vec({g})}, {Tensor::vec({g * g})}, su.st, su.hp, su.layers);
    if (std::abs(su.params[0][0] - w_star) < 1e-3) {
      steps_needed = i + 1;
      break;
    }
  }
  INFO("converged after " << steps_needed << " steps");
  REQUIRE(steps_needed > 0);
}

TEST_CASE("scale stays nonnegative across 1e4 random steps") {
  ScalarSetup su(1.0, 50.0);
  su.hp.delta = 1.0;
  su.hp.beta1 = 0.9;
  su.hp.beta2 = 0.999;
  su.hp.tau = 0.3;  // tempered decay
  su.refresh();
  RngStream rng(17, 1);
  for (int i = 0; i < 10000; ++i) {
    const double g = rng.normal();
    const double h = std::abs(rng.normal());
    vogn_step(su.params, {Tensor::vec({g})}, {Tensor::vec({h})}, su.st, su.hp, su.layers);
    REQUIRE(su.st.s[0][0] >= 0.0);
  }
}

TEST_CASE("layer-wise blocks are independent of update order") {
  RngStream rng(6, 6);
  NetworkModel m = build_model({LayerSpec::dense(2, 3), LayerSpec::relu(),
                                LayerSpec::dense(3, 2)},
                               FeatureShape::flat(2), rng);
  Hyperparams hp;
  hp.delta = 0.5;
  OptimizerState st_fwd = init_optimizer_state(m, hp, 20.0);
  OptimizerState st_rev = st_fwd;
  std::vector<Tensor> g, h;
  for (const auto& l : m.layers) {
    Tensor gl({l.param_count()}), hl({l.param_count()});
    for (auto& v : gl.values()) v = rng.normal();
    for (auto& v : hl.values()) v = std::abs(rng.normal());
    g.push_back(gl);
    h.push_back(hl);
  }
  std::vector<Tensor> params_fwd = m.params;
  vogn_step(params_fwd, g, h, st_fwd, hp, m.layers);

  // reverse order: update each layer through a single-layer view
  std::vector<Tensor> params_rev = m.params;
  for (int li = 2; li >= 0; --li) {
    std::vector<LayerSpec> one_layer{m.layers[static_cast<std::size_t>(li)]};
    std::vector<Tensor> p{params_rev[static_cast<std::size_t>(li)]};
    std::vector<Tensor> gv{g[static_cast<std::size_t>(li)]};
    std::vector<Tensor> hv{h[static_cast<std::size_t>(li)]};
    OptimizerState st_one;
    st_one.m = {st_rev.m[static_cast<std::size_t>(li)]};
    st_one.s = {st_rev.s[static_cast<std::size_t>(li)]};
    st_one.kfac.resize(1);
    st_one.n_eff = st_rev.n_eff;
    st_one.delta_tilde = st_rev.delta_tilde;
    st_one.tau_t = st_rev.tau_t;
    st_one.alpha_t = st_rev.alpha_t;
    vogn_step(p, gv, hv, st_one, hp, one_layer);
    params_rev[static_cast<std::size_t>(li)] = p[0];
  }
  for (std::size_t li = 0; li < 3; ++li) {
    for (std::int64_t j = 0; j < params_fwd[li].size(); ++j) {
      REQUIRE(params_fwd[li][j] == params_rev[li][j]);
    }
  }
}

TEST_CASE("init_scale equals the gauss-newton diagonal of the same batch") {
  RngStream rng(12, 0);
  NetworkModel m = build_model({LayerSpec::dense(2, 4), LayerSpec::relu(),
                                LayerSpec::dense(4, 2)},
                               FeatureShape::flat(2), rng);
  RngStream drng(12, 1);
  Tensor x({6, 2});
  for (auto& v : x.values()) v = drng.normal();
  std::vector<int> labels{0, 1, 1, 0, 1, 0};
  const auto s0 = init_scale(m, x, labels);
  auto [logits, cache] = forward(m, x, Mode::train);
  auto [nll, dlogits] = loss_and_grad(logits, labels);
  const auto want = gauss_newton_diag(backward_per_example(m, cache, dlogits));
  for (std::size_t li = 0; li < s0.size(); ++li) {
    for (std::int64_t j = 0; j < s0[li].size(); ++j) {
      REQUIRE(s0[li][j] == want[li][j]);
      REQUIRE(s0[li][j] >= 0.0);
    }
  }
}

TEST_CASE("init_scale on a single example is the squared gradient") {
  RngStream rng(13, 0);
  NetworkModel m = build_model({LayerSpec::dense(2, 2)}, FeatureShape::flat(2), rng);
  Tensor x({1, 2}, {0.3, -0.7});
  const auto s0 = init_scale(m, x, {1});
  auto [logits, cache] = forward(m, x, Mode::train);
  auto [nll, dlogits] = loss_and_grad(logits, {1});
  const auto g = backward(m, cache, dlogits);
  for (std::int64_t j = 0; j < s0[0].size(); ++j) {
    REQUIRE(s0[0][j] == Catch::Approx(g[0][j] * g[0][j]).epsilon(1e-12));
  }
}

TEST_CASE("learning-rate decay schedule") {
  Hyperparams hp;
  hp.alpha = 1e-4;
  hp.decay_epochs = {80, 120};
  hp.decay_factor = 10.0;
  REQUIRE(schedule_step(0, hp).alpha == Catch::Approx(1e-4));
  REQUIRE(schedule_step(100, hp).alpha == Catch::Approx(1e-5));
  REQUIRE(schedule_step(130, hp).alpha == Catch::Approx(1e-6));
}

TEST_CASE("learning-rate warm-up schedule") {
  Hyperparams hp;
  hp.alpha = 1.6e-3;
  hp.alpha_init = 1.25e-5;
  hp.warmup_epochs = 5;
  REQUIRE(schedule_step(0, hp).alpha == Catch::Approx(1.25e-5));
  REQUIRE(schedule_step(2, hp).alpha ==
          Catch::Approx(1.25e-5 + (1.6e-3 - 1.25e-5) * 0.4).epsilon(1e-12));
  REQUIRE(schedule_step(5, hp).alpha == Catch::Approx(1.6e-3));
  REQUIRE(schedule_step(9, hp).alpha == Catch::Approx(1.6e-3));
}

TEST_CASE("tempering schedule") {
  Hyperparams hp;
  hp.tau = 1.0;
  hp.tau_init = 0.1;
  hp.tau_warmup_epochs = 10;
  REQUIRE(schedule_step(0, hp).tau == Catch::Approx(0.1));
  REQUIRE(schedule_step(5, hp).tau == Catch::Approx(0.55));
  REQUIRE(schedule_step(10, hp).tau == Catch::Approx(1.0));
  hp.tau_init = 1.0;
  for (int e : {0, 3, 50}) REQUIRE(schedule_step(e, hp).tau == Catch::Approx(1.0));
}

TEST_CASE("noisy k-fac with identity factors is a plain gradient step") {
  const LayerSpec spec = LayerSpec::dense(2, 3);  // rows 3, cols 3
  Tensor w({9});
  for (std::int64_t i = 0; i < 9; ++i) w[i] = 0.1 * static_cast<double>(i);
  const Tensor w_before = w;
  KfacFactors f;
  LayerOuterStats stats;
  stats.present = true;
  stats.a_outer = linalg::identity(3);
  stats.s_outer = linalg::identity(3);
  stats.mean_grad = Tensor({9});
  for (std::int64_t i = 0; i < 9; ++i) stats.mean_grad[i] = 0.01 * static_cast<double>(i + 1);
  Hyperparams hp;
  hp.gamma = 0.0;
  noisy_kfac_layer_step(w, f, stats, hp, /*alpha=*/0.5, /*tau=*/1.0, /*dt=*/0.0,
                        /*n=*/100.0, spec, 0);
  for (std::int64_t i = 0; i < 9; ++i) {
    REQUIRE(w[i] == Catch::Approx(w_before[i] - 0.5 * stats.mean_grad[i]).margin(1e-14));
  }
}

TEST_CASE("pi damping splits by the ratio of average eigenvalues") {
  KfacFactors f;
  f.initialized = true;
  f.a = linalg::identity(2) * 2.0;  // average eigenvalue 2
  f.s = linalg::identity(2) * 8.0;  // average eigenvalue 8 -> pi = 1/2
  auto [a_damped, s_damped] = kfac_damped_factors(f, /*gamma=*/4.0);
  // A + pi*sqrt(gamma) I = A + 1*I; S + sqrt(gamma)/pi I = S + 4*I
  REQUIRE(a_damped[0] == Catch::Approx(3.0));
  REQUIRE(s_damped[0] == Catch::Approx(12.0));
}

TEST_CASE("noisy k-fac step matches an explicit-inverse oracle on a 2x3 dense layer") {
  RngStream rng(15, 0);
  const LayerSpec spec = LayerSpec::dense(2, 3);  // weight [3 x 3] with bias
  const std::int64_t rows = 3, cols = 3;
  Tensor w({rows * cols});
  for (auto& v : w.values()) v = rng.normal() * 0.2;

  // minibatch statistics from 8 random activation/gradient pairs
  std::vector<Tensor> a_vecs, g_vecs;
  for (int i = 0; i < 8; ++i) {
    Tensor a({cols});
    a[0] = rng.normal();
    a[1] = rng.normal();
    a[2] = 1.0;  // bias slot
    Tensor g({rows});
    for (auto& v : g.values()) v = rng.normal();
    a_vecs.push_back(a);
    g_vecs.push_back(g);
  }
  LayerOuterStats stats;
  stats.present = true;
  stats.a_outer = outer_mean(a_vecs);
  stats.s_outer = outer_mean(g_vecs);
  stats.mean_grad = Tensor({rows * cols});
  for (int i = 0; i < 8; ++i) {
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t c = 0; c < cols; ++c) {
        stats.mean_grad[r * cols + c] += g_vecs[static_cast<std::size_t>(i)][r] *
                                         a_vecs[static_cast<std::size_t>(i)][c] / 8.0;
      }
    }
  }

  Hyperparams hp;
  hp.beta2 = 0.95;
  hp.gamma = 0.3;
  const double alpha = 0.2, tau = 0.8, dt = 0.05, n = 40.0;

  // library route, starting from existing factors
  KfacFactors f;
  f.initialized = true;
  f.a = linalg::identity(cols) * 1.5;
  f.s = linalg::identity(rows) * 0.7;
  Tensor w_lib = w;
  noisy_kfac_layer_step(w_lib, f, stats, hp, alpha, tau, dt, n, spec, 0);

  // oracle: explicit matrices and Gauss-Jordan inverses
  const double bt = hp.beta2 * tau / n;
  Tensor a_new = linalg::identity(cols) * (1.5 * (1 - bt)) + stats.a_outer * bt;
  Tensor s_new = linalg::identity(rows) * (0.7 * (1 - bt)) + stats.s_outer * bt;
  const double pi = std::sqrt((linalg::trace(a_new) / cols) / (linalg::trace(s_new) / rows));
  Tensor a_damp = a_new, s_damp = s_new;
  for (std::int64_t i = 0; i < cols; ++i) a_damp[i * cols + i] += pi * std::sqrt(hp.gamma);
  for (std::int64_t i = 0; i < rows; ++i) s_damp[i * rows + i] += std::sqrt(hp.gamma) / pi;
  Tensor grad_reg = stats.mean_grad.reshaped({rows, cols});
  for (std::int64_t i = 0; i < grad_reg.size(); ++i) grad_reg[i] += dt * w[i];
  const Tensor update = matmul(gj_inverse(s_damp), matmul(grad_reg, gj_inverse(a_damp)));
  for (std::int64_t i = 0; i < w.size(); ++i) {
    REQUIRE(std::abs(w_lib[i] - (w[i] - alpha * update[i])) < 1e-10);
  }
  // factor moving averages also match
  for (std::int64_t i = 0; i < a_new.size(); ++i) {
    REQUIRE(f.a[i] == Catch::Approx(a_new[i]).margin(1e-14));
  }
}

TEST_CASE("noisy k-fac damped factors stay SPD over 1000 random steps") {
  RngStream rng(16, 0);
  const LayerSpec spec = LayerSpec::dense(3, 2);  // rows 2, cols 4
  const std::int64_t rows = 2, cols = 4;
  Tensor w({rows * cols});
  for (auto& v : w.values()) v = rng.normal() * 0.1;
  KfacFactors f;
  Hyperparams hp;
  hp.beta2 = 0.9;
  hp.gamma = 0.1;
  for (int step = 0; step < 1000; ++step) {
    std::vector<Tensor> a_vecs, g_vecs;
    for (int i = 0; i < 5; ++i) {
      Tensor a({cols});
      for (std::int64_t c = 0; c < cols - 1; ++c) a[c] = rng.normal();
      a[cols - 1] = 1.0;
      Tensor g({rows});
      for (auto& v : g.values()) v = rng.normal() * 0.3;
      a_vecs.push_back(a);
      g_vecs.push_back(g);
    }
    LayerOuterStats stats;
    stats.present = true;
    stats.a_outer = outer_mean(a_vecs);
    stats.s_outer = outer_mean(g_vecs);
    stats.mean_grad = Tensor({rows * cols});
    for (int i = 0; i < 5; ++i) {
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < cols; ++c) {
          stats.mean_grad[r * cols + c] += g_vecs[static_cast<std::size_t>(i)][r] *
                                           a_vecs[static_cast<std::size_t>(i)][c] / 5.0;
        }
      }
    }
    noisy_kfac_layer_step(w, f, stats, hp, 0.05, 1.0, 0.01, 200.0, spec, 0);
    auto [a_damped, s_damped] = kfac_damped_factors(f, hp.gamma);
    REQUIRE(linalg::is_spd(a_damped));
    REQUIRE(linalg::is_spd(s_damped));
    if (step % 100 == 0) {
      REQUIRE(linalg::min_eigenvalue(a_damped) > 0.0);
      REQUIRE(linalg::min_eigenvalue(s_damped) > 0.0);
    }
  }
}

TEST_CASE("noisy k-fac rejects non-dense layers and a zero output factor") {
  Tensor w({4});
  KfacFactors f;
  LayerOuterStats stats;
  stats.a_outer = linalg::identity(2);
  stats.s_outer = Tensor({2, 2});  // zero: pi undefined
  stats.mean_grad = Tensor({4});
  Hyperparams hp;
  REQUIRE_THROWS_AS(noisy_kfac_layer_step(w, f, stats, hp, 0.1, 1.0, 0.0, 10.0,
                                          LayerSpec::batchnorm(2), 0),
                    std::invalid_argument);
  f = KfacFactors{};
  REQUIRE_THROWS_AS(noisy_kfac_layer_step(w, f, stats, hp, 0.1, 1.0, 0.0, 10.0,
                                          LayerSpec::dense(1, 2), 0),
                    NumericError);
}

TEST_CASE("hyperparameter invariants are validated") {
  Hyperparams hp;
  hp.alpha = -1.0;
  REQUIRE_THROWS_AS(hp.validate(), ConfigError);
  hp = Hyperparams{};
  hp.tau = 0.0;
  REQUIRE_THROWS_AS(hp.validate(), ConfigError);
  hp = Hyperparams{};
  hp.beta2 = 1.0;
  REQUIRE_THROWS_AS(hp.validate(), ConfigError);
  hp = Hyperparams{};
  hp.rho = 0.5;
  REQUIRE_THROWS_AS(hp.validate(), ConfigError);
  hp = Hyperparams{};
  REQUIRE_NOTHROW(hp.validate());
}
