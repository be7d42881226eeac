#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ngvi/config.hpp"
#include "ngvi/metrics.hpp"
#include "ngvi/data.hpp"
#include "ngvi/errors.hpp"
#include "ngvi/network.hpp"
#include "ngvi/optimizers.hpp"
#include "ngvi/parallel.hpp"
#include "ngvi/posterior.hpp"
#include "ngvi/rng.hpp"

// Training orchestration. All randomness flows from the run seed through
// named streams (init, shuffle, augment, train.mc, eval.*); two runs with the
// same seed, config, and worker count produce identical results.

namespace ngvi {

struct EpochLog {
  int epoch = 0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double val_nll = 0.0;
  double wall_seconds = 0.0;
};

struct IterationTiming {
  long step = 0;
  int epoch = 0;
  double millis = 0.0;
};

// Test hooks and continual-learning knobs that are not part of the config.
struct TrainOptions {
  const PriorOverride* prior = nullptr;
  bool force_mean_sampling = false;  // VOGN with sampling noise forced to zero
  std::optional<double> init_precision;  // replaces the Gauss-Newton scale init
  std::function<void(long step, const std::vector<Tensor>& params)> on_step;
  int epoch_offset = 0;  // schedule origin (continual tasks restart at 0)
};

class TrainSession {
 public:
  TrainSession(RunConfig cfg, data::Dataset dataset)
      : cfg_(std::move(cfg)), dataset_(std::move(dataset)) {
    input_shape_ = effective_input_shape();
    RngStream init_rng(cfg_.seed, stream_tag("init"));
    model_ = build_model(cfg_.layers, input_shape_, init_rng);
    double rho = cfg_.hp.rho;
    if (rho == 1.0) rho = cfg_.augmentation.rho(dataset_.feature_shape);
    Hyperparams hp_eff = cfg_.hp;
    hp_eff.rho = rho;
    cfg_.hp = hp_eff;
    opt_ = init_optimizer_state(model_, cfg_.hp, static_cast<double>(dataset_.n_orig()));
    keying_ = resolve_keying();
  }

  const NetworkModel& model() const { return model_; }
  NetworkModel& model() { return model_; }
  const OptimizerState& opt_state() const { return opt_; }
  OptimizerState& opt_state() { return opt_; }
  const RunConfig& config() const { return cfg_; }
  const data::Dataset& dataset() const { return dataset_; }

  // Replace the dataset (continual tasks). Feature shape must be unchanged.
  void set_dataset(data::Dataset ds) {
    if (!(ds.feature_shape == dataset_.feature_shape)) {
      throw std::invalid_argument("set_dataset: feature shape changed");
    }
    dataset_ = std::move(ds);
    opt_.n_eff = cfg_.hp.rho * static_cast<double>(dataset_.n_orig());
  }

  // Fresh mean initialisation (same procedure as construction), per-id stream.
  void reinit_params(std::uint64_t stream_index) {
    RngStream rng(cfg_.seed, derive_stream({stream_tag("init"), stream_index}));
    model_ = build_model(cfg_.layers, input_shape_, rng);
  }

  // Reset the optimizer accumulators; s is re-established by the next
  // initialise_scale call.
  void reset_optimizer() {
    opt_ = init_optimizer_state(model_, cfg_.hp, static_cast<double>(dataset_.n_orig()));
  }

  // Scale initialisation: Gauss-Newton diagonal of the first minibatch, or a
  // fixed total precision (continual-learning recipe).
  void initialise_scale(const TrainOptions& opts) {
    if (cfg_.optimizer != "vogn" && cfg_.optimizer != "ogn") return;
    opt_.refresh_schedule(cfg_.hp, opts.epoch_offset);
    if (opts.init_precision.has_value()) {
      const double p_init = *opts.init_precision;
      for (std::size_t li = 0; li < model_.layer_count(); ++li) {
        for (std::int64_t j = 0; j < opt_.s[li].size(); ++j) {
          const double prior_prec =
              opts.prior != nullptr ? opts.prior->p0[li][j] / opt_.n_eff : opt_.delta_tilde;
          opt_.s[li][j] = std::max(0.0, p_init / opt_.n_eff - prior_prec - cfg_.hp.gamma);
        }
      }
      return;
    }
    const std::int64_t m = std::min<std::int64_t>(cfg_.train.batch_size, dataset_.n_orig());
    std::vector<std::int64_t> order(static_cast<std::size_t>(dataset_.n_orig()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
    auto [inputs, labels] = data::take_batch(dataset_.train, order, 0, m);
    Tensor batch = maybe_augment(inputs, -1, 0);  // -1: distinct stream from epoch 0
    opt_.s = init_scale(model_, batch, labels);
  }

  // Train for `epochs` epochs, evaluating on the configured cadence.
  std::pair<std::vector<EpochLog>, std::vector<IterationTiming>> train_epochs(
      int epochs, const TrainOptions& opts) {
    std::vector<EpochLog> logs;
    std::vector<IterationTiming> timings;
    const auto t_start = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < epochs; ++epoch) {
      opt_.refresh_schedule(cfg_.hp, opts.epoch_offset + epoch);
      run_epoch(epoch, opts, timings);
      const bool last = epoch == epochs - 1;
      if (last || (epoch + 1) % cfg_.train.eval_every == 0) {
        EpochLog log;
        log.epoch = epoch;
        const Tensor train_pred = predict_split(dataset_.train, epoch, "eval.train");
        const Tensor val_pred = predict_split(dataset_.val, epoch, "eval.val");
        log.train_acc = metrics::accuracy(train_pred, dataset_.train.labels);
        log.val_acc = metrics::accuracy(val_pred, dataset_.val.labels);
        log.val_nll = metrics::nll(val_pred, dataset_.val.labels).value;
        log.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        logs.push_back(log);
      }
    }
    return {std::move(logs), std::move(timings)};
  }

  // Posterior used for evaluation-time prediction.
  Posterior eval_posterior(const TrainOptions& opts) const {
    if (cfg_.optimizer == "vogn" || cfg_.optimizer == "ogn") {
      return Posterior::diagonal(make_posterior(model_, opt_, cfg_.hp, opts.prior));
    }
    if (cfg_.optimizer == "noisy-kfac") {
      return Posterior::kronecker(make_kronecker_posterior(model_, opt_, cfg_.hp));
    }
    return Posterior::point(model_);
  }

  Tensor predict_split(const data::Split& split, int epoch, const char* tag_name) const {
    TrainOptions opts;
    opts.prior = prior_;
    const Posterior post = eval_posterior(opts);
    return predict_mc(model_, post, split.inputs, cfg_.train.eval_mc_samples, cfg_.seed,
                      derive_stream({stream_tag(tag_name), static_cast<std::uint64_t>(epoch)}));
  }

  void set_prior(const PriorOverride* prior) { prior_ = prior; }

 private:
  FeatureShape effective_input_shape() const {
    if (cfg_.augmentation.active() && cfg_.augmentation.crop > 0) {
      if (!dataset_.feature_shape.spatial) {
        throw ConfigError("augmentation requires image-shaped inputs");
      }
      return FeatureShape::image(dataset_.feature_shape.c, cfg_.augmentation.crop,
                                 cfg_.augmentation.crop);
    }
    return dataset_.feature_shape;
  }

  parallel::RngKeying resolve_keying() const {
    if (cfg_.parallel.rng_keying == "example") {
      if (model_.has_batchnorm()) {
        throw ConfigError("parallel: example keying is incompatible with batchnorm");
      }
      return parallel::RngKeying::example;
    }
    if (cfg_.parallel.rng_keying == "worker") return parallel::RngKeying::worker;
    return model_.has_batchnorm() ? parallel::RngKeying::worker : parallel::RngKeying::example;
  }

  Tensor maybe_augment(const Tensor& inputs, int epoch, std::int64_t batch_index) {
    if (!cfg_.augmentation.active()) return inputs;
    RngStream rng(cfg_.seed,
                  derive_stream({stream_tag("augment"), static_cast<std::uint64_t>(epoch),
                                 static_cast<std::uint64_t>(batch_index)}));
    return data::augment(inputs, dataset_.feature_shape, cfg_.augmentation, rng);
  }

  void run_epoch(int epoch, const TrainOptions& opts, std::vector<IterationTiming>& timings) {
    RngStream shuffle_rng(cfg_.seed, derive_stream({stream_tag("shuffle"),
                                                    static_cast<std::uint64_t>(opts.epoch_offset + epoch)}));
    const auto order = data::shuffled_indices(dataset_.n_orig(), shuffle_rng);
    const std::int64_t n = dataset_.n_orig();
    const std::int64_t bs = std::min<std::int64_t>(cfg_.train.batch_size, n);
    for (std::int64_t start = 0, bi = 0; start < n; start += bs, ++bi) {
      const std::int64_t count = std::min(bs, n - start);
      if (count < 1) break;
      auto [raw_inputs, labels] = data::take_batch(dataset_.train, order, start, count);
      const Tensor inputs = maybe_augment(raw_inputs, epoch, bi);
      const auto t0 = std::chrono::steady_clock::now();
      run_iteration(inputs, labels, epoch, opts);
      if (cfg_.train.timing_log) {
        timings.push_back(
            {opt_.step, epoch,
             std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                 .count()});
      }
      if (opts.on_step) opts.on_step(opt_.step, model_.params);
    }
  }

  void run_iteration(const Tensor& inputs, const std::vector<int>& labels, int epoch,
                     const TrainOptions& opts) {
    if (cfg_.optimizer == "noisy-kfac") {
      run_kfac_iteration(inputs, labels, epoch);
      return;
    }
    const bool sampled = cfg_.optimizer == "vogn" && !opts.force_mean_sampling;
    Posterior post;
    if (cfg_.optimizer == "vogn" || cfg_.optimizer == "ogn") {
      post = Posterior::diagonal(make_posterior(model_, opt_, cfg_.hp, opts.prior));
    } else {
      post = Posterior::point(model_);
    }
    const int workers =
        static_cast<int>(std::min<std::int64_t>(cfg_.parallel.workers, inputs.dim(0)));
    const auto plan = parallel::make_plan(
        inputs.dim(0), workers, cfg_.hp.train_mc_samples, keying_,
        sampled ? parallel::GradMode::sampled : parallel::GradMode::at_mean, cfg_.seed,
        static_cast<std::uint64_t>(opt_.step));
    const auto result = parallel::parallel_step(model_, post, inputs, labels, plan);
    if (!std::isfinite(result.mean_loss)) {
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                         std::to_string(opt_.step));
    }
    parallel::apply_bn_stats(model_, result.bn);
    if (cfg_.optimizer == "vogn") {
      vogn_step(model_.params, result.gbar, result.hdiag, opt_, cfg_.hp, model_.layers,
                opts.prior);
    } else if (cfg_.optimizer == "ogn") {
      ogn_step(model_.params, result.gbar, result.hdiag, opt_, cfg_.hp, model_.layers,
               opts.prior);
    } else if (cfg_.optimizer == "adam") {
      adam_step(model_.params, result.gbar, opt_, cfg_.hp, model_.layers);
    } else if (cfg_.optimizer == "sgd") {
      sgd_step(model_.params, result.gbar, opt_, cfg_.hp, model_.layers);
    } else {
      throw ConfigError("unknown optimizer: " + cfg_.optimizer);
    }
  }

  void run_kfac_iteration(const Tensor& inputs, const std::vector<int>& labels, int epoch) {
    // serial path: sample W ~ MN(M, Sigma2 x Sigma1), evaluate the minibatch
    // statistics at the sample, then update factors and mean layer by layer
    NetworkModel scratch = model_;
    RngStream rng(cfg_.seed, derive_stream({stream_tag("train.mc"),
                                            static_cast<std::uint64_t>(opt_.step)}));
    const KroneckerPosterior post = make_kronecker_posterior(model_, opt_, cfg_.hp);
    scratch.params = sample_weights(post, rng);
    auto [logits, cache] = forward(scratch, inputs, Mode::train);
    auto [loss, dlogits] = loss_and_grad(logits, labels);
    if (!std::isfinite(loss)) {
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                         std::to_string(opt_.step));
    }
    model_.bn = scratch.bn;  // one standard running-statistics update
    const auto stats = layer_outer_stats(scratch, cache, dlogits);
    const PerExampleGrads per_example = backward_per_example(scratch, cache, dlogits);
    const auto hdiag = gauss_newton_diag(per_example);
    const auto gbar = mean_grads(per_example);
    for (std::size_t li = 0; li < model_.layer_count(); ++li) {
      const LayerSpec& spec = model_.layers[li];
      if (spec.kind == LayerKind::dense) {
        noisy_kfac_layer_step(model_.params[li], opt_.kfac[li], stats[li], cfg_.hp, opt_.alpha_t,
                              opt_.tau_t, opt_.delta_tilde, opt_.n_eff, spec,
                              static_cast<int>(li));
      } else if (spec.kind == LayerKind::batchnorm) {
        // point-estimate diagonal path, no prior-gradient term
        Tensor& w = model_.params[li];
        Tensor& m = opt_.m[li];
        Tensor& s = opt_.s[li];
        for (std::int64_t j = 0; j < w.size(); ++j) {
          m[j] = cfg_.hp.beta1 * m[j] + gbar[li][j];
          s[j] = (1.0 - opt_.tau_t * cfg_.hp.beta2) * s[j] + cfg_.hp.beta2 * hdiag[li][j];
          w[j] -= opt_.alpha_t * m[j] / (s[j] + opt_.delta_tilde + cfg_.hp.gamma);
        }
      }
    }
    ++opt_.step;
  }

  RunConfig cfg_;
  data::Dataset dataset_;
  FeatureShape input_shape_;
  NetworkModel model_;
  OptimizerState opt_;
  parallel::RngKeying keying_;
  const PriorOverride* prior_ = nullptr;
};

// End-to-end training per the config: build, initialise, train, return the
// session plus its epoch logs.
struct TrainRun {
  TrainSession session;
  std::vector<EpochLog> logs;
  std::vector<IterationTiming> timings;
};

inline TrainRun run_training(const RunConfig& cfg, const data::Dataset& dataset,
                             const TrainOptions& opts = {}) {
  TrainRun run{TrainSession(cfg, dataset), {}, {}};
  run.session.set_prior(opts.prior);
  run.session.initialise_scale(opts);
  auto [logs, timings] = run.session.train_epochs(cfg.train.epochs, opts);
  run.logs = std::move(logs);
  run.timings = std::move(timings);
  return run;
}

}  // namespace ngvi
