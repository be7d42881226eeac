#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ngvi/data.hpp"
#include "ngvi/errors.hpp"
#include "ngvi/posterior.hpp"
#include "ngvi/trainer.hpp"

// Permuted-task continual learning: a fixed random pixel permutation per
// task, trained in order with the variational-continual-learning recursion —
// the posterior of task t becomes the prior of task t+1 — using the diagonal
// natural-gradient optimizer as the inner method.

namespace ngvi::continual {

using ChainedPrior = PriorOverride;  // per-parameter prior mean and precision

struct TaskSequence {
  data::Dataset base;
  std::vector<std::vector<std::int64_t>> permutations;  // task 0 is the identity
  std::uint64_t seed = 0;

  int tasks() const { return static_cast<int>(permutations.size()); }
};

inline TaskSequence make_tasks(data::Dataset base, int t, std::uint64_t seed) {
  if (t < 1) throw ConfigError("make_tasks: need at least one task");
  TaskSequence seq;
  seq.seed = seed;
  const std::int64_t d = base.feature_shape.d;
  seq.permutations.reserve(static_cast<std::size_t>(t));
  for (int task = 0; task < t; ++task) {
    std::vector<std::int64_t> perm(static_cast<std::size_t>(d));
    for (std::int64_t i = 0; i < d; ++i) perm[static_cast<std::size_t>(i)] = i;
    if (task > 0) {
      RngStream rng(seed, derive_stream({stream_tag("tasks"), static_cast<std::uint64_t>(task)}));
      for (std::int64_t i = d - 1; i > 0; --i) {
        const std::int64_t j = rng.uniform_int(i + 1);
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
      }
    }
    seq.permutations.push_back(std::move(perm));
  }
  seq.base = std::move(base);
  return seq;
}

inline data::Split permute_split(const data::Split& sp, const std::vector<std::int64_t>& perm) {
  data::Split out;
  out.labels = sp.labels;
  const std::int64_t n = sp.n(), d = sp.inputs.dim(1);
  out.inputs = Tensor({n, d});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) {
      out.inputs[i * d + j] = sp.inputs[i * d + perm[static_cast<std::size_t>(j)]];
    }
  }
  return out;
}

inline data::Dataset task_dataset(const TaskSequence& seq, int task) {
  data::Dataset ds = seq.base;
  const auto& perm = seq.permutations[static_cast<std::size_t>(task)];
  ds.train = permute_split(seq.base.train, perm);
  ds.val = permute_split(seq.base.val, perm);
  ds.name = seq.base.name + "/task" + std::to_string(task + 1);
  return ds;
}

// Standard-normal prior over every parameter (the task-1 prior).
inline ChainedPrior standard_normal_prior(const NetworkModel& model) {
  ChainedPrior p;
  p.mu0.reserve(model.layer_count());
  p.p0.reserve(model.layer_count());
  for (const auto& spec : model.layers) {
    p.mu0.emplace_back(Tensor({spec.param_count()}));
    p.p0.emplace_back(Tensor::full({spec.param_count()}, 1.0));
  }
  return p;
}

// VCL recursion: the current posterior becomes the next task's prior,
// mu0 <- mu and p0 <- 1/sigma^2 = N(s + dt + gamma) per parameter.
inline ChainedPrior chain_prior(const GaussianPosterior& post) {
  ChainedPrior p;
  p.mu0 = post.mu;
  p.p0.reserve(post.mu.size());
  for (std::size_t li = 0; li < post.mu.size(); ++li) {
    if (post.mu[li].size() == 0) {
      p.p0.emplace_back(Tensor({0}));
      continue;
    }
    const Tensor var = post.sigma2(li);  // throws when sigma^2 is not finite
    Tensor prec({var.size()});
    for (std::int64_t j = 0; j < var.size(); ++j) prec[j] = 1.0 / var[j];
    p.p0.push_back(std::move(prec));
  }
  return p;
}

struct ContinualResult {
  // accuracy[t][u]: accuracy on task u after finishing task t (u <= t)
  std::vector<std::vector<double>> accuracy;
  std::vector<double> average_accuracy;  // mean over tasks seen so far
  std::vector<Checkpoint> checkpoints;   // optional use by the CLI
};

// Train tasks in order, never revisiting data; after each task evaluate on
// all tasks seen so far.
inline ContinualResult run_continual(const TaskSequence& seq, const RunConfig& cfg) {
  ContinualResult result;
  TrainSession session(cfg, task_dataset(seq, 0));
  ChainedPrior prior = standard_normal_prior(session.model());

  for (int task = 0; task < seq.tasks(); ++task) {
    if (task > 0) {
      session.set_dataset(task_dataset(seq, task));
      if (cfg.continual.reset_mean) session.reinit_params(static_cast<std::uint64_t>(task));
      session.reset_optimizer();
    }
    TrainOptions opts;
    opts.prior = &prior;
    opts.init_precision = cfg.continual.init_precision;
    session.set_prior(&prior);
    session.initialise_scale(opts);
    session.train_epochs(cfg.continual.epochs_per_task, opts);

    std::vector<double> row;
    for (int u = 0; u <= task; ++u) {
      const data::Dataset eval_ds = task_dataset(seq, u);
      const Tensor pred = session.predict_split(eval_ds.val, task, "eval.continual");
      row.push_back(metrics::accuracy(pred, eval_ds.val.labels));
    }
    double avg = 0.0;
    for (double a : row) avg += a;
    result.average_accuracy.push_back(avg / static_cast<double>(row.size()));
    result.accuracy.push_back(std::move(row));

    if (task + 1 < seq.tasks() && cfg.continual.chain_prior) {
      const GaussianPosterior post =
          make_posterior(session.model(), session.opt_state(), cfg.hp, &prior);
      prior = chain_prior(post);
    } else if (task + 1 < seq.tasks()) {
      prior = standard_normal_prior(session.model());
    }
  }
  return result;
}

}  // namespace ngvi::continual
