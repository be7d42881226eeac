#pragma once

#include <cstdint>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ngvi/errors.hpp"
#include "ngvi/network.hpp"
#include "ngvi/posterior.hpp"
#include "ngvi/rng.hpp"
#include "ngvi/tensor.hpp"

// Simulated multi-worker training: workers are threads standing in for GPUs.
// Each iteration is fork-join: the coordinator owns model and posterior,
// workers receive read-only snapshots and return (g, h) contribution pairs,
// and the reduction plus optimizer step run serially on the coordinator.

namespace ngvi::parallel {

enum class RngKeying {
  example,  // weight draws keyed by global example position: reduction is
            // independent of the worker count
  worker,   // weight draws keyed by worker: matches the per-GPU sampling of
            // distributed training, invariant only in distribution
};

enum class GradMode { sampled, at_mean };

struct WorkerPlan {
  int workers = 1;
  std::vector<std::vector<std::int64_t>> local_indices;  // disjoint cover of [0, M)
  int mc_samples = 1;  // per worker (worker keying) or per example (example keying)
  RngKeying keying = RngKeying::example;
  GradMode mode = GradMode::sampled;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

// Contiguous near-equal partition: sizes differ by at most one and
// concatenation in worker order reproduces the input order.
inline std::vector<std::vector<std::int64_t>> partition_indices(std::int64_t m, int p) {
  if (p < 1) throw std::invalid_argument("partition: worker count must be >= 1");
  if (static_cast<std::int64_t>(p) > m) {
    throw std::invalid_argument("partition: more workers than examples");
  }
  std::vector<std::vector<std::int64_t>> out(static_cast<std::size_t>(p));
  const std::int64_t base = m / p, extra = m % p;
  std::int64_t next = 0;
  for (int w = 0; w < p; ++w) {
    const std::int64_t count = base + (w < extra ? 1 : 0);
    auto& slot = out[static_cast<std::size_t>(w)];
    slot.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) slot.push_back(next++);
  }
  return out;
}

inline WorkerPlan make_plan(std::int64_t batch_size, int workers, int mc_samples,
                            RngKeying keying, GradMode mode, std::uint64_t seed,
                            std::uint64_t step) {
  WorkerPlan plan;
  plan.workers = workers;
  plan.local_indices = partition_indices(batch_size, workers);
  plan.mc_samples = mc_samples;
  plan.keying = keying;
  plan.mode = mode;
  plan.seed = seed;
  plan.step = step;
  return plan;
}

inline std::vector<Tensor> split_minibatch(const Tensor& batch, int p) {
  if (batch.rank() != 2) throw std::invalid_argument("split_minibatch: batch must be [M x d]");
  const auto parts = partition_indices(batch.dim(0), p);
  const std::int64_t d = batch.dim(1);
  std::vector<Tensor> out;
  out.reserve(parts.size());
  for (const auto& idx : parts) {
    Tensor local({static_cast<std::int64_t>(idx.size()), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy(batch.data() + idx[i] * d, batch.data() + (idx[i] + 1) * d,
                local.data() + static_cast<std::int64_t>(i) * d);
    }
    out.push_back(std::move(local));
  }
  return out;
}

// One worker's (g, h) pair, per layer.
struct Contribution {
  std::vector<Tensor> g;
  std::vector<Tensor> h;
};

// Elementwise arithmetic mean of the contributions, accumulated in a fixed
// binary-tree order so the result is deterministic for a fixed worker count.
inline Contribution all_reduce_mean(std::vector<Contribution> contributions) {
  const std::size_t p = contributions.size();
  if (p == 0) throw std::invalid_argument("all_reduce_mean: no contributions");
  for (std::size_t w = 1; w < p; ++w) {
    if (contributions[w].g.size() != contributions[0].g.size()) {
      throw std::invalid_argument("all_reduce_mean: contribution layer count mismatch");
    }
  }
  for (std::size_t stride = 1; stride < p; stride *= 2) {
    for (std::size_t i = 0; i + stride < p; i += 2 * stride) {
      auto& dst = contributions[i];
      const auto& src = contributions[i + stride];
      for (std::size_t l = 0; l < dst.g.size(); ++l) {
        dst.g[l] += src.g[l];  // shape mismatch throws here
        dst.h[l] += src.h[l];
      }
    }
  }
  Contribution result = std::move(contributions[0]);
  const double inv = 1.0 / static_cast<double>(p);
  for (auto& t : result.g) t *= inv;
  for (auto& t : result.h) t *= inv;
  return result;
}

// Per-layer batch-statistics snapshot so the coordinator can apply the
// running-statistics update after reduction.
struct BnStats {
  std::vector<Tensor> mean, var;  // per layer, empty slots for non-batchnorm
  double weight = 0.0;            // examples*samples that contributed
  bool present = false;
};

struct StepResult {
  std::vector<Tensor> gbar;
  std::vector<Tensor> hdiag;
  double mean_loss = 0.0;
  BnStats bn;
};

namespace detail {

struct WorkerOutput {
  Contribution contrib;
  double loss_sum = 0.0;  // pre-scaled like the gradient contribution
  BnStats bn;
};

inline void accumulate_bn(BnStats& acc, const NetworkModel& model, const ForwardCache& cache,
                          double weight) {
  if (!acc.present) {
    acc.mean.resize(model.layer_count());
    acc.var.resize(model.layer_count());
    for (std::size_t li = 0; li < model.layer_count(); ++li) {
      if (model.layers[li].kind == LayerKind::batchnorm) {
        acc.mean[li] = Tensor({model.layers[li].dim});
        acc.var[li] = Tensor({model.layers[li].dim});
      }
    }
    acc.present = true;
  }
  for (std::size_t li = 0; li < model.layer_count(); ++li) {
    if (model.layers[li].kind != LayerKind::batchnorm) continue;
    acc.mean[li] += cache.bn_mean[li] * weight;
    acc.var[li] += cache.bn_var[li] * weight;
  }
  acc.weight += weight;
}

inline Tensor gather_rows(const Tensor& inputs, const std::vector<std::int64_t>& idx) {
  const std::int64_t d = inputs.dim(1);
  Tensor out({static_cast<std::int64_t>(idx.size()), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(inputs.data() + idx[i] * d, inputs.data() + (idx[i] + 1) * d,
              out.data() + static_cast<std::int64_t>(i) * d);
  }
  return out;
}

inline void add_scaled(std::vector<Tensor>& acc, const std::vector<Tensor>& src, double c) {
  for (std::size_t l = 0; l < acc.size(); ++l) {
    for (std::int64_t j = 0; j < acc[l].size(); ++j) acc[l][j] += c * src[l][j];
  }
}

// Worker body. Contributions are the per-GPU quantities of the distributed
// update scaled by P, so that the unweighted mean-reduction recovers the
// global-batch mean for any partition shape:
//   contribution_w = (P / M_global) * sum_{i in local} mean_k quantity_i^(k)
inline WorkerOutput run_worker(const NetworkModel& model, const Posterior& post,
                               const Tensor& inputs, const std::vector<int>& labels,
                               const WorkerPlan& plan, int worker) {
  NetworkModel scratch = model;
  const auto& local = plan.local_indices[static_cast<std::size_t>(worker)];
  const std::int64_t m_global = inputs.dim(0);
  const double scale =
      static_cast<double>(plan.workers) / static_cast<double>(m_global);
  const std::uint64_t mc_tag = stream_tag("train.mc");

  WorkerOutput out;
  out.contrib.g.reserve(model.layer_count());
  out.contrib.h.reserve(model.layer_count());
  for (const auto& l : model.layers) {
    out.contrib.g.emplace_back(Tensor({l.param_count()}));
    out.contrib.h.emplace_back(Tensor({l.param_count()}));
  }

  const int k_samples = plan.mode == GradMode::at_mean ? 1 : plan.mc_samples;
  const double k_inv = 1.0 / static_cast<double>(k_samples);

  if (plan.keying == RngKeying::worker) {
    const Tensor local_inputs = gather_rows(inputs, local);
    std::vector<int> local_labels;
    local_labels.reserve(local.size());
    for (auto idx : local) local_labels.push_back(labels[static_cast<std::size_t>(idx)]);
    for (int k = 0; k < k_samples; ++k) {
      RngStream rng(plan.seed, derive_stream({mc_tag, plan.step,
                                              static_cast<std::uint64_t>(worker),
                                              static_cast<std::uint64_t>(k)}));
      scratch.params = plan.mode == GradMode::at_mean ? post.point_view() : post.sample(rng);
      auto [logits, cache] = forward(scratch, local_inputs, Mode::train);
      auto [loss, dlogits] = loss_and_grad(logits, local_labels);
      const PerExampleGrads grads = backward_per_example(scratch, cache, dlogits);
      // local mean * local_n = local sum; apply the P/M scale and 1/K
      const double c = scale * static_cast<double>(local.size()) * k_inv;
      add_scaled(out.contrib.g, mean_grads(grads), c);
      add_scaled(out.contrib.h, gauss_newton_diag(grads), c);
      out.loss_sum += loss * static_cast<double>(local.size()) * k_inv * scale;
      accumulate_bn(out.bn, scratch, cache, static_cast<double>(local.size()) * k_inv);
    }
  } else {
    // example keying: each example carries its own weight draws, so the
    // reduced result does not depend on which worker processes it
    for (const std::int64_t idx : local) {
      Tensor row({1, inputs.dim(1)});
      std::copy(inputs.data() + idx * inputs.dim(1), inputs.data() + (idx + 1) * inputs.dim(1),
                row.data());
      const std::vector<int> row_label{labels[static_cast<std::size_t>(idx)]};
      for (int k = 0; k < k_samples; ++k) {
        RngStream rng(plan.seed, derive_stream({mc_tag, plan.step,
                                                static_cast<std::uint64_t>(idx),
                                                static_cast<std::uint64_t>(k)}));
        scratch.params = plan.mode == GradMode::at_mean ? post.point_view() : post.sample(rng);
        auto [logits, cache] = forward(scratch, row, Mode::train);
        auto [loss, dlogits] = loss_and_grad(logits, row_label);
        const PerExampleGrads grads = backward_per_example(scratch, cache, dlogits);
        const double c = scale * k_inv;
        add_scaled(out.contrib.g, mean_grads(grads), c);
        add_scaled(out.contrib.h, gauss_newton_diag(grads), c);
        out.loss_sum += loss * k_inv * scale;
      }
    }
  }
  return out;
}

}  // namespace detail

// One distributed gradient evaluation: every worker draws its own weight
// samples, computes local (g, h) over its slice, and the coordinator reduces.
// The returned pair is ready for vogn_step / ogn_step.
inline StepResult parallel_step(const NetworkModel& model, const Posterior& post,
                                const Tensor& inputs, const std::vector<int>& labels,
                                const WorkerPlan& plan) {
  if (plan.local_indices.empty() ||
      static_cast<int>(plan.local_indices.size()) != plan.workers) {
    throw std::invalid_argument("parallel_step: plan does not match worker count");
  }
  std::int64_t covered = 0;
  for (const auto& part : plan.local_indices) covered += static_cast<std::int64_t>(part.size());
  if (covered != inputs.dim(0)) {
    throw std::invalid_argument("parallel_step: plan does not cover the batch");
  }
  if (plan.keying == RngKeying::example && model.has_batchnorm()) {
    throw std::invalid_argument(
        "parallel_step: example-keyed sampling is incompatible with batchnorm "
        "(train-mode statistics need the local batch); use worker keying");
  }

  std::vector<detail::WorkerOutput> outputs(static_cast<std::size_t>(plan.workers));
  if (plan.workers == 1) {
    outputs[0] = detail::run_worker(model, post, inputs, labels, plan, 0);
  } else {
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(plan.workers));
    for (int w = 0; w < plan.workers; ++w) {
      threads.emplace_back([&, w] {
        outputs[static_cast<std::size_t>(w)] =
            detail::run_worker(model, post, inputs, labels, plan, w);
      });
    }
    for (auto& t : threads) t.join();
  }

  std::vector<Contribution> contribs;
  contribs.reserve(outputs.size());
  double loss = 0.0;
  BnStats bn;
  for (auto& o : outputs) {
    contribs.push_back(std::move(o.contrib));
    loss += o.loss_sum;
    if (o.bn.present) {
      if (!bn.present) {
        bn = std::move(o.bn);
      } else {
        for (std::size_t li = 0; li < bn.mean.size(); ++li) {
          if (bn.mean[li].size() == 0) continue;
          bn.mean[li] += o.bn.mean[li];
          bn.var[li] += o.bn.var[li];
        }
        bn.weight += o.bn.weight;
      }
    }
  }
  Contribution reduced = all_reduce_mean(std::move(contribs));

  StepResult result;
  result.gbar = std::move(reduced.g);
  result.hdiag = std::move(reduced.h);
  result.mean_loss = loss / static_cast<double>(plan.workers);
  result.bn = std::move(bn);
  return result;
}

// Apply the reduced batch statistics to the model's running buffers; called
// once per iteration on the coordinator.
inline void apply_bn_stats(NetworkModel& model, const BnStats& bn) {
  if (!bn.present || bn.weight <= 0.0) return;
  for (std::size_t li = 0; li < model.layer_count(); ++li) {
    if (model.layers[li].kind != LayerKind::batchnorm) continue;
    auto& buf = model.bn[li];
    const double inv = 1.0 / bn.weight;
    for (std::int64_t j = 0; j < buf.running_mean.size(); ++j) {
      buf.running_mean[j] = (1.0 - buf.momentum) * buf.running_mean[j] +
                            buf.momentum * bn.mean[li][j] * inv;
      buf.running_var[j] = (1.0 - buf.momentum) * buf.running_var[j] +
                           buf.momentum * bn.var[li][j] * inv;
    }
  }
}

}  // namespace ngvi::parallel
