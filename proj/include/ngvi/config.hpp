#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ngvi/data.hpp"
#include "ngvi/errors.hpp"
#include "ngvi/network.hpp"
#include "ngvi/optimizers.hpp"
#include "ngvi/serialize.hpp"

// Run configuration: JSON with a versioned schema. Validation is strict —
// unknown keys are rejected everywhere, and every field is checked before any
// computation starts.

namespace ngvi {

inline constexpr int kConfigSchemaVersion = 1;

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError(where + ": unknown key \"" + key + "\"");
    }
  }
}

}  // namespace detail

struct DatasetConfig {
  std::string kind = "two-moons";  // two-moons | gaussian-blobs | digits | idx
  std::int64_t n_train = 200;
  std::int64_t n_val = 200;
  double noise = 0.1;
  int classes = 3;
  double center_radius = 5.0;
  std::vector<double> shift;
  std::string train_images, train_labels, val_images, val_labels;  // idx only
};

struct TrainSection {
  int epochs = 100;
  std::int64_t batch_size = 32;
  int eval_every = 10;
  int eval_mc_samples = 10;  // validation-time MC samples
  bool timing_log = false;
};

struct ParallelSection {
  int workers = 1;
  std::string rng_keying = "auto";  // auto | example | worker
};

struct ContinualSection {
  int tasks = 3;
  int epochs_per_task = 50;
  double init_precision = 1e6;
  bool chain_prior = true;
  bool reset_mean = true;
};

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  DatasetConfig dataset;
  data::AugmentationSpec augmentation;
  std::vector<LayerSpec> layers;
  std::string optimizer = "vogn";  // sgd | adam | ogn | vogn | noisy-kfac
  Hyperparams hp;
  TrainSection train;
  ParallelSection parallel;
  ContinualSection continual;
};

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"kind", "n_train", "n_val", "noise", "classes", "center_radius",
                               "shift", "train_images", "train_labels", "val_images",
                               "val_labels"},
                              "dataset");
  DatasetConfig d;
  d.kind = j.value("kind", d.kind);
  d.n_train = j.value("n_train", d.n_train);
  d.n_val = j.value("n_val", d.n_val);
  d.noise = j.value("noise", d.noise);
  d.classes = j.value("classes", d.classes);
  d.center_radius = j.value("center_radius", d.center_radius);
  if (j.contains("shift")) d.shift = j.at("shift").get<std::vector<double>>();
  d.train_images = j.value("train_images", std::string{});
  d.train_labels = j.value("train_labels", std::string{});
  d.val_images = j.value("val_images", std::string{});
  d.val_labels = j.value("val_labels", std::string{});
  if (d.kind != "two-moons" && d.kind != "gaussian-blobs" && d.kind != "digits" &&
      d.kind != "idx") {
    throw ConfigError("dataset: unknown kind \"" + d.kind + "\"");
  }
  if (d.kind == "idx" && (d.train_images.empty() || d.train_labels.empty() ||
                          d.val_images.empty() || d.val_labels.empty())) {
    throw ConfigError("dataset: idx kind requires all four file paths");
  }
  if (d.kind != "idx" && d.n_train < 2) throw ConfigError("dataset: n_train must be >= 2");
  return d;
}

inline nlohmann::json dataset_config_to_json(const DatasetConfig& d) {
  nlohmann::json j{{"kind", d.kind}};
  if (d.kind == "idx") {
    j["train_images"] = d.train_images;
    j["train_labels"] = d.train_labels;
    j["val_images"] = d.val_images;
    j["val_labels"] = d.val_labels;
  } else {
    j["n_train"] = d.n_train;
    j["n_val"] = d.n_val;
    j["noise"] = d.noise;
    if (d.kind == "gaussian-blobs") {
      j["classes"] = d.classes;
      j["center_radius"] = d.center_radius;
      if (!d.shift.empty()) j["shift"] = d.shift;
    }
  }
  return j;
}

inline Hyperparams hyperparams_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"name",         "alpha",        "alpha_init",    "warmup_epochs", "beta1",
          "beta2",        "delta",        "gamma",         "tau",           "tau_init",
          "tau_warmup_epochs", "train_mc_samples", "rho",  "eps",           "l2",
          "weight_decay", "decay_epochs", "decay_factor",  "standard_adam"},
      "optimizer");
  Hyperparams hp;
  hp.alpha = j.value("alpha", hp.alpha);
  hp.alpha_init = j.value("alpha_init", hp.alpha_init);
  hp.warmup_epochs = j.value("warmup_epochs", hp.warmup_epochs);
  hp.beta1 = j.value("beta1", hp.beta1);
  hp.beta2 = j.value("beta2", hp.beta2);
  hp.delta = j.value("delta", hp.delta);
  hp.gamma = j.value("gamma", hp.gamma);
  hp.tau = j.value("tau", hp.tau);
  hp.tau_init = j.value("tau_init", hp.tau_init);
  hp.tau_warmup_epochs = j.value("tau_warmup_epochs", hp.tau_warmup_epochs);
  hp.train_mc_samples = j.value("train_mc_samples", hp.train_mc_samples);
  hp.rho = j.value("rho", hp.rho);
  hp.eps = j.value("eps", hp.eps);
  hp.l2 = j.value("l2", hp.l2);
  hp.weight_decay = j.value("weight_decay", hp.weight_decay);
  if (j.contains("decay_epochs")) hp.decay_epochs = j.at("decay_epochs").get<std::vector<int>>();
  hp.decay_factor = j.value("decay_factor", hp.decay_factor);
  hp.standard_adam = j.value("standard_adam", hp.standard_adam);
  hp.validate();
  return hp;
}

inline nlohmann::json hyperparams_to_json(const std::string& name, const Hyperparams& hp) {
  return nlohmann::json{{"name", name},
                        {"alpha", hp.alpha},
                        {"alpha_init", hp.alpha_init},
                        {"warmup_epochs", hp.warmup_epochs},
                        {"beta1", hp.beta1},
                        {"beta2", hp.beta2},
                        {"delta", hp.delta},
                        {"gamma", hp.gamma},
                        {"tau", hp.tau},
                        {"tau_init", hp.tau_init},
                        {"tau_warmup_epochs", hp.tau_warmup_epochs},
                        {"train_mc_samples", hp.train_mc_samples},
                        {"rho", hp.rho},
                        {"eps", hp.eps},
                        {"l2", hp.l2},
                        {"weight_decay", hp.weight_decay},
                        {"decay_epochs", hp.decay_epochs},
                        {"decay_factor", hp.decay_factor},
                        {"standard_adam", hp.standard_adam}};
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"schema_version", "seed", "out_dir", "dataset", "augmentation",
                               "model", "optimizer", "train", "parallel", "continual"},
                              "config");
  RunConfig cfg;
  if (!j.contains("schema_version")) throw ConfigError("config: missing schema_version");
  cfg.schema_version = j.at("schema_version").get<int>();
  if (cfg.schema_version != kConfigSchemaVersion) {
    throw ConfigError("config: unsupported schema_version " +
                      std::to_string(cfg.schema_version));
  }
  cfg.seed = j.value("seed", std::uint64_t{0});
  cfg.out_dir = j.value("out_dir", std::string{"run"});
  if (j.contains("dataset")) cfg.dataset = dataset_config_from_json(j.at("dataset"));

  if (j.contains("augmentation")) {
    const auto& a = j.at("augmentation");
    detail::reject_unknown_keys(a, {"pad", "crop", "hflip", "rho"}, "augmentation");
    cfg.augmentation.pad = a.value("pad", std::int64_t{0});
    cfg.augmentation.crop = a.value("crop", std::int64_t{0});
    cfg.augmentation.hflip = a.value("hflip", false);
    cfg.augmentation.rho_override = a.value("rho", 0.0);
    if (cfg.augmentation.pad < 0 || cfg.augmentation.crop < 0) {
      throw ConfigError("augmentation: pad/crop must be >= 0");
    }
  }

  if (!j.contains("model")) throw ConfigError("config: missing model section");
  const auto& mj = j.at("model");
  detail::reject_unknown_keys(mj, {"layers"}, "model");
  if (!mj.contains("layers") || !mj.at("layers").is_array() || mj.at("layers").empty()) {
    throw ConfigError("model: layers must be a nonempty array");
  }
  for (const auto& lj : mj.at("layers")) {
    detail::reject_unknown_keys(lj,
                                {"kind", "in", "out", "bias", "in_channels", "out_channels",
                                 "kernel", "stride", "pad", "dim"},
                                "model.layers");
    cfg.layers.push_back(layer_spec_from_json(lj));
  }

  if (!j.contains("optimizer")) throw ConfigError("config: missing optimizer section");
  const auto& oj = j.at("optimizer");
  cfg.optimizer = oj.value("name", std::string{});
  if (cfg.optimizer != "sgd" && cfg.optimizer != "adam" && cfg.optimizer != "ogn" &&
      cfg.optimizer != "vogn" && cfg.optimizer != "noisy-kfac") {
    throw ConfigError("optimizer: unknown name \"" + cfg.optimizer + "\"");
  }
  cfg.hp = hyperparams_from_json(oj);

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown_keys(
        t, {"epochs", "batch_size", "eval_every", "eval_mc_samples", "timing_log"}, "train");
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.eval_every = t.value("eval_every", cfg.train.eval_every);
    cfg.train.eval_mc_samples = t.value("eval_mc_samples", cfg.train.eval_mc_samples);
    cfg.train.timing_log = t.value("timing_log", cfg.train.timing_log);
    if (cfg.train.epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (cfg.train.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (cfg.train.eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
    if (cfg.train.eval_mc_samples < 1) throw ConfigError("train: eval_mc_samples must be >= 1");
  }

  if (j.contains("parallel")) {
    const auto& p = j.at("parallel");
    detail::reject_unknown_keys(p, {"workers", "rng_keying"}, "parallel");
    cfg.parallel.workers = p.value("workers", 1);
    cfg.parallel.rng_keying = p.value("rng_keying", std::string{"auto"});
    if (cfg.parallel.workers < 1) throw ConfigError("parallel: workers must be >= 1");
    if (cfg.parallel.rng_keying != "auto" && cfg.parallel.rng_keying != "example" &&
        cfg.parallel.rng_keying != "worker") {
      throw ConfigError("parallel: rng_keying must be auto|example|worker");
    }
  }

  if (j.contains("continual")) {
    const auto& c = j.at("continual");
    detail::reject_unknown_keys(
        c, {"tasks", "epochs_per_task", "init_precision", "chain_prior", "reset_mean"},
        "continual");
    cfg.continual.tasks = c.value("tasks", cfg.continual.tasks);
    cfg.continual.epochs_per_task = c.value("epochs_per_task", cfg.continual.epochs_per_task);
    cfg.continual.init_precision = c.value("init_precision", cfg.continual.init_precision);
    cfg.continual.chain_prior = c.value("chain_prior", cfg.continual.chain_prior);
    cfg.continual.reset_mean = c.value("reset_mean", cfg.continual.reset_mean);
    if (cfg.continual.tasks < 1) throw ConfigError("continual: tasks must be >= 1");
    if (cfg.continual.epochs_per_task < 1) {
      throw ConfigError("continual: epochs_per_task must be >= 1");
    }
    if (!(cfg.continual.init_precision > 0.0)) {
      throw ConfigError("continual: init_precision must be > 0");
    }
  }

  // model/dataset compatibility is checked when the model is built; optimizer
  // support constraints are cheap to check here
  if (cfg.optimizer == "noisy-kfac") {
    for (const auto& l : cfg.layers) {
      if (l.kind == LayerKind::conv2d) {
        throw ConfigError("optimizer: noisy-kfac supports dense architectures only");
      }
    }
  }
  return cfg;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : cfg.layers) layers.push_back(layer_spec_to_json(l));
  nlohmann::json j{{"schema_version", cfg.schema_version},
                   {"seed", cfg.seed},
                   {"out_dir", cfg.out_dir},
                   {"dataset", dataset_config_to_json(cfg.dataset)},
                   {"model", {{"layers", layers}}},
                   {"optimizer", hyperparams_to_json(cfg.optimizer, cfg.hp)},
                   {"train",
                    {{"epochs", cfg.train.epochs},
                     {"batch_size", cfg.train.batch_size},
                     {"eval_every", cfg.train.eval_every},
                     {"eval_mc_samples", cfg.train.eval_mc_samples},
                     {"timing_log", cfg.train.timing_log}}},
                   {"parallel",
                    {{"workers", cfg.parallel.workers},
                     {"rng_keying", cfg.parallel.rng_keying}}},
                   {"augmentation",
                    {{"pad", cfg.augmentation.pad},
                     {"crop", cfg.augmentation.crop},
                     {"hflip", cfg.augmentation.hflip},
                     {"rho", cfg.augmentation.rho_override}}},
                   {"continual",
                    {{"tasks", cfg.continual.tasks},
                     {"epochs_per_task", cfg.continual.epochs_per_task},
                     {"init_precision", cfg.continual.init_precision},
                     {"chain_prior", cfg.continual.chain_prior},
                     {"reset_mean", cfg.continual.reset_mean}}}};
  return j;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// Build the dataset a config describes.
inline data::Dataset build_dataset(const DatasetConfig& d, std::uint64_t seed) {
  if (d.kind == "idx") {
    return data::dataset_from_idx(d.train_images, d.train_labels, d.val_images, d.val_labels);
  }
  data::SyntheticParams p;
  p.n = d.n_train;
  p.noise = d.noise;
  p.classes = d.classes;
  p.center_radius = d.center_radius;
  p.shift = d.shift;
  return data::make_synthetic(data::synthetic_kind_from_string(d.kind), d.n_train, d.n_val, p,
                              seed);
}

}  // namespace ngvi
