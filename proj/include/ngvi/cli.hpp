#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ngvi/config.hpp"
#include "ngvi/continual.hpp"
#include "ngvi/data.hpp"
#include "ngvi/metrics.hpp"
#include "ngvi/posterior.hpp"
#include "ngvi/reports.hpp"
#include "ngvi/serialize.hpp"
#include "ngvi/trainer.hpp"

// Command-line front end: train / eval / ood / sweep / continual, driven by a
// JSON config. Exit codes: 0 success, 2 config error, 3 numeric failure.

namespace ngvi::cli {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out_dir;
};

inline void apply_overrides(RunConfig& cfg, const CommonFlags& flags) {
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.workers) cfg.parallel.workers = *flags.workers;
  // precedence for the output dir: --out flag, then NGVI_OUT, then config
  if (flags.out_dir) {
    cfg.out_dir = *flags.out_dir;
  } else if (const char* env = std::getenv("NGVI_OUT"); env != nullptr && *env != '\0') {
    cfg.out_dir = env;
  }
}

inline void write_eval_artifacts(const std::string& dir, const Tensor& predictions,
                                 const std::vector<int>& labels) {
  reports::write_predictions_csv(dir + "/predictions.csv", predictions, labels);
  const auto report = metrics::compute_report(predictions, labels);
  reports::write_json(dir + "/metrics.json", metrics::report_to_json(report));
  reports::write_calibration_csv(dir + "/calibration.csv", report.calibration);
  reports::write_entropy_hist_csv(dir + "/entropy_hist.csv", report.entropy_hist);
}

inline void write_train_log(const std::string& path, const std::vector<EpochLog>& logs) {
  auto os = reports::open_out(path);
  os << "epoch,train_acc,val_acc,val_nll,wall_time_s\n";
  for (const auto& l : logs) {
    os << l.epoch << "," << reports::fmt(l.train_acc) << "," << reports::fmt(l.val_acc) << ","
       << reports::fmt(l.val_nll) << "," << reports::fmt(l.wall_seconds) << "\n";
  }
}

inline void write_timing_log(const std::string& path, const std::vector<IterationTiming>& rows,
                             int workers) {
  auto os = reports::open_out(path);
  os << "step,epoch,millis,workers\n";
  for (const auto& r : rows) {
    os << r.step << "," << r.epoch << "," << reports::fmt(r.millis) << "," << workers << "\n";
  }
}

inline int cmd_train(const CommonFlags& flags) {
  RunConfig cfg = load_config(flags.config_path);
  apply_overrides(cfg, flags);
  const data::Dataset dataset = build_dataset(cfg.dataset, cfg.seed);
  TrainRun run = run_training(cfg, dataset);
  const std::string dir = cfg.out_dir;
  std::filesystem::create_directories(dir);
  reports::write_json(dir + "/config_echo.json", config_to_json(cfg));
  write_train_log(dir + "/train_log.csv", run.logs);
  if (cfg.train.timing_log) {
    write_timing_log(dir + "/timing.csv", run.timings, cfg.parallel.workers);
  }
  write_checkpoint(dir + "/checkpoint.ngvi", run.session.model(), cfg.optimizer,
                   run.session.opt_state(), cfg.hp.gamma, cfg.hp.tau);
  const Tensor predictions =
      run.session.predict_split(run.session.dataset().val, cfg.train.epochs, "eval.final");
  write_eval_artifacts(dir, predictions, run.session.dataset().val.labels);
  std::cout << "train: wrote " << dir << "\n";
  return 0;
}

inline Posterior posterior_from_checkpoint(const Checkpoint& ck) {
  if (ck.optimizer_name == "vogn" || ck.optimizer_name == "ogn") {
    GaussianPosterior g;
    g.mu = ck.model.params;
    g.s = ck.state.s;
    g.delta_tilde = ck.state.delta_tilde;
    g.gamma = ck.gamma;
    g.n = ck.state.n_eff;
    for (const auto& l : ck.model.layers) {
      g.sampled.push_back(l.kind == LayerKind::dense || l.kind == LayerKind::conv2d);
    }
    return Posterior::diagonal(std::move(g));
  }
  if (ck.optimizer_name == "noisy-kfac") {
    Hyperparams hp;
    hp.gamma = ck.gamma;
    return Posterior::kronecker(make_kronecker_posterior(ck.model, ck.state, hp));
  }
  return Posterior::point(ck.model);
}

inline void check_architecture(const Checkpoint& ck, const RunConfig& cfg) {
  if (ck.model.layers.size() != cfg.layers.size()) {
    throw ConfigError("checkpoint/architecture mismatch: layer count differs");
  }
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    if (layer_spec_to_json(ck.model.layers[i]) != layer_spec_to_json(cfg.layers[i])) {
      throw ConfigError("checkpoint/architecture mismatch at layer " + std::to_string(i));
    }
  }
}

inline int cmd_eval(const CommonFlags& flags, const std::string& checkpoint_path,
                    std::optional<int> mc_override) {
  RunConfig cfg = load_config(flags.config_path);
  apply_overrides(cfg, flags);
  const Checkpoint ck = read_checkpoint(checkpoint_path);
  check_architecture(ck, cfg);
  const data::Dataset dataset = build_dataset(cfg.dataset, cfg.seed);
  const int mc = mc_override.value_or(cfg.train.eval_mc_samples);
  const Posterior post = posterior_from_checkpoint(ck);
  NetworkModel model = ck.model;
  const Tensor predictions =
      predict_mc(model, post, dataset.val.inputs, mc, cfg.seed, stream_tag("eval.cmd"));
  const std::string dir = cfg.out_dir;
  std::filesystem::create_directories(dir);
  write_eval_artifacts(dir, predictions, dataset.val.labels);
  // ROC over the correct/incorrect confidence split
  const auto conf = metrics::confidences(predictions);
  const auto corr = metrics::correctness(predictions, dataset.val.labels);
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < corr.size(); ++i) (corr[i] ? pos : neg).push_back(conf[i]);
  if (!pos.empty() && !neg.empty()) {
    reports::write_roc_csv(dir + "/roc.csv", metrics::roc_points(pos, neg));
  }
  std::cout << "eval: wrote " << dir << "\n";
  return 0;
}

// Out-of-distribution config: an in-distribution dataset plus named
// out-of-distribution datasets.
struct OodConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::string out_dir = "ood";
  DatasetConfig in_dataset;
  std::vector<std::pair<std::string, DatasetConfig>> out_datasets;
  int mc_samples = 10;
};

inline OodConfig load_ood_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("ood config: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("ood config: invalid JSON: " + std::string(e.what()));
  }
  detail::reject_unknown_keys(
      j, {"schema_version", "seed", "out_dir", "in_dataset", "out_datasets", "mc_samples"},
      "ood config");
  OodConfig cfg;
  if (!j.contains("schema_version")) throw ConfigError("ood config: missing schema_version");
  cfg.schema_version = j.at("schema_version").get<int>();
  if (cfg.schema_version != kConfigSchemaVersion) {
    throw ConfigError("ood config: unsupported schema_version");
  }
  cfg.seed = j.value("seed", std::uint64_t{0});
  cfg.out_dir = j.value("out_dir", std::string{"ood"});
  if (!j.contains("in_dataset")) throw ConfigError("ood config: missing in_dataset");
  cfg.in_dataset = dataset_config_from_json(j.at("in_dataset"));
  if (!j.contains("out_datasets") || !j.at("out_datasets").is_array() ||
      j.at("out_datasets").empty()) {
    throw ConfigError("ood config: out_datasets must be a nonempty array");
  }
  for (const auto& oj : j.at("out_datasets")) {
    if (!oj.contains("name")) throw ConfigError("ood config: out dataset needs a name");
    nlohmann::json spec = oj;
    spec.erase("name");
    cfg.out_datasets.emplace_back(oj.at("name").get<std::string>(),
                                  dataset_config_from_json(spec));
  }
  cfg.mc_samples = j.value("mc_samples", 10);
  if (cfg.mc_samples < 1) throw ConfigError("ood config: mc_samples must be >= 1");
  return cfg;
}

inline int cmd_ood(const CommonFlags& flags, const std::string& checkpoint_path) {
  OodConfig cfg = load_ood_config(flags.config_path);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.out_dir) {
    cfg.out_dir = *flags.out_dir;
  } else if (const char* env = std::getenv("NGVI_OUT"); env != nullptr && *env != '\0') {
    cfg.out_dir = env;
  }
  const Checkpoint ck = read_checkpoint(checkpoint_path);
  const Posterior post = posterior_from_checkpoint(ck);
  NetworkModel model = ck.model;
  const std::string dir = cfg.out_dir;
  std::filesystem::create_directories(dir);

  const data::Dataset in_ds = build_dataset(cfg.in_dataset, cfg.seed);
  const Tensor in_pred =
      predict_mc(model, post, in_ds.val.inputs, cfg.mc_samples, cfg.seed, stream_tag("ood.in"));
  const auto in_entropy = metrics::predictive_entropy(in_pred);
  const auto in_conf = metrics::confidences(in_pred);
  reports::write_entropy_hist_csv(dir + "/entropy_hist_in.csv",
                                  metrics::entropy_histogram(in_entropy, in_pred.dim(1)));

  double in_mean_entropy = 0.0;
  for (double e : in_entropy) in_mean_entropy += e;
  in_mean_entropy /= static_cast<double>(in_entropy.size());

  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t oi = 0; oi < cfg.out_datasets.size(); ++oi) {
    const auto& [name, spec] = cfg.out_datasets[oi];
    const data::Dataset out_ds = build_dataset(spec, cfg.seed + 1 + oi);
    const Tensor out_pred = predict_mc(model, post, out_ds.val.inputs, cfg.mc_samples, cfg.seed,
                                       derive_stream({stream_tag("ood.out"), oi}));
    const auto out_entropy = metrics::predictive_entropy(out_pred);
    const auto out_conf = metrics::confidences(out_pred);
    reports::write_entropy_hist_csv(dir + "/entropy_hist_" + name + ".csv",
                                    metrics::entropy_histogram(out_entropy, out_pred.dim(1)));
    reports::write_roc_csv(dir + "/roc_" + name + ".csv",
                           metrics::roc_points(in_conf, out_conf));
    double out_mean_entropy = 0.0;
    for (double e : out_entropy) out_mean_entropy += e;
    out_mean_entropy /= static_cast<double>(out_entropy.size());

    // known-vs-unknown: in-distribution confidences are the positives
    std::vector<double> scores = in_conf;
    scores.insert(scores.end(), out_conf.begin(), out_conf.end());
    std::vector<bool> positive(scores.size(), false);
    for (std::size_t i = 0; i < in_conf.size(); ++i) positive[i] = true;
    pairs.push_back(nlohmann::json{{"out_dataset", name},
                                   {"auroc", metrics::auroc(scores, positive)},
                                   {"fpr_at_95tpr", metrics::fpr_at_95_tpr(in_conf, out_conf)},
                                   {"mean_entropy_in", in_mean_entropy},
                                   {"mean_entropy_out", out_mean_entropy}});
  }
  reports::write_json(dir + "/ood_summary.json",
                      nlohmann::json{{"mean_entropy_in", in_mean_entropy}, {"pairs", pairs}});
  std::cout << "ood: wrote " << dir << "\n";
  return 0;
}

inline int cmd_sweep(const CommonFlags& flags, const std::string& axis,
                     const std::vector<double>& values) {
  if (axis != "prior-variance" && axis != "mc-samples") {
    throw ConfigError("sweep: axis must be prior-variance or mc-samples");
  }
  if (values.empty()) throw ConfigError("sweep: need at least one value");
  RunConfig base = load_config(flags.config_path);
  apply_overrides(base, flags);
  const std::string dir = base.out_dir;
  std::filesystem::create_directories(dir);
  auto os = reports::open_out(dir + "/sweep.csv");
  os << "axis,value,train_acc,val_acc,train_val_gap,val_nll\n";
  for (double v : values) {
    RunConfig cfg = base;
    if (axis == "prior-variance") {
      if (!(v > 0.0)) throw ConfigError("sweep: prior variance must be > 0");
      cfg.hp.delta = 1.0 / v;  // prior variance is 1/delta
    } else {
      cfg.hp.train_mc_samples = static_cast<int>(v);
      if (cfg.hp.train_mc_samples < 1) throw ConfigError("sweep: mc-samples must be >= 1");
    }
    cfg.out_dir = dir + "/" + axis + "_" + reports::fmt(v);
    const data::Dataset dataset = build_dataset(cfg.dataset, cfg.seed);
    TrainRun run = run_training(cfg, dataset);
    std::filesystem::create_directories(cfg.out_dir);
    write_train_log(cfg.out_dir + "/train_log.csv", run.logs);
    write_checkpoint(cfg.out_dir + "/checkpoint.ngvi", run.session.model(), cfg.optimizer,
                     run.session.opt_state(), cfg.hp.gamma, cfg.hp.tau);
    const Tensor predictions =
        run.session.predict_split(run.session.dataset().val, cfg.train.epochs, "eval.final");
    write_eval_artifacts(cfg.out_dir, predictions, run.session.dataset().val.labels);
    const EpochLog& last = run.logs.back();
    os << axis << "," << reports::fmt(v) << "," << reports::fmt(last.train_acc) << ","
       << reports::fmt(last.val_acc) << "," << reports::fmt(last.train_acc - last.val_acc) << ","
       << reports::fmt(last.val_nll) << "\n";
  }
  std::cout << "sweep: wrote " << dir << "\n";
  return 0;
}

inline int cmd_continual(const CommonFlags& flags) {
  RunConfig cfg = load_config(flags.config_path);
  apply_overrides(cfg, flags);
  const data::Dataset base = build_dataset(cfg.dataset, cfg.seed);
  const auto seq = continual::make_tasks(base, cfg.continual.tasks, cfg.seed);
  const auto result = continual::run_continual(seq, cfg);
  const std::string dir = cfg.out_dir;
  std::filesystem::create_directories(dir);
  auto os = reports::open_out(dir + "/accuracy_matrix.csv");
  os << "after_task";
  for (int u = 0; u < cfg.continual.tasks; ++u) os << ",task_" << (u + 1);
  os << ",average\n";
  for (std::size_t t = 0; t < result.accuracy.size(); ++t) {
    os << (t + 1);
    for (int u = 0; u < cfg.continual.tasks; ++u) {
      if (u < static_cast<int>(result.accuracy[t].size())) {
        os << "," << reports::fmt(result.accuracy[t][static_cast<std::size_t>(u)]);
      } else {
        os << ",";
      }
    }
    os << "," << reports::fmt(result.average_accuracy[t]) << "\n";
  }
  std::cout << "continual: wrote " << dir << "\n";
  return 0;
}

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"natural-gradient variational inference at desk scale"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string checkpoint_path;
  std::string axis;
  std::string values_csv;
  std::optional<int> mc_override;

  auto add_common = [&](CLI::App* sub, bool needs_config = true) {
    auto* opt = sub->add_option("--config", flags.config_path, "JSON config path");
    if (needs_config) opt->required();
    sub->add_option(
        "--seed",
        [&flags](const std::vector<std::string>& v) {
          try {
            flags.seed = std::stoull(v.at(0));
            return true;
          } catch (...) {
            return false;
          }
        },
        "seed override");
    sub->add_option(
        "--workers",
        [&flags](const std::vector<std::string>& v) {
          try {
            flags.workers = std::stoi(v.at(0));
            return true;
          } catch (...) {
            return false;
          }
        },
        "worker count override");
    sub->add_option(
        "--out",
        [&flags](const std::vector<std::string>& v) {
          flags.out_dir = v.at(0);
          return true;
        },
        "output directory override");
  };

  auto* train = app.add_subcommand("train", "train per the config");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
  eval->add_option(
      "--mc",
      [&mc_override](const std::vector<std::string>& v) {
        try {
          mc_override = std::stoi(v.at(0));
          return true;
        } catch (...) {
          return false;
        }
      },
      "MC sample override");
  auto* ood = app.add_subcommand("ood", "out-of-distribution comparison");
  add_common(ood);
  ood->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
  auto* sweep = app.add_subcommand("sweep", "hyperparameter sweep");
  add_common(sweep);
  sweep->add_option("--axis", axis, "prior-variance | mc-samples")->required();
  sweep->add_option("--values", values_csv, "comma-separated values")->required();
  auto* cont = app.add_subcommand("continual", "permuted-task continual learning");
  add_common(cont);

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train(flags);
    if (eval->parsed()) return cmd_eval(flags, checkpoint_path, mc_override);
    if (ood->parsed()) return cmd_ood(flags, checkpoint_path);
    if (sweep->parsed()) {
      std::vector<double> values;
      std::size_t start = 0;
      while (start <= values_csv.size()) {
        const std::size_t comma = values_csv.find(',', start);
        const std::string cell = values_csv.substr(start, comma - start);
        if (!cell.empty()) {
          try {
            values.push_back(std::stod(cell));
          } catch (...) {
            throw ConfigError("sweep: bad value \"" + cell + "\"");
          }
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      return cmd_sweep(flags, axis, values);
    }
    if (cont->parsed()) return cmd_continual(flags);
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace ngvi::cli
