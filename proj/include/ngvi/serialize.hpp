#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ngvi/errors.hpp"
#include "ngvi/network.hpp"
#include "ngvi/optimizers.hpp"
#include "ngvi/tensor.hpp"

// Checkpoint file: 8-byte magic, u32 format version, u32 JSON header length,
// JSON header (layer specs + optimizer scalars + tensor directory), then the
// tensor payloads in directory order using the binary tensor format.

namespace ngvi {

inline constexpr char kCheckpointMagic[8] = {'N', 'G', 'V', 'I', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json layer_spec_to_json(const LayerSpec& s) {
  nlohmann::json j{{"kind", layer_kind_name(s.kind)}};
  switch (s.kind) {
    case LayerKind::dense:
      j["in"] = s.in;
      j["out"] = s.out;
      j["bias"] = s.bias;
      break;
    case LayerKind::conv2d:
      j["in_channels"] = s.c_in;
      j["out_channels"] = s.c_out;
      j["kernel"] = s.kernel;
      j["stride"] = s.stride;
      j["pad"] = s.pad;
      j["bias"] = s.bias;
      break;
    case LayerKind::batchnorm:
      j["dim"] = s.dim;
      break;
    default:
      break;
  }
  return j;
}

inline LayerSpec layer_spec_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "dense") {
    return LayerSpec::dense(j.at("in").get<std::int64_t>(), j.at("out").get<std::int64_t>(),
                            j.value("bias", true));
  }
  if (kind == "conv2d") {
    return LayerSpec::conv2d(j.at("in_channels").get<std::int64_t>(),
                             j.at("out_channels").get<std::int64_t>(),
                             j.at("kernel").get<std::int64_t>(), j.value("stride", std::int64_t{1}),
                             j.value("pad", std::int64_t{0}), j.value("bias", true));
  }
  if (kind == "batchnorm") return LayerSpec::batchnorm(j.at("dim").get<std::int64_t>());
  if (kind == "relu") return LayerSpec::relu();
  if (kind == "flatten") return LayerSpec::flatten();
  if (kind == "avgpool") return LayerSpec::avgpool();
  throw ConfigError("unknown layer kind: " + kind);
}

inline nlohmann::json feature_shape_to_json(const FeatureShape& f) {
  if (f.spatial) return nlohmann::json{{"image", {f.c, f.h, f.w}}};
  return nlohmann::json{{"flat", f.d}};
}

inline FeatureShape feature_shape_from_json(const nlohmann::json& j) {
  if (j.contains("image")) {
    const auto v = j.at("image").get<std::vector<std::int64_t>>();
    if (v.size() != 3) throw ConfigError("feature shape: image needs [C,H,W]");
    return FeatureShape::image(v[0], v[1], v[2]);
  }
  return FeatureShape::flat(j.at("flat").get<std::int64_t>());
}

struct Checkpoint {
  NetworkModel model;
  std::string optimizer_name;
  OptimizerState state;
  double gamma = 0.0;  // external damping, needed to rebuild the posterior
  double tau = 1.0;
};

inline void write_checkpoint(const std::string& path, const NetworkModel& model,
                             const std::string& optimizer_name, const OptimizerState& state,
                             double gamma, double tau) {
  nlohmann::json header;
  header["schema_version"] = kCheckpointVersion;
  header["input_shape"] = feature_shape_to_json(model.input_shape);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.layers) layers.push_back(layer_spec_to_json(l));
  header["layers"] = layers;
  header["optimizer"] = nlohmann::json{{"name", optimizer_name},
                                       {"step", state.step},
                                       {"n_eff", state.n_eff},
                                       {"delta_tilde", state.delta_tilde},
                                       {"tau_t", state.tau_t},
                                       {"alpha_t", state.alpha_t},
                                       {"gamma", gamma},
                                       {"tau", tau}};

  std::vector<std::pair<std::string, const Tensor*>> directory;
  for (std::size_t li = 0; li < model.layer_count(); ++li) {
    const std::string id = std::to_string(li);
    directory.emplace_back("params." + id, &model.params[li]);
    if (model.layers[li].kind == LayerKind::batchnorm) {
      directory.emplace_back("bn_mean." + id, &model.bn[li].running_mean);
      directory.emplace_back("bn_var." + id, &model.bn[li].running_var);
    }
    directory.emplace_back("opt.m." + id, &state.m[li]);
    directory.emplace_back("opt.s." + id, &state.s[li]);
    if (state.kfac[li].initialized) {
      directory.emplace_back("kfac.a." + id, &state.kfac[li].a);
      directory.emplace_back("kfac.s." + id, &state.kfac[li].s);
    }
  }
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, tensor] : directory) names.push_back(name);
  header["tensors"] = names;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot write " + path);
  os.write(kCheckpointMagic, 8);
  const std::string header_str = header.dump();
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(header_str.size()));
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, tensor] : directory) write_tensor(os, *tensor);
  if (!os) throw IoError("checkpoint: short write to " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != std::string(kCheckpointMagic, 8)) {
    throw IoError("checkpoint: bad magic in " + path);
  }
  const auto version = detail::read_le<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto header_len = detail::read_le<std::uint32_t>(is, "checkpoint header length");
  std::string header_str(header_len, '\0');
  if (!is.read(header_str.data(), header_len)) {
    throw IoError("checkpoint: truncated header in " + path);
  }
  nlohmann::json header = nlohmann::json::parse(header_str);

  Checkpoint ck;
  ck.model.input_shape = feature_shape_from_json(header.at("input_shape"));
  for (const auto& lj : header.at("layers")) {
    ck.model.layers.push_back(layer_spec_from_json(lj));
  }
  ck.model.params.resize(ck.model.layer_count());
  ck.model.bn.resize(ck.model.layer_count());
  ck.state.m.resize(ck.model.layer_count());
  ck.state.s.resize(ck.model.layer_count());
  ck.state.kfac.resize(ck.model.layer_count());

  const auto& opt = header.at("optimizer");
  ck.optimizer_name = opt.at("name").get<std::string>();
  ck.state.step = opt.at("step").get<long>();
  ck.state.n_eff = opt.at("n_eff").get<double>();
  ck.state.delta_tilde = opt.at("delta_tilde").get<double>();
  ck.state.tau_t = opt.at("tau_t").get<double>();
  ck.state.alpha_t = opt.at("alpha_t").get<double>();
  ck.gamma = opt.at("gamma").get<double>();
  ck.tau = opt.at("tau").get<double>();

  for (const auto& name_json : header.at("tensors")) {
    const std::string name = name_json.get<std::string>();
    Tensor t = read_tensor(is);
    const auto dot = name.rfind('.');
    const std::size_t li = static_cast<std::size_t>(std::stoul(name.substr(dot + 1)));
    if (li >= ck.model.layer_count()) throw IoError("checkpoint: tensor index out of range");
    const std::string field = name.substr(0, dot);
    if (field == "params") {
      ck.model.params[li] = std::move(t);
    } else if (field == "bn_mean") {
      ck.model.bn[li].running_mean = std::move(t);
    } else if (field == "bn_var") {
      ck.model.bn[li].running_var = std::move(t);
    } else if (field == "opt.m") {
      ck.state.m[li] = std::move(t);
    } else if (field == "opt.s") {
      ck.state.s[li] = std::move(t);
    } else if (field == "kfac.a") {
      ck.state.kfac[li].a = std::move(t);
      ck.state.kfac[li].initialized = true;
    } else if (field == "kfac.s") {
      ck.state.kfac[li].s = std::move(t);
    } else {
      throw IoError("checkpoint: unknown tensor entry " + name);
    }
  }
  // shape sanity: parameter payloads must match the specs
  for (std::size_t li = 0; li < ck.model.layer_count(); ++li) {
    if (ck.model.params[li].size() != ck.model.layers[li].param_count()) {
      throw IoError("checkpoint: parameter tensor does not match layer spec");
    }
  }
  return ck;
}

}  // namespace ngvi
