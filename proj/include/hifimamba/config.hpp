/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <filesystem>
#include <optional>
#include <string>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "hifimamba/training.hpp"

namespace hifi::config {

struct DatasetConfig {
  std::string source = "phantom";  ///< "phantom" or "fastmri"
  std::size_t n = 100;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  std::string path;  ///< fastmri: an .h5 file or a directory of them
  std::size_t slice_trim = 5;

  void validate() const {
    if (source != "phantom" && source != "fastmri") throw ConfigError("dataset.source must be phantom or fastmri");
    if (source == "phantom" && (size % 2 || size < 32)) throw ConfigError("dataset.size must be even and >= 32");
    if (source == "phantom" && n == 0) throw ConfigError("dataset.n must be positive");
  }
};

struct RunConfig {
  DatasetConfig dataset;
  net::ModelConfig model;
  train::TrainConfig train;

  void validate() const {
    dataset.validate();
    model.validate();
    train.validate();
  }
};

inline nlohmann::json to_json(const DatasetConfig& d) {
  return {{"source", d.source}, {"n", d.n}, {"size", d.size}, {"seed", d.seed}, {"path", d.path}, {"slice_trim", d.slice_trim}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"dataset", to_json(c.dataset)}, {"model", net::to_json(c.model)}, {"train", train::to_json(c.train)}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  const auto& d = j.at("dataset");
  c.dataset.source = d.at("source");
  c.dataset.n = d.at("n");
  c.dataset.size = d.at("size");
  c.dataset.seed = d.at("seed");
  c.dataset.path = d.at("path");
  c.dataset.slice_trim = d.at("slice_trim");
  c.model = net::model_config_from_json(j.at("model"));
  c.train = train::train_config_from_json(j.at("train"));
  c.validate();
  return c;
}

/// Desk-scale defaults: 64x64 phantoms, C=32, K=2.
inline RunConfig desk_defaults() {
  RunConfig c;
  c.model.groups = 2;
  c.model.channels = 32;
  c.model.patch = 2;
  return c;
}

namespace detail {

template <class T>
void read(const toml::table& t, const char* key, T& out, const std::string& where) {
  const toml::node* n = t.get(key);
  if (!n) return;
  if constexpr (std::is_same_v<T, bool>) {
    auto v = n->value<bool>();
    if (!v) throw ConfigError(where + "." + key + " must be a boolean");
    out = *v;
  } else if constexpr (std::is_same_v<T, std::string>) {
    auto v = n->value<std::string>();
    if (!v) throw ConfigError(where + "." + key + " must be a string");
    out = *v;
  } else if constexpr (std::is_floating_point_v<T>) {
    auto v = n->value<double>();
    if (!v) throw ConfigError(where + "." + key + " must be a number");
    out = *v;
  } else {
    auto v = n->value<std::int64_t>();
    if (!v) throw ConfigError(where + "." + key + " must be an integer");
    if (*v < 0 && std::is_unsigned_v<T>) throw ConfigError(where + "." + key + " must be non-negative");
    out = static_cast<T>(*v);
  }
}

inline const toml::table* sub(const toml::table& t, const char* key) {
  const toml::node* n = t.get(key);
  if (!n) return nullptr;
  if (!n->is_table()) throw ConfigError(std::string(key) + " must be a table");
  return n->as_table();
}

}  // namespace detail

inline RunConfig parse(const toml::table& root) {
  RunConfig c = desk_defaults();
  bool cf_given = false;
  if (const auto* d = detail::sub(root, "dataset")) {
    detail::read(*d, "source", c.dataset.source, "dataset");
    detail::read(*d, "n", c.dataset.n, "dataset");
    detail::read(*d, "size", c.dataset.size, "dataset");
    detail::read(*d, "seed", c.dataset.seed, "dataset");
    detail::read(*d, "path", c.dataset.path, "dataset");
    detail::read(*d, "slice_trim", c.dataset.slice_trim, "dataset");
  }
  if (const auto* m = detail::sub(root, "model")) {
    detail::read(*m, "groups", c.model.groups, "model");
    detail::read(*m, "units_per_group", c.model.units_per_group, "model");
    detail::read(*m, "patch", c.model.patch, "model");
    detail::read(*m, "channels", c.model.channels, "model");
    detail::read(*m, "seed", c.model.seed, "model");
    if (const auto* s = detail::sub(*m, "scan")) {
      detail::read(*s, "d_state", c.model.scan.d_state, "model.scan");
      detail::read(*s, "dt_rank", c.model.scan.dt_rank, "model.scan");
      detail::read(*s, "conv_kernel", c.model.scan.conv_kernel, "model.scan");
      detail::read(*s, "expand", c.model.scan.expand, "model.scan");
      detail::read(*s, "chunk", c.model.scan.chunk, "model.scan");
      std::string gm = ssm::to_string(c.model.scan.gate_mode), cp = ssm::to_string(c.model.scan.conv_placement);
      detail::read(*s, "gate_mode", gm, "model.scan");
      detail::read(*s, "conv_placement", cp, "model.scan");
      c.model.scan.gate_mode = ssm::parse_gate_mode(gm);
      c.model.scan.conv_placement = ssm::parse_conv_placement(cp);
    }
    if (const auto* u = detail::sub(*m, "unit")) {
      detail::read(*u, "use_hifi_mamba", c.model.unit.use_hifi_mamba, "model.unit");
      detail::read(*u, "use_dsfa", c.model.unit.use_dsfa, "model.unit");
      detail::read(*u, "use_crm", c.model.unit.use_crm, "model.unit");
    }
  }
  if (const auto* t = detail::sub(root, "train")) {
    detail::read(*t, "lr", c.train.lr, "train");
    detail::read(*t, "warmup_epochs", c.train.warmup_epochs, "train");
    detail::read(*t, "epochs", c.train.epochs, "train");
    detail::read(*t, "batch_size", c.train.batch_size, "train");
    detail::read(*t, "seed", c.train.seed, "train");
    detail::read(*t, "af", c.train.af, "train");
    cf_given = t->contains("center_fraction");
    detail::read(*t, "center_fraction", c.train.center_fraction, "train");
    detail::read(*t, "loss", c.train.loss, "train");
    detail::read(*t, "weight_decay", c.train.weight_decay, "train");
  }
  if (!cf_given) c.train.center_fraction = train::default_center_fraction(c.train.af);
  c.validate();
  return c;
}

inline RunConfig parse_string(std::string_view text, const std::string& origin = "<string>") {
  try {
    return parse(toml::parse(text, origin));
  } catch (const toml::parse_error& e) {
    throw ConfigError(origin + ": " + std::string(e.description()));
  }
}

inline RunConfig load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  try {
    return parse(toml::parse_file(path.string()));
  } catch (const toml::parse_error& e) {
    throw ConfigError(path.string() + ": " + std::string(e.description()));
  }
}

}  // namespace hifi::config
