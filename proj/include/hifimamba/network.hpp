/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hifimamba/archive.hpp"
#include "hifimamba/blocks.hpp"
#include "hifimamba/kspace.hpp"

namespace hifi::net {

inline constexpr const char* kCodeVersion = "hifimamba-0.1.0";

struct ModelConfig {
  std::size_t groups = 6;
  std::size_t units_per_group = 2;
  std::size_t patch = 2;
  std::size_t channels = 64;
  ssm::ScanConfig scan;
  blocks::UnitConfig unit;
  std::uint64_t seed = 0;  ///< parameter initialisation seed

  void validate() const {
    if (patch != 1 && patch != 2 && patch != 4) throw ConfigError("patch size must be 1, 2 or 4");
    if (channels % 2) throw ConfigError("channels must be even");
    if (channels < 2 * patch * patch) throw ConfigError("channels must be >= 2*P^2 for the patch projections");
    if (groups < 1 || units_per_group < 1) throw ConfigError("need at least one group and one unit");
    scan.validate();
  }
  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"groups", c.groups},
          {"units_per_group", c.units_per_group},
          {"patch", c.patch},
          {"channels", c.channels},
          {"seed", c.seed},
          {"scan",
           {{"d_state", c.scan.d_state},
            {"dt_rank", c.scan.dt_rank},
            {"conv_kernel", c.scan.conv_kernel},
            {"expand", c.scan.expand},
            {"chunk", c.scan.chunk},
            {"gate_mode", ssm::to_string(c.scan.gate_mode)},
            {"conv_placement", ssm::to_string(c.scan.conv_placement)}}},
          {"unit",
           {{"use_hifi_mamba", c.unit.use_hifi_mamba}, {"use_dsfa", c.unit.use_dsfa}, {"use_crm", c.unit.use_crm}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.groups = j.at("groups");
  c.units_per_group = j.at("units_per_group");
  c.patch = j.at("patch");
  c.channels = j.at("channels");
  c.seed = j.value("seed", std::uint64_t{0});
  const auto& s = j.at("scan");
  c.scan.d_state = s.at("d_state");
  c.scan.dt_rank = s.at("dt_rank");
  c.scan.conv_kernel = s.at("conv_kernel");
  c.scan.expand = s.at("expand");
  c.scan.chunk = s.value("chunk", std::size_t{64});
  c.scan.gate_mode = ssm::parse_gate_mode(s.at("gate_mode"));
  c.scan.conv_placement = ssm::parse_conv_placement(s.at("conv_placement"));
  const auto& u = j.at("unit");
  c.unit.use_hifi_mamba = u.at("use_hifi_mamba");
  c.unit.use_dsfa = u.at("use_dsfa");
  c.unit.use_crm = u.at("use_crm");
  c.validate();
  return c;
}

/// Unrolled reconstruction network: patch embedding, K groups of units each
/// closed by an image-domain DC step, unpatchify and a final hard DC.
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)), ps_(cfg_.seed) {
    cfg_.validate();
    const std::size_t pd = 2 * cfg_.patch * cfg_.patch, c = cfg_.channels;
    embed_ = embedding(ps_, "embed", pd, c);
    unembed_ = unembedding(ps_, "unembed", c, pd);
    for (std::size_t g = 0; g < cfg_.groups; ++g) {
      Group grp;
      const std::string gn = "group" + std::to_string(g);
      for (std::size_t u = 0; u < cfg_.units_per_group; ++u)
        grp.units.emplace_back(ps_, gn + ".unit" + std::to_string(u), c, cfg_.scan, cfg_.unit);
      grp.to_image = unembedding(ps_, gn + ".dc_out", c, pd);
      grp.from_image = embedding(ps_, gn + ".dc_in", pd, c);
      groups_.push_back(std::move(grp));
    }
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return ps_; }
  const nn::ParamStore& params() const noexcept { return ps_; }

  /// [B,H,W,2] -> [B,H/P,W/P,C]
  ag::Var patch_embed(const ag::Var& img) const { return embed_(ag::space_to_depth(img, cfg_.patch)); }
  /// [B,H/P,W/P,C] -> [B,H,W,2]
  ag::Var unpatchify(const ag::Var& f) const { return ag::depth_to_space(unembed_(f), cfg_.patch); }

  ag::Var units_forward(std::size_t g, ag::Var f) const {
    for (const auto& u : groups_.at(g).units) f = u(f);
    return f;
  }

  struct GroupOutput {
    ag::Var features;
    ag::Var image;     ///< intermediate image before DC
    ag::Var image_dc;  ///< intermediate image after DC
  };

  /// Units, then DC in image space; the DC correction re-enters the features
  /// through the group's own embedding: F + E_g(DC(x) - x), x = U_g(F).
  GroupOutput group_forward(std::size_t g, const ag::Var& f, std::span<const KSpace> ksp) const {
    const auto& grp = groups_.at(g);
    ag::Var feats = units_forward(g, f);
    ag::Var img = ag::depth_to_space(grp.to_image(feats), cfg_.patch);
    ag::Var img_dc = data_consistency(img, ksp);
    ag::Var corr = grp.from_image(ag::space_to_depth(ag::sub(img_dc, img), cfg_.patch));
    return {ag::add(feats, corr), img, img_dc};
  }

  /// Zero-filled images [B,H,W,2] and their k-space records -> reconstructions.
  ag::Var forward(const ag::Var& zero_filled, std::span<const KSpace> ksp) const {
    if (zero_filled.shape().size() != 4 || zero_filled.dim(3) != 2)
      throw ShapeMismatch("model input must be [B,H,W,2], got " + shape_str(zero_filled.shape()));
    if (zero_filled.dim(1) % cfg_.patch || zero_filled.dim(2) % cfg_.patch)
      throw IndivisibleShape("image dims not divisible by patch size");
    ag::Var f = patch_embed(zero_filled);
    for (std::size_t g = 0; g < groups_.size(); ++g) f = group_forward(g, f, ksp).features;
    return data_consistency(unpatchify(f), ksp);
  }

  ComplexImage reconstruct(const ComplexImage& zero_filled, const KSpace& ksp) const {
    ag::NoGradGuard ng;
    const auto& t = zero_filled.tensor();
    ag::Var in(t.reshaped({1, t.dim(0), t.dim(1), 2}));
    ag::Var out = forward(in, std::span<const KSpace>(&ksp, 1));
    return ComplexImage(out.value().reshaped(t.shape()));
  }

  /// Parameters keyed "param/<name>".
  void export_params(archive::Archive& a) const {
    for (const auto& [name, v] : ps_.entries()) a.tensors["param/" + name] = v.value();
  }
  void import_params(const archive::Archive& a) {
    for (const auto& [name, v] : ps_.entries()) {
      const Tensor& t = a.get("param/" + name);
      if (t.shape() != v.shape()) throw CorruptFile("parameter " + name + " has shape " + shape_str(t.shape()));
      ps_.at(name).mutable_value() = t;
    }
  }

 private:
  struct Group {
    std::vector<blocks::MambaUnit> units;
    nn::Linear to_image, from_image;
  };

  // Pixel->feature projection whose first 2P^2 rows are the identity, so the
  // matching unembedding [I 0] inverts it exactly.
  static nn::Linear embedding(nn::ParamStore& ps, const std::string& name, std::size_t pd, std::size_t c) {
    auto rng = ps.rng_for(name + ".weight");
    const double bound = 1.0 / std::sqrt(static_cast<double>(pd));
    Tensor w = rand_uniform({c, pd}, rng, -bound, bound);
    for (std::size_t r = 0; r < pd; ++r)
      for (std::size_t k = 0; k < pd; ++k) w.at(r, k) = r == k ? 1.0 : 0.0;
    nn::Linear l;
    l.weight = ps.add(name + ".weight", std::move(w));
    l.bias = ps.zeros(name + ".bias", {c});
    return l;
  }
  static nn::Linear unembedding(nn::ParamStore& ps, const std::string& name, std::size_t c, std::size_t pd) {
    Tensor w({pd, c});
    for (std::size_t r = 0; r < pd; ++r) w.at(r, r) = 1.0;
    nn::Linear l;
    l.weight = ps.add(name + ".weight", std::move(w));
    l.bias = ps.zeros(name + ".bias", {pd});
    return l;
  }

  ModelConfig cfg_;
  nn::ParamStore ps_;
  nn::Linear embed_, unembed_;
  std::vector<Group> groups_;
};

/// Exact number of learned scalars for a configuration.
inline std::size_t count_params(const ModelConfig& cfg) {
  Model m(cfg);
  return m.params().scalar_count();
}

}  // namespace hifi::net
