/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <string>

#include "hifimamba/ssm.hpp"
#include "hifimamba/wavelet.hpp"

namespace hifi::blocks {

/// Switches for the component ablation (W-Laplacian only, +HiFi-Mamba, +DSFA, +CRM).
struct UnitConfig {
  bool use_hifi_mamba = true;
  bool use_dsfa = true;
  bool use_crm = true;
  bool operator==(const UnitConfig&) const = default;
};

/// Condition refinement module: shape-preserving down/up residual bottleneck.
///
/// pointwise C->2C, depthwise 3x3, GELU, strided depthwise 3x3, GELU,
/// bilinear 2x up, pointwise 2C->C, plus the input.
class CRM {
 public:
  CRM() = default;
  CRM(nn::ParamStore& ps, const std::string& name, std::size_t c)
      : pw_in_(ps, name + ".pw_in", c, 2 * c),
        dw_full_(ps, name + ".dw_full", 2 * c, 3, 1),
        dw_down_(ps, name + ".dw_down", 2 * c, 3, 2),
        pw_out_(ps, name + ".pw_out", 2 * c, c) {}

  bool enabled() const { return pw_in_.weight.defined(); }

  ag::Var operator()(const ag::Var& x) const {
    if (!enabled()) return x;
    if (x.shape().size() != 4) throw ShapeMismatch("CRM expects [B,H,W,C]");
    if (x.dim(1) % 2 || x.dim(2) % 2) throw OddSpatialDim("CRM needs even spatial dims, got " + shape_str(x.shape()));
    ag::Var y = ag::gelu(dw_full_(pw_in_(x)));
    y = ag::gelu(dw_down_(y));
    y = pw_out_(ag::upsample2x(y));
    return ag::add(y, x);
  }

 private:
  nn::Linear pw_in_;
  nn::DepthwiseConv2d dw_full_, dw_down_;
  nn::Linear pw_out_;
};

/// CRM refinement followed by the W-Laplacian low/high split.
class WLBlock {
 public:
  WLBlock() = default;
  WLBlock(nn::ParamStore& ps, const std::string& name, std::size_t c, bool use_crm) {
    if (use_crm) crm_ = CRM(ps, name + ".crm", c);
  }

  struct Output {
    ag::Var low, high, refined;
  };

  Output operator()(const ag::Var& f1) const {
    if (f1.dim(1) % 2 || f1.dim(2) % 2) throw OddSpatialDim("W-Laplacian block needs even spatial dims");
    ag::Var refined = crm_(f1);
    auto [low, high] = wavelet::wl_decompose(refined);
    return {low, high, refined};
  }

 private:
  CRM crm_;
};

/// Guided selective-scan block on the low-frequency stream.
class HiFiMambaBlock {
 public:
  HiFiMambaBlock() = default;
  HiFiMambaBlock(nn::ParamStore& ps, const std::string& name, std::size_t c, const ssm::ScanConfig& cfg)
      : cfg_(cfg), c_(c) {
    gen_ = ssm::ParamGenerator(ps, name + ".gen", c, cfg);
    gate_ = ssm::GuidanceGate(ps, name + ".guide", c, gen_.d_inner(), gen_.dt_rank(), cfg);
    refine_ = ssm::ParamRefiner(ps, name + ".refine", gen_.d_inner(), gen_.dt_rank(), cfg);
    out_proj_ = nn::Linear(ps, name + ".out_proj", gen_.d_inner(), c);
  }

  const ssm::ParamGenerator& generator() const { return gen_; }
  const ssm::GuidanceGate& gate() const { return gate_; }
  const ssm::ParamRefiner& refiner() const { return refine_; }
  const nn::Linear& out_proj() const { return out_proj_; }

  /// F_low and G are [B,h,w,C]. A null guidance skips conditioning entirely.
  ag::Var operator()(const ag::Var& f_low, const ag::Var* guidance) const {
    if (f_low.shape().size() != 4 || f_low.dim(3) != c_) throw ShapeMismatch("HiFi-Mamba input " + shape_str(f_low.shape()));
    const std::size_t b = f_low.dim(0), h = f_low.dim(1), w = f_low.dim(2), l = h * w;
    ag::Var seq = ag::reshape(f_low, {b, l, c_});
    ssm::GuidanceCond cond;
    if (guidance) {
      if (guidance->shape() != f_low.shape()) throw ShapeMismatch("guidance must match F_low shape");
      cond = gate_(ag::reshape(*guidance, {b, l, c_}));
    }
    auto gp = gen_(seq, h, w, cond.pre);
    ssm::SSMParams p = ssm::condition(gp.params, cond);
    p = refine_(p);
    ag::Var y = ssm::scan(gp.F_conv, p, cfg_.chunk);
    ag::Var out = out_proj_(ag::mul(y, ag::silu(gp.Z)));
    return ag::reshape(out, {b, h, w, c_});
  }

 private:
  ssm::ScanConfig cfg_;
  std::size_t c_ = 0;
  ssm::ParamGenerator gen_;
  ssm::GuidanceGate gate_;
  ssm::ParamRefiner refine_;
  nn::Linear out_proj_;
};

/// Dual-stream fusion attention: channel attention over the concatenated
/// streams, then a pointwise projection.
class DSFA {
 public:
  DSFA() = default;
  DSFA(nn::ParamStore& ps, const std::string& name, std::size_t c, bool attention, std::size_t reduction = 4)
      : attention_(attention) {
    const std::size_t hidden = std::max<std::size_t>(1, c / reduction);
    if (attention_) {
      fc1_ = nn::Linear(ps, name + ".fc1", c, hidden);
      fc2_ = nn::Linear(ps, name + ".fc2", hidden, c);
    }
    proj_ = nn::Linear(ps, name + ".proj", c, c);
  }

  /// Per-(batch, channel) sigmoid weights of an already concatenated map.
  ag::Var weights(const ag::Var& x) const {
    return ag::sigmoid(fc2_(ag::relu(fc1_(ag::global_avg_pool(x)))));
  }

  ag::Var operator()(const ag::Var& low, const ag::Var& high) const {
    if (low.shape() != high.shape()) throw ShapeMismatch("DSFA streams differ: " + shape_str(low.shape()) + " vs " + shape_str(high.shape()));
    ag::Var x = ag::concat_last({low, high});
    if (attention_) x = ag::mul_channel(x, weights(x));
    return proj_(x);
  }

  nn::Linear& projection() { return proj_; }

 private:
  bool attention_ = true;
  nn::Linear fc1_, fc2_, proj_;
};

/// Dual-stream unit: split, W-Laplacian, guidance CRMs, HiFi-Mamba, fusion, residual.
class MambaUnit {
 public:
  MambaUnit() = default;
  MambaUnit(nn::ParamStore& ps, const std::string& name, std::size_t c, const ssm::ScanConfig& scan,
            const UnitConfig& ucfg = {})
      : c_(c), ucfg_(ucfg) {
    if (c % 2) throw ShapeMismatch("unit channels must be even, got " + std::to_string(c));
    const std::size_t half = c / 2;
    wl_ = WLBlock(ps, name + ".wl", half, ucfg.use_crm);
    if (ucfg.use_crm) {
      crm_guide_ = CRM(ps, name + ".crm_guide", half);
      crm_high_ = CRM(ps, name + ".crm_high", half);
    }
    if (ucfg.use_hifi_mamba) hifi_ = HiFiMambaBlock(ps, name + ".hifi", half, scan);
    dsfa_ = DSFA(ps, name + ".dsfa", c, ucfg.use_dsfa);
  }

  ag::Var operator()(const ag::Var& f_in) const {
    if (f_in.shape().size() != 4 || f_in.dim(3) != c_) throw ShapeMismatch("unit input " + shape_str(f_in.shape()));
    const std::size_t half = c_ / 2;
    ag::Var f1 = ag::slice_last(f_in, 0, half);
    ag::Var f2 = ag::slice_last(f_in, half, half);
    auto wl = wl_(f1);
    ag::Var f_high = ag::add(f2, wl.high);
    ag::Var guide = crm_guide_(f_high);
    ag::Var high_out = crm_high_(guide);
    ag::Var low_out = ucfg_.use_hifi_mamba ? hifi_(wl.low, &guide) : wl.low;
    return ag::add(dsfa_(low_out, high_out), f_in);
  }

 private:
  std::size_t c_ = 0;
  UnitConfig ucfg_;
  WLBlock wl_;
  CRM crm_guide_, crm_high_;
  HiFiMambaBlock hifi_;
  DSFA dsfa_;
};

/// Zeroes the last projection of every residual branch (CRM output convs,
/// DSFA projections) so each block starts as the identity.
inline void zero_residual_branches(nn::ParamStore& ps) {
  for (const auto& [name, v] : ps.entries()) {
    auto ends_with = [&](const std::string& suf) {
      return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends_with(".pw_out.weight") || ends_with(".pw_out.bias") || ends_with(".dsfa.proj.weight") ||
        ends_with(".dsfa.proj.bias"))
      ps.at(name).mutable_value().fill(0.0);
  }
}

}  // namespace hifi::blocks
