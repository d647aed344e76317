/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "hifimamba/nn.hpp"

/// Conditioned selective-scan state-space core.
///
/// Sequences are [B, L, C] in raster order. SSM parameter tensors use the
/// [B, d, L] layout: Δ is [B, d_t, L] as generated and [B, d_inner, L] once
/// refined (expanded through the Δ projection and softplus); B and C are
/// [B, d_s, L]. A = -exp(A_log) with A_log [d_inner, d_s]; D_skip is [d_inner].
namespace hifi::ssm {

enum class GateMode { gate_bc, gate_all, gate_pre };
enum class ConvPlacement { post_split, pre_split };

inline std::string to_string(GateMode m) {
  switch (m) {
    case GateMode::gate_bc: return "gate_bc";
    case GateMode::gate_all: return "gate_all";
    case GateMode::gate_pre: return "gate_pre";
  }
  return "?";
}
inline std::string to_string(ConvPlacement p) { return p == ConvPlacement::post_split ? "post_split" : "pre_split"; }

inline GateMode parse_gate_mode(const std::string& s) {
  if (s == "gate_bc") return GateMode::gate_bc;
  if (s == "gate_all") return GateMode::gate_all;
  if (s == "gate_pre") return GateMode::gate_pre;
  throw ConfigError("unknown gate_mode '" + s + "'");
}
inline ConvPlacement parse_conv_placement(const std::string& s) {
  if (s == "post_split") return ConvPlacement::post_split;
  if (s == "pre_split") return ConvPlacement::pre_split;
  throw ConfigError("unknown conv_placement '" + s + "'");
}

struct ScanConfig {
  std::size_t d_state = 16;
  std::size_t dt_rank = 0;  ///< 0 selects ceil(C'/16)
  std::size_t conv_kernel = 7;
  std::size_t expand = 2;   ///< d_inner = expand * C'
  std::size_t chunk = 64;   ///< chunk length of the chunked scan
  GateMode gate_mode = GateMode::gate_bc;
  ConvPlacement conv_placement = ConvPlacement::post_split;

  void validate() const {
    if (conv_kernel % 2 == 0) throw ConfigError("conv_kernel must be odd");
    if (d_state < 1) throw ConfigError("d_state must be >= 1");
    if (expand < 1 || chunk < 1) throw ConfigError("expand and chunk must be >= 1");
  }
  std::size_t resolved_dt_rank(std::size_t channels) const {
    return dt_rank ? dt_rank : std::max<std::size_t>(1, (channels + 15) / 16);
  }
  bool operator==(const ScanConfig&) const = default;
};

struct SSMParams {
  ag::Var delta, Bmat, Cmat;
  ag::Var A_log, D_skip;
};

/// Additive conditioning derived from the guidance map.
///
/// `Bh`/`Ch` are [B, d_s, L]; `Dh` ([B, d_t, L]) is set only under gate_all;
/// `pre` ([B, L, d_inner]) is set only under gate_pre and is added to the
/// sequence that feeds the parameter projection.
struct GuidanceCond {
  ag::Var Bh, Ch, Dh, pre;
};

struct GeneratedParams {
  ag::Var F_conv;  ///< [B, L, d_inner], the scan input
  ag::Var Z;       ///< [B, L, d_inner], gate branch
  SSMParams params;
};

namespace detail {
inline void require_seq(const ag::Var& v, std::size_t c, const char* what) {
  if (v.shape().size() != 3 || v.dim(2) != c)
    throw ShapeMismatch(std::string(what) + " must be [B,L," + std::to_string(c) + "], got " + shape_str(v.shape()));
}
}  // namespace detail

/// Norm -> in-projection split (F_c, Z) -> depthwise 3x3 + SiLU -> x-projection split (Δ, B, C).
class ParamGenerator {
 public:
  ParamGenerator() = default;
  ParamGenerator(nn::ParamStore& ps, const std::string& name, std::size_t channels, const ScanConfig& cfg)
      : cfg_(cfg), c_(channels), di_(cfg.expand * channels), dt_(cfg.resolved_dt_rank(channels)) {
    cfg.validate();
    norm_ = nn::LayerNorm(ps, name + ".norm", c_);
    in_proj_ = nn::Linear(ps, name + ".in_proj", c_, 2 * di_);
    conv_ = nn::DepthwiseConv2d(ps, name + ".conv2d", di_, 3);
    x_proj_ = nn::Linear(ps, name + ".x_proj", di_, dt_ + 2 * cfg.d_state);
    if (cfg.conv_placement == ConvPlacement::pre_split)
      pre_conv_ = nn::DepthwiseConv1d(ps, name + ".pre_conv1d", dt_ + 2 * cfg.d_state, cfg.conv_kernel);
    // S4D-real initialisation: A = -(1..d_s) per channel.
    Tensor alog({di_, cfg.d_state});
    for (std::size_t d = 0; d < di_; ++d)
      for (std::size_t n = 0; n < cfg.d_state; ++n) alog.at(d, n) = std::log(static_cast<double>(n + 1));
    A_log_ = ps.add(name + ".A_log", std::move(alog));
    D_ = ps.constant(name + ".D", {di_}, 1.0);
  }

  std::size_t d_inner() const { return di_; }
  std::size_t dt_rank() const { return dt_; }

  /// `pre` is the gate_pre conditioning term (undefined otherwise).
  GeneratedParams operator()(const ag::Var& f_low_seq, std::size_t h, std::size_t w,
                             const ag::Var& pre = {}) const {
    detail::require_seq(f_low_seq, c_, "F_low sequence");
    const std::size_t b = f_low_seq.dim(0);
    if (f_low_seq.dim(1) != h * w) throw ShapeMismatch("sequence length must equal h*w");
    ag::Var xz = in_proj_(norm_(f_low_seq));
    ag::Var fc = ag::slice_last(xz, 0, di_);
    ag::Var z = ag::slice_last(xz, di_, di_);
    ag::Var fconv = ag::silu(conv_(ag::reshape(fc, {b, h, w, di_})));
    fconv = ag::reshape(fconv, {b, h * w, di_});
    ag::Var fs = pre.defined() ? ag::add(fconv, pre) : fconv;
    ag::Var proj = ag::transpose_last2(x_proj_(fs));  // [B, dt+2ds, L]
    if (pre_conv_.weight.defined()) proj = pre_conv_(proj);
    const std::size_t ds = cfg_.d_state;
    ag::Var pt = ag::transpose_last2(proj);
    SSMParams p;
    p.delta = ag::transpose_last2(ag::slice_last(pt, 0, dt_));
    p.Bmat = ag::transpose_last2(ag::slice_last(pt, dt_, ds));
    p.Cmat = ag::transpose_last2(ag::slice_last(pt, dt_ + ds, ds));
    p.A_log = A_log_;
    p.D_skip = D_;
    return {fconv, z, p};
  }

 private:
  ScanConfig cfg_;
  std::size_t c_ = 0, di_ = 0, dt_ = 0;
  nn::LayerNorm norm_;
  nn::Linear in_proj_, x_proj_;
  nn::DepthwiseConv2d conv_;
  nn::DepthwiseConv1d pre_conv_;
  ag::Var A_log_, D_;
};

/// One gated conditioning path: Linear -> Linear -> split -> GELU(h1) * h2.
class GatePath {
 public:
  GatePath() = default;
  GatePath(nn::ParamStore& ps, const std::string& name, std::size_t in, std::size_t out)
      : pre_(ps, name + ".pre", in, out), gate_(ps, name + ".gate", out, 2 * out), out_(out) {}

  /// [B, L, in] -> [B, L, out]
  ag::Var operator()(const ag::Var& g) const {
    ag::Var h = gate_(pre_(g));
    return ag::mul(ag::gelu(ag::slice_last(h, 0, out_)), ag::slice_last(h, out_, out_));
  }

 private:
  nn::Linear pre_, gate_;
  std::size_t out_ = 0;
};

/// Cross-frequency guidance: independent gate paths per conditioned tensor.
class GuidanceGate {
 public:
  GuidanceGate() = default;
  GuidanceGate(nn::ParamStore& ps, const std::string& name, std::size_t channels, std::size_t d_inner,
               std::size_t dt_rank, const ScanConfig& cfg)
      : mode_(cfg.gate_mode), c_(channels) {
    if (mode_ == GateMode::gate_pre) {
      pre_ = GatePath(ps, name + ".gate_pre", channels, d_inner);
      return;
    }
    b_ = GatePath(ps, name + ".gate_B", channels, cfg.d_state);
    c_path_ = GatePath(ps, name + ".gate_C", channels, cfg.d_state);
    if (mode_ == GateMode::gate_all) d_ = GatePath(ps, name + ".gate_delta", channels, dt_rank);
  }

  GateMode mode() const { return mode_; }

  GuidanceCond operator()(const ag::Var& g_seq) const {
    detail::require_seq(g_seq, c_, "guidance sequence");
    GuidanceCond out;
    if (mode_ == GateMode::gate_pre) {
      out.pre = pre_(g_seq);
      return out;
    }
    out.Bh = ag::transpose_last2(b_(g_seq));
    out.Ch = ag::transpose_last2(c_path_(g_seq));
    if (mode_ == GateMode::gate_all) out.Dh = ag::transpose_last2(d_(g_seq));
    return out;
  }

 private:
  GateMode mode_ = GateMode::gate_bc;
  std::size_t c_ = 0;
  GatePath b_, c_path_, d_, pre_;
};

/// B += B_h, C += C_h; Δ += Δ_h only when that term exists (gate_all).
inline SSMParams condition(const SSMParams& p, const GuidanceCond& c) {
  SSMParams out = p;
  auto add_checked = [](const ag::Var& a, const ag::Var& b) {
    if (a.shape() != b.shape())
      throw ShapeMismatch("conditioning " + shape_str(b.shape()) + " vs parameter " + shape_str(a.shape()));
    return ag::add(a, b);
  };
  if (c.Bh.defined()) out.Bmat = add_checked(p.Bmat, c.Bh);
  if (c.Ch.defined()) out.Cmat = add_checked(p.Cmat, c.Ch);
  if (c.Dh.defined()) out.delta = add_checked(p.delta, c.Dh);
  return out;
}

/// Spatially-aware refinement: per-tensor depthwise conv along L, then Δ
/// expanded to d_inner and passed through softplus.
class ParamRefiner {
 public:
  ParamRefiner() = default;
  ParamRefiner(nn::ParamStore& ps, const std::string& name, std::size_t d_inner, std::size_t dt_rank,
               const ScanConfig& cfg) {
    if (cfg.conv_placement == ConvPlacement::post_split) {
      conv_delta_ = nn::DepthwiseConv1d(ps, name + ".conv_delta", dt_rank, cfg.conv_kernel);
      conv_B_ = nn::DepthwiseConv1d(ps, name + ".conv_B", cfg.d_state, cfg.conv_kernel);
      conv_C_ = nn::DepthwiseConv1d(ps, name + ".conv_C", cfg.d_state, cfg.conv_kernel);
    }
    // Mamba Δ init: weight ~ U(±dt_rank^-1/2), softplus(bias) log-uniform in [1e-3, 1e-1].
    dt_proj_.weight = ps.uniform(name + ".dt_proj.weight", {d_inner, dt_rank}, 1.0 / std::sqrt(static_cast<double>(dt_rank)));
    auto rng = ps.rng_for(name + ".dt_proj.bias");
    std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
    Tensor bias({d_inner});
    for (auto& v : bias.data()) {
      const double dt = std::exp(u(rng));
      v = dt + std::log(-std::expm1(-dt));  // inverse softplus
    }
    dt_proj_.bias = ps.add(name + ".dt_proj.bias", std::move(bias));
  }

  /// Convolution stage only; identity when the convolution sits before the split.
  SSMParams convolve(const SSMParams& p) const {
    if (!conv_delta_.weight.defined()) return p;
    SSMParams out = p;
    out.delta = conv_delta_(p.delta);
    out.Bmat = conv_B_(p.Bmat);
    out.Cmat = conv_C_(p.Cmat);
    return out;
  }

  /// Full refinement: convolve, then Δ -> softplus(dt_proj(Δ)) with shape [B, d_inner, L].
  SSMParams operator()(const SSMParams& p) const {
    SSMParams out = convolve(p);
    out.delta = ag::transpose_last2(ag::softplus(dt_proj_(ag::transpose_last2(out.delta))));
    return out;
  }

 private:
  nn::DepthwiseConv1d conv_delta_, conv_B_, conv_C_;
  nn::Linear dt_proj_;
};

// ------------------------------------------------------------------ scans

namespace detail {

struct ScanDims {
  std::size_t b, l, d, n;
};

inline ScanDims check_scan(const Tensor& x, const Tensor& delta, const Tensor& A_log, const Tensor& Bm,
                           const Tensor& Cm, const Tensor& Dskip) {
  if (x.rank() != 3) throw ShapeMismatch("scan input must be [B,L,D]");
  const ScanDims s{x.dim(0), x.dim(1), x.dim(2), A_log.dim(1)};
  if (delta.shape() != Shape{s.b, s.d, s.l}) throw ShapeMismatch("delta must be [B,D,L], got " + shape_str(delta.shape()));
  if (A_log.shape() != Shape{s.d, s.n}) throw ShapeMismatch("A_log must be [D,N]");
  if (Bm.shape() != Shape{s.b, s.n, s.l} || Cm.shape() != Shape{s.b, s.n, s.l})
    throw ShapeMismatch("B and C must be [B,N,L]");
  if (Dskip.shape() != Shape{s.d}) throw ShapeMismatch("D_skip must be [D]");
  // NaN is left to propagate so the loss guard reports it with diagnostics.
  for (double v : delta.data())
    if (v <= 0.0) throw NonPositiveDelta("every timestep must be > 0");
  return s;
}

inline Tensor neg_exp(const Tensor& A_log) {
  Tensor a(A_log.shape());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(A_log[i]);
  return a;
}

}  // namespace detail

/// Reference recurrence, one token at a time from h_0 = 0:
///   Ā = exp(Δ A), B̄ = Δ B, h_t = Ā h_{t-1} + B̄ x_t, y_t = C_t · h_t + D x_t.
inline Tensor selective_scan_seq(const Tensor& x, const Tensor& delta, const Tensor& A_log, const Tensor& Bm,
                                 const Tensor& Cm, const Tensor& Dskip) {
  const auto s = detail::check_scan(x, delta, A_log, Bm, Cm, Dskip);
  const Tensor A = detail::neg_exp(A_log);
  Tensor y({s.b, s.l, s.d});
  std::vector<double> h(s.d * s.n);
  for (std::size_t b = 0; b < s.b; ++b) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < s.l; ++t)
      for (std::size_t d = 0; d < s.d; ++d) {
        const double dl = delta.at(b, d, t), xv = x.at(b, t, d);
        double acc = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
          double& hv = h[d * s.n + n];
          hv = std::exp(dl * A.at(d, n)) * hv + dl * Bm.at(b, n, t) * xv;
          acc += Cm.at(b, n, t) * hv;
        }
        y.at(b, t, d) = acc + Dskip[d] * xv;
      }
  }
  return y;
}

inline Tensor selective_scan_seq(const Tensor& x, const SSMParams& p) {
  return selective_scan_seq(x, p.delta.value(), p.A_log.value(), p.Bmat.value(), p.Cmat.value(), p.D_skip.value());
}

/// Chunked evaluation of the same recurrence.
///
/// Each chunk is scanned from a zero state while tracking the running product
/// of Ā; the true state is then h_t = h_local_t + P_t · carry, with the carry
/// threaded from chunk to chunk. If `states` is given it receives every h_t as
/// [B, L, D, N].
inline Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& A_log, const Tensor& Bm,
                             const Tensor& Cm, const Tensor& Dskip, std::size_t chunk = 64,
                             Tensor* states = nullptr) {
  const auto s = detail::check_scan(x, delta, A_log, Bm, Cm, Dskip);
  if (chunk == 0) throw ConfigError("chunk must be >= 1");
  const Tensor A = detail::neg_exp(A_log);
  const std::size_t dn = s.d * s.n;
  Tensor y({s.b, s.l, s.d});
  Tensor local_buf;
  Tensor& H = states ? *states : local_buf;
  H = Tensor({s.b, s.l, s.d, s.n});
  std::vector<double> prod(s.l * dn);
  const std::size_t nchunks = (s.l + chunk - 1) / chunk;
  std::vector<double> carry(dn);

  for (std::size_t b = 0; b < s.b; ++b) {
    double* hb = &H[b * s.l * dn];
    // Independent local scans per chunk.
    for (std::size_t c = 0; c < nchunks; ++c) {
      const std::size_t t0 = c * chunk, t1 = std::min(s.l, t0 + chunk);
      for (std::size_t t = t0; t < t1; ++t)
        for (std::size_t d = 0; d < s.d; ++d) {
          const double dl = delta.at(b, d, t), xv = x.at(b, t, d);
          for (std::size_t n = 0; n < s.n; ++n) {
            const std::size_t k = d * s.n + n;
            const double da = std::exp(dl * A[k]);
            const double hprev = t == t0 ? 0.0 : hb[(t - 1) * dn + k];
            const double pprev = t == t0 ? 1.0 : prod[(t - 1) * dn + k];
            hb[t * dn + k] = da * hprev + dl * Bm.at(b, n, t) * xv;
            prod[t * dn + k] = da * pprev;
          }
        }
    }
    // Carry propagation across chunks, then outputs.
    std::fill(carry.begin(), carry.end(), 0.0);
    for (std::size_t c = 0; c < nchunks; ++c) {
      const std::size_t t0 = c * chunk, t1 = std::min(s.l, t0 + chunk);
      for (std::size_t t = t0; t < t1; ++t) {
        for (std::size_t k = 0; k < dn; ++k) hb[t * dn + k] += prod[t * dn + k] * carry[k];
        for (std::size_t d = 0; d < s.d; ++d) {
          double acc = 0.0;
          for (std::size_t n = 0; n < s.n; ++n) acc += Cm.at(b, n, t) * hb[t * dn + d * s.n + n];
          y.at(b, t, d) = acc + Dskip[d] * x.at(b, t, d);
        }
      }
      std::copy_n(&hb[(t1 - 1) * dn], dn, carry.begin());
    }
  }
  return y;
}

inline Tensor selective_scan(const Tensor& x, const SSMParams& p, std::size_t chunk = 64) {
  return selective_scan(x, p.delta.value(), p.A_log.value(), p.Bmat.value(), p.Cmat.value(), p.D_skip.value(),
                        chunk);
}

/// Differentiable scan. Forward uses the chunked path; backward walks the
/// recurrence in reverse using the stored states.
inline ag::Var scan(const ag::Var& x, const SSMParams& p, std::size_t chunk = 64) {
  Tensor states;
  const bool need_states = ag::grad_enabled();
  Tensor y = selective_scan(x.value(), p.delta.value(), p.A_log.value(), p.Bmat.value(), p.Cmat.value(),
                            p.D_skip.value(), chunk, need_states ? &states : nullptr);
  auto xn = x.node(), dn = p.delta.node(), an = p.A_log.node(), bn = p.Bmat.node(), cn = p.Cmat.node(),
       sn = p.D_skip.node();
  return ag::make_result(
      std::move(y), {x, p.delta, p.A_log, p.Bmat, p.Cmat, p.D_skip},
      [xn, dn, an, bn, cn, sn, states = std::move(states)](ag::Node& self) {
        const Tensor& X = xn->value;
        const Tensor& Dl = dn->value;
        const Tensor& Bm = bn->value;
        const Tensor& Cm = cn->value;
        const Tensor& Ds = sn->value;
        const Tensor A = detail::neg_exp(an->value);
        const std::size_t nb = X.dim(0), l = X.dim(1), d = X.dim(2), n = an->value.dim(1), dnn = d * n;
        Tensor gx(X.shape()), gdl(Dl.shape()), galog(an->value.shape()), gB(Bm.shape()), gC(Cm.shape()),
            gD(Ds.shape());
        const Tensor& G = self.grad;
        std::vector<double> gh(dnn);
        for (std::size_t b = 0; b < nb; ++b) {
          std::fill(gh.begin(), gh.end(), 0.0);
          const double* hb = &states[b * l * dnn];
          for (std::size_t t = l; t-- > 0;) {
            for (std::size_t c = 0; c < d; ++c) {
              const double xv = X.at(b, t, c), dl = Dl.at(b, c, t), gy = G.at(b, t, c);
              gD[c] += gy * xv;
              double gxv = gy * Ds[c];
              double gdelta = 0.0;
              for (std::size_t k = 0; k < n; ++k) {
                const std::size_t idx = c * n + k;
                const double a = A[idx];
                const double da = std::exp(dl * a);
                const double ht = hb[t * dnn + idx];
                const double hp = t ? hb[(t - 1) * dnn + idx] : 0.0;
                const double bv = Bm.at(b, k, t);
                gC.at(b, k, t) += gy * ht;
                const double g = gh[idx] + gy * Cm.at(b, k, t);
                const double gda = g * hp;
                gdelta += gda * a * da + g * bv * xv;
                galog[idx] += gda * dl * da * a;
                gB.at(b, k, t) += g * dl * xv;
                gxv += g * dl * bv;
                gh[idx] = g * da;
              }
              gdl.at(b, c, t) += gdelta;
              gx.at(b, t, c) += gxv;
            }
          }
        }
        if (xn->requires_grad) xn->grad_buffer() += gx;
        if (dn->requires_grad) dn->grad_buffer() += gdl;
        if (an->requires_grad) an->grad_buffer() += galog;
        if (bn->requires_grad) bn->grad_buffer() += gB;
        if (cn->requires_grad) cn->grad_buffer() += gC;
        if (sn->requires_grad) sn->grad_buffer() += gD;
      });
}

}  // namespace hifi::ssm
