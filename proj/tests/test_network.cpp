/*
 * SPDX-License-Identifier: Apache-2.0
 */
#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"

using namespace hifi;
using namespace testing_support;

namespace {

net::ModelConfig small_model(std::size_t patch = 2, std::uint64_t seed = 1) {
  net::ModelConfig c;
  c.groups = 2;
  c.units_per_group = 1;
  c.patch = patch;
  c.channels = std::max<std::size_t>(8, 2 * patch * patch);
  c.scan.d_state = 4;
  c.scan.chunk = 16;
  c.seed = seed;
  return c;
}

struct Case {
  Tensor zf;  // [B,H,W,2]
  std::vector<KSpace> ksp;
};

Case make_case(std::size_t n, std::size_t size, const SamplingMask& mask, std::uint64_t seed) {
  Case c;
  c.zf = Tensor({n, size, size, 2});
  for (std::size_t i = 0; i < n; ++i) {
    auto [zf, k] = undersample(phantom(size, seed + i), mask);
    std::copy(zf.tensor().data().begin(), zf.tensor().data().end(), c.zf.data().begin() + i * size * size * 2);
    c.ksp.push_back(std::move(k));
  }
  return c;
}

SamplingMask full_mask(std::size_t w) {
  SamplingMask m;
  m.lines.assign(w, 1);
  m.acceleration_factor = 1;
  m.center_fraction = 0.5;
  m.center_count = w / 2;
  return m;
}

void randomize_all(nn::ParamStore& ps, std::uint64_t seed, double scale = 0.2) {
  std::mt19937_64 rng(seed);
  for (const auto& [name, v] : ps.entries()) {
    Tensor& t = ps.at(name).mutable_value();
    for (auto& x : t.data()) x += std::normal_distribution<double>(0.0, scale)(rng);
  }
}

// Largest deviation of a [1,H,W,2] slab's k-space from the measurements on sampled columns.
double sampled_column_error(const Tensor& batch, std::size_t n, const KSpace& k) {
  const std::size_t h = batch.dim(1), w = batch.dim(2);
  const auto spec = fft2c(detail::grid_from_slab(&batch[n * h * w * 2], h, w));
  double err = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (k.mask.sampled(x)) err = std::max(err, std::abs(spec.at(y, x) - k.measured.at(y, x)));
  return err;
}

std::size_t linear_count(std::size_t in, std::size_t out) { return in * out + out; }
std::size_t dw_count(std::size_t c, std::size_t taps) { return c * taps + c; }

// Independent tally of learned scalars, layer by layer.
std::size_t expected_params(const net::ModelConfig& m) {
  const std::size_t c = m.channels, h = c / 2, pd = 2 * m.patch * m.patch;
  const auto& s = m.scan;
  const std::size_t di = s.expand * h, dt = s.dt_rank ? s.dt_rank : (h + 15) / 16, ds = s.d_state, k = s.conv_kernel;
  const std::size_t crm = linear_count(h, 2 * h) + 2 * dw_count(2 * h, 9) + linear_count(2 * h, h);
  std::size_t hifi = 2 * h + linear_count(h, 2 * di) + dw_count(di, 9) + linear_count(di, dt + 2 * ds) + di * ds + di;
  if (s.conv_placement == ssm::ConvPlacement::pre_split) hifi += dw_count(dt + 2 * ds, k);
  auto gate_path = [&](std::size_t o) { return linear_count(h, o) + linear_count(o, 2 * o); };
  switch (s.gate_mode) {
    case ssm::GateMode::gate_bc: hifi += 2 * gate_path(ds); break;
    case ssm::GateMode::gate_all: hifi += 2 * gate_path(ds) + gate_path(dt); break;
    case ssm::GateMode::gate_pre: hifi += gate_path(di); break;
  }
  if (s.conv_placement == ssm::ConvPlacement::post_split) hifi += dw_count(dt, k) + 2 * dw_count(ds, k);
  hifi += linear_count(dt, di) + linear_count(di, h);
  const std::size_t hid = std::max<std::size_t>(1, c / 4);
  std::size_t unit = linear_count(c, c);
  if (m.unit.use_dsfa) unit += linear_count(c, hid) + linear_count(hid, c);
  if (m.unit.use_crm) unit += 3 * crm;
  if (m.unit.use_hifi_mamba) unit += hifi;
  const std::size_t proj_pair = linear_count(pd, c) + linear_count(c, pd);
  return proj_pair + m.groups * (m.units_per_group * unit + proj_pair);
}

}  // namespace

TEST(ModelConfigTest, ValidationAndJsonRoundTrip) {
  net::ModelConfig c = small_model();
  c.scan.gate_mode = ssm::GateMode::gate_all;
  c.unit.use_crm = false;
  EXPECT_EQ(net::model_config_from_json(net::to_json(c)), c);
  c.patch = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c.patch = 4;
  c.channels = 16;
  EXPECT_THROW(c.validate(), ConfigError);
  c.channels = 33;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PatchEmbed, ShapesAndExactRoundTrip) {
  for (std::size_t p : {1u, 2u, 4u}) {
    net::Model m(small_model(p));
    ag::Var x(random_tensor({2, 16, 8, 2}, p));
    const auto f = m.patch_embed(x);
    EXPECT_EQ(f.shape(), (Shape{2, 16 / p, 8 / p, m.config().channels}));
    EXPECT_LE(max_abs_diff(m.unpatchify(f).value(), x.value()), 1e-12);
  }
}

TEST(PatchEmbed, FullSizeFeatureShape) {
  net::ModelConfig c = small_model();
  c.channels = 64;
  c.groups = 1;
  net::Model m(c);
  EXPECT_EQ(m.patch_embed(ag::Var(Tensor({1, 320, 320, 2}))).shape(), (Shape{1, 160, 160, 64}));
}

TEST(PatchEmbed, ZeroFeaturesGiveBiasImage) {
  net::Model m(small_model());
  Tensor& bias = m.params().at("unembed.bias").mutable_value();
  bias = random_tensor(bias.shape(), 3);
  const auto img = m.unpatchify(ag::Var(Tensor({1, 4, 4, m.config().channels}))).value();
  // P=2: output pixel (y,x,c) takes channel ((y%2)*2 + x%2)*2 + c of the patch vector.
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(img.at(0, y, x, c), bias[((y % 2) * 2 + x % 2) * 2 + c]);
}

TEST(Network, ForwardErrors) {
  net::Model m(small_model(4));
  const auto mask = make_equispaced_mask(18, 4, 0.08, 0);
  std::vector<KSpace> ks;
  EXPECT_THROW(m.forward(ag::Var(Tensor({1, 16, 16, 1})), ks), ShapeMismatch);
  EXPECT_THROW(m.forward(ag::Var(Tensor({1, 18, 18, 2})), ks), IndivisibleShape);
}

TEST(Network, FullMaskGroupReturnsMeasuredImage) {
  net::Model m(small_model());
  randomize_all(m.params(), 4);
  const auto c = make_case(1, 16, full_mask(16), 5);
  const auto out = m.group_forward(0, m.patch_embed(ag::Var(c.zf)), c.ksp);
  EXPECT_LE(max_abs_diff(out.image_dc.value(), c.zf), 1e-12);
  const auto y = m.forward(ag::Var(c.zf), c.ksp).value();
  EXPECT_LE(max_abs_diff(y, c.zf), 1e-12);
}

TEST(Network, GroupCorrectionMatchesUnitsWhenAlreadyConsistent) {
  // Zero residual branches plus exactly consistent input: DC changes nothing,
  // so the group reduces to its units.
  net::Model m(small_model());
  blocks::zero_residual_branches(m.params());
  const auto c = make_case(1, 16, full_mask(16), 6);
  const auto f = m.patch_embed(ag::Var(c.zf));
  const auto g = m.group_forward(0, f, c.ksp);
  EXPECT_LE(max_abs_diff(g.features.value(), m.units_forward(0, f).value()), 1e-4);
}

TEST(Network, EveryGroupAndOutputIsConsistentOnSampledColumns) {
  net::Model m(small_model());
  randomize_all(m.params(), 7);
  const auto mask = make_equispaced_mask(16, 4, 0.125, 1);
  const auto c = make_case(2, 16, mask, 8);
  ag::Var f = m.patch_embed(ag::Var(c.zf));
  for (std::size_t g = 0; g < 2; ++g) {
    const auto out = m.group_forward(g, f, c.ksp);
    for (std::size_t n = 0; n < 2; ++n) {
      EXPECT_LE(sampled_column_error(out.image_dc.value(), n, c.ksp[n]), 1e-6);
      EXPECT_GT(sampled_column_error(out.image.value(), n, c.ksp[n]), 1e-6);
    }
    f = out.features;
  }
  const auto y = m.forward(ag::Var(c.zf), c.ksp).value();
  for (std::size_t n = 0; n < 2; ++n) EXPECT_LE(sampled_column_error(y, n, c.ksp[n]), 1e-6);
}

TEST(Network, ZeroResidualBranchesReturnDcOfInput) {
  net::Model m(small_model());
  blocks::zero_residual_branches(m.params());
  const auto mask = make_equispaced_mask(16, 4, 0.125, 2);
  const auto c = make_case(2, 16, mask, 9);
  const auto y = m.forward(ag::Var(c.zf), c.ksp).value();
  const auto dc = data_consistency(ag::Var(c.zf), c.ksp).value();
  EXPECT_LE(max_abs_diff(y, dc), 1e-4);
}

TEST(Network, DeterministicAndSeedSensitive) {
  const auto mask = make_equispaced_mask(16, 4, 0.125, 3);
  const auto c = make_case(1, 16, mask, 10);
  net::Model a(small_model(2, 11)), b(small_model(2, 11)), other(small_model(2, 12));
  const auto ya = a.forward(ag::Var(c.zf), c.ksp).value();
  EXPECT_EQ(max_abs_diff(ya, b.forward(ag::Var(c.zf), c.ksp).value()), 0.0);
  EXPECT_GT(max_abs_diff(ya, other.forward(ag::Var(c.zf), c.ksp).value()), 1e-9);
}

TEST(Network, BatchPermutationEquivariant) {
  net::Model m(small_model());
  randomize_all(m.params(), 13, 0.05);
  const auto mask = make_equispaced_mask(16, 4, 0.125, 4);
  auto c = make_case(2, 16, mask, 14);
  const auto y = m.forward(ag::Var(c.zf), c.ksp).value();
  Case r;
  r.zf = Tensor(c.zf.shape());
  const std::size_t slab = 16 * 16 * 2;
  std::copy_n(c.zf.data().begin() + slab, slab, r.zf.data().begin());
  std::copy_n(c.zf.data().begin(), slab, r.zf.data().begin() + slab);
  r.ksp = {c.ksp[1], c.ksp[0]};
  const auto yr = m.forward(ag::Var(r.zf), r.ksp).value();
  for (std::size_t i = 0; i < slab; ++i) {
    EXPECT_NEAR(yr[i], y[slab + i], 1e-12);
    EXPECT_NEAR(yr[slab + i], y[i], 1e-12);
  }
}

TEST(Network, ReconstructMatchesBatchedForward) {
  net::Model m(small_model());
  randomize_all(m.params(), 15, 0.05);
  const auto mask = make_equispaced_mask(16, 4, 0.125, 5);
  const auto [zf, k] = undersample(phantom(16, 16), mask);
  const auto rec = m.reconstruct(zf, k);
  const auto ref = m.forward(ag::Var(zf.tensor().reshaped({1, 16, 16, 2})), std::span<const KSpace>(&k, 1)).value();
  EXPECT_EQ(max_abs_diff(rec.tensor().reshaped({1, 16, 16, 2}), ref), 0.0);
}

TEST(Network, ParameterCountMatchesIndependentTally) {
  std::vector<net::ModelConfig> cfgs;
  cfgs.push_back(small_model());
  net::ModelConfig full;
  cfgs.push_back(full);
  for (auto g : {ssm::GateMode::gate_all, ssm::GateMode::gate_pre})
    for (auto p : {ssm::ConvPlacement::post_split, ssm::ConvPlacement::pre_split}) {
      auto c = small_model(4);
      c.channels = 48;
      c.scan.gate_mode = g;
      c.scan.conv_placement = p;
      cfgs.push_back(c);
    }
  auto ablated = small_model();
  ablated.unit = {false, false, false};
  cfgs.push_back(ablated);
  for (const auto& c : cfgs) EXPECT_EQ(net::count_params(c), expected_params(c)) << net::to_json(c).dump();
}

TEST(Network, CheckpointRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "hifi_test_network";
  std::filesystem::create_directories(dir);
  net::Model a(small_model(2, 21));
  randomize_all(a.params(), 22);
  archive::Archive ar;
  a.export_params(ar);
  archive::save(ar, dir / "m.hfa");
  net::Model b(small_model(2, 99));
  b.import_params(archive::load(dir / "m.hfa"));
  const auto mask = make_equispaced_mask(16, 4, 0.125, 6);
  const auto c = make_case(1, 16, mask, 23);
  EXPECT_EQ(max_abs_diff(a.forward(ag::Var(c.zf), c.ksp).value(), b.forward(ag::Var(c.zf), c.ksp).value()), 0.0);

  auto wider = small_model();
  wider.channels = 16;
  net::Model w(wider);
  EXPECT_THROW(w.import_params(ar), CorruptFile);
  ar.tensors.erase("param/embed.bias");
  EXPECT_THROW(b.import_params(ar), CorruptFile);
  std::filesystem::remove_all(dir);
}
