/*
 * SPDX-License-Identifier: Apache-2.0
 */
#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>

#include <hdf5.h>

#include "support.hpp"

using namespace hifi;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

net::ModelConfig tiny_model() {
  net::ModelConfig c;
  c.groups = 1;
  c.units_per_group = 1;
  c.patch = 2;
  c.channels = 8;
  c.scan.d_state = 4;
  c.seed = 3;
  return c;
}

train::TrainConfig tiny_train(std::size_t epochs = 4) {
  train::TrainConfig t;
  t.epochs = epochs;
  t.warmup_epochs = 1;
  t.batch_size = 4;
  t.seed = 5;
  return t;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("hifi_test_training_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Minimal HDF5 writer for test volumes.
void write_real_dataset(hid_t file, const char* name, const std::vector<hsize_t>& dims, const std::vector<double>& v) {
  const hid_t sp = H5Screate_simple(static_cast<int>(dims.size()), dims.data(), nullptr);
  const hid_t ds = H5Dcreate2(file, name, H5T_IEEE_F32LE, sp, H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT);
  H5Dwrite(ds, H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, v.data());
  H5Dclose(ds);
  H5Sclose(sp);
}

void write_complex_dataset(hid_t file, const char* name, const std::vector<hsize_t>& dims,
                           const std::vector<double>& interleaved) {
  const hid_t ct = H5Tcreate(H5T_COMPOUND, 2 * sizeof(double));
  H5Tinsert(ct, "r", 0, H5T_NATIVE_DOUBLE);
  H5Tinsert(ct, "i", sizeof(double), H5T_NATIVE_DOUBLE);
  const hid_t sp = H5Screate_simple(static_cast<int>(dims.size()), dims.data(), nullptr);
  const hid_t ds = H5Dcreate2(file, name, ct, sp, H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT);
  H5Dwrite(ds, ct, H5S_ALL, H5S_ALL, H5P_DEFAULT, interleaved.data());
  H5Dclose(ds);
  H5Sclose(sp);
  H5Tclose(ct);
}

// Slice k of the volume: a phantom with a slice-dependent intensity offset.
std::vector<double> volume(std::size_t slices, std::size_t n, double scale = 1.0) {
  std::vector<double> v;
  for (std::size_t k = 0; k < slices; ++k) {
    std::mt19937_64 rng(k);
    const Tensor img = train::phantom_image(n, rng);
    for (double x : img.data()) v.push_back(scale * x + 0.01 * double(k));
  }
  return v;
}

}  // namespace

TEST(TrainConfigTest, ValidationAndJson) {
  auto c = tiny_train();
  c.center_fraction = 0.04;
  c.af = 8;
  EXPECT_EQ(train::train_config_from_json(train::to_json(c)), c);
  c.warmup_epochs = c.epochs;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_train();
  c.loss = "l2";
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(train::default_center_fraction(4), 0.08);
  EXPECT_EQ(train::default_center_fraction(8), 0.04);
}

TEST(Phantoms, DeterministicInRangeAndDistinct) {
  const auto mask = make_equispaced_mask(32, 4, 0.08, 0);
  const auto a = train::phantom_dataset(5, 32, 7, mask), b = train::phantom_dataset(5, 32, 7, mask);
  const auto c = train::phantom_dataset(5, 32, 8, mask);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(max_abs_diff(a[i].target.tensor(), b[i].target.tensor()), 0.0);
    EXPECT_GT(max_abs_diff(a[i].target.tensor(), c[i].target.tensor()), 1e-3);
    const auto mag = a[i].target.magnitude();
    EXPECT_NEAR(*std::min_element(mag.data().begin(), mag.data().end()), 0.0, 1e-12);
    EXPECT_NEAR(*std::max_element(mag.data().begin(), mag.data().end()), 1.0, 1e-12);
  }
  EXPECT_GT(max_abs_diff(a[0].target.tensor(), a[1].target.tensor()), 1e-3);
  EXPECT_EQ(a[3].slice_id, "phantom-7-3");
  EXPECT_THROW(train::phantom_dataset(1, 30, 0, make_equispaced_mask(30, 4, 0.08, 0)), ConfigError);
  EXPECT_THROW(train::phantom_dataset(1, 64, 0, mask), ShapeMismatch);
}

TEST(Phantoms, HundredSlicesQuickly) {
  const auto mask = make_equispaced_mask(64, 4, 0.08, 0);
  const auto t0 = std::chrono::steady_clock::now();
  const auto d = train::phantom_dataset(100, 64, 1, mask);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(d.size(), 100u);
  EXPECT_LT(secs, 10.0);
}

TEST(Ingest, TrimsSlicesAndPrefersStoredReconstruction) {
  const auto dir = scratch("ingest");
  const auto path = dir / "vol.h5";
  const hid_t f = H5Fcreate(path.c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT);
  write_real_dataset(f, "reconstruction_rss", {35, 32, 32}, volume(35, 32, 2.0));
  write_real_dataset(f, "reconstruction_esc", {35, 32, 32}, volume(35, 32));
  H5Fclose(f);
  const auto s = train::ingest_fastmri_volume(path, 5, 4, 0.08, 0);
  ASSERT_EQ(s.size(), 25u);
  EXPECT_EQ(s.front().slice_id, "vol-5");
  EXPECT_EQ(s.back().slice_id, "vol-29");
  // esc wins: slice 5 equals the normalised esc phantom (rss differs by the scale).
  std::mt19937_64 rng(5);
  Tensor ref = train::phantom_image(32, rng);
  for (auto& v : ref.data()) v += 0.05;
  const Tensor expect = normalize_minmax(ref);
  const Tensor got = s.front().target.magnitude();
  EXPECT_LE(max_abs_diff(got, expect), 1e-6);  // stored as float32
  EXPECT_EQ(train::ingest_fastmri_volume(path, 17, 4, 0.08, 0).size(), 1u);
  EXPECT_THROW(train::ingest_fastmri_volume(path, 18, 4, 0.08, 0), EmptyVolume);
  fs::remove_all(dir);
}

TEST(Ingest, KspaceFallbackUsesCoilRss) {
  const auto dir = scratch("kspace");
  const auto path = dir / "coils.h5";
  const std::size_t n = 32, coils = 2, slices = 3;
  std::vector<double> raw;
  std::vector<Tensor> expected;
  for (std::size_t k = 0; k < slices; ++k) {
    Tensor rss({n, n});
    for (std::size_t c = 0; c < coils; ++c) {
      const auto img = random_image(n, n, 10 * k + c);
      const auto spec = fft2c(img);
      for (const auto& z : spec.data()) {
        raw.push_back(z.real());
        raw.push_back(z.imag());
      }
      const Tensor m = img.magnitude();
      for (std::size_t i = 0; i < m.size(); ++i) rss[i] += m[i] * m[i];
    }
    for (auto& v : rss.data()) v = std::sqrt(v);
    expected.push_back(normalize_minmax(rss));
  }
  const hid_t f = H5Fcreate(path.c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT);
  write_complex_dataset(f, "kspace", {slices, coils, n, n}, raw);
  H5Fclose(f);
  const auto s = train::ingest_fastmri_volume(path, 1, 4, 0.08, 0);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_LE(max_abs_diff(s[0].target.magnitude(), expected[1]), 1e-9);
  fs::remove_all(dir);
}

TEST(Ingest, ErrorKinds) {
  const auto dir = scratch("errors");
  EXPECT_THROW(train::ingest_fastmri_volume(dir / "absent.h5", 0, 4, 0.08, 0), MissingDataset);
  std::ofstream(dir / "junk.h5") << "this is not hdf5";
  EXPECT_THROW(train::ingest_fastmri_volume(dir / "junk.h5", 0, 4, 0.08, 0), CorruptFile);
  {
    const hid_t f = H5Fcreate((dir / "other.h5").c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT);
    write_real_dataset(f, "ismrmrd_header", {2, 32, 32}, volume(2, 32));
    H5Fclose(f);
  }
  EXPECT_THROW(train::ingest_fastmri_volume(dir / "other.h5", 0, 4, 0.08, 0), MissingDataset);
  {
    const hid_t f = H5Fcreate((dir / "flat.h5").c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT);
    write_real_dataset(f, "reconstruction_rss", {32, 32}, std::vector<double>(32 * 32, 1.0));
    H5Fclose(f);
  }
  EXPECT_THROW(train::ingest_fastmri_volume(dir / "flat.h5", 0, 4, 0.08, 0), CorruptFile);
  fs::remove_all(dir);
}

TEST(Schedule, WarmupThenCosine) {
  train::TrainConfig c;
  c.lr = 2e-3;
  c.warmup_epochs = 4;
  c.epochs = 20;
  EXPECT_EQ(train::lr_at(0, c), 0.0);
  EXPECT_NEAR(train::lr_at(2, c), 1e-3, 1e-15);
  EXPECT_NEAR(train::lr_at(4, c), 2e-3, 1e-15);
  EXPECT_NEAR(train::lr_at(12, c), 1e-3, 1e-15);
  EXPECT_NEAR(train::lr_at(20, c), 0.0, 1e-15);
  double prev = train::lr_at(4, c);
  for (double e = 4.5; e <= 20; e += 0.5) {
    EXPECT_LE(train::lr_at(e, c), prev);
    prev = train::lr_at(e, c);
  }
}

TEST(AdamWTest, FirstStepAndDecoupledDecay) {
  nn::ParamStore ps(0);
  auto p = ps.add("p", Tensor({3}, {1.0, -2.0, 0.5}));
  p.node()->grad_buffer() = Tensor({3}, {0.3, -0.1, 0.0});
  train::AdamW opt;
  train::TrainConfig cfg;
  opt.update(ps, 0.01, cfg);
  // Decay first, then the bias-corrected step lr * g / (|g| + eps).
  const double d = 1.0 - 0.01 * 0.01;
  EXPECT_NEAR(p.value()[0], 1.0 * d - 0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value()[1], -2.0 * d + 0.01 * 0.1 / (0.1 + 1e-8), 1e-15);
  EXPECT_EQ(p.value()[2], 0.5 * d);
  EXPECT_EQ(opt.step, 1u);
}

class StepTest : public ::testing::Test {
 protected:
  void SetUp() override {
    mask = make_equispaced_mask(32, 4, 0.08, 0);
    data = train::phantom_dataset(4, 32, 2, mask);
    for (const auto& s : data) ptrs.push_back(&s);
    batch = train::make_batch(ptrs);
  }
  SamplingMask mask;
  std::vector<train::SliceSample> data;
  std::vector<const train::SliceSample*> ptrs;
  train::Batch batch;
};

TEST_F(StepTest, BatchLayoutAndLossOracle) {
  EXPECT_EQ(batch.zero_filled.shape(), (Shape{4, 32, 32, 2}));
  EXPECT_EQ(batch.ids[2], data[2].slice_id);
  net::Model m(tiny_model());
  const Tensor out = m.forward(ag::Var(batch.zero_filled), batch.ksp).value();
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += std::abs(out[i] - batch.target[i]);
  EXPECT_NEAR(train::batch_loss(m, batch), s / double(out.size()), 1e-15);
}

TEST_F(StepTest, ZeroLossOnlyDecaysWeights) {
  SamplingMask full;
  full.lines.assign(32, 1);
  full.acceleration_factor = 1;
  full.center_fraction = 0.5;
  const auto d = train::phantom_dataset(2, 32, 2, full);
  const auto b = train::make_batch({&d[0], &d[1]});
  net::Model m(tiny_model());
  std::map<std::string, Tensor> before;
  for (const auto& [n, v] : m.params().entries()) before[n] = v.value();
  train::AdamW opt;
  train::TrainConfig cfg;
  const double loss = train::train_step(b, m, opt, 1e-3, cfg);
  EXPECT_LT(loss, 1e-12);
  for (const auto& [n, v] : m.params().entries())
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.value()[i], before[n][i] * (1.0 - 1e-3 * 0.01)) << n;
}

TEST_F(StepTest, SmallStepsDescend) {
  net::Model m(tiny_model());
  train::AdamW opt;
  train::TrainConfig cfg;
  const double l0 = train::batch_loss(m, batch);
  for (int i = 0; i < 5; ++i) train::train_step(batch, m, opt, 1e-4, cfg);
  EXPECT_LT(train::batch_loss(m, batch), l0);
}

TEST_F(StepTest, NonFiniteLossCarriesDiagnostics) {
  net::Model m(tiny_model());
  m.params().at("unembed.bias").mutable_value()[0] = std::numeric_limits<double>::quiet_NaN();
  train::AdamW opt;
  try {
    train::train_step(batch, m, opt, 1e-3, train::TrainConfig{});
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("param_finite"), std::string::npos);
    EXPECT_NE(msg.find(data[0].slice_id), std::string::npos);
  }
}

TEST(Split, DeterministicAndNeverEmpty) {
  const auto mask = make_equispaced_mask(32, 4, 0.08, 0);
  const auto d = train::phantom_dataset(200, 32, 4, mask);
  const auto a = train::split_dataset(d), b = train::split_dataset(d);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.train.size() + a.val.size(), 200u);
  EXPECT_GT(a.val.size(), 5u);
  EXPECT_LT(a.val.size(), 40u);
  for (const auto* s : a.val) EXPECT_TRUE(train::is_validation(s->slice_id));
  const std::vector<train::SliceSample> two(d.begin(), d.begin() + 2);
  const auto t = train::split_dataset(two);
  EXPECT_EQ(t.val.size() + t.train.size(), 2u);
  EXPECT_GE(t.val.size(), 1u);
  EXPECT_GE(t.train.size(), 1u);
}

TEST(Fit, ResumeReproducesUninterruptedRun) {
  const auto mask = make_equispaced_mask(32, 4, 0.08, 0);
  const auto data = train::phantom_dataset(12, 32, 6, mask);
  const auto cfg = tiny_train(4);
  const auto da = scratch("full"), db = scratch("resumed"), dc = scratch("again");

  net::Model ma(tiny_model());
  const auto full = train::fit(cfg, ma, data, {da, false, 0, {}});
  ASSERT_EQ(full.history.size(), 4u);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_LE(full.history[i].best_loss, full.history[i - 1].best_loss);
  EXPECT_TRUE(fs::exists(da / "best.ckpt"));
  EXPECT_TRUE(fs::exists(da / "reports" / "epoch_003.csv"));

  net::Model mb(tiny_model());
  const auto part = train::fit(cfg, mb, data, {db, false, 2, {}});
  EXPECT_EQ(part.history.size(), 2u);
  net::Model mb2(tiny_model());
  const auto rest = train::fit(cfg, mb2, data, {db, true, 0, {}});
  ASSERT_EQ(rest.history.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(rest.history[i].train_loss, full.history[i].train_loss, 1e-6) << i;

  std::ifstream log(db / "train_log.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 5u);

  net::Model mc(tiny_model());
  train::fit(cfg, mc, data, {dc, false, 0, {}});
  EXPECT_EQ(slurp(da / "last.ckpt"), slurp(dc / "last.ckpt"));

  const auto loaded = train::load_model(da / "last.ckpt");
  EXPECT_EQ(loaded.config(), ma.config());
  const auto rec_a = ma.reconstruct(data[0].zero_filled, data[0].ksp);
  EXPECT_EQ(max_abs_diff(loaded.reconstruct(data[0].zero_filled, data[0].ksp).tensor(), rec_a.tensor()), 0.0);
  for (const auto& d : {da, db, dc}) fs::remove_all(d);
}

TEST(Fit, FailureWritesDiagnostics) {
  const auto mask = make_equispaced_mask(32, 4, 0.08, 0);
  const auto data = train::phantom_dataset(8, 32, 6, mask);
  const auto dir = scratch("nan");
  net::Model m(tiny_model());
  m.params().at("embed.bias").mutable_value()[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(train::fit(tiny_train(2), m, data, {dir, false, 0, {}}), NonFiniteLoss);
  EXPECT_TRUE(fs::exists(dir / "diagnostics.json"));
  fs::remove_all(dir);
}

TEST(DatasetIo, SaveLoadRoundTrip) {
  const auto mask = make_equispaced_mask(32, 4, 0.08, 9);
  const auto data = train::phantom_dataset(3, 32, 1, mask);
  const auto dir = scratch("dataset");
  train::save_dataset(dir, data, {{"source", "phantom"}});
  const auto back = train::load_dataset(dir);
  ASSERT_EQ(back.samples.size(), 3u);
  EXPECT_EQ(back.mask.lines, mask.lines);
  EXPECT_EQ(back.meta.at("source"), "phantom");
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.samples[i].slice_id, data[i].slice_id);
    EXPECT_EQ(max_abs_diff(back.samples[i].zero_filled.tensor(), data[i].zero_filled.tensor()), 0.0);
  }
  EXPECT_THROW(train::load_dataset(dir / "nope"), MissingDataset);
  EXPECT_THROW(train::save_dataset(dir, {}, {}), ConfigError);
  fs::remove_all(dir);
}
