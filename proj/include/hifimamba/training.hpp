/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <hdf5.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hifimamba/archive.hpp"
#include "hifimamba/metrics.hpp"
#include "hifimamba/network.hpp"

namespace hifi::train {

/// Centre fraction paired with each acceleration in the fastMRI protocol.
inline double default_center_fraction(int af) { return af >= 8 ? 0.04 : 0.08; }

struct TrainConfig {
  double lr = 1e-3;
  std::size_t warmup_epochs = 5;
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  int af = 4;
  double center_fraction = 0.08;
  std::string loss = "l1";
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be < epochs");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (loss != "l1") throw ConfigError("unsupported loss '" + loss + "'");
    if (af < 1) throw ConfigError("af must be >= 1");
  }
  bool operator==(const TrainConfig&) const = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"warmup_epochs", c.warmup_epochs},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"af", c.af},
          {"center_fraction", c.center_fraction},
          {"loss", c.loss},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.at("lr");
  c.warmup_epochs = j.at("warmup_epochs");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.seed = j.at("seed");
  c.af = j.at("af");
  c.center_fraction = j.at("center_fraction");
  c.loss = j.at("loss");
  c.weight_decay = j.at("weight_decay");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.eps = j.at("eps");
  c.validate();
  return c;
}

struct SliceSample {
  ComplexImage target;
  ComplexImage zero_filled;
  KSpace ksp;
  std::string slice_id;
};

/// Normalises a real magnitude slice and simulates its acquisition.
inline SliceSample make_sample(const Tensor& real_image, const SamplingMask& mask, std::string id) {
  ComplexImage target = ComplexImage::from_real(normalize_minmax(real_image));
  auto [zf, ksp] = undersample(target, mask);
  return {std::move(target), std::move(zf), std::move(ksp), std::move(id)};
}

/// Randomised Shepp-Logan-style phantom: an outer head ellipse with a darker
/// skull rim, plus a handful of additive interior ellipses.
inline Tensor phantom_image(std::size_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto U = [&](double a, double b) { return a + (b - a) * u(rng); };
  struct Ellipse {
    double cx, cy, a, b, th, val;
  };
  std::vector<Ellipse> es;
  const double hx = U(-0.05, 0.05), hy = U(-0.05, 0.05), ha = U(0.62, 0.82), hb = U(0.78, 0.92), hth = U(-0.3, 0.3);
  es.push_back({hx, hy, ha, hb, hth, 1.0});
  es.push_back({hx, hy, ha * 0.9, hb * 0.92, hth, -0.7});
  const int n_inner = 4 + static_cast<int>(u(rng) * 5.0);
  for (int i = 0; i < n_inner; ++i) {
    const double r = U(0.0, 0.45), phi = U(0.0, 2 * std::numbers::pi);
    es.push_back({hx + r * std::cos(phi) * ha, hy + r * std::sin(phi) * hb, U(0.04, 0.3), U(0.04, 0.3),
                  U(0.0, std::numbers::pi), U(-0.25, 0.45)});
  }
  Tensor img({size, size});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double py = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(size) - 1.0;
      const double px = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(size) - 1.0;
      double v = 0;
      for (const auto& e : es) {
        const double dx = px - e.cx, dy = py - e.cy, c = std::cos(e.th), s = std::sin(e.th);
        const double xr = c * dx + s * dy, yr = -s * dx + c * dy;
        if ((xr * xr) / (e.a * e.a) + (yr * yr) / (e.b * e.b) <= 1.0) v += e.val;
      }
      img.at(y, x) = v;
    }
  return img;
}

inline std::vector<SliceSample> phantom_dataset(std::size_t n, std::size_t size, std::uint64_t seed,
                                                const SamplingMask& mask) {
  if (size % 2 || size < 32) throw ConfigError("phantom size must be even and >= 32");
  if (mask.width() != size) throw ShapeMismatch("mask width does not match phantom size");
  std::vector<SliceSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(nn::splitmix64(seed * 0x9E3779B97F4A7C15ULL + i));
    out.push_back(make_sample(phantom_image(size, rng), mask, "phantom-" + std::to_string(seed) + "-" + std::to_string(i)));
  }
  return out;
}

namespace detail {

struct H5Handle {
  hid_t id = H5I_INVALID_HID;
  herr_t (*close)(hid_t) = nullptr;
  H5Handle(hid_t i, herr_t (*c)(hid_t)) : id(i), close(c) {}
  H5Handle(const H5Handle&) = delete;
  H5Handle& operator=(const H5Handle&) = delete;
  ~H5Handle() {
    if (id >= 0 && close) close(id);
  }
};

inline bool h5_has(hid_t file, const char* name) { return H5Lexists(file, name, H5P_DEFAULT) > 0; }

/// Reads a real [S,H,W] dataset as doubles.
inline Tensor h5_read_real(hid_t file, const char* name, const std::string& origin) {
  H5Handle ds(H5Dopen2(file, name, H5P_DEFAULT), H5Dclose);
  if (ds.id < 0) throw CorruptFile(origin + ": cannot open dataset " + name);
  H5Handle sp(H5Dget_space(ds.id), H5Sclose);
  const int rank = H5Sget_simple_extent_ndims(sp.id);
  if (rank != 3) throw CorruptFile(origin + ": " + name + " must be [slices,H,W]");
  hsize_t dims[3];
  H5Sget_simple_extent_dims(sp.id, dims, nullptr);
  Tensor t({dims[0], dims[1], dims[2]});
  if (H5Dread(ds.id, H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, t.data().data()) < 0)
    throw CorruptFile(origin + ": failed to read " + name);
  return t;
}

/// Reads complex k-space ([S,H,W] or multicoil [S,C,H,W], compound {r,i})
/// and returns per-slice magnitude images (root-sum-of-squares over coils).
inline Tensor h5_kspace_to_magnitude(hid_t file, const std::string& origin) {
  H5Handle ds(H5Dopen2(file, "kspace", H5P_DEFAULT), H5Dclose);
  if (ds.id < 0) throw CorruptFile(origin + ": cannot open kspace");
  H5Handle sp(H5Dget_space(ds.id), H5Sclose);
  const int rank = H5Sget_simple_extent_ndims(sp.id);
  if (rank != 3 && rank != 4) throw CorruptFile(origin + ": kspace must be 3-D or 4-D");
  hsize_t dims[4] = {1, 1, 1, 1};
  H5Sget_simple_extent_dims(sp.id, dims, nullptr);
  const hsize_t s = dims[0], coils = rank == 4 ? dims[1] : 1, h = dims[rank - 2], w = dims[rank - 1];
  H5Handle ct(H5Tcreate(H5T_COMPOUND, 2 * sizeof(double)), H5Tclose);
  H5Tinsert(ct.id, "r", 0, H5T_NATIVE_DOUBLE);
  H5Tinsert(ct.id, "i", sizeof(double), H5T_NATIVE_DOUBLE);
  std::vector<double> raw(2 * s * coils * h * w);
  if (H5Dread(ds.id, ct.id, H5S_ALL, H5S_ALL, H5P_DEFAULT, raw.data()) < 0)
    throw CorruptFile(origin + ": kspace is not a complex {r,i} compound");
  Tensor mag({s, h, w});
  for (hsize_t k = 0; k < s; ++k)
    for (hsize_t c = 0; c < coils; ++c) {
      const ComplexGrid g = hifi::detail::grid_from_slab(&raw[2 * (k * coils + c) * h * w], h, w);
      const ComplexGrid im = fft2c(g, true);
      for (hsize_t i = 0; i < h * w; ++i) mag[k * h * w + i] += std::norm(im.data()[i]);
    }
  for (auto& v : mag.data()) v = std::sqrt(v);
  return mag;
}

}  // namespace detail

/// Loads one fastMRI-style HDF5 volume, drops slice_trim slices at each end and
/// simulates the acquisition of every remaining slice. Prefers the stored
/// reconstruction (esc, then rss) over recomputing from k-space.
inline std::vector<SliceSample> ingest_fastmri_volume(const std::filesystem::path& path, std::size_t slice_trim,
                                                      int af, double center_fraction, std::uint64_t mask_seed) {
  if (!std::filesystem::exists(path)) throw MissingDataset("no such volume: " + path.string());
  H5E_auto2_t old_fn = nullptr;
  void* old_data = nullptr;
  H5Eget_auto2(H5E_DEFAULT, &old_fn, &old_data);
  H5Eset_auto2(H5E_DEFAULT, nullptr, nullptr);
  struct Restore {
    H5E_auto2_t fn;
    void* data;
    ~Restore() { H5Eset_auto2(H5E_DEFAULT, fn, data); }
  } restore{old_fn, old_data};

  const std::string origin = path.string();
  if (H5Fis_hdf5(origin.c_str()) <= 0) throw CorruptFile(origin + ": not an HDF5 file");
  detail::H5Handle file(H5Fopen(origin.c_str(), H5F_ACC_RDONLY, H5P_DEFAULT), H5Fclose);
  if (file.id < 0) throw CorruptFile(origin + ": cannot open");
  Tensor vol;
  if (detail::h5_has(file.id, "reconstruction_esc"))
    vol = detail::h5_read_real(file.id, "reconstruction_esc", origin);
  else if (detail::h5_has(file.id, "reconstruction_rss"))
    vol = detail::h5_read_real(file.id, "reconstruction_rss", origin);
  else if (detail::h5_has(file.id, "kspace"))
    vol = detail::h5_kspace_to_magnitude(file.id, origin);
  else
    throw MissingDataset(origin + ": no reconstruction_esc, reconstruction_rss or kspace dataset");

  const std::size_t s = vol.dim(0), h = vol.dim(1), w = vol.dim(2);
  if (2 * slice_trim >= s)
    throw EmptyVolume(origin + ": trimming " + std::to_string(slice_trim) + " slices from each end of " +
                      std::to_string(s) + " leaves none");
  const SamplingMask mask = make_equispaced_mask(w, af, center_fraction, mask_seed);
  std::vector<SliceSample> out;
  const std::string stem = path.stem().string();
  for (std::size_t k = slice_trim; k < s - slice_trim; ++k) {
    Tensor slice({h, w});
    std::copy_n(vol.data().begin() + static_cast<std::ptrdiff_t>(k * h * w), h * w, slice.data().begin());
    out.push_back(make_sample(slice, mask, stem + "-" + std::to_string(k)));
  }
  return out;
}

/// Linear warm-up to lr, then cosine decay to 0 at the last epoch.
inline double lr_at(double epoch, const TrainConfig& cfg) {
  const double w = static_cast<double>(cfg.warmup_epochs), e = static_cast<double>(cfg.epochs);
  if (epoch < w) return cfg.lr * epoch / w;
  const double t = std::clamp((epoch - w) / (e - w), 0.0, 1.0);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Adam moments with decoupled weight decay.
struct AdamW {
  std::map<std::string, Tensor> m, v;
  std::uint64_t step = 0;

  void update(nn::ParamStore& ps, double lr, const TrainConfig& cfg) {
    ++step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (const auto& [name, var] : ps.entries()) {
      Tensor& p = ps.at(name).mutable_value();
      const Tensor& g = var.grad();
      auto [mi, fresh_m] = m.try_emplace(name, p.shape());
      auto [vi, fresh_v] = v.try_emplace(name, p.shape());
      Tensor& mt = mi->second;
      Tensor& vt = vi->second;
      const bool has_grad = g.size() == p.size();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = has_grad ? g[i] : 0.0;
        p[i] *= 1.0 - lr * cfg.weight_decay;
        mt[i] = cfg.beta1 * mt[i] + (1.0 - cfg.beta1) * gi;
        vt[i] = cfg.beta2 * vt[i] + (1.0 - cfg.beta2) * gi * gi;
        p[i] -= lr * (mt[i] / bc1) / (std::sqrt(vt[i] / bc2) + cfg.eps);
      }
    }
  }
};

struct Batch {
  Tensor zero_filled, target;  // [B,H,W,2]
  std::vector<KSpace> ksp;
  std::vector<std::string> ids;
};

inline Batch make_batch(const std::vector<const SliceSample*>& samples) {
  if (samples.empty()) throw ConfigError("empty batch");
  const Shape& s = samples.front()->target.tensor().shape();
  const std::size_t slab = shape_numel(s), b = samples.size();
  Batch out{Tensor({b, s[0], s[1], 2}), Tensor({b, s[0], s[1], 2}), {}, {}};
  for (std::size_t n = 0; n < b; ++n) {
    const auto& smp = *samples[n];
    if (smp.target.tensor().shape() != s) throw ShapeMismatch("batch samples differ in shape");
    std::copy(smp.zero_filled.tensor().data().begin(), smp.zero_filled.tensor().data().end(),
              out.zero_filled.data().begin() + static_cast<std::ptrdiff_t>(n * slab));
    std::copy(smp.target.tensor().data().begin(), smp.target.tensor().data().end(),
              out.target.data().begin() + static_cast<std::ptrdiff_t>(n * slab));
    out.ksp.push_back(smp.ksp);
    out.ids.push_back(smp.slice_id);
  }
  return out;
}

/// Mean absolute error of the batch reconstruction; no parameter update.
inline double batch_loss(const net::Model& model, const Batch& batch) {
  ag::NoGradGuard ng;
  ag::Var out = model.forward(ag::Var(batch.zero_filled), batch.ksp);
  return ag::l1_loss(out, batch.target).value()[0];
}

inline std::string diagnostics(const net::Model& model, const Batch& batch, double loss, double lr) {
  nlohmann::json d{{"loss", loss}, {"lr", lr}, {"slices", batch.ids}};
  for (const auto& [name, v] : model.params().entries()) {
    d["param_max_abs"][name] = max_abs(v.value());
    d["param_finite"][name] = v.value().all_finite();
  }
  return d.dump();
}

/// One optimisation step on a batch; returns the pre-update loss.
inline double train_step(const Batch& batch, net::Model& model, AdamW& opt, double lr, const TrainConfig& cfg) {
  model.params().zero_grad();
  ag::Var out = model.forward(ag::Var(batch.zero_filled), batch.ksp);
  ag::Var loss = ag::l1_loss(out, batch.target);
  const double lv = loss.value()[0];
  if (!std::isfinite(lv)) throw NonFiniteLoss("non-finite loss; diagnostics: " + diagnostics(model, batch, lv, lr));
  ag::backward(loss);
  opt.update(model.params(), lr, cfg);
  return lv;
}

/// 10% validation split by a hash of the slice id.
inline bool is_validation(const std::string& slice_id) { return nn::fnv1a64(slice_id) % 10 == 0; }

struct Split {
  std::vector<const SliceSample*> train, val;
};

inline Split split_dataset(const std::vector<SliceSample>& data) {
  Split s;
  for (const auto& d : data) (is_validation(d.slice_id) ? s.val : s.train).push_back(&d);
  // Tiny datasets can hash everything into one side; move the lowest-hash slice over.
  if (s.val.empty() && s.train.size() > 1) {
    auto it = std::min_element(s.train.begin(), s.train.end(), [](auto a, auto b) {
      return nn::fnv1a64(a->slice_id) < nn::fnv1a64(b->slice_id);
    });
    s.val.push_back(*it);
    s.train.erase(it);
  }
  if (s.train.empty()) throw ConfigError("dataset too small for a train/validation split");
  return s;
}

inline metrics::ReconReport evaluate_model(const net::Model& model, const std::vector<const SliceSample*>& samples) {
  metrics::ReconReport r;
  for (const auto* s : samples)
    r.per_slice.push_back(metrics::evaluate(model.reconstruct(s->zero_filled, s->ksp), s->target, s->slice_id));
  return r;
}

inline metrics::ReconReport evaluate_zero_filled(const std::vector<const SliceSample*>& samples) {
  metrics::ReconReport r;
  for (const auto* s : samples) r.per_slice.push_back(metrics::evaluate(s->zero_filled, s->target, s->slice_id));
  return r;
}

struct TrainState {
  std::size_t epochs_done = 0;
  double best_val_psnr = -1e300;
  double best_loss = 1e300;
};

inline archive::Archive make_checkpoint(const net::Model& model, const TrainConfig& tcfg, const AdamW* opt,
                                        const TrainState& st) {
  archive::Archive a;
  a.meta = {{"code_version", net::kCodeVersion},
            {"model", net::to_json(model.config())},
            {"train", to_json(tcfg)},
            {"train_state",
             {{"epochs_done", st.epochs_done},
              {"best_val_psnr", st.best_val_psnr},
              {"best_loss", st.best_loss},
              {"adam_step", opt ? opt->step : 0}}}};
  model.export_params(a);
  if (opt) {
    for (const auto& [k, t] : opt->m) a.tensors["adam.m/" + k] = t;
    for (const auto& [k, t] : opt->v) a.tensors["adam.v/" + k] = t;
  }
  return a;
}

inline net::Model load_model(const archive::Archive& a) {
  net::Model m(net::model_config_from_json(a.meta.at("model")));
  m.import_params(a);
  return m;
}

inline net::Model load_model(const std::filesystem::path& ckpt) { return load_model(archive::load(ckpt)); }

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0, train_loss = 0, val_psnr = 0, val_ssim = 0, val_nmse = 0, best_loss = 0;
};

struct FitResult {
  std::vector<EpochLog> history;
  double best_val_psnr = 0;
  double zero_filled_val_psnr = 0;
  std::filesystem::path best_checkpoint, last_checkpoint;
};

struct FitOptions {
  std::filesystem::path out_dir;  ///< empty: keep everything in memory
  bool resume = false;            ///< continue from out_dir/last.ckpt when present
  std::size_t stop_after = 0;     ///< stop once this many epochs are done (0: run to cfg.epochs)
  std::function<void(const EpochLog&)> on_epoch;
};

namespace detail {
inline std::string log_header() { return "epoch,lr,train_loss,val_psnr,val_ssim,val_nmse,best_loss\n"; }
inline std::string log_row(const EpochLog& e) {
  std::ostringstream os;
  os << std::setprecision(17) << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.val_psnr << ','
     << e.val_ssim << ',' << e.val_nmse << ',' << e.best_loss << '\n';
  return os.str();
}
}  // namespace detail

/// Trains model on the dataset, checkpointing best-by-validation-PSNR and last.
inline FitResult fit(const TrainConfig& cfg, net::Model& model, const std::vector<SliceSample>& data,
                     const FitOptions& opts = {}) {
  cfg.validate();
  const Split split = split_dataset(data);
  AdamW opt;
  TrainState st;
  FitResult res;
  const bool persist = !opts.out_dir.empty();
  const auto last_path = opts.out_dir / "last.ckpt", best_path = opts.out_dir / "best.ckpt";
  const auto log_path = opts.out_dir / "train_log.csv";

  if (persist) std::filesystem::create_directories(opts.out_dir / "reports");
  if (persist && opts.resume && std::filesystem::exists(last_path)) {
    const auto a = archive::load(last_path);
    model.import_params(a);
    const auto& ts = a.meta.at("train_state");
    st.epochs_done = ts.at("epochs_done");
    st.best_val_psnr = ts.at("best_val_psnr");
    st.best_loss = ts.at("best_loss");
    opt.step = ts.at("adam_step");
    for (const auto& [k, t] : a.tensors) {
      if (k.rfind("adam.m/", 0) == 0) opt.m[k.substr(7)] = t;
      if (k.rfind("adam.v/", 0) == 0) opt.v[k.substr(7)] = t;
    }
    // keep only the rows of completed epochs
    std::ifstream in(log_path);
    std::string line, kept = detail::log_header();
    std::getline(in, line);
    while (std::getline(in, line)) {
      EpochLog e;
      char c;
      std::istringstream ls(line);
      ls >> e.epoch >> c >> e.lr >> c >> e.train_loss >> c >> e.val_psnr >> c >> e.val_ssim >> c >> e.val_nmse >> c >>
          e.best_loss;
      if (e.epoch < st.epochs_done) {
        kept += line + "\n";
        res.history.push_back(e);
      }
    }
    std::ofstream(log_path, std::ios::trunc) << kept;
  } else if (persist) {
    std::ofstream(log_path, std::ios::trunc) << detail::log_header();
  }

  res.zero_filled_val_psnr = evaluate_zero_filled(split.val).aggregate().psnr;
  const std::size_t end = opts.stop_after ? std::min(opts.stop_after, cfg.epochs) : cfg.epochs;
  const std::size_t nb = (split.train.size() + cfg.batch_size - 1) / cfg.batch_size;

  for (std::size_t epoch = st.epochs_done; epoch < end; ++epoch) {
    std::vector<const SliceSample*> order = split.train;
    std::mt19937_64 rng(nn::splitmix64(cfg.seed ^ nn::splitmix64(epoch + 1)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    double lr = 0;
    for (std::size_t i = 0; i < nb; ++i) {
      const auto first = order.begin() + static_cast<std::ptrdiff_t>(i * cfg.batch_size);
      const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), (i + 1) * cfg.batch_size));
      lr = lr_at(static_cast<double>(epoch) + static_cast<double>(i) / static_cast<double>(nb), cfg);
      const Batch batch = make_batch({first, last});
      try {
        loss_sum += train_step(batch, model, opt, lr, cfg);
      } catch (const NonFiniteLoss& e) {
        if (persist) std::ofstream(opts.out_dir / "diagnostics.json") << e.what() << '\n';
        throw;
      }
    }
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr_at(static_cast<double>(epoch), cfg);
    log.train_loss = loss_sum / static_cast<double>(nb);
    auto report = evaluate_model(model, split.val);
    report.meta = {{"epoch", epoch}, {"mask_hash", archive::hex64(data.front().ksp.mask.hash())}, {"af", cfg.af}};
    const auto agg = report.aggregate();
    log.val_psnr = agg.psnr;
    log.val_ssim = agg.ssim;
    log.val_nmse = agg.nmse;
    st.best_loss = std::min(st.best_loss, log.train_loss);
    log.best_loss = st.best_loss;
    st.epochs_done = epoch + 1;
    const bool improved = agg.psnr > st.best_val_psnr;
    if (improved) st.best_val_psnr = agg.psnr;
    res.history.push_back(log);
    if (persist) {
      std::ostringstream name;
      name << "epoch_" << std::setw(3) << std::setfill('0') << epoch;
      report.write(opts.out_dir / "reports" / name.str());
      std::ofstream(log_path, std::ios::app) << detail::log_row(log);
      const auto ckpt = make_checkpoint(model, cfg, &opt, st);
      if (improved) archive::save(ckpt, best_path);
      archive::save(ckpt, last_path);
    }
    if (opts.on_epoch) opts.on_epoch(log);
  }
  res.best_val_psnr = st.best_val_psnr;
  if (persist) {
    res.best_checkpoint = best_path;
    res.last_checkpoint = last_path;
  }
  return res;
}

/// On-disk dataset: targets in dataset.hfa plus the shared mask files.
/// Zero-filled inputs and k-space are re-simulated on load.
inline void save_dataset(const std::filesystem::path& dir, const std::vector<SliceSample>& data,
                         const nlohmann::json& meta) {
  if (data.empty()) throw ConfigError("refusing to save an empty dataset");
  std::filesystem::create_directories(dir);
  archive::Archive a;
  a.meta = meta;
  nlohmann::json ids = nlohmann::json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    ids.push_back(data[i].slice_id);
    a.tensors["target/" + std::to_string(i)] = data[i].target.tensor();
  }
  a.meta["slice_ids"] = ids;
  archive::save(a, dir / "dataset.hfa");
  save_mask(data.front().ksp.mask, (dir / "mask").string());
}

struct Dataset {
  std::vector<SliceSample> samples;
  SamplingMask mask;
  nlohmann::json meta;
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw MissingDataset("dataset directory not found: " + dir.string());
  const auto a = archive::load(dir / "dataset.hfa");
  Dataset d;
  d.mask = load_mask((dir / "mask").string());
  d.meta = a.meta;
  const auto& ids = a.meta.at("slice_ids");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    ComplexImage target(a.get("target/" + std::to_string(i)));
    auto [zf, ksp] = undersample(target, d.mask);
    d.samples.push_back({std::move(target), std::move(zf), std::move(ksp), ids[i].get<std::string>()});
  }
  if (d.samples.empty()) throw EmptyVolume("dataset at " + dir.string() + " has no samples");
  return d;
}

}  // namespace hifi::train
