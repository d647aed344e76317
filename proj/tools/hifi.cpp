/*
 * SPDX-License-Identifier: Apache-2.0
 */
// hifi: simulate, train, reconstruct, evaluate and ablate from the command line.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hifimamba/hifimamba.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hifi;

namespace {

struct Options {
  std::string command;
  std::string config_path;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string baseline;
  std::string split = "all";
  std::string device = "cpu";
  std::optional<std::uint64_t> seed;
  std::optional<int> af;
  std::optional<std::size_t> patch;
  std::optional<std::size_t> epochs;
  bool resume = false;
  std::size_t limit = 0;
  std::vector<std::size_t> kernels{3, 5, 7};
  std::vector<std::string> gate_modes{"gate_bc", "gate_all", "gate_pre"};
  std::vector<std::string> placements{"post_split", "pre_split"};
  std::optional<json> embedded_config;  // set when replaying a manifest
};

json to_json(const Options& o) {
  json j{{"command", o.command},     {"config_path", o.config_path}, {"out", o.out},
         {"data", o.data},           {"checkpoint", o.checkpoint},   {"baseline", o.baseline},
         {"split", o.split},         {"device", o.device},           {"resume", o.resume},
         {"limit", o.limit},         {"kernels", o.kernels},         {"gate_modes", o.gate_modes},
         {"placements", o.placements}};
  j["seed"] = o.seed ? json(*o.seed) : json(nullptr);
  j["af"] = o.af ? json(*o.af) : json(nullptr);
  j["patch"] = o.patch ? json(*o.patch) : json(nullptr);
  j["epochs"] = o.epochs ? json(*o.epochs) : json(nullptr);
  return j;
}

Options options_from_json(const json& j) {
  Options o;
  o.command = j.at("command");
  o.config_path = j.at("config_path");
  o.out = j.at("out");
  o.data = j.at("data");
  o.checkpoint = j.at("checkpoint");
  o.baseline = j.at("baseline");
  o.split = j.at("split");
  o.device = j.at("device");
  o.resume = j.at("resume");
  o.limit = j.at("limit");
  o.kernels = j.at("kernels").get<std::vector<std::size_t>>();
  o.gate_modes = j.at("gate_modes").get<std::vector<std::string>>();
  o.placements = j.at("placements").get<std::vector<std::string>>();
  if (!j.at("seed").is_null()) o.seed = j.at("seed").get<std::uint64_t>();
  if (!j.at("af").is_null()) o.af = j.at("af").get<int>();
  if (!j.at("patch").is_null()) o.patch = j.at("patch").get<std::size_t>();
  if (!j.at("epochs").is_null()) o.epochs = j.at("epochs").get<std::size_t>();
  return o;
}

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string file_hash(const fs::path& p) {
  if (!fs::is_regular_file(p)) return "";
  return archive::hex64(nn::fnv1a64(archive::read_file(p)));
}

config::RunConfig resolve_config(const Options& o) {
  config::RunConfig c;
  if (o.embedded_config)
    c = config::run_config_from_json(*o.embedded_config);
  else if (!o.config_path.empty())
    c = config::load(o.config_path);
  else
    c = config::desk_defaults();
  if (o.embedded_config) return c;  // overrides were already folded in
  if (o.seed) c.dataset.seed = c.model.seed = c.train.seed = *o.seed;
  if (o.af) {
    c.train.af = *o.af;
    c.train.center_fraction = train::default_center_fraction(*o.af);
  }
  if (o.patch) c.model.patch = *o.patch;
  if (o.epochs) {
    c.train.epochs = *o.epochs;
    c.train.warmup_epochs = std::min(c.train.warmup_epochs, *o.epochs - 1);
  }
  c.validate();
  return c;
}

fs::path data_dir(const Options& o) {
  if (!o.data.empty()) return o.data;
  if (const char* env = std::getenv("HIFI_DATA_DIR")) return env;
  throw MissingDataset("no dataset given: pass --data or set HIFI_DATA_DIR");
}

fs::path out_dir(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(o.out);
  return o.out;
}

void write_manifest(const fs::path& dir, const Options& o, const config::RunConfig* cfg, const std::string& started,
                    const json& inputs) {
  json m{{"command", o.command},
         {"options", to_json(o)},
         {"config_path", o.config_path},
         {"output_dir", fs::absolute(dir).string()},
         {"started_at", started},
         {"finished_at", now_utc()},
         {"version", net::kCodeVersion},
         {"inputs", inputs}};
  if (cfg) m["config"] = config::to_json(*cfg);
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

std::vector<train::SliceSample> ingest_all(const config::RunConfig& c, const fs::path& root) {
  std::vector<fs::path> files;
  if (fs::is_directory(root)) {
    for (const auto& e : fs::directory_iterator(root))
      if (e.path().extension() == ".h5") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(root);
  }
  if (files.empty()) throw MissingDataset("no .h5 volumes under " + root.string());
  std::vector<train::SliceSample> all;
  for (const auto& f : files) {
    auto v = train::ingest_fastmri_volume(f, c.dataset.slice_trim, c.train.af, c.train.center_fraction, c.dataset.seed);
    if (!all.empty() && v.front().ksp.mask.lines != all.front().ksp.mask.lines)
      throw ConfigError("volumes differ in width; one dataset needs one mask");
    for (auto& s : v) all.push_back(std::move(s));
  }
  return all;
}

int cmd_simulate(const Options& o) {
  const auto started = now_utc();
  const auto c = resolve_config(o);
  const fs::path dir = out_dir(o);
  std::vector<train::SliceSample> data;
  json inputs = json::object();
  if (c.dataset.source == "phantom") {
    const auto mask = make_equispaced_mask(c.dataset.size, c.train.af, c.train.center_fraction, c.dataset.seed);
    data = train::phantom_dataset(c.dataset.n, c.dataset.size, c.dataset.seed, mask);
  } else {
    fs::path root = c.dataset.path;
    if (root.empty()) {
      const char* env = std::getenv("HIFI_DATA_DIR");
      if (!env) throw MissingDataset("dataset.path is empty and HIFI_DATA_DIR is unset");
      root = env;
    }
    if (!fs::exists(root)) throw MissingDataset("dataset path not found: " + root.string());
    data = ingest_all(c, root);
    inputs["source"] = root.string();
  }
  train::save_dataset(dir, data,
                      {{"source", c.dataset.source}, {"af", c.train.af}, {"center_fraction", c.train.center_fraction},
                       {"seed", c.dataset.seed}});
  const auto& mask = data.front().ksp.mask;
  std::cerr << "simulate: " << data.size() << " slices, mask " << mask.count() << "/" << mask.width() << " lines ("
            << mask.center_count << " centre)\n";
  write_manifest(dir, o, &c, started, inputs);
  return 0;
}

int cmd_train(const Options& o) {
  const auto started = now_utc();
  const auto c = resolve_config(o);
  const fs::path ddir = data_dir(o);
  const auto ds = train::load_dataset(ddir);
  const fs::path dir = out_dir(o);
  net::Model model(c.model);
  train::FitOptions opts;
  opts.out_dir = dir;
  opts.resume = o.resume;
  opts.on_epoch = [](const train::EpochLog& e) {
    std::cerr << "epoch " << e.epoch << " lr " << e.lr << " loss " << e.train_loss << " val_psnr " << e.val_psnr
              << " val_ssim " << e.val_ssim << "\n";
  };
  const auto res = train::fit(c.train, model, ds.samples, opts);
  std::cerr << "train: best val PSNR " << res.best_val_psnr << " dB (zero-filled " << res.zero_filled_val_psnr
            << " dB)\n";
  write_manifest(dir, o, &c, started, {{"dataset", file_hash(ddir / "dataset.hfa")}});
  return 0;
}

net::Model checked_model(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const auto a = archive::load(o.checkpoint);
  net::Model m = train::load_model(a);
  if (o.patch && *o.patch != m.config().patch)
    throw ConfigError("--patch " + std::to_string(*o.patch) + " disagrees with checkpoint patch " +
                      std::to_string(m.config().patch));
  if (!o.config_path.empty() && config::load(o.config_path).model != m.config())
    throw ConfigError("model section of " + o.config_path + " does not match the checkpoint");
  return m;
}

std::vector<const train::SliceSample*> select(const train::Dataset& ds, const std::string& split) {
  if (split == "all") {
    std::vector<const train::SliceSample*> v;
    for (const auto& s : ds.samples) v.push_back(&s);
    return v;
  }
  const auto sp = train::split_dataset(ds.samples);
  if (split == "val") return sp.val;
  if (split == "train") return sp.train;
  throw ConfigError("--split must be all, train or val");
}

int cmd_reconstruct(const Options& o) {
  const auto started = now_utc();
  const net::Model model = checked_model(o);
  const fs::path ddir = data_dir(o);
  const auto ds = train::load_dataset(ddir);
  const fs::path dir = out_dir(o);
  auto samples = select(ds, o.split);
  if (o.limit && samples.size() > o.limit) samples.resize(o.limit);
  archive::Archive raw;
  raw.meta = {{"checkpoint", file_hash(o.checkpoint)}};
  for (const auto* s : samples) {
    const ComplexImage pred = model.reconstruct(s->zero_filled, s->ksp);
    const fs::path sd = dir / s->slice_id;
    fs::create_directories(sd);
    const Tensor mp = pred.magnitude(), mt = s->target.magnitude();
    image::write_png(sd / "recon.png", mp);
    image::write_png(sd / "target.png", mt);
    image::write_png(sd / "zero_filled.png", s->zero_filled.magnitude());
    image::write_png(sd / "error.png", image::error_map(mp, mt), 0.0, 0.2);
    raw.tensors["recon/" + s->slice_id] = pred.tensor();
    raw.tensors["error/" + s->slice_id] = image::error_map(mp, mt);
  }
  archive::save(raw, dir / "reconstructions.hfa");
  std::cerr << "reconstruct: " << samples.size() << " slices written to " << dir << "\n";
  write_manifest(dir, o, nullptr, started,
                 {{"checkpoint", file_hash(o.checkpoint)}, {"dataset", file_hash(ddir / "dataset.hfa")}});
  return 0;
}

int cmd_evaluate(const Options& o) {
  const auto started = now_utc();
  const fs::path ddir = data_dir(o);
  const auto ds = train::load_dataset(ddir);
  const fs::path dir = out_dir(o);
  const auto samples = select(ds, o.split);
  metrics::ReconReport rep;
  std::string tag;
  if (!o.baseline.empty()) {
    if (o.baseline != "zero_filled" && o.baseline != "target")
      throw ConfigError("--baseline must be zero_filled or target");
    for (const auto* s : samples)
      rep.per_slice.push_back(
          metrics::evaluate(o.baseline == "target" ? s->target : s->zero_filled, s->target, s->slice_id));
    tag = o.baseline;
  } else {
    rep = train::evaluate_model(checked_model(o), samples);
    tag = file_hash(o.checkpoint);
  }
  rep.meta = {{"dataset", ds.meta.value("source", "")},
              {"af", ds.mask.acceleration_factor},
              {"mask_hash", archive::hex64(ds.mask.hash())},
              {"checkpoint", tag},
              {"split", o.split}};
  rep.write(dir / "report");
  const auto a = rep.aggregate();
  std::cout << "PSNR " << a.psnr << " dB  SSIM " << a.ssim << "  NMSE " << a.nmse << "  (" << rep.per_slice.size()
            << " slices)\n";
  write_manifest(dir, o, nullptr, started,
                 {{"checkpoint", file_hash(o.checkpoint)}, {"dataset", file_hash(ddir / "dataset.hfa")}});
  return 0;
}

int cmd_ablate(const Options& o) {
  const auto started = now_utc();
  const auto c = resolve_config(o);
  const fs::path ddir = data_dir(o);
  const auto ds = train::load_dataset(ddir);
  const fs::path dir = out_dir(o);
  std::vector<experiments::AblationRow> rows;
  for (const auto& r : experiments::ablation_grid(o.kernels)) {
    const bool g = std::find(o.gate_modes.begin(), o.gate_modes.end(), ssm::to_string(r.gate_mode)) != o.gate_modes.end();
    const bool p = std::find(o.placements.begin(), o.placements.end(), ssm::to_string(r.placement)) != o.placements.end();
    if (g && p) rows.push_back(r);
  }
  if (rows.empty()) throw ConfigError("ablation grid is empty after filtering");
  experiments::run_ablation(c, ds.samples, rows, dir / "runs", [](const experiments::AblationRow& r) {
    std::cerr << "ablate: " << r.label() << " PSNR " << r.psnr << " dB\n";
  });
  std::ofstream(dir / "ablation.csv") << experiments::ablation_csv(rows);
  std::ofstream(dir / "ablation.md") << experiments::ablation_markdown(rows);
  std::cout << experiments::ablation_markdown(rows);
  write_manifest(dir, o, &c, started, {{"dataset", file_hash(ddir / "dataset.hfa")}});
  return 0;
}

int dispatch(const Options& o) {
  if (o.device != "cpu") throw ConfigError("device '" + o.device + "' is not available; this build runs on cpu");
  if (o.af && *o.af != 4 && *o.af != 8) throw ConfigError("--af must be 4 or 8");
  if (o.patch && *o.patch != 1 && *o.patch != 2 && *o.patch != 4) throw ConfigError("--patch must be 1, 2 or 4");
  if (o.command == "simulate") return cmd_simulate(o);
  if (o.command == "train") return cmd_train(o);
  if (o.command == "reconstruct") return cmd_reconstruct(o);
  if (o.command == "evaluate") return cmd_evaluate(o);
  if (o.command == "ablate") return cmd_ablate(o);
  throw ConfigError("unknown command '" + o.command + "'");
}

int cmd_rerun(const std::string& manifest_path, const std::string& out) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot read manifest " + manifest_path);
  json m;
  in >> m;
  Options o = options_from_json(m.at("options"));
  if (m.contains("config")) o.embedded_config = m.at("config");
  if (!out.empty()) o.out = out;
  return dispatch(o);
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config_path, "TOML run configuration")->check(CLI::ExistingFile);
  sub->add_option("--out", o.out, "output directory")->required();
  sub->add_option("--seed", o.seed, "override every seed");
  sub->add_option("--af", o.af, "acceleration factor (4 or 8)");
  sub->add_option("--patch", o.patch, "patch size (1, 2 or 4)");
  sub->add_option("--device", o.device, "compute device")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency-decoupled state-space MRI reconstruction"};
  app.require_subcommand(1);
  Options o;
  std::string manifest, rerun_out;

  auto* sim = app.add_subcommand("simulate", "generate phantoms or ingest volumes into a dataset directory");
  add_common(sim, o);

  auto* tr = app.add_subcommand("train", "train a model on a dataset directory");
  add_common(tr, o);
  tr->add_option("--data", o.data, "dataset directory (default: $HIFI_DATA_DIR)");
  tr->add_option("--epochs", o.epochs, "override train.epochs");
  tr->add_flag("--resume", o.resume, "continue from <out>/last.ckpt");

  auto* rc = app.add_subcommand("reconstruct", "reconstruct slices and export previews and error maps");
  add_common(rc, o);
  rc->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  rc->add_option("--data", o.data, "dataset directory (default: $HIFI_DATA_DIR)");
  rc->add_option("--split", o.split, "all, train or val")->capture_default_str();
  rc->add_option("--limit", o.limit, "at most this many slices");

  auto* ev = app.add_subcommand("evaluate", "PSNR/SSIM/NMSE report for a checkpoint or a baseline");
  add_common(ev, o);
  ev->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  ev->add_option("--baseline", o.baseline, "zero_filled or target instead of a checkpoint");
  ev->add_option("--data", o.data, "dataset directory (default: $HIFI_DATA_DIR)");
  ev->add_option("--split", o.split, "all, train or val")->capture_default_str();

  auto* ab = app.add_subcommand("ablate", "sweep gate mode x conv placement x kernel");
  add_common(ab, o);
  ab->add_option("--data", o.data, "dataset directory (default: $HIFI_DATA_DIR)");
  ab->add_option("--epochs", o.epochs, "override train.epochs");
  ab->add_option("--kernels", o.kernels, "conv1d kernels to sweep")->capture_default_str();
  ab->add_option("--gate-modes", o.gate_modes, "gate modes to sweep")->capture_default_str();
  ab->add_option("--placements", o.placements, "conv placements to sweep")->capture_default_str();

  auto* rr = app.add_subcommand("rerun", "replay a run from its manifest.json");
  rr->add_option("manifest", manifest, "manifest.json of a previous run")->required();
  rr->add_option("--out", rerun_out, "output directory (default: the original one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_ = app.exit(e);
    return rc_ == 0 ? 0 : 2;
  }

  try {
    if (rr->parsed()) return cmd_rerun(manifest, rerun_out);
    o.command = app.get_subcommands().front()->get_name();
    return dispatch(o);
  } catch (const hifi::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
