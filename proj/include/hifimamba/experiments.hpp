/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "hifimamba/config.hpp"

namespace hifi::experiments {

struct AblationRow {
  ssm::GateMode gate_mode = ssm::GateMode::gate_bc;
  ssm::ConvPlacement placement = ssm::ConvPlacement::post_split;
  std::size_t kernel = 7;
  bool is_default = false;
  double psnr = 0, ssim = 0, nmse = 0;
  double zero_filled_psnr = 0;
  std::size_t params = 0;

  std::string label() const {
    return ssm::to_string(gate_mode) + "/" + ssm::to_string(placement) + "/k" + std::to_string(kernel);
  }
};

inline bool is_default_variant(ssm::GateMode g, ssm::ConvPlacement p, std::size_t k) {
  return g == ssm::GateMode::gate_bc && p == ssm::ConvPlacement::post_split && k == 7;
}

/// Every gate mode x conv placement x kernel combination.
inline std::vector<AblationRow> ablation_grid(const std::vector<std::size_t>& kernels = {3, 5, 7}) {
  std::vector<AblationRow> rows;
  for (auto g : {ssm::GateMode::gate_bc, ssm::GateMode::gate_all, ssm::GateMode::gate_pre})
    for (auto p : {ssm::ConvPlacement::post_split, ssm::ConvPlacement::pre_split})
      for (auto k : kernels) {
        AblationRow r;
        r.gate_mode = g;
        r.placement = p;
        r.kernel = k;
        r.is_default = is_default_variant(g, p, k);
        rows.push_back(r);
      }
  return rows;
}

struct TrainEval {
  double val_psnr = 0, val_ssim = 0, val_nmse = 0;
  double zero_filled_psnr = 0;
  std::size_t params = 0;
  train::FitResult fit;
};

/// Fresh model from cfg, trained on data; reports final-epoch validation metrics.
inline TrainEval train_and_evaluate(const config::RunConfig& cfg, const std::vector<train::SliceSample>& data,
                                    const train::FitOptions& opts = {}) {
  net::Model model(cfg.model);
  TrainEval r;
  r.params = model.params().scalar_count();
  r.fit = train::fit(cfg.train, model, data, opts);
  const auto split = train::split_dataset(data);
  const auto agg = train::evaluate_model(model, split.val).aggregate();
  r.val_psnr = agg.psnr;
  r.val_ssim = agg.ssim;
  r.val_nmse = agg.nmse;
  r.zero_filled_psnr = r.fit.zero_filled_val_psnr;
  return r;
}

/// Trains one model per row with the same data and seeds, filling in metrics.
inline void run_ablation(const config::RunConfig& base, const std::vector<train::SliceSample>& data,
                         std::vector<AblationRow>& rows, const std::filesystem::path& out_dir = {},
                         const std::function<void(const AblationRow&)>& on_row = {}) {
  for (auto& row : rows) {
    config::RunConfig cfg = base;
    cfg.model.scan.gate_mode = row.gate_mode;
    cfg.model.scan.conv_placement = row.placement;
    cfg.model.scan.conv_kernel = row.kernel;
    train::FitOptions opts;
    if (!out_dir.empty()) {
      std::string dir = row.label();
      std::replace(dir.begin(), dir.end(), '/', '_');
      opts.out_dir = out_dir / dir;
    }
    const auto te = train_and_evaluate(cfg, data, opts);
    row.psnr = te.val_psnr;
    row.ssim = te.val_ssim;
    row.nmse = te.val_nmse;
    row.zero_filled_psnr = te.zero_filled_psnr;
    row.params = te.params;
    if (on_row) on_row(row);
  }
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(10) << "gate_mode,conv_placement,kernel,default,params,psnr,ssim,nmse,zero_filled_psnr\n";
  for (const auto& r : rows)
    os << ssm::to_string(r.gate_mode) << ',' << ssm::to_string(r.placement) << ',' << r.kernel << ','
       << (r.is_default ? 1 : 0) << ',' << r.params << ',' << r.psnr << ',' << r.ssim << ',' << r.nmse << ','
       << r.zero_filled_psnr << '\n';
  return os.str();
}

inline std::string ablation_markdown(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::fixed;
  os << "| gate mode | conv placement | kernel | params | PSNR (dB) | SSIM | NMSE |\n";
  os << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    os << "| " << ssm::to_string(r.gate_mode) << (r.is_default ? " (default)" : "") << " | "
       << ssm::to_string(r.placement) << " | " << r.kernel << " | " << r.params << " | " << std::setprecision(3)
       << r.psnr << " | " << std::setprecision(4) << r.ssim << " | " << std::setprecision(5) << r.nmse << " |\n";
  }
  return os.str();
}

}  // namespace hifi::experiments
