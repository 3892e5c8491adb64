#pragma once

#include "ckm/ndarray.hpp"

#include "json.hpp"

#include <cstdint>

namespace ckm::metrics {

double mae(const NdArrayD& pred, const NdArrayD& truth);
double mse(const NdArrayD& pred, const NdArrayD& truth);
double rmse(const NdArrayD& pred, const NdArrayD& truth);
/// sum (pred - truth)^2 / sum truth^2. Throws NumericalError for an all-zero truth.
double nmse(const NdArrayD& pred, const NdArrayD& truth);

inline constexpr double kPsnrCapDb = 100.0;
/// 10*log10(peak^2 / mse); kPsnrCapDb when mse < 1e-10.
double psnr(const NdArrayD& pred, const NdArrayD& truth, double peak = 1.0);
double psnr_from_mse(double mse, double peak = 1.0);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Mean local SSIM over all valid window positions, computed per H x W plane
/// (every leading dimension is treated as a channel) and averaged over planes.
double ssim(const NdArrayD& pred, const NdArrayD& truth, const SsimOptions& options = {});

/// Normalized 1-D Gaussian taps used by ssim.
Eigen::ArrayXd gaussian_window(int size, double sigma);

struct MetricReport {
  double mae = 0.0;
  double nmse = 0.0;
  double rmse = 0.0;
  double psnr_db = 0.0;
  double ssim = 0.0;
  std::int64_t sample_count = 0;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& doc);
};

/// Dataset-level aggregation. MAE, RMSE, NMSE and PSNR are pooled over every
/// counted pixel; SSIM is the mean of per-sample values. An optional mask
/// (same shape, non-zero = counted) excludes pixels from the pooled terms.
class MetricAccumulator {
 public:
  void add(const NdArrayD& pred, const NdArrayD& truth, const NdArrayD* mask = nullptr);
  MetricReport report() const;

 private:
  double abs_sum_ = 0.0;
  double sq_sum_ = 0.0;
  double truth_sq_sum_ = 0.0;
  double ssim_sum_ = 0.0;
  std::int64_t pixels_ = 0;
  std::int64_t samples_ = 0;
};

}  // namespace ckm::metrics
