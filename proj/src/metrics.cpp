#include "ckm/metrics.hpp"

#include "ckm/error.hpp"

#include <cmath>

namespace ckm::metrics {
namespace {

void require_match(const NdArrayD& pred, const NdArrayD& truth, const char* what) {
  if (pred.shape != truth.shape) {
    throw InvalidArgument(std::string(what) + ": shape mismatch " + shape_to_string(pred.shape) +
                          " vs " + shape_to_string(truth.shape));
  }
  if (pred.numel() == 0) throw InvalidArgument(std::string(what) + ": empty input");
}

using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Valid-mode separable filtering of a plane with the same taps on both axes.
Plane filter_valid(const Plane& in, const Eigen::ArrayXd& taps) {
  const Index k = taps.size();
  const Index h = in.rows(), w = in.cols();
  Plane rows(h, w - k + 1);
  for (Index c = 0; c + k <= w; ++c) {
    rows.col(c) = in.middleCols(c, k).matrix() * taps.matrix();
  }
  Plane out(h - k + 1, w - k + 1);
  for (Index r = 0; r + k <= h; ++r) {
    out.row(r) = (taps.matrix().transpose() * rows.middleRows(r, k).matrix()).array();
  }
  return out;
}

double ssim_plane(const Plane& x, const Plane& y, const Eigen::ArrayXd& taps,
                  const SsimOptions& o) {
  const double c1 = (o.k1 * o.dynamic_range) * (o.k1 * o.dynamic_range);
  const double c2 = (o.k2 * o.dynamic_range) * (o.k2 * o.dynamic_range);
  const Plane mu_x = filter_valid(x, taps);
  const Plane mu_y = filter_valid(y, taps);
  const Plane xx = filter_valid(x * x, taps);
  const Plane yy = filter_valid(y * y, taps);
  const Plane xy = filter_valid(x * y, taps);
  const Plane var_x = xx - mu_x * mu_x;
  const Plane var_y = yy - mu_y * mu_y;
  const Plane cov = xy - mu_x * mu_y;
  const Plane map = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) /
                    ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
  return map.mean();
}

}  // namespace

double mae(const NdArrayD& pred, const NdArrayD& truth) {
  require_match(pred, truth, "mae");
  return (pred.data - truth.data).abs().mean();
}

double mse(const NdArrayD& pred, const NdArrayD& truth) {
  require_match(pred, truth, "mse");
  return (pred.data - truth.data).square().mean();
}

double rmse(const NdArrayD& pred, const NdArrayD& truth) { return std::sqrt(mse(pred, truth)); }

double nmse(const NdArrayD& pred, const NdArrayD& truth) {
  require_match(pred, truth, "nmse");
  const double energy = truth.data.square().sum();
  if (energy == 0.0) throw NumericalError("nmse: undefined for an all-zero ground truth");
  return (pred.data - truth.data).square().sum() / energy;
}

double psnr_from_mse(double mse_value, double peak) {
  if (mse_value < 1e-10) return kPsnrCapDb;
  return 10.0 * std::log10(peak * peak / mse_value);
}

double psnr(const NdArrayD& pred, const NdArrayD& truth, double peak) {
  return psnr_from_mse(mse(pred, truth), peak);
}

Eigen::ArrayXd gaussian_window(int size, double sigma) {
  Eigen::ArrayXd taps(size);
  const double center = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - center;
    taps[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  return taps / taps.sum();
}

double ssim(const NdArrayD& pred, const NdArrayD& truth, const SsimOptions& options) {
  require_match(pred, truth, "ssim");
  if (pred.rank() < 2) throw InvalidArgument("ssim: need at least 2 dimensions");
  const Index h = pred.shape[pred.rank() - 2];
  const Index w = pred.shape[pred.rank() - 1];
  if (h < options.window || w < options.window) {
    throw InvalidArgument("ssim: images must be at least " + std::to_string(options.window) +
                          " pixels on each side, got " + shape_to_string(pred.shape));
  }
  const Eigen::ArrayXd taps = gaussian_window(options.window, options.sigma);
  const Index planes = pred.numel() / (h * w);
  double total = 0.0;
  for (Index p = 0; p < planes; ++p) {
    const Plane x = Eigen::Map<const Plane>(pred.data.data() + p * h * w, h, w);
    const Plane y = Eigen::Map<const Plane>(truth.data.data() + p * h * w, h, w);
    total += ssim_plane(x, y, taps, options);
  }
  return total / static_cast<double>(planes);
}

nlohmann::json MetricReport::to_json() const {
  return {{"mae", mae},         {"nmse", nmse}, {"rmse", rmse},
          {"psnr_db", psnr_db}, {"ssim", ssim}, {"sample_count", sample_count}};
}

MetricReport MetricReport::from_json(const nlohmann::json& doc) {
  MetricReport r;
  r.mae = doc.at("mae").get<double>();
  r.nmse = doc.at("nmse").get<double>();
  r.rmse = doc.at("rmse").get<double>();
  r.psnr_db = doc.at("psnr_db").get<double>();
  r.ssim = doc.at("ssim").get<double>();
  r.sample_count = doc.at("sample_count").get<std::int64_t>();
  return r;
}

void MetricAccumulator::add(const NdArrayD& pred, const NdArrayD& truth, const NdArrayD* mask) {
  require_match(pred, truth, "MetricAccumulator::add");
  if (!pred.data.allFinite() || !truth.data.allFinite()) {
    throw NumericalError("metrics: non-finite values in prediction or ground truth");
  }
  const Eigen::ArrayXd diff = pred.data - truth.data;
  if (mask) {
    if (mask->shape != pred.shape) throw InvalidArgument("metrics: mask shape mismatch");
    const Eigen::ArrayXd keep = (mask->data != 0.0).cast<double>();
    abs_sum_ += (diff.abs() * keep).sum();
    sq_sum_ += (diff.square() * keep).sum();
    truth_sq_sum_ += (truth.data.square() * keep).sum();
    pixels_ += static_cast<std::int64_t>(keep.sum());
  } else {
    abs_sum_ += diff.abs().sum();
    sq_sum_ += diff.square().sum();
    truth_sq_sum_ += truth.data.square().sum();
    pixels_ += pred.numel();
  }
  ssim_sum_ += ssim(pred, truth);
  ++samples_;
}

MetricReport MetricAccumulator::report() const {
  if (samples_ == 0 || pixels_ == 0) throw InvalidArgument("metrics: no samples accumulated");
  if (truth_sq_sum_ == 0.0) throw NumericalError("nmse: undefined for an all-zero ground truth");
  MetricReport r;
  const double mse_value = sq_sum_ / static_cast<double>(pixels_);
  r.mae = abs_sum_ / static_cast<double>(pixels_);
  r.rmse = std::sqrt(mse_value);
  r.nmse = sq_sum_ / truth_sq_sum_;
  r.psnr_db = psnr_from_mse(mse_value);
  r.ssim = ssim_sum_ / static_cast<double>(samples_);
  r.sample_count = samples_;
  return r;
}

}  // namespace ckm::metrics
