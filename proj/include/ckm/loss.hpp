#pragma once

#include "ckm/ad/ops.hpp"

#include "json.hpp"

#include <vector>

// Composite CKM training loss: pixel L2, Laplacian-pyramid L1 and Sobel
// edge-strength L1. All L1 terms use the mean absolute difference.
namespace ckm::loss {

using ad::Tensor;

struct CompositeLossConfig {
  double lambda1 = 1.0;
  double lambda2 = 0.02;
  double lambda3 = 0.01;
  int pyramid_levels = 4;
  std::vector<double> level_weights{1.0, 0.5, 0.25, 0.125};
  double edge_eps = 1e-6;

  void validate() const;
  nlohmann::json to_json() const;
  static CompositeLossConfig from_json(const nlohmann::json& doc);
};

inline void CompositeLossConfig::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) {
    throw InvalidArgument("loss weights must be non-negative");
  }
  if (pyramid_levels < 1 || static_cast<int>(level_weights.size()) != pyramid_levels) {
    throw InvalidArgument("level_weights must have one entry per pyramid level");
  }
  for (double w : level_weights) {
    if (w < 0) throw InvalidArgument("pyramid level weights must be non-negative");
  }
  if (!(edge_eps > 0)) throw InvalidArgument("edge_eps must be positive");
}

inline nlohmann::json CompositeLossConfig::to_json() const {
  return {{"lambda1", lambda1},           {"lambda2", lambda2},
          {"lambda3", lambda3},           {"pyramid_levels", pyramid_levels},
          {"level_weights", level_weights}, {"edge_eps", edge_eps}};
}

inline CompositeLossConfig CompositeLossConfig::from_json(const nlohmann::json& doc) {
  CompositeLossConfig c;
  c.lambda1 = doc.value("lambda1", c.lambda1);
  c.lambda2 = doc.value("lambda2", c.lambda2);
  c.lambda3 = doc.value("lambda3", c.lambda3);
  c.pyramid_levels = doc.value("pyramid_levels", c.pyramid_levels);
  if (doc.contains("level_weights")) {
    c.level_weights = doc.at("level_weights").get<std::vector<double>>();
  } else if (c.pyramid_levels != 4) {
    c.level_weights.clear();
    for (int l = 0; l < c.pyramid_levels; ++l) c.level_weights.push_back(std::pow(0.5, l));
  }
  c.edge_eps = doc.value("edge_eps", c.edge_eps);
  c.validate();
  return c;
}

/// Mean squared difference over every element.
template <typename Scalar>
Tensor<Scalar> l2_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth) {
  ad::detail::require_same_shape(pred, truth, "l2_loss");
  return ad::mean(ad::square(ad::sub(pred, truth)));
}

/// Band-pass residuals x_l - up(pool(x_l)) for the first levels-1 levels,
/// followed by the low-pass base. Summing upsampled levels restores x exactly.
template <typename Scalar>
std::vector<Tensor<Scalar>> laplacian_pyramid(const Tensor<Scalar>& x, int levels = 4) {
  ad::detail::require_rank(x, 4, "laplacian_pyramid");
  ad::detail::require(levels >= 1, "laplacian_pyramid: levels must be >= 1");
  const Index factor = Index{1} << (levels - 1);
  ad::detail::require(x.dim(2) % factor == 0 && x.dim(3) % factor == 0,
                      "laplacian_pyramid: spatial dims " + shape_to_string(x.shape()) +
                          " not divisible by " + std::to_string(factor));
  std::vector<Tensor<Scalar>> residuals;
  Tensor<Scalar> current = x;
  for (int l = 0; l + 1 < levels; ++l) {
    Tensor<Scalar> down = ad::avg_pool2(current);
    residuals.push_back(ad::sub(current, ad::bilinear_upsample2(down)));
    current = down;
  }
  residuals.push_back(current);
  return residuals;
}

/// Inverse of laplacian_pyramid.
template <typename Scalar>
Tensor<Scalar> reconstruct_pyramid(const std::vector<Tensor<Scalar>>& residuals) {
  ad::detail::require(!residuals.empty(), "reconstruct_pyramid: empty pyramid");
  Tensor<Scalar> current = residuals.back();
  for (auto it = residuals.rbegin() + 1; it != residuals.rend(); ++it) {
    current = ad::add(*it, ad::bilinear_upsample2(current));
  }
  return current;
}

template <typename Scalar>
Tensor<Scalar> lap_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth,
                        const CompositeLossConfig& config = {}) {
  ad::detail::require_same_shape(pred, truth, "lap_loss");
  config.validate();
  const auto pp = laplacian_pyramid(pred, config.pyramid_levels);
  const auto pt = laplacian_pyramid(truth, config.pyramid_levels);
  Tensor<Scalar> total;
  for (int l = 0; l < config.pyramid_levels; ++l) {
    Tensor<Scalar> term = ad::scale(ad::mean(ad::abs(ad::sub(pp[l], pt[l]))),
                                    Scalar(config.level_weights[l]));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

/// Sobel kernels applied per channel with replicate padding;
/// E = sqrt(Gx^2 + Gy^2 + eps).
template <typename Scalar>
Tensor<Scalar> sobel_edge_map(const Tensor<Scalar>& x, double eps = 1e-6) {
  ad::detail::require_rank(x, 4, "sobel_edge_map");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  ad::Buffer<Scalar> gx_data(9), gy_data(9);
  gx_data << -1, 0, 1, -2, 0, 2, -1, 0, 1;
  gy_data << -1, -2, -1, 0, 0, 0, 1, 2, 1;
  const auto kx = Tensor<Scalar>::from_buffer({1, 1, 3, 3}, gx_data);
  const auto ky = Tensor<Scalar>::from_buffer({1, 1, 3, 3}, gy_data);
  const Tensor<Scalar> planes = ad::pad_replicate(ad::reshape(x, {n * c, 1, h, w}), 1);
  const Tensor<Scalar> gx = ad::conv2d(planes, kx);
  const Tensor<Scalar> gy = ad::conv2d(planes, ky);
  const Tensor<Scalar> energy =
      ad::add_scalar(ad::add(ad::square(gx), ad::square(gy)), Scalar(eps));
  return ad::reshape(ad::sqrt(energy), {n, c, h, w});
}

template <typename Scalar>
Tensor<Scalar> edge_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth,
                         double eps = 1e-6) {
  ad::detail::require_same_shape(pred, truth, "edge_loss");
  return ad::mean(ad::abs(ad::sub(sobel_edge_map(pred, eps), sobel_edge_map(truth, eps))));
}

template <typename Scalar>
struct LossTerms {
  Tensor<Scalar> total;
  Tensor<Scalar> l2;
  Tensor<Scalar> lap;
  Tensor<Scalar> edge;
};

/// lambda1 * L2 + lambda2 * Laplacian + lambda3 * edge.
template <typename Scalar>
LossTerms<Scalar> total_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& truth,
                             const CompositeLossConfig& config = {}) {
  ad::detail::require_same_shape(pred, truth, "total_loss");
  LossTerms<Scalar> terms;
  terms.l2 = l2_loss(pred, truth);
  terms.lap = lap_loss(pred, truth, config);
  terms.edge = edge_loss(pred, truth, config.edge_eps);
  terms.total = ad::add(ad::add(ad::scale(terms.l2, Scalar(config.lambda1)),
                                ad::scale(terms.lap, Scalar(config.lambda2))),
                        ad::scale(terms.edge, Scalar(config.lambda3)));
  return terms;
}

}  // namespace ckm::loss
