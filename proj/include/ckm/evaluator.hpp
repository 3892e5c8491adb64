#pragma once

#include "ckm/dataset.hpp"
#include "ckm/metrics.hpp"
#include "ckm/model.hpp"

#include <functional>
#include <vector>

namespace ckm {

struct EvalOptions {
  int threads = 1;
  /// Exclude building and BS cells (fixed at 1 in targets) from pooled metrics.
  bool mask_buildings = false;
  bool per_sample = false;
};

struct EvalResult {
  metrics::MetricReport report;
  nlohmann::json per_sample = nlohmann::json::array();

  nlohmann::json to_json() const;
};

using Predictor = std::function<NdArrayF(const LoadedSample&)>;

/// Runs `predict` per sample (in parallel when threads > 1) and reduces the
/// metrics in sample order, so the report does not depend on thread count.
EvalResult evaluate_predictor(const std::vector<LoadedSample>& samples, const Predictor& predict,
                              const EvalOptions& options = {});

/// Single-sample forward pass without graph recording; returns N x H x W.
NdArrayF predict_sample(const nn::TransUNet<float>& model, const NdArrayF& input);

EvalResult evaluate_model(const nn::TransUNet<float>& model,
                          const std::vector<LoadedSample>& samples, const EvalOptions& options = {});

/// Per-pixel average of the training targets.
NdArrayF mean_target(const std::vector<LoadedSample>& train_set);

}  // namespace ckm
