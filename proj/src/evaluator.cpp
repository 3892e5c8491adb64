#include "ckm/evaluator.hpp"

#include "ckm/error.hpp"
#include "ckm/parallel.hpp"

namespace ckm {

nlohmann::json EvalResult::to_json() const {
  nlohmann::json doc = report.to_json();
  if (!per_sample.empty()) doc["per_sample"] = per_sample;
  return doc;
}

namespace {

NdArrayD building_mask(const LoadedSample& sample, const Shape& target_shape) {
  NdArrayD mask(target_shape, 1.0);
  const Index h = target_shape[1], w = target_shape[2];
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      if (sample.input.at(0, y, x) != 0.0f || sample.input.at(1, y, x) != 0.0f) {
        for (Index c = 0; c < target_shape[0]; ++c) mask.at(c, y, x) = 0.0;
      }
    }
  }
  return mask;
}

}  // namespace

EvalResult evaluate_predictor(const std::vector<LoadedSample>& samples, const Predictor& predict,
                              const EvalOptions& options) {
  if (samples.empty()) throw InvalidArgument("evaluate: split is empty");
  std::vector<NdArrayD> predictions(samples.size());
  parallel_for(samples.size(), options.threads, [&](std::size_t i) {
    NdArrayF pred = predict(samples[i]);
    if (pred.shape != samples[i].target.shape) {
      throw InvalidArgument("evaluate: prediction shape " + shape_to_string(pred.shape) +
                            " does not match target " + shape_to_string(samples[i].target.shape) +
                            " for " + samples[i].id);
    }
    predictions[i] = pred.cast<double>();
  });

  EvalResult result;
  metrics::MetricAccumulator total;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const NdArrayD truth = samples[i].target.cast<double>();
    NdArrayD mask;
    if (options.mask_buildings) mask = building_mask(samples[i], truth.shape);
    total.add(predictions[i], truth, options.mask_buildings ? &mask : nullptr);
    if (options.per_sample) {
      metrics::MetricAccumulator one;
      one.add(predictions[i], truth, options.mask_buildings ? &mask : nullptr);
      nlohmann::json entry = one.report().to_json();
      entry["id"] = samples[i].id;
      result.per_sample.push_back(entry);
    }
  }
  result.report = total.report();
  return result;
}

NdArrayF predict_sample(const nn::TransUNet<float>& model, const NdArrayF& input) {
  ad::NoGradGuard no_grad;
  const Shape shape{1, input.shape[0], input.shape[1], input.shape[2]};
  const auto x = ad::Tensor<float>::from_buffer(shape, input.data);
  NdArrayF out = model.forward(x).to_ndarray();
  out.shape.erase(out.shape.begin());
  return out;
}

EvalResult evaluate_model(const nn::TransUNet<float>& model,
                          const std::vector<LoadedSample>& samples, const EvalOptions& options) {
  return evaluate_predictor(
      samples, [&](const LoadedSample& s) { return predict_sample(model, s.input); }, options);
}

NdArrayF mean_target(const std::vector<LoadedSample>& train_set) {
  if (train_set.empty()) throw InvalidArgument("mean_target: training set is empty");
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(train_set.front().target.numel());
  for (const auto& s : train_set) {
    if (s.target.shape != train_set.front().target.shape) {
      throw InvalidArgument("mean_target: inconsistent target shapes");
    }
    sum += s.target.data.cast<double>();
  }
  NdArrayF out;
  out.shape = train_set.front().target.shape;
  out.data = (sum / static_cast<double>(train_set.size())).cast<float>();
  return out;
}

}  // namespace ckm
