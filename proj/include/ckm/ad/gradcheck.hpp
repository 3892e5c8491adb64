#pragma once

#include "ckm/ad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace ckm::ad {

struct GradcheckResult {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  Index entries_checked = 0;
  /// Entries whose +/- step lands on a different relu/abs branch than the base
  /// point; central differences are meaningless there, so they are excluded.
  Index entries_straddled = 0;
  /// Fails when more than 1% of entries had to be excluded.
  bool passed(double tolerance) const {
    return max_relative_error <= tolerance && entries_checked > 0 &&
           entries_straddled * 100 <= entries_checked + entries_straddled;
  }
};

/// Relative error with a floor on the denominator so that gradients that are
/// zero up to finite-difference noise do not dominate.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences in every entry of every input. `fn` must rebuild its graph from
/// the given leaves on each call.
inline GradcheckResult gradcheck(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double step = 1e-5) {
  for (auto& in : inputs) {
    in.zero_grad();
    in.set_requires_grad(true);
  }
  Tensor<double> out = fn(inputs);
  backward(out);
  std::vector<Buffer<double>> analytic;
  for (const auto& in : inputs) analytic.push_back(in.grad());

  GradcheckResult result;
  NoGradGuard no_grad;
  std::uint64_t branches = 0;
  auto evaluate = [&](std::uint64_t& pattern) {
    pattern = 0;
    detail::branch_hash = &pattern;
    const double v = fn(inputs).item();
    detail::branch_hash = nullptr;
    return v;
  };
  std::uint64_t base_pattern = 0;
  evaluate(base_pattern);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& values = inputs[t].mutable_value();
    for (Index i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double plus = evaluate(branches);
      const bool plus_same = branches == base_pattern;
      values[i] = saved - step;
      const double minus = evaluate(branches);
      const bool minus_same = branches == base_pattern;
      values[i] = saved;
      if (!plus_same || !minus_same) {
        ++result.entries_straddled;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * step);
      result.max_relative_error =
          std::max(result.max_relative_error, relative_error(analytic[t][i], numeric));
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[t][i] - numeric));
      ++result.entries_checked;
    }
  }
  return result;
}

/// Random fp64 leaf with entries uniform in [lo, hi].
inline Tensor<double> random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Buffer<double> data(shape_numel(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = dist(rng);
  return Tensor<double>::from_buffer(std::move(shape), std::move(data), true);
}

}  // namespace ckm::ad
