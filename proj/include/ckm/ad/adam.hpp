#pragma once

#include "ckm/ad/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ckm::ad {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Buffer<Scalar>> first_moment;
  std::vector<Buffer<Scalar>> second_moment;
};

/// One bias-corrected Adam update of `params` in place using `grads`.
/// `names` (optional) is only used for diagnostics. A non-finite gradient
/// throws NumericalError before any parameter is modified.
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>> params, std::span<const Buffer<Scalar>> grads,
               AdamState<Scalar>& state, std::span<const std::string> names = {}) {
  if (params.size() != grads.size()) {
    throw InvalidArgument("adam_step: parameter and gradient counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel()) {
      throw InvalidArgument("adam_step: gradient shape mismatch for parameter " + std::to_string(i));
    }
    if (!grads[i].allFinite()) {
      const std::string name = i < names.size() ? names[i] : "#" + std::to_string(i);
      throw NumericalError("adam_step: non-finite gradient in parameter " + name + " at step " +
                           std::to_string(state.step + 1));
    }
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.push_back(Buffer<Scalar>::Zero(p.numel()));
      state.second_moment.push_back(Buffer<Scalar>::Zero(p.numel()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw InvalidArgument("adam_step: optimizer state does not match parameter list");
  }
  ++state.step;
  const AdamConfig& c = state.config;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const Scalar b1 = Scalar(c.beta1), b2 = Scalar(c.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = b1 * m + (Scalar(1) - b1) * grads[i];
    v = b2 * v + (Scalar(1) - b2) * grads[i].square();
    const Buffer<Scalar> m_hat = m / Scalar(correction1);
    const Buffer<Scalar> v_hat = v / Scalar(correction2);
    params[i].mutable_value() -= Scalar(c.lr) * m_hat / (v_hat.sqrt() + Scalar(c.eps));
  }
}

/// Convenience overload using each parameter's accumulated gradient.
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>> params, AdamState<Scalar>& state,
               std::span<const std::string> names = {}) {
  std::vector<Buffer<Scalar>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  adam_step<Scalar>(params, grads, state, names);
}

/// Step decay: base_lr * factor^floor(epoch / every), epoch counted from 0.
inline double step_decay_lr(double base_lr, double factor, int every_epochs, int epoch) {
  if (every_epochs <= 0) throw InvalidArgument("step_decay_lr: decay period must be positive");
  return base_lr * std::pow(factor, epoch / every_epochs);
}

}  // namespace ckm::ad
