#pragma once

#include "ckm/dataset.hpp"
#include "ckm/loss.hpp"
#include "ckm/model.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace ckm {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 16;
  double lr = 1e-4;
  double lr_decay = 0.2;
  int decay_every_epochs = 20;
  loss::CompositeLossConfig loss;
  std::uint64_t seed = 0;
  /// Workers for validation forward passes; results are reduced in order.
  int threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& doc);
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_total = 0.0;
  double train_l2 = 0.0;
  double train_lap = 0.0;
  double train_edge = 0.0;
  double val_total = 0.0;
  double val_l2 = 0.0;
  double val_lap = 0.0;
  double val_edge = 0.0;
  double val_rmse = 0.0;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
  double best_val_total = 0.0;
  std::unique_ptr<nn::TransUNet<float>> model;  // weights after the final epoch
};

/// Stacks samples into a batch tensor [B, C, H, W].
ad::Tensor<float> stack_batch(const std::vector<const NdArrayF*>& items);

/// Trains from scratch. Writes best.ckpt (lowest validation total loss, ties
/// to the earlier epoch), last.ckpt and train_log.json into out_dir. A
/// non-finite loss writes nan_diagnostic.json and throws NumericalError.
TrainResult train(const DatasetManifest& manifest, const std::filesystem::path& dataset_dir,
                  const TrainConfig& train_config, const nn::TransUNetConfig& model_config,
                  const std::filesystem::path& out_dir);

/// In-memory variant used by train(); validation may be empty, in which case
/// the best epoch is chosen by training loss.
TrainResult train_samples(const std::vector<LoadedSample>& train_set,
                          const std::vector<LoadedSample>& val_set, const TrainConfig& train_config,
                          const nn::TransUNetConfig& model_config,
                          const std::filesystem::path& out_dir);

}  // namespace ckm
