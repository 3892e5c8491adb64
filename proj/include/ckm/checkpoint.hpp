#pragma once

#include "ckm/model.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>

namespace ckm {

struct Checkpoint {
  std::unique_ptr<nn::TransUNet<float>> model;
  std::int64_t optimizer_step = 0;
  int epoch = -1;
};

/// Layout: one JSON header line (model config, optimizer step, epoch, parameter
/// names and shapes) terminated by '\n', then one CKM1 record per parameter in
/// declaration order.
void save_checkpoint(const std::filesystem::path& path, const nn::TransUNet<float>& model,
                     std::int64_t optimizer_step, int epoch = -1);

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ckm
