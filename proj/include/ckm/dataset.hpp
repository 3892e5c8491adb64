#pragma once

#include "ckm/ndarray.hpp"
#include "ckm/scene.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ckm {

struct DatasetConfig {
  SceneConfig scene;
  int codebook_size = 4;
  RenderOptions render;
  /// BS deployments per building layout; sample i uses layout i / bs_per_scene.
  int bs_per_scene = 1;
  double train_ratio = 0.8;
  double val_ratio = 0.1;
  double test_ratio = 0.1;
  int threads = 1;
  /// Re-draws allowed when a deployment renders as a degenerate scene.
  int max_regenerations = 50;

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& doc);
};

struct SampleEntry {
  std::string id;
  std::string input_path;   // relative to the dataset directory
  std::string target_path;
  std::string scene_path;   // JSON sidecar: scene document plus sample metadata
  std::string split;        // train | val | test
  std::uint64_t scene_id = 0;
  std::uint64_t bs_id = 0;
};

struct DatasetManifest {
  int version = 1;
  std::vector<SampleEntry> samples;
  nlohmann::json config;
  std::uint64_t base_seed = 0;

  std::vector<const SampleEntry*> split(const std::string& name) const;
  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& doc);
  static DatasetManifest load(const std::filesystem::path& dataset_dir);
  void save(const std::filesystem::path& dataset_dir) const;
};

/// Splits `count` ids by ranking a seeded hash of each id: the first
/// round(count * train_ratio) go to train, the next round(count * val_ratio)
/// to val, the rest to test.
std::vector<std::string> assign_splits(const std::vector<std::string>& ids, std::uint64_t base_seed,
                                       double train_ratio, double val_ratio);

/// Writes `count` samples plus manifest.json into out_dir. Output is
/// byte-identical for fixed (config, count, base_seed) regardless of threads.
DatasetManifest generate_dataset(const DatasetConfig& config, int count, std::uint64_t base_seed,
                                 const std::filesystem::path& out_dir);

struct LoadedSample {
  std::string id;
  NdArrayF input;
  NdArrayF target;
};

std::vector<LoadedSample> load_split(const DatasetManifest& manifest,
                                     const std::filesystem::path& dataset_dir,
                                     const std::string& split);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& doc);

}  // namespace ckm
