#include "ckm/dataset.hpp"

#include "ckm/error.hpp"
#include "ckm/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace ckm {
namespace fs = std::filesystem;

namespace {

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string sample_id(int index) {
  std::ostringstream os;
  os << "sample_" << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

}  // namespace

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& doc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

void DatasetConfig::validate() const {
  if (codebook_size < 1) throw InvalidArgument("dataset: codebook_size must be positive");
  if (bs_per_scene < 1) throw InvalidArgument("dataset: bs_per_scene must be positive");
  if (train_ratio < 0 || val_ratio < 0 || test_ratio < 0 ||
      std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
    throw InvalidArgument("dataset: split ratios must be non-negative and sum to 1");
  }
  if (max_regenerations < 0) throw InvalidArgument("dataset: max_regenerations must be >= 0");
}

nlohmann::json DatasetConfig::to_json() const {
  return {{"scene", scene_config_to_json(scene)},
          {"codebook_size", codebook_size},
          {"dynamic_range_db", render.dynamic_range_db},
          {"supersample", render.supersample},
          {"bs_per_scene", bs_per_scene},
          {"split", {train_ratio, val_ratio, test_ratio}},
          {"max_regenerations", max_regenerations}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& doc) {
  DatasetConfig c;
  if (doc.contains("scene")) c.scene = scene_config_from_json(doc.at("scene"));
  c.codebook_size = doc.value("codebook_size", c.codebook_size);
  c.render.dynamic_range_db = doc.value("dynamic_range_db", c.render.dynamic_range_db);
  c.render.supersample = doc.value("supersample", c.render.supersample);
  c.bs_per_scene = doc.value("bs_per_scene", c.bs_per_scene);
  if (doc.contains("split")) {
    const auto ratios = doc.at("split").get<std::vector<double>>();
    if (ratios.size() != 3) throw InvalidArgument("dataset: split must have three ratios");
    c.train_ratio = ratios[0];
    c.val_ratio = ratios[1];
    c.test_ratio = ratios[2];
  }
  c.threads = doc.value("threads", c.threads);
  c.max_regenerations = doc.value("max_regenerations", c.max_regenerations);
  c.validate();
  return c;
}

std::vector<const SampleEntry*> DatasetManifest::split(const std::string& name) const {
  std::vector<const SampleEntry*> out;
  for (const auto& s : samples) {
    if (s.split == name) out.push_back(&s);
  }
  return out;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& s : samples) {
    entries.push_back({{"id", s.id},
                       {"input_path", s.input_path},
                       {"target_path", s.target_path},
                       {"scene_path", s.scene_path},
                       {"split", s.split},
                       {"scene_id", s.scene_id},
                       {"bs_id", s.bs_id}});
  }
  return {{"version", version}, {"base_seed", base_seed}, {"config", config}, {"samples", entries}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& doc) {
  DatasetManifest m;
  try {
    m.version = doc.at("version").get<int>();
    m.base_seed = doc.at("base_seed").get<std::uint64_t>();
    m.config = doc.value("config", nlohmann::json::object());
    for (const auto& e : doc.at("samples")) {
      SampleEntry s;
      s.id = e.at("id").get<std::string>();
      s.input_path = e.at("input_path").get<std::string>();
      s.target_path = e.at("target_path").get<std::string>();
      s.scene_path = e.at("scene_path").get<std::string>();
      s.split = e.at("split").get<std::string>();
      s.scene_id = e.value("scene_id", std::uint64_t{0});
      s.bs_id = e.value("bs_id", std::uint64_t{0});
      m.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("manifest: ") + e.what());
  }
  std::vector<std::string> ids;
  for (const auto& s : m.samples) ids.push_back(s.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw InvalidArgument("manifest: duplicate sample ids");
  }
  return m;
}

DatasetManifest DatasetManifest::load(const fs::path& dataset_dir) {
  return from_json(read_json_file(dataset_dir / "manifest.json"));
}

void DatasetManifest::save(const fs::path& dataset_dir) const {
  write_json_file(dataset_dir / "manifest.json", to_json());
}

std::vector<std::string> assign_splits(const std::vector<std::string>& ids, std::uint64_t base_seed,
                                       double train_ratio, double val_ratio) {
  const std::size_t n = ids.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> keys(n);
  for (std::size_t i = 0; i < n; ++i) keys[i] = derive_seed(base_seed, fnv1a(ids[i]));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return keys[a] != keys[b] ? keys[a] < keys[b] : ids[a] < ids[b];
  });
  const auto n_train = static_cast<std::size_t>(std::llround(n * train_ratio));
  const auto n_val = std::min(n - std::min(n, n_train),
                              static_cast<std::size_t>(std::llround(n * val_ratio)));
  std::vector<std::string> splits(n);
  for (std::size_t rank = 0; rank < n; ++rank) {
    splits[order[rank]] = rank < n_train ? "train" : rank < n_train + n_val ? "val" : "test";
  }
  return splits;
}

DatasetManifest generate_dataset(const DatasetConfig& config, int count, std::uint64_t base_seed,
                                 const fs::path& out_dir) {
  config.validate();
  if (count < 1) throw InvalidArgument("generate_dataset: count must be positive");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  const DftCodebook codebook = build_dft_codebook(config.codebook_size);
  DatasetManifest manifest;
  manifest.base_seed = base_seed;
  manifest.config = config.to_json();
  manifest.samples.resize(count);

  RenderOptions render = config.render;
  render.threads = 1;
  parallel_for(static_cast<std::size_t>(count), config.threads, [&](std::size_t i) {
    SampleEntry& entry = manifest.samples[i];
    entry.id = sample_id(static_cast<int>(i));
    entry.scene_id = i / config.bs_per_scene;
    entry.bs_id = i % config.bs_per_scene;
    const std::uint64_t layout_seed = derive_seed(base_seed, entry.scene_id);
    std::uint64_t seed = derive_seed(layout_seed, entry.bs_id);

    Scene scene;
    CkmSample sample;
    for (int attempt = 0;; ++attempt) {
      try {
        if (config.bs_per_scene == 1) {
          scene = generate_scene(config.scene, seed);
        } else {
          scene = generate_scene(config.scene, layout_seed);
          place_base_station(scene, config.scene, seed);
        }
        sample = render_ckm(scene, codebook, render);
        break;
      } catch (const DegenerateScene&) {
        if (attempt >= config.max_regenerations) {
          throw GenerationFailure("generate_dataset: " + entry.id +
                                  " stayed degenerate after regeneration");
        }
        seed = derive_seed(seed, attempt + 1);
      }
    }

    entry.input_path = entry.id + ".input.ckm";
    entry.target_path = entry.id + ".target.ckm";
    entry.scene_path = entry.id + ".json";
    save_tensor(out_dir / entry.input_path, sample.input.cast<float>());
    save_tensor(out_dir / entry.target_path, sample.target.cast<float>());
    nlohmann::json sidecar = scene_to_json(scene);
    sidecar["sample"] = {{"id", entry.id},
                         {"scene_id", entry.scene_id},
                         {"bs_id", entry.bs_id},
                         {"codebook_size", sample.codebook_size},
                         {"p_max_db", sample.p_max_db},
                         {"p_thre_db", sample.p_thre_db},
                         {"dynamic_range_db", config.render.dynamic_range_db}};
    write_json_file(out_dir / entry.scene_path, sidecar);
  });

  std::vector<std::string> ids;
  for (const auto& s : manifest.samples) ids.push_back(s.id);
  const auto splits = assign_splits(ids, base_seed, config.train_ratio, config.val_ratio);
  for (std::size_t i = 0; i < splits.size(); ++i) manifest.samples[i].split = splits[i];
  manifest.save(out_dir);
  return manifest;
}

std::vector<LoadedSample> load_split(const DatasetManifest& manifest, const fs::path& dataset_dir,
                                     const std::string& split) {
  std::vector<LoadedSample> out;
  for (const SampleEntry* entry : manifest.split(split)) {
    LoadedSample s;
    s.id = entry->id;
    s.input = load_tensor(dataset_dir / entry->input_path);
    s.target = load_tensor(dataset_dir / entry->target_path);
    if (s.input.rank() != 3 || s.target.rank() != 3 || s.input.shape[1] != s.target.shape[1] ||
        s.input.shape[2] != s.target.shape[2]) {
      throw InvalidArgument("dataset: sample " + s.id + " has inconsistent tensor shapes");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ckm
