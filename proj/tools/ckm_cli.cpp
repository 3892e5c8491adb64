// Command-line front end: gen, train, eval, render, gradcheck, oracle.
#include "ckm/checkpoint.hpp"
#include "ckm/dataset.hpp"
#include "ckm/error.hpp"
#include "ckm/evaluator.hpp"
#include "ckm/gradcheck_suite.hpp"
#include "ckm/png.hpp"
#include "ckm/ray_march_oracle.hpp"
#include "ckm/trainer.hpp"

#include "CLI11.hpp"

#include <cstdint>
#include <iostream>
#include <string>

namespace {

namespace fs = std::filesystem;

void print(const nlohmann::json& doc) { std::cout << doc.dump(2) << '\n'; }

int fail(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Beam-indexed channel knowledge map toolkit"};
  app.require_subcommand(1);

  std::string config_path, out, data_dir, model_path, train_path, ckpt_path, split = "test";
  std::string input_path, compare_path, scene_path, op;
  int count = 0, beam = 0, antennas = 4, threads = 1, instantiations = 5;
  std::uint64_t seed = 0;
  bool per_sample = false, mask_buildings = false;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic CKM dataset");
  gen->add_option("--config", config_path, "Dataset config JSON")->check(CLI::ExistingFile);
  gen->add_option("--count", count, "Number of samples")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Base seed")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--threads", threads, "Worker threads");

  auto* train = app.add_subcommand("train", "Train a TransUNet on a dataset");
  train->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--model", model_path, "Model config JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--train", train_path, "Training config JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  eval->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--ckpt", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split, "train | val | test");
  eval->add_option("--out", out, "Metric report JSON")->required();
  eval->add_option("--threads", threads, "Worker threads");
  eval->add_flag("--per-sample", per_sample, "Include per-sample metrics");
  eval->add_flag("--mask-buildings", mask_buildings, "Exclude building and BS cells");

  auto* render = app.add_subcommand("render", "Render one beam of a map tensor to PNG");
  render->add_option("--input", input_path, "C x H x W tensor file")->required()->check(CLI::ExistingFile);
  render->add_option("--beam", beam, "Beam index")->required();
  render->add_option("--out", out, "PNG path")->required();
  render->add_option("--compare", compare_path, "Second tensor shown side by side")
      ->check(CLI::ExistingFile);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--op", op, "Restrict to one op");
  gradcheck->add_option("--instantiations", instantiations, "Random cases per op");
  gradcheck->add_option("--seed", seed, "Seed");

  auto* oracle = app.add_subcommand("oracle", "Compare the tracer with the ray-marching oracle");
  oracle->add_option("--scene", scene_path, "Scene JSON")->required()->check(CLI::ExistingFile);
  oracle->add_option("--antennas", antennas, "Array size")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what());
  }

  try {
    if (*gen) {
      ckm::DatasetConfig config;
      if (!config_path.empty()) config = ckm::DatasetConfig::from_json(ckm::read_json_file(config_path));
      if (gen->count("--threads")) config.threads = threads;
      const auto manifest = ckm::generate_dataset(config, count, seed, out);
      print({{"samples", manifest.samples.size()},
             {"train", manifest.split("train").size()},
             {"val", manifest.split("val").size()},
             {"test", manifest.split("test").size()},
             {"out", out}});
    } else if (*train) {
      const auto manifest = ckm::DatasetManifest::load(data_dir);
      const auto model_config = ckm::nn::TransUNetConfig::from_json(ckm::read_json_file(model_path));
      const auto train_config = ckm::TrainConfig::from_json(ckm::read_json_file(train_path));
      const auto result = ckm::train(manifest, data_dir, train_config, model_config, out);
      const auto& last = result.epochs.back();
      print({{"epochs", result.epochs.size()},
             {"best_epoch", result.best_epoch},
             {"best_val_total", result.best_val_total},
             {"final", last.to_json()},
             {"out", out}});
    } else if (*eval) {
      const auto manifest = ckm::DatasetManifest::load(data_dir);
      const auto ckpt = ckm::load_checkpoint(ckpt_path);
      const auto samples = ckm::load_split(manifest, data_dir, split);
      ckm::EvalOptions options;
      options.threads = threads;
      options.per_sample = per_sample;
      options.mask_buildings = mask_buildings;
      const auto model_result = ckm::evaluate_model(*ckpt.model, samples, options);
      nlohmann::json doc = {{"split", split},
                            {"checkpoint", ckpt_path},
                            {"model", model_result.to_json()}};
      const auto train_set = ckm::load_split(manifest, data_dir, "train");
      if (!train_set.empty()) {
        const ckm::NdArrayF baseline = ckm::mean_target(train_set);
        ckm::EvalOptions plain = options;
        plain.per_sample = false;
        doc["mean_predictor"] =
            ckm::evaluate_predictor(
                samples, [&](const ckm::LoadedSample&) { return baseline; }, plain)
                .to_json();
      }
      ckm::write_json_file(out, doc);
      print(doc);
    } else if (*render) {
      const ckm::NdArrayF map = ckm::load_tensor(input_path);
      ckm::NdArrayF compare;
      if (!compare_path.empty()) compare = ckm::load_tensor(compare_path);
      ckm::render_png(map, beam, out, compare_path.empty() ? nullptr : &compare);
      print({{"out", out}, {"beam", beam}});
    } else if (*gradcheck) {
      const auto report = ckm::run_gradcheck_suite(op, instantiations, gradcheck->count("--seed") ? seed : 2024);
      print(report.to_json());
      return report.passed() ? 0 : 2;
    } else if (*oracle) {
      const ckm::Scene scene = ckm::scene_from_json(ckm::read_json_file(scene_path));
      const auto report = ckm::oracle_check(scene, antennas);
      print(report.to_json());
      return report.pass ? 0 : 2;
    }
  } catch (const ckm::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
