#include "ckm/checkpoint.hpp"

#include "ckm/error.hpp"

#include <fstream>
#include <string>

namespace ckm {

void save_checkpoint(const std::filesystem::path& path, const nn::TransUNet<float>& model,
                     std::int64_t optimizer_step, int epoch) {
  const auto& params = model.parameters();
  nlohmann::json names = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    names.push_back({{"name", params.names()[i]}, {"shape", params.tensors()[i].shape()}});
  }
  const nlohmann::json header = {{"format", "ckm-checkpoint"},
                                 {"version", 1},
                                 {"model_config", model.config().to_json()},
                                 {"optimizer_step", optimizer_step},
                                 {"epoch", epoch},
                                 {"parameters", names}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << header.dump() << '\n';
  for (const auto& t : params.tensors()) write_tensor_record(out, t.to_ndarray());
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": missing checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(path.string() + ": bad checkpoint header: " + e.what());
  }
  if (header.value("format", "") != "ckm-checkpoint") {
    throw InvalidArgument(path.string() + ": not a checkpoint file");
  }
  Checkpoint ckpt;
  ckpt.model = std::make_unique<nn::TransUNet<float>>(
      nn::TransUNetConfig::from_json(header.at("model_config")), 0);
  ckpt.optimizer_step = header.value("optimizer_step", std::int64_t{0});
  ckpt.epoch = header.value("epoch", -1);

  auto& params = ckpt.model->parameters();
  const auto& listed = header.at("parameters");
  if (listed.size() != params.size()) {
    throw InvalidArgument(path.string() + ": checkpoint has " + std::to_string(listed.size()) +
                          " parameters, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = listed[i].at("name").get<std::string>();
    if (name != params.names()[i]) {
      throw InvalidArgument(path.string() + ": parameter " + std::to_string(i) + " is " + name +
                            ", expected " + params.names()[i]);
    }
    NdArrayF record = read_tensor_record(in);
    auto& tensor = params.tensors()[i];
    if (record.shape != tensor.shape()) {
      throw InvalidArgument(path.string() + ": shape mismatch for " + name + ": " +
                            shape_to_string(record.shape) + " vs " +
                            shape_to_string(tensor.shape()));
    }
    tensor.mutable_value() = record.data;
  }
  return ckpt;
}

}  // namespace ckm
