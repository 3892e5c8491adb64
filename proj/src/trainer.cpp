#include "ckm/trainer.hpp"

#include "ckm/ad/adam.hpp"
#include "ckm/checkpoint.hpp"
#include "ckm/error.hpp"
#include "ckm/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace ckm {

void TrainConfig::validate() const {
  if (epochs < 1) throw InvalidArgument("train: epochs must be positive");
  if (batch_size < 1) throw InvalidArgument("train: batch_size must be positive");
  if (!(lr > 0)) throw InvalidArgument("train: lr must be positive");
  if (!(lr_decay > 0)) throw InvalidArgument("train: lr_decay must be positive");
  if (decay_every_epochs < 1) throw InvalidArgument("train: decay_every_epochs must be positive");
  loss.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"lr_decay", lr_decay},
          {"decay_every_epochs", decay_every_epochs},
          {"loss", loss.to_json()},
          {"seed", seed},
          {"threads", threads}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc) {
  TrainConfig c;
  c.epochs = doc.value("epochs", c.epochs);
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.lr = doc.value("lr", c.lr);
  c.lr_decay = doc.value("lr_decay", c.lr_decay);
  c.decay_every_epochs = doc.value("decay_every_epochs", c.decay_every_epochs);
  if (doc.contains("loss")) c.loss = loss::CompositeLossConfig::from_json(doc.at("loss"));
  c.seed = doc.value("seed", c.seed);
  c.threads = doc.value("threads", c.threads);
  c.validate();
  return c;
}

nlohmann::json EpochLog::to_json() const {
  return {{"epoch", epoch},
          {"lr", lr},
          {"train", {{"total", train_total}, {"l2", train_l2}, {"lap", train_lap}, {"edge", train_edge}}},
          {"val",
           {{"total", val_total},
            {"l2", val_l2},
            {"lap", val_lap},
            {"edge", val_edge},
            {"rmse", val_rmse}}},
          {"seconds", seconds}};
}

ad::Tensor<float> stack_batch(const std::vector<const NdArrayF*>& items) {
  if (items.empty()) throw InvalidArgument("stack_batch: empty batch");
  const Shape& first = items.front()->shape;
  const Index per = items.front()->numel();
  ad::Buffer<float> data(per * static_cast<Index>(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape != first) throw InvalidArgument("stack_batch: inconsistent sample shapes");
    data.segment(static_cast<Index>(i) * per, per) = items[i]->data;
  }
  Shape shape{static_cast<Index>(items.size())};
  shape.insert(shape.end(), first.begin(), first.end());
  return ad::Tensor<float>::from_buffer(std::move(shape), std::move(data));
}

namespace {

struct LossSums {
  double total = 0, l2 = 0, lap = 0, edge = 0, sq_err = 0;
  Index pixels = 0;
};

// Per-sample evaluation of the loss terms; sums are formed in sample order.
LossSums validation_pass(const nn::TransUNet<float>& model, const std::vector<LoadedSample>& set,
                         const loss::CompositeLossConfig& loss_config, int threads) {
  struct Item {
    double total, l2, lap, edge, sq_err;
    Index pixels;
  };
  std::vector<Item> items(set.size());
  parallel_for(set.size(), threads, [&](std::size_t i) {
    ad::NoGradGuard no_grad;
    const auto x = stack_batch({&set[i].input});
    const auto y = stack_batch({&set[i].target});
    const auto pred = model.forward(x);
    const auto terms = loss::total_loss(pred, y, loss_config);
    const auto diff = (pred.value() - y.value()).cast<double>();
    items[i] = {terms.total.item(), terms.l2.item(),         terms.lap.item(),
                terms.edge.item(),  diff.square().sum(), y.numel()};
  });
  LossSums sums;
  for (const auto& it : items) {
    sums.total += it.total;
    sums.l2 += it.l2;
    sums.lap += it.lap;
    sums.edge += it.edge;
    sums.sq_err += it.sq_err;
    sums.pixels += it.pixels;
  }
  return sums;
}

}  // namespace

TrainResult train_samples(const std::vector<LoadedSample>& train_set,
                          const std::vector<LoadedSample>& val_set, const TrainConfig& config,
                          const nn::TransUNetConfig& model_config,
                          const std::filesystem::path& out_dir) {
  config.validate();
  model_config.validate();
  if (train_set.empty()) throw InvalidArgument("train: training split is empty");
  for (const auto* set : {&train_set, &val_set}) {
    for (const auto& s : *set) {
      if (s.input.shape != Shape{model_config.in_channels, model_config.image_height,
                                 model_config.image_width} ||
          s.target.shape != Shape{model_config.out_channels, model_config.image_height,
                                  model_config.image_width}) {
        throw InvalidArgument("train: sample " + s.id + " shape " + shape_to_string(s.input.shape) +
                              " -> " + shape_to_string(s.target.shape) +
                              " is inconsistent with the model config");
      }
    }
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  TrainResult result;
  result.model = std::make_unique<nn::TransUNet<float>>(model_config, derive_seed(config.seed, 1));
  auto& model = *result.model;
  auto& params = model.parameters();
  ad::AdamState<float> optimizer;
  optimizer.config.lr = config.lr;

  std::mt19937_64 shuffle_rng(derive_seed(config.seed, 2));
  std::vector<std::size_t> order(train_set.size());
  double best = std::numeric_limits<double>::infinity();
  nlohmann::json log = nlohmann::json::array();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochLog entry;
    entry.epoch = epoch + 1;
    entry.lr = ad::step_decay_lr(config.lr, config.lr_decay, config.decay_every_epochs, epoch);
    optimizer.config.lr = entry.lr;

    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossSums sums;
    int batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<const NdArrayF*> inputs, targets;
      std::vector<std::string> ids;
      for (std::size_t k = begin; k < end; ++k) {
        inputs.push_back(&train_set[order[k]].input);
        targets.push_back(&train_set[order[k]].target);
        ids.push_back(train_set[order[k]].id);
      }
      const auto pred = model.forward(stack_batch(inputs));
      const auto terms = loss::total_loss(pred, stack_batch(targets), config.loss);
      const double total = terms.total.item();
      if (!std::isfinite(total)) {
        write_json_file(out_dir / "nan_diagnostic.json",
                        {{"epoch", entry.epoch},
                         {"batch", batches},
                         {"sample_ids", ids},
                         {"optimizer_step", optimizer.step},
                         {"loss",
                          {{"total", total},
                           {"l2", terms.l2.item()},
                           {"lap", terms.lap.item()},
                           {"edge", terms.edge.item()}}}});
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(entry.epoch) +
                             ", batch " + std::to_string(batches));
      }
      params.zero_grad();
      ad::backward(terms.total);
      ad::adam_step<float>(params.tensors(), optimizer, params.names());
      sums.total += total;
      sums.l2 += terms.l2.item();
      sums.lap += terms.lap.item();
      sums.edge += terms.edge.item();
      ++batches;
    }
    entry.train_total = sums.total / batches;
    entry.train_l2 = sums.l2 / batches;
    entry.train_lap = sums.lap / batches;
    entry.train_edge = sums.edge / batches;

    double selection = entry.train_total;
    if (!val_set.empty()) {
      const LossSums v = validation_pass(model, val_set, config.loss, config.threads);
      const double n = static_cast<double>(val_set.size());
      entry.val_total = v.total / n;
      entry.val_l2 = v.l2 / n;
      entry.val_lap = v.lap / n;
      entry.val_edge = v.edge / n;
      entry.val_rmse = std::sqrt(v.sq_err / static_cast<double>(v.pixels));
      selection = entry.val_total;
    }
    if (selection < best) {
      best = selection;
      result.best_epoch = entry.epoch;
      result.best_val_total = selection;
      save_checkpoint(out_dir / "best.ckpt", model, optimizer.step, entry.epoch);
    }
    entry.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.epochs.push_back(entry);
    log.push_back(entry.to_json());
  }
  save_checkpoint(out_dir / "last.ckpt", model, optimizer.step, config.epochs);
  write_json_file(out_dir / "train_log.json", {{"train_config", config.to_json()},
                                               {"model_config", model_config.to_json()},
                                               {"best_epoch", result.best_epoch},
                                               {"epochs", log}});
  return result;
}

TrainResult train(const DatasetManifest& manifest, const std::filesystem::path& dataset_dir,
                  const TrainConfig& train_config, const nn::TransUNetConfig& model_config,
                  const std::filesystem::path& out_dir) {
  const auto train_set = load_split(manifest, dataset_dir, "train");
  const auto val_set = load_split(manifest, dataset_dir, "val");
  return train_samples(train_set, val_set, train_config, model_config, out_dir);
}

}  // namespace ckm
