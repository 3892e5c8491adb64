#include "ckm/gradcheck_suite.hpp"

#include "ckm/ad/gradcheck.hpp"
#include "ckm/error.hpp"
#include "ckm/loss.hpp"
#include "ckm/model.hpp"

#include <chrono>
#include <functional>
#include <map>
#include <random>

namespace ckm {
namespace {

using ad::Tensor;
using T = Tensor<double>;
using Inputs = std::vector<T>;
using Rng = std::mt19937_64;

int pick(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Values bounded away from zero so kinks (abs, relu) are not straddled by the
// finite-difference step.
T away_from_zero(Rng& rng, Shape shape) {
  T t = ad::random_tensor(rng, std::move(shape), 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.mutable_value()) v = sign(rng) ? v : -v;
  return t;
}

// Contracts an op's output with a fixed random weight so every output entry
// contributes a distinct gradient.
ad::GradcheckResult check_projected(Rng& rng, const std::function<T(const Inputs&)>& op, Inputs inputs) {
  T probe;
  {
    ad::NoGradGuard no_grad;
    probe = op(inputs);
  }
  const T weight = ad::random_tensor(rng, probe.shape()).detach();
  return ad::gradcheck([&](const Inputs& in) { return ad::sum(ad::mul(op(in), weight)); },
                       std::move(inputs));
}

using Case = std::function<ad::GradcheckResult(Rng&)>;

Shape random_shape(Rng& rng, int rank) {
  Shape s;
  for (int i = 0; i < rank; ++i) s.push_back(pick(rng, 1, 4));
  return s;
}

ad::GradcheckResult full_model_case(Rng& rng, int transformer_layers) {
  nn::TransUNetConfig config;
  config.in_channels = 2;
  config.out_channels = 2;
  config.image_height = 16;
  config.image_width = 16;
  config.base_width = 4;
  config.num_down_stages = 2;
  config.num_skips = 1;
  config.embed_dim = 8;
  config.num_heads = 2;
  config.mlp_ratio = 2;
  config.num_transformer_layers = transformer_layers;
  nn::TransUNet<double> model(config, rng());
  const T input = ad::random_tensor(rng, {1, 2, 16, 16}, 0.0, 1.0).detach();
  const T target = ad::random_tensor(rng, {1, 2, 16, 16}, 0.0, 1.0).detach();
  Inputs params = model.parameters().tensors();
  return ad::gradcheck(
             [&](const Inputs&) {
               return loss::total_loss(model.forward(input), target).total;
             },
             params)
      ;
}

const std::map<std::string, Case>& cases() {
  static const std::map<std::string, Case> table = {
      {"add",
       [](Rng& r) {
         const Shape s = random_shape(r, pick(r, 1, 4));
         return check_projected(r, [](const Inputs& in) { return ad::add(in[0], in[1]); },
                                {ad::random_tensor(r, s), ad::random_tensor(r, s)});
       }},
      {"sub",
       [](Rng& r) {
         const Shape s = random_shape(r, pick(r, 1, 4));
         return check_projected(r, [](const Inputs& in) { return ad::sub(in[0], in[1]); },
                                {ad::random_tensor(r, s), ad::random_tensor(r, s)});
       }},
      {"mul",
       [](Rng& r) {
         const Shape s = random_shape(r, pick(r, 1, 4));
         return check_projected(r, [](const Inputs& in) { return ad::mul(in[0], in[1]); },
                                {ad::random_tensor(r, s), ad::random_tensor(r, s)});
       }},
      {"scale",
       [](Rng& r) {
         const double f = std::uniform_real_distribution<double>(-2, 2)(r);
         return check_projected(r, [f](const Inputs& in) { return ad::scale(in[0], f); },
                                {ad::random_tensor(r, random_shape(r, 3))});
       }},
      {"add_scalar",
       [](Rng& r) {
         const double c = std::uniform_real_distribution<double>(-2, 2)(r);
         return check_projected(r, [c](const Inputs& in) { return ad::add_scalar(in[0], c); },
                                {ad::random_tensor(r, random_shape(r, 3))});
       }},
      {"square",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::square(in[0]); },
                                {ad::random_tensor(r, random_shape(r, 3))});
       }},
      {"sqrt",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::sqrt(in[0]); },
                                {ad::random_tensor(r, random_shape(r, 3), 0.2, 2.0)});
       }},
      {"abs",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::abs(in[0]); },
                                {away_from_zero(r, random_shape(r, 3))});
       }},
      {"relu",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::relu(in[0]); },
                                {away_from_zero(r, random_shape(r, 3))});
       }},
      {"sigmoid",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::sigmoid(in[0]); },
                                {ad::random_tensor(r, random_shape(r, 3), -4, 4)});
       }},
      {"gelu",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::gelu(in[0]); },
                                {ad::random_tensor(r, random_shape(r, 3), -3, 3)});
       }},
      {"sum",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::sum(in[0]); },
                                {ad::random_tensor(r, random_shape(r, 3))});
       }},
      {"mean",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::mean(in[0]); },
                                {ad::random_tensor(r, random_shape(r, 3))});
       }},
      {"reshape",
       [](Rng& r) {
         const Shape s = random_shape(r, 3);
         return check_projected(
             r, [n = shape_numel(s)](const Inputs& in) { return ad::reshape(in[0], {n}); },
             {ad::random_tensor(r, s)});
       }},
      {"permute",
       [](Rng& r) {
         std::vector<int> axes{0, 1, 2, 3};
         std::shuffle(axes.begin(), axes.end(), r);
         return check_projected(r, [axes](const Inputs& in) { return ad::permute(in[0], axes); },
                                {ad::random_tensor(r, random_shape(r, 4))});
       }},
      {"concat",
       [](Rng& r) {
         const int axis = pick(r, 0, 2);
         Shape a = random_shape(r, 3), b = a;
         b[axis] = pick(r, 1, 3);
         return check_projected(
             r, [axis](const Inputs& in) { return ad::concat(in, axis); },
             {ad::random_tensor(r, a), ad::random_tensor(r, b)});
       }},
      {"to_tokens",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::to_tokens(in[0]); },
                                {ad::random_tensor(r, random_shape(r, 4))});
       }},
      {"from_tokens",
       [](Rng& r) {
         const Index h = pick(r, 1, 3), w = pick(r, 1, 3);
         return check_projected(
             r, [h, w](const Inputs& in) { return ad::from_tokens(in[0], h, w); },
             {ad::random_tensor(r, {pick(r, 1, 2), h * w, pick(r, 1, 4)})});
       }},
      {"pad_replicate",
       [](Rng& r) {
         const Index pad = pick(r, 1, 2);
         return check_projected(
             r, [pad](const Inputs& in) { return ad::pad_replicate(in[0], pad); },
             {ad::random_tensor(r, random_shape(r, 4))});
       }},
      {"matmul",
       [](Rng& r) {
         const Index k = pick(r, 1, 5);
         return check_projected(r, [](const Inputs& in) { return ad::matmul(in[0], in[1]); },
                                {ad::random_tensor(r, {pick(r, 1, 3), pick(r, 1, 4), k}),
                                 ad::random_tensor(r, {k, pick(r, 1, 5)})});
       }},
      {"linear",
       [](Rng& r) {
         const Index k = pick(r, 1, 5), n = pick(r, 1, 5);
         return check_projected(
             r, [](const Inputs& in) { return ad::linear(in[0], in[1], in[2]); },
             {ad::random_tensor(r, {pick(r, 1, 3), pick(r, 1, 4), k}),
              ad::random_tensor(r, {k, n}), ad::random_tensor(r, {n})});
       }},
      {"bmm",
       [](Rng& r) {
         const bool transpose = pick(r, 0, 1) == 1;
         const Index b = pick(r, 1, 3), m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
         return check_projected(
             r, [transpose](const Inputs& in) { return ad::bmm(in[0], in[1], transpose); },
             {ad::random_tensor(r, {b, m, k}),
              ad::random_tensor(r, transpose ? Shape{b, n, k} : Shape{b, k, n})});
       }},
      {"layer_norm",
       [](Rng& r) {
         const Index d = pick(r, 2, 6);
         return check_projected(
             r, [](const Inputs& in) { return ad::layer_norm(in[0], in[1], in[2]); },
             {ad::random_tensor(r, {pick(r, 1, 3), pick(r, 1, 3), d}),
              ad::random_tensor(r, {d}, 0.5, 1.5), ad::random_tensor(r, {d})});
       }},
      {"softmax",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::softmax(in[0]); },
                                {ad::random_tensor(r, random_shape(r, 3), -2, 2)});
       }},
      {"conv2d",
       [](Rng& r) {
         const Index k = pick(r, 1, 3), stride = pick(r, 1, 2), pad = pick(r, 0, 1);
         const Index c = pick(r, 1, 3), o = pick(r, 1, 3);
         // Spatial size chosen so the strided output is exact.
         const Index out = pick(r, 1, 3);
         const Index size = (out - 1) * stride + k - 2 * pad;
         const Index hw = std::max<Index>(size, 1);
         const Index h = (hw + 2 * pad - k) % stride == 0 ? hw : hw + 1;
         return check_projected(
             r,
             [stride, pad](const Inputs& in) {
               return ad::conv2d(in[0], in[1], in[2], stride, pad);
             },
             {ad::random_tensor(r, {pick(r, 1, 2), c, h, h}), ad::random_tensor(r, {o, c, k, k}),
              ad::random_tensor(r, {o})});
       }},
      {"avg_pool2",
       [](Rng& r) {
         return check_projected(
             r, [](const Inputs& in) { return ad::avg_pool2(in[0]); },
             {ad::random_tensor(r, {pick(r, 1, 2), pick(r, 1, 3), 2 * pick(r, 1, 3),
                                    2 * pick(r, 1, 3)})});
       }},
      {"bilinear_upsample2",
       [](Rng& r) {
         return check_projected(r, [](const Inputs& in) { return ad::bilinear_upsample2(in[0]); },
                                {ad::random_tensor(r, random_shape(r, 4))});
       }},
      {"l2_loss",
       [](Rng& r) {
         const Shape s{1, pick(r, 1, 2), 8, 8};
         return ad::gradcheck([](const Inputs& in) { return loss::l2_loss(in[0], in[1]); },
                              {ad::random_tensor(r, s), ad::random_tensor(r, s)})
             ;
       }},
      {"lap_loss",
       [](Rng& r) {
         const Shape s{1, pick(r, 1, 2), 8 * pick(r, 1, 2), 8 * pick(r, 1, 2)};
         // Pairs far apart keep every |residual difference| away from the kink.
         return ad::gradcheck([](const Inputs& in) { return loss::lap_loss(in[0], in[1]); },
                              {ad::random_tensor(r, s, 0, 1), ad::random_tensor(r, s, 0, 1)})
             ;
       }},
      {"edge_loss",
       [](Rng& r) {
         const Shape s{1, pick(r, 1, 2), pick(r, 3, 8), pick(r, 3, 8)};
         return ad::gradcheck([](const Inputs& in) { return loss::edge_loss(in[0], in[1]); },
                              {ad::random_tensor(r, s, 0, 1), ad::random_tensor(r, s, 0, 1)})
             ;
       }},
      {"total_loss",
       [](Rng& r) {
         const Shape s{pick(r, 1, 2), pick(r, 1, 2), 8, 8};
         return ad::gradcheck(
                    [](const Inputs& in) { return loss::total_loss(in[0], in[1]).total; },
                    {ad::random_tensor(r, s, 0, 1), ad::random_tensor(r, s, 0, 1)})
             ;
       }},
      {"transunet", [](Rng& r) { return full_model_case(r, 1); }},
      {"unet", [](Rng& r) { return full_model_case(r, 0); }},
  };
  return table;
}

}  // namespace

bool GradcheckSuiteReport::passed() const {
  if (entries.empty()) return false;
  for (const auto& e : entries) {
    if (!e.passed) return false;
  }
  return true;
}

nlohmann::json GradcheckSuiteReport::to_json() const {
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& e : entries) {
    ops.push_back({{"op", e.op},
                   {"instantiations", e.instantiations},
                   {"max_relative_error", e.max_relative_error},
                   {"entries_checked", e.entries_checked},
                   {"entries_straddled", e.entries_straddled},
                   {"seconds", e.seconds},
                   {"pass", e.passed}});
  }
  return {{"tolerance", tolerance}, {"pass", passed()}, {"ops", ops}};
}

std::vector<std::string> gradcheck_ops() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : cases()) names.push_back(name);
  return names;
}

GradcheckSuiteReport run_gradcheck_suite(const std::string& only, int instantiations,
                                         std::uint64_t seed, double tolerance) {
  if (instantiations < 1) throw InvalidArgument("gradcheck: instantiations must be positive");
  if (!only.empty() && !cases().count(only)) {
    throw InvalidArgument("gradcheck: unknown op '" + only + "'");
  }
  GradcheckSuiteReport report;
  report.tolerance = tolerance;
  for (const auto& [name, fn] : cases()) {
    if (!only.empty() && name != only) continue;
    Rng rng(seed ^ std::hash<std::string>{}(name));
    GradcheckEntry entry;
    entry.op = name;
    const auto start = std::chrono::steady_clock::now();
    entry.passed = true;
    for (int i = 0; i < instantiations; ++i) {
      const ad::GradcheckResult r = fn(rng);
      entry.max_relative_error = std::max(entry.max_relative_error, r.max_relative_error);
      entry.entries_checked += r.entries_checked;
      entry.entries_straddled += r.entries_straddled;
      entry.passed = entry.passed && r.passed(tolerance);
      ++entry.instantiations;
    }
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace ckm
