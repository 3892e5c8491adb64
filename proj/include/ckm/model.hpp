#pragma once

#include "ckm/ad/ops.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ckm::nn {

using ad::Tensor;

struct TransUNetConfig {
  int in_channels = 2;
  int out_channels = 4;  // one output map per codeword
  int image_height = 64;
  int image_width = 64;
  int base_width = 32;
  int num_down_stages = 3;
  int num_skips = 2;
  int embed_dim = 64;
  int num_transformer_layers = 2;
  int num_heads = 4;
  int mlp_ratio = 4;

  /// Throws InvalidArgument on inconsistent settings.
  void validate() const;
  int stage_channels(int stage) const { return base_width << stage; }
  int decoder_channels(int stage) const;
  int grid_height() const { return image_height >> num_down_stages; }
  int grid_width() const { return image_width >> num_down_stages; }

  nlohmann::json to_json() const;
  static TransUNetConfig from_json(const nlohmann::json& doc);
  /// 256 x 256 inputs, 8 beams, 12 transformer layers.
  static TransUNetConfig full_scale();
};

inline void TransUNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidArgument("TransUNetConfig: " + m); };
  if (in_channels < 1 || out_channels < 1) fail("channel counts must be positive");
  if (base_width < 1 || embed_dim < 1 || num_heads < 1 || mlp_ratio < 1) {
    fail("widths must be positive");
  }
  if (num_down_stages < 1) fail("need at least one downsampling stage");
  if (num_skips < 0 || num_skips > num_down_stages - 1) {
    fail("num_skips must be in [0, num_down_stages - 1]");
  }
  if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (num_transformer_layers < 0) fail("num_transformer_layers must be >= 0");
  const int factor = 1 << num_down_stages;
  if (image_height < factor || image_width < factor || image_height % factor != 0 ||
      image_width % factor != 0) {
    fail("image size " + std::to_string(image_height) + "x" + std::to_string(image_width) +
         " not divisible by 2^" + std::to_string(num_down_stages));
  }
}

// Decoder stage k restores resolution H / 2^(S-1-k). It matches the width of
// the encoder stage at that resolution; the final full-resolution stage uses
// half the base width.
inline int TransUNetConfig::decoder_channels(int stage) const {
  const int encoder_stage = num_down_stages - 2 - stage;
  return encoder_stage >= 0 ? stage_channels(encoder_stage) : std::max(base_width / 2, 1);
}

inline nlohmann::json TransUNetConfig::to_json() const {
  return {{"in_channels", in_channels},
          {"out_channels", out_channels},
          {"image_height", image_height},
          {"image_width", image_width},
          {"base_width", base_width},
          {"num_down_stages", num_down_stages},
          {"num_skips", num_skips},
          {"embed_dim", embed_dim},
          {"num_transformer_layers", num_transformer_layers},
          {"num_heads", num_heads},
          {"mlp_ratio", mlp_ratio}};
}

inline TransUNetConfig TransUNetConfig::from_json(const nlohmann::json& doc) {
  TransUNetConfig c;
  c.in_channels = doc.value("in_channels", c.in_channels);
  c.out_channels = doc.value("out_channels", c.out_channels);
  c.image_height = doc.value("image_height", c.image_height);
  c.image_width = doc.value("image_width", c.image_width);
  c.base_width = doc.value("base_width", c.base_width);
  c.num_down_stages = doc.value("num_down_stages", c.num_down_stages);
  c.num_skips = doc.value("num_skips", c.num_skips);
  c.embed_dim = doc.value("embed_dim", c.embed_dim);
  c.num_transformer_layers = doc.value("num_transformer_layers", c.num_transformer_layers);
  c.num_heads = doc.value("num_heads", c.num_heads);
  c.mlp_ratio = doc.value("mlp_ratio", c.mlp_ratio);
  c.validate();
  return c;
}

inline TransUNetConfig TransUNetConfig::full_scale() {
  TransUNetConfig c;
  c.out_channels = 8;
  c.image_height = 256;
  c.image_width = 256;
  c.base_width = 64;
  c.embed_dim = 768;
  c.num_heads = 12;
  c.num_transformer_layers = 12;
  return c;
}

/// Named parameters in declaration order; checkpoints follow this order.
template <typename Scalar>
class ParameterList {
 public:
  Tensor<Scalar> add(std::string name, Shape shape, ad::Buffer<Scalar> values) {
    auto t = Tensor<Scalar>::from_buffer(std::move(shape), std::move(values), true);
    names_.push_back(std::move(name));
    tensors_.push_back(t);
    return t;
  }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<Scalar>>& tensors() { return tensors_; }
  const std::vector<Tensor<Scalar>>& tensors() const { return tensors_; }
  Index count() const {
    Index n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<Scalar>> tensors_;
};

namespace detail {

// Kaiming-uniform: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
template <typename Scalar>
ad::Buffer<Scalar> kaiming_uniform(std::mt19937_64& rng, Index count, Index fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  ad::Buffer<Scalar> v(count);
  for (Index i = 0; i < count; ++i) v[i] = Scalar(dist(rng));
  return v;
}

template <typename Scalar>
ad::Buffer<Scalar> normal(std::mt19937_64& rng, Index count, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  ad::Buffer<Scalar> v(count);
  for (Index i = 0; i < count; ++i) v[i] = Scalar(dist(rng));
  return v;
}

}  // namespace detail

template <typename Scalar>
struct Conv2d {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
  Index stride = 1;
  Index padding = 0;

  Conv2d() = default;
  Conv2d(ParameterList<Scalar>& params, std::mt19937_64& rng, const std::string& name, int in,
         int out, int kernel, Index stride_ = 1, Index padding_ = 0)
      : stride(stride_), padding(padding_) {
    const Index fan_in = Index(in) * kernel * kernel;
    weight = params.add(name + ".weight", {out, in, kernel, kernel},
                        detail::kaiming_uniform<Scalar>(rng, out * fan_in, fan_in));
    bias = params.add(name + ".bias", {out}, ad::Buffer<Scalar>::Zero(out));
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    return ad::conv2d(x, weight, bias, stride, padding);
  }
};

template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;  // [in, out]
  Tensor<Scalar> bias;

  Linear() = default;
  Linear(ParameterList<Scalar>& params, std::mt19937_64& rng, const std::string& name, int in,
         int out) {
    weight = params.add(name + ".weight", {in, out},
                        detail::kaiming_uniform<Scalar>(rng, Index(in) * out, in));
    bias = params.add(name + ".bias", {out}, ad::Buffer<Scalar>::Zero(out));
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return ad::linear(x, weight, bias); }
};

template <typename Scalar>
struct LayerNorm {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;

  LayerNorm() = default;
  LayerNorm(ParameterList<Scalar>& params, const std::string& name, int dim) {
    gamma = params.add(name + ".gamma", {dim}, ad::Buffer<Scalar>::Ones(dim));
    beta = params.add(name + ".beta", {dim}, ad::Buffer<Scalar>::Zero(dim));
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    return ad::layer_norm(x, gamma, beta, Scalar(1e-5));
  }
};

/// Stride-2 conv + ReLU, then a two-conv residual block and a final ReLU.
template <typename Scalar>
struct EncoderStage {
  Conv2d<Scalar> down;
  Conv2d<Scalar> conv_a;
  Conv2d<Scalar> conv_b;

  EncoderStage() = default;
  EncoderStage(ParameterList<Scalar>& params, std::mt19937_64& rng, const std::string& name,
               int in, int out)
      : down(params, rng, name + ".down", in, out, 3, 2, 1),
        conv_a(params, rng, name + ".res_a", out, out, 3, 1, 1),
        conv_b(params, rng, name + ".res_b", out, out, 3, 1, 1) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    const Tensor<Scalar> h = ad::relu(down(x));
    return ad::relu(ad::add(h, conv_b(ad::relu(conv_a(h)))));
  }
};

/// 1x1 projection of the CNN feature map to embed_dim plus a learned position table.
template <typename Scalar>
struct PatchEmbedding {
  Conv2d<Scalar> projection;
  Tensor<Scalar> position;  // [num_patches, embed_dim]

  PatchEmbedding() = default;
  PatchEmbedding(ParameterList<Scalar>& params, std::mt19937_64& rng, int in, int embed_dim,
                 Index num_patches)
      : projection(params, rng, "embed.projection", in, embed_dim, 1) {
    position = params.add("embed.position", {num_patches, embed_dim},
                          detail::normal<Scalar>(rng, num_patches * embed_dim, 0.02));
  }

  /// Feature map [B, C, h, w] -> tokens [B, h*w, D] with positions added.
  Tensor<Scalar> operator()(const Tensor<Scalar>& features) const {
    const Tensor<Scalar> tokens = ad::to_tokens(projection(features));
    const Index batch = tokens.dim(0), length = tokens.dim(1), dim = tokens.dim(2);
    ad::detail::require(length == position.dim(0),
                        "patch embedding: sequence length " + std::to_string(length) +
                            " does not match position table of " +
                            std::to_string(position.dim(0)));
    std::vector<Tensor<Scalar>> copies(batch, ad::reshape(position, {1, length, dim}));
    return ad::add(tokens, batch == 1 ? copies.front() : ad::concat(copies, 0));
  }
};

template <typename Scalar>
struct TransformerLayer {
  LayerNorm<Scalar> norm_attn;
  Linear<Scalar> query, key, value, out;
  LayerNorm<Scalar> norm_mlp;
  Linear<Scalar> mlp_in, mlp_out;
  int heads = 1;

  TransformerLayer() = default;
  TransformerLayer(ParameterList<Scalar>& params, std::mt19937_64& rng, const std::string& name,
                   int dim, int heads_, int mlp_ratio)
      : norm_attn(params, name + ".norm_attn", dim),
        query(params, rng, name + ".query", dim, dim),
        key(params, rng, name + ".key", dim, dim),
        value(params, rng, name + ".value", dim, dim),
        out(params, rng, name + ".out", dim, dim),
        norm_mlp(params, name + ".norm_mlp", dim),
        mlp_in(params, rng, name + ".mlp_in", dim, dim * mlp_ratio),
        mlp_out(params, rng, name + ".mlp_out", dim * mlp_ratio, dim),
        heads(heads_) {}

  /// Multi-head scaled dot-product self-attention over x [B, L, D].
  Tensor<Scalar> attention(const Tensor<Scalar>& x) const {
    const Index b = x.dim(0), l = x.dim(1), d = x.dim(2), dh = d / heads;
    auto split = [&](const Tensor<Scalar>& t) {
      return ad::reshape(ad::permute(ad::reshape(t, {b, l, heads, dh}), {0, 2, 1, 3}),
                         {b * heads, l, dh});
    };
    const Tensor<Scalar> q = split(query(x));
    const Tensor<Scalar> k = split(key(x));
    const Tensor<Scalar> v = split(value(x));
    const Scalar inv_scale = Scalar(1) / std::sqrt(Scalar(dh));
    const Tensor<Scalar> weights = ad::softmax(ad::scale(ad::bmm(q, k, true), inv_scale));
    const Tensor<Scalar> context = ad::bmm(weights, v);
    const Tensor<Scalar> merged =
        ad::reshape(ad::permute(ad::reshape(context, {b, heads, l, dh}), {0, 2, 1, 3}), {b, l, d});
    return out(merged);
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& z) const {
    const Tensor<Scalar> attended = ad::add(attention(norm_attn(z)), z);
    return ad::add(mlp_out(ad::gelu(mlp_in(norm_mlp(attended)))), attended);
  }
};

/// Bilinear 2x upsample, optional skip concat, two 3x3 conv + ReLU.
template <typename Scalar>
struct DecoderStage {
  Conv2d<Scalar> conv_a;
  Conv2d<Scalar> conv_b;

  DecoderStage() = default;
  DecoderStage(ParameterList<Scalar>& params, std::mt19937_64& rng, const std::string& name,
               int in, int out)
      : conv_a(params, rng, name + ".conv_a", in, out, 3, 1, 1),
        conv_b(params, rng, name + ".conv_b", out, out, 3, 1, 1) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, const Tensor<Scalar>* skip) const {
    Tensor<Scalar> up = ad::bilinear_upsample2(x);
    if (skip) {
      ad::detail::require(skip->dim(0) == up.dim(0) && skip->dim(2) == up.dim(2) &&
                              skip->dim(3) == up.dim(3),
                          "decoder: skip shape " + shape_to_string(skip->shape()) +
                              " does not match upsampled " + shape_to_string(up.shape()));
      up = ad::concat_channels(up, *skip);
    }
    return ad::relu(conv_b(ad::relu(conv_a(up))));
  }
};

/// Hybrid CNN-Transformer encoder with a cascaded upsampling decoder and a
/// sigmoid head producing one map per codeword. Zero transformer layers gives
/// the plain UNet ablation.
template <typename Scalar>
class TransUNet {
 public:
  struct Encoded {
    Tensor<Scalar> bottleneck;
    std::vector<Tensor<Scalar>> skips;  // fine to coarse
  };

  TransUNet(const TransUNetConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    int in = config_.in_channels;
    for (int s = 0; s < config_.num_down_stages; ++s) {
      encoder_.emplace_back(params_, rng, "encoder." + std::to_string(s), in,
                            config_.stage_channels(s));
      in = config_.stage_channels(s);
    }
    const Index patches = Index(config_.grid_height()) * config_.grid_width();
    embedding_ = PatchEmbedding<Scalar>(params_, rng, in, config_.embed_dim, patches);
    for (int l = 0; l < config_.num_transformer_layers; ++l) {
      layers_.emplace_back(params_, rng, "transformer." + std::to_string(l), config_.embed_dim,
                           config_.num_heads, config_.mlp_ratio);
    }
    in = config_.embed_dim;
    for (int k = 0; k < config_.num_down_stages; ++k) {
      const int skip_channels =
          k < config_.num_skips ? config_.stage_channels(config_.num_down_stages - 2 - k) : 0;
      decoder_.emplace_back(params_, rng, "decoder." + std::to_string(k), in + skip_channels,
                            config_.decoder_channels(k));
      in = config_.decoder_channels(k);
    }
    head_ = Conv2d<Scalar>(params_, rng, "head", in, config_.out_channels, 1);
  }

  const TransUNetConfig& config() const { return config_; }
  ParameterList<Scalar>& parameters() { return params_; }
  const ParameterList<Scalar>& parameters() const { return params_; }
  const std::vector<TransformerLayer<Scalar>>& layers() const { return layers_; }

  Encoded encode(const Tensor<Scalar>& input) const {
    ad::detail::require_rank(input, 4, "TransUNet::encode");
    ad::detail::require(input.dim(1) == config_.in_channels,
                        "TransUNet::encode: expected " + std::to_string(config_.in_channels) +
                            " input channels, got " + shape_to_string(input.shape()));
    ad::detail::require(input.dim(2) == config_.image_height && input.dim(3) == config_.image_width,
                        "TransUNet::encode: input " + shape_to_string(input.shape()) +
                            " does not match configured " + std::to_string(config_.image_height) +
                            "x" + std::to_string(config_.image_width));
    Encoded result;
    std::vector<Tensor<Scalar>> stages;
    Tensor<Scalar> x = input;
    for (const auto& stage : encoder_) {
      x = stage(x);
      stages.push_back(x);
    }
    result.bottleneck = x;
    const int first = config_.num_down_stages - 1 - config_.num_skips;
    for (int s = first; s < config_.num_down_stages - 1; ++s) result.skips.push_back(stages[s]);
    return result;
  }

  /// Patch embedding, transformer stack, and reshape back to a feature map.
  Tensor<Scalar> transform(const Tensor<Scalar>& bottleneck) const {
    const Index h = bottleneck.dim(2), w = bottleneck.dim(3);
    Tensor<Scalar> z = embedding_(bottleneck);
    for (const auto& layer : layers_) z = layer(z);
    return ad::from_tokens(z, h, w);
  }

  Tensor<Scalar> decode(const Tensor<Scalar>& transformed,
                        const std::vector<Tensor<Scalar>>& skips) const {
    ad::detail::require(static_cast<int>(skips.size()) == config_.num_skips,
                        "TransUNet::decode: expected " + std::to_string(config_.num_skips) +
                            " skips, got " + std::to_string(skips.size()));
    Tensor<Scalar> x = transformed;
    for (int k = 0; k < config_.num_down_stages; ++k) {
      const Tensor<Scalar>* skip =
          k < config_.num_skips ? &skips[config_.num_skips - 1 - k] : nullptr;
      x = decoder_[k](x, skip);
    }
    return ad::sigmoid(head_(x));
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& input) const {
    const Encoded e = encode(input);
    return decode(transform(e.bottleneck), e.skips);
  }

 private:
  TransUNetConfig config_;
  ParameterList<Scalar> params_;
  std::vector<EncoderStage<Scalar>> encoder_;
  PatchEmbedding<Scalar> embedding_;
  std::vector<TransformerLayer<Scalar>> layers_;
  std::vector<DecoderStage<Scalar>> decoder_;
  Conv2d<Scalar> head_;
};

}  // namespace ckm::nn
