#include "ckm/ad/gradcheck.hpp"
#include "ckm/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace ckm;
using nn::TransUNet;
using nn::TransUNetConfig;
using T = ad::Tensor<double>;

namespace {

TransUNetConfig small_config(int layers = 1) {
  TransUNetConfig c;
  c.in_channels = 2;
  c.out_channels = 3;
  c.image_height = 16;
  c.image_width = 32;
  c.base_width = 4;
  c.num_down_stages = 3;
  c.num_skips = 2;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.num_transformer_layers = layers;
  return c;
}

// Row-major x[L, in] * W[in, out] + b.
std::vector<double> affine(const std::vector<double>& x, Index rows, const nn::Linear<double>& lin) {
  const Index in = lin.weight.dim(0), out = lin.weight.dim(1);
  std::vector<double> y(rows * out);
  for (Index r = 0; r < rows; ++r)
    for (Index o = 0; o < out; ++o) {
      double acc = lin.bias.value()[o];
      for (Index i = 0; i < in; ++i) acc += x[r * in + i] * lin.weight.value()[i * out + o];
      y[r * out + o] = acc;
    }
  return y;
}

}  // namespace

TEST(TransUNet, StageShapes) {
  const auto cfg = small_config();
  TransUNet<double> model(cfg, 1);
  std::mt19937_64 rng(1);
  const T x = ad::random_tensor(rng, {2, 2, 16, 32});
  const auto enc = model.encode(x);
  EXPECT_EQ(enc.bottleneck.shape(), (Shape{2, 16, 2, 4}));
  ASSERT_EQ(enc.skips.size(), 2u);
  EXPECT_EQ(enc.skips[0].shape(), (Shape{2, 4, 8, 16}));
  EXPECT_EQ(enc.skips[1].shape(), (Shape{2, 8, 4, 8}));
  const T z = model.transform(enc.bottleneck);
  EXPECT_EQ(z.shape(), (Shape{2, 8, 2, 4}));
  const T y = model.decode(z, enc.skips);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 16, 32}));
  EXPECT_GT(y.value().minCoeff(), 0.0);
  EXPECT_LT(y.value().maxCoeff(), 1.0);
}

TEST(TransUNet, UNetAblationHasNoTransformerParameters) {
  TransUNet<double> with(small_config(1), 1);
  TransUNet<double> without(small_config(0), 1);
  EXPECT_TRUE(without.layers().empty());
  for (const auto& name : without.parameters().names()) {
    EXPECT_EQ(name.find("transformer"), std::string::npos) << name;
  }
  EXPECT_LT(without.parameters().count(), with.parameters().count());
  std::mt19937_64 rng(2);
  EXPECT_EQ(without.forward(ad::random_tensor(rng, {1, 2, 16, 32})).shape(), (Shape{1, 3, 16, 32}));
}

TEST(TransUNet, SkipCountsAreHonoured) {
  for (int skips = 0; skips <= 2; ++skips) {
    auto cfg = small_config();
    cfg.num_skips = skips;
    TransUNet<double> model(cfg, 3);
    std::mt19937_64 rng(3);
    const T x = ad::random_tensor(rng, {1, 2, 16, 32});
    EXPECT_EQ(model.encode(x).skips.size(), std::size_t(skips));
    EXPECT_EQ(model.forward(x).shape(), (Shape{1, 3, 16, 32}));
  }
}

TEST(TransUNet, AttentionMatchesNaiveImplementation) {
  TransUNet<double> model(small_config(1), 7);
  const auto& layer = model.layers().at(0);
  std::mt19937_64 rng(4);
  const Index L = 5, D = 8, H = 2, dh = D / H;
  const T x = ad::random_tensor(rng, {1, L, D});
  const T got = layer.attention(x);

  std::vector<double> xv(x.value().data(), x.value().data() + L * D);
  const auto q = affine(xv, L, layer.query), k = affine(xv, L, layer.key), v = affine(xv, L, layer.value);
  std::vector<double> ctx(L * D, 0.0);
  for (Index h = 0; h < H; ++h)
    for (Index i = 0; i < L; ++i) {
      std::vector<double> s(L);
      double mx = -INFINITY;
      for (Index j = 0; j < L; ++j) {
        double dot = 0;
        for (Index e = 0; e < dh; ++e) dot += q[i * D + h * dh + e] * k[j * D + h * dh + e];
        s[j] = dot / std::sqrt(double(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& sj : s) z += (sj = std::exp(sj - mx));
      for (Index j = 0; j < L; ++j)
        for (Index e = 0; e < dh; ++e) ctx[i * D + h * dh + e] += s[j] / z * v[j * D + h * dh + e];
    }
  const auto expected = affine(ctx, L, layer.out);
  for (Index i = 0; i < L * D; ++i) EXPECT_NEAR(got.value()[i], expected[i], 1e-10);
}

TEST(TransUNet, AttentionIsPermutationEquivariant) {
  TransUNet<double> model(small_config(1), 8);
  const auto& layer = model.layers().at(0);
  std::mt19937_64 rng(5);
  const T x = ad::random_tensor(rng, {1, 4, 8});
  ad::Buffer<double> swapped = x.value();
  swapped.segment(0, 8).swap(swapped.segment(24, 8));
  const T a = layer.attention(x);
  const T b = layer.attention(T::from_buffer({1, 4, 8}, swapped));
  EXPECT_LT((a.value().segment(0, 8) - b.value().segment(24, 8)).abs().maxCoeff(), 1e-12);
  EXPECT_LT((a.value().segment(8, 16) - b.value().segment(8, 16)).abs().maxCoeff(), 1e-12);
}

TEST(TransUNet, InvalidConfigurationsThrow) {
  auto bad = small_config();
  bad.num_skips = 3;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = small_config();
  bad.embed_dim = 9;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = small_config();
  bad.image_height = 20;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = small_config();
  bad.num_transformer_layers = -1;
  EXPECT_THROW(TransUNet<double>(bad, 1), InvalidArgument);
}

TEST(TransUNet, WrongInputShapeThrows) {
  TransUNet<double> model(small_config(), 1);
  EXPECT_THROW(model.forward(T::zeros({1, 2, 16, 16})), InvalidArgument);
  EXPECT_THROW(model.forward(T::zeros({1, 3, 16, 32})), InvalidArgument);
  EXPECT_THROW(model.forward(T::zeros({2, 16, 32})), InvalidArgument);
}

TEST(TransUNet, SeededInitialisationIsDeterministic) {
  TransUNet<double> a(small_config(), 42), b(small_config(), 42), c(small_config(), 43);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_TRUE((a.parameters().tensors()[i].value() == b.parameters().tensors()[i].value()).all());
    differs = differs ||
              !(a.parameters().tensors()[i].value() == c.parameters().tensors()[i].value()).all();
  }
  EXPECT_TRUE(differs);
}

TEST(TransUNet, ParameterNamesAreUniqueAndOrdered) {
  TransUNet<double> model(small_config(1), 1);
  const auto& names = model.parameters().names();
  EXPECT_EQ(names.front(), "encoder.0.down.weight");
  EXPECT_EQ(names.back(), "head.bias");
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), names.size());
  EXPECT_NE(std::find(names.begin(), names.end(), "embed.position"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "transformer.0.query.weight"), names.end());
}

TEST(TransUNet, ConfigJsonRoundTrip) {
  const auto cfg = small_config(2);
  const auto back = TransUNetConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_NO_THROW(TransUNetConfig::full_scale().validate());
}

TEST(TransUNet, GradientsReachEveryParameter) {
  TransUNet<double> model(small_config(1), 9);
  std::mt19937_64 rng(6);
  ad::backward(ad::sum(model.forward(ad::random_tensor(rng, {1, 2, 16, 32}))));
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    EXPECT_TRUE(model.parameters().tensors()[i].has_grad()) << model.parameters().names()[i];
  }
}

TEST(TransUNet, FloatAndDoubleAgree) {
  const auto cfg = small_config(1);
  TransUNet<double> md(cfg, 11);
  TransUNet<float> mf(cfg, 11);
  std::mt19937_64 rng(7);
  const T x = ad::random_tensor(rng, {1, 2, 16, 32});
  const auto yd = md.forward(x);
  const auto yf = mf.forward(ad::Tensor<float>::from_buffer(x.shape(), x.value().cast<float>()));
  EXPECT_LT((yd.value() - yf.value().cast<double>()).abs().maxCoeff(), 1e-4);
}
