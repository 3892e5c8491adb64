#include "ckm/ad/adam.hpp"
#include "ckm/ad/gradcheck.hpp"
#include "ckm/ad/ops.hpp"
#include "ckm/gradcheck_suite.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace ckm;
using ad::Tensor;
using T = Tensor<double>;

namespace {

double at4(const T& t, Index a, Index b, Index c, Index d) {
  const auto& s = t.shape();
  return t.value()[((a * s[1] + b) * s[2] + c) * s[3] + d];
}

// Direct six-loop cross-correlation with zero padding.
std::vector<double> naive_conv(const T& x, const T& w, const T* bias, Index stride, Index pad,
                               Index& oh, Index& ow) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), o = w.dim(0), k = w.dim(2);
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(n * o * oh * ow, 0.0);
  for (Index b = 0; b < n; ++b)
    for (Index oc = 0; oc < o; ++oc)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double acc = bias ? bias->value()[oc] : 0.0;
          for (Index ic = 0; ic < c; ++ic)
            for (Index ki = 0; ki < k; ++ki)
              for (Index kj = 0; kj < k; ++kj) {
                const Index y = i * stride - pad + ki, xx = j * stride - pad + kj;
                if (y < 0 || y >= h || xx < 0 || xx >= wd) continue;
                acc += at4(x, b, ic, y, xx) * at4(w, oc, ic, ki, kj);
              }
          out[((b * o + oc) * oh + i) * ow + j] = acc;
        }
  return out;
}

double bilinear_sample(const T& x, Index plane, double y, double xx) {
  const Index h = x.dim(2), w = x.dim(3);
  y = std::clamp(y, 0.0, double(h - 1));
  xx = std::clamp(xx, 0.0, double(w - 1));
  const Index y0 = Index(std::floor(y)), x0 = Index(std::floor(xx));
  const Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double wy = y - y0, wx = xx - x0;
  const double* p = x.value().data() + plane * h * w;
  return (1 - wy) * ((1 - wx) * p[y0 * w + x0] + wx * p[y0 * w + x1]) +
         wy * ((1 - wx) * p[y1 * w + x0] + wx * p[y1 * w + x1]);
}

}  // namespace

TEST(Conv2d, MatchesNaiveLoopOracle) {
  std::mt19937_64 rng(1);
  const T x = ad::random_tensor(rng, {2, 3, 8, 8});
  const T w = ad::random_tensor(rng, {4, 3, 3, 3});
  const T b = ad::random_tensor(rng, {4});
  for (auto [stride, pad] : {std::pair<Index, Index>{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
    Index oh, ow;
    const auto expected = naive_conv(x, w, &b, stride, pad, oh, ow);
    const T y = ad::conv2d(x, w, b, stride, pad);
    ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
    for (std::size_t i = 0; i < expected.size(); ++i) {
      EXPECT_NEAR(y.value()[i], expected[i], 1e-12);
    }
  }
}

TEST(Conv2d, PointwiseKernelMatchesOracle) {
  std::mt19937_64 rng(2);
  const T x = ad::random_tensor(rng, {1, 5, 4, 6});
  const T w = ad::random_tensor(rng, {3, 5, 1, 1});
  Index oh, ow;
  const auto expected = naive_conv(x, w, nullptr, 1, 0, oh, ow);
  const T y = ad::conv2d(x, w);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y.value()[i], expected[i], 1e-12);
}

TEST(Conv2d, RejectsChannelMismatch) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(ad::conv2d(ad::random_tensor(rng, {1, 2, 4, 4}), ad::random_tensor(rng, {1, 3, 3, 3})),
               InvalidArgument);
}

TEST(AvgPool2, Examples) {
  ad::Buffer<double> v(4);
  v << 1, 2, 3, 4;
  EXPECT_DOUBLE_EQ(ad::avg_pool2(T::from_buffer({1, 1, 2, 2}, v)).item(), 2.5);
  const T c = ad::avg_pool2(T::constant({1, 2, 4, 4}, 0.7));
  EXPECT_TRUE((c.value() == 0.7).all());

  std::mt19937_64 rng(4);
  const T x = ad::random_tensor(rng, {1, 1, 4, 4});
  const T y = ad::avg_pool2(x);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 2; ++j) {
      const double mean = (at4(x, 0, 0, 2 * i, 2 * j) + at4(x, 0, 0, 2 * i, 2 * j + 1) +
                           at4(x, 0, 0, 2 * i + 1, 2 * j) + at4(x, 0, 0, 2 * i + 1, 2 * j + 1)) /
                          4.0;
      EXPECT_NEAR(at4(y, 0, 0, i, j), mean, 1e-15);
    }
  EXPECT_THROW(ad::avg_pool2(T::zeros({1, 1, 3, 4})), InvalidArgument);
}

TEST(BilinearUpsample2, Examples) {
  const T c = ad::bilinear_upsample2(T::constant({1, 1, 3, 5}, -1.25));
  EXPECT_EQ(c.shape(), (Shape{1, 1, 6, 10}));
  EXPECT_TRUE((c.value() == -1.25).all());
  const T one = ad::bilinear_upsample2(T::constant({1, 1, 1, 1}, 3.0));
  EXPECT_EQ(one.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_TRUE((one.value() == 3.0).all());
}

TEST(BilinearUpsample2, MatchesPerPixelInterpolation) {
  std::mt19937_64 rng(5);
  const T x = ad::random_tensor(rng, {1, 2, 3, 3});
  const T y = ad::bilinear_upsample2(x);
  for (Index p = 0; p < 2; ++p)
    for (Index i = 0; i < 6; ++i)
      for (Index j = 0; j < 6; ++j) {
        const double expected = bilinear_sample(x, p, (i + 0.5) / 2.0 - 0.5, (j + 0.5) / 2.0 - 0.5);
        EXPECT_NEAR(at4(y, 0, p, i, j), expected, 1e-14);
      }
}

TEST(PoolUpsample, ConstantRoundTripIsIdentity) {
  const T x = T::constant({2, 3, 8, 8}, 0.42);
  const T y = ad::bilinear_upsample2(ad::avg_pool2(x));
  EXPECT_LT((y.value() - x.value()).abs().maxCoeff(), 1e-12);
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(6);
  const T a = ad::random_tensor(rng, {3, 4});
  const T b = ad::random_tensor(rng, {4, 5});
  const T c = ad::matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 5}));
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 5; ++j) {
      double acc = 0;
      for (Index k = 0; k < 4; ++k) acc += a.value()[i * 4 + k] * b.value()[k * 5 + j];
      EXPECT_NEAR(c.value()[i * 5 + j], acc, 1e-12);
    }
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(7);
  const T s = ad::softmax(ad::random_tensor(rng, {3, 4, 6}, -30, 30));
  for (Index r = 0; r < 12; ++r) EXPECT_NEAR(s.value().segment(r * 6, 6).sum(), 1.0, 1e-12);
}

TEST(LayerNorm, MatchesDirectFormula) {
  std::mt19937_64 rng(8);
  const T x = ad::random_tensor(rng, {2, 5});
  const T g = ad::random_tensor(rng, {5});
  const T b = ad::random_tensor(rng, {5});
  const T y = ad::layer_norm(x, g, b);
  for (Index r = 0; r < 2; ++r) {
    double mean = 0, var = 0;
    for (Index i = 0; i < 5; ++i) mean += x.value()[r * 5 + i] / 5;
    for (Index i = 0; i < 5; ++i) var += std::pow(x.value()[r * 5 + i] - mean, 2) / 5;
    for (Index i = 0; i < 5; ++i) {
      const double e = (x.value()[r * 5 + i] - mean) / std::sqrt(var + 1e-5) * g.value()[i] + b.value()[i];
      EXPECT_NEAR(y.value()[r * 5 + i], e, 1e-12);
    }
  }
}

TEST(Permute, MovesElements) {
  std::mt19937_64 rng(9);
  const T x = ad::random_tensor(rng, {2, 3, 4});
  const T y = ad::permute(x, {2, 0, 1});
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (Index a = 0; a < 2; ++a)
    for (Index b = 0; b < 3; ++b)
      for (Index c = 0; c < 4; ++c)
        EXPECT_EQ(y.value()[(c * 2 + a) * 3 + b], x.value()[(a * 3 + b) * 4 + c]);
}

TEST(Graph, FanOutAccumulates) {
  ad::Buffer<double> v(3);
  v << 0.5, -1.0, 2.0;
  T x = T::from_buffer({3}, v, true);
  ad::backward(ad::sum(ad::add(ad::mul(x, x), x)));
  EXPECT_LT((x.grad() - (2.0 * v + 1.0)).abs().maxCoeff(), 1e-15);
}

TEST(Graph, LeafGradientsAccumulateAcrossGraphs) {
  T x = T::constant({2}, 1.5, true);
  ad::backward(ad::sum(ad::scale(x, 2.0)));
  ad::backward(ad::sum(ad::scale(x, 3.0)));
  EXPECT_TRUE((x.grad() == 5.0).all());
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Graph, SecondBackwardThrows) {
  T x = T::constant({2}, 1.0, true);
  const T loss = ad::sum(ad::square(x));
  ad::backward(loss);
  EXPECT_THROW(ad::backward(loss), GraphError);
}

TEST(Graph, ReusingConsumedIntermediateThrows) {
  T x = T::constant({2}, 1.0, true);
  const T mid = ad::square(x);
  ad::backward(ad::sum(mid));
  EXPECT_THROW(ad::sum(mid), GraphError);
}

TEST(Graph, NonScalarRootThrows) {
  T x = T::constant({2}, 1.0, true);
  EXPECT_THROW(ad::backward(ad::square(x)), InvalidArgument);
}

TEST(Graph, NoGradGuardSkipsRecording) {
  T x = T::constant({2}, 1.0, true);
  T y;
  {
    ad::NoGradGuard guard;
    y = ad::sum(ad::square(x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(ad::backward(y), GraphError);
  EXPECT_TRUE(ad::grad_enabled());
}

TEST(Graph, ShapeErrorsAreInvalidArgument) {
  EXPECT_THROW(ad::add(T::zeros({2}), T::zeros({3})), InvalidArgument);
  EXPECT_THROW(ad::matmul(T::zeros({2, 3}), T::zeros({4, 2})), InvalidArgument);
  EXPECT_THROW(ad::reshape(T::zeros({2, 3}), {5}), InvalidArgument);
}

TEST(Gradcheck, DetectsWrongGradient) {
  // A function whose recorded backward is deliberately inconsistent.
  auto wrong = [](const std::vector<T>& in) {
    const T& x = in[0];
    auto px = x.node();
    T y = ad::make_result<double>("wrong", x.shape(), x.value().square(), {x},
                                  [px](ad::Node<double>& self) { px->accumulate(self.grad * px->value); });
    return ad::sum(y);
  };
  std::mt19937_64 rng(10);
  const auto r = ad::gradcheck(wrong, {ad::random_tensor(rng, {4}, 0.5, 1.0)});
  EXPECT_FALSE(r.passed(1e-4));
}

TEST(Gradcheck, SuiteCoversEveryOpAndPassesSelectedOps) {
  const auto ops = gradcheck_ops();
  for (const char* name : {"conv2d", "bilinear_upsample2", "softmax", "layer_norm", "transunet", "unet"}) {
    EXPECT_NE(std::find(ops.begin(), ops.end(), name), ops.end()) << name;
  }
  for (const char* name : {"conv2d", "bmm", "gelu", "total_loss"}) {
    const auto report = run_gradcheck_suite(name);
    ASSERT_EQ(report.entries.size(), 1u);
    EXPECT_TRUE(report.passed()) << report.to_json().dump();
    EXPECT_EQ(report.entries[0].instantiations, 5);
  }
  EXPECT_THROW(run_gradcheck_suite("nope"), InvalidArgument);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  T p = T::constant({3}, 1.0, true);
  std::vector<T> params{p};
  ad::AdamState<double> state;
  state.config.lr = 1e-3;
  std::vector<ad::Buffer<double>> grads{ad::Buffer<double>::Constant(3, 0.37)};
  ad::adam_step<double>(params, grads, state);
  // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps).
  const double expected = 1.0 - 1e-3 * 0.37 / (0.37 + 1e-8);
  EXPECT_NEAR(p.value()[0], expected, 1e-15);
  EXPECT_EQ(state.step, 1);
}

TEST(Adam, NonFiniteGradientThrowsWithoutUpdating) {
  T p = T::constant({2}, 1.0, true);
  std::vector<T> params{p};
  ad::AdamState<double> state;
  ad::Buffer<double> g(2);
  g << 0.1, std::nan("");
  std::vector<ad::Buffer<double>> grads{g};
  EXPECT_THROW(ad::adam_step<double>(params, grads, state), NumericalError);
  EXPECT_TRUE((p.value() == 1.0).all());
  EXPECT_EQ(state.step, 0);
}

TEST(Adam, StepDecaySchedule) {
  EXPECT_DOUBLE_EQ(ad::step_decay_lr(1e-4, 0.2, 20, 0), 1e-4);
  EXPECT_DOUBLE_EQ(ad::step_decay_lr(1e-4, 0.2, 20, 19), 1e-4);
  EXPECT_NEAR(ad::step_decay_lr(1e-4, 0.2, 20, 20), 2e-5, 1e-20);  // epoch 21, 1-based
  EXPECT_NEAR(ad::step_decay_lr(1e-4, 0.2, 20, 45), 4e-6, 1e-20);
}

TEST(TensorIo, RoundTripAndByteLayout) {
  NdArrayF a(Shape{2, 3});
  for (Index i = 0; i < 6; ++i) a.data[i] = 0.5f * float(i) - 1.0f;
  std::stringstream buf;
  write_tensor_record(buf, a);
  const std::string bytes = buf.str();
  ASSERT_EQ(bytes.size(), 4u + 4u + 2 * 4u + 6 * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "CKM1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2);  // rank, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 3);
  const NdArrayF b = read_tensor_record(buf);
  EXPECT_EQ(b.shape, a.shape);
  EXPECT_TRUE((b.data == a.data).all());
}

TEST(TensorIo, BadMagicAndTruncation) {
  std::stringstream bad("XXXX....");
  EXPECT_THROW(read_tensor_record(bad), IoError);
  NdArrayF a(Shape{4}, 1.0f);
  std::stringstream buf;
  write_tensor_record(buf, a);
  std::stringstream truncated(buf.str().substr(0, 14));
  EXPECT_THROW(read_tensor_record(truncated), IoError);
  EXPECT_THROW(load_tensor("/nonexistent/file.ckm"), IoError);
}
