// Copyright 2026 The tlseg Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tlseg/autodiff.hpp"
#include "tlseg/checkpoint.hpp"

namespace tlseg::ad {
namespace {

using D = double;
using testing::random_tensor;

Tensor<D> none() { return {}; }

TEST(TensorTest, ShapeChecked) {
  EXPECT_THROW((void)Tensor<D>::from_data({1, 2, 2, 2}, std::vector<D>(7)), Error);
  const auto t = Tensor<D>::full({1, 1, 2, 3}, 2.5);
  EXPECT_EQ(t.numel(), 6U);
  EXPECT_EQ(t.at(0, 0, 1, 2), 2.5);
}

TEST(BackwardTest, SumGivesOnes) {
  std::mt19937_64 rng(1);
  auto x = random_tensor<D>(rng, {2, 3, 4, 5});
  auto loss = sum(x);
  backward(loss);
  for (D g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(BackwardTest, HalfSquareGivesInput) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<D>(rng, {1, 2, 3, 3});
  auto loss = scale(sum(mul(x, x)), 0.5);
  backward(loss);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x.data()[i]);
}

TEST(BackwardTest, AccumulatesAcrossReuse) {
  auto x = Tensor<D>::full({1, 1, 1, 3}, 2.0, true);
  // Three uses of x, like a weight shared across time steps.
  auto loss = sum(add(add(x, x), mul(x, x)));
  backward(loss);
  for (D g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.0 + 2.0 * 2.0);
}

TEST(BackwardTest, ErrorsWithoutGraph) {
  auto x = Tensor<D>::full({1, 1, 1, 1}, 1.0, false);
  auto s = sum(x);
  try {
    backward(s);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::state);
  }
  auto y = Tensor<D>::full({1, 1, 1, 2}, 1.0, true);
  auto not_scalar = add(y, y);
  EXPECT_THROW(backward(not_scalar), Error);
}

TEST(BackwardTest, NoGradGuardRecordsNothing) {
  auto x = Tensor<D>::full({1, 1, 2, 2}, 1.0, true);
  NoGradGuard guard;
  const auto y = sum(mul(x, x));
  EXPECT_FALSE(y.has_history());
}

TEST(BackwardTest, TagsFollowScopes) {
  auto x = Tensor<D>::full({1, 1, 1, 2}, 1.0, true);
  Tensor<D> a, b;
  {
    TagScope t(3);
    a = mul(x, x);
  }
  {
    TagScope t(4);
    b = add(a, x);
  }
  const auto tags = reachable_tags(sum(b));
  EXPECT_TRUE(tags.contains(3));
  EXPECT_TRUE(tags.contains(4));
  EXPECT_FALSE(reachable_tags(sum(b.detach())).contains(3));
}

TEST(Conv2dTest, IdentityAndZeroKernels) {
  std::mt19937_64 rng(3);
  const auto x = random_tensor<D>(rng, {2, 3, 4, 6}, 1.0, false);
  std::vector<D> eye(9, 0.0);
  for (int c = 0; c < 3; ++c) eye[static_cast<std::size_t>(c * 3 + c)] = 1.0;
  const auto id = conv2d(x, Tensor<D>::from_data({3, 3, 1, 1}, eye), none());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(id.data()[i], x.data()[i]);
  const auto zero = conv2d(x, Tensor<D>::zeros({5, 3, 3, 3}), none(), {1, 1, 1, 1});
  for (D v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dTest, MatchesNaiveLoops) {
  std::mt19937_64 rng(4);
  const Conv2dOptions cases[] = {{1, 1, 1, 1}, {1, 2, 1, 1}, {1, 1, 0, 0}, {2, 2, 1, 1}, {1, 2, 0, 2}};
  for (const auto& o : cases) {
    const auto x = random_tensor<D>(rng, {2, 3, 5, 8}, 1.0, false);
    const auto w = random_tensor<D>(rng, {4, 3, 3, 3}, 1.0, false);
    const auto b = random_tensor<D>(rng, {1, 4, 1, 1}, 1.0, false);
    const auto y = conv2d(x, w, b, o);
    const auto ref = testing::naive_conv2d(x, w, std::vector<D>(b.data().begin(), b.data().end()), o);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
  }
}

TEST(Conv2dTest, ShapeMismatch) {
  const auto x = Tensor<D>::zeros({1, 3, 4, 4});
  try {
    (void)conv2d(x, Tensor<D>::zeros({2, 2, 3, 3}), none());
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
  }
  EXPECT_THROW((void)conv2d(x, Tensor<D>::zeros({2, 3, 3, 3}), Tensor<D>::zeros({1, 3, 1, 1})), Error);
}

TEST(Conv2dTest, WidthWrapsAround) {
  // A 1x3 averaging kernel at column 0 reads the last column.
  std::vector<D> row{1, 0, 0, 0, 0, 5};
  const auto x = Tensor<D>::from_data({1, 1, 1, 6}, row);
  const auto y = conv2d(x, Tensor<D>::full({1, 1, 1, 3}, 1.0), none(), {1, 1, 0, 1});
  EXPECT_EQ(y.at(0, 0, 0, 0), 6.0);
  EXPECT_EQ(y.at(0, 0, 0, 5), 6.0);
  EXPECT_EQ(y.at(0, 0, 0, 2), 0.0);
}

TEST(ConvTranspose2dTest, MatchesScatterDefinition) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor<D>(rng, {2, 3, 2, 4}, 1.0, false);
  const auto w = random_tensor<D>(rng, {3, 2, 1, 2}, 1.0, false);
  const auto b = random_tensor<D>(rng, {1, 2, 1, 1}, 1.0, false);
  const auto y = conv_transpose2d(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 2, 8}));
  for (int n = 0; n < 2; ++n) {
    for (int co = 0; co < 2; ++co) {
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 8; ++j) {
          double acc = b.data()[static_cast<std::size_t>(co)];
          for (int ci = 0; ci < 3; ++ci) acc += x.at(n, ci, i, j / 2) * w.at(ci, co, 0, j % 2);
          EXPECT_NEAR(y.at(n, co, i, j), acc, 1e-12);
        }
      }
    }
  }
}

TEST(BatchNormTest, ConstantInputGivesZero) {
  auto x = Tensor<D>::full({2, 2, 3, 3}, 4.0);
  std::vector<D> mean(2, 0.0), var(2, 1.0);
  const auto y = batch_norm(x, Tensor<D>::full({1, 2, 1, 1}, 1.0), Tensor<D>::zeros({1, 2, 1, 1}), std::span<D>(mean),
                            std::span<D>(var), true);
  for (D v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNormTest, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor<D>(rng, {2, 2, 3, 3}, 1.0, false);
  std::vector<D> mean(2, 0.0), var(2, 1.0);
  const auto y = batch_norm(x, Tensor<D>::zeros({1, 2, 1, 1}), Tensor<D>::from_data({1, 2, 1, 1}, {0.5, -2.0}),
                            std::span<D>(mean), std::span<D>(var), true);
  for (int n = 0; n < 2; ++n) {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        EXPECT_EQ(y.at(n, 0, i, j), 0.5);
        EXPECT_EQ(y.at(n, 1, i, j), -2.0);
      }
    }
  }
}

TEST(BatchNormTest, NormalizesPerChannel) {
  std::mt19937_64 rng(7);
  auto x = random_tensor<D>(rng, {4, 3, 5, 6}, 3.0, false);
  for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] += 10.0;
  std::vector<D> mean(3, 0.0), var(3, 1.0);
  const auto y = batch_norm(x, Tensor<D>::full({1, 3, 1, 1}, 1.0), Tensor<D>::zeros({1, 3, 1, 1}), std::span<D>(mean),
                            std::span<D>(var), true);
  const double count = 4 * 30;
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0, xm = 0.0, xv = 0.0;
    for (int n = 0; n < 4; ++n) {
      for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 6; ++j) {
          m += y.at(n, c, i, j);
          xm += x.at(n, c, i, j);
        }
      }
    }
    m /= count;
    xm /= count;
    for (int n = 0; n < 4; ++n) {
      for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 6; ++j) {
          v += (y.at(n, c, i, j) - m) * (y.at(n, c, i, j) - m);
          xv += (x.at(n, c, i, j) - xm) * (x.at(n, c, i, j) - xm);
        }
      }
    }
    v /= count;
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v, xv / count / (xv / count + kBatchNormEps), 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-4);
    // Running statistics moved by momentum 0.1 toward the batch statistics (unbiased variance).
    EXPECT_NEAR(mean[static_cast<std::size_t>(c)], 0.1 * xm, 1e-12);
    EXPECT_NEAR(var[static_cast<std::size_t>(c)], 0.9 + 0.1 * xv / (count - 1), 1e-12);
  }
}

TEST(BatchNormTest, EvalConvergesToTrain) {
  std::mt19937_64 rng(8);
  const auto x = random_tensor<D>(rng, {8, 2, 4, 4}, 2.0, false);
  std::vector<D> mean(2, 0.0), var(2, 1.0);
  const auto g = Tensor<D>::full({1, 2, 1, 1}, 1.0);
  const auto b = Tensor<D>::zeros({1, 2, 1, 1});
  Tensor<D> train;
  for (int i = 0; i < 300; ++i) train = batch_norm(x, g, b, std::span<D>(mean), std::span<D>(var), true);
  const auto eval = batch_norm(x, g, b, std::span<D>(mean), std::span<D>(var), false);
  // The running variance is unbiased; the batch variance is not.
  const double n = 8 * 16;
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(eval.data()[i], train.data()[i], 1e-4 + 1.0 / n * std::abs(train.data()[i]));
}

TEST(BatchNormTest, EmptyBatch) {
  std::vector<D> mean(1, 0.0), var(1, 1.0);
  EXPECT_THROW((void)batch_norm(Tensor<D>::zeros({0, 1, 2, 2}), Tensor<D>::full({1, 1, 1, 1}, 1.0),
                                Tensor<D>::zeros({1, 1, 1, 1}), std::span<D>(mean), std::span<D>(var), true),
               Error);
}

TEST(SoftmaxTest, NormalizesAndArgmax) {
  std::mt19937_64 rng(9);
  const auto x = random_tensor<D>(rng, {2, 5, 3, 4}, 4.0, false);
  const auto p = softmax_channels(x);
  for (int n = 0; n < 2; ++n) {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 4; ++j) {
        double s = 0.0;
        for (int c = 0; c < 5; ++c) s += p.at(n, c, i, j);
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
  const auto u = softmax_channels(Tensor<D>::zeros({1, 4, 1, 1}));
  for (D v : u.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  std::vector<D> favor(4, 0.0);
  favor[2] = 10.0;
  const auto q = softmax_channels(Tensor<D>::from_data({1, 4, 1, 1}, favor));
  EXPECT_GT(q.at(0, 2, 0, 0), 0.99);
}

TEST(CrossEntropyTest, HandCase) {
  // Pixel 0 has p = (0.5, 0.5) and label 0. Pixel 1 has p = (0.75, 0.25) and label 1.
  const double a = std::log(3.0);
  const auto logits = Tensor<D>::from_data({1, 2, 1, 2}, {0.0, a, 0.0, 0.0});
  const std::vector<std::int32_t> labels{0, 1};
  const std::vector<double> w{1.0, 2.0};
  const auto loss = softmax_cross_entropy(logits, labels, w);
  EXPECT_NEAR(loss.item(), (1.0 * std::log(2.0) + 2.0 * std::log(4.0)) / 2.0, 1e-12);
}

TEST(CrossEntropyTest, SkipsIgnoredAndFloorsProbability) {
  const auto logits = Tensor<D>::from_data({1, 2, 1, 3}, {0.0, 0.0, 0.0, 0.0, 0.0, -1e9});
  const std::vector<double> w{1.0, 1.0};
  EXPECT_NEAR(softmax_cross_entropy(logits, std::vector<std::int32_t>{0, 2, -1}, w).item(), std::log(2.0), 1e-12);
  EXPECT_EQ(softmax_cross_entropy(logits, std::vector<std::int32_t>{2, 2, 2}, w).item(), 0.0);
  EXPECT_NEAR(softmax_cross_entropy(logits, std::vector<std::int32_t>{5, 5, 1}, w).item(), -std::log(1e-12), 1e-6);
}

TEST(GradCheckTest, LinearIsExact) {
  std::mt19937_64 rng(10);
  auto x = random_tensor<D>(rng, {1, 2, 3, 3});
  const auto c = random_tensor<D>(rng, {1, 2, 3, 3}, 1.0, false);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return sum(mul(t, c)); }, x), 1e-10);
}

TEST(GradCheckTest, ConvSigmoid) {
  std::mt19937_64 rng(11);
  auto x = random_tensor<D>(rng, {2, 2, 4, 6});
  auto w = random_tensor<D>(rng, {3, 2, 3, 3}, 0.5);
  auto b = random_tensor<D>(rng, {1, 3, 1, 1}, 0.5);
  const auto f = [&](const Tensor<D>&) { return sum(sigmoid(conv2d(x, w, b, {1, 2, 1, 1}))); };
  EXPECT_LT(grad_check(f, x), 1e-6);
  EXPECT_LT(grad_check(f, w), 1e-6);
  EXPECT_LT(grad_check(f, b), 1e-6);
}

TEST(GradCheckTest, EveryOperator) {
  std::mt19937_64 rng(12);
  auto x = random_tensor<D>(rng, {2, 3, 2, 4});
  auto y = random_tensor<D>(rng, {2, 3, 2, 4});
  auto wt = random_tensor<D>(rng, {3, 2, 1, 2}, 0.5);
  auto bt = random_tensor<D>(rng, {1, 2, 1, 1}, 0.5);
  auto gamma = random_tensor<D>(rng, {1, 3, 1, 1});
  auto beta = random_tensor<D>(rng, {1, 3, 1, 1});
  std::vector<D> run_mean(3, 0.0), run_var(3, 1.0);
  const auto coef = random_tensor<D>(rng, {2, 3, 2, 4}, 1.0, false);
  const auto weigh = [&](const Tensor<D>& t) { return sum(mul(t, coef)); };
  const std::vector<std::vector<std::int32_t>> src{{3, -1, 0, 0, 7, 2, 5, 6}, {1, 1, 1, -1, 4, 4, 0, 2}};
  const std::vector<std::int32_t> labels{0, 1, 2, 2, 3, 0, 1, 0, 2, 1, 0, 3, 1, 2, 2, 0};
  const std::vector<double> cw{1.0, 0.5, 2.0};

  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return weigh(sub(t, mul(y, t))); }, x), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return weigh(tanh(one_minus(t))); }, x), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return weigh(relu(t)); }, x), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return mean(square(t)); }, x), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return sum(square(concat_channels<D>({t, y, t}))); }, x), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return sum(square(gather_pixels(t, src))); }, x), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return sum(square(conv_transpose2d(t, wt, bt))); }, x), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return sum(square(conv_transpose2d(x, t, bt))); }, wt), 1e-6);
  const auto bn = [&](const Tensor<D>& in, const Tensor<D>& g, const Tensor<D>& b) {
    return weigh(batch_norm(in, g, b, std::span<D>(run_mean), std::span<D>(run_var), true));
  };
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return bn(t, gamma, beta); }, x), 1e-4);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return bn(x, t, beta); }, gamma), 1e-4);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return bn(x, gamma, t); }, beta), 1e-4);
  const auto ce = [&](const Tensor<D>& t) { return softmax_cross_entropy(t, labels, cw); };
  EXPECT_LT(grad_check(ce, x), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor<D>& t) { return weigh(softmax_channels(t)); }, x), 1e-6);
}

TEST(CheckpointTest, RoundTripAndManifest) {
  Checkpoint ck;
  ck.add("a.weight", DType::f32, {2, 3}, {1.5, -2.0, 0.25, 3.0, 4.0, 5.0});
  ck.add("b", DType::f64, {1}, {0.1});
  ck.add("c", DType::i64, {2}, {-7.0, 9.0});
  const auto back = Checkpoint::decode(ck.encode());
  ASSERT_EQ(back.records().size(), 3U);
  EXPECT_EQ(back.get("a.weight").values, ck.get("a.weight").values);
  EXPECT_EQ(back.get("b").values[0], 0.1);
  EXPECT_EQ(back.get("c").values[0], -7.0);
  EXPECT_NE(back.manifest().find("format_version"), std::string::npos);
  auto bytes = ck.encode();
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW((void)Checkpoint::decode(bytes), Error);
  EXPECT_THROW(ck.add("b", DType::f64, {1}, {0.0}), Error);
}

}  // namespace
}  // namespace tlseg::ad
