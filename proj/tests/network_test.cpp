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

#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tlseg/network.hpp"

namespace tlseg {
namespace {

using D = double;
using ad::Shape;
using ad::Tensor;
using testing::random_tensor;

void fill(Tensor<D>& t, double v) {
  for (auto& x : t.data()) x = v;
}

ModelConfig tiny_config(MemoryUpdateKind kind = MemoryUpdateKind::residual) {
  ModelConfig cfg;
  cfg.backbone.widths = {4, 4, 8};
  cfg.backbone.extractor_units = {1, 1, 1};
  cfg.backbone.aggregator_units = 1;
  cfg.memory_units = 1;
  cfg.update = kind;
  return cfg;
}

// Per-channel batch statistics, biased variance, unit gamma, zero beta.
std::vector<double> naive_bn(const std::vector<double>& x, Shape s) {
  std::vector<double> out(x.size());
  const std::size_t plane = s.plane();
  for (int c = 0; c < s.c; ++c) {
    double m = 0.0, v = 0.0;
    for (int n = 0; n < s.n; ++n) {
      for (std::size_t p = 0; p < plane; ++p) m += x[(static_cast<std::size_t>(n) * s.c + c) * plane + p];
    }
    m /= static_cast<double>(s.n * plane);
    for (int n = 0; n < s.n; ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = x[(static_cast<std::size_t>(n) * s.c + c) * plane + p] - m;
        v += d * d;
      }
    }
    v /= static_cast<double>(s.n * plane);
    for (int n = 0; n < s.n; ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t k = (static_cast<std::size_t>(n) * s.c + c) * plane + p;
        out[k] = (x[k] - m) / std::sqrt(v + ad::kBatchNormEps);
      }
    }
  }
  return out;
}

std::vector<double> naive_relu(std::vector<double> x) {
  for (auto& v : x) v = std::max(v, 0.0);
  return x;
}

Tensor<D> wrap(Shape s, std::vector<double> v) { return Tensor<D>::from_data(s, std::move(v)); }

TEST(ParameterCountTest, SingleLayers) {
  ParameterStore<D> store(1);
  (void)nn::Conv2d<D>::k1(store, "reduce", 256, 128, true);
  EXPECT_EQ(store.count(), 32896U);
  ParameterStore<D> store3(1);
  (void)nn::Conv2d<D>::k3(store3, "conv", 128, 128, false);
  EXPECT_EQ(store3.count(), 147456U);
}

TEST(ParameterCountTest, ResidualMemoryUpdateMatchesAnalyticCount) {
  for (int c : {8, 64, 128}) {
    ParameterStore<D> store(1);
    ResidualMemoryUpdate<D> update(store, c);
    const std::size_t cc = static_cast<std::size_t>(c);
    const std::size_t reduce = 2 * cc * cc + cc;
    const std::size_t bn = 2 * cc;
    const std::size_t unit = 2 * (2 * cc) + 2 * 9 * cc * cc;
    EXPECT_EQ(store.count(), reduce + bn + 4 * unit) << c;
  }
  ParameterStore<D> store(1);
  ResidualMemoryUpdate<D> update(store, 128);
  EXPECT_EQ(store.count(), 1214848U);
  EXPECT_EQ(store.count(false), 1214848U);
}

TEST(ParameterStoreTest, FreezingByPrefix) {
  Model<D> model(tiny_config(), 1);
  auto& store = model.parameters();
  const auto all = store.count();
  store.set_trainable("backbone", false);
  EXPECT_LT(store.count(), all);
  EXPECT_EQ(store.count(false), all);
  for (const auto* p : store.parameters()) EXPECT_EQ(p->trainable, p->name.rfind("backbone", 0) != 0) << p->name;
}

TEST(ParameterStoreTest, DuplicateNamesRejected) {
  ParameterStore<D> store(1);
  (void)store.add("a", {1, 1, 1, 1}, {0.0});
  EXPECT_THROW((void)store.add("a", {1, 1, 1, 1}, {0.0}), Error);
}

TEST(BackboneTest, OutputShapeAndWidthCheck) {
  ParameterStore<D> store(2);
  BackboneConfig cfg;
  cfg.widths = {4, 4, 8};
  cfg.extractor_units = {1, 2, 1};
  cfg.aggregator_units = 1;
  Backbone<D> backbone(store, cfg);
  std::mt19937_64 rng(3);
  const auto x = random_tensor<D>(rng, {2, 6, 4, 16}, 1.0, false);
  EXPECT_EQ(backbone(x, {}).shape(), (Shape{2, 8, 4, 16}));
  EXPECT_THROW((void)backbone(random_tensor<D>(rng, {1, 6, 4, 18}, 1.0, false), {}), Error);
  EXPECT_THROW((void)backbone(random_tensor<D>(rng, {1, 5, 4, 16}, 1.0, false), {}), Error);
  EXPECT_EQ(cfg.longest_residual_path(), 6);
  EXPECT_EQ(BackboneConfig{}.longest_residual_path(), 19);
  EXPECT_EQ(BackboneConfig::full_widths().output_channels(), 128);
}

TEST(BackboneTest, DownsampledFirstStageRestoresResolution) {
  ParameterStore<D> store(2);
  BackboneConfig cfg;
  cfg.widths = {4, 4, 8};
  cfg.extractor_units = {1, 1, 1};
  cfg.aggregator_units = 0;
  cfg.downsample_first = true;
  Backbone<D> backbone(store, cfg);
  std::mt19937_64 rng(4);
  EXPECT_EQ(backbone(random_tensor<D>(rng, {1, 6, 2, 16}, 1.0, false), {}).shape(), (Shape{1, 8, 2, 16}));
  EXPECT_THROW((void)backbone(random_tensor<D>(rng, {1, 6, 2, 12}, 1.0, false), {}), Error);
}

TEST(BackboneTest, InvalidConfigRejected) {
  ParameterStore<D> store(2);
  BackboneConfig cfg;
  cfg.extractor_units = {1, 0, 1};
  EXPECT_THROW((void)Backbone<D>(store, cfg), Error);
}

TEST(ResidualUnitTest, ZeroWeightsGiveIdentity) {
  ParameterStore<D> store(5);
  nn::ResidualUnit<D> unit(store, "u", 3, 3);
  fill(unit.conv1().weight(), 0.0);
  fill(unit.conv2().weight(), 0.0);
  std::mt19937_64 rng(6);
  const auto x = random_tensor<D>(rng, {2, 3, 3, 8}, 1.0, false);
  const auto y = unit(x, {});
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(ResidualMemoryUpdateTest, MatchesStraightLineReference) {
  const int c = 3;
  ParameterStore<D> store(7);
  ResidualMemoryUpdate<D> update(store, c, 2);
  std::mt19937_64 rng(8);
  for (auto& v : update.reduce().bias().data()) v = std::normal_distribution<double>(0.0, 1.0)(rng);
  const Shape s{2, c, 2, 8};
  const auto f = random_tensor<D>(rng, s, 1.0, false);
  const auto h = random_tensor<D>(rng, s, 1.0, false);
  const auto got = update(f, h, {});

  std::vector<double> cat;
  for (int n = 0; n < s.n; ++n) {
    const auto plane = static_cast<std::ptrdiff_t>(c * s.plane());
    cat.insert(cat.end(), h.data().begin() + n * plane, h.data().begin() + (n + 1) * plane);
    cat.insert(cat.end(), f.data().begin() + n * plane, f.data().begin() + (n + 1) * plane);
  }
  const auto& rb = update.reduce().bias();
  auto x = testing::naive_conv2d(wrap({2, 2 * c, 2, 8}, cat), update.reduce().weight(),
                                 std::vector<double>(rb.data().begin(), rb.data().end()), {1, 1, 0, 0});
  x = naive_bn(x, s);
  for (auto& unit : update.units().units()) {
    const auto a = naive_relu(naive_bn(x, s));
    auto t = testing::naive_conv2d(wrap(s, a), unit.conv1().weight(), {}, {1, 1, 1, 1});
    t = testing::naive_conv2d(wrap(s, naive_relu(naive_bn(t, s))), unit.conv2().weight(), {}, {1, 1, 1, 1});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += t[i];
  }
  ASSERT_EQ(got.numel(), x.size());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(got.data()[i], x[i], 1e-12);
  EXPECT_THROW((void)update(f, random_tensor<D>(rng, {2, c, 2, 4}, 1.0, false), {}), Error);
}

class ConvGruTest : public ::testing::Test {
 protected:
  void zero_all() {
    for (auto* conv : {&gru.W_z(), &gru.W_r(), &gru.W(), &gru.U_z(), &gru.U_r(), &gru.U()}) {
      fill(conv->weight(), 0.0);
      if (conv->bias().defined()) fill(conv->bias(), 0.0);
    }
  }

  ParameterStore<D> store{9};
  ConvGruUpdate<D> gru{store, 4};
  std::mt19937_64 rng{10};
};

TEST_F(ConvGruTest, ZeroKernelsHalveMemory) {
  zero_all();
  const auto f = random_tensor<D>(rng, {1, 4, 3, 8}, 1.0, false);
  const auto h = random_tensor<D>(rng, {1, 4, 3, 8}, 1.0, false);
  const auto t = gru.trace(f, h);
  for (std::size_t i = 0; i < h.numel(); ++i) {
    EXPECT_EQ(t.update_gate.data()[i], 0.5);
    EXPECT_EQ(t.candidate.data()[i], 0.0);
    EXPECT_EQ(t.memory.data()[i], 0.5 * h.data()[i]);
  }
}

TEST_F(ConvGruTest, SaturatedGateSelectsInput) {
  zero_all();
  const auto f = random_tensor<D>(rng, {1, 4, 3, 8}, 1.0, false);
  const auto h = random_tensor<D>(rng, {1, 4, 3, 8}, 1.0, false);
  fill(gru.W_z().bias(), -40.0);
  const auto keep = gru.trace(f, h);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(keep.memory.data()[i], h.data()[i], 1e-12);
  fill(gru.W_z().bias(), 40.0);
  fill(gru.W().bias(), 0.3);
  const auto take = gru.trace(f, h);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(take.memory.data()[i], std::tanh(0.3), 1e-12);
}

TEST_F(ConvGruTest, GatesBoundedAndMemoryConvex) {
  const Shape s{1, 4, 10, 25};
  const auto f = random_tensor<D>(rng, s, 3.0, false);
  const auto h = random_tensor<D>(rng, s, 3.0, false);
  const auto t = gru.trace(f, h);
  for (std::size_t i = 0; i < h.numel(); ++i) {
    const double z = t.update_gate.data()[i];
    const double r = t.reset_gate.data()[i];
    const double cand = t.candidate.data()[i];
    EXPECT_TRUE(z >= 0.0 && z <= 1.0);
    EXPECT_TRUE(r >= 0.0 && r <= 1.0);
    EXPECT_LE(std::abs(cand), 1.0);
    const double lo = std::min(h.data()[i], cand);
    const double hi = std::max(h.data()[i], cand);
    EXPECT_GE(t.memory.data()[i], lo - 1e-12);
    EXPECT_LE(t.memory.data()[i], hi + 1e-12);
  }
}

TEST(MemoryUpdateKindTest, Parse) {
  EXPECT_EQ(parse_memory_update("none"), MemoryUpdateKind::none);
  EXPECT_EQ(parse_memory_update("residual"), MemoryUpdateKind::residual);
  EXPECT_EQ(parse_memory_update("gru"), MemoryUpdateKind::conv_gru);
  EXPECT_EQ(to_string(MemoryUpdateKind::conv_gru), "gru");
  EXPECT_THROW((void)parse_memory_update("lstm"), Error);
}

class RecurrentStepTest : public ::testing::Test {
 protected:
  RecurrentStepTest() : sensor(testing::toy_sensor(8, 64)) {
    std::mt19937_64 rng(11);
    cloud = testing::random_cloud(rng, 600, sensor);
    image = build_range_image(cloud, sensor, ProjectionMode::adaptive);
  }

  FrameInput frame(std::int64_t index, RigidTransform pose = {}) const {
    FrameInput f;
    f.points = &cloud;
    f.image = &image;
    f.pose = pose;
    f.index = index;
    return f;
  }

  SensorModel sensor;
  PointCloud cloud;
  RangeImage image;
};

TEST_F(RecurrentStepTest, FirstFrameUsesZeroMemory) {
  Model<D> model(tiny_config(), 12);
  ModelState<D> state;
  const auto out = model.recurrent_step(state, {frame(0)}, {}, {}, &sensor);
  for (D v : out.aligned.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(out.logits.shape(), (Shape{1, 4, 8, 64}));
  EXPECT_EQ(state.memory.shape(), (Shape{1, 8, 8, 64}));
  EXPECT_EQ(state.frame, 1);
}

TEST_F(RecurrentStepTest, StaticFrameWarpsMemoryOntoItself) {
  Model<D> model(tiny_config(), 13);
  ModelState<D> state;
  (void)model.recurrent_step(state, {frame(0)}, {}, {}, &sensor);
  const auto prev = state.memory;
  const auto out = model.recurrent_step(state, {frame(1)}, {}, {}, &sensor);
  const auto plane = image.pixel_to_point.size();
  for (std::size_t p = 0; p < plane; ++p) {
    const bool occupied = image.pixel_to_point[p] >= 0;
    EXPECT_EQ(state.valid[0][p], occupied ? 1 : 0);
    for (int c = 0; c < 8; ++c) {
      const double expect = occupied ? prev.data()[c * plane + p] : 0.0;
      EXPECT_EQ(out.aligned.data()[c * plane + p], expect);
    }
  }
}

TEST_F(RecurrentStepTest, AblationSwitches) {
  Model<D> model(tiny_config(), 14);
  ModelState<D> state;
  (void)model.recurrent_step(state, {frame(0)}, {}, {}, &sensor);
  const auto prev = state.memory;
  const auto pass = model.recurrent_step(state, {frame(1, RigidTransform::from_yaw(0.3))}, {}, {false, false}, &sensor);
  for (std::size_t i = 0; i < prev.numel(); ++i) EXPECT_EQ(pass.aligned.data()[i], prev.data()[i]);
  const auto empty = model.recurrent_step(state, {frame(2)}, {}, {true, true}, &sensor);
  for (D v : empty.aligned.data()) EXPECT_EQ(v, 0.0);
}

TEST_F(RecurrentStepTest, OrderAndBatchChecks) {
  Model<D> model(tiny_config(), 15);
  ModelState<D> state;
  (void)model.recurrent_step(state, {frame(0)}, {}, {}, &sensor);
  try {
    (void)model.recurrent_step(state, {frame(2)}, {}, {}, &sensor);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::sequence);
  }
  EXPECT_THROW((void)model.recurrent_step(state, {frame(1), frame(1)}, {}, {}, &sensor), Error);
  EXPECT_THROW((void)model.recurrent_step(state, {frame(1)}, {}, {}, nullptr), Error);
  EXPECT_THROW((void)model.recurrent_step(state, {}, {}, {}, &sensor), Error);
}

TEST_F(RecurrentStepTest, SingleFrameModelIgnoresHistory) {
  Model<D> model(tiny_config(MemoryUpdateKind::none), 16);
  ModelState<D> a, b;
  (void)model.recurrent_step(a, {frame(0)}, {false}, {}, &sensor);
  const auto second = model.recurrent_step(a, {frame(1)}, {false}, {}, &sensor);
  const auto fresh = model.recurrent_step(b, {frame(0)}, {false}, {}, &sensor);
  for (std::size_t i = 0; i < fresh.logits.numel(); ++i) EXPECT_EQ(second.logits.data()[i], fresh.logits.data()[i]);
}

TEST_F(RecurrentStepTest, ClassifySumsToOne) {
  Model<D> model(tiny_config(MemoryUpdateKind::conv_gru), 17);
  ModelState<D> state;
  (void)model.recurrent_step(state, {frame(0)}, {}, {}, &sensor);
  const auto p = model.classify(state.memory);
  const auto plane = p.shape().plane();
  for (std::size_t k = 0; k < plane; ++k) {
    double s = 0.0;
    for (int c = 0; c < 4; ++c) s += p.data()[c * plane + k];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST_F(RecurrentStepTest, SeedDeterminesOutput) {
  Model<D> a(tiny_config(), 21), b(tiny_config(), 21), c(tiny_config(), 22);
  ModelState<D> sa, sb, sc;
  const auto oa = a.recurrent_step(sa, {frame(0)}, {false}, {}, &sensor);
  const auto ob = b.recurrent_step(sb, {frame(0)}, {false}, {}, &sensor);
  const auto oc = c.recurrent_step(sc, {frame(0)}, {false}, {}, &sensor);
  bool differs = false;
  for (std::size_t i = 0; i < oa.logits.numel(); ++i) {
    EXPECT_EQ(oa.logits.data()[i], ob.logits.data()[i]);
    differs = differs || oa.logits.data()[i] != oc.logits.data()[i];
  }
  EXPECT_TRUE(differs);
}

TEST_F(RecurrentStepTest, CheckpointRoundTripAndMismatch) {
  Model<D> a(tiny_config(), 23), b(tiny_config(), 24);
  Checkpoint ck;
  a.parameters().save_to(ck);
  b.parameters().load_from(ck);
  ModelState<D> sa, sb;
  const auto oa = a.recurrent_step(sa, {frame(0)}, {false}, {}, &sensor);
  const auto ob = b.recurrent_step(sb, {frame(0)}, {false}, {}, &sensor);
  for (std::size_t i = 0; i < oa.logits.numel(); ++i) EXPECT_EQ(oa.logits.data()[i], ob.logits.data()[i]);

  auto wider = tiny_config();
  wider.backbone.widths = {4, 4, 16};
  Model<D> c(wider, 25);
  try {
    c.parameters().load_from(ck);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
    EXPECT_NE(std::string(e.what()).find("backbone.extract3.unit0"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace tlseg
