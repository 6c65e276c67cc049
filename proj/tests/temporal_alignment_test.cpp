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
#include "tlseg/temporal_alignment.hpp"

namespace tlseg {
namespace {

using testing::random_cloud;
using testing::random_transform;
using testing::toy_sensor;

// Independent re-projection of one transformed point. Returns (-1, -1) when out of view.
std::pair<int, int> oracle_target(const Eigen::Matrix4d& rel, const Point& p, const SensorModel& m, ProjectionMode mode) {
  double q[3];
  for (int i = 0; i < 3; ++i) q[i] = rel(i, 0) * p.x + rel(i, 1) * p.y + rel(i, 2) * p.z + rel(i, 3);
  const double r = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
  const double theta = std::asin(q[2] / r);
  double phi = -std::atan2(q[1], q[0]);
  if (phi <= -kPi) phi += 2 * kPi;
  const int v = static_cast<int>(((static_cast<long long>(std::floor(0.5 * (1 - phi / kPi) * m.width())) % m.width()) +
                                  m.width()) % m.width());
  if (mode == ProjectionMode::simple) {
    const double raw = std::floor((1 - (theta - m.fov_down()) / m.fov()) * m.height());
    if (raw < 0 || raw >= m.height()) return {-1, -1};
    return {static_cast<int>(raw), v};
  }
  const auto rows = m.row_elevations();
  const int h = m.height();
  int best = 0;
  for (int l = 1; l < h; ++l) {
    if (std::abs(rows[l] - theta) < std::abs(rows[best] - theta)) best = l;
  }
  double gap;
  if (best == 0) {
    gap = rows[0] - rows[1];
  } else if (best == h - 1) {
    gap = rows[h - 2] - rows[h - 1];
  } else {
    gap = theta >= rows[best] ? rows[best - 1] - rows[best] : rows[best] - rows[best + 1];
  }
  if (std::abs(theta - rows[best]) > 1.5 * gap) return {-1, -1};
  return {best, v};
}

TemporalMemory<double> random_memory(std::mt19937_64& rng, int c, int h, int w) {
  TemporalMemory<double> mem(c, h, w);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : mem.features) v = dist(rng);
  return mem;
}

TEST(RigidTransformTest, RejectsInvalidMatrices) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m(0, 0) = 2.0;
  try {
    (void)RigidTransform(m);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_pose);
  }
  Eigen::Matrix4d reflect = Eigen::Matrix4d::Identity();
  reflect(1, 1) = -1.0;
  EXPECT_THROW((void)RigidTransform(reflect), Error);
  Eigen::Matrix4d bottom = Eigen::Matrix4d::Identity();
  bottom(3, 0) = 1.0;
  EXPECT_THROW((void)RigidTransform(bottom), Error);
}

TEST(RelativeTransformTest, Examples) {
  EXPECT_TRUE(relative_transform(RigidTransform(), RigidTransform()).matrix().isIdentity(0.0));
  const auto rel = relative_transform(RigidTransform::translation(1, 0, 0), RigidTransform());
  EXPECT_TRUE(rel.matrix().isApprox(RigidTransform::translation(1, 0, 0).matrix(), 0.0));
}

TEST(RelativeTransformTest, MatchesDenseProduct) {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 100; ++i) {
    const auto prev = random_transform(rng, kPi, 20.0);
    const auto curr = random_transform(rng, kPi, 20.0);
    const Eigen::Matrix4d inv = curr.matrix().inverse();  // general LU inverse
    double expect[4][4] = {};
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) {
        for (int k = 0; k < 4; ++k) expect[r][c] += inv(r, k) * prev.matrix()(k, c);
      }
    }
    const auto got = relative_transform(prev, curr).matrix();
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) EXPECT_NEAR(got(r, c), expect[r][c], 1e-12 * (1.0 + std::abs(expect[r][c])));
    }
  }
}

TEST(TransformPointsTest, Examples) {
  const PointCloud pc({{2.0, 0.0, 0.0, 0.3}, {1.0, 2.0, 3.0, 0.7}});
  const auto same = transform_points(pc, RigidTransform());
  EXPECT_EQ(same[1].x, 1.0);
  EXPECT_EQ(same[1].y, 2.0);
  EXPECT_EQ(same[1].z, 3.0);

  const auto moved = transform_points(pc, RigidTransform::translation(1, 0, 0));
  EXPECT_EQ(moved[0].x, 3.0);
  EXPECT_EQ(moved[0].remission, 0.3);

  const auto turned = transform_points(PointCloud({{1.0, 0.0, 0.0, 0.0}}), RigidTransform::from_yaw(kPi / 2));
  EXPECT_NEAR(turned[0].x, 0.0, 1e-15);
  EXPECT_NEAR(turned[0].y, 1.0, 1e-15);
}

TEST(WarpMapTest, IdentityMapsEveryPixelToItself) {
  const auto m = toy_sensor();
  std::mt19937_64 rng(2);
  for (auto mode : {ProjectionMode::simple, ProjectionMode::adaptive}) {
    const auto pc = random_cloud(rng, 1500, m);
    const auto ri = build_range_image(pc, m, mode);
    const auto wm = compute_warp_map(pc, ri, RigidTransform(), m, mode);
    std::size_t occupied = 0;
    for (auto idx : ri.pixel_to_point) occupied += idx >= 0;
    ASSERT_EQ(wm.entries.size(), occupied);
    for (const auto& e : wm.entries) {
      EXPECT_EQ(e.dst_u, e.src_u);
      EXPECT_EQ(e.dst_v, e.src_v);
    }
  }
}

TEST(WarpMapTest, PureYawShiftsColumns) {
  const auto m = toy_sensor(16, 128);
  const auto pc = testing::ideal_scan(m, 12.0);
  const auto ri = build_range_image(pc, m, ProjectionMode::adaptive);
  for (int k : {1, 5, -3, 64}) {
    const auto curr = RigidTransform::from_yaw(2.0 * kPi / m.width() * k);
    const auto wm = compute_warp_map(pc, ri, relative_transform(RigidTransform(), curr), m, ProjectionMode::adaptive);
    for (const auto& e : wm.entries) {
      ASSERT_EQ(e.dst_u, e.src_u);
      ASSERT_EQ(e.dst_v, wrap_index(e.src_v - k, m.width()));
      const auto [ou, ov] = oracle_target(relative_transform(RigidTransform(), curr).matrix(),
                                          pc[static_cast<std::size_t>(ri.pixel_to_point[ri.pixel_index(e.src_u, e.src_v)])],
                                          m, ProjectionMode::adaptive);
      ASSERT_EQ(ou, e.dst_u);
      ASSERT_EQ(ov, e.dst_v);
    }
  }
}

TEST(WarpMapTest, PointPassedByEgoFlipsBehind) {
  const auto m = toy_sensor();
  const PointCloud pc({{2.0, 0.5, -0.3, 0.5}});
  const auto ri = build_range_image(pc, m, ProjectionMode::adaptive);
  const auto rel = relative_transform(RigidTransform(), RigidTransform::translation(5.0, 0.0, 0.0));
  const auto wm = compute_warp_map(pc, ri, rel, m, ProjectionMode::adaptive);
  ASSERT_EQ(wm.entries.size(), 1U);
  const auto [ou, ov] = oracle_target(rel.matrix(), pc[0], m, ProjectionMode::adaptive);
  EXPECT_EQ(wm.entries[0].dst_u, ou);
  EXPECT_EQ(wm.entries[0].dst_v, ov);
  // Now behind the sensor: azimuth near pi, i.e. a column at the image edge.
  EXPECT_TRUE(ov < 8 || ov >= m.width() - 8);
  EXPECT_NEAR(wm.entries[0].range, std::sqrt(9.0 + 0.25 + 0.09), 1e-12);
}

TEST(WarpMapTest, OutOfViewIsMarked) {
  const auto m = toy_sensor();
  const PointCloud pc({{10.0, 0.0, -1.0, 0.5}});
  const auto ri = build_range_image(pc, m, ProjectionMode::simple);
  // Pitch the sensor so the point ends up far above the field of view.
  Eigen::Matrix4d pitch = Eigen::Matrix4d::Identity();
  pitch.topLeftCorner<3, 3>() = Eigen::AngleAxisd(-0.8, Eigen::Vector3d::UnitY()).toRotationMatrix();
  const auto wm = compute_warp_map(pc, ri, RigidTransform(pitch), m, ProjectionMode::simple);
  ASSERT_EQ(wm.entries.size(), 1U);
  EXPECT_FALSE(wm.entries[0].in_fov());
  EXPECT_EQ(wm.out_of_fov, 1U);
  for (auto s : warp_source_index(wm)) EXPECT_EQ(s, -1);
}

TEST(WarpMapTest, PointOnOriginIsDropped) {
  const auto m = toy_sensor();
  const PointCloud pc({{3.0, 0.0, -0.2, 0.5}, {5.0, 1.0, -0.3, 0.5}});
  const auto ri = build_range_image(pc, m, ProjectionMode::adaptive);
  const auto wm = compute_warp_map(pc, ri, RigidTransform::translation(-3.0, 0.0, 0.2), m, ProjectionMode::adaptive);
  EXPECT_EQ(wm.dropped, 1U);
  EXPECT_EQ(wm.entries.size(), 1U);
}

TEST(WarpMapTest, RandomizedOracleEquivalence) {
  std::mt19937_64 rng(99);
  const auto m = testing::dense_band_sensor(512);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mode = trial % 2 ? ProjectionMode::simple : ProjectionMode::adaptive;
    const auto pc = random_cloud(rng, 2000, m);
    const auto ri = build_range_image(pc, m, mode);
    const auto rel = random_transform(rng, 0.3, 3.0);
    const auto wm = compute_warp_map(pc, ri, rel, m, mode);
    for (const auto& e : wm.entries) {
      const auto idx = static_cast<std::size_t>(ri.pixel_to_point[ri.pixel_index(e.src_u, e.src_v)]);
      const auto [ou, ov] = oracle_target(rel.matrix(), pc[idx], m, mode);
      ASSERT_EQ(e.dst_u, ou);
      ASSERT_EQ(e.dst_v, ov);
    }
  }
}

TEST(WarpMemoryTest, IdentityKeepsOccupiedPixels) {
  const auto m = toy_sensor();
  std::mt19937_64 rng(4);
  const auto pc = random_cloud(rng, 800, m);
  const auto ri = build_range_image(pc, m, ProjectionMode::adaptive);
  const auto mem = random_memory(rng, 3, m.height(), m.width());
  const auto out = align(mem, pc, ri, RigidTransform::from_yaw(0.2, 1, 2, 0), RigidTransform::from_yaw(0.2, 1, 2, 0), m,
                         ProjectionMode::adaptive);
  for (int u = 0; u < m.height(); ++u) {
    for (int v = 0; v < m.width(); ++v) {
      const bool occ = ri.occupied(u, v);
      EXPECT_EQ(out.valid[ri.pixel_index(u, v)], occ ? 1 : 0);
      for (int c = 0; c < 3; ++c) EXPECT_EQ(out.at(c, u, v), occ ? mem.at(c, u, v) : 0.0);
    }
  }
}

TEST(WarpMemoryTest, CollisionKeepsNearestSource) {
  WarpMap wm;
  wm.height = 2;
  wm.width = 4;
  wm.entries = {{0, 0, 1, 2, 9.0}, {0, 1, 1, 2, 4.0}, {1, 3, -1, -1, 2.0}};
  TemporalMemory<double> mem(2, 2, 4);
  for (std::size_t i = 0; i < mem.features.size(); ++i) mem.features[i] = static_cast<double>(i + 1);
  const auto out = warp_memory(mem, wm);
  for (int c = 0; c < 2; ++c) EXPECT_EQ(out.at(c, 1, 2), mem.at(c, 0, 1));
  // Former target of the out-of-view entry and every other pixel stay zero.
  for (int u = 0; u < 2; ++u) {
    for (int v = 0; v < 4; ++v) {
      if (u == 1 && v == 2) continue;
      EXPECT_EQ(out.valid[static_cast<std::size_t>(u * 4 + v)], 0);
      for (int c = 0; c < 2; ++c) EXPECT_EQ(out.at(c, u, v), 0.0);
    }
  }
}

TEST(WarpMemoryTest, CollisionRuleMatchesDefinitionalOracle) {
  std::mt19937_64 rng(8);
  const auto m = toy_sensor();
  for (int trial = 0; trial < 10; ++trial) {
    const auto pc = random_cloud(rng, 2000, m);
    const auto ri = build_range_image(pc, m, ProjectionMode::adaptive);
    const auto wm = compute_warp_map(pc, ri, random_transform(rng, 0.5, 4.0), m, ProjectionMode::adaptive);
    const auto mem = random_memory(rng, 2, m.height(), m.width());
    const auto out = warp_memory(mem, wm);
    for (int u = 0; u < m.height(); ++u) {
      for (int v = 0; v < m.width(); ++v) {
        const WarpEntry* best = nullptr;
        for (const auto& e : wm.entries) {
          if (e.dst_u == u && e.dst_v == v && (!best || e.range < best->range)) best = &e;
        }
        for (int c = 0; c < 2; ++c) {
          ASSERT_EQ(out.at(c, u, v), best ? mem.at(c, best->src_u, best->src_v) : 0.0);
        }
      }
    }
  }
}

TEST(WarpMemoryTest, FeaturesAreNeverBlended) {
  std::mt19937_64 rng(12);
  const auto m = toy_sensor();
  const auto pc = random_cloud(rng, 2000, m);
  const auto ri = build_range_image(pc, m, ProjectionMode::simple);
  const auto mem = random_memory(rng, 4, m.height(), m.width());
  const auto out = align(mem, pc, ri, RigidTransform(), random_transform(rng, 0.4, 2.0), m, ProjectionMode::simple);
  for (std::size_t k = 0; k < out.plane(); ++k) {
    bool zero = true;
    for (int c = 0; c < 4; ++c) zero = zero && out.features[c * out.plane() + k] == 0.0;
    if (zero) continue;
    bool found = false;
    for (std::size_t j = 0; j < mem.plane() && !found; ++j) {
      bool same = true;
      for (int c = 0; c < 4; ++c) same = same && mem.features[c * mem.plane() + j] == out.features[c * out.plane() + k];
      found = same;
    }
    EXPECT_TRUE(found) << k;
  }
}

TEST(WarpMemoryTest, ShapeMismatch) {
  WarpMap wm;
  wm.height = 4;
  wm.width = 8;
  TemporalMemory<double> mem(1, 4, 16);
  try {
    (void)warp_memory(mem, wm);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
  }
}

TEST(AlignTest, StaticSceneOccupancyOverlap) {
  SyntheticSceneSpec spec;
  spec.frames = 6;
  spec.trajectory = SyntheticSceneSpec::straight_trajectory(6, {0, 0, 0}, 0.0, 0.8, deg_to_rad(2.0));
  spec.boxes.push_back({{12, 4, -0.9}, {2, 2, 1.6}, 0.3, {0, 0, 0}, 2, 0.6});
  spec.boxes.push_back({{16, -5, -0.9}, {3, 1.5, 1.6}, 0.0, {0, 0, 0}, 3, 0.3});
  spec.max_range = 60.0;
  const auto frames = generate_synthetic(spec, 1);
  const auto& m = spec.sensor;
  for (int t = 1; t < spec.frames; ++t) {
    const auto prev = build_range_image(frames[t - 1].cloud, m, ProjectionMode::adaptive);
    const auto curr = build_range_image(frames[t].cloud, m, ProjectionMode::adaptive);
    const auto source = warp_source_index(
        compute_warp_map(frames[t - 1].cloud, prev, relative_transform(frames[t - 1].pose, frames[t].pose), m,
                         ProjectionMode::adaptive));
    std::size_t warped = 0, overlap = 0;
    for (std::size_t k = 0; k < source.size(); ++k) {
      if (source[k] < 0) continue;
      ++warped;
      overlap += curr.pixel_to_point[k] >= 0;
    }
    ASSERT_GT(warped, 0U);
    EXPECT_GE(static_cast<double>(overlap) / static_cast<double>(warped), 0.9);
  }
}

TEST(AlignTest, MovingObjectIsOffsetByItsDisplacement) {
  SyntheticSceneSpec spec;
  spec.frames = 2;
  spec.trajectory = {RigidTransform(), RigidTransform()};
  spec.boxes.push_back({{10.0, 0.0, 0.0}, {2.0, 20.0, 20.0}, 0.0, {1.0, 0.0, 0.0}, 4, 0.5});
  const auto frames = generate_synthetic(spec, 1);
  const auto& m = spec.sensor;
  const auto prev = build_range_image(frames[0].cloud, m, ProjectionMode::adaptive);
  const auto curr = build_range_image(frames[1].cloud, m, ProjectionMode::adaptive);
  const auto wm = compute_warp_map(frames[0].cloud, prev, RigidTransform(), m, ProjectionMode::adaptive);
  // Ray straight ahead near the horizon: the face sits at x = 9, then at x = 10.
  const int v = m.width() / 2;
  const int u = nearest_row(m.row_elevations(), 0.0);
  bool found = false;
  for (const auto& e : wm.entries) {
    if (e.dst_u != u || e.dst_v != v) continue;
    found = true;
    const double shift = curr.at(kRange, u, v) - e.range;
    EXPECT_NEAR(shift * std::cos(m.row_elevations()[u]) * std::cos(m.column_azimuth(v)), 1.0, 1e-9);
  }
  EXPECT_TRUE(found);
}

TEST(WarpTableTest, RoundTripAndRejectsTruncation) {
  std::mt19937_64 rng(6);
  const auto m = toy_sensor();
  const auto pc = random_cloud(rng, 300, m);
  const auto ri = build_range_image(pc, m, ProjectionMode::adaptive);
  const auto wm = compute_warp_map(pc, ri, random_transform(rng, 1.0, 5.0), m, ProjectionMode::adaptive);
  auto bytes = encode_warp_map(wm);
  const auto back = decode_warp_map(bytes);
  EXPECT_EQ(back.height, wm.height);
  EXPECT_EQ(back.width, wm.width);
  EXPECT_EQ(back.entries, wm.entries);
  EXPECT_EQ(back.out_of_fov, wm.out_of_fov);
  bytes.pop_back();
  EXPECT_THROW((void)decode_warp_map(bytes), Error);
}

}  // namespace
}  // namespace tlseg
