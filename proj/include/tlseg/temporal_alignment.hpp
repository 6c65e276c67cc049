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

#ifndef TLSEG_TEMPORAL_ALIGNMENT_HPP
#define TLSEG_TEMPORAL_ALIGNMENT_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tlseg/binary_io.hpp"
#include "tlseg/common.hpp"
#include "tlseg/sensor_geometry.hpp"

/**
 * \file
 * \brief Temporal memory alignment.
 *
 * The memory of the previous frame is re-expressed in the current frame's pixel
 * grid: the previous points are moved by the relative ego motion, re-projected,
 * and every memory feature vector follows its point to the new pixel.
 */

namespace tlseg {

/// Homogeneous 4x4 rigid-body transform (sensor pose).
class RigidTransform {
 public:
  inline static constexpr double kTolerance = 1e-9;

  RigidTransform() : matrix_(Eigen::Matrix4d::Identity()) {}

  /// Throws `invalid_pose` unless the rotation block is orthonormal with det +1
  /// and the bottom row is [0 0 0 1].
  explicit RigidTransform(const Eigen::Matrix4d& matrix) : matrix_(matrix) {
    const Eigen::Matrix3d r = matrix_.topLeftCorner<3, 3>();
    const bool finite = matrix_.allFinite();
    const bool bottom = matrix_(3, 0) == 0.0 && matrix_(3, 1) == 0.0 && matrix_(3, 2) == 0.0 && matrix_(3, 3) == 1.0;
    if (!finite || !bottom ||
        ((r * r.transpose()) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > kTolerance ||
        std::abs(r.determinant() - 1.0) > kTolerance) {
      throw Error(ErrorKind::invalid_pose, "matrix is not a proper rigid transform");
    }
  }

  [[nodiscard]] static RigidTransform translation(double x, double y, double z) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m(0, 3) = x;
    m(1, 3) = y;
    m(2, 3) = z;
    return RigidTransform(m);
  }

  /// Rotation about +z by `yaw` radians followed by a translation.
  [[nodiscard]] static RigidTransform from_yaw(double yaw, double x = 0.0, double y = 0.0, double z = 0.0) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    m(0, 3) = x;
    m(1, 3) = y;
    m(2, 3) = z;
    return RigidTransform(m);
  }

  [[nodiscard]] const Eigen::Matrix4d& matrix() const noexcept { return matrix_; }
  [[nodiscard]] Eigen::Matrix3d rotation() const { return matrix_.topLeftCorner<3, 3>(); }
  [[nodiscard]] Eigen::Vector3d translation() const { return matrix_.topRightCorner<3, 1>(); }

  [[nodiscard]] RigidTransform inverse() const {
    Eigen::Matrix4d inv = Eigen::Matrix4d::Identity();
    const Eigen::Matrix3d rt = rotation().transpose();
    inv.topLeftCorner<3, 3>() = rt;
    inv.topRightCorner<3, 1>() = -rt * translation();
    return RigidTransform(inv);
  }

  [[nodiscard]] RigidTransform operator*(const RigidTransform& rhs) const {
    Eigen::Matrix4d m = matrix_ * rhs.matrix_;
    m.row(3) << 0.0, 0.0, 0.0, 1.0;
    return RigidTransform(m);
  }

  [[nodiscard]] Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return rotation() * p + translation();
  }

 private:
  Eigen::Matrix4d matrix_;
};

/// Motion that carries points of the previous sensor frame into the current one: `T_curr^-1 * T_prev`.
[[nodiscard]] inline RigidTransform relative_transform(const RigidTransform& prev, const RigidTransform& curr) {
  return curr.inverse() * prev;
}

namespace detail {

inline Point transform_point(const Eigen::Matrix4d& m, const Point& p) {
  const Eigen::Vector4d h = m * Eigen::Vector4d(p.x, p.y, p.z, 1.0);
  return {h.x(), h.y(), h.z(), p.remission};
}

}  // namespace detail

/// Maps every point through `rel` in homogeneous coordinates. Remission is kept.
[[nodiscard]] inline PointCloud transform_points(const PointCloud& pc, const RigidTransform& rel) {
  std::vector<Point> out;
  out.reserve(pc.size());
  for (const Point& p : pc) {
    out.push_back(detail::transform_point(rel.matrix(), p));
  }
  return PointCloud(std::move(out));
}

/// Destination of one retained source pixel.
struct WarpEntry {
  int src_u = 0;
  int src_v = 0;
  int dst_u = -1;  ///< -1 when out of the field of view
  int dst_v = -1;
  double range = 0.0;  ///< range of the transformed point

  [[nodiscard]] bool in_fov() const noexcept { return dst_u >= 0; }
  friend bool operator==(const WarpEntry&, const WarpEntry&) = default;
};

struct WarpMap {
  int height = 0;
  int width = 0;
  std::vector<WarpEntry> entries;  ///< raster order of the source pixels
  std::size_t dropped = 0;         ///< transformed points that landed on the sensor origin
  std::size_t out_of_fov = 0;
};

/// Computes where each retained pixel of the previous image lands in the current frame.
///
/// `prev_image` must have been built from `prev` with `mode`. Elevations outside
/// the field of view are marked rather than clamped.
[[nodiscard]] inline WarpMap compute_warp_map(const PointCloud& prev, const RangeImage& prev_image,
                                              const RigidTransform& rel, const SensorModel& m, ProjectionMode mode) {
  if (prev_image.height != m.height() || prev_image.width != m.width()) {
    throw Error(ErrorKind::shape, "range image does not match sensor model");
  }
  if (prev_image.point_to_pixel.size() != prev.size()) {
    throw Error(ErrorKind::shape, "pixel map does not cover the point cloud");
  }
  WarpMap wm;
  wm.height = m.height();
  wm.width = m.width();
  for (int u = 0; u < m.height(); ++u) {
    for (int v = 0; v < m.width(); ++v) {
      const std::int32_t idx = prev_image.pixel_to_point[prev_image.pixel_index(u, v)];
      if (idx < 0) continue;
      if (static_cast<std::size_t>(idx) >= prev.size()) {
        throw Error(ErrorKind::shape, "pixel map references a point outside the cloud");
      }
      const Point q = detail::transform_point(rel.matrix(), prev[static_cast<std::size_t>(idx)]);
      if (q.x == 0.0 && q.y == 0.0 && q.z == 0.0) {
        ++wm.dropped;
        continue;
      }
      const SphericalCoords s = cartesian_to_spherical(q.x, q.y, q.z);
      WarpEntry e{u, v, -1, -1, s.r};
      if (const auto px = project_in_fov(s, m, mode)) {
        e.dst_u = px->u;
        e.dst_v = px->v;
      } else {
        ++wm.out_of_fov;
      }
      wm.entries.push_back(e);
    }
  }
  return wm;
}

/// For every destination pixel the source pixel it copies from, or -1.
/// Collisions go to the entry with the smallest transformed range.
[[nodiscard]] inline std::vector<std::int32_t> warp_source_index(const WarpMap& wm) {
  const std::size_t pixels = static_cast<std::size_t>(wm.height) * static_cast<std::size_t>(wm.width);
  std::vector<std::int32_t> source(pixels, -1);
  std::vector<double> best(pixels, std::numeric_limits<double>::infinity());
  for (const WarpEntry& e : wm.entries) {
    if (!e.in_fov()) continue;
    const std::size_t dst = static_cast<std::size_t>(e.dst_u) * wm.width + static_cast<std::size_t>(e.dst_v);
    if (e.range < best[dst]) {
      best[dst] = e.range;
      source[dst] = static_cast<std::int32_t>(e.src_u * wm.width + e.src_v);
    }
  }
  return source;
}

/// c x h x w feature grid carried across frames.
template <typename Scalar>
struct TemporalMemory {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<Scalar> features;     ///< [channel][u][v]
  std::vector<std::uint8_t> valid;  ///< [u][v]

  TemporalMemory() = default;
  TemporalMemory(int c, int h, int w)
      : channels(c), height(h), width(w),
        features(static_cast<std::size_t>(c) * h * w, Scalar{0}),
        valid(static_cast<std::size_t>(h) * w, 0) {}

  [[nodiscard]] std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }
  [[nodiscard]] Scalar at(int c, int u, int v) const noexcept {
    return features[static_cast<std::size_t>(c) * plane() + static_cast<std::size_t>(u) * width + v];
  }
  Scalar& at(int c, int u, int v) noexcept {
    return features[static_cast<std::size_t>(c) * plane() + static_cast<std::size_t>(u) * width + v];
  }
};

/// Rearranges the memory along the warp map. Unassigned pixels are zero and invalid.
template <typename Scalar>
[[nodiscard]] TemporalMemory<Scalar> warp_memory(const TemporalMemory<Scalar>& prev, const WarpMap& wm) {
  if (prev.height != wm.height || prev.width != wm.width ||
      prev.features.size() != static_cast<std::size_t>(prev.channels) * prev.plane()) {
    throw Error(ErrorKind::shape, "memory dimensions do not match the warp map");
  }
  TemporalMemory<Scalar> out(prev.channels, prev.height, prev.width);
  const auto source = warp_source_index(wm);
  const std::size_t plane = prev.plane();
  for (std::size_t dst = 0; dst < plane; ++dst) {
    const std::int32_t src = source[dst];
    if (src < 0) continue;
    out.valid[dst] = 1;
    for (int c = 0; c < prev.channels; ++c) {
      out.features[c * plane + dst] = prev.features[c * plane + static_cast<std::size_t>(src)];
    }
  }
  return out;
}

/// Full alignment of the previous memory into the current frame.
template <typename Scalar>
[[nodiscard]] TemporalMemory<Scalar> align(const TemporalMemory<Scalar>& prev_memory, const PointCloud& prev_points,
                                           const RangeImage& prev_image, const RigidTransform& prev_pose,
                                           const RigidTransform& curr_pose, const SensorModel& m,
                                           ProjectionMode mode) {
  const RigidTransform rel = relative_transform(prev_pose, curr_pose);
  return warp_memory(prev_memory, compute_warp_map(prev_points, prev_image, rel, m, mode));
}

inline constexpr std::string_view kWarpMagic = "TLSGWARP";
inline constexpr std::uint32_t kWarpFormatVersion = 1;

/// Little-endian table: magic, version u32, h u32, w u32, count u64, then per entry
/// i32 u, i32 v, i32 u~, i32 v~ (-1 when out of view), f64 r~.
[[nodiscard]] inline std::vector<std::uint8_t> encode_warp_map(const WarpMap& wm) {
  std::vector<std::uint8_t> out;
  binary::put_bytes(out, kWarpMagic);
  binary::put<std::uint32_t>(out, kWarpFormatVersion);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(wm.height));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(wm.width));
  binary::put<std::uint64_t>(out, wm.entries.size());
  for (const WarpEntry& e : wm.entries) {
    binary::put<std::int32_t>(out, e.src_u);
    binary::put<std::int32_t>(out, e.src_v);
    binary::put<std::int32_t>(out, e.dst_u);
    binary::put<std::int32_t>(out, e.dst_v);
    binary::put<double>(out, e.range);
  }
  return out;
}

[[nodiscard]] inline WarpMap decode_warp_map(const std::vector<std::uint8_t>& bytes) {
  binary::Reader in(bytes);
  if (in.get_bytes(kWarpMagic.size()) != kWarpMagic) {
    throw Error(ErrorKind::format, "not a warp map table");
  }
  if (const auto version = in.get<std::uint32_t>(); version != kWarpFormatVersion) {
    throw Error(ErrorKind::format, "unsupported warp map version " + std::to_string(version));
  }
  WarpMap wm;
  wm.height = static_cast<int>(in.get<std::uint32_t>());
  wm.width = static_cast<int>(in.get<std::uint32_t>());
  const auto count = in.get<std::uint64_t>();
  if (count > in.remaining() / 24) {
    throw Error(ErrorKind::format, "warp map entry count exceeds file size");
  }
  wm.entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    WarpEntry e;
    e.src_u = in.get<std::int32_t>();
    e.src_v = in.get<std::int32_t>();
    e.dst_u = in.get<std::int32_t>();
    e.dst_v = in.get<std::int32_t>();
    e.range = in.get<double>();
    wm.out_of_fov += e.in_fov() ? 0U : 1U;
    wm.entries.push_back(e);
  }
  if (in.remaining() != 0) {
    throw Error(ErrorKind::format, "trailing bytes after warp map at offset " + std::to_string(in.offset()));
  }
  return wm;
}

}  // namespace tlseg

#endif  // TLSEG_TEMPORAL_ALIGNMENT_HPP
