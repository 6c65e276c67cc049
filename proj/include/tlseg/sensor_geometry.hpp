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

#ifndef TLSEG_SENSOR_GEOMETRY_HPP
#define TLSEG_SENSOR_GEOMETRY_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "tlseg/common.hpp"

/**
 * \file
 * \brief Spherical projection of lidar sweeps onto range images.
 *
 * Row 0 of a range image is the highest elevation; column 0 starts at azimuth
 * +pi and columns advance clockwise (azimuth is `-atan2(y, x)`).
 */

namespace tlseg {

/// One lidar return in the sensor frame.
struct Point {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double remission = 0.0;
};

/// Ordered set of lidar returns. Every point has finite, non-zero range.
class PointCloud {
 public:
  PointCloud() = default;

  /// Validates every point; throws `degenerate_point` on zero range or non-finite values.
  explicit PointCloud(std::vector<Point> points) : points_(std::move(points)) {
    for (std::size_t i = 0; i < points_.size(); ++i) {
      validate(points_[i], i);
    }
  }

  void push_back(const Point& p) {
    validate(p, points_.size());
    points_.push_back(p);
  }

  [[nodiscard]] std::size_t size() const noexcept { return points_.size(); }
  [[nodiscard]] bool empty() const noexcept { return points_.empty(); }
  [[nodiscard]] const Point& operator[](std::size_t i) const { return points_[i]; }
  [[nodiscard]] std::span<const Point> points() const noexcept { return points_; }
  [[nodiscard]] auto begin() const noexcept { return points_.begin(); }
  [[nodiscard]] auto end() const noexcept { return points_.end(); }

 private:
  static void validate(const Point& p, std::size_t index) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) || !std::isfinite(p.remission)) {
      throw Error(ErrorKind::degenerate_point, "non-finite point at index " + std::to_string(index));
    }
    if (p.x == 0.0 && p.y == 0.0 && p.z == 0.0) {
      throw Error(ErrorKind::degenerate_point, "zero-range point at index " + std::to_string(index));
    }
  }

  std::vector<Point> points_;
};

/// Lidar intrinsics. Angles are radians.
class SensorModel {
 public:
  SensorModel(int height, int width, double fov_up, double fov_down,
              std::optional<std::vector<double>> row_elevations = std::nullopt)
      : height_(height), width_(width), fov_up_(fov_up), fov_down_(fov_down),
        row_elevations_(std::move(row_elevations)) {
    if (height_ <= 0 || width_ <= 0) {
      throw Error(ErrorKind::configuration, "image size must be positive");
    }
    if (!(fov_up_ - fov_down_ > 0.0)) {
      throw Error(ErrorKind::configuration, "field of view must be positive (fov_up > fov_down)");
    }
    if (row_elevations_) {
      if (row_elevations_->size() != static_cast<std::size_t>(height_)) {
        throw Error(ErrorKind::configuration, "row elevation table length must equal h");
      }
      for (std::size_t l = 1; l < row_elevations_->size(); ++l) {
        if (!((*row_elevations_)[l] < (*row_elevations_)[l - 1])) {
          throw Error(ErrorKind::configuration, "row elevation table must be strictly decreasing");
        }
      }
    }
  }

  /// Rows spaced uniformly over the field of view at pixel centers.
  [[nodiscard]] static SensorModel uniform(int height, int width, double fov_up, double fov_down) {
    std::vector<double> rows(static_cast<std::size_t>(height));
    const double f = fov_up - fov_down;
    for (int l = 0; l < height; ++l) {
      rows[static_cast<std::size_t>(l)] = fov_up - (l + 0.5) * f / height;
    }
    return SensorModel(height, width, fov_up, fov_down, std::move(rows));
  }

  [[nodiscard]] int height() const noexcept { return height_; }
  [[nodiscard]] int width() const noexcept { return width_; }
  [[nodiscard]] double fov_up() const noexcept { return fov_up_; }
  [[nodiscard]] double fov_down() const noexcept { return fov_down_; }
  [[nodiscard]] double fov() const noexcept { return fov_up_ - fov_down_; }
  [[nodiscard]] bool has_row_elevations() const noexcept { return row_elevations_.has_value(); }
  [[nodiscard]] std::span<const double> row_elevations() const {
    if (!row_elevations_) {
      throw Error(ErrorKind::configuration, "sensor model has no row elevation table");
    }
    return *row_elevations_;
  }

  /// Azimuth of the center of column `v`.
  [[nodiscard]] double column_azimuth(int v) const noexcept {
    return kPi * (1.0 - 2.0 * (v + 0.5) / width_);
  }

 private:
  int height_;
  int width_;
  double fov_up_;
  double fov_down_;
  std::optional<std::vector<double>> row_elevations_;
};

/// Loads a sensor model from a YAML key-value file.
///
/// Keys: `h`, `w`, `fov_up_deg`, `fov_down_deg` and optionally `row_elevations_deg`.
[[nodiscard]] inline SensorModel sensor_model_from_yaml(const YAML::Node& node) {
  try {
    const int h = node["h"].as<int>();
    const int w = node["w"].as<int>();
    const double up = deg_to_rad(node["fov_up_deg"].as<double>());
    const double down = deg_to_rad(node["fov_down_deg"].as<double>());
    std::optional<std::vector<double>> rows;
    if (node["row_elevations_deg"]) {
      rows.emplace();
      for (const auto& v : node["row_elevations_deg"]) {
        rows->push_back(deg_to_rad(v.as<double>()));
      }
    }
    return SensorModel(h, w, up, down, std::move(rows));
  } catch (const YAML::Exception& e) {
    throw Error(ErrorKind::configuration, std::string("sensor config: ") + e.what());
  }
}

[[nodiscard]] inline SensorModel load_sensor_model(const std::string& path) {
  YAML::Node node;
  try {
    node = YAML::LoadFile(path);
  } catch (const YAML::Exception& e) {
    throw Error(ErrorKind::io, "cannot read sensor config '" + path + "': " + e.what());
  }
  return sensor_model_from_yaml(node);
}

struct SphericalCoords {
  double theta = 0.0;  ///< elevation
  double phi = 0.0;    ///< azimuth in (-pi, pi]
  double r = 0.0;      ///< range
};

[[nodiscard]] inline SphericalCoords cartesian_to_spherical(double x, double y, double z) {
  const double r = std::sqrt(x * x + y * y + z * z);
  if (!(r > 0.0)) {
    throw Error(ErrorKind::degenerate_point, "zero-norm point has no spherical coordinates");
  }
  double phi = -std::atan2(y, x);
  if (phi <= -kPi) {
    phi += 2.0 * kPi;
  }
  return {std::asin(std::clamp(z / r, -1.0, 1.0)), phi, r};
}

[[nodiscard]] inline SphericalCoords cartesian_to_spherical(const Point& p) {
  return cartesian_to_spherical(p.x, p.y, p.z);
}

/// Inverse of `cartesian_to_spherical`.
[[nodiscard]] inline std::array<double, 3> spherical_to_cartesian(const SphericalCoords& s) noexcept {
  const double c = std::cos(s.theta);
  return {s.r * c * std::cos(-s.phi), s.r * c * std::sin(-s.phi), s.r * std::sin(s.theta)};
}

enum class ProjectionMode { simple, adaptive };

[[nodiscard]] inline ProjectionMode parse_projection_mode(std::string_view name) {
  if (name == "simple") return ProjectionMode::simple;
  if (name == "adaptive") return ProjectionMode::adaptive;
  throw Error(ErrorKind::validation, "unknown projection mode '" + std::string(name) + "'");
}

[[nodiscard]] inline std::string_view to_string(ProjectionMode mode) noexcept {
  return mode == ProjectionMode::simple ? "simple" : "adaptive";
}

/// Image coordinates of a projected point. `clamped` is set when the row fell
/// outside the image and was clamped to the nearest edge.
struct PixelCoord {
  int u = 0;
  int v = 0;
  bool clamped = false;

  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

/// Azimuth column; wraps modulo w.
[[nodiscard]] inline int project_column(double phi, int width) noexcept {
  const double raw = std::floor(0.5 * (1.0 - phi / kPi) * width);
  return wrap_index(static_cast<long long>(raw), width);
}

/// Unclamped row from the uniform discretization of the field of view.
[[nodiscard]] inline long long simple_row_unclamped(double theta, const SensorModel& m) noexcept {
  return static_cast<long long>(std::floor((1.0 - (theta - m.fov_down()) / m.fov()) * m.height()));
}

[[nodiscard]] inline PixelCoord project_simple(const SphericalCoords& s, const SensorModel& m) noexcept {
  const long long raw = simple_row_unclamped(s.theta, m);
  const long long u = std::clamp<long long>(raw, 0, m.height() - 1);
  return {static_cast<int>(u), project_column(s.phi, m.width()), u != raw};
}

/// Index of the row whose elevation is nearest to `theta`; ties go to the smaller index.
[[nodiscard]] inline int nearest_row(std::span<const double> rows, double theta) noexcept {
  // rows are strictly decreasing: binary search for the first row below theta.
  const auto it = std::lower_bound(rows.begin(), rows.end(), theta, [](double row, double t) { return row > t; });
  const auto idx = static_cast<int>(it - rows.begin());
  if (idx == 0) return 0;
  if (idx == static_cast<int>(rows.size())) return idx - 1;
  const double above = rows[static_cast<std::size_t>(idx - 1)] - theta;
  const double below = theta - rows[static_cast<std::size_t>(idx)];
  return below < above ? idx : idx - 1;
}

[[nodiscard]] inline PixelCoord project_adaptive(const SphericalCoords& s, const SensorModel& m) {
  const auto rows = m.row_elevations();
  const int u = nearest_row(rows, s.theta);
  const bool outside = s.theta > rows.front() || s.theta < rows.back();
  return {u, project_column(s.phi, m.width()), outside};
}

[[nodiscard]] inline PixelCoord project(const SphericalCoords& s, const SensorModel& m, ProjectionMode mode) {
  return mode == ProjectionMode::simple ? project_simple(s, m) : project_adaptive(s, m);
}

/// Row spacing used to decide whether an elevation beyond the outermost rows
/// is still inside the field of view in adaptive mode.
[[nodiscard]] inline double local_row_gap(std::span<const double> rows, int u, double theta, double fallback) noexcept {
  const auto n = static_cast<int>(rows.size());
  if (n < 2) return fallback;
  const auto at = [&](int i) { return rows[static_cast<std::size_t>(i)]; };
  if (u == 0) return at(0) - at(1);
  if (u == n - 1) return at(n - 2) - at(n - 1);
  return theta >= at(u) ? at(u - 1) - at(u) : at(u) - at(u + 1);
}

inline constexpr double kOutOfFovGapFactor = 1.5;

/// Projection without clamping: returns nothing when the elevation lies outside the field of view.
///
/// Simple mode rejects rows outside `[0, h)`. Adaptive mode rejects elevations
/// farther than 1.5 local row gaps from the nearest row.
[[nodiscard]] inline std::optional<PixelCoord> project_in_fov(const SphericalCoords& s, const SensorModel& m,
                                                              ProjectionMode mode) {
  if (mode == ProjectionMode::simple) {
    const long long raw = simple_row_unclamped(s.theta, m);
    if (raw < 0 || raw >= m.height()) return std::nullopt;
    return PixelCoord{static_cast<int>(raw), project_column(s.phi, m.width()), false};
  }
  const auto rows = m.row_elevations();
  const int u = nearest_row(rows, s.theta);
  const double gap = local_row_gap(rows, u, s.theta, m.fov());
  if (std::abs(s.theta - rows[static_cast<std::size_t>(u)]) > kOutOfFovGapFactor * gap) return std::nullopt;
  return PixelCoord{u, project_column(s.phi, m.width()), false};
}

/// Channel order of a range image.
enum Channel : int { kRange = 0, kX = 1, kY = 2, kZ = 3, kRemission = 4, kOccupancy = 5 };
inline constexpr int kNumChannels = 6;

/// 6 x h x w range image plus the pixel/point correspondences.
struct RangeImage {
  int height = 0;
  int width = 0;
  std::vector<double> channels;            ///< [channel][u][v]
  std::vector<std::int32_t> pixel_to_point;  ///< -1 where unoccupied
  std::vector<PixelCoord> point_to_pixel;  ///< one entry per input point, including shadowed ones
  std::size_t collision_free_count = 0;
  std::size_t clamped_count = 0;
  ProjectionMode mode = ProjectionMode::adaptive;

  [[nodiscard]] std::size_t pixel_index(int u, int v) const noexcept {
    return static_cast<std::size_t>(u) * static_cast<std::size_t>(width) + static_cast<std::size_t>(v);
  }
  [[nodiscard]] double at(int channel, int u, int v) const noexcept {
    return channels[static_cast<std::size_t>(channel) * height * width + pixel_index(u, v)];
  }
  double& at(int channel, int u, int v) noexcept {
    return channels[static_cast<std::size_t>(channel) * height * width + pixel_index(u, v)];
  }
  [[nodiscard]] bool occupied(int u, int v) const noexcept { return pixel_to_point[pixel_index(u, v)] >= 0; }
  [[nodiscard]] std::size_t point_count() const noexcept { return point_to_pixel.size(); }
};

/// Projects every point; the nearest point wins a contested pixel.
[[nodiscard]] inline RangeImage build_range_image(const PointCloud& pc, const SensorModel& m, ProjectionMode mode) {
  RangeImage ri;
  ri.height = m.height();
  ri.width = m.width();
  ri.mode = mode;
  const std::size_t pixels = static_cast<std::size_t>(ri.height) * static_cast<std::size_t>(ri.width);
  ri.channels.assign(kNumChannels * pixels, 0.0);
  ri.pixel_to_point.assign(pixels, -1);
  ri.point_to_pixel.reserve(pc.size());

  std::vector<std::uint32_t> hits(pixels, 0);
  std::vector<double> best_range(pixels, 0.0);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const SphericalCoords s = cartesian_to_spherical(pc[i]);
    const PixelCoord px = project(s, m, mode);
    ri.point_to_pixel.push_back(px);
    ri.clamped_count += px.clamped ? 1U : 0U;
    const std::size_t k = ri.pixel_index(px.u, px.v);
    ++hits[k];
    if (ri.pixel_to_point[k] < 0 || s.r < best_range[k]) {
      ri.pixel_to_point[k] = static_cast<std::int32_t>(i);
      best_range[k] = s.r;
    }
  }
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const PixelCoord& px = ri.point_to_pixel[i];
    ri.collision_free_count += hits[ri.pixel_index(px.u, px.v)] == 1 ? 1U : 0U;
  }
  for (std::size_t k = 0; k < pixels; ++k) {
    const std::int32_t idx = ri.pixel_to_point[k];
    if (idx < 0) continue;
    const Point& p = pc[static_cast<std::size_t>(idx)];
    ri.channels[kRange * pixels + k] = best_range[k];
    ri.channels[kX * pixels + k] = p.x;
    ri.channels[kY * pixels + k] = p.y;
    ri.channels[kZ * pixels + k] = p.z;
    ri.channels[kRemission * pixels + k] = p.remission;
    ri.channels[kOccupancy * pixels + k] = 1.0;
  }
  return ri;
}

/// Fraction of points that landed on a pixel no other point hit.
[[nodiscard]] inline double collision_free_fraction(const RangeImage& ri) {
  if (ri.point_count() == 0) {
    throw Error(ErrorKind::undefined_metric, "collision-free fraction of an empty cloud");
  }
  return static_cast<double>(ri.collision_free_count) / static_cast<double>(ri.point_count());
}

}  // namespace tlseg

#endif  // TLSEG_SENSOR_GEOMETRY_HPP
