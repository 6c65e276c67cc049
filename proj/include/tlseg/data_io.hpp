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

#ifndef TLSEG_DATA_IO_HPP
#define TLSEG_DATA_IO_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <yaml-cpp/yaml.h>

#include "tlseg/binary_io.hpp"
#include "tlseg/common.hpp"
#include "tlseg/sensor_geometry.hpp"
#include "tlseg/temporal_alignment.hpp"

/**
 * \file
 * \brief Dataset formats (SemanticKITTI layout) and the synthetic sequence generator.
 *
 * Scan: packed little-endian f32 x, y, z, remission per point.
 * Label: little-endian u32 per point; the low 16 bits hold the semantic id.
 * Poses: text, 12 reals per line (row-major 3x4). Calib: text, `Tr:` + 12 reals.
 */

namespace tlseg {

namespace detail {

[[nodiscard]] inline YAML::Node load_yaml(const std::string& path, const char* what) {
  try {
    return YAML::LoadFile(path);
  } catch (const YAML::BadFile&) {
    throw Error(ErrorKind::io, std::string("cannot read ") + what + " '" + path + "'");
  } catch (const YAML::Exception& e) {
    throw Error(ErrorKind::format, std::string(what) + " '" + path + "': " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scans

[[nodiscard]] inline PointCloud decode_scan(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % 16 != 0) {
    throw Error(ErrorKind::format, "scan size " + std::to_string(bytes.size()) +
                                       " is not a multiple of 16; truncated record at byte offset " +
                                       std::to_string(bytes.size() - bytes.size() % 16));
  }
  binary::Reader in(bytes);
  std::vector<Point> pts;
  pts.reserve(bytes.size() / 16);
  while (in.remaining() > 0) {
    const std::size_t offset = in.offset();
    Point p;
    p.x = in.get<float>();
    p.y = in.get<float>();
    p.z = in.get<float>();
    p.remission = std::clamp(static_cast<double>(in.get<float>()), 0.0, 1.0);
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) || (p.x == 0.0 && p.y == 0.0 && p.z == 0.0)) {
      throw Error(ErrorKind::format, "degenerate point at byte offset " + std::to_string(offset));
    }
    pts.push_back(p);
  }
  return PointCloud(std::move(pts));
}

[[nodiscard]] inline PointCloud read_scan(const std::string& path) { return decode_scan(binary::read_file(path)); }

[[nodiscard]] inline std::vector<std::uint8_t> encode_scan(const PointCloud& pc) {
  std::vector<std::uint8_t> out;
  out.reserve(pc.size() * 16);
  for (const Point& p : pc) {
    binary::put<float>(out, static_cast<float>(p.x));
    binary::put<float>(out, static_cast<float>(p.y));
    binary::put<float>(out, static_cast<float>(p.z));
    binary::put<float>(out, static_cast<float>(p.remission));
  }
  return out;
}

inline void write_scan(const std::string& path, const PointCloud& pc) { binary::write_file(path, encode_scan(pc)); }

// ---------------------------------------------------------------------------
// Labels and class mappings

/// Raw dataset id -> dense training id. Training ids lie in [0, C); `ignore_id` (= C) marks ignored points.
class ClassMapping {
 public:
  ClassMapping(std::string name, std::vector<std::string> class_names, std::map<std::uint32_t, std::int32_t> table)
      : name_(std::move(name)), class_names_(std::move(class_names)), table_(std::move(table)) {
    const auto c = num_classes();
    for (const auto& [raw, id] : table_) {
      if (id < 0 || id > c) {
        throw Error(ErrorKind::configuration, "raw id " + std::to_string(raw) + " maps outside [0, " +
                                                  std::to_string(c) + "]");
      }
    }
  }

  [[nodiscard]] const std::string& name() const noexcept { return name_; }
  [[nodiscard]] std::int32_t num_classes() const noexcept { return static_cast<std::int32_t>(class_names_.size()); }
  [[nodiscard]] std::int32_t ignore_id() const noexcept { return num_classes(); }
  [[nodiscard]] const std::vector<std::string>& class_names() const noexcept { return class_names_; }
  [[nodiscard]] const std::map<std::uint32_t, std::int32_t>& table() const noexcept { return table_; }

  [[nodiscard]] std::int32_t map(std::uint32_t raw) const {
    const auto it = table_.find(raw);
    if (it == table_.end()) {
      throw Error(ErrorKind::format, "unmapped label id " + std::to_string(raw));
    }
    return it->second;
  }

  /// Raw ids mapped to the ignore id.
  [[nodiscard]] std::vector<std::uint32_t> ignore_set() const {
    std::vector<std::uint32_t> out;
    for (const auto& [raw, id] : table_) {
      if (id == ignore_id()) out.push_back(raw);
    }
    return out;
  }

  /// YAML: `name`, `classes` (list of C names), `map` (raw id -> train id; C means ignore).
  [[nodiscard]] static ClassMapping from_yaml(const YAML::Node& node) {
    try {
      std::vector<std::string> names;
      for (const auto& n : node["classes"]) names.push_back(n.as<std::string>());
      std::map<std::uint32_t, std::int32_t> table;
      for (const auto& kv : node["map"]) table[kv.first.as<std::uint32_t>()] = kv.second.as<std::int32_t>();
      return ClassMapping(node["name"] ? node["name"].as<std::string>() : "unnamed", std::move(names), std::move(table));
    } catch (const YAML::Exception& e) {
      throw Error(ErrorKind::configuration, std::string("class mapping: ") + e.what());
    }
  }

  [[nodiscard]] static ClassMapping load(const std::string& path) {
    return from_yaml(detail::load_yaml(path, "class mapping"));
  }

 private:
  std::string name_;
  std::vector<std::string> class_names_;
  std::map<std::uint32_t, std::int32_t> table_;
};

[[nodiscard]] inline std::vector<std::uint32_t> decode_raw_labels(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % 4 != 0) {
    throw Error(ErrorKind::format, "label file truncated at byte offset " + std::to_string(bytes.size() - bytes.size() % 4));
  }
  binary::Reader in(bytes);
  std::vector<std::uint32_t> out(bytes.size() / 4);
  for (auto& v : out) v = in.get<std::uint32_t>();
  return out;
}

/// Maps raw labels (instance bits in the upper 16 bits are stripped) to training ids.
[[nodiscard]] inline std::vector<std::int32_t> map_labels(const std::vector<std::uint32_t>& raw,
                                                          const ClassMapping& mapping) {
  std::vector<std::int32_t> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = mapping.map(raw[i] & 0xFFFFU);
  return out;
}

[[nodiscard]] inline std::vector<std::int32_t> read_labels(const std::string& path, const ClassMapping& mapping,
                                                           std::optional<std::size_t> expected_count = std::nullopt) {
  const auto raw = decode_raw_labels(binary::read_file(path));
  if (expected_count && raw.size() != *expected_count) {
    throw Error(ErrorKind::format, "label file '" + path + "' has " + std::to_string(raw.size()) +
                                       " entries, scan has " + std::to_string(*expected_count));
  }
  return map_labels(raw, mapping);
}

inline void write_labels(const std::string& path, const std::vector<std::uint32_t>& labels) {
  std::vector<std::uint8_t> out;
  out.reserve(labels.size() * 4);
  for (auto v : labels) binary::put<std::uint32_t>(out, v);
  binary::write_file(path, out);
}

// ---------------------------------------------------------------------------
// Poses

namespace detail {

/// Projects a nearly orthonormal matrix onto SO(3).
inline Eigen::Matrix3d nearest_rotation(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

/// Tolerance for text poses printed with limited precision before re-orthonormalization.
inline constexpr double kPoseTextTolerance = 1e-4;

inline RigidTransform pose_from_values(const std::vector<double>& v, const std::string& where) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = v[static_cast<std::size_t>(r * 4 + c)];
  }
  const Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
  if (!m.allFinite() || ((r * r.transpose()) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > kPoseTextTolerance ||
      std::abs(r.determinant() - 1.0) > kPoseTextTolerance) {
    throw Error(ErrorKind::invalid_pose, where + ": not a rigid transform");
  }
  m.topLeftCorner<3, 3>() = nearest_rotation(r);
  return RigidTransform(m);
}

inline std::vector<double> parse_reals(const std::string& text, const std::string& where) {
  std::istringstream in(text);
  std::vector<double> v;
  std::string tok;
  while (in >> tok) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw Error(ErrorKind::format, where + ": '" + tok + "' is not a number");
    }
  }
  return v;
}

}  // namespace detail

/// Parses the calibration's `Tr:` line (camera <- velodyne); identity if the file has none.
[[nodiscard]] inline RigidTransform parse_calibration(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.rfind("Tr:", 0) != 0) continue;
    const auto v = detail::parse_reals(line.substr(3), "calib line " + std::to_string(line_no));
    if (v.size() != 12) throw Error(ErrorKind::format, "calib line " + std::to_string(line_no) + ": expected 12 values");
    return detail::pose_from_values(v, "calib line " + std::to_string(line_no));
  }
  return RigidTransform();
}

/// Converts camera-frame pose lines to sensor-frame transforms `Tr^-1 * T_cam * Tr`.
[[nodiscard]] inline std::vector<RigidTransform> parse_poses(const std::string& text, const RigidTransform& tr) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::vector<RigidTransform> out;
  const RigidTransform tr_inv = tr.inverse();
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "pose line " + std::to_string(line_no);
    const auto v = detail::parse_reals(line, where);
    if (v.size() != 12) throw Error(ErrorKind::format, where + ": expected 12 values, got " + std::to_string(v.size()));
    out.push_back(tr_inv * detail::pose_from_values(v, where) * tr);
  }
  return out;
}

[[nodiscard]] inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

[[nodiscard]] inline std::vector<RigidTransform> read_poses(const std::string& poses_path,
                                                            const std::optional<std::string>& calib_path) {
  const RigidTransform tr = calib_path ? parse_calibration(read_text(*calib_path)) : RigidTransform();
  return parse_poses(read_text(poses_path), tr);
}

[[nodiscard]] inline std::string format_pose_line(const RigidTransform& t) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) out << (r || c ? " " : "") << t.matrix()(r, c);
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Sequences

/// One labeled (or unlabeled) frame in memory.
struct Frame {
  PointCloud cloud;
  std::optional<std::vector<std::int32_t>> labels;  ///< training ids per point
  RigidTransform pose;
};

using Sequence = std::vector<Frame>;

inline constexpr int kManifestFormatVersion = 1;

/// YAML manifest of a sequence; paths are relative to the manifest's directory.
///
///     format_version: 1
///     sensor: sensor.yaml
///     mapping: mapping.yaml
///     poses: poses.txt
///     calib: calib.txt        # optional
///     frames:
///       - {scan: scans/000000.bin, label: labels/000000.label}   # label optional
struct SequenceManifest {
  std::filesystem::path root;
  std::string sensor;
  std::string mapping;
  std::string poses;
  std::optional<std::string> calib;
  struct Entry {
    std::string scan;
    std::optional<std::string> label;
  };
  std::vector<Entry> frames;

  [[nodiscard]] std::string resolve(const std::string& rel) const { return (root / rel).string(); }

  [[nodiscard]] static SequenceManifest load(const std::string& path) {
    const YAML::Node node = detail::load_yaml(path, "manifest");
    SequenceManifest m;
    m.root = std::filesystem::path(path).parent_path();
    try {
      if (!node["format_version"] || node["format_version"].as<int>() != kManifestFormatVersion) {
        throw Error(ErrorKind::format, "manifest '" + path + "' has an unsupported format_version");
      }
      m.sensor = node["sensor"].as<std::string>();
      m.mapping = node["mapping"].as<std::string>();
      m.poses = node["poses"].as<std::string>();
      if (node["calib"]) m.calib = node["calib"].as<std::string>();
      for (const auto& f : node["frames"]) {
        Entry e{f["scan"].as<std::string>(), std::nullopt};
        if (f["label"]) e.label = f["label"].as<std::string>();
        m.frames.push_back(std::move(e));
      }
    } catch (const YAML::Exception& e) {
      throw Error(ErrorKind::format, "manifest '" + path + "': " + e.what());
    }
    return m;
  }

  void save(const std::string& path) const {
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "format_version" << YAML::Value << kManifestFormatVersion;
    out << YAML::Key << "sensor" << YAML::Value << sensor;
    out << YAML::Key << "mapping" << YAML::Value << mapping;
    out << YAML::Key << "poses" << YAML::Value << poses;
    if (calib) out << YAML::Key << "calib" << YAML::Value << *calib;
    out << YAML::Key << "frames" << YAML::Value << YAML::BeginSeq;
    for (const auto& f : frames) {
      out << YAML::Flow << YAML::BeginMap << YAML::Key << "scan" << YAML::Value << f.scan;
      if (f.label) out << YAML::Key << "label" << YAML::Value << *f.label;
      out << YAML::EndMap;
    }
    out << YAML::EndSeq << YAML::EndMap;
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw Error(ErrorKind::io, "cannot write manifest '" + path + "'");
    file << out.c_str() << '\n';
  }
};

struct LoadedSequence {
  SensorModel sensor;
  ClassMapping mapping;
  Sequence frames;
};

[[nodiscard]] inline LoadedSequence load_sequence(const std::string& manifest_path) {
  const auto m = SequenceManifest::load(manifest_path);
  auto sensor = load_sensor_model(m.resolve(m.sensor));
  auto mapping = ClassMapping::load(m.resolve(m.mapping));
  const auto poses = read_poses(m.resolve(m.poses), m.calib ? std::optional(m.resolve(*m.calib)) : std::nullopt);
  if (poses.size() != m.frames.size()) {
    throw Error(ErrorKind::validation, "manifest lists " + std::to_string(m.frames.size()) + " frames but " +
                                           std::to_string(poses.size()) + " poses");
  }
  Sequence seq;
  for (std::size_t i = 0; i < m.frames.size(); ++i) {
    Frame f{read_scan(m.resolve(m.frames[i].scan)), std::nullopt, poses[i]};
    if (m.frames[i].label) f.labels = read_labels(m.resolve(*m.frames[i].label), mapping, f.cloud.size());
    seq.push_back(std::move(f));
  }
  return {std::move(sensor), std::move(mapping), std::move(seq)};
}

// ---------------------------------------------------------------------------
// Synthetic ray-cast scenes

/// Yaw-oriented box, optionally moving with constant velocity (m/frame).
struct SyntheticBox {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Ones();  ///< full extents along the box axes
  double yaw = 0.0;
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();
  std::uint32_t label = 2;
  double remission = 0.5;
};

/// Scene description for `generate_synthetic`; see `SyntheticSceneSpec::from_yaml` for the schema.
struct SyntheticSceneSpec {
  SensorModel sensor = SensorModel::uniform(16, 128, deg_to_rad(2.0), deg_to_rad(-24.0));
  int frames = 25;
  double ground_z = -1.7;  ///< world height of the ground plane
  std::uint32_t ground_label = 1;
  double ground_remission = 0.2;
  std::vector<SyntheticBox> boxes;
  std::vector<RigidTransform> trajectory;  ///< sensor pose in world, one per frame
  double range_noise = 0.0;                ///< Gaussian sigma on range, meters
  double object_remission_noise = 0.0;     ///< per frame and object
  double point_remission_noise = 0.0;      ///< per point
  double max_range = 80.0;

  void validate() const {
    if (frames <= 0) throw Error(ErrorKind::configuration, "scene needs at least one frame");
    if (trajectory.size() != static_cast<std::size_t>(frames)) {
      throw Error(ErrorKind::configuration, "trajectory length must equal the frame count");
    }
    for (const auto& b : boxes) {
      if (!b.velocity.allFinite() || !b.center.allFinite() || (b.size.array() <= 0.0).any()) {
        throw Error(ErrorKind::configuration, "box with invalid geometry or velocity");
      }
    }
    if (range_noise < 0.0 || object_remission_noise < 0.0 || point_remission_noise < 0.0) {
      throw Error(ErrorKind::configuration, "noise must be non-negative");
    }
  }

  /// Constant speed along the heading, heading changing by `yaw_rate` per frame.
  [[nodiscard]] static std::vector<RigidTransform> straight_trajectory(int frames, Eigen::Vector3d start, double yaw0,
                                                                       double speed, double yaw_rate) {
    std::vector<RigidTransform> out;
    Eigen::Vector3d p = start;
    double yaw = yaw0;
    for (int t = 0; t < frames; ++t) {
      out.push_back(RigidTransform::from_yaw(yaw, p.x(), p.y(), p.z()));
      p += speed * Eigen::Vector3d(std::cos(yaw), std::sin(yaw), 0.0);
      yaw += yaw_rate;
    }
    return out;
  }

  /// YAML schema (format_version 1):
  ///
  ///     frames: 25
  ///     sensor: {h, w, fov_up_deg, fov_down_deg, row_elevations_deg}
  ///     ground: {z: -1.7, label: 1, remission: 0.2}
  ///     boxes: [{center: [x,y,z], size: [l,w,h], yaw_deg: 0, velocity: [vx,vy,vz], label: 2, remission: 0.5}]
  ///     ego: {start: [x,y,z], yaw_deg: 0, speed: 0.5, yaw_rate_deg: 0}   # or poses: [[x,y,z,yaw_deg], ...]
  ///     noise: {range_sigma: 0, object_remission_sigma: 0, point_remission_sigma: 0}
  ///     max_range: 80
  [[nodiscard]] static SyntheticSceneSpec from_yaml(const YAML::Node& node) {
    try {
      if (node["format_version"] && node["format_version"].as<int>() != 1) {
        throw Error(ErrorKind::format, "unsupported scene format_version");
      }
      SyntheticSceneSpec s;
      s.frames = node["frames"].as<int>();
      if (node["sensor"]) s.sensor = sensor_model_from_yaml(node["sensor"]);
      if (const auto g = node["ground"]) {
        s.ground_z = g["z"].as<double>(s.ground_z);
        s.ground_label = g["label"].as<std::uint32_t>(s.ground_label);
        s.ground_remission = g["remission"].as<double>(s.ground_remission);
      }
      const auto vec3 = [](const YAML::Node& n, Eigen::Vector3d fallback) {
        if (!n) return fallback;
        return Eigen::Vector3d(n[0].as<double>(), n[1].as<double>(), n[2].as<double>());
      };
      for (const auto& b : node["boxes"]) {
        SyntheticBox box;
        box.center = vec3(b["center"], box.center);
        box.size = vec3(b["size"], box.size);
        box.yaw = deg_to_rad(b["yaw_deg"].as<double>(0.0));
        box.velocity = vec3(b["velocity"], box.velocity);
        box.label = b["label"].as<std::uint32_t>(box.label);
        box.remission = b["remission"].as<double>(box.remission);
        s.boxes.push_back(box);
      }
      const auto ego = node["ego"];
      if (ego && ego["poses"]) {
        for (const auto& p : ego["poses"]) {
          s.trajectory.push_back(RigidTransform::from_yaw(deg_to_rad(p[3].as<double>()), p[0].as<double>(),
                                                          p[1].as<double>(), p[2].as<double>()));
        }
      } else {
        const Eigen::Vector3d start = ego ? vec3(ego["start"], Eigen::Vector3d::Zero()) : Eigen::Vector3d::Zero();
        s.trajectory = straight_trajectory(s.frames, start, ego ? deg_to_rad(ego["yaw_deg"].as<double>(0.0)) : 0.0,
                                           ego ? ego["speed"].as<double>(0.0) : 0.0,
                                           ego ? deg_to_rad(ego["yaw_rate_deg"].as<double>(0.0)) : 0.0);
      }
      if (const auto n = node["noise"]) {
        s.range_noise = n["range_sigma"].as<double>(0.0);
        s.object_remission_noise = n["object_remission_sigma"].as<double>(0.0);
        s.point_remission_noise = n["point_remission_sigma"].as<double>(0.0);
      }
      s.max_range = node["max_range"].as<double>(s.max_range);
      s.validate();
      return s;
    } catch (const YAML::Exception& e) {
      throw Error(ErrorKind::configuration, std::string("scene spec: ") + e.what());
    }
  }

  [[nodiscard]] static SyntheticSceneSpec load(const std::string& path) {
    return from_yaml(detail::load_yaml(path, "scene spec"));
  }
};

/// Class mapping for generated scenes (ground, box, obstacle, vehicle; 0 is ignored).
inline constexpr std::string_view kSyntheticMappingYaml = R"(name: synthetic
classes: [ground, box, obstacle, vehicle]
map: {0: 4, 1: 0, 2: 1, 3: 2, 4: 3}
)";

[[nodiscard]] inline ClassMapping synthetic_mapping() {
  return ClassMapping::from_yaml(YAML::Load(std::string(kSyntheticMappingYaml)));
}

/// Raw ids used by `make_random_scene`; 0 is reserved for unlabeled returns.
enum SyntheticClass : std::uint32_t { kSynUnlabeled = 0, kSynGround = 1, kSynBox = 2, kSynObstacle = 3, kSynVehicle = 4 };

/// Parameters of a randomized scene with static boxes and moving vehicles.
///
/// Boxes and obstacles share the same size distribution and differ only in
/// their base remission, which is perturbed per frame and object.
struct RandomSceneOptions {
  SensorModel sensor = SensorModel::uniform(16, 128, deg_to_rad(2.0), deg_to_rad(-24.0));
  int frames = 25;
  double sensor_height = 1.7;
  double speed_min = 0.6, speed_max = 1.0;               ///< m/frame
  double yaw_rate_min = 3.0, yaw_rate_max = 6.0;         ///< |deg/frame|, random sign
  int static_objects = 14;
  int vehicles = 3;
  double vehicle_speed = 0.3;                            ///< m/frame
  double placement_radius = 22.0;                        ///< around the trajectory's midpoint
  double clearance = 3.0;                                ///< min distance from the ego path
  double ground_remission = 0.35;
  double box_remission = 0.6;
  double obstacle_remission = 0.3;
  double vehicle_remission = 0.45;
  double object_remission_noise = 0.15;
  double point_remission_noise = 0.03;
  double range_noise = 0.0;
  double max_range = 40.0;
};

[[nodiscard]] inline SyntheticSceneSpec make_random_scene(const RandomSceneOptions& o, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  SyntheticSceneSpec s;
  s.sensor = o.sensor;
  s.frames = o.frames;
  s.ground_z = -o.sensor_height;
  s.ground_label = kSynGround;
  s.ground_remission = o.ground_remission;
  s.range_noise = o.range_noise;
  s.object_remission_noise = o.object_remission_noise;
  s.point_remission_noise = o.point_remission_noise;
  s.max_range = o.max_range;
  const double sign = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
  s.trajectory = SyntheticSceneSpec::straight_trajectory(o.frames, Eigen::Vector3d::Zero(), uni(-kPi, kPi),
                                                         uni(o.speed_min, o.speed_max),
                                                         sign * deg_to_rad(uni(o.yaw_rate_min, o.yaw_rate_max)));
  Eigen::Vector3d mid = Eigen::Vector3d::Zero();
  for (const auto& t : s.trajectory) mid += t.translation();
  mid /= static_cast<double>(s.trajectory.size());
  const auto clear_of_path = [&](const Eigen::Vector3d& c, double radius, const Eigen::Vector3d& velocity) {
    for (int t = 0; t < o.frames; ++t) {
      const Eigen::Vector3d p = c + static_cast<double>(t) * velocity;
      if ((p.head<2>() - s.trajectory[static_cast<std::size_t>(t)].translation().head<2>()).norm() < radius + o.clearance) {
        return false;
      }
    }
    return true;
  };
  const auto place = [&](SyntheticBox box) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double a = uni(-kPi, kPi);
      const double r = o.placement_radius * std::sqrt(uni(0.02, 1.0));
      box.center = mid + Eigen::Vector3d(r * std::cos(a), r * std::sin(a), 0.0);
      box.center.z() = s.ground_z + 0.5 * box.size.z();
      if (clear_of_path(box.center, 0.5 * box.size.head<2>().norm(), box.velocity)) {
        s.boxes.push_back(box);
        return;
      }
    }
  };
  for (int i = 0; i < o.static_objects; ++i) {
    SyntheticBox b;
    const bool is_box = i % 2 == 0;
    b.label = is_box ? kSynBox : kSynObstacle;
    b.remission = is_box ? o.box_remission : o.obstacle_remission;
    b.size = Eigen::Vector3d(uni(0.8, 3.0), uni(0.8, 3.0), uni(0.8, 2.2));
    b.yaw = uni(-kPi, kPi);
    place(b);
  }
  for (int i = 0; i < o.vehicles; ++i) {
    SyntheticBox b;
    b.label = kSynVehicle;
    b.remission = o.vehicle_remission;
    b.size = Eigen::Vector3d(4.2, 1.8, 1.5);
    b.yaw = uni(-kPi, kPi);
    b.velocity = o.vehicle_speed * Eigen::Vector3d(std::cos(b.yaw), std::sin(b.yaw), 0.0);
    place(b);
  }
  s.validate();
  return s;
}

/// One generated frame: points in the sensor frame, raw labels, sensor pose in the world.
struct SyntheticFrame {
  PointCloud cloud;
  std::vector<std::uint32_t> labels;
  RigidTransform pose;
};

namespace detail {

/// Ray/box intersection (slab test in the box frame); returns the entry distance.
inline std::optional<double> intersect_box(const Eigen::Vector3d& origin, const Eigen::Vector3d& dir,
                                           const Eigen::Vector3d& center, const Eigen::Vector3d& size, double yaw) {
  const Eigen::Matrix3d rt = Eigen::AngleAxisd(-yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  const Eigen::Vector3d o = rt * (origin - center);
  const Eigen::Vector3d d = rt * dir;
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double half = 0.5 * size[a];
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < -half || o[a] > half) return std::nullopt;
      continue;
    }
    double t0 = (-half - o[a]) / d[a];
    double t1 = (half - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
    if (t_near > t_far) return std::nullopt;
  }
  if (t_far <= 0.0) return std::nullopt;
  if (t_near <= 0.0) return std::nullopt;  // origin inside a box: no return
  return t_near;
}

}  // namespace detail

/// Ray elevation of each image row: the row table if present, else uniform row centers.
[[nodiscard]] inline std::vector<double> ray_elevations(const SensorModel& m) {
  if (m.has_row_elevations()) {
    const auto rows = m.row_elevations();
    return {rows.begin(), rows.end()};
  }
  std::vector<double> out(static_cast<std::size_t>(m.height()));
  for (int l = 0; l < m.height(); ++l) out[static_cast<std::size_t>(l)] = m.fov_up() - (l + 0.5) * m.fov() / m.height();
  return out;
}

/// Casts one ray per (row, column) of the sensor from every pose of the trajectory.
///
/// The nearest hit among the ground plane and the boxes (displaced by
/// velocity * frame) becomes a point in the sensor frame. Range noise is
/// applied along the ray, so angles stay exact. Deterministic per seed.
[[nodiscard]] inline std::vector<SyntheticFrame> generate_synthetic(const SyntheticSceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto elevations = ray_elevations(spec.sensor);
  const int w = spec.sensor.width();
  if (elevations.empty() || w <= 0) throw Error(ErrorKind::configuration, "empty ray grid");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<SyntheticFrame> frames;
  for (int t = 0; t < spec.frames; ++t) {
    const RigidTransform& pose = spec.trajectory[static_cast<std::size_t>(t)];
    const Eigen::Matrix3d r = pose.rotation();
    const Eigen::Vector3d origin = pose.translation();
    std::vector<double> object_offset(spec.boxes.size() + 1);
    for (auto& o : object_offset) o = spec.object_remission_noise * normal(rng);

    SyntheticFrame frame;
    frame.pose = pose;
    for (double theta : elevations) {
      for (int v = 0; v < w; ++v) {
        const double phi = spec.sensor.column_azimuth(v);
        const Eigen::Vector3d local(std::cos(theta) * std::cos(-phi), std::cos(theta) * std::sin(-phi), std::sin(theta));
        const Eigen::Vector3d dir = r * local;
        double best = std::numeric_limits<double>::infinity();
        std::uint32_t label = 0;
        double remission = 0.0;
        std::size_t object = 0;
        if (dir.z() < 0.0 && origin.z() > spec.ground_z) {
          best = (spec.ground_z - origin.z()) / dir.z();
          label = spec.ground_label;
          remission = spec.ground_remission;
          object = 0;
        }
        for (std::size_t b = 0; b < spec.boxes.size(); ++b) {
          const SyntheticBox& box = spec.boxes[b];
          const auto hit = detail::intersect_box(origin, dir, box.center + static_cast<double>(t) * box.velocity,
                                                 box.size, box.yaw);
          if (hit && *hit < best) {
            best = *hit;
            label = box.label;
            remission = box.remission;
            object = b + 1;
          }
        }
        if (!(best <= spec.max_range)) continue;
        double range = best;
        if (spec.range_noise > 0.0) range = std::max(1e-3, range + spec.range_noise * normal(rng));
        double e = remission + object_offset[object];
        if (spec.point_remission_noise > 0.0) e += spec.point_remission_noise * normal(rng);
        const Eigen::Vector3d p = range * local;
        frame.cloud.push_back({p.x(), p.y(), p.z(), std::clamp(e, 0.0, 1.0)});
        frame.labels.push_back(label);
      }
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

/// Writes a generated sequence in the dataset layout and returns the manifest path.
inline std::string write_synthetic_sequence(const std::vector<SyntheticFrame>& frames, const SensorModel& sensor,
                                            const std::string& mapping_yaml, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "scans", ec);
  fs::create_directories(fs::path(out_dir) / "labels", ec);
  if (ec) throw Error(ErrorKind::io, "cannot create '" + out_dir + "': " + ec.message());

  SequenceManifest m;
  m.root = out_dir;
  m.sensor = "sensor.yaml";
  m.mapping = "mapping.yaml";
  m.poses = "poses.txt";
  m.calib = "calib.txt";
  std::ostringstream poses;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << i;
    const std::string scan = "scans/" + name.str() + ".bin";
    const std::string label = "labels/" + name.str() + ".label";
    write_scan(m.resolve(scan), frames[i].cloud);
    write_labels(m.resolve(label), frames[i].labels);
    poses << format_pose_line(frames[i].pose) << '\n';
    m.frames.push_back({scan, label});
  }
  const auto write = [&](const std::string& rel, const std::string& text) {
    std::ofstream f(m.resolve(rel), std::ios::trunc);
    if (!f) throw Error(ErrorKind::io, "cannot write '" + m.resolve(rel) + "'");
    f << text;
  };
  write(m.poses, poses.str());
  write(*m.calib, "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n");
  write(m.mapping, mapping_yaml);
  {
    YAML::Emitter s;
    s << YAML::BeginMap << YAML::Key << "h" << YAML::Value << sensor.height() << YAML::Key << "w" << YAML::Value
      << sensor.width() << YAML::Key << "fov_up_deg" << YAML::Value << rad_to_deg(sensor.fov_up()) << YAML::Key
      << "fov_down_deg" << YAML::Value << rad_to_deg(sensor.fov_down());
    if (sensor.has_row_elevations()) {
      s << YAML::Key << "row_elevations_deg" << YAML::Value << YAML::Flow << YAML::BeginSeq;
      for (double r : sensor.row_elevations()) s << rad_to_deg(r);
      s << YAML::EndSeq;
    }
    s << YAML::EndMap;
    write(m.sensor, std::string(s.c_str()) + "\n");
  }
  const std::string manifest = m.resolve("manifest.yaml");
  m.save(manifest);
  return manifest;
}

/// Converts generated frames into training frames through a class mapping.
[[nodiscard]] inline Sequence to_sequence(const std::vector<SyntheticFrame>& frames, const ClassMapping& mapping) {
  Sequence seq;
  for (const auto& f : frames) seq.push_back({f.cloud, map_labels(f.labels, mapping), f.pose});
  return seq;
}

}  // namespace tlseg

#endif  // TLSEG_DATA_IO_HPP
