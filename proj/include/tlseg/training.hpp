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

#ifndef TLSEG_TRAINING_HPP
#define TLSEG_TRAINING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "tlseg/autodiff.hpp"
#include "tlseg/checkpoint.hpp"
#include "tlseg/common.hpp"
#include "tlseg/data_io.hpp"
#include "tlseg/network.hpp"
#include "tlseg/sensor_geometry.hpp"
#include "tlseg/temporal_alignment.hpp"

/**
 * \file
 * \brief Class-balanced loss, Adam with exponential decay, augmentation and the
 *        truncated back-propagation-through-time trainer.
 */

namespace tlseg {

// ---------------------------------------------------------------------------
// Class weights and loss

inline constexpr double kMinClassWeight = 0.1;
inline constexpr double kMaxClassWeight = 20.0;

struct ClassWeights {
  std::vector<double> weights;  ///< one per class; the ignore id has weight 0
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;

  /// Weight of a label; 0 for anything outside [0, C).
  [[nodiscard]] double weight(std::int32_t label) const noexcept {
    if (label < 0 || static_cast<std::size_t>(label) >= weights.size()) return 0.0;
    return weights[static_cast<std::size_t>(label)];
  }
};

/// `w_c = -log(max(n_c, 1) / n)` clamped to [0.1, 20].
[[nodiscard]] inline ClassWeights compute_class_weights(std::span<const std::uint64_t> counts) {
  ClassWeights cw;
  cw.counts.assign(counts.begin(), counts.end());
  cw.total = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  if (cw.total == 0) throw Error(ErrorKind::validation, "class histogram is empty");
  for (auto c : counts) {
    const double w = -std::log(static_cast<double>(std::max<std::uint64_t>(c, 1)) / static_cast<double>(cw.total));
    cw.weights.push_back(std::clamp(w, kMinClassWeight, kMaxClassWeight));
  }
  return cw;
}

/// Counts labels in [0, num_classes); others are ignored.
[[nodiscard]] inline std::vector<std::uint64_t> label_histogram(std::span<const std::int32_t> labels, int num_classes) {
  std::vector<std::uint64_t> h(static_cast<std::size_t>(num_classes), 0);
  for (auto y : labels) {
    if (y >= 0 && y < num_classes) ++h[static_cast<std::size_t>(y)];
  }
  return h;
}

inline constexpr double kLossLogFloor = 1e-12;

/// Mean over labeled pixels of `w_y * -log(p_y)` for explicit distributions.
[[nodiscard]] inline double weighted_cross_entropy(const std::vector<std::vector<double>>& probabilities,
                                                   std::span<const std::int32_t> labels, const ClassWeights& weights) {
  if (probabilities.size() != labels.size()) {
    throw Error(ErrorKind::shape, "one distribution per label required");
  }
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= probabilities[i].size()) continue;
    total += weights.weight(y) * -std::log(std::max(probabilities[i][static_cast<std::size_t>(y)], kLossLogFloor));
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Truncated BPTT schedule

struct TbpttConfig {
  int k1 = 5;       ///< frames between optimizer updates
  int k2 = 5;       ///< truncation depth
  int k3 = 10;      ///< frame of the first update (1-based)
  int length = 25;  ///< sub-sequence length

  void validate() const {
    if (k1 < 1 || k2 < 1) throw Error(ErrorKind::configuration, "k1 and k2 must be at least 1");
    if (k3 < k2) throw Error(ErrorKind::configuration, "k3 must be at least k2");
    if (length < k3) throw Error(ErrorKind::configuration, "sub-sequence length must be at least k3");
  }
};

/// One optimizer update: loss over frames [first, last] (1-based, inclusive).
struct UpdateWindow {
  int frame = 0;
  int first = 0;
  int last = 0;
  friend bool operator==(const UpdateWindow&, const UpdateWindow&) = default;
};

[[nodiscard]] inline std::vector<UpdateWindow> tbptt_schedule(const TbpttConfig& cfg) {
  cfg.validate();
  std::vector<UpdateWindow> out;
  for (int t = cfg.k3; t <= cfg.length; t += cfg.k1) out.push_back({t, t - cfg.k2 + 1, t});
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerConfig {
  double lr0 = 1e-3;
  double decay = 5e-5;  ///< per iteration
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  [[nodiscard]] static OptimizerConfig single_frame() { return {}; }
  [[nodiscard]] static OptimizerConfig temporal() {
    OptimizerConfig c;
    c.lr0 = 1e-4;
    c.decay = 2.5e-5;
    return c;
  }

  [[nodiscard]] double learning_rate(std::int64_t iteration) const {
    return lr0 * std::exp(-decay * static_cast<double>(iteration));
  }

  void validate() const {
    if (!(lr0 > 0.0) || decay < 0.0 || weight_decay < 0.0 || !(beta1 >= 0.0 && beta1 < 1.0) ||
        !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
      throw Error(ErrorKind::configuration, "invalid optimizer settings");
    }
  }
};

/// Adam with the weight decay added to the gradient.
template <typename T>
class Adam {
 public:
  explicit Adam(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  /// Applies one update with the learning rate of `iteration` (0-based).
  void step(ParameterStore<T>& store, std::int64_t iteration) {
    const double lr = cfg_.learning_rate(iteration);
    const double t = static_cast<double>(iteration + 1);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (auto* p : store.parameters()) {
      if (!p->trainable) continue;
      auto& st = state_[p->name];
      auto value = p->tensor.data();
      auto grad = p->tensor.grad();
      if (st.m.size() != value.size()) {
        st.m.assign(value.size(), 0.0);
        st.v.assign(value.size(), 0.0);
      }
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]) + cfg_.weight_decay * static_cast<double>(value[i]);
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double step = lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + cfg_.eps);
        value[i] = static_cast<T>(static_cast<double>(value[i]) - step);
      }
    }
  }

  [[nodiscard]] const OptimizerConfig& config() const noexcept { return cfg_; }

  void save_to(Checkpoint& ck) const {
    for (const auto& [name, st] : state_) {
      ck.add("adam.m." + name, DType::f64, {st.m.size()}, st.m);
      ck.add("adam.v." + name, DType::f64, {st.v.size()}, st.v);
    }
  }

  void load_from(const Checkpoint& ck, const ParameterStore<T>& store) {
    state_.clear();
    for (const auto* p : store.parameters()) {
      if (!ck.contains("adam.m." + p->name)) continue;
      auto& st = state_[p->name];
      st.m = ck.get("adam.m." + p->name).values;
      st.v = ck.get("adam.v." + p->name).values;
      if (st.m.size() != p->tensor.numel() || st.v.size() != p->tensor.numel()) {
        throw Error(ErrorKind::shape, "optimizer state of '" + p->name + "' has a different shape");
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  OptimizerConfig cfg_;
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double flip_probability = 0.5;
  int crop_width = 0;  ///< 0 keeps the full width
};

/// Drawn once per sub-sequence and applied to every frame of it.
struct AugmentDecision {
  bool flip = false;
  int crop_offset = 0;
  int crop_width = 0;  ///< 0 keeps the full width
};

[[nodiscard]] inline AugmentDecision draw_augmentation(std::mt19937_64& rng, const AugmentConfig& cfg, int width) {
  if (cfg.crop_width < 0 || cfg.crop_width > width) {
    throw Error(ErrorKind::configuration, "crop width " + std::to_string(cfg.crop_width) + " exceeds image width " +
                                              std::to_string(width));
  }
  AugmentDecision d;
  d.flip = std::bernoulli_distribution(cfg.flip_probability)(rng);
  if (cfg.crop_width > 0 && cfg.crop_width < width) {
    d.crop_width = cfg.crop_width;
    d.crop_offset = std::uniform_int_distribution<int>(0, width - 1)(rng);
  }
  return d;
}

/// Mirror across the x-z plane: y -> -y. Applied to points and poses it keeps
/// the sequence geometrically consistent.
[[nodiscard]] inline RigidTransform mirror_pose(const RigidTransform& t) {
  Eigen::Matrix4d s = Eigen::Matrix4d::Identity();
  s(1, 1) = -1.0;
  return RigidTransform(s * t.matrix() * s);
}

[[nodiscard]] inline PointCloud mirror_cloud(const PointCloud& pc) {
  std::vector<Point> pts(pc.points().begin(), pc.points().end());
  for (auto& p : pts) p.y = -p.y;
  return PointCloud(std::move(pts));
}

[[nodiscard]] inline Frame flip_frame(const Frame& f) { return {mirror_cloud(f.cloud), f.labels, mirror_pose(f.pose)}; }

/// Mirrors the columns of a range image and negates its y channel.
[[nodiscard]] inline RangeImage flip_range_image(const RangeImage& ri) {
  RangeImage out = ri;
  const std::size_t plane = static_cast<std::size_t>(ri.height) * ri.width;
  for (int u = 0; u < ri.height; ++u) {
    for (int v = 0; v < ri.width; ++v) {
      const std::size_t src = ri.pixel_index(u, v);
      const std::size_t dst = ri.pixel_index(u, ri.width - 1 - v);
      for (int c = 0; c < kNumChannels; ++c) out.channels[c * plane + dst] = ri.channels[c * plane + src];
      out.channels[kY * plane + dst] = -ri.channels[kY * plane + src];
      out.pixel_to_point[dst] = ri.pixel_to_point[src];
    }
  }
  for (auto& px : out.point_to_pixel) px.v = ri.width - 1 - px.v;
  return out;
}

/// Column of the crop window that full-width column `v` lands in, or -1.
[[nodiscard]] inline int crop_column(int v, int offset, int crop_width, int width) {
  const int c = static_cast<int>(wrap_index(static_cast<long long>(v) - offset, width));
  return c < crop_width ? c : -1;
}

/// Keeps columns [offset, offset + crop_width) with wraparound.
template <typename V>
[[nodiscard]] std::vector<V> crop_planes(std::span<const V> data, int planes, int height, int width, int offset,
                                         int crop_width) {
  if (crop_width <= 0 || crop_width > width) throw Error(ErrorKind::configuration, "crop wider than image");
  std::vector<V> out(static_cast<std::size_t>(planes) * height * crop_width);
  for (int p = 0; p < planes; ++p) {
    for (int u = 0; u < height; ++u) {
      for (int c = 0; c < crop_width; ++c) {
        const auto v = wrap_index(static_cast<long long>(offset) + c, width);
        out[(static_cast<std::size_t>(p) * height + u) * crop_width + c] =
            data[(static_cast<std::size_t>(p) * height + u) * width + static_cast<std::size_t>(v)];
      }
    }
  }
  return out;
}

[[nodiscard]] inline RangeImage crop_range_image(const RangeImage& ri, int offset, int crop_width) {
  RangeImage out;
  out.height = ri.height;
  out.width = crop_width;
  out.mode = ri.mode;
  out.channels = crop_planes<double>(ri.channels, kNumChannels, ri.height, ri.width, offset, crop_width);
  out.pixel_to_point = crop_planes<std::int32_t>(ri.pixel_to_point, 1, ri.height, ri.width, offset, crop_width);
  out.point_to_pixel = ri.point_to_pixel;
  for (auto& px : out.point_to_pixel) {
    const int c = crop_column(px.v, offset, crop_width, ri.width);
    px.v = c;
    if (c < 0) px.u = -1;
  }
  return out;
}

/// Restricts a full-resolution warp source map to a crop window. Sources
/// outside the window become -1.
[[nodiscard]] inline std::vector<std::int32_t> crop_warp_source(std::span<const std::int32_t> source, int height,
                                                                int width, int offset, int crop_width) {
  std::vector<std::int32_t> out(static_cast<std::size_t>(height) * crop_width, -1);
  for (int u = 0; u < height; ++u) {
    for (int c = 0; c < crop_width; ++c) {
      const auto v = wrap_index(static_cast<long long>(offset) + c, width);
      const std::int32_t src = source[static_cast<std::size_t>(u) * width + static_cast<std::size_t>(v)];
      if (src < 0) continue;
      const int sc = crop_column(src % width, offset, crop_width, width);
      if (sc >= 0) out[static_cast<std::size_t>(u) * crop_width + c] = (src / width) * crop_width + sc;
    }
  }
  return out;
}

/// Label of the point that won each pixel; -1 where unoccupied or unlabeled.
[[nodiscard]] inline std::vector<std::int32_t> pixel_labels(const RangeImage& ri, std::span<const std::int32_t> labels) {
  std::vector<std::int32_t> out(ri.pixel_to_point.size(), -1);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const auto idx = ri.pixel_to_point[k];
    if (idx >= 0) out[k] = labels[static_cast<std::size_t>(idx)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prepared sequences

/// Range images, pixel labels and warp sources of one sequence, computed once.
struct PreparedSequence {
  std::vector<PointCloud> clouds;
  std::vector<RangeImage> images;
  std::vector<std::optional<std::vector<std::int32_t>>> labels;  ///< per pixel
  std::vector<std::vector<std::int32_t>> warp_sources;             ///< into the previous frame; empty for frame 0
  std::vector<RigidTransform> poses;
};

[[nodiscard]] inline PreparedSequence prepare_sequence(const Sequence& seq, const SensorModel& m, ProjectionMode mode) {
  PreparedSequence out;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const Frame& f = seq[t];
    if (f.cloud.size() == 0) throw Error(ErrorKind::validation, "frame " + std::to_string(t) + " has no points");
    out.clouds.push_back(f.cloud);
    out.images.push_back(build_range_image(f.cloud, m, mode));
    out.poses.push_back(f.pose);
    if (f.labels) {
      out.labels.push_back(pixel_labels(out.images.back(), *f.labels));
    } else {
      out.labels.push_back(std::nullopt);
    }
    if (t == 0) {
      out.warp_sources.emplace_back();
    } else {
      const RigidTransform rel = relative_transform(seq[t - 1].pose, f.pose);
      out.warp_sources.push_back(warp_source_index(compute_warp_map(seq[t - 1].cloud, out.images[t - 1], rel, m, mode)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

struct TrainConfig {
  TbpttConfig tbptt;
  OptimizerConfig optimizer;
  AugmentConfig augment;
  int batch = 4;
  int epochs = 1;
  std::int64_t max_updates = -1;  ///< stop after this many updates in total; -1 for no limit
  std::uint64_t seed = 1;
  bool freeze_backbone = false;
  bool use_alignment = true;
  bool audit_graph = false;  ///< record the frame tags reachable from each loss

  void validate() const {
    tbptt.validate();
    optimizer.validate();
    if (batch < 1 || epochs < 0) throw Error(ErrorKind::configuration, "batch must be positive, epochs non-negative");
    if (augment.flip_probability < 0.0 || augment.flip_probability > 1.0) {
      throw Error(ErrorKind::configuration, "flip probability outside [0, 1]");
    }
  }

  /// Keys: k1, k2, k3, L, lr0, decay, weight_decay, batch, epochs, max_updates, seed,
  /// flip_probability, crop_width, freeze_backbone.
  [[nodiscard]] static TrainConfig from_yaml(const YAML::Node& node) {
    TrainConfig c;
    try {
      c.tbptt.k1 = node["k1"].as<int>(c.tbptt.k1);
      c.tbptt.k2 = node["k2"].as<int>(c.tbptt.k2);
      c.tbptt.k3 = node["k3"].as<int>(c.tbptt.k3);
      c.tbptt.length = node["L"].as<int>(c.tbptt.length);
      c.optimizer.lr0 = node["lr0"].as<double>(c.optimizer.lr0);
      c.optimizer.decay = node["decay"].as<double>(c.optimizer.decay);
      c.optimizer.weight_decay = node["weight_decay"].as<double>(c.optimizer.weight_decay);
      c.batch = node["batch"].as<int>(c.batch);
      c.epochs = node["epochs"].as<int>(c.epochs);
      c.max_updates = node["max_updates"].as<std::int64_t>(c.max_updates);
      c.seed = node["seed"].as<std::uint64_t>(c.seed);
      c.augment.flip_probability = node["flip_probability"].as<double>(c.augment.flip_probability);
      c.augment.crop_width = node["crop_width"].as<int>(c.augment.crop_width);
      c.freeze_backbone = node["freeze_backbone"].as<bool>(c.freeze_backbone);
    } catch (const YAML::Exception& e) {
      throw Error(ErrorKind::configuration, std::string("training config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

struct UpdateLog {
  std::int64_t iteration = 0;
  int frame = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
};

/// Sub-sequence start offsets, non-overlapping, per sequence.
[[nodiscard]] inline std::vector<std::pair<std::size_t, std::size_t>> subsequence_starts(
    const std::vector<PreparedSequence>& data, int length) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < data.size(); ++s) {
    const std::size_t n = data[s].images.size();
    for (std::size_t start = 0; start + static_cast<std::size_t>(length) <= n; start += static_cast<std::size_t>(length)) {
      out.emplace_back(s, start);
    }
  }
  return out;
}

/// Trains a model with sub-sequences and truncated back-propagation.
///
/// Frames before the first window run forward only. Each update re-runs its
/// window from the detached memory stored before the window, so gradients
/// never reach frames outside it.
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainConfig cfg, ClassWeights weights)
      : model_(model), cfg_(std::move(cfg)), weights_(std::move(weights)), adam_(cfg_.optimizer), rng_(cfg_.seed) {
    cfg_.validate();
    if (static_cast<int>(weights_.weights.size()) != model.config().num_classes) {
      throw Error(ErrorKind::configuration, "class weights do not match the number of classes");
    }
    if (cfg_.freeze_backbone) model_.parameters().set_trainable("backbone", false);
  }

  [[nodiscard]] std::int64_t iteration() const noexcept { return iteration_; }
  [[nodiscard]] const std::vector<std::set<std::int32_t>>& audited_tags() const noexcept { return audited_; }
  [[nodiscard]] const ClassWeights& class_weights() const noexcept { return weights_; }

  std::function<void(const UpdateLog&)> on_update;
  /// Called with the offending batch before a numeric abort.
  std::function<void(const Checkpoint&)> on_nan;

  /// Runs the configured epochs over both unflipped and flipped versions of the data.
  std::vector<UpdateLog> train(const std::vector<PreparedSequence>& data,
                               const std::vector<PreparedSequence>& flipped = {}) {
    if (!flipped.empty() && flipped.size() != data.size()) {
      throw Error(ErrorKind::configuration, "flipped data must mirror the training data");
    }
    auto starts = subsequence_starts(data, cfg_.tbptt.length);
    if (starts.empty()) throw Error(ErrorKind::validation, "no sequence is as long as the sub-sequence length");
    std::vector<UpdateLog> log;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::shuffle(starts.begin(), starts.end(), rng_);
      for (std::size_t b = 0; b < starts.size(); b += static_cast<std::size_t>(cfg_.batch)) {
        std::vector<Clip> clips;
        for (std::size_t i = b; i < std::min(starts.size(), b + static_cast<std::size_t>(cfg_.batch)); ++i) {
          const auto [s, start] = starts[i];
          AugmentDecision d = draw_augmentation(rng_, cfg_.augment, data[s].images[start].width);
          if (flipped.empty()) d.flip = false;
          clips.push_back({d.flip ? &flipped[s] : &data[s], start, d});
        }
        if (!run_batch(clips, log)) return log;
      }
    }
    return log;
  }

  void save(Checkpoint& ck) const {
    model_.parameters().save_to(ck);
    adam_.save_to(ck);
    ck.add("trainer.iteration", DType::i64, {1}, {static_cast<double>(iteration_)});
  }

  void load(const Checkpoint& ck) {
    model_.parameters().load_from(ck);
    adam_.load_from(ck, model_.parameters());
    if (ck.contains("trainer.iteration")) iteration_ = static_cast<std::int64_t>(ck.get("trainer.iteration").values.at(0));
  }

 private:
  struct Clip {
    const PreparedSequence* seq;
    std::size_t start;
    AugmentDecision aug;
  };

  /// Network inputs of one frame of a clip after cropping.
  struct FrameData {
    RangeImage image;
    std::vector<std::int32_t> source;
    std::vector<std::int32_t> labels;
    bool labeled = false;
  };

  [[nodiscard]] FrameData frame_data(const Clip& clip, int t) const {
    const auto& seq = *clip.seq;
    const std::size_t k = clip.start + static_cast<std::size_t>(t);
    const RangeImage& full = seq.images[k];
    FrameData fd;
    const int cw = clip.aug.crop_width;
    if (cw > 0) {
      fd.image = crop_range_image(full, clip.aug.crop_offset, cw);
      if (t > 0) fd.source = crop_warp_source(seq.warp_sources[k], full.height, full.width, clip.aug.crop_offset, cw);
      if (seq.labels[k]) {
        fd.labels = crop_planes<std::int32_t>(*seq.labels[k], 1, full.height, full.width, clip.aug.crop_offset, cw);
        fd.labeled = true;
      }
    } else {
      fd.image = full;
      if (t > 0) fd.source = seq.warp_sources[k];
      if (seq.labels[k]) {
        fd.labels = *seq.labels[k];
        fd.labeled = true;
      }
    }
    if (fd.labels.empty()) fd.labels.assign(fd.image.pixel_to_point.size(), -1);
    return fd;
  }

  StepOutput<T> step(ModelState<T>& state, const std::vector<FrameData>& frames, int t) const {
    std::vector<FrameInput> in;
    for (const auto& fd : frames) {
      FrameInput fi;
      fi.image = &fd.image;
      fi.warp_source = t > 0 ? &fd.source : nullptr;
      in.push_back(fi);
    }
    StepOptions opt;
    opt.use_alignment = cfg_.use_alignment;
    return model_.recurrent_step(state, in, nn::Context{true}, opt);
  }

  bool run_batch(const std::vector<Clip>& clips, std::vector<UpdateLog>& log) {
    const int length = cfg_.tbptt.length;
    std::vector<std::vector<FrameData>> frames(static_cast<std::size_t>(length));
    for (int t = 0; t < length; ++t) {
      for (const auto& c : clips) frames[static_cast<std::size_t>(t)].push_back(frame_data(c, t));
    }
    // detached[t] = memory after frame t (0-based); index -1 is "no memory".
    std::vector<ad::Tensor<T>> detached(static_cast<std::size_t>(length));
    int processed = 0;  // frames advanced so far
    ModelState<T> state;
    const auto advance_to = [&](int frame_count) {
      ad::NoGradGuard guard;
      while (processed < frame_count) {
        state.memory = processed > 0 ? detached[static_cast<std::size_t>(processed - 1)] : ad::Tensor<T>();
        step(state, frames[static_cast<std::size_t>(processed)], processed);
        detached[static_cast<std::size_t>(processed)] = state.memory.detach();
        ++processed;
      }
    };

    for (const UpdateWindow& win : tbptt_schedule(cfg_.tbptt)) {
      if (cfg_.max_updates >= 0 && iteration_ >= cfg_.max_updates) return false;
      advance_to(win.first - 1);
      state = ModelState<T>{};
      if (win.first > 1) state.memory = detached[static_cast<std::size_t>(win.first - 2)];
      ad::Tensor<T> total;
      int labeled = 0;
      for (int f = win.first; f <= win.last; ++f) {
        const int t = f - 1;
        ad::TagScope tag(f);
        const auto out = step(state, frames[static_cast<std::size_t>(t)], t);
        if (f > processed) {
          detached[static_cast<std::size_t>(t)] = state.memory.detach();
          processed = f;
        }
        std::vector<std::int32_t> labels;
        bool any = false;
        for (const auto& fd : frames[static_cast<std::size_t>(t)]) {
          labels.insert(labels.end(), fd.labels.begin(), fd.labels.end());
          any = any || fd.labeled;
        }
        if (!any) continue;
        auto loss = ad::softmax_cross_entropy(out.logits, labels, weights_.weights);
        total = total.defined() ? ad::add(total, loss) : loss;
        ++labeled;
      }
      if (!total.defined() || !total.has_history()) continue;
      auto loss = ad::scale(total, static_cast<T>(1.0 / labeled));
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        if (on_nan) on_nan(dump_batch(frames, win));
        throw Error(ErrorKind::numeric, "non-finite loss at iteration " + std::to_string(iteration_) + ", frame " +
                                            std::to_string(win.frame));
      }
      if (cfg_.audit_graph) audited_.push_back(ad::reachable_tags(loss));
      model_.parameters().zero_grad();
      ad::backward(loss);
      adam_.step(model_.parameters(), iteration_);
      const UpdateLog entry{iteration_, win.frame, value, cfg_.optimizer.learning_rate(iteration_)};
      log.push_back(entry);
      if (on_update) on_update(entry);
      ++iteration_;
    }
    return true;
  }

  [[nodiscard]] static Checkpoint dump_batch(const std::vector<std::vector<FrameData>>& frames, const UpdateWindow& win) {
    Checkpoint ck;
    for (int f = win.first; f <= win.last; ++f) {
      const auto& batch = frames[static_cast<std::size_t>(f - 1)];
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& ri = batch[b].image;
        const std::string name = "frame" + std::to_string(f) + ".batch" + std::to_string(b);
        ck.add(name + ".image", DType::f32,
               {static_cast<std::uint64_t>(kNumChannels), static_cast<std::uint64_t>(ri.height),
                static_cast<std::uint64_t>(ri.width)},
               ri.channels);
        ck.add(name + ".labels", DType::i64, {static_cast<std::uint64_t>(ri.height), static_cast<std::uint64_t>(ri.width)},
               std::vector<double>(batch[b].labels.begin(), batch[b].labels.end()));
      }
    }
    ck.add("window", DType::i64, {3}, {static_cast<double>(win.frame), static_cast<double>(win.first),
                                       static_cast<double>(win.last)});
    return ck;
  }

  Model<T>& model_;
  TrainConfig cfg_;
  ClassWeights weights_;
  Adam<T> adam_;
  std::mt19937_64 rng_;
  std::int64_t iteration_ = 0;
  std::vector<std::set<std::int32_t>> audited_;
};

// ---------------------------------------------------------------------------
// Run configuration

/// Small network used for desk-scale experiments.
[[nodiscard]] inline ModelConfig toy_model_config(MemoryUpdateKind update = MemoryUpdateKind::residual) {
  ModelConfig c;
  c.backbone.extractor_units = {1, 1, 1};
  c.backbone.aggregator_units = 1;
  c.backbone.widths = {8, 8, 16};
  c.memory_units = 2;
  c.update = update;
  return c;
}

/// Model and training settings read from one YAML file.
struct RunConfig {
  ModelConfig model = toy_model_config();
  TrainConfig train;

  /// Training keys (see `TrainConfig::from_yaml`) plus update_kind, projection,
  /// widths, extractor_units, aggregator_units, memory_units.
  [[nodiscard]] static RunConfig from_yaml(const YAML::Node& node) {
    static const std::set<std::string> kKeys = {
        "update_kind", "projection", "widths", "extractor_units", "aggregator_units", "memory_units", "num_classes",
        "k1", "k2", "k3", "L", "lr0", "decay", "weight_decay", "batch", "epochs", "max_updates", "seed",
        "flip_probability", "crop_width", "freeze_backbone"};
    if (node && !node.IsNull()) {
      if (!node.IsMap()) throw Error(ErrorKind::configuration, "run config must be a mapping");
      for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        if (!kKeys.contains(key)) throw Error(ErrorKind::configuration, "unknown run config key '" + key + "'");
      }
    }
    RunConfig c;
    c.train = TrainConfig::from_yaml(node);
    try {
      if (node["update_kind"]) c.model.update = parse_memory_update(node["update_kind"].as<std::string>());
      if (node["projection"]) c.model.projection = parse_projection_mode(node["projection"].as<std::string>());
      if (const auto w = node["widths"]) c.model.backbone.widths = {w[0].as<int>(), w[1].as<int>(), w[2].as<int>()};
      if (const auto u = node["extractor_units"]) {
        c.model.backbone.extractor_units = {u[0].as<int>(), u[1].as<int>(), u[2].as<int>()};
      }
      c.model.backbone.aggregator_units = node["aggregator_units"].as<int>(c.model.backbone.aggregator_units);
      c.model.memory_units = node["memory_units"].as<int>(c.model.memory_units);
      c.model.num_classes = node["num_classes"].as<int>(c.model.num_classes);
    } catch (const YAML::Exception& e) {
      throw Error(ErrorKind::configuration, std::string("run config: ") + e.what());
    }
    c.model.backbone.validate();
    if (c.model.memory_units < 1) throw Error(ErrorKind::configuration, "memory_units must be at least 1");
    return c;
  }

  [[nodiscard]] static RunConfig load(const std::string& path) { return from_yaml(detail::load_yaml(path, "run config")); }

  /// Canonical text of every resolved setting; also the input of `hash()`.
  [[nodiscard]] std::string to_yaml() const {
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "update_kind" << YAML::Value << std::string(to_string(model.update));
    out << YAML::Key << "projection" << YAML::Value << std::string(to_string(model.projection));
    out << YAML::Key << "widths" << YAML::Value << YAML::Flow << YAML::BeginSeq << model.backbone.widths[0]
        << model.backbone.widths[1] << model.backbone.widths[2] << YAML::EndSeq;
    out << YAML::Key << "extractor_units" << YAML::Value << YAML::Flow << YAML::BeginSeq
        << model.backbone.extractor_units[0] << model.backbone.extractor_units[1] << model.backbone.extractor_units[2]
        << YAML::EndSeq;
    out << YAML::Key << "aggregator_units" << YAML::Value << model.backbone.aggregator_units;
    out << YAML::Key << "memory_units" << YAML::Value << model.memory_units;
    out << YAML::Key << "num_classes" << YAML::Value << model.num_classes;
    out << YAML::Key << "k1" << YAML::Value << train.tbptt.k1;
    out << YAML::Key << "k2" << YAML::Value << train.tbptt.k2;
    out << YAML::Key << "k3" << YAML::Value << train.tbptt.k3;
    out << YAML::Key << "L" << YAML::Value << train.tbptt.length;
    out << YAML::Key << "lr0" << YAML::Value << train.optimizer.lr0;
    out << YAML::Key << "decay" << YAML::Value << train.optimizer.decay;
    out << YAML::Key << "weight_decay" << YAML::Value << train.optimizer.weight_decay;
    out << YAML::Key << "batch" << YAML::Value << train.batch;
    out << YAML::Key << "epochs" << YAML::Value << train.epochs;
    out << YAML::Key << "max_updates" << YAML::Value << train.max_updates;
    out << YAML::Key << "seed" << YAML::Value << train.seed;
    out << YAML::Key << "flip_probability" << YAML::Value << train.augment.flip_probability;
    out << YAML::Key << "crop_width" << YAML::Value << train.augment.crop_width;
    out << YAML::Key << "freeze_backbone" << YAML::Value << train.freeze_backbone;
    out << YAML::EndMap;
    return out.c_str();
  }

  /// FNV-1a 64 of `to_yaml()`, as 16 hex digits.
  [[nodiscard]] std::string hash() const { return fnv1a_hex(to_yaml()); }
};

/// Pixel-label histogram over every labeled frame of the prepared data.
[[nodiscard]] inline std::vector<std::uint64_t> pixel_histogram(const std::vector<PreparedSequence>& data,
                                                                int num_classes) {
  std::vector<std::uint64_t> h(static_cast<std::size_t>(num_classes), 0);
  for (const auto& s : data) {
    for (const auto& l : s.labels) {
      if (!l) continue;
      const auto part = label_histogram(*l, num_classes);
      for (std::size_t c = 0; c < h.size(); ++c) h[c] += part[c];
    }
  }
  return h;
}

}  // namespace tlseg

#endif  // TLSEG_TRAINING_HPP
