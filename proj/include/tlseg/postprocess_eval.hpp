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

#ifndef TLSEG_POSTPROCESS_EVAL_HPP
#define TLSEG_POSTPROCESS_EVAL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tlseg/autodiff.hpp"
#include "tlseg/common.hpp"
#include "tlseg/network.hpp"
#include "tlseg/sensor_geometry.hpp"
#include "tlseg/temporal_alignment.hpp"
#include "tlseg/training.hpp"

namespace tlseg {

// ---------------------------------------------------------------------------
// KNN back-projection

struct KnnOptions {
  int k = 5;
  int window = 5;  ///< odd side length of the pixel window
  std::int32_t unlabeled = -1;
};

/// Assigns a label to every point of `pc` from the per-pixel labels of `ri`.
///
/// A point that owns its pixel takes that pixel's label. A shadowed point votes
/// among the k occupied pixels of the window around its pixel whose range is
/// closest to its own; ties go to the label of the nearest tied candidate. With
/// no occupied candidate it falls back to its own pixel or `unlabeled`.
[[nodiscard]] inline std::vector<std::int32_t> knn_backproject(const PointCloud& pc, const RangeImage& ri,
                                                               std::span<const std::int32_t> pixel_labels,
                                                               const KnnOptions& opt = {}) {
  if (ri.point_to_pixel.size() != pc.size()) throw Error(ErrorKind::shape, "pixel map does not cover the cloud");
  if (pixel_labels.size() != ri.pixel_to_point.size()) throw Error(ErrorKind::shape, "one label per pixel required");
  if (opt.k < 1 || opt.window < 1 || opt.window % 2 == 0) {
    throw Error(ErrorKind::configuration, "knn needs k >= 1 and an odd window");
  }
  const int half = opt.window / 2;
  const std::size_t plane = static_cast<std::size_t>(ri.height) * ri.width;
  std::vector<std::int32_t> out(pc.size(), opt.unlabeled);
  struct Candidate {
    double distance;
    std::int32_t label;
  };
  std::vector<Candidate> cand;
  std::map<std::int32_t, int> votes;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const PixelCoord px = ri.point_to_pixel[i];
    if (px.u < 0 || px.v < 0) continue;
    const std::size_t own = ri.pixel_index(px.u, px.v);
    if (ri.pixel_to_point[own] == static_cast<std::int32_t>(i)) {
      out[i] = pixel_labels[own];
      continue;
    }
    const Point& p = pc[i];
    const double r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    cand.clear();
    for (int du = -half; du <= half; ++du) {
      const int u = px.u + du;
      if (u < 0 || u >= ri.height) continue;
      for (int dv = -half; dv <= half; ++dv) {
        const auto v = static_cast<int>(wrap_index(static_cast<long long>(px.v) + dv, ri.width));
        const std::size_t k = ri.pixel_index(u, v);
        if (ri.pixel_to_point[k] < 0) continue;
        cand.push_back({std::abs(ri.channels[kRange * plane + k] - r), pixel_labels[k]});
      }
    }
    if (cand.empty()) {
      out[i] = ri.pixel_to_point[own] >= 0 ? pixel_labels[own] : opt.unlabeled;
      continue;
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) { return a.distance < b.distance; });
    const std::size_t kk = std::min<std::size_t>(cand.size(), static_cast<std::size_t>(opt.k));
    votes.clear();
    int best = 0;
    for (std::size_t j = 0; j < kk; ++j) best = std::max(best, ++votes[cand[j].label]);
    for (std::size_t j = 0; j < kk; ++j) {
      if (votes[cand[j].label] == best) {
        out[i] = cand[j].label;
        break;
      }
    }
  }
  return out;
}

/// Per-point labels read directly from each point's pixel.
[[nodiscard]] inline std::vector<std::int32_t> pixel_lookup(const RangeImage& ri, std::span<const std::int32_t> pixel_labels,
                                                            std::int32_t unlabeled = -1) {
  std::vector<std::int32_t> out(ri.point_to_pixel.size(), unlabeled);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const PixelCoord px = ri.point_to_pixel[i];
    if (px.u >= 0 && px.v >= 0) out[i] = pixel_labels[ri.pixel_index(px.u, px.v)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Majority-vote temporal baseline

/// One frame contributing to a vote: its points, range image, pose and pixel labels.
struct LabeledFrameView {
  const PointCloud* cloud = nullptr;
  const RangeImage* image = nullptr;
  RigidTransform pose;
  const std::vector<std::int32_t>* labels = nullptr;  ///< per pixel, -1 where none
};

inline constexpr int kMajorityVoteFrames = 5;

/// Warps every earlier frame's label image into the last frame and votes per
/// pixel. Ties go to the current label, else to the most recent tied frame.
[[nodiscard]] inline std::vector<std::int32_t> majority_vote_baseline(const std::vector<LabeledFrameView>& frames,
                                                                      const SensorModel& m, ProjectionMode mode) {
  if (frames.empty()) throw Error(ErrorKind::sequence, "majority vote without frames");
  const LabeledFrameView& cur = frames.back();
  const std::size_t pixels = cur.labels->size();
  // contributions[0] is the current frame, then newest to oldest
  std::vector<std::vector<std::int32_t>> contributions{*cur.labels};
  for (std::size_t j = frames.size() - 1; j-- > 0;) {
    const LabeledFrameView& past = frames[j];
    const RigidTransform rel = relative_transform(past.pose, cur.pose);
    const auto source = warp_source_index(compute_warp_map(*past.cloud, *past.image, rel, m, mode));
    std::vector<std::int32_t> warped(pixels, -1);
    for (std::size_t k = 0; k < pixels; ++k) {
      if (source[k] >= 0) warped[k] = (*past.labels)[static_cast<std::size_t>(source[k])];
    }
    contributions.push_back(std::move(warped));
  }
  std::vector<std::int32_t> out(pixels, -1);
  std::map<std::int32_t, int> votes;
  for (std::size_t k = 0; k < pixels; ++k) {
    votes.clear();
    int best = 0;
    for (const auto& c : contributions) {
      if (c[k] >= 0) best = std::max(best, ++votes[c[k]]);
    }
    for (const auto& c : contributions) {
      if (c[k] >= 0 && votes[c[k]] == best) {
        out[k] = c[k];
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Confusion matrix and IoU

/// C x C counts, row = ground truth, column = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes) : c_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 1) throw Error(ErrorKind::configuration, "confusion matrix needs at least one class");
  }

  [[nodiscard]] int num_classes() const noexcept { return c_; }
  [[nodiscard]] std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * c_ + pred]; }
  [[nodiscard]] std::uint64_t total() const noexcept {
    std::uint64_t n = 0;
    for (auto v : counts_) n += v;
    return n;
  }

  /// Adds point pairs; ground truth equal to `ignore_id` is skipped.
  void accumulate(std::span<const std::int32_t> gt, std::span<const std::int32_t> pred, std::int32_t ignore_id) {
    if (gt.size() != pred.size()) throw Error(ErrorKind::shape, "ground truth and prediction differ in length");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore_id) continue;
      if (gt[i] < 0 || gt[i] >= c_ || pred[i] < 0 || pred[i] >= c_) {
        throw Error(ErrorKind::validation, "label out of range at index " + std::to_string(i));
      }
      ++counts_[static_cast<std::size_t>(gt[i]) * c_ + pred[i]];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.c_ != c_) throw Error(ErrorKind::shape, "cannot merge confusion matrices of different size");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int c_;
  std::vector<std::uint64_t> counts_;
};

struct IouResult {
  std::vector<std::optional<double>> iou;  ///< empty for classes with TP + FP + FN = 0
  double mean = 0.0;
};

/// Per-class IoU and their mean. Classes with an empty union are left out of
/// the mean, or scored 0 when `strict`.
[[nodiscard]] inline IouResult miou(const ConfusionMatrix& cm, bool strict = false) {
  if (cm.total() == 0) throw Error(ErrorKind::undefined_metric, "mIoU of an empty confusion matrix");
  const int c = cm.num_classes();
  IouResult r;
  double sum = 0.0;
  int used = 0;
  for (int k = 0; k < c; ++k) {
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    for (int j = 0; j < c; ++j) {
      if (j == k) continue;
      fp += cm.at(j, k);
      fn += cm.at(k, j);
    }
    const std::uint64_t tp = cm.at(k, k);
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) {
      r.iou.emplace_back();
      if (strict) ++used;
      continue;
    }
    const double v = static_cast<double>(tp) / static_cast<double>(denom);
    r.iou.emplace_back(v);
    sum += v;
    ++used;
  }
  r.mean = sum / used;
  return r;
}

/// Tab-separated report: one `class<TAB>IoU` line per class, then `mIoU<TAB>value`.
[[nodiscard]] inline std::string format_report(const IouResult& r, const std::vector<std::string>& names) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(6);
  for (std::size_t c = 0; c < r.iou.size(); ++c) {
    out << (c < names.size() ? names[c] : "class" + std::to_string(c)) << '\t';
    if (r.iou[c]) {
      out << *r.iou[c];
    } else {
      out << "n/a";
    }
    out << '\n';
  }
  out << "mIoU\t" << r.mean << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Sequence evaluation

struct EvalOptions {
  bool use_alignment = true;
  bool empty_memory = false;
  bool majority_vote = false;
  bool knn = false;
  KnnOptions knn_options;
};

/// Argmax over classes per pixel of a single batch entry.
template <typename T>
[[nodiscard]] std::vector<std::int32_t> argmax_labels(const ad::Tensor<T>& logits, int batch_index = 0) {
  const ad::Shape s = logits.shape();
  const std::size_t plane = s.plane();
  const auto d = logits.data();
  const std::size_t base = static_cast<std::size_t>(batch_index) * s.c * plane;
  std::vector<std::int32_t> out(plane, 0);
  for (std::size_t i = 0; i < plane; ++i) {
    T best = d[base + i];
    for (int c = 1; c < s.c; ++c) {
      if (d[base + c * plane + i] > best) {
        best = d[base + c * plane + i];
        out[i] = c;
      }
    }
  }
  return out;
}

/// Runs recurrent inference over a prepared sequence and accumulates point-level
/// counts for labeled frames. Returns the per-point predictions of every frame.
template <typename T>
std::vector<std::vector<std::int32_t>> evaluate_sequence(const Model<T>& model, const PreparedSequence& seq,
                                                         const Sequence& frames, const SensorModel& m,
                                                         const EvalOptions& opt, ConfusionMatrix& cm,
                                                         std::int32_t ignore_id) {
  if (seq.images.size() != frames.size()) throw Error(ErrorKind::shape, "prepared data does not match the sequence");
  ad::NoGradGuard guard;
  ModelState<T> state;
  StepOptions so;
  so.use_alignment = opt.use_alignment;
  so.empty_memory = opt.empty_memory;
  std::deque<std::vector<std::int32_t>> history;  // predicted pixel labels, oldest first
  std::vector<std::vector<std::int32_t>> predictions;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    FrameInput fi;
    fi.image = &seq.images[t];
    fi.pose = seq.poses[t];
    fi.index = static_cast<std::int64_t>(t);
    fi.warp_source = t > 0 ? &seq.warp_sources[t] : nullptr;
    const auto out = model.recurrent_step(state, {fi}, nn::Context{false}, so);
    auto labels = argmax_labels(out.logits);
    for (std::size_t k = 0; k < labels.size(); ++k) {
      if (seq.images[t].pixel_to_point[k] < 0) labels[k] = -1;
    }
    if (opt.majority_vote) {
      history.push_back(labels);
      if (history.size() > static_cast<std::size_t>(kMajorityVoteFrames)) history.pop_front();
      std::vector<LabeledFrameView> views;
      const std::size_t first = t + 1 - history.size();
      for (std::size_t j = 0; j < history.size(); ++j) {
        views.push_back({&seq.clouds[first + j], &seq.images[first + j], seq.poses[first + j], &history[j]});
      }
      labels = majority_vote_baseline(views, m, seq.images[t].mode);
    }
    auto points = opt.knn ? knn_backproject(seq.clouds[t], seq.images[t], labels, opt.knn_options)
                          : pixel_lookup(seq.images[t], labels);
    if (frames[t].labels) cm.accumulate(*frames[t].labels, points, ignore_id);
    predictions.push_back(std::move(points));
  }
  return predictions;
}

}  // namespace tlseg

#endif  // TLSEG_POSTPROCESS_EVAL_HPP
