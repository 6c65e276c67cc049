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

#ifndef TLSEG_NETWORK_HPP
#define TLSEG_NETWORK_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "tlseg/autodiff.hpp"
#include "tlseg/checkpoint.hpp"
#include "tlseg/common.hpp"
#include "tlseg/sensor_geometry.hpp"
#include "tlseg/temporal_alignment.hpp"

/**
 * \file
 * \brief Recurrent range-image segmentation network.
 *
 * A frame passes through a multi-scale residual backbone, the backbone features
 * are fused with the aligned memory of the previous frame by a memory update
 * (residual units or a ConvGRU), and a 1x1 convolution with softmax classifies
 * every pixel of the updated memory. Downsampling is horizontal only; the
 * vertical resolution stays constant.
 */

namespace tlseg {

template <typename T>
struct Parameter {
  std::string name;
  ad::Tensor<T> tensor;
  bool trainable = true;
};

/// Non-trainable state (batch-norm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  std::vector<T> values;
};

/// Owns every parameter and buffer of a model. Names are unique.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : rng_(seed) {}
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  ad::Tensor<T> add(const std::string& name, ad::Shape shape, std::vector<T> init) {
    check_unique(name);
    auto t = ad::Tensor<T>::from_data(shape, std::move(init), true);
    params_.push_back(std::make_unique<Parameter<T>>(Parameter<T>{name, t, true}));
    return t;
  }

  /// He-normal initialization, std = sqrt(2 / fan_in).
  ad::Tensor<T> add_he_normal(const std::string& name, ad::Shape shape, int fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    std::vector<T> v(shape.numel());
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    return add(name, shape, std::move(v));
  }

  Buffer<T>& add_buffer(const std::string& name, std::size_t size, T value) {
    check_unique(name);
    buffers_.push_back(std::make_unique<Buffer<T>>(Buffer<T>{name, std::vector<T>(size, value)}));
    return *buffers_.back();
  }

  [[nodiscard]] std::vector<Parameter<T>*> parameters() const {
    std::vector<Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }
  [[nodiscard]] std::vector<Buffer<T>*> buffers() const {
    std::vector<Buffer<T>*> out;
    for (const auto& b : buffers_) out.push_back(b.get());
    return out;
  }

  void set_trainable(std::string_view prefix, bool trainable) {
    for (auto& p : params_) {
      if (p->name.starts_with(prefix)) p->trainable = trainable;
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->tensor.zero_grad();
  }

  [[nodiscard]] std::size_t count(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (!trainable_only || p->trainable) n += p->tensor.numel();
    }
    return n;
  }

  void save_to(Checkpoint& ck) const {
    const DType dt = sizeof(T) == 4 ? DType::f32 : DType::f64;
    for (const auto& p : params_) {
      const auto& s = p->tensor.shape();
      ck.add(p->name, dt, {static_cast<std::uint64_t>(s.n), static_cast<std::uint64_t>(s.c),
                           static_cast<std::uint64_t>(s.h), static_cast<std::uint64_t>(s.w)},
             std::vector<double>(p->tensor.data().begin(), p->tensor.data().end()));
    }
    for (const auto& b : buffers_) {
      ck.add(b->name, dt, {b->values.size()}, std::vector<double>(b->values.begin(), b->values.end()));
    }
  }

  /// Throws a shape error naming the first parameter whose record is missing or mismatched.
  void load_from(const Checkpoint& ck) {
    for (auto& p : params_) {
      if (!ck.contains(p->name)) throw Error(ErrorKind::shape, "checkpoint lacks layer '" + p->name + "'");
      const auto& r = ck.get(p->name);
      const auto& s = p->tensor.shape();
      const std::vector<std::uint64_t> want{static_cast<std::uint64_t>(s.n), static_cast<std::uint64_t>(s.c),
                                            static_cast<std::uint64_t>(s.h), static_cast<std::uint64_t>(s.w)};
      if (r.dims != want) throw Error(ErrorKind::shape, "layer '" + p->name + "' has a different shape in the checkpoint");
      auto d = p->tensor.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(r.values[i]);
    }
    for (auto& b : buffers_) {
      if (!ck.contains(b->name)) throw Error(ErrorKind::shape, "checkpoint lacks buffer '" + b->name + "'");
      const auto& r = ck.get(b->name);
      if (r.values.size() != b->values.size()) {
        throw Error(ErrorKind::shape, "buffer '" + b->name + "' has a different shape in the checkpoint");
      }
      for (std::size_t i = 0; i < r.values.size(); ++i) b->values[i] = static_cast<T>(r.values[i]);
    }
  }

 private:
  void check_unique(const std::string& name) {
    for (const auto& p : params_) {
      if (p->name == name) throw Error(ErrorKind::validation, "duplicate parameter name '" + name + "'");
    }
    for (const auto& b : buffers_) {
      if (b->name == name) throw Error(ErrorKind::validation, "duplicate parameter name '" + name + "'");
    }
  }

  std::mt19937_64 rng_;
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::vector<std::unique_ptr<Buffer<T>>> buffers_;
};

namespace nn {

/// Tracks train/eval mode for batch normalization.
struct Context {
  bool training = true;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterStore<T>& store, const std::string& name, int cin, int cout, int kh, int kw, bool bias,
         ad::Conv2dOptions opt = {})
      : opt_(opt) {
    weight_ = store.add_he_normal(name + ".weight", {cout, cin, kh, kw}, cin * kh * kw);
    if (bias) bias_ = store.add(name + ".bias", {1, cout, 1, 1}, std::vector<T>(static_cast<std::size_t>(cout), T{0}));
  }

  /// 3x3, padding 1 (zero vertically, circular horizontally).
  static Conv2d k3(ParameterStore<T>& store, const std::string& name, int cin, int cout, bool bias,
                   int stride_w = 1) {
    return Conv2d(store, name, cin, cout, 3, 3, bias, {1, stride_w, 1, 1});
  }
  static Conv2d k1(ParameterStore<T>& store, const std::string& name, int cin, int cout, bool bias,
                   int stride_w = 1) {
    return Conv2d(store, name, cin, cout, 1, 1, bias, {1, stride_w, 0, 0});
  }

  [[nodiscard]] ad::Tensor<T> operator()(const ad::Tensor<T>& x) const { return ad::conv2d(x, weight_, bias_, opt_); }

  [[nodiscard]] ad::Tensor<T>& weight() { return weight_; }
  [[nodiscard]] ad::Tensor<T>& bias() { return bias_; }

 private:
  ad::Tensor<T> weight_;
  ad::Tensor<T> bias_;
  ad::Conv2dOptions opt_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore<T>& store, const std::string& name, int channels) {
    const auto c = static_cast<std::size_t>(channels);
    gamma_ = store.add(name + ".gamma", {1, channels, 1, 1}, std::vector<T>(c, T{1}));
    beta_ = store.add(name + ".beta", {1, channels, 1, 1}, std::vector<T>(c, T{0}));
    mean_ = &store.add_buffer(name + ".running_mean", c, T{0});
    var_ = &store.add_buffer(name + ".running_var", c, T{1});
  }

  [[nodiscard]] ad::Tensor<T> operator()(const ad::Tensor<T>& x, const Context& ctx) const {
    return ad::batch_norm(x, gamma_, beta_, std::span<T>(mean_->values), std::span<T>(var_->values), ctx.training);
  }

  [[nodiscard]] ad::Tensor<T>& gamma() { return gamma_; }
  [[nodiscard]] ad::Tensor<T>& beta() { return beta_; }

 private:
  ad::Tensor<T> gamma_;
  ad::Tensor<T> beta_;
  Buffer<T>* mean_ = nullptr;
  Buffer<T>* var_ = nullptr;
};

/// Pre-activation residual unit: x + conv(relu(bn(conv(relu(bn(x)))))).
///
/// With `stride_w = 2` or a channel change the skip path becomes a 1x1
/// projection of the activated input. With all conv weights zero and an
/// identity skip the unit is the identity map.
template <typename T>
class ResidualUnit {
 public:
  ResidualUnit() = default;
  ResidualUnit(ParameterStore<T>& store, const std::string& name, int cin, int cout, int stride_w = 1)
      : bn1_(store, name + ".bn1", cin),
        conv1_(Conv2d<T>::k3(store, name + ".conv1", cin, cout, false, stride_w)),
        bn2_(store, name + ".bn2", cout),
        conv2_(Conv2d<T>::k3(store, name + ".conv2", cout, cout, false)) {
    if (cin != cout || stride_w != 1) {
      projection_ = Conv2d<T>::k1(store, name + ".proj", cin, cout, false, stride_w);
    }
  }

  [[nodiscard]] ad::Tensor<T> operator()(const ad::Tensor<T>& x, const Context& ctx) const {
    const auto a = ad::relu(bn1_(x, ctx));
    const auto h = conv2_(ad::relu(bn2_(conv1_(a), ctx)));
    const auto skip = projection_ ? (*projection_)(a) : x;
    return ad::add(skip, h);
  }

  [[nodiscard]] Conv2d<T>& conv1() { return conv1_; }
  [[nodiscard]] Conv2d<T>& conv2() { return conv2_; }

 private:
  BatchNorm2d<T> bn1_;
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn2_;
  Conv2d<T> conv2_;
  std::optional<Conv2d<T>> projection_;
};

template <typename T>
class ResidualStack {
 public:
  ResidualStack() = default;
  ResidualStack(ParameterStore<T>& store, const std::string& name, int count, int cin, int cout, int first_stride_w) {
    for (int i = 0; i < count; ++i) {
      units_.emplace_back(store, name + ".unit" + std::to_string(i), i == 0 ? cin : cout, cout,
                          i == 0 ? first_stride_w : 1);
    }
  }

  [[nodiscard]] ad::Tensor<T> operator()(ad::Tensor<T> x, const Context& ctx) const {
    for (const auto& u : units_) x = u(x, ctx);
    return x;
  }

  [[nodiscard]] std::vector<ResidualUnit<T>>& units() { return units_; }

 private:
  std::vector<ResidualUnit<T>> units_;
};

/// Fuses a fine stream with a coarser one at twice the horizontal stride:
/// transposed-conv upsampling of the coarse stream, concatenation, 1x1 fuse, residual units.
template <typename T>
class Aggregator {
 public:
  Aggregator() = default;
  Aggregator(ParameterStore<T>& store, const std::string& name, int fine_c, int coarse_c, int out_c, int units) {
    up_weight_ = store.add_he_normal(name + ".up.weight", {coarse_c, out_c, 1, 2}, coarse_c);
    up_bias_ = store.add(name + ".up.bias", {1, out_c, 1, 1}, std::vector<T>(static_cast<std::size_t>(out_c), T{0}));
    fuse_ = Conv2d<T>::k1(store, name + ".fuse", fine_c + out_c, out_c, true);
    stack_ = ResidualStack<T>(store, name + ".res", units, out_c, out_c, 1);
  }

  [[nodiscard]] ad::Tensor<T> operator()(const ad::Tensor<T>& fine, const ad::Tensor<T>& coarse,
                                         const Context& ctx) const {
    const auto up = ad::conv_transpose2d(coarse, up_weight_, up_bias_);
    return stack_(fuse_(ad::concat_channels<T>({fine, up})), ctx);
  }

 private:
  ad::Tensor<T> up_weight_;
  ad::Tensor<T> up_bias_;
  Conv2d<T> fuse_;
  ResidualStack<T> stack_;
};

}  // namespace nn

/// Backbone topology: three extractors at horizontal scales 1, 1/2, 1/4 and
/// three aggregation nodes bringing the streams back to full resolution.
struct BackboneConfig {
  std::array<int, 3> extractor_units{4, 5, 6};
  int aggregator_units = 2;
  std::array<int, 3> widths{16, 16, 32};
  bool downsample_first = false;  ///< reinstates downsampling in the first extractor
  int input_channels = kNumChannels;

  [[nodiscard]] static BackboneConfig full_widths() {
    BackboneConfig cfg;
    cfg.widths = {64, 64, 128};
    return cfg;
  }

  void validate() const {
    for (int w : widths) {
      if (w <= 0) throw Error(ErrorKind::configuration, "backbone widths must be positive");
    }
    for (int u : extractor_units) {
      if (u < 1) throw Error(ErrorKind::configuration, "every extractor needs at least one residual unit");
    }
    if (aggregator_units < 0) throw Error(ErrorKind::configuration, "aggregator units must be >= 0");
  }

  /// Output channels, equal to the memory channels.
  [[nodiscard]] int output_channels() const noexcept { return widths[2]; }

  /// Residual units on the longest input-to-output path.
  [[nodiscard]] int longest_residual_path() const noexcept {
    return extractor_units[0] + extractor_units[1] + extractor_units[2] + 2 * aggregator_units;
  }
};

template <typename T>
class Backbone {
 public:
  Backbone(ParameterStore<T>& store, const BackboneConfig& cfg, const std::string& name = "backbone") : cfg_(cfg) {
    cfg.validate();
    const auto [c1, c2, c3] = cfg.widths;
    const int first_stride = cfg.downsample_first ? 2 : 1;
    e1_ = nn::ResidualStack<T>(store, name + ".extract1", cfg.extractor_units[0], cfg.input_channels, c1, first_stride);
    e2_ = nn::ResidualStack<T>(store, name + ".extract2", cfg.extractor_units[1], c1, c2, 2);
    e3_ = nn::ResidualStack<T>(store, name + ".extract3", cfg.extractor_units[2], c2, c3, 2);
    a1b_ = nn::Aggregator<T>(store, name + ".agg1b", c1, c2, c1, cfg.aggregator_units);
    a2b_ = nn::Aggregator<T>(store, name + ".agg2b", c2, c3, c3, cfg.aggregator_units);
    a1c_ = nn::Aggregator<T>(store, name + ".agg1c", c1, c3, c3, cfg.aggregator_units);
    if (cfg.downsample_first) {
      restore_weight_ = store.add_he_normal(name + ".restore.weight", {c3, c3, 1, 2}, c3);
      restore_bias_ = store.add(name + ".restore.bias", {1, c3, 1, 1}, std::vector<T>(static_cast<std::size_t>(c3), T{0}));
    }
  }

  /// (n, 6, h, w) -> (n, c_mem, h, w). `w` must be divisible by 4 (8 with first-stage downsampling).
  [[nodiscard]] ad::Tensor<T> operator()(const ad::Tensor<T>& x, const nn::Context& ctx) const {
    const int divisor = cfg_.downsample_first ? 8 : 4;
    if (x.shape().c != cfg_.input_channels || x.shape().w % divisor != 0) {
      throw Error(ErrorKind::shape, "backbone input " + ad::to_string(x.shape()) + " incompatible with config");
    }
    const auto f1 = e1_(x, ctx);
    const auto f2 = e2_(f1, ctx);
    const auto f3 = e3_(f2, ctx);
    const auto g1 = a1b_(f1, f2, ctx);
    const auto g2 = a2b_(f2, f3, ctx);
    auto out = a1c_(g1, g2, ctx);
    if (cfg_.downsample_first) out = ad::conv_transpose2d(out, restore_weight_, restore_bias_);
    return out;
  }

  [[nodiscard]] const BackboneConfig& config() const noexcept { return cfg_; }

 private:
  BackboneConfig cfg_;
  nn::ResidualStack<T> e1_, e2_, e3_;
  nn::Aggregator<T> a1b_, a2b_, a1c_;
  ad::Tensor<T> restore_weight_, restore_bias_;
};

enum class MemoryUpdateKind { none, residual, conv_gru };

[[nodiscard]] inline MemoryUpdateKind parse_memory_update(std::string_view s) {
  if (s == "none" || s == "single_frame") return MemoryUpdateKind::none;
  if (s == "residual") return MemoryUpdateKind::residual;
  if (s == "gru" || s == "conv_gru") return MemoryUpdateKind::conv_gru;
  throw Error(ErrorKind::validation, "unknown memory update '" + std::string(s) + "'");
}

[[nodiscard]] inline std::string_view to_string(MemoryUpdateKind k) noexcept {
  switch (k) {
    case MemoryUpdateKind::none: return "none";
    case MemoryUpdateKind::residual: return "residual";
    case MemoryUpdateKind::conv_gru: return "gru";
  }
  return "?";
}

/// concat(H~, F) -> 1x1 conv (2c -> c) -> BN -> four residual units.
template <typename T>
class ResidualMemoryUpdate {
 public:
  static constexpr int kUnits = 4;

  ResidualMemoryUpdate(ParameterStore<T>& store, int channels, int units = kUnits, const std::string& name = "memory")
      : channels_(channels),
        reduce_(nn::Conv2d<T>::k1(store, name + ".reduce", 2 * channels, channels, true)),
        bn_(store, name + ".bn", channels),
        stack_(store, name + ".res", units, channels, channels, 1) {}

  [[nodiscard]] ad::Tensor<T> operator()(const ad::Tensor<T>& features, const ad::Tensor<T>& aligned_memory,
                                         const nn::Context& ctx) const {
    check(features, aligned_memory, channels_);
    return stack_(bn_(reduce_(ad::concat_channels<T>({aligned_memory, features})), ctx), ctx);
  }

  [[nodiscard]] nn::ResidualStack<T>& units() { return stack_; }
  [[nodiscard]] nn::Conv2d<T>& reduce() { return reduce_; }

  static void check(const ad::Tensor<T>& f, const ad::Tensor<T>& h, int channels) {
    if (f.shape().c != channels || !(f.shape() == h.shape())) {
      throw Error(ErrorKind::shape, "memory update expects features and memory of shape (n," + std::to_string(channels) +
                                        ",h,w); got " + ad::to_string(f.shape()) + " and " + ad::to_string(h.shape()));
    }
  }

 private:
  int channels_;
  nn::Conv2d<T> reduce_;
  nn::BatchNorm2d<T> bn_;
  nn::ResidualStack<T> stack_;
};

/// Intermediate tensors of one ConvGRU update, exposed for tests.
template <typename T>
struct GruTrace {
  ad::Tensor<T> update_gate;  ///< Z
  ad::Tensor<T> reset_gate;   ///< R
  ad::Tensor<T> candidate;    ///< H'
  ad::Tensor<T> memory;       ///< H_t
};

/// Z = sigmoid(W_z*F + U_z*H~), R = sigmoid(W_r*F + U_r*H~),
/// H' = tanh(W*F + U*(R . H~)), H_t = (1 - Z) . H~ + Z . H'.
/// 3x3 kernels; biases on the W path only.
template <typename T>
class ConvGruUpdate {
 public:
  ConvGruUpdate(ParameterStore<T>& store, int channels, const std::string& name = "memory")
      : channels_(channels),
        wz_(nn::Conv2d<T>::k3(store, name + ".W_z", channels, channels, true)),
        wr_(nn::Conv2d<T>::k3(store, name + ".W_r", channels, channels, true)),
        w_(nn::Conv2d<T>::k3(store, name + ".W", channels, channels, true)),
        uz_(nn::Conv2d<T>::k3(store, name + ".U_z", channels, channels, false)),
        ur_(nn::Conv2d<T>::k3(store, name + ".U_r", channels, channels, false)),
        u_(nn::Conv2d<T>::k3(store, name + ".U", channels, channels, false)) {}

  [[nodiscard]] GruTrace<T> trace(const ad::Tensor<T>& f, const ad::Tensor<T>& h) const {
    ResidualMemoryUpdate<T>::check(f, h, channels_);
    GruTrace<T> t;
    t.update_gate = ad::sigmoid(ad::add(wz_(f), uz_(h)));
    t.reset_gate = ad::sigmoid(ad::add(wr_(f), ur_(h)));
    t.candidate = ad::tanh(ad::add(w_(f), u_(ad::mul(t.reset_gate, h))));
    t.memory = ad::add(ad::mul(ad::one_minus(t.update_gate), h), ad::mul(t.update_gate, t.candidate));
    return t;
  }

  [[nodiscard]] ad::Tensor<T> operator()(const ad::Tensor<T>& f, const ad::Tensor<T>& h, const nn::Context&) const {
    return trace(f, h).memory;
  }

  [[nodiscard]] nn::Conv2d<T>& W_z() { return wz_; }
  [[nodiscard]] nn::Conv2d<T>& W_r() { return wr_; }
  [[nodiscard]] nn::Conv2d<T>& W() { return w_; }
  [[nodiscard]] nn::Conv2d<T>& U_z() { return uz_; }
  [[nodiscard]] nn::Conv2d<T>& U_r() { return ur_; }
  [[nodiscard]] nn::Conv2d<T>& U() { return u_; }

 private:
  int channels_;
  nn::Conv2d<T> wz_, wr_, w_, uz_, ur_, u_;
};

struct ModelConfig {
  BackboneConfig backbone;
  MemoryUpdateKind update = MemoryUpdateKind::residual;
  int num_classes = 4;
  ProjectionMode projection = ProjectionMode::adaptive;
  int memory_units = ResidualMemoryUpdate<float>::kUnits;  ///< residual units of the residual memory update
};

/// One frame of a batch as seen by the recurrent step.
struct FrameInput {
  const PointCloud* points = nullptr;
  const RangeImage* image = nullptr;
  RigidTransform pose;
  std::int64_t index = -1;  ///< position in the sequence; checked for order when set
  /// Precomputed source pixel per current pixel (-1 when none); replaces the
  /// warp computed from the stored previous frame.
  const std::vector<std::int32_t>* warp_source = nullptr;
};

/// Ablation switches for inference.
struct StepOptions {
  bool use_alignment = true;  ///< temporal memory alignment; off passes H_{t-1} unchanged
  bool empty_memory = false;  ///< feed an all-zero memory on every frame
};

/// Recurrent state of a batch of sequences.
template <typename T>
struct ModelState {
  ad::Tensor<T> memory;  ///< H_t, (n, c_mem, h, w); undefined before the first frame
  std::vector<std::vector<std::uint8_t>> valid;  ///< per batch entry, pixels that received a warped feature
  std::int64_t frame = 0;
  std::int64_t last_index = -1;
  std::vector<PointCloud> prev_points;
  std::vector<RangeImage> prev_images;
  std::vector<RigidTransform> prev_poses;

  void reset() { *this = ModelState{}; }
};

template <typename T>
struct StepOutput {
  ad::Tensor<T> logits;        ///< (n, C, h, w)
  ad::Tensor<T> aligned;       ///< H~ fed to the update
  ad::Tensor<T> features;      ///< F_t
};

/// Packs range images into an (n, 6, h, w) tensor.
template <typename T>
[[nodiscard]] ad::Tensor<T> images_to_tensor(const std::vector<const RangeImage*>& images) {
  if (images.empty()) throw Error(ErrorKind::shape, "empty batch");
  const int h = images.front()->height;
  const int w = images.front()->width;
  std::vector<T> data;
  data.reserve(images.size() * kNumChannels * static_cast<std::size_t>(h) * w);
  for (const auto* ri : images) {
    if (ri->height != h || ri->width != w) throw Error(ErrorKind::shape, "batch images differ in size");
    for (double v : ri->channels) data.push_back(static_cast<T>(v));
  }
  return ad::Tensor<T>::from_data({static_cast<int>(images.size()), kNumChannels, h, w}, std::move(data));
}

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), store_(std::make_unique<ParameterStore<T>>(seed)), backbone_(*store_, cfg.backbone) {
    const int c = cfg.backbone.output_channels();
    if (cfg.update == MemoryUpdateKind::residual) residual_.emplace(*store_, c, cfg.memory_units);
    if (cfg.update == MemoryUpdateKind::conv_gru) gru_.emplace(*store_, c);
    classifier_ = nn::Conv2d<T>::k1(*store_, "classifier", c, cfg.num_classes, true);
  }

  [[nodiscard]] const ModelConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] ParameterStore<T>& parameters() noexcept { return *store_; }
  [[nodiscard]] const ParameterStore<T>& parameters() const noexcept { return *store_; }
  [[nodiscard]] Backbone<T>& backbone() noexcept { return backbone_; }
  [[nodiscard]] bool recurrent() const noexcept { return cfg_.update != MemoryUpdateKind::none; }
  [[nodiscard]] int memory_channels() const noexcept { return cfg_.backbone.output_channels(); }

  [[nodiscard]] ad::Tensor<T> update(const ad::Tensor<T>& f, const ad::Tensor<T>& aligned, const nn::Context& ctx) const {
    if (residual_) return (*residual_)(f, aligned, ctx);
    if (gru_) return (*gru_)(f, aligned, ctx);
    return f;
  }

  /// Per-pixel logits; `classify` applies the softmax.
  [[nodiscard]] ad::Tensor<T> logits(const ad::Tensor<T>& memory) const { return classifier_(memory); }
  [[nodiscard]] ad::Tensor<T> classify(const ad::Tensor<T>& memory) const { return ad::softmax_channels(logits(memory)); }

  /// Aligns the previous memory into the current frames, runs backbone and
  /// memory update, and advances `state`. The memory stays attached to the
  /// recorded graph; callers truncate back-propagation by detaching it.
  StepOutput<T> recurrent_step(ModelState<T>& state, const std::vector<FrameInput>& frames, const nn::Context& ctx,
                               const StepOptions& opt = {}, const SensorModel* sensor = nullptr) const {
    if (frames.empty()) throw Error(ErrorKind::sequence, "recurrent step without frames");
    const auto n = frames.size();
    const std::int64_t index = frames.front().index;
    for (const auto& f : frames) {
      if (f.index != index) throw Error(ErrorKind::sequence, "batch entries disagree on the frame index");
    }
    if (index >= 0 && state.last_index >= 0 && index != state.last_index + 1) {
      throw Error(ErrorKind::sequence, "frame " + std::to_string(index) + " out of order after frame " +
                                           std::to_string(state.last_index));
    }
    if (state.memory.defined() && static_cast<std::size_t>(state.memory.shape().n) != n) {
      throw Error(ErrorKind::sequence, "batch size changed within a sequence");
    }
    std::vector<const RangeImage*> images;
    for (const auto& f : frames) images.push_back(f.image);
    const auto input = images_to_tensor<T>(images);
    const int h = input.shape().h;
    const int w = input.shape().w;
    const ad::Shape mem_shape{static_cast<int>(n), memory_channels(), h, w};

    StepOutput<T> out;
    state.valid.assign(n, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0));
    if (!recurrent() || !state.memory.defined() || opt.empty_memory) {
      out.aligned = ad::Tensor<T>::zeros(mem_shape);
    } else if (!opt.use_alignment) {
      out.aligned = state.memory;
      for (auto& v : state.valid) std::fill(v.begin(), v.end(), 1);
    } else {
      std::vector<std::vector<std::int32_t>> sources;
      for (std::size_t b = 0; b < n; ++b) {
        if (frames[b].warp_source) {
          sources.push_back(*frames[b].warp_source);
          for (std::size_t p = 0; p < sources.back().size(); ++p) state.valid[b][p] = sources.back()[p] >= 0 ? 1 : 0;
          continue;
        }
        if (!sensor) throw Error(ErrorKind::configuration, "alignment requires the sensor model");
        if (state.prev_points.size() != n) throw Error(ErrorKind::state, "previous frame not stored");
        const RigidTransform rel = relative_transform(state.prev_poses[b], frames[b].pose);
        const WarpMap wm = compute_warp_map(state.prev_points[b], state.prev_images[b], rel, *sensor, cfg_.projection);
        sources.push_back(warp_source_index(wm));
        for (std::size_t p = 0; p < sources.back().size(); ++p) state.valid[b][p] = sources.back()[p] >= 0 ? 1 : 0;
      }
      out.aligned = ad::gather_pixels(state.memory, sources);
    }
    out.features = backbone_(input, ctx);
    const auto memory = update(out.features, out.aligned, ctx);
    out.logits = logits(memory);

    state.memory = memory;
    state.prev_points.clear();
    state.prev_images.clear();
    state.prev_poses.clear();
    if (recurrent()) {
      for (const auto& f : frames) {
        if (!f.points) continue;
        state.prev_points.push_back(*f.points);
        state.prev_images.push_back(*f.image);
        state.prev_poses.push_back(f.pose);
      }
    }
    state.last_index = index;
    ++state.frame;
    return out;
  }

  [[nodiscard]] std::size_t count_parameters() const { return store_->count(true); }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParameterStore<T>> store_;
  Backbone<T> backbone_;
  std::optional<ResidualMemoryUpdate<T>> residual_;
  std::optional<ConvGruUpdate<T>> gru_;
  nn::Conv2d<T> classifier_;
};

/// Trainable element count of a model.
template <typename T>
[[nodiscard]] std::size_t count_parameters(const Model<T>& model) {
  return model.count_parameters();
}

}  // namespace tlseg

#endif  // TLSEG_NETWORK_HPP
