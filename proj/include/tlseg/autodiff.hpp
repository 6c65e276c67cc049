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

#ifndef TLSEG_AUTODIFF_HPP
#define TLSEG_AUTODIFF_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tlseg/common.hpp"

/**
 * \file
 * \brief Tape-based reverse-mode differentiation over NCHW tensors.
 *
 * Every operation returns a new tensor that remembers its inputs and a closure
 * propagating the output gradient back to them. `backward` walks the recorded
 * graph in reverse topological order, accumulating (summing) gradients into
 * every leaf that requires them, so a parameter reused across time steps
 * receives the sum of all its contributions.
 *
 * Width is the azimuth axis of a range image: convolutions pad it circularly.
 * Height is padded with zeros.
 */

namespace tlseg::ad {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  [[nodiscard]] std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  [[nodiscard]] std::size_t numel() const noexcept {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * plane();
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

[[nodiscard]] inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + ")";
}

namespace detail {

inline thread_local bool grad_enabled = true;
inline thread_local std::int32_t current_tag = -1;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::int32_t tag = -1;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  T* ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad.data();
  }
};

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Labels every node created on this thread during its lifetime (e.g. with a frame index).
class TagScope {
 public:
  explicit TagScope(std::int32_t tag) : previous_(detail::current_tag) { detail::current_tag = tag; }
  ~TagScope() { detail::current_tag = previous_; }
  TagScope(const TagScope&) = delete;
  TagScope& operator=(const TagScope&) = delete;

 private:
  std::int32_t previous_;
};

[[nodiscard]] inline bool grad_enabled() noexcept { return detail::grad_enabled; }

template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  [[nodiscard]] static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(shape, std::vector<T>(shape.numel(), T{0}), requires_grad);
  }

  [[nodiscard]] static Tensor full(Shape shape, T value, bool requires_grad = false) {
    return from_data(shape, std::vector<T>(shape.numel(), value), requires_grad);
  }

  [[nodiscard]] static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != shape.numel()) {
      throw Error(ErrorKind::shape, "data size does not match shape " + to_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    node->tag = detail::current_tag;
    return Tensor(std::move(node));
  }

  [[nodiscard]] bool defined() const noexcept { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t numel() const { return node_->value.size(); }
  [[nodiscard]] std::span<T> data() { return node_->value; }
  [[nodiscard]] std::span<const T> data() const { return node_->value; }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; all zeros if nothing has been accumulated yet.
  [[nodiscard]] std::span<T> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  }
  [[nodiscard]] T item() const {
    if (numel() != 1) throw Error(ErrorKind::shape, "item() on a non-scalar tensor");
    return node_->value[0];
  }
  [[nodiscard]] T at(int n, int c, int h, int w) const {
    const Shape& s = node_->shape;
    return node_->value[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
  }

  /// Copy of the value with no history.
  [[nodiscard]] Tensor detach() const { return from_data(shape(), node_->value, false); }

  /// True when this tensor was produced by a recorded operation.
  [[nodiscard]] bool has_history() const { return node_ && static_cast<bool>(node_->backward); }

  [[nodiscard]] const std::shared_ptr<Node>& node() const noexcept { return node_; }

  /// Creates an op output from its inputs. Records the backward closure only if
  /// recording is enabled and some input requires a gradient.
  [[nodiscard]] static Tensor make_result(Shape shape, std::vector<T> value, std::vector<Tensor> inputs,
                                          std::function<void(Node&)> backward) {
    Tensor out = from_data(shape, std::move(value), false);
    if (!grad_enabled()) return out;
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& t : inputs) out.node_->parents.push_back(t.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Back-propagates from a scalar loss. Gradients are summed into every reachable
/// leaf that requires them; the recorded graph is released afterwards.
template <typename T>
void backward(Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorKind::state, "backward needs a scalar loss");
  }
  if (!loss.has_history()) {
    throw Error(ErrorKind::state, "backward without a recorded graph");
  }
  auto* root = loss.node().get();
  auto order = detail::topological_order(root);
  root->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->backward) {
      node->ensure_grad();
      node->backward(*node);
    }
  }
  for (auto* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

/// Tags of all recorded nodes reachable from `t` (see `TagScope`).
template <typename T>
[[nodiscard]] std::set<std::int32_t> reachable_tags(const Tensor<T>& t) {
  std::set<std::int32_t> tags;
  if (!t.defined() || !t.requires_grad()) return tags;
  for (auto* node : detail::topological_order(t.node().get())) {
    if (node->backward) tags.insert(node->tag);
  }
  return tags;
}

// ---------------------------------------------------------------------------
// Elementwise operations

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!(a.shape() == b.shape())) {
    throw Error(ErrorKind::shape, std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename T, typename Forward, typename Derivative>
Tensor<T> unary(const Tensor<T>& x, Forward f, Derivative df_from_output) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  auto xn = x.node();
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [xn, df_from_output](Node<T>& self) {
    if (!xn->requires_grad) return;
    T* g = xn->ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      g[i] += self.grad[i] * df_from_output(xn->value[i], self.value[i]);
    }
  });
}

}  // namespace detail

template <typename T>
[[nodiscard]] Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      T* g = p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
[[nodiscard]] Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    if (an->requires_grad) {
      T* g = an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      T* g = bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Hadamard product.
template <typename T>
[[nodiscard]] Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    if (an->requires_grad) {
      T* g = an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      T* g = bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

/// `1 - x`
template <typename T>
[[nodiscard]] Tensor<T> one_minus(const Tensor<T>& x) {
  return detail::unary<T>(x, [](T v) { return T{1} - v; }, [](T, T) { return T{-1}; });
}

template <typename T>
[[nodiscard]] Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary<T>(x, [factor](T v) { return factor * v; }, [factor](T, T) { return factor; });
}

template <typename T>
[[nodiscard]] Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(x, [](T v) { return v > T{0} ? v : T{0}; }, [](T in, T) { return in > T{0} ? T{1} : T{0}; });
}

template <typename T>
[[nodiscard]] Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
[[nodiscard]] Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary<T>(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
[[nodiscard]] Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>(x, [](T v) { return v * v; }, [](T in, T) { return T{2} * in; });
}

/// Sum of all elements as a (1,1,1,1) tensor.
template <typename T>
[[nodiscard]] Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  auto xn = x.node();
  return Tensor<T>::make_result(Shape{}, {total}, {x}, [xn](detail::Node<T>& self) {
    if (!xn->requires_grad) return;
    T* g = xn->ensure_grad();
    for (std::size_t i = 0; i < xn->value.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
[[nodiscard]] Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

/// Concatenation along the channel axis.
template <typename T>
[[nodiscard]] Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw Error(ErrorKind::shape, "concat of nothing");
  Shape out_shape = parts.front().shape();
  out_shape.c = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != out_shape.n || s.h != out_shape.h || s.w != out_shape.w) {
      throw Error(ErrorKind::shape, "concat: " + to_string(s) + " incompatible with " + to_string(parts.front().shape()));
    }
    out_shape.c += s.c;
  }
  const std::size_t plane = out_shape.plane();
  std::vector<T> out(out_shape.numel());
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (int n = 0; n < out_shape.n; ++n) {
    std::size_t offset = static_cast<std::size_t>(n) * out_shape.c * plane;
    for (const auto& p : parts) {
      const std::size_t len = static_cast<std::size_t>(p.shape().c) * plane;
      const auto src = p.data().subspan(static_cast<std::size_t>(n) * len, len);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
      offset += len;
    }
  }
  for (const auto& p : parts) nodes.push_back(p.node());
  return Tensor<T>::make_result(out_shape, std::move(out), parts, [nodes, out_shape, plane](detail::Node<T>& self) {
    for (int n = 0; n < out_shape.n; ++n) {
      std::size_t offset = static_cast<std::size_t>(n) * out_shape.c * plane;
      for (const auto& p : nodes) {
        const std::size_t len = static_cast<std::size_t>(p->shape.c) * plane;
        if (p->requires_grad) {
          T* g = p->ensure_grad() + static_cast<std::size_t>(n) * len;
          for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
        }
        offset += len;
      }
    }
  });
}

/// Rearranges pixels: `out[n, :, p] = x[n, :, source[n][p]]`, zero where the source is -1.
template <typename T>
[[nodiscard]] Tensor<T> gather_pixels(const Tensor<T>& x, const std::vector<std::vector<std::int32_t>>& source) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  if (source.size() != static_cast<std::size_t>(s.n)) {
    throw Error(ErrorKind::shape, "gather_pixels: one source map per batch entry required");
  }
  for (const auto& m : source) {
    if (m.size() != plane) throw Error(ErrorKind::shape, "gather_pixels: source map size mismatch");
  }
  std::vector<T> out(s.numel(), T{0});
  const auto in = x.data();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const std::int32_t src = source[static_cast<std::size_t>(n)][p];
        if (src >= 0) out[base + p] = in[base + static_cast<std::size_t>(src)];
      }
    }
  }
  auto xn = x.node();
  return Tensor<T>::make_result(s, std::move(out), {x}, [xn, source, s, plane](detail::Node<T>& self) {
    if (!xn->requires_grad) return;
    T* g = xn->ensure_grad();
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const std::int32_t src = source[static_cast<std::size_t>(n)][p];
          if (src >= 0) g[base + static_cast<std::size_t>(src)] += self.grad[base + p];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions

struct Conv2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;  ///< zero padding
  int pad_w = 0;  ///< circular padding
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  int cin, h, w, kh, kw, oh, ow;
  Conv2dOptions opt;
};

/// Source column of each output column for kernel column `b` (circular padding).
inline std::vector<int> column_table(const ConvGeometry& g, int b) {
  std::vector<int> t(static_cast<std::size_t>(g.ow));
  for (int ox = 0; ox < g.ow; ++ox) {
    t[static_cast<std::size_t>(ox)] = static_cast<int>(wrap_index(ox * g.opt.stride_w - g.opt.pad_w + b, g.w));
  }
  return t;
}

/// Per-thread scratch memory reused across convolutions; contents are unspecified.
template <typename T>
T* scratch(std::size_t slot, std::size_t size) {
  thread_local std::vector<std::vector<T>> buffers;
  if (buffers.size() <= slot) buffers.resize(slot + 1);
  if (buffers[slot].size() < size) buffers[slot].resize(size);
  return buffers[slot].data();
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t p = static_cast<std::size_t>(g.oh) * g.ow;
  std::vector<std::vector<int>> tables;
  for (int b = 0; b < g.kw; ++b) tables.push_back(column_table(g, b));
  const bool direct = g.opt.stride_w == 1;
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int a = 0; a < g.kh; ++a) {
      for (int b = 0; b < g.kw; ++b) {
        T* row = cols + ((static_cast<std::size_t>(ci) * g.kh + a) * g.kw + b) * p;
        const int* tab = tables[static_cast<std::size_t>(b)].data();
        const int shift = b - g.opt.pad_w;  // for unit stride, source = ox + shift when in range
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.opt.stride_h - g.opt.pad_h + a;
          T* dst = row + static_cast<std::size_t>(oy) * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(ci) * g.h + iy) * g.w;
          if (direct && g.ow == g.w) {
            const int lo = std::max(0, -shift);
            const int hi = std::min(g.ow, g.w - shift);
            for (int ox = 0; ox < lo; ++ox) dst[ox] = src[tab[ox]];
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
            for (int ox = hi; ox < g.ow; ++ox) dst[ox] = src[tab[ox]];
          } else {
            for (int ox = 0; ox < g.ow; ++ox) dst[ox] = src[tab[ox]];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* x) {
  const std::size_t p = static_cast<std::size_t>(g.oh) * g.ow;
  std::vector<std::vector<int>> tables;
  for (int b = 0; b < g.kw; ++b) tables.push_back(column_table(g, b));
  const bool direct = g.opt.stride_w == 1;
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int a = 0; a < g.kh; ++a) {
      for (int b = 0; b < g.kw; ++b) {
        const T* row = cols + ((static_cast<std::size_t>(ci) * g.kh + a) * g.kw + b) * p;
        const int* tab = tables[static_cast<std::size_t>(b)].data();
        const int shift = b - g.opt.pad_w;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.opt.stride_h - g.opt.pad_h + a;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.ow;
          T* dst = x + (static_cast<std::size_t>(ci) * g.h + iy) * g.w;
          if (direct && g.ow == g.w) {
            const int lo = std::max(0, -shift);
            const int hi = std::min(g.ow, g.w - shift);
            for (int ox = 0; ox < lo; ++ox) dst[tab[ox]] += src[ox];
            T* d = dst + lo + shift;
            for (int ox = lo; ox < hi; ++ox) d[ox - lo] += src[ox];
            for (int ox = hi; ox < g.ow; ++ox) dst[tab[ox]] += src[ox];
          } else {
            for (int ox = 0; ox < g.ow; ++ox) dst[tab[ox]] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation. `weight` is (cout, cin, kh, kw); `bias`, if defined, is (1, cout, 1, 1).
template <typename T>
[[nodiscard]] Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                               Conv2dOptions opt = {}) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c) {
    throw Error(ErrorKind::shape, "conv2d: input has " + std::to_string(xs.c) + " channels, kernel expects " +
                                      std::to_string(ws.c));
  }
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(ws.n)) {
    throw Error(ErrorKind::shape, "conv2d: bias size mismatch");
  }
  if (opt.stride_h < 1 || opt.stride_w < 1 || opt.pad_h < 0 || opt.pad_w < 0 || opt.pad_w > xs.w) {
    throw Error(ErrorKind::shape, "conv2d: invalid stride or padding");
  }
  const int oh = (xs.h + 2 * opt.pad_h - ws.h) / opt.stride_h + 1;
  const int ow = (xs.w + 2 * opt.pad_w - ws.w) / opt.stride_w + 1;
  if (oh <= 0 || ow <= 0) throw Error(ErrorKind::shape, "conv2d: kernel larger than padded input");
  const detail::ConvGeometry g{xs.c, xs.h, xs.w, ws.h, ws.w, oh, ow, opt};
  const Shape os{xs.n, ws.n, oh, ow};
  const std::size_t k = static_cast<std::size_t>(ws.c) * ws.h * ws.w;
  const std::size_t p = os.plane();
  const bool pointwise = ws.h == 1 && ws.w == 1 && opt.stride_h == 1 && opt.stride_w == 1 && opt.pad_h == 0;

  std::vector<T> out(os.numel());
  T* cols = pointwise ? nullptr : detail::scratch<T>(0, k * p);
  detail::ConstMatMap<T> wm(weight.data().data(), ws.n, static_cast<Eigen::Index>(k));
  for (int n = 0; n < xs.n; ++n) {
    const T* xin = x.data().data() + static_cast<std::size_t>(n) * xs.c * xs.plane();
    const T* colp = xin;
    if (!pointwise) {
      detail::im2col(xin, g, cols);
      colp = cols;
    }
    detail::ConstMatMap<T> cm(colp, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
    detail::MatMap<T> om(out.data() + static_cast<std::size_t>(n) * ws.n * p, ws.n, static_cast<Eigen::Index>(p));
    om.noalias() = wm * cm;
    if (bias.defined()) {
      for (int co = 0; co < ws.n; ++co) om.row(co).array() += bias.data()[static_cast<std::size_t>(co)];
    }
  }

  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::make_result(os, std::move(out), std::move(inputs),
                                [xn, wn, bn, g, xs, ws, k, p, pointwise](detail::Node<T>& self) {
    T* cols = pointwise ? nullptr : detail::scratch<T>(0, k * p);
    T* dcols = pointwise ? nullptr : detail::scratch<T>(1, k * p);
    detail::ConstMatMap<T> wm(wn->value.data(), ws.n, static_cast<Eigen::Index>(k));
    for (int n = 0; n < xs.n; ++n) {
      const T* xin = xn->value.data() + static_cast<std::size_t>(n) * xs.c * xs.plane();
      detail::ConstMatMap<T> gm(self.grad.data() + static_cast<std::size_t>(n) * ws.n * p, ws.n,
                                static_cast<Eigen::Index>(p));
      if (wn->requires_grad) {
        const T* colp = xin;
        if (!pointwise) {
          detail::im2col(xin, g, cols);
          colp = cols;
        }
        detail::ConstMatMap<T> cm(colp, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
        detail::MatMap<T> gw(wn->ensure_grad(), ws.n, static_cast<Eigen::Index>(k));
        gw.noalias() += gm * cm.transpose();
      }
      if (bn && bn->requires_grad) {
        T* gb = bn->ensure_grad();
        for (int co = 0; co < ws.n; ++co) gb[co] += gm.row(co).sum();
      }
      if (xn->requires_grad) {
        T* gx = xn->ensure_grad() + static_cast<std::size_t>(n) * xs.c * xs.plane();
        if (pointwise) {
          detail::MatMap<T> gxm(gx, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
          gxm.noalias() += wm.transpose() * gm;
        } else {
          detail::MatMap<T> dm(dcols, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
          dm.noalias() = wm.transpose() * gm;
          detail::col2im_add(dcols, g, gx);
        }
      }
    }
  });
}

/// Transposed convolution whose kernel size equals its stride (non-overlapping
/// upsampling). `weight` is (cin, cout, kh, kw); output is (n, cout, h*kh, w*kw).
template <typename T>
[[nodiscard]] Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.n != xs.c) throw Error(ErrorKind::shape, "conv_transpose2d: channel mismatch");
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(ws.c)) {
    throw Error(ErrorKind::shape, "conv_transpose2d: bias size mismatch");
  }
  const int cin = ws.n;
  const int cout = ws.c;
  const int kh = ws.h;
  const int kw = ws.w;
  const Shape os{xs.n, cout, xs.h * kh, xs.w * kw};
  const std::size_t p = xs.plane();
  std::vector<T> out(os.numel(), T{0});
  // Per kernel tap (a, b): Y_ab = W_ab^T X, scattered to positions (i*kh + a, j*kw + b).
  const auto tap_weight = [cin, cout, kh, kw](const T* w, int a, int b) {
    detail::RowMatrix<T> m(cout, cin);
    for (int ci = 0; ci < cin; ++ci) {
      for (int co = 0; co < cout; ++co) {
        m(co, ci) = w[((static_cast<std::size_t>(ci) * cout + co) * kh + a) * kw + b];
      }
    }
    return m;
  };
  detail::RowMatrix<T> y(cout, static_cast<Eigen::Index>(p));
  for (int n = 0; n < xs.n; ++n) {
    detail::ConstMatMap<T> xm(x.data().data() + static_cast<std::size_t>(n) * cin * p, cin, static_cast<Eigen::Index>(p));
    T* o = out.data() + static_cast<std::size_t>(n) * cout * os.plane();
    for (int a = 0; a < kh; ++a) {
      for (int b = 0; b < kw; ++b) {
        y.noalias() = tap_weight(weight.data().data(), a, b) * xm;
        for (int co = 0; co < cout; ++co) {
          const T bv = bias.defined() ? bias.data()[static_cast<std::size_t>(co)] : T{0};
          for (int i = 0; i < xs.h; ++i) {
            for (int j = 0; j < xs.w; ++j) {
              o[(static_cast<std::size_t>(co) * os.h + i * kh + a) * os.w + j * kw + b] =
                  y(co, static_cast<Eigen::Index>(i) * xs.w + j) + bv;
            }
          }
        }
      }
    }
  }
  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::make_result(os, std::move(out), std::move(inputs),
                                [xn, wn, bn, xs, os, cin, cout, kh, kw, p, tap_weight](detail::Node<T>& self) {
    detail::RowMatrix<T> gy(cout, static_cast<Eigen::Index>(p));
    for (int n = 0; n < xs.n; ++n) {
      const T* go = self.grad.data() + static_cast<std::size_t>(n) * cout * os.plane();
      detail::ConstMatMap<T> xm(xn->value.data() + static_cast<std::size_t>(n) * cin * p, cin,
                                static_cast<Eigen::Index>(p));
      for (int a = 0; a < kh; ++a) {
        for (int b = 0; b < kw; ++b) {
          for (int co = 0; co < cout; ++co) {
            for (int i = 0; i < xs.h; ++i) {
              for (int j = 0; j < xs.w; ++j) {
                gy(co, static_cast<Eigen::Index>(i) * xs.w + j) =
                    go[(static_cast<std::size_t>(co) * os.h + i * kh + a) * os.w + j * kw + b];
              }
            }
          }
          if (bn && bn->requires_grad) {
            T* gb = bn->ensure_grad();
            for (int co = 0; co < cout; ++co) gb[co] += gy.row(co).sum();
          }
          if (wn->requires_grad) {
            const detail::RowMatrix<T> gw = gy * xm.transpose();  // (cout, cin)
            T* g = wn->ensure_grad();
            for (int ci = 0; ci < cin; ++ci) {
              for (int co = 0; co < cout; ++co) {
                g[((static_cast<std::size_t>(ci) * cout + co) * kh + a) * kw + b] += gw(co, ci);
              }
            }
          }
          if (xn->requires_grad) {
            detail::MatMap<T> gx(xn->ensure_grad() + static_cast<std::size_t>(n) * cin * p, cin,
                                 static_cast<Eigen::Index>(p));
            gx.noalias() += tap_weight(wn->value.data(), a, b).transpose() * gy;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel batch normalization. In training mode normalizes with the batch
/// statistics and updates the running estimates (unbiased variance); in
/// evaluation mode uses the running estimates.
template <typename T>
[[nodiscard]] Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                   std::span<T> running_mean, std::span<T> running_var, bool training,
                                   double momentum = kBatchNormMomentum, double eps = kBatchNormEps) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  const std::size_t count = static_cast<std::size_t>(s.n) * plane;
  if (count == 0) throw Error(ErrorKind::shape, "batch_norm on an empty batch");
  if (gamma.numel() != static_cast<std::size_t>(s.c) || beta.numel() != static_cast<std::size_t>(s.c) ||
      running_mean.size() != static_cast<std::size_t>(s.c) || running_var.size() != static_cast<std::size_t>(s.c)) {
    throw Error(ErrorKind::shape, "batch_norm: parameter size does not match channel count");
  }
  std::vector<T> mean(static_cast<std::size_t>(s.c));
  std::vector<T> inv_std(static_cast<std::size_t>(s.c));
  const auto in = x.data();
  const auto idx = [&](int n, int c) { return (static_cast<std::size_t>(n) * s.c + c) * plane; };
  for (int c = 0; c < s.c; ++c) {
    if (training) {
      double m = 0.0;
      for (int n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < plane; ++i) m += in[idx(n, c) + i];
      }
      m /= static_cast<double>(count);
      double v = 0.0;
      for (int n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = in[idx(n, c) + i] - m;
          v += d * d;
        }
      }
      const double biased = v / static_cast<double>(count);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : biased;
      mean[static_cast<std::size_t>(c)] = static_cast<T>(m);
      inv_std[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(biased + eps));
      running_mean[static_cast<std::size_t>(c)] =
          static_cast<T>((1.0 - momentum) * running_mean[static_cast<std::size_t>(c)] + momentum * m);
      running_var[static_cast<std::size_t>(c)] =
          static_cast<T>((1.0 - momentum) * running_var[static_cast<std::size_t>(c)] + momentum * unbiased);
    } else {
      mean[static_cast<std::size_t>(c)] = running_mean[static_cast<std::size_t>(c)];
      inv_std[static_cast<std::size_t>(c)] =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[static_cast<std::size_t>(c)]) + eps));
    }
  }
  std::vector<T> xhat(s.numel());
  std::vector<T> out(s.numel());
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T g = gamma.data()[static_cast<std::size_t>(c)];
      const T b = beta.data()[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t j = idx(n, c) + i;
        xhat[j] = (in[j] - mean[static_cast<std::size_t>(c)]) * inv_std[static_cast<std::size_t>(c)];
        out[j] = g * xhat[j] + b;
      }
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return Tensor<T>::make_result(s, std::move(out), {x, gamma, beta},
                                [xn, gn, bn, s, plane, count, training, inv_std, xhat = std::move(xhat)](
                                    detail::Node<T>& self) {
    const auto idx = [&](int n, int c) { return (static_cast<std::size_t>(n) * s.c + c) * plane; };
    for (int c = 0; c < s.c; ++c) {
      T sum_dy{0};
      T sum_dy_xhat{0};
      for (int n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t j = idx(n, c) + i;
          sum_dy += self.grad[j];
          sum_dy_xhat += self.grad[j] * xhat[j];
        }
      }
      if (gn->requires_grad) gn->ensure_grad()[c] += sum_dy_xhat;
      if (bn->requires_grad) bn->ensure_grad()[c] += sum_dy;
      if (!xn->requires_grad) continue;
      T* gx = xn->ensure_grad();
      const T g = gn->value[static_cast<std::size_t>(c)];
      const T is = inv_std[static_cast<std::size_t>(c)];
      const T m = static_cast<T>(count);
      for (int n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t j = idx(n, c) + i;
          if (training) {
            gx[j] += g * is * (self.grad[j] - sum_dy / m - xhat[j] * sum_dy_xhat / m);
          } else {
            gx[j] += g * is * self.grad[j];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Classification

/// Softmax over the channel axis.
template <typename T>
[[nodiscard]] Tensor<T> softmax_channels(const Tensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  std::vector<T> out(s.numel());
  const auto in = x.data();
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = in[base + i];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, in[base + c * plane + i]);
      T z{0};
      for (int c = 0; c < s.c; ++c) {
        const T e = std::exp(in[base + c * plane + i] - mx);
        out[base + c * plane + i] = e;
        z += e;
      }
      for (int c = 0; c < s.c; ++c) out[base + c * plane + i] /= z;
    }
  }
  auto xn = x.node();
  return Tensor<T>::make_result(s, std::move(out), {x}, [xn, s, plane](detail::Node<T>& self) {
    if (!xn->requires_grad) return;
    T* g = xn->ensure_grad();
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        T dot{0};
        for (int c = 0; c < s.c; ++c) dot += self.grad[base + c * plane + i] * self.value[base + c * plane + i];
        for (int c = 0; c < s.c; ++c) {
          const std::size_t j = base + c * plane + i;
          g[j] += self.value[j] * (self.grad[j] - dot);
        }
      }
    }
  });
}

inline constexpr double kLogProbabilityFloor = 1e-12;

/// Class-weighted cross entropy over per-pixel logits (n, C, h, w).
///
/// Equals the mean over pixels whose label is in `[0, C)` of `w[y] * -log(softmax(x)[y])`,
/// with probabilities floored at 1e-12. Any other label (e.g. the ignore id) is skipped.
/// Returns 0 if no pixel is labeled.
template <typename T>
[[nodiscard]] Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels,
                                              std::span<const double> class_weights) {
  const Shape s = logits.shape();
  const std::size_t plane = s.plane();
  if (labels.size() != static_cast<std::size_t>(s.n) * plane) {
    throw Error(ErrorKind::shape, "cross entropy: label count does not match logits");
  }
  if (class_weights.size() != static_cast<std::size_t>(s.c)) {
    throw Error(ErrorKind::shape, "cross entropy: one weight per class required");
  }
  const auto in = logits.data();
  std::vector<T> prob(s.numel());
  std::size_t valid = 0;
  double total = 0.0;
  const T log_floor = static_cast<T>(std::log(kLogProbabilityFloor));
  std::vector<std::uint8_t> floored(static_cast<std::size_t>(s.n) * plane, 0);
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = in[base + i];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, in[base + c * plane + i]);
      T z{0};
      for (int c = 0; c < s.c; ++c) {
        const T e = std::exp(in[base + c * plane + i] - mx);
        prob[base + c * plane + i] = e;
        z += e;
      }
      for (int c = 0; c < s.c; ++c) prob[base + c * plane + i] /= z;
      const std::int32_t y = labels[static_cast<std::size_t>(n) * plane + i];
      if (y < 0 || y >= s.c) continue;
      ++valid;
      T logp = in[base + static_cast<std::size_t>(y) * plane + i] - mx - std::log(z);
      if (logp < log_floor) {
        logp = log_floor;
        floored[static_cast<std::size_t>(n) * plane + i] = 1;
      }
      total += class_weights[static_cast<std::size_t>(y)] * -static_cast<double>(logp);
    }
  }
  const T loss = valid == 0 ? T{0} : static_cast<T>(total / static_cast<double>(valid));
  auto xn = logits.node();
  std::vector<std::int32_t> label_copy(labels.begin(), labels.end());
  std::vector<double> weight_copy(class_weights.begin(), class_weights.end());
  return Tensor<T>::make_result(Shape{}, {loss}, {logits},
                                [xn, s, plane, valid, prob = std::move(prob), label_copy = std::move(label_copy),
                                 weight_copy = std::move(weight_copy), floored = std::move(floored)](
                                    detail::Node<T>& self) {
    if (!xn->requires_grad || valid == 0) return;
    T* g = xn->ensure_grad();
    const T scale_factor = self.grad[0] / static_cast<T>(valid);
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t pix = static_cast<std::size_t>(n) * plane + i;
        const std::int32_t y = label_copy[pix];
        if (y < 0 || y >= s.c || floored[pix]) continue;
        const T wy = static_cast<T>(weight_copy[static_cast<std::size_t>(y)]) * scale_factor;
        for (int c = 0; c < s.c; ++c) {
          const std::size_t j = base + c * plane + i;
          g[j] += wy * (prob[j] - (c == y ? T{1} : T{0}));
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Largest coordinate-wise relative error between the reverse-mode gradient of
/// scalar `f` at `x` and central finite differences with the given step.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`.
template <typename T, typename F>
[[nodiscard]] double grad_check(F&& f, Tensor<T>& x, double step = 1e-5, double floor = 1e-3) {
  x.zero_grad();
  {
    Tensor<T> loss = f(x);
    backward(loss);
  }
  const std::vector<T> analytic(x.grad().begin(), x.grad().end());
  double worst = 0.0;
  NoGradGuard no_grad;
  auto data = x.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const T saved = data[i];
    data[i] = saved + static_cast<T>(step);
    const double plus = f(x).item();
    data[i] = saved - static_cast<T>(step);
    const double minus = f(x).item();
    data[i] = saved;
    const double numeric = (plus - minus) / (2.0 * step);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace tlseg::ad

#endif  // TLSEG_AUTODIFF_HPP
