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

#ifndef TLSEG_COMMON_HPP
#define TLSEG_COMMON_HPP

#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

/**
 * \file
 * \brief Error type and small helpers shared by every tlseg module.
 */

namespace tlseg {

/// Category of a failure. The CLI maps these onto process exit codes.
enum class ErrorKind {
  degenerate_point,
  configuration,
  shape,
  undefined_metric,
  invalid_pose,
  state,
  format,
  sequence,
  numeric,
  io,
  validation,
};

[[nodiscard]] inline std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::degenerate_point: return "degenerate point";
    case ErrorKind::configuration: return "configuration error";
    case ErrorKind::shape: return "shape error";
    case ErrorKind::undefined_metric: return "undefined metric";
    case ErrorKind::invalid_pose: return "invalid pose";
    case ErrorKind::state: return "state error";
    case ErrorKind::format: return "format error";
    case ErrorKind::sequence: return "sequence error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::io: return "i/o error";
    case ErrorKind::validation: return "validation error";
  }
  return "error";
}

/// Exception thrown by all tlseg operations.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline constexpr double kPi = std::numbers::pi;

[[nodiscard]] constexpr double deg_to_rad(double deg) noexcept { return deg * kPi / 180.0; }
[[nodiscard]] constexpr double rad_to_deg(double rad) noexcept { return rad * 180.0 / kPi; }

/// Floor-modulo for non-negative divisors.
[[nodiscard]] constexpr int wrap_index(long long i, int n) noexcept {
  const long long m = i % n;
  return static_cast<int>(m < 0 ? m + n : m);
}

/// FNV-1a 64-bit digest as 16 lowercase hex digits; stable across platforms.
[[nodiscard]] inline std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kDigits[h & 0xF];
  return out;
}

}  // namespace tlseg

#endif  // TLSEG_COMMON_HPP
