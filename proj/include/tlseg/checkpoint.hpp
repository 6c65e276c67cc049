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

#ifndef TLSEG_CHECKPOINT_HPP
#define TLSEG_CHECKPOINT_HPP

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tlseg/binary_io.hpp"
#include "tlseg/common.hpp"

/**
 * \file
 * \brief Named-tensor container used for checkpoints and range-image dumps.
 *
 * Binary layout (little-endian):
 *
 *     "TLSGCKPT"            8 bytes magic
 *     u32 format_version
 *     u32 record_count
 *     per record:
 *       u32 name_length, name bytes (UTF-8)
 *       u8  dtype            0 = f32, 1 = f64, 2 = i64
 *       u32 rank, u64 dims[rank]
 *       data, prod(dims) elements of dtype
 *
 * A text manifest (`<file>.manifest`) lists the format version and one line per
 * record: `name dtype dim0xdim1x...`.
 */

namespace tlseg {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i64 = 2 };

[[nodiscard]] inline const char* to_string(DType t) noexcept {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i64: return "i64";
  }
  return "?";
}

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;  ///< held as double; exact for f32 and for i64 below 2^53

  [[nodiscard]] std::uint64_t element_count() const noexcept {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

inline constexpr std::string_view kCheckpointMagic = "TLSGCKPT";
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

class Checkpoint {
 public:
  void add(TensorRecord record) {
    if (record.values.size() != record.element_count()) {
      throw Error(ErrorKind::shape, "record '" + record.name + "' has inconsistent dims");
    }
    if (index_.contains(record.name)) {
      throw Error(ErrorKind::validation, "duplicate record name '" + record.name + "'");
    }
    index_[record.name] = records_.size();
    records_.push_back(std::move(record));
  }

  void add(std::string name, DType dtype, std::vector<std::uint64_t> dims, std::vector<double> values) {
    add(TensorRecord{std::move(name), dtype, std::move(dims), std::move(values)});
  }

  [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }

  [[nodiscard]] const TensorRecord& get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) {
      throw Error(ErrorKind::shape, "checkpoint has no record '" + name + "'");
    }
    return records_[it->second];
  }

  [[nodiscard]] const std::vector<TensorRecord>& records() const noexcept { return records_; }

  [[nodiscard]] std::vector<std::uint8_t> encode() const {
    std::vector<std::uint8_t> out;
    binary::put_bytes(out, kCheckpointMagic);
    binary::put<std::uint32_t>(out, kCheckpointFormatVersion);
    binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(records_.size()));
    for (const auto& r : records_) {
      binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
      binary::put_bytes(out, r.name);
      binary::put<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
      binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.dims.size()));
      for (auto d : r.dims) binary::put<std::uint64_t>(out, d);
      for (double v : r.values) {
        switch (r.dtype) {
          case DType::f32: binary::put<float>(out, static_cast<float>(v)); break;
          case DType::f64: binary::put<double>(out, v); break;
          case DType::i64: binary::put<std::int64_t>(out, static_cast<std::int64_t>(v)); break;
        }
      }
    }
    return out;
  }

  [[nodiscard]] static Checkpoint decode(const std::vector<std::uint8_t>& bytes) {
    binary::Reader in(bytes);
    if (in.get_bytes(kCheckpointMagic.size()) != kCheckpointMagic) {
      throw Error(ErrorKind::format, "not a tlseg tensor container");
    }
    if (const auto v = in.get<std::uint32_t>(); v != kCheckpointFormatVersion) {
      throw Error(ErrorKind::format, "unsupported container version " + std::to_string(v));
    }
    Checkpoint ck;
    const auto count = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      TensorRecord r;
      r.name = in.get_bytes(in.get<std::uint32_t>());
      const auto dtype = in.get<std::uint8_t>();
      if (dtype > 2) {
        throw Error(ErrorKind::format, "unknown dtype at byte offset " + std::to_string(in.offset() - 1));
      }
      r.dtype = static_cast<DType>(dtype);
      const auto rank = in.get<std::uint32_t>();
      for (std::uint32_t d = 0; d < rank; ++d) r.dims.push_back(in.get<std::uint64_t>());
      const std::uint64_t n = r.element_count();
      const std::size_t width = r.dtype == DType::f32 ? 4 : 8;
      if (n > in.remaining() / width) {
        throw Error(ErrorKind::format, "record '" + r.name + "' exceeds file size");
      }
      r.values.reserve(n);
      for (std::uint64_t k = 0; k < n; ++k) {
        switch (r.dtype) {
          case DType::f32: r.values.push_back(in.get<float>()); break;
          case DType::f64: r.values.push_back(in.get<double>()); break;
          case DType::i64: r.values.push_back(static_cast<double>(in.get<std::int64_t>())); break;
        }
      }
      ck.add(std::move(r));
    }
    if (in.remaining() != 0) {
      throw Error(ErrorKind::format, "trailing bytes at offset " + std::to_string(in.offset()));
    }
    return ck;
  }

  [[nodiscard]] std::string manifest() const {
    std::ostringstream out;
    out << "format: tlseg-tensor-container\n";
    out << "format_version: " << kCheckpointFormatVersion << "\n";
    out << "records: " << records_.size() << "\n";
    for (const auto& r : records_) {
      out << r.name << ' ' << to_string(r.dtype) << ' ';
      for (std::size_t d = 0; d < r.dims.size(); ++d) out << (d ? "x" : "") << r.dims[d];
      out << '\n';
    }
    return out.str();
  }

  /// Writes `path` and `path.manifest`.
  void save(const std::string& path) const {
    binary::write_file(path, encode());
    std::ofstream m(path + ".manifest", std::ios::trunc);
    if (!m) throw Error(ErrorKind::io, "cannot write manifest for '" + path + "'");
    m << manifest();
  }

  [[nodiscard]] static Checkpoint load(const std::string& path) { return decode(binary::read_file(path)); }

 private:
  std::vector<TensorRecord> records_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace tlseg

#endif  // TLSEG_CHECKPOINT_HPP
