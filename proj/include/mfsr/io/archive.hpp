/* Copyright 2026 The mfsr Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Array container shared by checkpoints and datasets.
//
//   MFSR-ARRAYS 1
//   meta <key> <value...>
//   array <name> <dtype> <d0> <d1> <d2> <d3> <offset> <nbytes>
//   end
//   <little-endian raw blob; offsets are relative to the first blob byte>
//
// dtype is one of f32, f64, i64, u8. Keys and names contain no whitespace.

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfsr/tensor.hpp"

namespace mfsr::io {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kArchiveMagic = "MFSR-ARRAYS";
inline constexpr int kArchiveVersion = 1;

template <typename T> constexpr const char* dtype_name();
template <> constexpr const char* dtype_name<float>() { return "f32"; }
template <> constexpr const char* dtype_name<double>() { return "f64"; }
template <> constexpr const char* dtype_name<std::int64_t>() { return "i64"; }
template <> constexpr const char* dtype_name<std::uint8_t>() { return "u8"; }

inline std::size_t dtype_size(const std::string& d) {
  if (d == "f32") return 4;
  if (d == "f64" || d == "i64") return 8;
  if (d == "u8") return 1;
  throw FormatError("unknown dtype '" + d + "'");
}

struct ArrayEntry {
  std::string name;
  std::string dtype;
  Shape shape;
  std::vector<char> bytes;
};

struct Archive {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<ArrayEntry> arrays;

  void set_meta(const std::string& key, const std::string& value) {
    for (auto& [k, v] : meta)
      if (k == key) {
        v = value;
        return;
      }
    meta.emplace_back(key, value);
  }
  const std::string* find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return &v;
    return nullptr;
  }
  const std::string& meta_at(const std::string& key) const {
    if (const auto* v = find_meta(key)) return *v;
    throw FormatError("archive: missing meta '" + key + "'");
  }

  template <typename T>
  void add(const std::string& name, const Shape& shape, const std::vector<T>& data) {
    if (data.size() != shape.size()) throw ShapeError("archive: '" + name + "' size mismatch");
    ArrayEntry e{name, dtype_name<T>(), shape, std::vector<char>(data.size() * sizeof(T))};
    if (!data.empty()) std::memcpy(e.bytes.data(), data.data(), e.bytes.size());
    arrays.push_back(std::move(e));
  }
  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    add(name, t.shape, t.data);
  }

  const ArrayEntry* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    const ArrayEntry* e = find(name);
    if (!e) throw FormatError("archive: missing array '" + name + "'");
    if (e->dtype != dtype_name<T>()) {
      throw FormatError("archive: array '" + name + "' has dtype " + e->dtype);
    }
    Tensor<T> t(e->shape);
    if (!e->bytes.empty()) std::memcpy(t.data.data(), e->bytes.data(), e->bytes.size());
    return t;
  }
};

// Byte offsets of each array's data within the blob, in archive order.
inline std::vector<std::size_t> blob_offsets(const Archive& a) {
  std::vector<std::size_t> out;
  std::size_t off = 0;
  for (const auto& e : a.arrays) {
    out.push_back(off);
    off += e.bytes.size();
  }
  return out;
}

inline std::string serialize(const Archive& a) {
  std::ostringstream os;
  os << kArchiveMagic << ' ' << kArchiveVersion << '\n';
  for (const auto& [k, v] : a.meta) {
    if (k.empty() || k.find_first_of(" \t\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("archive: invalid meta entry '" + k + "'");
    }
    os << "meta " << k << ' ' << v << '\n';
  }
  const auto offs = blob_offsets(a);
  for (std::size_t i = 0; i < a.arrays.size(); ++i) {
    const auto& e = a.arrays[i];
    if (e.name.empty() || e.name.find_first_of(" \t\n") != std::string::npos) {
      throw FormatError("archive: invalid array name '" + e.name + "'");
    }
    os << "array " << e.name << ' ' << e.dtype << ' ' << e.shape.n << ' ' << e.shape.h << ' '
       << e.shape.w << ' ' << e.shape.c << ' ' << offs[i] << ' ' << e.bytes.size() << '\n';
  }
  os << "end\n";
  for (const auto& e : a.arrays) os.write(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()));
  return os.str();
}

inline Archive parse_archive(const std::string& bytes) {
  Archive a;
  std::size_t pos = 0;
  auto next_line = [&]() {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("archive: truncated header");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  {
    std::istringstream is(next_line());
    std::string magic;
    int version = 0;
    is >> magic >> version;
    if (magic != kArchiveMagic) throw FormatError("archive: bad magic");
    if (version != kArchiveVersion) {
      throw FormatError("archive: unsupported version " + std::to_string(version));
    }
  }
  struct Pending {
    std::size_t offset, nbytes;
  };
  std::vector<Pending> pending;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    if (line.rfind("meta ", 0) == 0) {
      const std::size_t sp = line.find(' ', 5);
      if (sp == std::string::npos) {
        a.meta.emplace_back(line.substr(5), "");
      } else {
        a.meta.emplace_back(line.substr(5, sp - 5), line.substr(sp + 1));
      }
    } else if (line.rfind("array ", 0) == 0) {
      std::istringstream is(line.substr(6));
      ArrayEntry e;
      Pending p{};
      is >> e.name >> e.dtype >> e.shape.n >> e.shape.h >> e.shape.w >> e.shape.c >> p.offset >> p.nbytes;
      if (!is) throw FormatError("archive: malformed array line '" + line + "'");
      if (p.nbytes != e.shape.size() * dtype_size(e.dtype)) {
        throw FormatError("archive: array '" + e.name + "' byte count does not match its shape");
      }
      a.arrays.push_back(std::move(e));
      pending.push_back(p);
    } else {
      throw FormatError("archive: unexpected header line '" + line + "'");
    }
  }
  const std::size_t blob = pos;
  for (std::size_t i = 0; i < a.arrays.size(); ++i) {
    const auto [off, n] = pending[i];
    if (blob + off + n > bytes.size()) {
      throw FormatError("archive: array '" + a.arrays[i].name + "' extends past end of file");
    }
    a.arrays[i].bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(blob + off),
                             bytes.begin() + static_cast<std::ptrdiff_t>(blob + off + n));
  }
  return a;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Writes via a temporary file and rename so a failed write leaves nothing behind.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw std::runtime_error("write failed for '" + path.string() + "'");
    }
  }
  std::filesystem::rename(tmp, path);
}

inline void save_archive(const Archive& a, const std::filesystem::path& path) {
  write_file_atomic(path, serialize(a));
}

inline Archive load_archive(const std::filesystem::path& path) {
  return parse_archive(read_file(path));
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  // Shortest text that parses back to the same double; plain decimals in
  // the everyday range, exponents outside it.
  char buf[400];
  const double a = std::abs(v);
  const bool fixed = a == 0.0 || (a >= 1e-4 && a < 1e15);
  const auto r = fixed ? std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed)
                       : std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace mfsr::io
