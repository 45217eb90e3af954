#pragma once

// Reader/writer for the safetensors named-tensor container:
//   u64 little-endian header length N | N bytes JSON header | raw tensor data
// Header entries: {"name": {"dtype": "F32", "shape": [..], "data_offsets": [b, e]}}
// Supported dtypes on read: F32, F16, BF16, F64 (all widened/narrowed to f32).

#include "iclc/errors.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace iclc {

struct NamedTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

namespace detail {

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FFu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return f;
}

inline std::uint16_t float_to_half(float f) {
  std::uint32_t x;
  std::memcpy(&x, &f, sizeof(x));
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::int32_t exp = static_cast<std::int32_t>((x >> 23) & 0xFFu) - 127 + 15;
  std::uint32_t mant = x & 0x7FFFFFu;
  if (((x >> 23) & 0xFFu) == 0xFFu) return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0u));
  if (exp >= 0x1F) return static_cast<std::uint16_t>(sign | 0x7C00u);
  if (exp <= 0) {
    if (exp < -10) return sign;
    mant |= 0x800000u;
    const std::uint32_t shift = static_cast<std::uint32_t>(14 - exp);
    std::uint32_t half_mant = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
    return static_cast<std::uint16_t>(sign | half_mant);
  }
  std::uint32_t half = (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;  // round to nearest even
  return static_cast<std::uint16_t>(sign | half);
}

inline float bf16_to_float(std::uint16_t h) {
  const std::uint32_t bits = static_cast<std::uint32_t>(h) << 16;
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return f;
}

inline std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

class SafetensorsArchive {
 public:
  static SafetensorsArchive load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open tensor archive: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(bytes, path);
  }

  static SafetensorsArchive parse(const std::vector<unsigned char>& bytes, const std::string& origin = "<memory>") {
    if (bytes.size() < 8) throw LoadError("truncated tensor archive: " + origin);
    const std::uint64_t header_len = detail::read_u64_le(bytes.data());
    if (header_len > bytes.size() - 8) throw LoadError("tensor archive header exceeds file size: " + origin);
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("malformed tensor archive header in " + origin + ": " + e.what());
    }
    const std::size_t data_start = 8 + header_len;
    SafetensorsArchive archive;
    for (auto it = header.begin(); it != header.end(); ++it) {
      if (it.key() == "__metadata__") {
        for (auto m = it->begin(); m != it->end(); ++m) {
          archive.metadata_[m.key()] = m->is_string() ? m->get<std::string>() : m->dump();
        }
        continue;
      }
      const auto& entry = *it;
      const std::string dtype = entry.at("dtype").get<std::string>();
      NamedTensor t;
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[1] < offsets[0] || data_start + offsets[1] > bytes.size()) {
        throw LoadError("bad data offsets for tensor: " + it.key());
      }
      const unsigned char* src = bytes.data() + data_start + offsets[0];
      const std::size_t nbytes = offsets[1] - offsets[0];
      const auto n = static_cast<std::size_t>(t.numel());
      std::size_t width = 0;
      if (dtype == "F32") width = 4;
      else if (dtype == "F16" || dtype == "BF16") width = 2;
      else if (dtype == "F64") width = 8;
      else throw LoadError("unsupported dtype " + dtype + " for tensor: " + it.key());
      if (nbytes != n * width) throw LoadError("byte size does not match shape for tensor: " + it.key());
      t.data.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* p = src + i * width;
        if (dtype == "F32") {
          std::memcpy(&t.data[i], p, 4);
        } else if (dtype == "F64") {
          double d;
          std::memcpy(&d, p, 8);
          t.data[i] = static_cast<float>(d);
        } else {
          const auto h = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
          t.data[i] = dtype == "F16" ? detail::half_to_float(h) : detail::bf16_to_float(h);
        }
      }
      archive.dtypes_[it.key()] = dtype;
      archive.tensors_.emplace(it.key(), std::move(t));
    }
    return archive;
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const NamedTensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw LoadError("missing tensor: " + name);
    return it->second;
  }

  const std::string& dtype(const std::string& name) const { return dtypes_.at(name); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [k, _] : tensors_) out.push_back(k);
    return out;
  }

  const std::map<std::string, std::string>& metadata() const { return metadata_; }

 private:
  std::map<std::string, NamedTensor> tensors_;
  std::map<std::string, std::string> dtypes_;
  std::map<std::string, std::string> metadata_;
};

enum class StoreDtype { f32, f16 };

// Tensors are written in map (lexicographic) order, which keeps output byte-stable.
inline void write_safetensors(const std::string& path, const std::map<std::string, NamedTensor>& tensors,
                              const std::map<std::string, std::string>& metadata = {},
                              StoreDtype dtype = StoreDtype::f32) {
  const std::size_t width = dtype == StoreDtype::f32 ? 4 : 2;
  nlohmann::ordered_json header;
  if (!metadata.empty()) {
    nlohmann::ordered_json meta;
    for (const auto& [k, v] : metadata) meta[k] = v;
    header["__metadata__"] = meta;
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (static_cast<std::size_t>(t.numel()) != t.data.size()) {
      throw ArgumentError("tensor data size does not match shape: " + name);
    }
    const std::uint64_t nbytes = t.data.size() * width;
    header[name] = {{"dtype", dtype == StoreDtype::f32 ? "F32" : "F16"},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  std::string header_str = header.dump();
  while ((8 + header_str.size()) % 8 != 0) header_str.push_back(' ');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write tensor archive: " + path);
  std::uint64_t len = header_str.size();
  unsigned char len_bytes[8];
  for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFFu);
  out.write(reinterpret_cast<const char*>(len_bytes), 8);
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, t] : tensors) {
    if (dtype == StoreDtype::f32) {
      out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
    } else {
      std::vector<std::uint16_t> halves(t.data.size());
      for (std::size_t i = 0; i < t.data.size(); ++i) halves[i] = detail::float_to_half(t.data[i]);
      out.write(reinterpret_cast<const char*>(halves.data()), static_cast<std::streamsize>(halves.size() * 2));
    }
  }
  if (!out) throw Error("failed writing tensor archive: " + path);
}

}  // namespace iclc
