#pragma once

// Checkpoint container: magic "CTXWM1", a u64 little-endian length-prefixed
// JSON manifest (format version, free-form meta, tensor directory), then raw
// little-endian payloads in manifest order. dtypes: f32, f64, u16.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxwm/common.hpp"
#include "ctxwm/tensor.hpp"

namespace ctxwm {

namespace ckptio {

constexpr char kMagic[6] = {'C', 'T', 'X', 'W', 'M', '1'};
constexpr int kFormatVersion = 1;

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v & 0xff));
  out.push_back(uint8_t(v >> 8));
}

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(out, u);
}

inline void put_f64(std::vector<uint8_t>& out, double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u64(out, u);
}

inline uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
  return v;
}

inline uint32_t get_u32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(p[i]) << (8 * i);
  return v;
}

}  // namespace ckptio

class Checkpoint {
 public:
  nlohmann::json meta;

  void add(const std::string& name, const Tensor<float>& t) {
    check(!f32_.count(name) && !f64_.count(name) && !u16_.count(name), Errc::contract,
          "duplicate checkpoint tensor '" + name + "'");
    order_.push_back(name);
    f32_[name] = t;
  }

  void add(const std::string& name, const Tensor<double>& t) {
    check(!f32_.count(name) && !f64_.count(name) && !u16_.count(name), Errc::contract,
          "duplicate checkpoint tensor '" + name + "'");
    order_.push_back(name);
    f64_[name] = t;
  }

  void add_codes(const std::string& name, const std::vector<uint16_t>& codes) {
    check(!f32_.count(name) && !f64_.count(name) && !u16_.count(name), Errc::contract,
          "duplicate checkpoint tensor '" + name + "'");
    order_.push_back(name);
    u16_[name] = codes;
  }

  bool has(const std::string& name) const {
    return f32_.count(name) || f64_.count(name) || u16_.count(name);
  }

  const Tensor<float>& f32(const std::string& name) const {
    auto it = f32_.find(name);
    check(it != f32_.end(), Errc::registry, "checkpoint tensor '" + name + "' not found (f32)");
    return it->second;
  }

  const Tensor<double>& f64(const std::string& name) const {
    auto it = f64_.find(name);
    check(it != f64_.end(), Errc::registry, "checkpoint tensor '" + name + "' not found (f64)");
    return it->second;
  }

  const std::vector<uint16_t>& codes(const std::string& name) const {
    auto it = u16_.find(name);
    check(it != u16_.end(), Errc::registry, "checkpoint tensor '" + name + "' not found (u16)");
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }

  void save(const std::string& path) const {
    using namespace ckptio;
    nlohmann::json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["meta"] = meta;
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& name : order_) {
      nlohmann::json e;
      e["name"] = name;
      if (auto it = f32_.find(name); it != f32_.end()) {
        e["dtype"] = "f32";
        e["shape"] = it->second.shape;
      } else if (auto it2 = f64_.find(name); it2 != f64_.end()) {
        e["dtype"] = "f64";
        e["shape"] = it2->second.shape;
      } else {
        e["dtype"] = "u16";
        e["shape"] = std::vector<int64_t>{int64_t(u16_.at(name).size())};
      }
      manifest["tensors"].push_back(e);
    }
    std::string mjson = manifest.dump();

    std::vector<uint8_t> bytes;
    bytes.insert(bytes.end(), kMagic, kMagic + 6);
    put_u64(bytes, uint64_t(mjson.size()));
    bytes.insert(bytes.end(), mjson.begin(), mjson.end());
    for (const auto& name : order_) {
      if (auto it = f32_.find(name); it != f32_.end())
        for (float v : it->second.data) put_f32(bytes, v);
      else if (auto it2 = f64_.find(name); it2 != f64_.end())
        for (double v : it2->second.data) put_f64(bytes, v);
      else
        for (uint16_t v : u16_.at(name)) put_u16(bytes, v);
    }

    std::ofstream out(path, std::ios::binary);
    check(out.good(), Errc::io, "cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    check(out.good(), Errc::io, "short write to '" + path + "'");
  }

  static Checkpoint load(const std::string& path) {
    using namespace ckptio;
    std::ifstream in(path, std::ios::binary);
    check(in.good(), Errc::io, "cannot open checkpoint '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    check(bytes.size() >= 14, Errc::io, "'" + path + "' is too short to be a checkpoint");
    check(std::memcmp(bytes.data(), kMagic, 6) == 0, Errc::io,
          "'" + path + "' does not start with the CTXWM1 magic");
    uint64_t mlen = get_u64(bytes.data() + 6);
    check(14 + mlen <= bytes.size(), Errc::io, "'" + path + "' manifest is truncated");
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(bytes.begin() + 14, bytes.begin() + 14 + std::ptrdiff_t(mlen));
    } catch (const std::exception& e) {
      fail(Errc::io, "'" + path + "' manifest is not valid JSON: " + e.what());
    }
    check(manifest.value("format_version", -1) == kFormatVersion, Errc::io,
          "'" + path + "' has unsupported format version");

    Checkpoint ck;
    ck.meta = manifest.value("meta", nlohmann::json::object());
    size_t off = 14 + size_t(mlen);
    for (const auto& e : manifest.at("tensors")) {
      std::string name = e.at("name");
      std::string dtype = e.at("dtype");
      std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
      int64_t n = Tensor<float>::numel_of(shape);
      if (dtype == "f32") {
        check(off + size_t(n) * 4 <= bytes.size(), Errc::io, "'" + path + "' payload truncated");
        Tensor<float> t(shape);
        for (int64_t i = 0; i < n; ++i) {
          uint32_t u = get_u32(bytes.data() + off + size_t(i) * 4);
          std::memcpy(&t.data[size_t(i)], &u, 4);
        }
        off += size_t(n) * 4;
        ck.add(name, t);
      } else if (dtype == "f64") {
        check(off + size_t(n) * 8 <= bytes.size(), Errc::io, "'" + path + "' payload truncated");
        Tensor<double> t(shape);
        for (int64_t i = 0; i < n; ++i) {
          uint64_t u = get_u64(bytes.data() + off + size_t(i) * 8);
          std::memcpy(&t.data[size_t(i)], &u, 8);
        }
        off += size_t(n) * 8;
        ck.add(name, t);
      } else if (dtype == "u16") {
        check(off + size_t(n) * 2 <= bytes.size(), Errc::io, "'" + path + "' payload truncated");
        std::vector<uint16_t> codes(size_t(n), 0);
        for (int64_t i = 0; i < n; ++i)
          codes[size_t(i)] =
              uint16_t(bytes[off + size_t(i) * 2]) | uint16_t(uint16_t(bytes[off + size_t(i) * 2 + 1]) << 8);
        off += size_t(n) * 2;
        ck.add_codes(name, codes);
      } else {
        fail(Errc::io, "'" + path + "' has unknown dtype '" + dtype + "'");
      }
    }
    check(off == bytes.size(), Errc::io, "'" + path + "' has trailing bytes");
    return ck;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, Tensor<float>> f32_;
  std::map<std::string, Tensor<double>> f64_;
  std::map<std::string, std::vector<uint16_t>> u16_;
};

}  // namespace ctxwm
