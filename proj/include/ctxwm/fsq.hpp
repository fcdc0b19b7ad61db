#pragma once

// Finite scalar quantization. A d-dim latent splits into d' positions of b
// channels; channel i is bounded to floor(L_i/2)*tanh(x) and rounded to an
// integer grid. Per position the b digits combine into one joint index with
// mixed radix, channel 0 fastest-varying.
//
// Memory layout is blocked: channel i of position p lives at x[i*d' + p].

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "ctxwm/common.hpp"
#include "ctxwm/graph.hpp"
#include "ctxwm/tensor.hpp"

namespace ctxwm {

struct FsqConfig {
  std::vector<int> levels = {5, 3};
  int64_t latent_dim = 64;

  int channels() const { return int(levels.size()); }
  int64_t positions() const { return latent_dim / int64_t(levels.size()); }

  int codebook_size() const {
    int k = 1;
    for (int l : levels) k *= l;
    return k;
  }

  int half_width(int channel) const { return levels[size_t(channel)] / 2; }

  void validate() const {
    check(!levels.empty(), Errc::config, "fsq needs at least one level");
    for (int l : levels) check(l >= 2, Errc::config, "fsq levels must be >= 2");
    check(latent_dim > 0, Errc::config, "fsq latent_dim must be positive");
    check(latent_dim % int64_t(levels.size()) == 0, Errc::config,
          "fsq latent_dim must be divisible by the channel count, got " +
              std::to_string(latent_dim) + " with " + std::to_string(levels.size()) + " channels");
    check(codebook_size() <= 65536, Errc::config, "fsq codebook exceeds 16-bit indices");
  }
};

template <class T>
struct QuantizeResult {
  std::vector<T> values;        // grid values, same layout as the input
  std::vector<uint16_t> codes;  // one joint index per position
};

// digits -> joint index (channel 0 fastest-varying)
inline uint16_t fsq_pack(const std::vector<int>& digits, const FsqConfig& cfg) {
  int64_t code = 0, radix = 1;
  for (int i = 0; i < cfg.channels(); ++i) {
    code += int64_t(digits[size_t(i)]) * radix;
    radix *= cfg.levels[size_t(i)];
  }
  return uint16_t(code);
}

// joint index -> per-channel grid values (centered: digit - floor(L/2))
inline void fsq_unpack(uint16_t code, const FsqConfig& cfg, int* out_values) {
  int64_t rest = code;
  for (int i = 0; i < cfg.channels(); ++i) {
    int l = cfg.levels[size_t(i)];
    out_values[i] = int(rest % l) - l / 2;
    rest /= l;
  }
}

template <class T>
QuantizeResult<T> fsq_quantize(const std::vector<T>& x, const FsqConfig& cfg) {
  cfg.validate();
  check(int64_t(x.size()) == cfg.latent_dim, Errc::dimension,
        "fsq input dim " + std::to_string(x.size()) + " != " + std::to_string(cfg.latent_dim));
  int64_t dp = cfg.positions();
  int b = cfg.channels();
  QuantizeResult<T> out;
  out.values.resize(x.size());
  out.codes.resize(size_t(dp));
  std::vector<int> digits(size_t(b), 0);
  for (int64_t p = 0; p < dp; ++p) {
    for (int i = 0; i < b; ++i) {
      T h = T(cfg.half_width(i));
      T v = std::round(h * std::tanh(x[size_t(i * dp + p)]));
      out.values[size_t(i * dp + p)] = v;
      digits[size_t(i)] = int(v) + cfg.half_width(i);
    }
    out.codes[size_t(p)] = fsq_pack(digits, cfg);
  }
  return out;
}

template <class T>
std::vector<T> fsq_decode(const std::vector<uint16_t>& codes, const FsqConfig& cfg) {
  cfg.validate();
  check(int64_t(codes.size()) == cfg.positions(), Errc::dimension,
        "fsq code count " + std::to_string(codes.size()) + " != " + std::to_string(cfg.positions()));
  int64_t dp = cfg.positions();
  int b = cfg.channels();
  std::vector<T> x(size_t(cfg.latent_dim));
  std::vector<int> vals(size_t(b), 0);
  for (int64_t p = 0; p < dp; ++p) {
    uint16_t c = codes[size_t(p)];
    check(int(c) < cfg.codebook_size(), Errc::domain,
          "fsq code " + std::to_string(c) + " outside codebook of size " +
              std::to_string(cfg.codebook_size()));
    fsq_unpack(c, cfg, vals.data());
    for (int i = 0; i < b; ++i) x[size_t(i * dp + p)] = T(vals[size_t(i)]);
  }
  return x;
}

// gradient of the bounded surrogate floor(L/2)*tanh(x): the round step passes
// gradients through unchanged (straight-through)
template <class T>
std::vector<T> fsq_ste_backward(const std::vector<T>& upstream, const std::vector<T>& x,
                                const FsqConfig& cfg) {
  check(upstream.size() == x.size() && int64_t(x.size()) == cfg.latent_dim, Errc::dimension,
        "fsq ste size mismatch");
  int64_t dp = cfg.positions();
  std::vector<T> gx(x.size());
  for (int i = 0; i < cfg.channels(); ++i) {
    T h = T(cfg.half_width(i));
    for (int64_t p = 0; p < dp; ++p) {
      size_t k = size_t(i * dp + p);
      T t = std::tanh(x[k]);
      gx[k] = upstream[k] * h * (T(1) - t * t);
    }
  }
  return gx;
}

// full decoded-value table, one row per joint code: [K, latent per position
// laid out as b channel values] -- used for soft (expected) decoding
template <class T>
Tensor<T> fsq_code_value_table(const FsqConfig& cfg) {
  int k = cfg.codebook_size();
  int b = cfg.channels();
  Tensor<T> tab({int64_t(k), int64_t(b)});
  std::vector<int> vals(size_t(b), 0);
  for (int c = 0; c < k; ++c) {
    fsq_unpack(uint16_t(c), cfg, vals.data());
    for (int i = 0; i < b; ++i) tab.at(c, i) = T(vals[size_t(i)]);
  }
  return tab;
}

// column permutation taking interleaved (position-major) channel values to the
// blocked layout: blocked[i*d'+p] = interleaved[p*b+i]
inline std::vector<int64_t> fsq_interleaved_to_blocked(const FsqConfig& cfg) {
  int64_t dp = cfg.positions();
  int b = cfg.channels();
  std::vector<int64_t> perm(size_t(cfg.latent_dim));
  for (int i = 0; i < b; ++i)
    for (int64_t p = 0; p < dp; ++p) perm[size_t(i * dp + p)] = p * b + i;
  return perm;
}

// In-graph quantization of a batch of latents [B, d]: value is the exact grid
// point, gradient flows through the bounded surrogate.
template <class T>
struct GraphQuantizeResult {
  typename Graph<T>::Id values;        // [B, d] straight-through node
  std::vector<uint16_t> codes;         // B * d' joint indices, row-major
};

template <class T>
GraphQuantizeResult<T> fsq_quantize_graph(Graph<T>& g, typename Graph<T>::Id x,
                                          const FsqConfig& cfg) {
  cfg.validate();
  const Tensor<T>& xv = g.value(x);
  check(xv.cols() == cfg.latent_dim, Errc::dimension, "fsq graph input dim mismatch");
  int64_t r = xv.rows(), dp = cfg.positions();
  int b = cfg.channels();

  Tensor<T> halfw({1, cfg.latent_dim});
  for (int i = 0; i < b; ++i)
    for (int64_t p = 0; p < dp; ++p) halfw.data[size_t(i * dp + p)] = T(cfg.half_width(i));
  auto bounded = g.mul(g.tanh_(x), g.constant(std::move(halfw)));

  const Tensor<T>& bv = g.value(bounded);
  Tensor<T> hard({r, cfg.latent_dim});
  GraphQuantizeResult<T> out;
  out.codes.resize(size_t(r * dp));
  std::vector<int> digits(size_t(b), 0);
  for (int64_t row = 0; row < r; ++row) {
    for (int64_t p = 0; p < dp; ++p) {
      for (int i = 0; i < b; ++i) {
        size_t k = size_t(row * cfg.latent_dim + i * dp + p);
        T v = std::round(bv.data[k]);
        hard.data[k] = v;
        digits[size_t(i)] = int(v) + cfg.half_width(i);
      }
      out.codes[size_t(row * dp + p)] = fsq_pack(digits, cfg);
    }
  }
  out.values = g.straight_through(bounded, std::move(hard));
  return out;
}

// ---- code serialization (unsigned 16-bit little-endian) ----

inline void append_codes_le(const std::vector<uint16_t>& codes, std::vector<uint8_t>& out) {
  for (uint16_t c : codes) {
    out.push_back(uint8_t(c & 0xff));
    out.push_back(uint8_t(c >> 8));
  }
}

inline std::vector<uint16_t> read_codes_le(const uint8_t* bytes, size_t n_codes) {
  std::vector<uint16_t> codes(n_codes);
  for (size_t i = 0; i < n_codes; ++i)
    codes[i] = uint16_t(bytes[2 * i]) | uint16_t(uint16_t(bytes[2 * i + 1]) << 8);
  return codes;
}

}  // namespace ctxwm
