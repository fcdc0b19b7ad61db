#pragma once

// MLP building block: every hidden layer is linear -> LayerNorm -> Mish,
// the output layer is a plain linear with an optional tanh.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ctxwm/common.hpp"
#include "ctxwm/graph.hpp"
#include "ctxwm/tensor.hpp"

namespace ctxwm {

enum class OutAct { identity, tanh };

struct MlpConfig {
  int64_t in = 0;
  std::vector<int64_t> hidden;
  int64_t out = 0;
  OutAct out_act = OutAct::identity;
  double ln_eps = 1e-5;

  void validate() const {
    check(in > 0 && out > 0, Errc::config, "mlp needs positive in/out dims");
    for (int64_t h : hidden) check(h > 0, Errc::config, "mlp hidden dim must be positive");
  }
};

template <class T>
struct Mlp {
  MlpConfig cfg;
  // per hidden layer: w, b, ln gamma, ln beta; then out w, out b
  std::vector<Param<T>> params;

  Mlp() = default;

  Mlp(std::string name, MlpConfig c, Rng rng) : cfg(std::move(c)) {
    cfg.validate();
    int64_t fan = cfg.in;
    for (size_t l = 0; l < cfg.hidden.size(); ++l) {
      int64_t h = cfg.hidden[l];
      std::string p = name + ".l" + std::to_string(l);
      params.emplace_back(p + ".w", init_weight(fan, h, rng));
      params.emplace_back(p + ".b", Tensor<T>::zeros({1, h}));
      params.emplace_back(p + ".ln.g", Tensor<T>::full({1, h}, T(1)));
      params.emplace_back(p + ".ln.b", Tensor<T>::zeros({1, h}));
      fan = h;
    }
    params.emplace_back(name + ".out.w", init_weight(fan, cfg.out, rng));
    params.emplace_back(name + ".out.b", Tensor<T>::zeros({1, cfg.out}));
  }

  // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
  static Tensor<T> init_weight(int64_t fan_in, int64_t fan_out, Rng& rng) {
    Tensor<T> w({fan_in, fan_out});
    double s = 1.0 / std::sqrt(double(fan_in));
    for (auto& v : w.data) v = T(rng.uniform(-s, s));
    return w;
  }

  typename Graph<T>::Id forward(Graph<T>& g, typename Graph<T>::Id x) {
    check(g.value(x).cols() == cfg.in, Errc::dimension,
          "mlp input dim " + std::to_string(g.value(x).cols()) + " != " + std::to_string(cfg.in));
    auto h = x;
    size_t p = 0;
    for (size_t l = 0; l < cfg.hidden.size(); ++l) {
      auto w = g.leaf(params[p++]);
      auto b = g.leaf(params[p++]);
      auto gam = g.leaf(params[p++]);
      auto bet = g.leaf(params[p++]);
      h = g.add(g.matmul(h, w), b);
      h = g.layernorm(h, gam, bet, T(cfg.ln_eps));
      h = g.mish(h);
    }
    auto w = g.leaf(params[p++]);
    auto b = g.leaf(params[p++]);
    h = g.add(g.matmul(h, w), b);
    if (cfg.out_act == OutAct::tanh) h = g.tanh_(h);
    return h;
  }

  // tape-free forward for evaluation paths
  Tensor<T> forward_plain(const Tensor<T>& x) const {
    check(x.cols() == cfg.in, Errc::dimension, "mlp input dim mismatch");
    int64_t r = x.rows();
    Tensor<T> h = x;
    if (h.rank() == 1) h.shape = {1, h.numel()};
    size_t p = 0;
    for (size_t l = 0; l < cfg.hidden.size(); ++l) {
      h = linear(h, params[p].value, params[p + 1].value);
      layernorm_inplace(h, params[p + 2].value, params[p + 3].value, T(cfg.ln_eps));
      for (auto& v : h.data) v = v * std::tanh(Graph<T>::softplus(v));
      p += 4;
    }
    h = linear(h, params[p].value, params[p + 1].value);
    if (cfg.out_act == OutAct::tanh)
      for (auto& v : h.data) v = std::tanh(v);
    (void)r;
    return h;
  }

  // activations of the last hidden layer (post-Mish); for representation probes
  Tensor<T> last_hidden_plain(const Tensor<T>& x) const {
    check(!cfg.hidden.empty(), Errc::contract, "mlp has no hidden layer");
    Tensor<T> h = x;
    if (h.rank() == 1) h.shape = {1, h.numel()};
    size_t p = 0;
    for (size_t l = 0; l < cfg.hidden.size(); ++l) {
      h = linear(h, params[p].value, params[p + 1].value);
      layernorm_inplace(h, params[p + 2].value, params[p + 3].value, T(cfg.ln_eps));
      for (auto& v : h.data) v = v * std::tanh(Graph<T>::softplus(v));
      p += 4;
    }
    return h;
  }

  static Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    int64_t r = x.rows(), k = x.cols(), c = w.cols();
    check(w.rows() == k, Errc::dimension, "linear weight shape mismatch");
    Tensor<T> out({r, c});
    Graph<T>::matmul_plain(x.data.data(), w.data.data(), out.data.data(), r, k, c);
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) out.data[size_t(i * c + j)] += b.data[size_t(j)];
    return out;
  }

  static void layernorm_inplace(Tensor<T>& h, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    int64_t r = h.rows(), c = h.cols();
    for (int64_t i = 0; i < r; ++i) {
      T* row = h.data.data() + i * c;
      T mu = 0;
      for (int64_t j = 0; j < c; ++j) mu += row[j];
      mu /= T(c);
      T var = 0;
      for (int64_t j = 0; j < c; ++j) {
        T d = row[j] - mu;
        var += d * d;
      }
      var /= T(c);
      T is = T(1) / std::sqrt(var + eps);
      for (int64_t j = 0; j < c; ++j)
        row[j] = (row[j] - mu) * is * gamma.data[size_t(j)] + beta.data[size_t(j)];
    }
  }

  std::vector<Param<T>*> param_ptrs() {
    std::vector<Param<T>*> out;
    out.reserve(params.size());
    for (auto& p : params) out.push_back(&p);
    return out;
  }

  void zero_grad() {
    for (auto& p : params) p.zero_grad();
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.value.numel();
    return n;
  }
};

}  // namespace ctxwm
