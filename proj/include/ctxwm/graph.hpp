#pragma once

// Reverse-mode autodiff on tensors. A Graph is a single-use tape: ops compute
// values eagerly and push a backward closure; backward() walks the tape in
// reverse creation order (which is already topological) and accumulates leaf
// gradients into the bound Param buffers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <deque>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ctxwm/common.hpp"
#include "ctxwm/tensor.hpp"

namespace ctxwm {

template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor<T>::zeros(value.shape);
  }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

template <class T>
class Graph {
 public:
  using Id = int32_t;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  const Tensor<T>& value(Id id) const { return nodes_[size_t(id)].value; }
  const Tensor<T>& grad(Id id) const {
    check(ran_backward_, Errc::contract, "gradient requested before backward()");
    return nodes_[size_t(id)].grad;
  }

  // ---- leaves ----

  Id constant(Tensor<T> v) { return push(std::move(v), false, nullptr); }

  Id leaf(Param<T>& p) { return push(p.value, true, &p); }

  // ---- elementwise / broadcast ----

  // b may equal a's shape, or be a row vector [1,c] (or [c]) broadcast over rows
  Id add(Id a, Id b) { return binary(a, b, /*sub=*/false); }
  Id sub(Id a, Id b) { return binary(a, b, /*sub=*/true); }

  Id mul(Id a, Id b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    bool bcast = rowvec_broadcast(av, bv);
    check(bcast || av.same_shape(bv), Errc::dimension,
          "mul shape mismatch: " + av.shape_str() + " vs " + bv.shape_str());
    Tensor<T> out = av;
    int64_t r = av.rows(), c = av.cols();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) out.data[size_t(i * c + j)] *= bv.data[size_t(bcast ? j : i * c + j)];
    Id y = push(std::move(out), needs(a) || needs(b), nullptr);
    if (needs(a) || needs(b))
      nodes_[size_t(y)].back = [this, a, b, y, bcast, r, c] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& av2 = value(a);
        const auto& bv2 = value(b);
        if (needs(a)) {
          auto& ga = nodes_[size_t(a)].grad;
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              ga.data[size_t(i * c + j)] += g.data[size_t(i * c + j)] * bv2.data[size_t(bcast ? j : i * c + j)];
        }
        if (needs(b)) {
          auto& gb = nodes_[size_t(b)].grad;
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              gb.data[size_t(bcast ? j : i * c + j)] += g.data[size_t(i * c + j)] * av2.data[size_t(i * c + j)];
        }
      };
    return y;
  }

  Id scale(Id a, T s) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v *= s;
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y, s] {
        accumulate(a, nodes_[size_t(y)].grad, [s](T g) { return g * s; });
      };
    return y;
  }

  Id add_scalar(Id a, T s) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v += s;
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y] {
        accumulate(a, nodes_[size_t(y)].grad, [](T g) { return g; });
      };
    return y;
  }

  Id neg(Id a) { return scale(a, T(-1)); }

  // ---- unary math ----

  Id tanh_(Id a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::tanh(v);
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& yv = nodes_[size_t(y)].value;
        auto& ga = nodes_[size_t(a)].grad;
        for (size_t i = 0; i < g.data.size(); ++i)
          ga.data[i] += g.data[i] * (T(1) - yv.data[i] * yv.data[i]);
      };
    return y;
  }

  Id mish(Id a) {
    const Tensor<T>& av = value(a);
    Tensor<T> out = av;
    for (auto& v : out.data) v = v * std::tanh(softplus(v));
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& xv = value(a);
        auto& ga = nodes_[size_t(a)].grad;
        for (size_t i = 0; i < g.data.size(); ++i) {
          T x = xv.data[i];
          T t = std::tanh(softplus(x));
          T s = T(1) / (T(1) + std::exp(-x));
          ga.data[i] += g.data[i] * (t + x * s * (T(1) - t * t));
        }
      };
    return y;
  }

  Id exp_(Id a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::exp(v);
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& yv = nodes_[size_t(y)].value;
        auto& ga = nodes_[size_t(a)].grad;
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * yv.data[i];
      };
    return y;
  }

  Id log_(Id a) {
    const Tensor<T>& av = value(a);
    Tensor<T> out = av;
    for (auto& v : out.data) {
      check(v > T(0), Errc::domain, "log of non-positive value");
      v = std::log(v);
    }
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& xv = value(a);
        auto& ga = nodes_[size_t(a)].grad;
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / xv.data[i];
      };
    return y;
  }

  Id square(Id a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = v * v;
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& xv = value(a);
        auto& ga = nodes_[size_t(a)].grad;
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * T(2) * xv.data[i];
      };
    return y;
  }

  Id sqrt_(Id a) {
    const Tensor<T>& av = value(a);
    Tensor<T> out = av;
    for (auto& v : out.data) {
      check(v > T(0), Errc::domain, "sqrt of non-positive value");
      v = std::sqrt(v);
    }
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& yv = nodes_[size_t(y)].value;
        auto& ga = nodes_[size_t(a)].grad;
        for (size_t i = 0; i < g.data.size(); ++i)
          ga.data[i] += g.data[i] * T(0.5) / yv.data[i];
      };
    return y;
  }

  // ---- structure ----

  Id matmul(Id a, Id b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    check(av.rank() <= 2 && bv.rank() == 2, Errc::dimension, "matmul expects 2-D operands");
    int64_t r = av.rows(), k = av.cols(), k2 = bv.rows(), c = bv.cols();
    check(k == k2, Errc::dimension,
          "matmul inner dimension mismatch: " + av.shape_str() + " vs " + bv.shape_str());
    Tensor<T> out({r, c});
    matmul_plain(av.data.data(), bv.data.data(), out.data.data(), r, k, c);
    Id y = push(std::move(out), needs(a) || needs(b), nullptr);
    if (needs(a) || needs(b))
      nodes_[size_t(y)].back = [this, a, b, y, r, k, c] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& av2 = value(a);
        const auto& bv2 = value(b);
        if (needs(a)) {
          // dA += g * B^T
          auto& ga = nodes_[size_t(a)].grad;
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) {
              T gij = g.data[size_t(i * c + j)];
              if (gij == T(0)) continue;
              const T* brow = bv2.data.data() + j;
              T* garow = ga.data.data() + i * k;
              for (int64_t t = 0; t < k; ++t) garow[t] += gij * brow[size_t(t * c)];
            }
        }
        if (needs(b)) {
          // dB += A^T * g
          auto& gb = nodes_[size_t(b)].grad;
          for (int64_t i = 0; i < r; ++i) {
            const T* arow = av2.data.data() + i * k;
            const T* grow = g.data.data() + i * c;
            for (int64_t t = 0; t < k; ++t) {
              T at = arow[t];
              if (at == T(0)) continue;
              T* gbrow = gb.data.data() + t * c;
              for (int64_t j = 0; j < c; ++j) gbrow[j] += at * grow[j];
            }
          }
        }
      };
    return y;
  }

  Id concat_cols(const std::vector<Id>& parts) {
    check(!parts.empty(), Errc::dimension, "concat of zero tensors");
    int64_t r = value(parts[0]).rows();
    int64_t c = 0;
    bool any = false;
    for (Id p : parts) {
      check(value(p).rows() == r, Errc::dimension, "concat row mismatch");
      c += value(p).cols();
      any = any || needs(p);
    }
    Tensor<T> out({r, c});
    int64_t off = 0;
    for (Id p : parts) {
      const auto& pv = value(p);
      int64_t pc = pv.cols();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < pc; ++j) out.data[size_t(i * c + off + j)] = pv.data[size_t(i * pc + j)];
      off += pc;
    }
    Id y = push(std::move(out), any, nullptr);
    if (any) {
      std::vector<Id> ps = parts;
      nodes_[size_t(y)].back = [this, ps, y, r, c] {
        const auto& g = nodes_[size_t(y)].grad;
        int64_t off2 = 0;
        for (Id p : ps) {
          int64_t pc = value(p).cols();
          if (needs(p)) {
            auto& gp = nodes_[size_t(p)].grad;
            for (int64_t i = 0; i < r; ++i)
              for (int64_t j = 0; j < pc; ++j)
                gp.data[size_t(i * pc + j)] += g.data[size_t(i * c + off2 + j)];
          }
          off2 += pc;
        }
      };
    }
    return y;
  }

  Id broadcast_rows(Id a, int64_t r) {
    const Tensor<T>& av = value(a);
    check(av.rows() == 1, Errc::dimension, "broadcast_rows expects a single row");
    int64_t c = av.cols();
    Tensor<T> out({r, c});
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) out.data[size_t(i * c + j)] = av.data[size_t(j)];
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y, r, c] {
        const auto& g = nodes_[size_t(y)].grad;
        auto& ga = nodes_[size_t(a)].grad;
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) ga.data[size_t(j)] += g.data[size_t(i * c + j)];
      };
    return y;
  }

  Id reshape(Id a, std::vector<int64_t> sh) {
    const Tensor<T>& av = value(a);
    check(Tensor<T>::numel_of(sh) == av.numel(), Errc::dimension,
          "reshape element count mismatch");
    Tensor<T> out(std::move(sh), av.data);
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y] {
        accumulate(a, nodes_[size_t(y)].grad, [](T g) { return g; });
      };
    return y;
  }

  // out[:, j] = a[:, perm[j]]; perm must be a permutation of 0..c-1
  Id permute_cols(Id a, std::vector<int64_t> perm) {
    const Tensor<T>& av = value(a);
    int64_t r = av.rows(), c = av.cols();
    check(int64_t(perm.size()) == c, Errc::dimension, "permute_cols size mismatch");
    Tensor<T> out({r, c});
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) out.data[size_t(i * c + j)] = av.data[size_t(i * c + perm[size_t(j)])];
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y, perm, r, c] {
        const auto& g = nodes_[size_t(y)].grad;
        auto& ga = nodes_[size_t(a)].grad;
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j)
            ga.data[size_t(i * c + perm[size_t(j)])] += g.data[size_t(i * c + j)];
      };
    return y;
  }

  Id gather_cols(Id a, std::vector<int64_t> idx) {
    const Tensor<T>& av = value(a);
    int64_t r = av.rows(), c = av.cols();
    check(int64_t(idx.size()) == r, Errc::dimension, "gather_cols needs one index per row");
    Tensor<T> out({r, 1});
    for (int64_t i = 0; i < r; ++i) {
      int64_t j = idx[size_t(i)];
      check(j >= 0 && j < c, Errc::dimension, "gather_cols index out of range");
      out.data[size_t(i)] = av.data[size_t(i * c + j)];
    }
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y, idx, c] {
        const auto& g = nodes_[size_t(y)].grad;
        auto& ga = nodes_[size_t(a)].grad;
        for (int64_t i = 0; i < g.numel(); ++i)
          ga.data[size_t(i * c + idx[size_t(i)])] += g.data[size_t(i)];
      };
    return y;
  }

  // ---- normalization / softmax ----

  Id layernorm(Id x, Id gamma, Id beta, T eps) {
    const Tensor<T>& xv = value(x);
    int64_t r = xv.rows(), c = xv.cols();
    check(value(gamma).numel() == c && value(beta).numel() == c, Errc::dimension,
          "layernorm affine size mismatch");
    check(c > 0, Errc::dimension, "layernorm on empty rows");
    Tensor<T> out({r, c});
    auto xhat = std::make_shared<Tensor<T>>(Tensor<T>({r, c}));
    auto inv = std::make_shared<std::vector<T>>(size_t(r));
    const auto& gv = value(gamma);
    const auto& bv = value(beta);
    for (int64_t i = 0; i < r; ++i) {
      const T* row = xv.data.data() + i * c;
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
      (*inv)[size_t(i)] = is;
      for (int64_t j = 0; j < c; ++j) {
        T xh = (row[j] - mu) * is;
        xhat->data[size_t(i * c + j)] = xh;
        out.data[size_t(i * c + j)] = xh * gv.data[size_t(j)] + bv.data[size_t(j)];
      }
    }
    bool any = needs(x) || needs(gamma) || needs(beta);
    Id y = push(std::move(out), any, nullptr);
    if (any)
      nodes_[size_t(y)].back = [this, x, gamma, beta, y, xhat, inv, r, c] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& gv2 = value(gamma);
        for (int64_t i = 0; i < r; ++i) {
          const T* grow = g.data.data() + i * c;
          const T* xh = xhat->data.data() + i * c;
          if (needs(beta)) {
            auto& gb = nodes_[size_t(beta)].grad;
            for (int64_t j = 0; j < c; ++j) gb.data[size_t(j)] += grow[j];
          }
          if (needs(gamma)) {
            auto& gg = nodes_[size_t(gamma)].grad;
            for (int64_t j = 0; j < c; ++j) gg.data[size_t(j)] += grow[j] * xh[j];
          }
          if (needs(x)) {
            auto& gx = nodes_[size_t(x)].grad;
            T m1 = 0, m2 = 0;
            for (int64_t j = 0; j < c; ++j) {
              T gh = grow[j] * gv2.data[size_t(j)];
              m1 += gh;
              m2 += gh * xh[j];
            }
            m1 /= T(c);
            m2 /= T(c);
            T is = (*inv)[size_t(i)];
            for (int64_t j = 0; j < c; ++j) {
              T gh = grow[j] * gv2.data[size_t(j)];
              gx.data[size_t(i * c + j)] += is * (gh - m1 - xh[j] * m2);
            }
          }
        }
      };
    return y;
  }

  Id softmax(Id a) {
    const Tensor<T>& av = value(a);
    int64_t r = av.rows(), c = av.cols();
    Tensor<T> out({r, c});
    for (int64_t i = 0; i < r; ++i) softmax_row(av.data.data() + i * c, out.data.data() + i * c, c);
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y, r, c] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& p = nodes_[size_t(y)].value;
        auto& ga = nodes_[size_t(a)].grad;
        for (int64_t i = 0; i < r; ++i) {
          T dot = 0;
          for (int64_t j = 0; j < c; ++j) dot += g.data[size_t(i * c + j)] * p.data[size_t(i * c + j)];
          for (int64_t j = 0; j < c; ++j)
            ga.data[size_t(i * c + j)] += p.data[size_t(i * c + j)] * (g.data[size_t(i * c + j)] - dot);
        }
      };
    return y;
  }

  Id log_softmax(Id a) {
    const Tensor<T>& av = value(a);
    int64_t r = av.rows(), c = av.cols();
    Tensor<T> out({r, c});
    for (int64_t i = 0; i < r; ++i) {
      const T* row = av.data.data() + i * c;
      T mx = row[0];
      for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      T lse = 0;
      for (int64_t j = 0; j < c; ++j) lse += std::exp(row[j] - mx);
      lse = mx + std::log(lse);
      for (int64_t j = 0; j < c; ++j) out.data[size_t(i * c + j)] = row[j] - lse;
    }
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y, r, c] {
        const auto& g = nodes_[size_t(y)].grad;
        const auto& lsm = nodes_[size_t(y)].value;
        auto& ga = nodes_[size_t(a)].grad;
        for (int64_t i = 0; i < r; ++i) {
          T gsum = 0;
          for (int64_t j = 0; j < c; ++j) gsum += g.data[size_t(i * c + j)];
          for (int64_t j = 0; j < c; ++j)
            ga.data[size_t(i * c + j)] +=
                g.data[size_t(i * c + j)] - std::exp(lsm.data[size_t(i * c + j)]) * gsum;
        }
      };
    return y;
  }

  // ---- reductions ----

  Id sum_all(Id a) {
    const Tensor<T>& av = value(a);
    T s = 0;
    for (T v : av.data) s += v;
    Id y = push(Tensor<T>::scalar(s), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y] {
        T g = nodes_[size_t(y)].grad.data[0];
        auto& ga = nodes_[size_t(a)].grad;
        for (auto& v : ga.data) v += g;
      };
    return y;
  }

  Id mean_all(Id a) {
    const Tensor<T>& av = value(a);
    check(av.numel() > 0, Errc::dimension, "mean of empty tensor");
    T s = 0;
    for (T v : av.data) s += v;
    T n = T(av.numel());
    Id y = push(Tensor<T>::scalar(s / n), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y, n] {
        T g = nodes_[size_t(y)].grad.data[0] / n;
        auto& ga = nodes_[size_t(a)].grad;
        for (auto& v : ga.data) v += g;
      };
    return y;
  }

  Id row_sum(Id a) {
    const Tensor<T>& av = value(a);
    int64_t r = av.rows(), c = av.cols();
    Tensor<T> out({r, 1});
    for (int64_t i = 0; i < r; ++i) {
      T s = 0;
      for (int64_t j = 0; j < c; ++j) s += av.data[size_t(i * c + j)];
      out.data[size_t(i)] = s;
    }
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y, r, c] {
        const auto& g = nodes_[size_t(y)].grad;
        auto& ga = nodes_[size_t(a)].grad;
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) ga.data[size_t(i * c + j)] += g.data[size_t(i)];
      };
    return y;
  }

  Id mean_rows(Id a) {
    const Tensor<T>& av = value(a);
    int64_t r = av.rows(), c = av.cols();
    check(r > 0, Errc::dimension, "mean_rows of empty tensor");
    Tensor<T> out({1, c});
    for (int64_t j = 0; j < c; ++j) {
      T s = 0;
      for (int64_t i = 0; i < r; ++i) s += av.data[size_t(i * c + j)];
      out.data[size_t(j)] = s / T(r);
    }
    Id y = push(std::move(out), needs(a), nullptr);
    if (needs(a))
      nodes_[size_t(y)].back = [this, a, y, r, c] {
        const auto& g = nodes_[size_t(y)].grad;
        auto& ga = nodes_[size_t(a)].grad;
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) ga.data[size_t(i * c + j)] += g.data[size_t(j)] / T(r);
      };
    return y;
  }

  // ---- gradient flow control ----

  Id detach(Id a) { return push(value(a), false, nullptr); }

  // value taken from `hard`, gradient passed through to `soft` unchanged
  Id straight_through(Id soft, Tensor<T> hard) {
    check(hard.same_shape(value(soft)), Errc::dimension, "straight_through shape mismatch");
    Id y = push(std::move(hard), needs(soft), nullptr);
    if (needs(soft))
      nodes_[size_t(y)].back = [this, soft, y] {
        accumulate(soft, nodes_[size_t(y)].grad, [](T g) { return g; });
      };
    return y;
  }

  // ---- backward ----

  void backward(Id loss) {
    check(!ran_backward_, Errc::contract, "backward() called twice on one graph");
    check(value(loss).numel() == 1, Errc::contract,
          "backward() needs a scalar loss, got shape " + value(loss).shape_str());
    ran_backward_ = true;
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad = Tensor<T>::zeros(n.value.shape);
    if (!nodes_[size_t(loss)].requires_grad)
      nodes_[size_t(loss)].grad = Tensor<T>::zeros(nodes_[size_t(loss)].value.shape);
    nodes_[size_t(loss)].grad.data[0] = T(1);
    for (int64_t i = int64_t(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.requires_grad) continue;
      if (n.back) n.back();
      if (n.bound) {
        auto& pg = n.bound->grad;
        for (size_t j = 0; j < pg.data.size(); ++j) pg.data[j] += n.grad.data[j];
      }
    }
  }

  static T softplus(T x) { return x > T(20) ? x : std::log1p(std::exp(x)); }

  static void matmul_plain(const T* a, const T* b, T* out, int64_t r, int64_t k, int64_t c) {
    std::fill(out, out + r * c, T(0));
    for (int64_t i = 0; i < r; ++i) {
      const T* arow = a + i * k;
      T* orow = out + i * c;
      for (int64_t t = 0; t < k; ++t) {
        T at = arow[t];
        if (at == T(0)) continue;
        const T* brow = b + t * c;
        for (int64_t j = 0; j < c; ++j) orow[j] += at * brow[j];
      }
    }
  }

  static void softmax_row(const T* in, T* out, int64_t c) {
    T mx = in[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    for (int64_t j = 0; j < c; ++j) out[j] /= sum;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> back;
    bool requires_grad = false;
    Param<T>* bound = nullptr;
  };

  Id push(Tensor<T> v, bool req, Param<T>* bound) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = req;
    n.bound = bound;
    nodes_.push_back(std::move(n));
    return Id(nodes_.size() - 1);
  }

  bool needs(Id id) const { return nodes_[size_t(id)].requires_grad; }

  template <class Fn>
  void accumulate(Id target, const Tensor<T>& g, Fn&& fn) {
    auto& ga = nodes_[size_t(target)].grad;
    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += fn(g.data[i]);
  }

  // add/sub share shape logic
  Id binary(Id a, Id b, bool is_sub) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    bool bcast = rowvec_broadcast(av, bv);
    check(bcast || av.same_shape(bv), Errc::dimension,
          (is_sub ? std::string("sub") : std::string("add")) + " shape mismatch: " +
              av.shape_str() + " vs " + bv.shape_str());
    Tensor<T> out = av;
    int64_t r = av.rows(), c = av.cols();
    T sgn = is_sub ? T(-1) : T(1);
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        out.data[size_t(i * c + j)] += sgn * bv.data[size_t(bcast ? j : i * c + j)];
    Id y = push(std::move(out), needs(a) || needs(b), nullptr);
    if (needs(a) || needs(b))
      nodes_[size_t(y)].back = [this, a, b, y, bcast, r, c, sgn] {
        const auto& g = nodes_[size_t(y)].grad;
        if (needs(a)) {
          auto& ga = nodes_[size_t(a)].grad;
          for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        }
        if (needs(b)) {
          auto& gb = nodes_[size_t(b)].grad;
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              gb.data[size_t(bcast ? j : i * c + j)] += sgn * g.data[size_t(i * c + j)];
        }
      };
    return y;
  }

  // true if b should broadcast as a row vector over a's rows
  static bool rowvec_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.same_shape(b)) return false;
    return b.numel() == a.cols() && b.rows() == 1 && a.rows() >= 1 && a.rank() == 2;
  }

  std::deque<Node> nodes_;
  bool ran_backward_ = false;
};

using Graphf = Graph<float>;
using Graphd = Graph<double>;

}  // namespace ctxwm
