#pragma once

// Task-context encoder: per-transition tanh embeddings of (s, a, r, s')
// averaged into a task representation z, with a momentum bank of positives
// and an InfoNCE loss over the meta-batch (FOCAL-style loss as an option).

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctxwm/common.hpp"
#include "ctxwm/config.hpp"
#include "ctxwm/graph.hpp"
#include "ctxwm/nn.hpp"
#include "ctxwm/tensor.hpp"

namespace ctxwm {

// rows: one transition each, laid out s ++ a ++ r ++ s'
template <class T>
using ContextBatch = Tensor<T>;

inline int64_t context_input_dim(int64_t s_dim, int64_t a_dim) { return 2 * s_dim + a_dim + 1; }

template <class T>
struct ContextEncoder {
  int64_t s_dim = 0, a_dim = 0;
  Mlp<T> net;

  ContextEncoder() = default;
  ContextEncoder(int64_t s, int64_t a, const ContextConfig& cfg, Rng rng)
      : s_dim(s), a_dim(a),
        net("context", MlpConfig{context_input_dim(s, a), cfg.hidden, cfg.z_dim, OutAct::tanh, 1e-5},
            rng) {}

  int64_t z_dim() const { return net.cfg.out; }

  // mean of the per-transition embeddings; empty context encodes to zero
  Tensor<T> encode_plain(const ContextBatch<T>& batch) const {
    if (batch.numel() == 0) return Tensor<T>::zeros({1, z_dim()});
    check(batch.cols() == net.cfg.in, Errc::dimension,
          "context batch width " + std::to_string(batch.cols()) + " != " +
              std::to_string(net.cfg.in));
    Tensor<T> e = net.forward_plain(batch);
    Tensor<T> z({1, z_dim()});
    int64_t n = e.rows();
    for (int64_t j = 0; j < z_dim(); ++j) {
      double s = 0;
      for (int64_t i = 0; i < n; ++i) s += double(e.at(i, j));
      z.data[size_t(j)] = T(s / double(n));
    }
    return z;
  }

  typename Graph<T>::Id encode_graph(Graph<T>& g, const ContextBatch<T>& batch) {
    check(batch.rows() > 0, Errc::empty_dataset, "cannot encode an empty context in-graph");
    return g.mean_rows(net.forward(g, g.constant(batch)));
  }
};

template <class T>
void pack_transition_row(Tensor<T>& batch, int64_t row, const std::vector<T>& s,
                         const std::vector<T>& a, T r, const std::vector<T>& sp) {
  int64_t sd = int64_t(s.size()), ad = int64_t(a.size());
  check(batch.cols() == 2 * sd + ad + 1, Errc::dimension, "transition row width mismatch");
  T* out = batch.data.data() + row * batch.cols();
  int64_t k = 0;
  for (T v : s) out[k++] = v;
  for (T v : a) out[k++] = v;
  out[k++] = r;
  for (T v : sp) out[k++] = v;
}

// ---- similarity / contrastive losses ----

// S(z1, z2) = exp(-||z1 - z2||^2 / alpha)
template <class T>
double similarity(const Tensor<T>& z1, const Tensor<T>& z2, double alpha) {
  check(alpha > 0, Errc::config, "similarity temperature alpha must be positive");
  check(z1.numel() == z2.numel(), Errc::dimension, "similarity dim mismatch");
  double d2 = 0;
  for (int64_t i = 0; i < z1.numel(); ++i) {
    double d = double(z1.data[size_t(i)]) - double(z2.data[size_t(i)]);
    d2 += d * d;
  }
  return std::exp(-d2 / alpha);
}

template <class T>
struct ContrastiveResult {
  typename Graph<T>::Id loss;
  bool degenerate = false;  // single-task batch: loss pinned to zero
};

// -sum_i log( S(z_i, bank_i) / sum_j S(z_i, bank_j) ), as logits over banks
template <class T>
ContrastiveResult<T> infonce_graph(Graph<T>& g, const std::vector<typename Graph<T>::Id>& zs,
                                   const std::vector<Tensor<T>>& bank, double alpha) {
  check(alpha > 0, Errc::config, "similarity temperature alpha must be positive");
  check(zs.size() == bank.size(), Errc::dimension, "one bank entry per task required");
  size_t n = zs.size();
  check(n >= 1, Errc::empty_dataset, "contrastive loss over an empty meta-batch");
  if (n == 1) return {g.constant(Tensor<T>::scalar(T(0))), true};

  typename Graph<T>::Id loss = g.constant(Tensor<T>::scalar(T(0)));
  for (size_t i = 0; i < n; ++i) {
    std::vector<typename Graph<T>::Id> logit_cells;
    logit_cells.reserve(n);
    for (size_t j = 0; j < n; ++j) {
      auto diff = g.sub(zs[i], g.constant(bank[j]));
      auto d2 = g.row_sum(g.square(diff));          // [1,1]
      logit_cells.push_back(g.scale(d2, T(-1.0 / alpha)));
    }
    auto logits = g.concat_cols(logit_cells);        // [1,n]
    auto picked = g.gather_cols(g.log_softmax(logits), {int64_t(i)});
    loss = g.sub(loss, g.reshape(picked, {1}));
  }
  return {loss, false};
}

// FOCAL-style alternative: pull own bank entry by squared distance, push other
// tasks by an inverse-square barrier.
template <class T>
ContrastiveResult<T> focal_graph(Graph<T>& g, const std::vector<typename Graph<T>::Id>& zs,
                                 const std::vector<Tensor<T>>& bank, double weight, double eps) {
  check(eps > 0, Errc::config, "focal eps must be positive");
  check(zs.size() == bank.size(), Errc::dimension, "one bank entry per task required");
  size_t n = zs.size();
  check(n >= 1, Errc::empty_dataset, "contrastive loss over an empty meta-batch");
  if (n == 1) return {g.constant(Tensor<T>::scalar(T(0))), true};

  typename Graph<T>::Id loss = g.constant(Tensor<T>::scalar(T(0)));
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) {
      auto d2 = g.row_sum(g.square(g.sub(zs[i], g.constant(bank[j]))));
      if (i == j) {
        loss = g.add(loss, g.reshape(d2, {1}));
      } else {
        // weight / (d2 + eps), via exp(-log(x)) to reuse existing ops
        auto inv = g.exp_(g.neg(g.log_(g.add_scalar(d2, T(eps)))));
        loss = g.add(loss, g.scale(g.reshape(inv, {1}), T(weight)));
      }
    }
  return {g.scale(loss, T(1.0 / double(n * n))), false};
}

// ---- positive bank ----

template <class T>
class PositiveBank {
 public:
  PositiveBank() = default;
  PositiveBank(const std::vector<int>& task_ids, int64_t z_dim) {
    for (int id : task_ids) bank_[id] = Tensor<T>::zeros({1, z_dim});
  }

  const Tensor<T>& entry(int task_id) const {
    auto it = bank_.find(task_id);
    check(it != bank_.end(), Errc::registry,
          "task id " + std::to_string(task_id) + " is not in the positive bank");
    return it->second;
  }

  // z_bar <- lambda * z + (1 - lambda) * z_bar
  void update(int task_id, const Tensor<T>& z, double lambda) {
    auto it = bank_.find(task_id);
    check(it != bank_.end(), Errc::registry,
          "task id " + std::to_string(task_id) + " is not in the positive bank");
    check(z.numel() == it->second.numel(), Errc::dimension, "bank update dim mismatch");
    check(lambda >= 0 && lambda <= 1, Errc::config, "bank momentum must lie in [0,1]");
    for (int64_t i = 0; i < z.numel(); ++i)
      it->second.data[size_t(i)] =
          T(lambda * double(z.data[size_t(i)]) + (1.0 - lambda) * double(it->second.data[size_t(i)]));
  }

  const std::map<int, Tensor<T>>& entries() const { return bank_; }
  std::map<int, Tensor<T>>& entries() { return bank_; }

 private:
  std::map<int, Tensor<T>> bank_;
};

}  // namespace ctxwm
