#pragma once

// Offline RL in the latent space: expectile value regression, twin Q heads
// with momentum targets, and advantage-weighted regression onto a squashed
// Gaussian policy. The policy-improvement rule sits behind a tiny registry so
// alternatives can plug into the same training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctxwm/common.hpp"
#include "ctxwm/config.hpp"
#include "ctxwm/graph.hpp"
#include "ctxwm/nn.hpp"
#include "ctxwm/optim.hpp"
#include "ctxwm/tensor.hpp"

namespace ctxwm {

// |tau - 1[u < 0]| * u^2, averaged
template <class T>
double expectile_loss_plain(const std::vector<T>& u, double tau) {
  check(tau > 0 && tau < 1, Errc::config, "expectile tau must lie in (0,1)");
  check(!u.empty(), Errc::empty_dataset, "expectile loss over an empty batch");
  double s = 0;
  for (T v : u) {
    double w = double(v) < 0 ? 1.0 - tau : tau;
    s += w * double(v) * double(v);
  }
  return s / double(u.size());
}

// graph version: the weights come from the current values and are treated as
// constants, which is the exact gradient almost everywhere
template <class T>
typename Graph<T>::Id expectile_loss_graph(Graph<T>& g, typename Graph<T>::Id u, double tau) {
  check(tau > 0 && tau < 1, Errc::config, "expectile tau must lie in (0,1)");
  const Tensor<T>& uv = g.value(u);
  Tensor<T> w(uv.shape);
  for (size_t i = 0; i < w.data.size(); ++i)
    w.data[i] = T(double(uv.data[i]) < 0 ? 1.0 - tau : tau);
  return g.mean_all(g.mul(g.square(u), g.constant(std::move(w))));
}

template <class T>
struct IqlBatch {
  Tensor<T> latent;       // [B, d]
  Tensor<T> z;            // [B, z_dim]
  Tensor<T> a;            // [B, a_dim]
  Tensor<T> r;            // [B, 1]
  Tensor<T> latent_next;  // [B, d]
  Tensor<T> done;         // [B, 1] in {0, 1}

  void validate(int64_t d, int64_t z_dim, int64_t a_dim) const {
    int64_t b = latent.rows();
    check(b > 0, Errc::empty_dataset, "iql batch is empty");
    check(latent.cols() == d && latent_next.rows() == b && latent_next.cols() == d,
          Errc::dimension, "latent batch shape mismatch");
    check(z.rows() == b && z.cols() == z_dim, Errc::dimension, "task representation mismatch");
    check(a.rows() == b && a.cols() == a_dim, Errc::dimension, "action batch mismatch");
    check(r.rows() == b && r.cols() == 1 && done.rows() == b && done.cols() == 1, Errc::dimension,
          "reward/done batch mismatch");
    for (T v : done.data)
      check(v == T(0) || v == T(1), Errc::domain, "done flags must be 0 or 1");
  }
};

namespace detail {

template <class T>
Tensor<T> hcat(std::initializer_list<const Tensor<T>*> parts) {
  int64_t b = (*parts.begin())->rows(), cols = 0;
  for (const Tensor<T>* p : parts) cols += p->cols();
  Tensor<T> out({b, cols});
  int64_t off = 0;
  for (const Tensor<T>* p : parts) {
    for (int64_t r = 0; r < b; ++r)
      std::copy_n(p->data.begin() + r * p->cols(), p->cols(),
                  out.data.begin() + r * cols + off);
    off += p->cols();
  }
  return out;
}

}  // namespace detail

struct IqlStepStats {
  double v_loss = 0;
  double q_loss = 0;
  double pi_loss = 0;
  double adv_mean = 0;
  double awr_weight_mean = 0;
};

template <class T>
class IqlAgent;

// seam for swapping the policy-improvement rule; "iql" = advantage-weighted
// regression with clamped exponential weights
template <class T>
using PolicyStepFn = std::function<void(IqlAgent<T>&, const IqlBatch<T>&, IqlStepStats&)>;

template <class T>
PolicyStepFn<T> make_policy_step(const std::string& name) {
  if (name == "iql")
    return [](IqlAgent<T>& agent, const IqlBatch<T>& batch, IqlStepStats& st) {
      agent.awr_update(batch, st);
    };
  fail(Errc::startup, "unknown policy optimizer '" + name + "' (available: iql)");
}

template <class T>
class IqlAgent {
 public:
  IqlTrainConfig cfg;
  int64_t d = 0, z_dim = 0, a_dim = 0;
  Mlp<T> v;
  std::vector<Mlp<T>> qs, q_targets;
  Mlp<T> policy;
  Param<T> log_std;

  IqlAgent(int64_t d_, int64_t z_dim_, int64_t a_dim_, const IqlTrainConfig& c, Rng rng)
      : cfg(c), d(d_), z_dim(z_dim_), a_dim(a_dim_),
        v("v", MlpConfig{d_ + z_dim_, c.hidden, 1, OutAct::identity, 1e-5}, rng.fork(1)),
        policy("policy", MlpConfig{d_ + z_dim_, c.hidden, a_dim_, OutAct::tanh, 1e-5},
               rng.fork(2)),
        log_std("policy.log_std", Tensor<T>::zeros({1, a_dim_})) {
    check(c.n_q >= 1, Errc::config, "need at least one Q head");
    check(c.tau > 0 && c.tau < 1, Errc::config, "expectile tau must lie in (0,1)");
    check(c.logstd_min < c.logstd_max, Errc::config, "log-std bounds are inverted");
    for (int i = 0; i < c.n_q; ++i) {
      std::string name = "q" + std::to_string(i);
      MlpConfig mc{d_ + a_dim_ + z_dim_, c.hidden, 1, OutAct::identity, 1e-5};
      qs.emplace_back(name, mc, rng.fork(10 + i));
      q_targets.emplace_back(name + "_target", mc, rng.fork(10 + i));  // same init stream
    }
    AdamConfig oc;
    oc.lr = c.lr;
    v_opt_ = Adam<T>(oc, v.param_ptrs());
    std::vector<Param<T>*> qp;
    for (auto& q : qs)
      for (auto* p : q.param_ptrs()) qp.push_back(p);
    q_opt_ = Adam<T>(oc, qp);
    auto pp = policy.param_ptrs();
    pp.push_back(&log_std);
    pi_opt_ = Adam<T>(oc, pp);
    policy_step_ = make_policy_step<T>(c.policy_optimizer);
  }

  std::vector<Param<T>*> trained_param_ptrs() {
    std::vector<Param<T>*> out = v.param_ptrs();
    for (auto& q : qs)
      for (auto* p : q.param_ptrs()) out.push_back(p);
    for (auto* p : policy.param_ptrs()) out.push_back(p);
    out.push_back(&log_std);
    return out;
  }

  // ---- plain evaluation ----

  Tensor<T> v_plain(const Tensor<T>& latent, const Tensor<T>& z) const {
    return v.forward_plain(detail::hcat<T>({&latent, &z}));
  }

  // elementwise minimum over heads
  Tensor<T> q_min_plain(const Tensor<T>& latent, const Tensor<T>& a, const Tensor<T>& z,
                        bool use_targets) const {
    Tensor<T> in = detail::hcat<T>({&latent, &a, &z});
    Tensor<T> out;
    const auto& heads = use_targets ? q_targets : qs;
    for (size_t i = 0; i < heads.size(); ++i) {
      Tensor<T> qi = heads[i].forward_plain(in);
      if (i == 0) {
        out = std::move(qi);
      } else {
        for (size_t j = 0; j < out.data.size(); ++j) out.data[j] = std::min(out.data[j], qi.data[j]);
      }
    }
    return out;
  }

  // y = r + gamma * (1 - done) * V(s'); terminal transitions bootstrap nothing
  Tensor<T> td_target(const IqlBatch<T>& batch) const {
    Tensor<T> vn = v_plain(batch.latent_next, batch.z);
    Tensor<T> y({vn.rows(), 1});
    for (int64_t i = 0; i < vn.rows(); ++i)
      y.data[size_t(i)] = T(double(batch.r.data[size_t(i)]) +
                            cfg.gamma * (1.0 - double(batch.done.data[size_t(i)])) *
                                double(vn.data[size_t(i)]));
    return y;
  }

  Tensor<T> act(const Tensor<T>& latent, const Tensor<T>& z, Rng& rng, bool stochastic) const {
    Tensor<T> mu = policy.forward_plain(detail::hcat<T>({&latent, &z}));
    if (!stochastic) return mu;
    for (int64_t i = 0; i < mu.rows(); ++i)
      for (int64_t j = 0; j < a_dim; ++j) {
        double sigma = std::exp(double(log_std.value.data[size_t(j)]));
        double raw = double(mu.at(i, j)) + sigma * rng.normal();
        mu.data[size_t(i * a_dim + j)] = T(std::clamp(raw, -1.0, 1.0));
      }
    return mu;
  }

  // ---- updates ----

  IqlStepStats update(const IqlBatch<T>& batch) {
    batch.validate(d, z_dim, a_dim);
    IqlStepStats st;
    value_update(batch, st);
    q_update(batch, st);
    policy_step_(*this, batch, st);
    return st;
  }

  // L_V = E[ L2^tau( Qbar_min(s,a) - V(s) ) ] with momentum-target Q heads
  void value_update(const IqlBatch<T>& batch, IqlStepStats& st) {
    Tensor<T> qmin = q_min_plain(batch.latent, batch.a, batch.z, /*use_targets=*/true);
    Graph<T> g;
    auto vs = v.forward(g, g.constant(detail::hcat<T>({&batch.latent, &batch.z})));
    auto u = g.sub(g.constant(qmin), vs);
    auto loss = expectile_loss_graph(g, u, cfg.tau);
    st.v_loss = double(g.value(loss).data[0]);
    check(std::isfinite(st.v_loss), Errc::numeric, "value loss diverged");
    g.backward(loss);
    v_opt_.step();
  }

  // both heads regress onto the same bootstrap target
  void q_update(const IqlBatch<T>& batch, IqlStepStats& st) {
    Tensor<T> y = td_target(batch);
    Graph<T> g;
    Tensor<T> in = detail::hcat<T>({&batch.latent, &batch.a, &batch.z});
    auto in_node = g.constant(in);
    auto loss = g.constant(Tensor<T>::scalar(T(0)));
    for (auto& q : qs) {
      auto qi = q.forward(g, in_node);
      loss = g.add(loss, g.mean_all(g.square(g.sub(qi, g.constant(y)))));
    }
    loss = g.scale(loss, T(1.0 / double(qs.size())));
    st.q_loss = double(g.value(loss).data[0]);
    check(std::isfinite(st.q_loss), Errc::numeric, "q loss diverged");
    g.backward(loss);
    q_opt_.step();
    for (size_t i = 0; i < qs.size(); ++i)
      ema_update(q_targets[i].param_ptrs(), qs[i].param_ptrs(), cfg.target_momentum);
  }

  // advantage-weighted regression: w = min(exp(A / B), clip), A from live heads
  void awr_update(const IqlBatch<T>& batch, IqlStepStats& st) {
    Tensor<T> qmin = q_min_plain(batch.latent, batch.a, batch.z, /*use_targets=*/false);
    Tensor<T> vs = v_plain(batch.latent, batch.z);
    int64_t b = batch.latent.rows();
    Tensor<T> w({b, 1});
    for (int64_t i = 0; i < b; ++i) {
      double adv = double(qmin.data[size_t(i)]) - double(vs.data[size_t(i)]);
      st.adv_mean += adv / double(b);
      double wi = std::min(std::exp(adv / cfg.awr_temperature), cfg.awr_clip);
      w.data[size_t(i)] = T(wi);
      st.awr_weight_mean += wi / double(b);
    }

    Graph<T> g;
    auto mu = policy.forward(g, g.constant(detail::hcat<T>({&batch.latent, &batch.z})));
    auto ls = g.broadcast_rows(g.leaf(log_std), b);
    auto scaled = g.mul(g.sub(g.constant(batch.a), mu), g.exp_(g.neg(ls)));
    auto quad = g.scale(g.row_sum(g.square(scaled)), T(-0.5));
    auto logp = g.add_scalar(g.sub(quad, g.row_sum(ls)),
                             T(-0.5 * double(a_dim) * std::log(2.0 * kPi)));
    auto loss = g.neg(g.mean_all(g.mul(g.constant(w), logp)));
    st.pi_loss = double(g.value(loss).data[0]);
    check(std::isfinite(st.pi_loss), Errc::numeric, "policy loss diverged");
    g.backward(loss);
    pi_opt_.step();
    for (auto& s : log_std.value.data)
      s = T(std::clamp(double(s), cfg.logstd_min, cfg.logstd_max));
  }

 private:
  Adam<T> v_opt_, q_opt_, pi_opt_;
  PolicyStepFn<T> policy_step_;
};

}  // namespace ctxwm
