#pragma once

// Contextual latent world model: an observation encoder quantized through the
// discrete grid codebook, a dynamics head that predicts a categorical over the
// next code per position, and a reward head, all conditioned on the task
// representation z. Training rolls the model forward over a short horizon with
// straight-through Gumbel samples and matches codes produced by a momentum
// copy of the encoder. Continuous and simplex-normalized latents are kept as
// ablation modes behind the same interface.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "ctxwm/common.hpp"
#include "ctxwm/config.hpp"
#include "ctxwm/context.hpp"
#include "ctxwm/fsq.hpp"
#include "ctxwm/graph.hpp"
#include "ctxwm/nn.hpp"
#include "ctxwm/optim.hpp"
#include "ctxwm/tensor.hpp"

namespace ctxwm {

// one rollout window: s_0..s_H, a_0..a_{H-1}, r_0..r_{H-1}
template <class T>
struct SegmentBatch {
  std::vector<Tensor<T>> s;
  std::vector<Tensor<T>> a;
  std::vector<Tensor<T>> r;

  int horizon() const { return int(a.size()); }
  int64_t batch() const { return s.empty() ? 0 : s[0].rows(); }

  void validate(int64_t s_dim, int64_t a_dim) const {
    check(!a.empty(), Errc::empty_dataset, "segment batch has no steps");
    check(s.size() == a.size() + 1 && r.size() == a.size(), Errc::dimension,
          "segment batch needs H+1 states, H actions, H rewards");
    int64_t b = s[0].rows();
    check(b > 0, Errc::empty_dataset, "segment batch is empty");
    for (const auto& t : s)
      check(t.rows() == b && t.cols() == s_dim, Errc::dimension, "segment state shape mismatch");
    for (const auto& t : a)
      check(t.rows() == b && t.cols() == a_dim, Errc::dimension, "segment action shape mismatch");
    for (const auto& t : r)
      check(t.rows() == b && t.cols() == 1, Errc::dimension, "segment reward shape mismatch");
  }
};

template <class T>
struct LatentBatch {
  Tensor<T> values;             // [B, latent_dim]
  std::vector<uint16_t> codes;  // B * positions joint indices (discrete mode only)
};

template <class T>
struct WorldModel {
  FsqConfig fsq;
  WorldModelTrainConfig cfg;
  int64_t s_dim = 0, a_dim = 0, z_dim = 0;
  Mlp<T> obs, obs_ema, dyn, reward;

  WorldModel() = default;
  WorldModel(int64_t s, int64_t a, int64_t z, const FsqConfig& f, const WorldModelTrainConfig& c,
             Rng rng)
      : fsq(f), cfg(c), s_dim(s), a_dim(a), z_dim(z),
        // the momentum encoder starts as an exact copy: same init stream
        obs("obs", MlpConfig{s, c.obs_hidden, f.latent_dim, OutAct::identity, 1e-5}, rng.fork(1)),
        obs_ema("obs_ema", MlpConfig{s, c.obs_hidden, f.latent_dim, OutAct::identity, 1e-5},
                rng.fork(1)),
        dyn("dyn", MlpConfig{f.latent_dim + a + z, c.dyn_hidden, dyn_out(f, c), OutAct::identity, 1e-5},
            rng.fork(2)),
        reward("reward",
               MlpConfig{f.latent_dim + a + z, c.reward_hidden, 1, OutAct::identity, 1e-5},
               rng.fork(3)) {
    fsq.validate();
    if (simnorm())
      check(fsq.latent_dim % cfg.simnorm_group == 0, Errc::config,
            "latent_dim must be divisible by simnorm_group");
  }

  bool discrete() const { return cfg.latent_mode == LatentMode::discrete_ce; }
  bool simnorm() const {
    return cfg.latent_mode == LatentMode::simnorm_mse ||
           cfg.latent_mode == LatentMode::simnorm_cosine;
  }
  bool cosine_loss() const {
    return cfg.latent_mode == LatentMode::continuous_cosine ||
           cfg.latent_mode == LatentMode::simnorm_cosine;
  }

  static int64_t dyn_out(const FsqConfig& f, const WorldModelTrainConfig& c) {
    return c.latent_mode == LatentMode::discrete_ce ? f.positions() * f.codebook_size()
                                                    : f.latent_dim;
  }

  std::vector<Param<T>*> trained_param_ptrs() {
    std::vector<Param<T>*> out = obs.param_ptrs();
    for (auto* p : dyn.param_ptrs()) out.push_back(p);
    for (auto* p : reward.param_ptrs()) out.push_back(p);
    return out;
  }

  // ---- plain (tape-free) paths ----

  LatentBatch<T> encode_plain(const Tensor<T>& s, bool use_ema) const {
    check(s.cols() == s_dim, Errc::dimension, "observation dim mismatch");
    Tensor<T> x = (use_ema ? obs_ema : obs).forward_plain(s);
    LatentBatch<T> out;
    if (discrete()) {
      out.values = Tensor<T>({x.rows(), fsq.latent_dim});
      out.codes.reserve(size_t(x.rows() * fsq.positions()));
      std::vector<T> rowbuf(size_t(fsq.latent_dim));
      for (int64_t r = 0; r < x.rows(); ++r) {
        std::copy_n(x.data.begin() + r * fsq.latent_dim, fsq.latent_dim, rowbuf.begin());
        auto q = fsq_quantize(rowbuf, fsq);
        std::copy(q.values.begin(), q.values.end(), out.values.data.begin() + r * fsq.latent_dim);
        out.codes.insert(out.codes.end(), q.codes.begin(), q.codes.end());
      }
    } else if (simnorm()) {
      out.values = simnorm_plain(x);
    } else {
      out.values = std::move(x);
    }
    return out;
  }

  Tensor<T> decode_codes(const std::vector<uint16_t>& codes, int64_t batch) const {
    check(discrete(), Errc::contract, "codes only exist in the discrete latent mode");
    check(int64_t(codes.size()) == batch * fsq.positions(), Errc::dimension,
          "code batch size mismatch");
    Tensor<T> out({batch, fsq.latent_dim});
    std::vector<uint16_t> rowbuf(size_t(fsq.positions()));
    for (int64_t r = 0; r < batch; ++r) {
      std::copy_n(codes.begin() + r * fsq.positions(), fsq.positions(), rowbuf.begin());
      auto vals = fsq_decode<T>(rowbuf, fsq);
      std::copy(vals.begin(), vals.end(), out.data.begin() + r * fsq.latent_dim);
    }
    return out;
  }

  Tensor<T> dyn_input(const Tensor<T>& latent, const Tensor<T>& a, const Tensor<T>& z) const {
    int64_t b = latent.rows();
    check(a.rows() == b && a.cols() == a_dim, Errc::dimension, "action batch mismatch");
    check(z.cols() == z_dim && (z.rows() == b || z.rows() == 1), Errc::dimension,
          "task representation mismatch");
    Tensor<T> in({b, fsq.latent_dim + a_dim + z_dim});
    for (int64_t r = 0; r < b; ++r) {
      T* row = in.data.data() + r * in.cols();
      std::copy_n(latent.data.begin() + r * fsq.latent_dim, fsq.latent_dim, row);
      std::copy_n(a.data.begin() + r * a_dim, a_dim, row + fsq.latent_dim);
      const T* zr = z.data.data() + (z.rows() == 1 ? 0 : r * z_dim);
      std::copy_n(zr, z_dim, row + fsq.latent_dim + a_dim);
    }
    return in;
  }

  // greedy (argmax) next-code prediction; diagnostics and tests
  std::vector<uint16_t> predict_codes_plain(const Tensor<T>& latent, const Tensor<T>& a,
                                            const Tensor<T>& z) const {
    check(discrete(), Errc::contract, "code prediction needs the discrete latent mode");
    Tensor<T> logits = dyn.forward_plain(dyn_input(latent, a, z));
    int64_t b = latent.rows(), dp = fsq.positions();
    int k = fsq.codebook_size();
    std::vector<uint16_t> codes(size_t(b * dp), 0);
    for (int64_t r = 0; r < b; ++r)
      for (int64_t p = 0; p < dp; ++p) {
        const T* row = logits.data.data() + r * logits.cols() + p * k;
        int best = 0;
        for (int j = 1; j < k; ++j)
          if (row[j] > row[best]) best = j;
        codes[size_t(r * dp + p)] = uint16_t(best);
      }
    return codes;
  }

  Tensor<T> predict_reward_plain(const Tensor<T>& latent, const Tensor<T>& a,
                                 const Tensor<T>& z) const {
    return reward.forward_plain(dyn_input(latent, a, z));
  }

  Tensor<T> simnorm_plain(const Tensor<T>& x) const {
    int64_t gsz = cfg.simnorm_group;
    Tensor<T> out({x.rows(), x.cols()});
    for (int64_t r = 0; r < x.rows(); ++r)
      for (int64_t g0 = 0; g0 < x.cols(); g0 += gsz) {
        const T* in = x.data.data() + r * x.cols() + g0;
        T* o = out.data.data() + r * x.cols() + g0;
        Graph<T>::softmax_row(in, o, gsz);
      }
    return out;
  }

  // ---- graph paths (live encoder only; momentum targets never carry grads) ----

  typename Graph<T>::Id simnorm_graph(Graph<T>& g, typename Graph<T>::Id x) const {
    int64_t rows = g.value(x).rows(), cols = g.value(x).cols();
    auto sm = g.softmax(g.reshape(x, {rows * (cols / cfg.simnorm_group), cfg.simnorm_group}));
    return g.reshape(sm, {rows, cols});
  }

  // latent node [B, latent_dim]; discrete mode also reports the codes
  typename Graph<T>::Id encode_graph(Graph<T>& g, const Tensor<T>& s,
                                     std::vector<uint16_t>* codes_out = nullptr) {
    check(s.cols() == s_dim, Errc::dimension, "observation dim mismatch");
    auto x = obs.forward(g, g.constant(s));
    if (discrete()) {
      auto q = fsq_quantize_graph(g, x, fsq);
      if (codes_out) *codes_out = std::move(q.codes);
      return q.values;
    }
    if (simnorm()) return simnorm_graph(g, x);
    return x;
  }
};

// ---- temporal-consistency objective ----

struct TcStepStats {
  double consistency = 0;  // cross-entropy (discrete) or latent mse / cosine distance
  double reward_mse = 0;
};

template <class T>
struct TcResult {
  typename Graph<T>::Id loss;  // scalar: sum_h gamma^h (c_coeff * consistency + r_coeff * mse)
  std::vector<TcStepStats> steps;
  std::vector<std::vector<uint16_t>> rollout_codes;  // discrete: codes entering step h (h=0 encoded)
  std::vector<std::vector<uint16_t>> target_codes;   // discrete: momentum codes of s_{h+1}
};

template <class T>
TcResult<T> tc_loss(Graph<T>& g, WorldModel<T>& wm, typename Graph<T>::Id z,
                    const SegmentBatch<T>& seg, Rng& rng) {
  seg.validate(wm.s_dim, wm.a_dim);
  check(g.value(z).rows() == 1 && g.value(z).cols() == wm.z_dim, Errc::dimension,
        "task representation must be a [1, z_dim] row");
  int h_total = seg.horizon();
  int64_t b = seg.batch();
  int64_t dp = wm.fsq.positions();
  int k = wm.fsq.codebook_size();

  TcResult<T> res;
  auto zb = g.broadcast_rows(z, b);

  std::vector<uint16_t> codes0;
  auto latent = wm.encode_graph(g, seg.s[0], &codes0);
  if (wm.discrete()) res.rollout_codes.push_back(std::move(codes0));

  Tensor<T> table = fsq_code_value_table<T>(wm.fsq);
  std::vector<int64_t> perm = fsq_interleaved_to_blocked(wm.fsq);

  res.loss = g.constant(Tensor<T>::scalar(T(0)));
  double gamma_pow = 1.0;
  for (int h = 0; h < h_total; ++h) {
    auto in = g.concat_cols({latent, g.constant(seg.a[size_t(h)]), zb});
    auto pred_r = wm.reward.forward(g, in);
    auto mse = g.mean_all(g.square(g.sub(pred_r, g.constant(seg.r[size_t(h)]))));

    typename Graph<T>::Id consistency;
    if (wm.discrete()) {
      auto logits = g.reshape(wm.dyn.forward(g, in), {b * dp, int64_t(k)});

      LatentBatch<T> target = wm.encode_plain(seg.s[size_t(h) + 1], /*use_ema=*/true);
      std::vector<int64_t> target_idx(target.codes.begin(), target.codes.end());
      auto picked = g.gather_cols(g.log_softmax(logits), target_idx);
      consistency = g.scale(g.sum_all(picked), T(-1.0 / double(b)));
      res.target_codes.push_back(std::move(target.codes));

      if (h + 1 < h_total) {
        // straight-through Gumbel rollout to the next latent
        Tensor<T> noise({b * dp, int64_t(k)});
        for (auto& v : noise.data) v = T(rng.gumbel());
        auto soft = g.softmax(g.scale(g.add(logits, g.constant(std::move(noise))),
                                      T(1.0 / wm.cfg.gumbel_temperature)));
        const Tensor<T>& sv = g.value(soft);
        std::vector<uint16_t> sampled(size_t(b * dp), 0);
        for (int64_t row = 0; row < b * dp; ++row) {
          const T* pr = sv.data.data() + row * k;
          int best = 0;
          for (int j = 1; j < k; ++j)
            if (pr[j] > pr[best]) best = j;
          sampled[size_t(row)] = uint16_t(best);
        }
        Tensor<T> hard = wm.decode_codes(sampled, b);
        auto soft_vals = g.permute_cols(
            g.reshape(g.matmul(soft, g.constant(table)), {b, wm.fsq.latent_dim}), perm);
        latent = g.straight_through(soft_vals, std::move(hard));
        res.rollout_codes.push_back(std::move(sampled));
      }
    } else {
      auto pred = wm.dyn.forward(g, in);
      if (wm.simnorm()) pred = wm.simnorm_graph(g, pred);
      Tensor<T> target = wm.encode_plain(seg.s[size_t(h) + 1], /*use_ema=*/true).values;
      if (wm.cosine_loss()) {
        Tensor<T> tnorm({b, 1});
        for (int64_t r = 0; r < b; ++r) {
          double s = 0;
          for (int64_t c = 0; c < target.cols(); ++c)
            s += double(target.at(r, c)) * double(target.at(r, c));
          tnorm.data[size_t(r)] = T(std::sqrt(s + 1e-12));
        }
        auto dot = g.row_sum(g.mul(pred, g.constant(target)));
        auto pnorm = g.sqrt_(g.add_scalar(g.row_sum(g.square(pred)), T(1e-12)));
        auto denom = g.mul(pnorm, g.constant(std::move(tnorm)));
        auto cosine = g.mul(dot, g.exp_(g.neg(g.log_(denom))));
        consistency = g.sub(g.constant(Tensor<T>::scalar(T(1))), g.mean_all(cosine));
      } else {
        consistency = g.mean_all(g.square(g.sub(pred, g.constant(target))));
      }
      latent = pred;
    }

    res.steps.push_back(TcStepStats{double(g.value(consistency).data[0]),
                                    double(g.value(mse).data[0])});
    auto step_loss = g.add(g.scale(consistency, T(wm.cfg.consistency_coeff)),
                           g.scale(mse, T(wm.cfg.reward_coeff)));
    res.loss = g.add(res.loss, g.scale(step_loss, T(gamma_pow)));
    gamma_pow *= wm.cfg.gamma;
  }
  return res;
}

// ---- joint training step ----

template <class T>
struct TaskBatch {
  int task_id = 0;
  ContextBatch<T> context;
  SegmentBatch<T> seg;
};

struct WmStepStats {
  double tc_total = 0;         // summed over the meta-batch
  double consistency_mean = 0; // per task-step average
  double reward_mse_mean = 0;
  double contrastive = 0;      // raw batch value before the beta weight
  bool contrastive_skipped = false;
};

template <class T>
class SpcTrainer {
 public:
  SpcTrainer(WorldModel<T>& wm, ContextEncoder<T>& enc, PositiveBank<T>& bank,
             const ContextConfig& ctx_cfg, Rng rng)
      : wm_(&wm), enc_(&enc), bank_(&bank), ctx_cfg_(ctx_cfg), rng_(rng) {
    auto params = wm.trained_param_ptrs();
    for (auto* p : enc.net.param_ptrs()) params.push_back(p);
    AdamConfig wc;
    wc.lr = wm.cfg.lr;
    wc.weight_decay = wm.cfg.weight_decay;
    wc.grad_clip = wm.cfg.grad_clip;
    wm_opt_ = Adam<T>(wc, params);
    AdamConfig cc;
    cc.lr = wm.cfg.lr;
    cc.grad_clip = wm.cfg.grad_clip;
    ctx_opt_ = Adam<T>(cc, enc.net.param_ptrs());
  }

  WmStepStats step(const std::vector<TaskBatch<T>>& batch) {
    check(!batch.empty(), Errc::empty_dataset, "world-model step needs at least one task");
    WmStepStats st;

    // pass 1: temporal consistency through the shared graph
    {
      Graph<T> g;
      auto total = g.constant(Tensor<T>::scalar(T(0)));
      int n_steps = 0;
      for (const auto& tb : batch) {
        auto z = enc_->encode_graph(g, tb.context);
        auto tc = tc_loss(g, *wm_, z, tb.seg, rng_);
        total = g.add(total, tc.loss);
        for (const auto& s : tc.steps) {
          st.consistency_mean += s.consistency;
          st.reward_mse_mean += s.reward_mse;
          ++n_steps;
        }
      }
      st.tc_total = double(g.value(total).data[0]);
      st.consistency_mean /= double(n_steps);
      st.reward_mse_mean /= double(n_steps);
      check(std::isfinite(st.tc_total), Errc::numeric, "temporal-consistency loss diverged");
      g.backward(total);
      wm_opt_.step();
    }

    // pass 2: contrastive objective on the context encoder alone
    if (wm_->cfg.beta > 0) {
      if (batch.size() < 2) {
        st.contrastive_skipped = true;
        if (!warned_single_task_) {
          std::cerr << "[ctxwm] contrastive loss skipped: meta-batch has a single task\n";
          warned_single_task_ = true;
        }
      } else {
        Graph<T> g;
        std::vector<typename Graph<T>::Id> zs;
        std::vector<Tensor<T>> banks;
        for (const auto& tb : batch) {
          zs.push_back(enc_->encode_graph(g, tb.context));
          banks.push_back(bank_->entry(tb.task_id));
        }
        ContrastiveResult<T> res =
            ctx_cfg_.contrastive == ContrastiveMode::infonce
                ? infonce_graph(g, zs, banks, ctx_cfg_.alpha)
                : focal_graph(g, zs, banks, ctx_cfg_.focal_weight, ctx_cfg_.focal_eps);
        st.contrastive = double(g.value(res.loss).data[0]);
        check(std::isfinite(st.contrastive), Errc::numeric, "contrastive loss diverged");
        g.backward(g.scale(res.loss, T(wm_->cfg.beta)));
        ctx_opt_.step();
      }
    }

    // momentum encoder and positive bank trail the live networks
    ema_update(wm_->obs_ema.param_ptrs(), wm_->obs.param_ptrs(), wm_->cfg.ema_momentum);
    for (const auto& tb : batch)
      bank_->update(tb.task_id, enc_->encode_plain(tb.context), ctx_cfg_.bank_momentum);
    return st;
  }

 private:
  WorldModel<T>* wm_ = nullptr;
  ContextEncoder<T>* enc_ = nullptr;
  PositiveBank<T>* bank_ = nullptr;
  ContextConfig ctx_cfg_;
  Rng rng_;
  Adam<T> wm_opt_, ctx_opt_;
  bool warned_single_task_ = false;
};

}  // namespace ctxwm
