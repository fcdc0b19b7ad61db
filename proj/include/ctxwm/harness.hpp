#pragma once

// Training orchestration and meta-test protocols: joint world-model /
// context-encoder / IQL training over an offline task dataset, checkpoint
// persistence of the whole model bundle, and the two evaluation protocols —
// zero-shot (z starts at 0 and tracks the running mean of everything seen so
// far) and k-shot (z frozen after k adaptation episodes).

#include <filesystem>
#include <iostream>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "ctxwm/checkpoint.hpp"
#include "ctxwm/config.hpp"
#include "ctxwm/csv.hpp"
#include "ctxwm/envs.hpp"
#include "ctxwm/iql.hpp"
#include "ctxwm/world_model.hpp"

namespace ctxwm {

// The IQL agent's optimizers hold pointers into the agent itself, so the
// bundle lives at a fixed address (heap-allocated, never copied or moved).
template <class T>
struct TrainedModel {
  Config cfg;
  int64_t s_dim = 0, a_dim = 0;
  std::vector<int> task_ids;
  WorldModel<T> wm;
  ContextEncoder<T> enc;
  PositiveBank<T> bank;
  IqlAgent<T> agent;
  int64_t step = 0;

  TrainedModel(const Config& c, int64_t s, int64_t a, std::vector<int> ids, Rng rng)
      : cfg(c),
        s_dim(s),
        a_dim(a),
        task_ids(std::move(ids)),
        wm(s, a, c.context.z_dim, c.fsq, c.wm, rng.fork(1)),
        enc(s, a, c.context, rng.fork(2)),
        bank(task_ids, c.context.z_dim),
        agent(c.fsq.latent_dim, c.context.z_dim, a, c.iql, rng.fork(3)) {}

  TrainedModel(const TrainedModel&) = delete;
  TrainedModel& operator=(const TrainedModel&) = delete;

  std::vector<Param<T>*> all_param_ptrs() {
    std::vector<Param<T>*> out;
    for (Mlp<T>* net : {&wm.obs, &wm.obs_ema, &wm.dyn, &wm.reward, &enc.net})
      for (auto* p : net->param_ptrs()) out.push_back(p);
    for (auto* p : agent.v.param_ptrs()) out.push_back(p);
    for (auto& q : agent.qs)
      for (auto* p : q.param_ptrs()) out.push_back(p);
    for (auto& q : agent.q_targets)
      for (auto* p : q.param_ptrs()) out.push_back(p);
    for (auto* p : agent.policy.param_ptrs()) out.push_back(p);
    out.push_back(&agent.log_std);
    return out;
  }
};

// ---- checkpoint persistence ----

namespace detail {

template <class T>
const Tensor<T>& ckpt_tensor(const Checkpoint& ck, const std::string& name) {
  if constexpr (std::is_same_v<T, float>)
    return ck.f32(name);
  else
    return ck.f64(name);
}

}  // namespace detail

template <class T>
void save_model(TrainedModel<T>& model, const std::string& path) {
  Checkpoint ck;
  ck.meta["artifact"] = "model";
  ck.meta["config"] = model.cfg.to_ini_text();
  ck.meta["step"] = model.step;
  ck.meta["s_dim"] = model.s_dim;
  ck.meta["a_dim"] = model.a_dim;
  ck.meta["task_ids"] = model.task_ids;
  for (Param<T>* p : model.all_param_ptrs()) ck.add(p->name, p->value);
  for (const auto& [id, entry] : model.bank.entries())
    ck.add("bank." + std::to_string(id), entry);
  ck.save(path);
}

template <class T>
std::unique_ptr<TrainedModel<T>> load_model(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  for (const char* key : {"artifact", "config", "step", "s_dim", "a_dim", "task_ids"})
    check(ck.meta.contains(key), Errc::io,
          std::string("checkpoint is missing the '") + key + "' field");
  check(ck.meta["artifact"] == "model", Errc::io, "checkpoint does not hold a model bundle");

  Config cfg;
  cfg.apply_ini_text(ck.meta["config"].get<std::string>());
  cfg.validate();
  auto model = std::make_unique<TrainedModel<T>>(
      cfg, ck.meta["s_dim"].get<int64_t>(), ck.meta["a_dim"].get<int64_t>(),
      ck.meta["task_ids"].get<std::vector<int>>(), Rng(1));
  model->step = ck.meta["step"].get<int64_t>();
  for (Param<T>* p : model->all_param_ptrs()) {
    const Tensor<T>& t = detail::ckpt_tensor<T>(ck, p->name);
    check(t.shape == p->value.shape, Errc::io,
          "checkpoint tensor '" + p->name + "' has an unexpected shape");
    p->value = t;
    p->zero_grad();
  }
  for (auto& [id, entry] : model->bank.entries()) {
    const Tensor<T>& t = detail::ckpt_tensor<T>(ck, "bank." + std::to_string(id));
    check(t.shape == entry.shape, Errc::io, "checkpoint bank entry has an unexpected shape");
    entry = t;
  }
  return model;
}

// ---- training loop ----

namespace detail {

// IQL consumes world-model latents and task representations as fixed inputs;
// nothing here back-propagates into the encoders.
template <class T>
IqlStepStats iql_step(TrainedModel<T>& m, const TaskDataset& ds, const std::vector<int>& chosen,
                      const std::vector<TaskBatch<T>>& batch, Rng& rng) {
  const int mb = int(chosen.size());
  const int total = std::max(m.cfg.iql.batch, mb);
  const int64_t d = m.wm.fsq.latent_dim, zd = m.enc.z_dim();

  IqlBatch<T> out;
  out.latent = Tensor<T>({total, d});
  out.latent_next = Tensor<T>({total, d});
  out.z = Tensor<T>({total, zd});
  out.a = Tensor<T>({total, m.a_dim});
  out.r = Tensor<T>({total, 1});
  out.done = Tensor<T>({total, 1});

  int64_t row = 0;
  for (int i = 0; i < mb; ++i) {
    int64_t n = total / mb + (i < total % mb ? 1 : 0);
    if (n == 0) continue;
    RawBatch<T> raw = ds.sample_transitions<T>(chosen[size_t(i)], n, rng);
    Tensor<T> lat = m.wm.encode_plain(raw.s, /*use_ema=*/false).values;
    Tensor<T> latn = m.wm.encode_plain(raw.sp, /*use_ema=*/false).values;
    Tensor<T> z = m.enc.encode_plain(batch[size_t(i)].context);
    for (int64_t j = 0; j < n; ++j, ++row) {
      std::copy_n(lat.data.begin() + j * d, d, out.latent.data.begin() + row * d);
      std::copy_n(latn.data.begin() + j * d, d, out.latent_next.data.begin() + row * d);
      std::copy_n(z.data.begin(), zd, out.z.data.begin() + row * zd);
      std::copy_n(raw.a.data.begin() + j * m.a_dim, m.a_dim,
                  out.a.data.begin() + row * m.a_dim);
      out.r.data[size_t(row)] = raw.r.data[size_t(j)];
      out.done.data[size_t(row)] = raw.done.data[size_t(j)];
    }
  }
  return m.agent.update(out);
}

}  // namespace detail

template <class T>
std::unique_ptr<TrainedModel<T>> train(const Config& cfg, const TaskDataset& ds, uint64_t seed,
                                       const std::string& out_dir) {
  cfg.validate();
  check(!ds.tasks().empty(), Errc::empty_dataset, "training dataset has no tasks");
  check(env_family_from(cfg.data.family) == ds.family, Errc::startup,
        "dataset family '" + to_string(ds.family) + "' does not match the configured family '" +
            cfg.data.family + "'");
  check(cfg.iql.batch >= 1, Errc::config, "iql batch must be >= 1");

  const int n_tasks = int(ds.tasks().size());
  const int mb = std::min(cfg.train.meta_batch, n_tasks);
  if (mb < cfg.train.meta_batch)
    std::cerr << "[ctxwm] meta-batch clipped to the " << n_tasks << " available tasks\n";
  if (n_tasks < 2)
    std::cerr << "[ctxwm] single training task: the contrastive objective is degenerate\n";

  std::vector<int> ids;
  for (const auto& td : ds.tasks()) ids.push_back(td.spec.task_id);
  auto model = std::make_unique<TrainedModel<T>>(cfg, ds.s_dim, ds.a_dim, ids,
                                                 Rng(mix_seed(seed, 0x0DE1)));
  SpcTrainer<T> trainer(model->wm, model->enc, model->bank, cfg.context,
                        Rng(mix_seed(seed, 0x90B)));
  Rng rng(mix_seed(seed, 0xDA7A));

  std::filesystem::create_directories(out_dir);
  CsvWriter wm_csv(out_dir + "/metrics_wm.csv", "metrics.wm",
                   {"step", "tc_total", "consistency", "reward_mse", "contrastive"});
  CsvWriter iql_csv(out_dir + "/metrics_iql.csv", "metrics.iql",
                    {"step", "v_loss", "q_loss", "pi_loss", "adv_mean", "awr_weight_mean"});

  std::vector<int> order(size_t(n_tasks), 0);
  for (int64_t it = 0; it < cfg.train.iters; ++it) {
    bool do_wm =
        cfg.iql.schedule == TrainSchedule::interleaved || it < cfg.train.wm_phase_iters;
    bool do_iql =
        cfg.iql.schedule == TrainSchedule::interleaved || it >= cfg.train.wm_phase_iters;

    // meta-batch of distinct tasks
    std::iota(order.begin(), order.end(), 0);
    for (int j = 0; j < mb; ++j)
      std::swap(order[size_t(j)], order[size_t(j + int(rng.uniform_int(n_tasks - j)))]);
    std::vector<int> chosen(order.begin(), order.begin() + mb);

    std::vector<TaskBatch<T>> batch;
    batch.reserve(size_t(mb));
    for (int idx : chosen) {
      TaskBatch<T> tb;
      tb.task_id = ds.task(idx).spec.task_id;
      tb.context = ds.sample_context<T>(idx, cfg.train.context_size, rng);
      tb.seg = ds.sample_segments<T>(idx, cfg.train.segments_per_task, cfg.wm.horizon, rng);
      batch.push_back(std::move(tb));
    }

    WmStepStats ws;
    if (do_wm) ws = trainer.step(batch);
    IqlStepStats is;
    if (do_iql) is = detail::iql_step(*model, ds, chosen, batch, rng);

    model->step = it + 1;
    bool log_it = it % cfg.train.metrics_every == 0 || it + 1 == cfg.train.iters;
    if (log_it && do_wm)
      wm_csv.row({std::to_string(it), fmt_g(ws.tc_total), fmt_g(ws.consistency_mean),
                  fmt_g(ws.reward_mse_mean), fmt_g(ws.contrastive)});
    if (log_it && do_iql)
      iql_csv.row({std::to_string(it), fmt_g(is.v_loss), fmt_g(is.q_loss), fmt_g(is.pi_loss),
                   fmt_g(is.adv_mean), fmt_g(is.awr_weight_mean)});
    if (cfg.train.checkpoint_every > 0 && (it + 1) % cfg.train.checkpoint_every == 0)
      save_model(*model, out_dir + "/checkpoint_" + std::to_string(it + 1) + ".ckpt");
  }
  save_model(*model, out_dir + "/model.ckpt");
  return model;
}

// ---- evaluation protocols ----

// exact running mean in incremental form
template <class T>
struct OnlineZ {
  Tensor<T> mean;
  int64_t count = 0;

  explicit OnlineZ(int64_t z_dim) : mean(Tensor<T>::zeros({1, z_dim})) {}

  void add(const Tensor<T>& e) {
    check(e.numel() == mean.numel(), Errc::dimension, "online z update dim mismatch");
    ++count;
    for (size_t j = 0; j < mean.data.size(); ++j)
      mean.data[j] += (e.data[j] - mean.data[j]) / T(count);
  }
};

struct EpisodeResult {
  int task_id = 0;
  std::string protocol;
  int k = 0;
  int episode = 0;
  double ret = 0;
  bool success = false;
};

namespace detail {

struct EpisodeOutcome {
  double ret = 0;
  bool success = false;
};

template <class T>
void check_env_dims(const TrainedModel<T>& m, const ToyEnv& env) {
  check(env.s_dim() == m.s_dim && env.a_dim() == m.a_dim, Errc::startup,
        "task family dimensions do not match the trained model");
}

// one evaluation episode; z comes from the online running mean when `online`
// is set, otherwise from the frozen vector
template <class T>
EpisodeOutcome run_episode(const TrainedModel<T>& m, const ToyEnv& env, uint64_t seed,
                           int episode, bool stochastic, Rng& act_rng, OnlineZ<T>* online,
                           const Tensor<T>* frozen) {
  std::vector<double> s = env.reset(seed, episode);
  EpisodeOutcome out;
  for (int t = 0; t < m.cfg.data.episode_len; ++t) {
    Tensor<T> srow({1, m.s_dim});
    for (int64_t j = 0; j < m.s_dim; ++j) srow.data[size_t(j)] = T(s[size_t(j)]);
    Tensor<T> latent = m.wm.encode_plain(srow, /*use_ema=*/false).values;
    const Tensor<T>& z = online ? online->mean : *frozen;
    Tensor<T> a = m.agent.act(latent, z, act_rng, stochastic);
    std::vector<double> av(a.data.begin(), a.data.end());
    StepResult st = env.step(s, av, seed, episode, t);
    out.ret += st.r;
    if (online) {
      ContextBatch<T> row({1, context_input_dim(m.s_dim, m.a_dim)});
      std::vector<T> sv(s.begin(), s.end()), act(a.data.begin(), a.data.end()),
          spv(st.sp.begin(), st.sp.end());
      pack_transition_row<T>(row, 0, sv, act, T(st.r), spv);
      online->add(m.enc.encode_plain(row));
    }
    if (st.done) {
      out.success = true;
      break;
    }
    s = st.sp;
  }
  return out;
}

}  // namespace detail

// z starts at zero and is refreshed after every observed transition; the
// frozen_zero flag pins z at zero instead (the no-adaptation baseline).
template <class T>
std::vector<EpisodeResult> zero_shot_eval(const TrainedModel<T>& m, const TaskSpec& spec,
                                          int episodes, uint64_t seed,
                                          bool frozen_zero = false) {
  check(episodes > 0, Errc::config, "evaluation needs at least one episode");
  ToyEnv env(spec);
  detail::check_env_dims(m, env);
  OnlineZ<T> z(m.enc.z_dim());
  Tensor<T> zero = Tensor<T>::zeros({1, m.enc.z_dim()});
  Rng act_rng(mix_seed(seed, 0xE7A1));
  std::vector<EpisodeResult> out;
  for (int ep = 0; ep < episodes; ++ep) {
    detail::EpisodeOutcome o =
        detail::run_episode<T>(m, env, seed, ep, /*stochastic=*/false, act_rng,
                               frozen_zero ? nullptr : &z, frozen_zero ? &zero : nullptr);
    out.push_back({spec.task_id, frozen_zero ? "zero-frozen" : "zero", 0, ep, o.ret, o.success});
  }
  return out;
}

// k adaptation episodes under the online-z protocol; returns the frozen mean
// encoding of everything collected (zero when k = 0)
template <class T>
Tensor<T> adapt_z(const TrainedModel<T>& m, const TaskSpec& spec, int k, uint64_t seed) {
  check(k >= 0, Errc::config, "adaptation episode count must be >= 0");
  ToyEnv env(spec);
  detail::check_env_dims(m, env);
  OnlineZ<T> z(m.enc.z_dim());
  Rng act_rng(mix_seed(seed, 0xADA7));
  for (int ep = 0; ep < k; ++ep)
    detail::run_episode<T>(m, env, seed, ep, m.cfg.eval.adaptation_stochastic, act_rng, &z,
                           nullptr);
  return z.mean;
}

template <class T>
std::vector<EpisodeResult> few_shot_eval(const TrainedModel<T>& m, const TaskSpec& spec, int k,
                                         int episodes, uint64_t seed) {
  check(episodes > 0, Errc::config, "evaluation needs at least one episode");
  Tensor<T> frozen = adapt_z(m, spec, k, seed);
  ToyEnv env(spec);
  Rng act_rng(mix_seed(seed, 0xFE41));  // untouched: frozen-z episodes act deterministically
  std::vector<EpisodeResult> out;
  for (int e = 0; e < episodes; ++e) {
    detail::EpisodeOutcome o = detail::run_episode<T>(m, env, seed, k + e, /*stochastic=*/false,
                                                      act_rng, nullptr, &frozen);
    out.push_back({spec.task_id, "few", k, e, o.ret, o.success});
  }
  return out;
}

inline void write_eval_results(const std::string& path, const std::vector<EpisodeResult>& rs) {
  CsvWriter out(path, "eval", {"task_id", "protocol", "k", "episode", "return", "success"});
  for (const EpisodeResult& r : rs)
    out.row({std::to_string(r.task_id), r.protocol, std::to_string(r.k),
             std::to_string(r.episode), fmt_g(r.ret), r.success ? "1" : "0"});
}

}  // namespace ctxwm
