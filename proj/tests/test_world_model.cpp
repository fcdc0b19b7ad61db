#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "ctxwm/world_model.hpp"
#include "fd_util.hpp"

using namespace ctxwm;

namespace {

FsqConfig tiny_fsq() {
  FsqConfig f;
  f.levels = {5, 3};
  f.latent_dim = 8;  // 4 positions x 15 codes
  return f;
}

WorldModelTrainConfig tiny_wm_cfg(LatentMode mode = LatentMode::discrete_ce) {
  WorldModelTrainConfig c;
  c.obs_hidden = {16};
  c.dyn_hidden = {24};
  c.reward_hidden = {16};
  c.horizon = 2;
  c.gamma = 0.9;
  c.lr = 3e-3;
  c.weight_decay = 0;
  c.latent_mode = mode;
  c.simnorm_group = 4;
  return c;
}

// 1-d point pushed toward a task goal; rewards depend on the goal so the two
// tasks are distinguishable from context alone
struct ToyTask {
  double goal;
  void step(double s, double a, double& sp, double& r) const {
    sp = std::clamp(s + 0.2 * a, -1.0, 1.0);
    r = -std::fabs(sp - goal);
  }
};

template <class T>
SegmentBatch<T> make_segments(const ToyTask& task, int h, int64_t b, Rng& rng) {
  SegmentBatch<T> seg;
  seg.s.assign(size_t(h) + 1, Tensor<T>({b, 1}));
  seg.a.assign(size_t(h), Tensor<T>({b, 1}));
  seg.r.assign(size_t(h), Tensor<T>({b, 1}));
  for (int64_t i = 0; i < b; ++i) {
    double s = 2 * rng.uniform() - 1;
    seg.s[0].data[size_t(i)] = T(s);
    for (int step = 0; step < h; ++step) {
      double a = 2 * rng.uniform() - 1, sp, r;
      task.step(s, a, sp, r);
      seg.a[size_t(step)].data[size_t(i)] = T(a);
      seg.r[size_t(step)].data[size_t(i)] = T(r);
      seg.s[size_t(step) + 1].data[size_t(i)] = T(sp);
      s = sp;
    }
  }
  return seg;
}

template <class T>
ContextBatch<T> make_context(const ToyTask& task, int64_t n, Rng& rng) {
  ContextBatch<T> b({n, context_input_dim(1, 1)});
  for (int64_t i = 0; i < n; ++i) {
    double s = 2 * rng.uniform() - 1, a = 2 * rng.uniform() - 1, sp, r;
    task.step(s, a, sp, r);
    pack_transition_row<T>(b, i, {T(s)}, {T(a)}, T(r), {T(sp)});
  }
  return b;
}

}  // namespace

TEST_CASE("plain encoding quantizes row by row and survives the code round trip") {
  WorldModel<double> wm(2, 1, 2, tiny_fsq(), tiny_wm_cfg(), Rng(3));
  Rng rng(4);
  Tensor<double> s({5, 2});
  for (auto& v : s.data) v = 3 * rng.normal();

  LatentBatch<double> lat = wm.encode_plain(s, false);
  REQUIRE(lat.values.shape == std::vector<int64_t>{5, 8});
  REQUIRE(lat.codes.size() == 5 * 4);

  // oracle: quantize each row of the raw encoder output independently
  Tensor<double> raw = wm.obs.forward_plain(s);
  for (int64_t r = 0; r < 5; ++r) {
    std::vector<double> row(raw.data.begin() + r * 8, raw.data.begin() + (r + 1) * 8);
    auto q = fsq_quantize(row, wm.fsq);
    for (int64_t c = 0; c < 8; ++c) CHECK(lat.values.at(r, c) == q.values[size_t(c)]);
    for (int64_t p = 0; p < 4; ++p) CHECK(lat.codes[size_t(r * 4 + p)] == q.codes[size_t(p)]);
  }

  Tensor<double> decoded = wm.decode_codes(lat.codes, 5);
  CHECK(decoded.data == lat.values.data);

  // the momentum encoder starts as an exact copy of the live one
  LatentBatch<double> ema = wm.encode_plain(s, true);
  CHECK(ema.codes == lat.codes);
  CHECK(ema.values.data == lat.values.data);

  // in-graph encoding produces the identical straight-through values and codes
  Graph<double> g;
  std::vector<uint16_t> gcodes;
  auto node = wm.encode_graph(g, s, &gcodes);
  CHECK(g.value(node).data == lat.values.data);
  CHECK(gcodes == lat.codes);
}

TEST_CASE("temporal-consistency loss matches a step-by-step plain recomputation") {
  WorldModel<double> wm(1, 1, 2, tiny_fsq(), tiny_wm_cfg(), Rng(17));
  ToyTask task{0.5};
  Rng data_rng(8);
  SegmentBatch<double> seg = make_segments<double>(task, 3, 6, data_rng);
  Tensor<double> z = Tensor<double>::row({0.3, -0.7});

  Graph<double> g;
  Rng gumbel_rng(99);
  TcResult<double> res = tc_loss(g, wm, g.constant(z), seg, gumbel_rng);
  REQUIRE(res.steps.size() == 3);
  REQUIRE(res.rollout_codes.size() == 3);
  REQUIRE(res.target_codes.size() == 3);

  int64_t b = 6, dp = wm.fsq.positions();
  int k = wm.fsq.codebook_size();
  double want_total = 0, gamma_pow = 1;
  for (int h = 0; h < 3; ++h) {
    Tensor<double> latent = wm.decode_codes(res.rollout_codes[size_t(h)], b);
    Tensor<double> in = wm.dyn_input(latent, seg.a[size_t(h)], z);

    // cross-entropy of the recorded targets under the plain dynamics forward
    Tensor<double> logits = wm.dyn.forward_plain(in);
    double ce = 0;
    for (int64_t row = 0; row < b; ++row)
      for (int64_t p = 0; p < dp; ++p) {
        const double* cell = logits.data.data() + row * logits.cols() + p * k;
        double mx = cell[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, cell[j]);
        double lse = 0;
        for (int j = 0; j < k; ++j) lse += std::exp(cell[j] - mx);
        lse = mx + std::log(lse);
        ce += lse - cell[res.target_codes[size_t(h)][size_t(row * dp + p)]];
      }
    ce /= double(b);

    Tensor<double> pred_r = wm.reward.forward_plain(in);
    double mse = 0;
    for (int64_t row = 0; row < b; ++row) {
      double d = pred_r.data[size_t(row)] - seg.r[size_t(h)].data[size_t(row)];
      mse += d * d / double(b);
    }

    CHECK(res.steps[size_t(h)].consistency == Catch::Approx(ce).epsilon(1e-10));
    CHECK(res.steps[size_t(h)].reward_mse == Catch::Approx(mse).epsilon(1e-10));
    want_total += gamma_pow * (ce + mse);
    gamma_pow *= wm.cfg.gamma;
  }
  CHECK(g.value(res.loss).data[0] == Catch::Approx(want_total).epsilon(1e-10));

  // loss coefficients rescale the two terms
  WorldModel<double> wm2(1, 1, 2, tiny_fsq(), tiny_wm_cfg(), Rng(17));
  wm2.cfg.consistency_coeff = 2.0;
  wm2.cfg.reward_coeff = 0.5;
  Graph<double> g2;
  Rng gr2(99);
  TcResult<double> res2 = tc_loss(g2, wm2, g2.constant(z), seg, gr2);
  double want2 = 0;
  gamma_pow = 1;
  for (int h = 0; h < 3; ++h) {
    want2 += gamma_pow * (2.0 * res2.steps[size_t(h)].consistency + 0.5 * res2.steps[size_t(h)].reward_mse);
    gamma_pow *= wm2.cfg.gamma;
  }
  CHECK(g2.value(res2.loss).data[0] == Catch::Approx(want2).epsilon(1e-10));
}

TEST_CASE("a one-step window reproduces the first step of a longer rollout") {
  WorldModel<double> wm(1, 1, 2, tiny_fsq(), tiny_wm_cfg(), Rng(23));
  ToyTask task{-0.2};
  Rng data_rng(5);
  SegmentBatch<double> seg3 = make_segments<double>(task, 3, 4, data_rng);
  SegmentBatch<double> seg1;
  seg1.s = {seg3.s[0], seg3.s[1]};
  seg1.a = {seg3.a[0]};
  seg1.r = {seg3.r[0]};

  Tensor<double> z = Tensor<double>::row({0.1, 0.4});
  Graph<double> ga, gb;
  Rng ra(7), rb(7);
  TcResult<double> full = tc_loss(ga, wm, ga.constant(z), seg3, ra);
  TcResult<double> first = tc_loss(gb, wm, gb.constant(z), seg1, rb);
  CHECK(first.steps.size() == 1);
  CHECK(first.steps[0].consistency == Catch::Approx(full.steps[0].consistency).epsilon(1e-12));
  CHECK(first.steps[0].reward_mse == Catch::Approx(full.steps[0].reward_mse).epsilon(1e-12));
  CHECK(gb.value(first.loss).data[0] ==
        Catch::Approx(full.steps[0].consistency + full.steps[0].reward_mse).epsilon(1e-12));
}

TEST_CASE("tc gradients agree with finite differences where the loss is smooth") {
  // The straight-through paths are deliberately biased estimators, so the
  // encoder is checked through the continuous mode where no rounding happens;
  // in the discrete mode only the heads and the context path are finite-
  // difference checkable.
  ToyTask task{0.3};
  Rng data_rng(11);
  SegmentBatch<double> seg = make_segments<double>(task, 2, 3, data_rng);
  ContextBatch<double> ctx = make_context<double>(task, 5, data_rng);

  SECTION("discrete mode: dynamics, reward and context-encoder parameters") {
    // one-step window: beyond one step the sampled rollout re-enters the loss
    // through the straight-through estimator, whose bias is the whole point
    WorldModel<double> wm(1, 1, 2, tiny_fsq(), tiny_wm_cfg(), Rng(31));
    ContextConfig cc;
    cc.z_dim = 2;
    cc.hidden = {8};
    ContextEncoder<double> enc(1, 1, cc, Rng(32));

    SegmentBatch<double> seg1;
    seg1.s = {seg.s[0], seg.s[1]};
    seg1.a = {seg.a[0]};
    seg1.r = {seg.r[0]};

    std::vector<Param<double>*> params = wm.dyn.param_ptrs();
    for (auto* p : wm.reward.param_ptrs()) params.push_back(p);
    for (auto* p : enc.net.param_ptrs()) params.push_back(p);

    auto build = [&](Graph<double>& g) {
      Rng gr(55);
      return tc_loss(g, wm, enc.encode_graph(g, ctx), seg1, gr).loss;
    };
    auto rep = fdtest::fd_check(params, build, 1e-5, 5e-4);
    INFO(rep.where);
    CHECK(rep.ok);
  }

  SECTION("continuous mode: every parameter including the observation encoder") {
    WorldModel<double> wm(1, 1, 2, tiny_fsq(), tiny_wm_cfg(LatentMode::continuous_mse), Rng(41));
    ContextConfig cc;
    cc.z_dim = 2;
    cc.hidden = {8};
    ContextEncoder<double> enc(1, 1, cc, Rng(42));

    std::vector<Param<double>*> params = wm.trained_param_ptrs();
    for (auto* p : enc.net.param_ptrs()) params.push_back(p);

    auto build = [&](Graph<double>& g) {
      Rng gr(56);
      return tc_loss(g, wm, enc.encode_graph(g, ctx), seg, gr).loss;
    };
    auto rep = fdtest::fd_check(params, build, 1e-5, 5e-4);
    INFO(rep.where);
    CHECK(rep.ok);
  }

  SECTION("simplex-normalized cosine mode") {
    WorldModelTrainConfig c = tiny_wm_cfg(LatentMode::simnorm_cosine);
    WorldModel<double> wm(1, 1, 2, tiny_fsq(), c, Rng(43));
    std::vector<Param<double>*> params = wm.trained_param_ptrs();
    Tensor<double> z = Tensor<double>::row({0.2, -0.3});
    auto build = [&](Graph<double>& g) {
      Rng gr(57);
      return tc_loss(g, wm, g.constant(z), seg, gr).loss;
    };
    auto rep = fdtest::fd_check(params, build, 1e-5, 5e-4);
    INFO(rep.where);
    CHECK(rep.ok);
  }
}

TEST_CASE("straight-through rollout sampling is categorical and reproducible") {
  WorldModel<double> wm(1, 1, 2, tiny_fsq(), tiny_wm_cfg(), Rng(3));
  // zero the dynamics head so the per-position categorical is exactly uniform
  for (auto* p : wm.dyn.param_ptrs())
    for (auto& v : p->value.data) v = 0;

  ToyTask task{0.0};
  Rng data_rng(2);
  SegmentBatch<double> seg = make_segments<double>(task, 2, 32, data_rng);
  Tensor<double> z = Tensor<double>::row({0.0, 0.0});

  std::map<uint16_t, int> freq;
  int total = 0;
  for (int rep = 0; rep < 40; ++rep) {
    Graph<double> g;
    Rng gr(1000 + rep);
    TcResult<double> res = tc_loss(g, wm, g.constant(z), seg, gr);
    for (uint16_t c : res.rollout_codes[1]) {
      ++freq[c];
      ++total;
    }
  }
  REQUIRE(total == 40 * 32 * 4);
  int k = wm.fsq.codebook_size();
  CHECK(int(freq.size()) == k);  // every code gets sampled
  for (auto& [code, count] : freq) {
    double f = double(count) / double(total);
    CHECK(f > 0.5 / k);
    CHECK(f < 2.0 / k);
  }

  // identical seeds give identical samples
  Graph<double> ga, gb;
  Rng ra(77), rb(77);
  auto res_a = tc_loss(ga, wm, ga.constant(z), seg, ra);
  auto res_b = tc_loss(gb, wm, gb.constant(z), seg, rb);
  CHECK(res_a.rollout_codes[1] == res_b.rollout_codes[1]);
  CHECK(ga.value(res_a.loss).data[0] == gb.value(res_b.loss).data[0]);
}

TEST_CASE("tc loss rejects malformed inputs") {
  WorldModel<double> wm(2, 1, 2, tiny_fsq(), tiny_wm_cfg(), Rng(3));
  Graph<double> g;
  Rng rng(1);
  SegmentBatch<double> empty;
  CHECK_THROWS_AS(tc_loss(g, wm, g.constant(Tensor<double>::row({0.0, 0.0})), empty, rng), Error);

  ToyTask task{0.0};
  Rng data_rng(2);
  SegmentBatch<double> seg;
  {
    Rng r2(2);
    seg = make_segments<double>(task, 2, 3, r2);  // 1-d states but the model wants 2-d
  }
  Graph<double> g2;
  CHECK_THROWS_AS(tc_loss(g2, wm, g2.constant(Tensor<double>::row({0.0, 0.0})), seg, rng), Error);

  WorldModel<double> wm1(1, 1, 2, tiny_fsq(), tiny_wm_cfg(), Rng(3));
  Graph<double> g3;
  CHECK_THROWS_AS(tc_loss(g3, wm1, g3.constant(Tensor<double>::row({0.0, 0.0, 0.0})), seg, rng),
                  Error);
}

TEST_CASE("joint training drives consistency and reward losses down") {
  FsqConfig fsq = tiny_fsq();
  WorldModelTrainConfig wc = tiny_wm_cfg();
  wc.horizon = 2;
  WorldModel<double> wm(1, 1, 2, fsq, wc, Rng(101));
  ContextConfig cc;
  cc.z_dim = 2;
  cc.hidden = {16};
  ContextEncoder<double> enc(1, 1, cc, Rng(102));
  PositiveBank<double> bank({0, 1}, 2);
  SpcTrainer<double> trainer(wm, enc, bank, cc, Rng(103));

  std::vector<ToyTask> tasks = {{0.6}, {-0.6}};
  Rng data_rng(104);
  auto draw_batch = [&]() {
    std::vector<TaskBatch<double>> batch;
    for (int t = 0; t < 2; ++t) {
      TaskBatch<double> tb;
      tb.task_id = t;
      tb.context = make_context<double>(tasks[size_t(t)], 16, data_rng);
      tb.seg = make_segments<double>(tasks[size_t(t)], wc.horizon, 16, data_rng);
      batch.push_back(std::move(tb));
    }
    return batch;
  };

  double head_cons = 0, tail_cons = 0, head_rmse = 0, tail_rmse = 0;
  double last_contrastive = 0;
  const int steps = 250, window = 25;
  for (int i = 0; i < steps; ++i) {
    WmStepStats st = trainer.step(draw_batch());
    CHECK(!st.contrastive_skipped);
    if (i < window) {
      head_cons += st.consistency_mean / window;
      head_rmse += st.reward_mse_mean / window;
    }
    if (i >= steps - window) {
      tail_cons += st.consistency_mean / window;
      tail_rmse += st.reward_mse_mean / window;
    }
    last_contrastive = st.contrastive;
  }
  CHECK(tail_cons < head_cons);
  CHECK(tail_rmse < head_rmse);
  CHECK(tail_cons < 0.9 * head_cons);  // a real drop, not noise
  CHECK(last_contrastive > 0.0);

  // the momentum encoder trails the live one instead of copying it
  bool differs = false;
  auto live = wm.obs.param_ptrs();
  auto ema = wm.obs_ema.param_ptrs();
  for (size_t i = 0; i < live.size(); ++i)
    for (size_t j = 0; j < live[i]->value.data.size(); ++j)
      if (live[i]->value.data[j] != ema[i]->value.data[j]) differs = true;
  CHECK(differs);

  // both bank entries have been pulled away from their zero init
  double b0 = 0, b1 = 0;
  for (double v : bank.entry(0).data) b0 += v * v;
  for (double v : bank.entry(1).data) b1 += v * v;
  CHECK(b0 > 0);
  CHECK(b1 > 0);

  // after training the dynamics head beats the marginal-mode baseline on
  // next-code prediction, and the reward head beats predicting the mean
  auto batch = draw_batch();
  const auto& tb = batch[0];
  Tensor<double> zt = enc.encode_plain(tb.context);
  LatentBatch<double> c0 = wm.encode_plain(tb.seg.s[0], false);
  LatentBatch<double> c1 = wm.encode_plain(tb.seg.s[1], true);
  auto predicted = wm.predict_codes_plain(c0.values, tb.seg.a[0], zt);

  int64_t dp = fsq.positions();
  std::map<uint16_t, int> mode_count;
  for (uint16_t c : c1.codes) ++mode_count[c];
  int mode = 0;
  for (auto& [c, n] : mode_count) mode = std::max(mode, n);
  int hits = 0;
  for (size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == c1.codes[i];
  double acc = double(hits) / double(predicted.size());
  double mode_acc = double(mode) / double(16 * dp);
  CHECK(acc > mode_acc);

  Tensor<double> pred_r = wm.predict_reward_plain(c0.values, tb.seg.a[0], zt);
  double mean_r = 0, var_r = 0, mse = 0;
  for (int64_t i = 0; i < 16; ++i) mean_r += tb.seg.r[0].data[size_t(i)] / 16.0;
  for (int64_t i = 0; i < 16; ++i) {
    double d = tb.seg.r[0].data[size_t(i)] - mean_r;
    var_r += d * d / 16.0;
    double e = pred_r.data[size_t(i)] - tb.seg.r[0].data[size_t(i)];
    mse += e * e / 16.0;
  }
  CHECK(mse < var_r);
}

TEST_CASE("contrastive pass handling: single task and beta = 0") {
  FsqConfig fsq = tiny_fsq();
  WorldModelTrainConfig wc = tiny_wm_cfg();
  ContextConfig cc;
  cc.z_dim = 2;
  cc.hidden = {8};
  ToyTask task{0.2};
  Rng data_rng(5);

  auto one_task_batch = [&]() {
    std::vector<TaskBatch<double>> batch(1);
    batch[0].task_id = 0;
    batch[0].context = make_context<double>(task, 8, data_rng);
    batch[0].seg = make_segments<double>(task, 2, 8, data_rng);
    return batch;
  };

  SECTION("single-task meta-batch skips the contrastive pass") {
    WorldModel<double> wm(1, 1, 2, fsq, wc, Rng(1));
    ContextEncoder<double> enc(1, 1, cc, Rng(2));
    PositiveBank<double> bank({0}, 2);
    SpcTrainer<double> trainer(wm, enc, bank, cc, Rng(3));
    WmStepStats st = trainer.step(one_task_batch());
    CHECK(st.contrastive_skipped);
    CHECK(st.contrastive == 0.0);
  }

  SECTION("beta = 0 disables the contrastive pass entirely") {
    wc.beta = 0.0;
    WorldModel<double> wm(1, 1, 2, fsq, wc, Rng(1));
    ContextEncoder<double> enc(1, 1, cc, Rng(2));
    PositiveBank<double> bank({0}, 2);
    SpcTrainer<double> trainer(wm, enc, bank, cc, Rng(3));
    WmStepStats st = trainer.step(one_task_batch());
    CHECK(!st.contrastive_skipped);
    CHECK(st.contrastive == 0.0);
  }

  SECTION("a diverged loss aborts with a numeric error") {
    WorldModel<double> wm(1, 1, 2, fsq, wc, Rng(1));
    ContextEncoder<double> enc(1, 1, cc, Rng(2));
    PositiveBank<double> bank({0}, 2);
    SpcTrainer<double> trainer(wm, enc, bank, cc, Rng(3));
    wm.reward.param_ptrs()[0]->value.data[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_MATCHES(trainer.step(one_task_batch()), Error,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("diverged")));
  }
}

TEST_CASE("every latent mode trains a step and keeps its latent invariants") {
  ToyTask task{0.4};
  ContextConfig cc;
  cc.z_dim = 2;
  cc.hidden = {8};

  for (LatentMode mode : {LatentMode::discrete_ce, LatentMode::continuous_mse,
                          LatentMode::continuous_cosine, LatentMode::simnorm_mse,
                          LatentMode::simnorm_cosine}) {
    CAPTURE(to_string(mode));
    WorldModel<double> wm(1, 1, 2, tiny_fsq(), tiny_wm_cfg(mode), Rng(7));
    ContextEncoder<double> enc(1, 1, cc, Rng(8));
    PositiveBank<double> bank({0, 1}, 2);
    SpcTrainer<double> trainer(wm, enc, bank, cc, Rng(9));

    Rng data_rng(10);
    std::vector<TaskBatch<double>> batch(2);
    for (int t = 0; t < 2; ++t) {
      batch[size_t(t)].task_id = t;
      batch[size_t(t)].context = make_context<double>(task, 8, data_rng);
      batch[size_t(t)].seg = make_segments<double>(task, 2, 8, data_rng);
    }
    WmStepStats st = trainer.step(batch);
    CHECK(std::isfinite(st.tc_total));

    Tensor<double> s({3, 1});
    s.data = {-0.5, 0.0, 0.5};
    LatentBatch<double> lat = wm.encode_plain(s, false);
    if (mode == LatentMode::discrete_ce) {
      CHECK(lat.codes.size() == 3 * 4);
    } else {
      CHECK(lat.codes.empty());
    }
    if (wm.simnorm()) {
      // each group of 4 entries is a simplex
      for (int64_t r = 0; r < 3; ++r)
        for (int64_t g0 = 0; g0 < 8; g0 += 4) {
          double sum = 0;
          for (int64_t j = 0; j < 4; ++j) {
            double v = lat.values.at(r, g0 + j);
            CHECK(v >= 0);
            sum += v;
          }
          CHECK(sum == Catch::Approx(1.0).epsilon(1e-9));
        }
    }
  }
}

TEST_CASE("training steps are reproducible from the seeds") {
  auto run = [](int seed) {
    WorldModel<double> wm(1, 1, 2, tiny_fsq(), tiny_wm_cfg(), Rng(seed));
    ContextConfig cc;
    cc.z_dim = 2;
    cc.hidden = {8};
    ContextEncoder<double> enc(1, 1, cc, Rng(seed + 1));
    PositiveBank<double> bank({0, 1}, 2);
    SpcTrainer<double> trainer(wm, enc, bank, cc, Rng(seed + 2));
    ToyTask t0{0.5}, t1{-0.5};
    Rng data_rng(seed + 3);
    std::vector<double> trace;
    for (int i = 0; i < 5; ++i) {
      std::vector<TaskBatch<double>> batch(2);
      batch[0] = {0, make_context<double>(t0, 8, data_rng),
                  make_segments<double>(t0, 2, 8, data_rng)};
      batch[1] = {1, make_context<double>(t1, 8, data_rng),
                  make_segments<double>(t1, 2, 8, data_rng)};
      WmStepStats st = trainer.step(batch);
      trace.push_back(st.tc_total);
      trace.push_back(st.contrastive);
    }
    return trace;
  };
  CHECK(run(42) == run(42));
  CHECK(run(42) != run(43));
}

TEST_CASE("float instantiation runs the same training code") {
  WorldModel<float> wm(1, 1, 2, tiny_fsq(), tiny_wm_cfg(), Rng(7));
  ContextConfig cc;
  cc.z_dim = 2;
  cc.hidden = {8};
  ContextEncoder<float> enc(1, 1, cc, Rng(8));
  PositiveBank<float> bank({0, 1}, 2);
  SpcTrainer<float> trainer(wm, enc, bank, cc, Rng(9));
  ToyTask t0{0.5}, t1{-0.5};
  Rng data_rng(10);
  std::vector<TaskBatch<float>> batch(2);
  batch[0] = {0, make_context<float>(t0, 8, data_rng), make_segments<float>(t0, 2, 8, data_rng)};
  batch[1] = {1, make_context<float>(t1, 8, data_rng), make_segments<float>(t1, 2, 8, data_rng)};
  WmStepStats st = trainer.step(batch);
  CHECK(std::isfinite(st.tc_total));
  CHECK(st.contrastive > 0);
}
