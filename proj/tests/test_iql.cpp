#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ctxwm/iql.hpp"
#include "fd_util.hpp"

using namespace ctxwm;

namespace {

// two latent states (-1, +1); action a in {-1, +1} moves to state a; taking
// +1 pays 1, taking -1 pays 0; nothing terminates
struct ChainSpec {
  double gamma = 0.9, tau = 0.8;
  static double reward(double a) { return a > 0 ? 1.0 : 0.0; }
  static double next_state(double a) { return a; }
};

// tabular fixpoint of the expectile Bellman recursion under uniform behavior
struct ChainOracle {
  double V[2];     // [-1, +1]
  double Q[2][2];  // [state][action]
  explicit ChainOracle(const ChainSpec& c) {
    V[0] = V[1] = 0;
    for (int it = 0; it < 500; ++it) {
      for (int s = 0; s < 2; ++s) {
        Q[s][0] = ChainSpec::reward(-1) + c.gamma * V[0];
        Q[s][1] = ChainSpec::reward(+1) + c.gamma * V[1];
      }
      for (int s = 0; s < 2; ++s) {
        double lo = std::min(Q[s][0], Q[s][1]), hi = std::max(Q[s][0], Q[s][1]);
        V[s] = (1 - c.tau) * lo + c.tau * hi;
      }
    }
  }
};

IqlBatch<double> chain_batch(int repeats) {
  const double states[2] = {-1.0, 1.0};
  const double actions[2] = {-1.0, 1.0};
  int64_t b = 4 * repeats;
  IqlBatch<double> batch;
  batch.latent = Tensor<double>({b, 1});
  batch.z = Tensor<double>::zeros({b, 1});
  batch.a = Tensor<double>({b, 1});
  batch.r = Tensor<double>({b, 1});
  batch.latent_next = Tensor<double>({b, 1});
  batch.done = Tensor<double>::zeros({b, 1});
  int64_t i = 0;
  for (int rep = 0; rep < repeats; ++rep)
    for (double s : states)
      for (double a : actions) {
        batch.latent.data[size_t(i)] = s;
        batch.a.data[size_t(i)] = a;
        batch.r.data[size_t(i)] = ChainSpec::reward(a);
        batch.latent_next.data[size_t(i)] = ChainSpec::next_state(a);
        ++i;
      }
  return batch;
}

IqlTrainConfig chain_cfg() {
  IqlTrainConfig c;
  c.hidden = {32, 32};
  c.tau = 0.8;
  c.gamma = 0.9;
  c.lr = 3e-3;
  c.target_momentum = 0.05;
  c.awr_temperature = 0.25;  // sharp weighting so the best action dominates
  return c;
}

}  // namespace

TEST_CASE("expectile loss closed forms") {
  CHECK(expectile_loss_plain<double>({1.0}, 0.8) == Catch::Approx(0.8));
  CHECK(expectile_loss_plain<double>({-1.0}, 0.8) == Catch::Approx(0.2));
  CHECK(expectile_loss_plain<double>({2.0, -2.0}, 0.5) == Catch::Approx(0.5 * 4.0));
  // tau = 1/2 halves the squared error regardless of sign
  Rng rng(3);
  std::vector<double> u(32);
  double mean_sq = 0;
  for (auto& x : u) {
    x = rng.normal();
    mean_sq += x * x / 32.0;
  }
  CHECK(expectile_loss_plain(u, 0.5) == Catch::Approx(0.5 * mean_sq));

  CHECK_THROWS_AS(expectile_loss_plain<double>({1.0}, 0.0), Error);
  CHECK_THROWS_AS(expectile_loss_plain<double>({1.0}, 1.0), Error);
  CHECK_THROWS_AS(expectile_loss_plain<double>({}, 0.5), Error);
}

TEST_CASE("graph expectile loss matches the plain one and its finite differences") {
  Rng rng(5);
  Param<double> p("residuals", Tensor<double>({1, 8}));
  for (auto& x : p.value.data) x = rng.normal() + 0.3;

  Graph<double> g;
  auto loss = expectile_loss_graph(g, g.leaf(p), 0.7);
  CHECK(g.value(loss).data[0] == Catch::Approx(expectile_loss_plain(p.value.data, 0.7)));

  auto rep = fdtest::fd_check({&p}, [&](Graph<double>& g2) {
    return expectile_loss_graph(g2, g2.leaf(p), 0.7);
  });
  INFO(rep.where);
  CHECK(rep.ok);
}

TEST_CASE("expectile regression reaches the bisection-oracle expectile") {
  // skewed sample
  Rng rng(11);
  std::vector<double> y(64);
  for (auto& v : y) v = std::exp(rng.normal());
  double tau = 0.8;

  // oracle: root of the (increasing) derivative sum_i |tau - 1[y_i < m]| (m - y_i)
  auto deriv = [&](double m) {
    double s = 0;
    for (double v : y) s += (v - m < 0 ? 1.0 - tau : tau) * (m - v);
    return s;
  };
  double lo = -10, hi = 50;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    (deriv(mid) > 0 ? hi : lo) = mid;
  }
  double oracle = 0.5 * (lo + hi);

  Param<double> m("m", Tensor<double>::scalar(0.0));
  Adam<double> opt(AdamConfig{.lr = 5e-2}, {&m});
  Tensor<double> ycol({int64_t(y.size()), 1});
  ycol.data = y;
  for (int it = 0; it < 3000; ++it) {
    Graph<double> g;
    auto u = g.sub(g.constant(ycol), g.broadcast_rows(g.reshape(g.leaf(m), {1, 1}), int64_t(y.size())));
    g.backward(expectile_loss_graph(g, u, tau));
    opt.step();
  }
  CHECK(m.value.data[0] == Catch::Approx(oracle).margin(1e-3));

  // two-point sanity: the tau-expectile of {0, 1} is tau itself
  std::vector<double> two = {0.0, 1.0};
  auto deriv2 = [&](double mm) {
    double s = 0;
    for (double v : two) s += (v - mm < 0 ? 1.0 - tau : tau) * (mm - v);
    return s;
  };
  double l2 = -1, h2 = 2;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (l2 + h2);
    (deriv2(mid) > 0 ? h2 : l2) = mid;
  }
  CHECK(0.5 * (l2 + h2) == Catch::Approx(tau).margin(1e-6));
}

TEST_CASE("td targets stop bootstrapping at terminal transitions") {
  IqlAgent<double> agent(1, 1, 1, chain_cfg(), Rng(2));
  IqlBatch<double> batch = chain_batch(1);
  batch.done.data = {1, 0, 1, 0};
  Tensor<double> y = agent.td_target(batch);
  Tensor<double> vn = agent.v_plain(batch.latent_next, batch.z);
  for (int64_t i = 0; i < 4; ++i) {
    double want = double(batch.r.data[size_t(i)]);
    if (batch.done.data[size_t(i)] == 0.0) want += 0.9 * double(vn.data[size_t(i)]);
    CHECK(y.data[size_t(i)] == Catch::Approx(want).epsilon(1e-12));
  }

  batch.done.data[0] = 0.5;
  CHECK_THROWS_MATCHES(batch.validate(1, 1, 1), Error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("done")));
}

TEST_CASE("policy log-likelihood has the exact Gaussian value at a zeroed agent") {
  IqlTrainConfig cfg = chain_cfg();
  IqlAgent<double> agent(2, 1, 2, cfg, Rng(4));
  for (auto* p : agent.trained_param_ptrs())
    for (auto& v : p->value.data) v = 0;

  // mu = tanh(0) = 0, sigma = 1, and zeroed V/Q make every AWR weight exactly 1
  int64_t b = 6;
  IqlBatch<double> batch;
  batch.latent = Tensor<double>::zeros({b, 2});
  batch.z = Tensor<double>::zeros({b, 1});
  batch.a = Tensor<double>({b, 2});
  Rng rng(9);
  for (auto& v : batch.a.data) v = 2 * rng.uniform() - 1;
  batch.r = Tensor<double>::zeros({b, 1});
  batch.latent_next = Tensor<double>::zeros({b, 2});
  batch.done = Tensor<double>::zeros({b, 1});

  double want = 0;
  for (int64_t i = 0; i < b; ++i) {
    double q = 0;
    for (int64_t j = 0; j < 2; ++j) q += batch.a.at(i, j) * batch.a.at(i, j);
    want += (0.5 * q + std::log(2.0 * 3.14159265358979323846)) / double(b);
  }

  IqlStepStats st;
  agent.awr_update(batch, st);
  CHECK(st.pi_loss == Catch::Approx(want).epsilon(1e-9));
  CHECK(st.awr_weight_mean == Catch::Approx(1.0));
  CHECK(st.adv_mean == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("awr gradient matches finite differences with frozen weights") {
  IqlTrainConfig cfg = chain_cfg();
  IqlAgent<double> agent(1, 1, 1, cfg, Rng(6));
  IqlBatch<double> batch = chain_batch(2);

  // weights depend only on V/Q nets, which stay fixed while the policy moves
  Tensor<double> qmin = agent.q_min_plain(batch.latent, batch.a, batch.z, false);
  Tensor<double> vs = agent.v_plain(batch.latent, batch.z);
  int64_t b = batch.latent.rows();
  Tensor<double> w({b, 1});
  for (int64_t i = 0; i < b; ++i)
    w.data[size_t(i)] = std::min(
        std::exp((qmin.data[size_t(i)] - vs.data[size_t(i)]) / cfg.awr_temperature), cfg.awr_clip);

  std::vector<Param<double>*> params = agent.policy.param_ptrs();
  params.push_back(&agent.log_std);
  Tensor<double> pin({b, 2});
  for (int64_t i = 0; i < b; ++i) {
    pin.at(i, 0) = batch.latent.data[size_t(i)];
    pin.at(i, 1) = batch.z.data[size_t(i)];
  }
  auto build = [&](Graph<double>& g) {
    auto mu = agent.policy.forward(g, g.constant(pin));
    auto ls = g.broadcast_rows(g.leaf(agent.log_std), b);
    auto scaled = g.mul(g.sub(g.constant(batch.a), mu), g.exp_(g.neg(ls)));
    auto logp = g.sub(g.scale(g.row_sum(g.square(scaled)), -0.5), g.row_sum(ls));
    return g.neg(g.mean_all(g.mul(g.constant(w), logp)));
  };
  auto rep = fdtest::fd_check(params, build, 1e-5, 2e-4);
  INFO(rep.where);
  CHECK(rep.ok);
}

TEST_CASE("iql converges to the tabular expectile fixpoint on the chain") {
  ChainSpec spec;
  ChainOracle oracle(spec);
  // closed form: V = tau / (1 - gamma), Q(+1) = 1 + gamma V, Q(-1) = gamma V
  CHECK(oracle.V[0] == Catch::Approx(8.0).margin(1e-9));
  CHECK(oracle.Q[0][1] == Catch::Approx(8.2).margin(1e-9));
  CHECK(oracle.Q[0][0] == Catch::Approx(7.2).margin(1e-9));

  IqlAgent<double> agent(1, 1, 1, chain_cfg(), Rng(8));
  IqlBatch<double> batch = chain_batch(2);

  std::vector<double> policy_means;
  for (int it = 0; it < 4000; ++it) {
    agent.update(batch);
    if (it % 1000 == 0) {
      Tensor<double> s0 = Tensor<double>::row({-1.0});
      Tensor<double> z0 = Tensor<double>::row({0.0});
      Rng r(1);
      policy_means.push_back(agent.act(s0, z0, r, false).data[0]);
    }
  }

  Tensor<double> states({2, 1});
  states.data = {-1.0, 1.0};
  Tensor<double> z = Tensor<double>::zeros({2, 1});
  Tensor<double> v = agent.v_plain(states, z);
  for (int s = 0; s < 2; ++s) CHECK(v.data[size_t(s)] == Catch::Approx(oracle.V[s]).margin(0.2));

  for (int s = 0; s < 2; ++s)
    for (int a = 0; a < 2; ++a) {
      Tensor<double> st = Tensor<double>::row({s == 0 ? -1.0 : 1.0});
      Tensor<double> at = Tensor<double>::row({a == 0 ? -1.0 : 1.0});
      Tensor<double> zt = Tensor<double>::row({0.0});
      Tensor<double> q = agent.q_min_plain(st, at, zt, false);
      CHECK(q.data[0] == Catch::Approx(oracle.Q[s][a]).margin(0.25));
    }

  // the high-advantage action carries the larger AWR weight, and the policy
  // mean walks monotonically toward it
  Tensor<double> s0 = Tensor<double>::row({-1.0});
  Tensor<double> z0 = Tensor<double>::row({0.0});
  Tensor<double> a_good = Tensor<double>::row({1.0});
  Tensor<double> a_bad = Tensor<double>::row({-1.0});
  double q_good = agent.q_min_plain(s0, a_good, z0, false).data[0];
  double q_bad = agent.q_min_plain(s0, a_bad, z0, false).data[0];
  double v0 = agent.v_plain(s0, z0).data[0];
  CHECK(std::exp((q_good - v0) / 0.25) > std::exp((q_bad - v0) / 0.25));

  CHECK(policy_means.front() < policy_means.back());
  for (size_t i = 1; i < policy_means.size(); ++i) CHECK(policy_means[i] >= policy_means[i - 1] - 0.02);
  Rng r(1);
  CHECK(agent.act(s0, z0, r, false).data[0] > 0.8);
}

TEST_CASE("q regression honours terminal transitions end to end") {
  IqlTrainConfig cfg = chain_cfg();
  IqlAgent<double> agent(1, 1, 1, cfg, Rng(12));
  IqlBatch<double> batch = chain_batch(2);
  for (auto& v : batch.done.data) v = 1.0;  // every transition terminal: Q -> r exactly

  IqlStepStats st;
  for (int it = 0; it < 1500; ++it) agent.q_update(batch, st);
  for (int64_t i = 0; i < 4; ++i) {
    Tensor<double> s = Tensor<double>::row({batch.latent.data[size_t(i)]});
    Tensor<double> a = Tensor<double>::row({batch.a.data[size_t(i)]});
    Tensor<double> z = Tensor<double>::row({0.0});
    CHECK(agent.q_min_plain(s, a, z, false).data[0] ==
          Catch::Approx(batch.r.data[size_t(i)]).margin(0.05));
  }
}

TEST_CASE("action sampling is deterministic, bounded and reproducible") {
  IqlAgent<double> agent(2, 1, 2, chain_cfg(), Rng(3));
  Tensor<double> latent = Tensor<double>::row({0.3, -0.4});
  Tensor<double> z = Tensor<double>::row({0.1});

  Rng r1(5), r2(5), r3(6);
  Tensor<double> det1 = agent.act(latent, z, r1, false);
  Tensor<double> det2 = agent.act(latent, z, r2, false);
  CHECK(det1.data == det2.data);
  for (double v : det1.data) CHECK(std::fabs(v) < 1.0);  // tanh mean

  agent.log_std.value.data = {2.0, 2.0};  // wide noise exercises the clamp
  Rng s1(5), s2(5);
  Tensor<double> sto1 = agent.act(latent, z, s1, true);
  Tensor<double> sto2 = agent.act(latent, z, s2, true);
  CHECK(sto1.data == sto2.data);
  Tensor<double> sto3 = agent.act(latent, z, r3, true);
  CHECK(sto1.data != sto3.data);
  bool clipped_band = true;
  for (int rep = 0; rep < 50; ++rep) {
    Tensor<double> s = agent.act(latent, z, r3, true);
    for (double v : s.data) clipped_band = clipped_band && v >= -1.0 && v <= 1.0;
  }
  CHECK(clipped_band);

  // near-zero noise collapses sampling onto the mean
  agent.log_std.value.data = {-5.0, -5.0};
  Rng s4(9);
  Tensor<double> tight = agent.act(latent, z, s4, true);
  for (int64_t j = 0; j < 2; ++j)
    CHECK(tight.data[size_t(j)] == Catch::Approx(det1.data[size_t(j)]).margin(0.05));
}

TEST_CASE("log-std is projected back into its box after each policy step") {
  IqlAgent<double> agent(1, 1, 1, chain_cfg(), Rng(3));
  agent.log_std.value.data = {7.0};  // start far outside
  IqlStepStats st;
  agent.awr_update(chain_batch(1), st);
  CHECK(agent.log_std.value.data[0] <= 2.0);
  CHECK(agent.log_std.value.data[0] >= -5.0);
}

TEST_CASE("unknown policy optimizers are rejected at startup") {
  IqlTrainConfig cfg = chain_cfg();
  cfg.policy_optimizer = "sac";
  CHECK_THROWS_MATCHES(IqlAgent<double>(1, 1, 1, cfg, Rng(1)), Error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("available: iql")));
}

TEST_CASE("iql batch validation catches shape and flag errors") {
  IqlBatch<double> batch = chain_batch(1);
  batch.validate(1, 1, 1);
  CHECK_THROWS_AS(batch.validate(2, 1, 1), Error);
  batch.z = Tensor<double>::zeros({4, 2});
  CHECK_THROWS_AS(batch.validate(1, 1, 1), Error);
  IqlBatch<double> empty;
  empty.latent = Tensor<double>({0, 1});
  CHECK_THROWS_AS(empty.validate(1, 1, 1), Error);
}
