#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ctxwm/context.hpp"
#include "ctxwm/optim.hpp"
#include "fd_util.hpp"

using namespace ctxwm;

namespace {

// brute-force InfoNCE in plain doubles, independent of the graph
double oracle_infonce(const std::vector<std::vector<double>>& zs,
                      const std::vector<std::vector<double>>& bank, double alpha) {
  auto d2 = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  };
  double loss = 0;
  for (size_t i = 0; i < zs.size(); ++i) {
    double denom = 0;
    for (size_t j = 0; j < bank.size(); ++j) denom += std::exp(-d2(zs[i], bank[j]) / alpha);
    loss += -std::log(std::exp(-d2(zs[i], bank[i]) / alpha) / denom);
  }
  return loss;
}

double oracle_focal(const std::vector<std::vector<double>>& zs,
                    const std::vector<std::vector<double>>& bank, double w, double eps) {
  auto d2 = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  };
  double loss = 0;
  size_t n = zs.size();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j)
      loss += (i == j) ? d2(zs[i], bank[j]) : w / (d2(zs[i], bank[j]) + eps);
  return loss / double(n * n);
}

}  // namespace

TEST_CASE("context encoding is the mean of per-transition embeddings") {
  ContextConfig cc;
  cc.z_dim = 4;
  cc.hidden = {16};
  ContextEncoder<double> enc(3, 2, cc, Rng(99));

  int64_t in_dim = context_input_dim(3, 2);
  REQUIRE(in_dim == 9);
  ContextBatch<double> batch({6, in_dim});
  Rng rng(7);
  for (auto& v : batch.data) v = rng.normal();

  Tensor<double> z = enc.encode_plain(batch);
  REQUIRE(z.shape == std::vector<int64_t>{1, 4});
  for (double v : z.data) CHECK(std::fabs(v) <= 1.0);  // tanh keeps every embedding in bounds

  // oracle: embed each transition on its own, then average
  std::vector<double> mean(4, 0.0);
  for (int64_t i = 0; i < 6; ++i) {
    Tensor<double> one({1, in_dim});
    for (int64_t c = 0; c < in_dim; ++c) one.data[size_t(c)] = batch.at(i, c);
    Tensor<double> e = enc.net.forward_plain(one);
    for (int64_t j = 0; j < 4; ++j) mean[size_t(j)] += e.data[size_t(j)] / 6.0;
  }
  for (int64_t j = 0; j < 4; ++j) CHECK(z.data[size_t(j)] == Catch::Approx(mean[size_t(j)]).margin(1e-12));

  // in-graph path computes the same value
  Graph<double> g;
  auto zg = g.value(enc.encode_graph(g, batch));
  for (int64_t j = 0; j < 4; ++j) CHECK(zg.data[size_t(j)] == Catch::Approx(z.data[size_t(j)]).margin(1e-12));

  // the empty context is the uninformative one: exactly zero
  Tensor<double> z0 = enc.encode_plain(ContextBatch<double>({0, in_dim}));
  for (double v : z0.data) CHECK(v == 0.0);

  Graph<double> g2;
  CHECK_THROWS_AS(enc.encode_graph(g2, ContextBatch<double>({0, in_dim})), Error);
  CHECK_THROWS_AS(enc.encode_plain(ContextBatch<double>({2, in_dim + 1})), Error);
}

TEST_CASE("pack_transition_row lays out s ++ a ++ r ++ s'") {
  Tensor<double> batch({2, 7});
  pack_transition_row<double>(batch, 0, {1, 2}, {3, 4}, 5, {6, 7});
  pack_transition_row<double>(batch, 1, {-1, -2}, {-3, -4}, -5, {-6, -7});
  CHECK(batch.data == std::vector<double>{1, 2, 3, 4, 5, 6, 7, -1, -2, -3, -4, -5, -6, -7});
  CHECK_THROWS_AS(pack_transition_row<double>(batch, 0, {1}, {2}, 3, {4}), Error);
}

TEST_CASE("similarity kernel") {
  Tensor<double> a = Tensor<double>::row({1.0, 2.0});
  Tensor<double> b = Tensor<double>::row({2.0, 0.0});
  CHECK(similarity(a, a, 0.5) == Catch::Approx(1.0));
  CHECK(similarity(a, b, 2.0) == Catch::Approx(std::exp(-5.0 / 2.0)));
  CHECK(similarity(a, b, 2.0) == Catch::Approx(similarity(b, a, 2.0)));
  CHECK_THROWS_MATCHES(similarity(a, b, 0.0), Error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("alpha")));
  CHECK_THROWS_AS(similarity(a, Tensor<double>::row({1.0}), 1.0), Error);
}

TEST_CASE("infonce matches a brute-force oracle") {
  Rng rng(21);
  double alpha = 0.7;
  size_t n = 5, zd = 3;
  std::vector<std::vector<double>> zsv(n, std::vector<double>(zd)), bankv = zsv;
  for (auto& v : zsv)
    for (auto& x : v) x = rng.normal();
  for (auto& v : bankv)
    for (auto& x : v) x = rng.normal();

  Graph<double> g;
  std::vector<Graph<double>::Id> zs;
  std::vector<Tensor<double>> bank;
  for (size_t i = 0; i < n; ++i) {
    zs.push_back(g.constant(Tensor<double>::row(zsv[i])));
    bank.push_back(Tensor<double>::row(bankv[i]));
  }
  auto res = infonce_graph(g, zs, bank, alpha);
  CHECK(!res.degenerate);
  CHECK(g.value(res.loss).data[0] == Catch::Approx(oracle_infonce(zsv, bankv, alpha)).epsilon(1e-12));
}

TEST_CASE("infonce over indistinguishable tasks costs N log N") {
  // all embeddings and all bank entries coincide: the softmax is uniform
  for (size_t n : {2, 4, 8}) {
    Graph<double> g;
    std::vector<Graph<double>::Id> zs;
    std::vector<Tensor<double>> bank;
    for (size_t i = 0; i < n; ++i) {
      zs.push_back(g.constant(Tensor<double>::row({0.3, -0.2})));
      bank.push_back(Tensor<double>::row({0.3, -0.2}));
    }
    auto res = infonce_graph(g, zs, bank, 1.0);
    CHECK(g.value(res.loss).data[0] == Catch::Approx(double(n) * std::log(double(n))).epsilon(1e-12));
  }
}

TEST_CASE("infonce on a single task is pinned to zero and flagged") {
  Graph<double> g;
  std::vector<Graph<double>::Id> zs = {g.constant(Tensor<double>::row({1.0, 2.0}))};
  std::vector<Tensor<double>> bank = {Tensor<double>::row({0.0, 0.0})};
  auto res = infonce_graph(g, zs, bank, 1.0);
  CHECK(res.degenerate);
  CHECK(g.value(res.loss).data[0] == 0.0);

  CHECK_THROWS_AS(infonce_graph(g, {}, {}, 1.0), Error);
  CHECK_THROWS_AS(infonce_graph(g, zs, bank, -1.0), Error);
  std::vector<Tensor<double>> two_banks = {bank[0], bank[0]};
  CHECK_THROWS_AS(infonce_graph(g, zs, two_banks, 1.0), Error);
}

TEST_CASE("infonce gradient agrees with finite differences through the encoder") {
  ContextConfig cc;
  cc.z_dim = 3;
  cc.hidden = {8};
  ContextEncoder<double> enc(2, 1, cc, Rng(5));

  std::vector<ContextBatch<double>> batches;
  Rng rng(31);
  for (int t = 0; t < 3; ++t) {
    ContextBatch<double> b({4, context_input_dim(2, 1)});
    for (auto& v : b.data) v = rng.normal();
    batches.push_back(b);
  }
  std::vector<Tensor<double>> bank;
  for (int t = 0; t < 3; ++t) {
    Tensor<double> e({1, 3});
    for (auto& v : e.data) v = 0.3 * rng.normal();
    bank.push_back(e);
  }

  auto build = [&](Graph<double>& g) {
    std::vector<Graph<double>::Id> zs;
    for (auto& b : batches) zs.push_back(enc.encode_graph(g, b));
    return infonce_graph(g, zs, bank, 0.9).loss;
  };
  auto rep = fdtest::fd_check(enc.net.param_ptrs(), build, 1e-5, 2e-4);
  INFO(rep.where);
  CHECK(rep.ok);
}

TEST_CASE("focal loss matches a brute-force oracle and its finite differences") {
  Rng rng(77);
  size_t n = 4, zd = 2;
  std::vector<std::vector<double>> zsv(n, std::vector<double>(zd)), bankv = zsv;
  for (auto& v : zsv)
    for (auto& x : v) x = rng.normal();
  for (auto& v : bankv)
    for (auto& x : v) x = rng.normal();

  Graph<double> g;
  std::vector<Graph<double>::Id> zs;
  std::vector<Tensor<double>> bank;
  for (size_t i = 0; i < n; ++i) {
    zs.push_back(g.constant(Tensor<double>::row(zsv[i])));
    bank.push_back(Tensor<double>::row(bankv[i]));
  }
  auto res = focal_graph(g, zs, bank, 0.5, 1e-2);
  CHECK(g.value(res.loss).data[0] ==
        Catch::Approx(oracle_focal(zsv, bankv, 0.5, 1e-2)).epsilon(1e-12));

  // gradient through leaf embeddings
  Param<double> p0("z0", Tensor<double>::row({0.4, -0.1}));
  Param<double> p1("z1", Tensor<double>::row({-0.6, 0.8}));
  std::vector<Tensor<double>> bank2 = {Tensor<double>::row({0.1, 0.0}),
                                       Tensor<double>::row({-0.2, 0.5})};
  auto build = [&](Graph<double>& g2) {
    std::vector<Graph<double>::Id> zz = {g2.leaf(p0), g2.leaf(p1)};
    return focal_graph(g2, zz, bank2, 0.5, 1e-2).loss;
  };
  auto rep = fdtest::fd_check({&p0, &p1}, build, 1e-5, 2e-4);
  INFO(rep.where);
  CHECK(rep.ok);

  CHECK_THROWS_AS(focal_graph(g, zs, bank, 0.5, 0.0), Error);
}

TEST_CASE("positive bank keeps a momentum average per task") {
  PositiveBank<double> bank({3, 7}, 2);
  CHECK(bank.entry(3).data == std::vector<double>{0.0, 0.0});

  Tensor<double> z = Tensor<double>::row({1.0, -2.0});
  bank.update(3, z, 0.1);
  CHECK(bank.entry(3).data[0] == Catch::Approx(0.1));
  CHECK(bank.entry(3).data[1] == Catch::Approx(-0.2));
  bank.update(3, z, 0.1);  // 0.1*1 + 0.9*0.1
  CHECK(bank.entry(3).data[0] == Catch::Approx(0.19));
  CHECK(bank.entry(7).data[0] == 0.0);  // untouched ids stay put

  CHECK_THROWS_MATCHES(bank.update(4, z, 0.1), Error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("not in the positive bank")));
  CHECK_THROWS_AS(bank.entry(4), Error);
  CHECK_THROWS_AS(bank.update(3, z, 1.5), Error);
  CHECK_THROWS_AS(bank.update(3, Tensor<double>::row({1.0}), 0.1), Error);
}

TEST_CASE("optimizing infonce separates two distinct tasks") {
  ContextConfig cc;
  cc.z_dim = 2;
  cc.hidden = {16};
  ContextEncoder<double> enc(1, 1, cc, Rng(11));

  // two tasks whose transitions differ only in the reward channel
  auto make_batch = [&](double r) {
    ContextBatch<double> b({8, context_input_dim(1, 1)});
    Rng rng(int(r * 100) + 5);
    for (int64_t i = 0; i < 8; ++i)
      pack_transition_row<double>(b, i, {rng.uniform()}, {rng.uniform()}, r, {rng.uniform()});
    return b;
  };
  ContextBatch<double> b0 = make_batch(1.0), b1 = make_batch(-1.0);

  PositiveBank<double> bank({0, 1}, 2);
  Adam<double> opt(AdamConfig{.lr = 3e-3}, enc.net.param_ptrs());

  auto dist = [&]() {
    Tensor<double> z0 = enc.encode_plain(b0), z1 = enc.encode_plain(b1);
    double d = 0;
    for (int64_t i = 0; i < 2; ++i)
      d += (z0.data[size_t(i)] - z1.data[size_t(i)]) * (z0.data[size_t(i)] - z1.data[size_t(i)]);
    return std::sqrt(d);
  };

  double before = dist();
  double first_loss = 0, last_loss = 0;
  for (int step = 0; step < 200; ++step) {
    bank.update(0, enc.encode_plain(b0), 0.1);
    bank.update(1, enc.encode_plain(b1), 0.1);
    Graph<double> g;
    std::vector<Graph<double>::Id> zs = {enc.encode_graph(g, b0), enc.encode_graph(g, b1)};
    auto res = infonce_graph(g, zs, {bank.entry(0), bank.entry(1)}, 1.0);
    double loss = g.value(res.loss).data[0];
    if (step == 0) first_loss = loss;
    last_loss = loss;
    g.backward(res.loss);
    opt.step();
  }
  CHECK(last_loss < first_loss);
  CHECK(dist() > before);
  CHECK(dist() > 0.5);  // embeddings end up genuinely apart, not just nudged
}
