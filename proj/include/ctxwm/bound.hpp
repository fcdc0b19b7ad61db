#pragma once

// Tabular verifier for the latent-MDP value-error bounds: pushforward and
// latent-Markov kernels over an abstraction map, exact epsilon sups, exact
// policy evaluation by linear solve, and numerical certification that every
// measured value gap stays below its certified bound.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ctxwm/common.hpp"
#include "ctxwm/csv.hpp"

namespace ctxwm {

struct TabularMDP {
  int64_t n_states = 0, n_actions = 0;
  std::vector<double> p;  // [s][a][s'], row-stochastic in s'
  std::vector<double> r;  // [s][a]
  double gamma = 0.9;
  double r_max = 1.0;

  double pr(int64_t s, int64_t a, int64_t sp) const {
    return p[size_t((s * n_actions + a) * n_states + sp)];
  }
  double& pr(int64_t s, int64_t a, int64_t sp) {
    return p[size_t((s * n_actions + a) * n_states + sp)];
  }
  double rew(int64_t s, int64_t a) const { return r[size_t(s * n_actions + a)]; }
  double& rew(int64_t s, int64_t a) { return r[size_t(s * n_actions + a)]; }

  void validate() const {
    if (n_states < 1 || n_actions < 1) fail(Errc::dimension, "mdp: empty state or action space");
    if (p.size() != size_t(n_states * n_actions * n_states) ||
        r.size() != size_t(n_states * n_actions))
      fail(Errc::dimension, "mdp: tensor sizes disagree with declared dimensions");
    if (!(gamma > 0 && gamma < 1)) fail(Errc::config, "mdp: discount must lie in (0, 1)");
    if (!(r_max > 0)) fail(Errc::config, "mdp: r_max must be positive");
    for (int64_t s = 0; s < n_states; ++s)
      for (int64_t a = 0; a < n_actions; ++a) {
        double sum = 0;
        for (int64_t sp = 0; sp < n_states; ++sp) {
          double v = pr(s, a, sp);
          if (!(v >= 0)) fail(Errc::contract, "mdp: negative transition probability");
          sum += v;
        }
        if (std::fabs(sum - 1.0) > 1e-12)
          fail(Errc::contract, "mdp: transition row does not sum to 1");
        if (std::fabs(rew(s, a)) > r_max + 1e-12)
          fail(Errc::contract, "mdp: reward exceeds declared r_max");
      }
  }
};

struct AbstractionMap {
  std::vector<int64_t> phi;  // state -> dense code index
  int64_t n_codes = 0;

  // arbitrary labels collapse to 0..k-1 in order of first appearance
  static AbstractionMap from_labels(const std::vector<int64_t>& labels) {
    if (labels.empty()) fail(Errc::dimension, "abstraction: no states");
    AbstractionMap m;
    std::vector<int64_t> seen;
    for (int64_t lab : labels) {
      auto it = std::find(seen.begin(), seen.end(), lab);
      if (it == seen.end()) {
        seen.push_back(lab);
        m.phi.push_back(int64_t(seen.size()) - 1);
      } else {
        m.phi.push_back(it - seen.begin());
      }
    }
    m.n_codes = int64_t(seen.size());
    return m;
  }

  std::vector<std::vector<int64_t>> preimages() const {
    std::vector<std::vector<int64_t>> pre;
    pre.resize(size_t(n_codes));
    for (size_t s = 0; s < phi.size(); ++s) pre[size_t(phi[s])].push_back(int64_t(s));
    return pre;
  }
};

// P^phi(c'|s,a): next-state mass aggregated by the code of s'
struct CodeKernel {
  int64_t n_states = 0, n_actions = 0, n_codes = 0;
  std::vector<double> p;
  double at(int64_t s, int64_t a, int64_t c) const {
    return p[size_t((s * n_actions + a) * n_codes + c)];
  }
};

inline CodeKernel pushforward(const TabularMDP& mdp, const AbstractionMap& phi) {
  mdp.validate();
  if (int64_t(phi.phi.size()) != mdp.n_states)
    fail(Errc::dimension, "pushforward: abstraction map covers a different state count");
  CodeKernel k;
  k.n_states = mdp.n_states;
  k.n_actions = mdp.n_actions;
  k.n_codes = phi.n_codes;
  k.p.assign(size_t(k.n_states * k.n_actions * k.n_codes), 0.0);
  for (int64_t s = 0; s < mdp.n_states; ++s)
    for (int64_t a = 0; a < mdp.n_actions; ++a)
      for (int64_t sp = 0; sp < mdp.n_states; ++sp)
        k.p[size_t((s * k.n_actions + a) * k.n_codes + phi.phi[size_t(sp)])] +=
            mdp.pr(s, a, sp);
  return k;
}

namespace detail {

// normalized weights over one preimage; uniform when none are supplied
inline std::vector<double> preimage_weights(const std::vector<int64_t>& pre,
                                            const std::vector<double>* state_weights) {
  std::vector<double> w(pre.size(), 1.0);
  if (state_weights) {
    for (size_t i = 0; i < pre.size(); ++i) {
      double v = (*state_weights)[size_t(pre[i])];
      if (!(v >= 0)) fail(Errc::domain, "latent_markov: negative state weight");
      w[i] = v;
    }
  }
  double total = 0;
  for (double v : w) total += v;
  if (!(total > 0)) fail(Errc::domain, "latent_markov: a preimage has zero total weight");
  for (double& v : w) v /= total;
  return w;
}

}  // namespace detail

// Markov approximation on codes: preimage-weighted average of the pushforward
// rows and rewards. Uniform weighting by default.
inline TabularMDP latent_markov(const TabularMDP& mdp, const AbstractionMap& phi,
                                const std::vector<double>* state_weights = nullptr) {
  CodeKernel push = pushforward(mdp, phi);
  if (state_weights && state_weights->size() != size_t(mdp.n_states))
    fail(Errc::dimension, "latent_markov: weight vector length mismatch");
  TabularMDP lat;
  lat.n_states = phi.n_codes;
  lat.n_actions = mdp.n_actions;
  lat.gamma = mdp.gamma;
  lat.r_max = mdp.r_max;
  lat.p.assign(size_t(lat.n_states * lat.n_actions * lat.n_states), 0.0);
  lat.r.assign(size_t(lat.n_states * lat.n_actions), 0.0);
  auto pre = phi.preimages();
  for (int64_t c = 0; c < phi.n_codes; ++c) {
    std::vector<double> w = detail::preimage_weights(pre[size_t(c)], state_weights);
    for (size_t i = 0; i < pre[size_t(c)].size(); ++i) {
      int64_t s = pre[size_t(c)][i];
      for (int64_t a = 0; a < mdp.n_actions; ++a) {
        lat.rew(c, a) += w[i] * mdp.rew(s, a);
        for (int64_t cp = 0; cp < phi.n_codes; ++cp)
          lat.pr(c, a, cp) += w[i] * push.at(s, a, cp);
      }
    }
  }
  lat.validate();
  return lat;
}

inline void check_policy(const std::vector<double>& pol, int64_t n_states, int64_t n_actions) {
  if (pol.size() != size_t(n_states * n_actions))
    fail(Errc::dimension, "policy: size disagrees with state/action counts");
  for (int64_t x = 0; x < n_states; ++x) {
    double sum = 0;
    for (int64_t a = 0; a < n_actions; ++a) {
      double v = pol[size_t(x * n_actions + a)];
      if (!(v >= 0)) fail(Errc::domain, "policy: negative action probability");
      sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-9) fail(Errc::domain, "policy: action row does not sum to 1");
  }
}

// Exact discounted evaluation: solve (I - gamma P_pi) V = r_pi.
inline Eigen::VectorXd policy_value(const TabularMDP& mdp, const std::vector<double>& pol) {
  mdp.validate();
  check_policy(pol, mdp.n_states, mdp.n_actions);
  const int64_t n = mdp.n_states;
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  for (int64_t x = 0; x < n; ++x)
    for (int64_t act = 0; act < mdp.n_actions; ++act) {
      double pa = pol[size_t(x * mdp.n_actions + act)];
      if (pa == 0) continue;
      b[x] += pa * mdp.rew(x, act);
      for (int64_t xp = 0; xp < n; ++xp) a(x, xp) -= mdp.gamma * pa * mdp.pr(x, act, xp);
    }
  Eigen::VectorXd v = a.partialPivLu().solve(b);
  if ((a * v - b).cwiseAbs().maxCoeff() > 1e-10)
    fail(Errc::numeric, "policy_value: linear solve residual too large");
  return v;
}

struct EpsilonReport {
  double abs_p = 0, abs_r = 0;      // latent process deviates from Markov on codes
  double model_p = 0, model_r = 0;  // learned kernel vs latent Markov kernel, true task id
  double task_p = 0, task_r = 0;    // z-conditioned kernel vs id-conditioned kernel

  double bound(double gamma, double r_max) const {
    return (abs_r + model_r + task_r) / (1 - gamma) +
           gamma * r_max * (abs_p + model_p + task_p) / ((1 - gamma) * (1 - gamma));
  }
};

namespace detail {

inline void check_latent_pair(const TabularMDP& mdp, const AbstractionMap& phi,
                              const TabularMDP& m) {
  if (m.n_states != phi.n_codes || m.n_actions != mdp.n_actions)
    fail(Errc::dimension, "latent model: code/action dimensions disagree");
  if (m.gamma != mdp.gamma) fail(Errc::contract, "latent model: discount mismatch");
  m.validate();
  for (int64_t c = 0; c < m.n_states; ++c)
    for (int64_t a = 0; a < m.n_actions; ++a)
      if (std::fabs(m.rew(c, a)) > mdp.r_max + 1e-12)
        fail(Errc::contract, "latent model: reward exceeds the certified r_max");
}

inline double l1_rows(const TabularMDP& a, const TabularMDP& b, int64_t x, int64_t act) {
  double d = 0;
  for (int64_t xp = 0; xp < a.n_states; ++xp)
    d += std::fabs(a.pr(x, act, xp) - b.pr(x, act, xp));
  return d;
}

}  // namespace detail

// Exact sups over the finite grids for the three epsilon pairs.
inline EpsilonReport epsilons(const TabularMDP& mdp, const AbstractionMap& phi,
                              const TabularMDP& model_id, const TabularMDP& model_z,
                              const std::vector<double>* state_weights = nullptr) {
  detail::check_latent_pair(mdp, phi, model_id);
  detail::check_latent_pair(mdp, phi, model_z);
  TabularMDP lat = latent_markov(mdp, phi, state_weights);
  CodeKernel push = pushforward(mdp, phi);

  EpsilonReport eps;
  for (int64_t s = 0; s < mdp.n_states; ++s) {
    int64_t c = phi.phi[size_t(s)];
    for (int64_t a = 0; a < mdp.n_actions; ++a) {
      double dp = 0;
      for (int64_t cp = 0; cp < phi.n_codes; ++cp)
        dp += std::fabs(push.at(s, a, cp) - lat.pr(c, a, cp));
      eps.abs_p = std::max(eps.abs_p, dp);
      eps.abs_r = std::max(eps.abs_r, std::fabs(mdp.rew(s, a) - lat.rew(c, a)));
    }
  }
  for (int64_t c = 0; c < phi.n_codes; ++c)
    for (int64_t a = 0; a < mdp.n_actions; ++a) {
      eps.model_p = std::max(eps.model_p, detail::l1_rows(model_id, lat, c, a));
      eps.model_r = std::max(eps.model_r, std::fabs(model_id.rew(c, a) - lat.rew(c, a)));
      eps.task_p = std::max(eps.task_p, detail::l1_rows(model_z, model_id, c, a));
      eps.task_r = std::max(eps.task_r, std::fabs(model_z.rew(c, a) - model_id.rew(c, a)));
    }
  return eps;
}

struct BoundCheck {
  double lhs = 0, rhs = 0;
  bool pass = false;
};

struct Certificate {
  EpsilonReport eps;
  BoundCheck sim;             // same-space pair: latent Markov vs learned id model
  BoundCheck abstraction;     // original states vs latent Markov codes
  BoundCheck task_inference;  // z-conditioned vs id-conditioned learned model
  BoundCheck combined;        // original states vs z-conditioned model, all six eps
};

namespace detail {

inline BoundCheck make_check(double lhs, double eps_r, double eps_p, double gamma,
                             double r_max) {
  BoundCheck c;
  c.lhs = lhs;
  c.rhs = eps_r / (1 - gamma) + gamma * r_max * eps_p / ((1 - gamma) * (1 - gamma));
  c.pass = c.lhs <= c.rhs + 1e-9;
  return c;
}

}  // namespace detail

// Evaluate the latent policy everywhere it is claimed to act and compare every
// measured value gap against its certified bound.
inline Certificate certify_bound(const TabularMDP& mdp, const AbstractionMap& phi,
                                 const TabularMDP& model_id, const TabularMDP& model_z,
                                 const std::vector<double>& latent_policy,
                                 const std::vector<double>* state_weights = nullptr) {
  Certificate cert;
  cert.eps = epsilons(mdp, phi, model_id, model_z, state_weights);
  TabularMDP lat = latent_markov(mdp, phi, state_weights);
  check_policy(latent_policy, phi.n_codes, mdp.n_actions);

  std::vector<double> lifted(size_t(mdp.n_states * mdp.n_actions), 0.0);
  for (int64_t s = 0; s < mdp.n_states; ++s)
    for (int64_t a = 0; a < mdp.n_actions; ++a)
      lifted[size_t(s * mdp.n_actions + a)] =
          latent_policy[size_t(phi.phi[size_t(s)] * mdp.n_actions + a)];

  Eigen::VectorXd v_orig = policy_value(mdp, lifted);
  Eigen::VectorXd v_lat = policy_value(lat, latent_policy);
  Eigen::VectorXd v_id = policy_value(model_id, latent_policy);
  Eigen::VectorXd v_z = policy_value(model_z, latent_policy);

  double gap_sim = 0, gap_task = 0;
  for (int64_t c = 0; c < phi.n_codes; ++c) {
    gap_sim = std::max(gap_sim, std::fabs(v_lat[c] - v_id[c]));
    gap_task = std::max(gap_task, std::fabs(v_z[c] - v_id[c]));
  }
  double gap_abs = 0, gap_comb = 0;
  for (int64_t s = 0; s < mdp.n_states; ++s) {
    int64_t c = phi.phi[size_t(s)];
    gap_abs = std::max(gap_abs, std::fabs(v_orig[s] - v_lat[c]));
    gap_comb = std::max(gap_comb, std::fabs(v_orig[s] - v_z[c]));
  }

  double g = mdp.gamma, rm = mdp.r_max;
  cert.sim = detail::make_check(gap_sim, cert.eps.model_r, cert.eps.model_p, g, rm);
  cert.abstraction = detail::make_check(gap_abs, cert.eps.abs_r, cert.eps.abs_p, g, rm);
  cert.task_inference = detail::make_check(gap_task, cert.eps.task_r, cert.eps.task_p, g, rm);
  BoundCheck comb;
  comb.lhs = gap_comb;
  comb.rhs = cert.eps.bound(g, rm);
  comb.pass = comb.lhs <= comb.rhs + 1e-9;
  cert.combined = comb;
  return cert;
}

struct FuzzConfig {
  int64_t instances = 1000;
  int64_t max_states = 8;
  int64_t max_actions = 3;
  int64_t max_codes = 5;
  double gamma_lo = 0.5, gamma_hi = 0.95;
  std::string weighting = "uniform";  // uniform | random (bounds must hold for both)
};

namespace detail {

inline std::vector<double> random_stochastic_row(Rng& rng, int64_t n) {
  std::vector<double> row(size_t(n), 0.0);
  double sum = 0;
  for (double& v : row) sum += (v = rng.uniform() + 1e-3);
  for (double& v : row) v /= sum;
  return row;
}

// blend rows toward fresh random distributions and jitter clamped rewards
inline TabularMDP perturb_model(const TabularMDP& base, Rng& rng, double p_mix, double dr) {
  TabularMDP m = base;
  for (int64_t c = 0; c < m.n_states; ++c)
    for (int64_t a = 0; a < m.n_actions; ++a) {
      double mix = p_mix * rng.uniform();
      std::vector<double> q = random_stochastic_row(rng, m.n_states);
      for (int64_t cp = 0; cp < m.n_states; ++cp)
        m.pr(c, a, cp) = (1 - mix) * m.pr(c, a, cp) + mix * q[size_t(cp)];
      double jitter = dr * (2 * rng.uniform() - 1);
      m.rew(c, a) = std::clamp(m.rew(c, a) + jitter, -m.r_max, m.r_max);
    }
  return m;
}

}  // namespace detail

// Random instances: MDP, abstraction, perturbed learned models, random policy.
// Deterministic per (seed, instance) regardless of thread count.
inline std::vector<Certificate> fuzz_certificates(const FuzzConfig& cfg, uint64_t seed) {
  if (cfg.instances < 1) fail(Errc::config, "fuzz: need at least one instance");
  if (cfg.max_states < 2 || cfg.max_actions < 1 || cfg.max_codes < 1)
    fail(Errc::config, "fuzz: degenerate space limits");
  if (cfg.weighting != "uniform" && cfg.weighting != "random")
    fail(Errc::config, "fuzz: unknown weighting '" + cfg.weighting + "'");

  std::vector<Certificate> certs(size_t(cfg.instances));
  parallel_for(cfg.instances, [&](int64_t i) {
    Rng rng(mix_seed(seed, uint64_t(i)));
    TabularMDP mdp;
    mdp.n_states = 2 + int64_t(rng.uniform_int(uint64_t(cfg.max_states - 1)));
    mdp.n_actions = 1 + int64_t(rng.uniform_int(uint64_t(cfg.max_actions)));
    mdp.gamma = cfg.gamma_lo + (cfg.gamma_hi - cfg.gamma_lo) * rng.uniform();
    mdp.r_max = 1.0;
    for (int64_t s = 0; s < mdp.n_states; ++s)
      for (int64_t a = 0; a < mdp.n_actions; ++a) {
        auto row = detail::random_stochastic_row(rng, mdp.n_states);
        mdp.p.insert(mdp.p.end(), row.begin(), row.end());
        mdp.r.push_back(2 * rng.uniform() - 1);
      }

    int64_t want_codes =
        1 + int64_t(rng.uniform_int(uint64_t(std::min(mdp.n_states, cfg.max_codes))));
    std::vector<int64_t> labels;
    for (int64_t s = 0; s < mdp.n_states; ++s)
      labels.push_back(int64_t(rng.uniform_int(uint64_t(want_codes))));
    AbstractionMap phi = AbstractionMap::from_labels(labels);

    std::vector<double> weights;
    const std::vector<double>* wptr = nullptr;
    if (cfg.weighting == "random") {
      for (int64_t s = 0; s < mdp.n_states; ++s) weights.push_back(rng.uniform() + 0.1);
      wptr = &weights;
    }

    TabularMDP lat = latent_markov(mdp, phi, wptr);
    TabularMDP model_id = detail::perturb_model(lat, rng, 0.3, 0.2);
    TabularMDP model_z = detail::perturb_model(model_id, rng, 0.2, 0.1);

    std::vector<double> pol;
    for (int64_t c = 0; c < phi.n_codes; ++c) {
      auto row = detail::random_stochastic_row(rng, mdp.n_actions);
      pol.insert(pol.end(), row.begin(), row.end());
    }
    certs[size_t(i)] = certify_bound(mdp, phi, model_id, model_z, pol, wptr);
  });
  return certs;
}

inline void write_certificates(const std::string& path, const std::vector<Certificate>& certs) {
  CsvWriter out(path, "certificates",
                {"instance", "eps_abs_p", "eps_abs_r", "eps_model_p", "eps_model_r",
                 "eps_task_p", "eps_task_r", "lhs_sim", "rhs_sim", "pass_sim",
                 "lhs_abstraction", "rhs_abstraction", "pass_abstraction", "lhs_task",
                 "rhs_task", "pass_task", "lhs_combined", "rhs_combined", "pass_combined"});
  auto flag = [](bool b) { return std::string(b ? "1" : "0"); };
  for (size_t i = 0; i < certs.size(); ++i) {
    const Certificate& c = certs[i];
    out.row({std::to_string(i), fmt_g(c.eps.abs_p), fmt_g(c.eps.abs_r), fmt_g(c.eps.model_p),
             fmt_g(c.eps.model_r), fmt_g(c.eps.task_p), fmt_g(c.eps.task_r), fmt_g(c.sim.lhs),
             fmt_g(c.sim.rhs), flag(c.sim.pass), fmt_g(c.abstraction.lhs),
             fmt_g(c.abstraction.rhs), flag(c.abstraction.pass), fmt_g(c.task_inference.lhs),
             fmt_g(c.task_inference.rhs), flag(c.task_inference.pass), fmt_g(c.combined.lhs),
             fmt_g(c.combined.rhs), flag(c.combined.pass)});
  }
}

}  // namespace ctxwm
