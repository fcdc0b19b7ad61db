#pragma once

// INI-style configuration with one section per module. Defaults follow the
// published hyperparameters; sizes are scaled down to the bundled toy suites
// and documented per key in README.md.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ctxwm/common.hpp"
#include "ctxwm/fsq.hpp"

namespace ctxwm {

enum class LatentMode { discrete_ce, continuous_mse, continuous_cosine, simnorm_mse, simnorm_cosine };
enum class ContrastiveMode { infonce, focal };
enum class TrainSchedule { interleaved, two_phase };

inline std::string to_string(LatentMode m) {
  switch (m) {
    case LatentMode::discrete_ce: return "discrete-ce";
    case LatentMode::continuous_mse: return "continuous-mse";
    case LatentMode::continuous_cosine: return "continuous-cosine";
    case LatentMode::simnorm_mse: return "simnorm-mse";
    case LatentMode::simnorm_cosine: return "simnorm-cosine";
  }
  return "?";
}

inline LatentMode latent_mode_from(const std::string& s) {
  for (LatentMode m : {LatentMode::discrete_ce, LatentMode::continuous_mse,
                       LatentMode::continuous_cosine, LatentMode::simnorm_mse,
                       LatentMode::simnorm_cosine})
    if (to_string(m) == s) return m;
  fail(Errc::config, "unknown latent-mode '" + s +
                         "' (expected discrete-ce | continuous-mse | continuous-cosine | "
                         "simnorm-mse | simnorm-cosine)");
}

struct DataConfig {
  std::string family = "point-mass-direction";
  int train_tasks = 8;
  int test_id_tasks = 4;
  int test_ood_tasks = 4;
  int episodes_per_task = 200;
  int episode_len = 100;
  double mix_random = 0.4;
  double mix_medium = 0.3;
  double mix_expert = 0.3;
  int64_t buffer_cap = 200000;
};

struct ContextConfig {
  int64_t z_dim = 5;
  std::vector<int64_t> hidden = {64, 64};
  double alpha = 1.0;          // similarity temperature
  double bank_momentum = 0.1;  // lambda in the positive-bank update
  ContrastiveMode contrastive = ContrastiveMode::infonce;
  double focal_weight = 1.0;
  double focal_eps = 1e-3;
};

struct WorldModelTrainConfig {
  std::vector<int64_t> obs_hidden = {64};
  std::vector<int64_t> dyn_hidden = {128, 128};
  std::vector<int64_t> reward_hidden = {128, 128};
  int horizon = 5;
  double gamma = 0.99;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta = 1.0;  // contrastive loss weight
  double consistency_coeff = 1.0;
  double reward_coeff = 1.0;
  double ema_momentum = 0.005;
  double gumbel_temperature = 1.0;
  double grad_clip = 0.0;  // 0 disables
  LatentMode latent_mode = LatentMode::discrete_ce;
  int simnorm_group = 8;
};

struct IqlTrainConfig {
  std::vector<int64_t> hidden = {64, 64};
  double tau = 0.8;              // expectile
  double awr_temperature = 3.0;  // advantage scale B
  double awr_clip = 100.0;
  double gamma = 0.99;
  double lr = 3e-4;
  double target_momentum = 0.005;
  int batch = 64;
  int n_q = 2;
  double logstd_min = -5.0;
  double logstd_max = 2.0;
  std::string policy_optimizer = "iql";
  TrainSchedule schedule = TrainSchedule::interleaved;
};

struct TrainLoopConfig {
  int64_t iters = 5000;
  int meta_batch = 8;
  int context_size = 64;
  int segments_per_task = 8;
  int64_t metrics_every = 100;
  int64_t checkpoint_every = 2500;
  int64_t wm_phase_iters = 2500;  // only used by the two-phase schedule
};

struct EvalProtocolConfig {
  int episodes = 20;
  int k = 3;  // adaptation trajectories for few-shot
  bool adaptation_stochastic = true;
};

struct Config {
  DataConfig data;
  FsqConfig fsq;
  ContextConfig context;
  WorldModelTrainConfig wm;
  IqlTrainConfig iql;
  TrainLoopConfig train;
  EvalProtocolConfig eval;

  void validate() const {
    fsq.validate();
    check(context.z_dim > 0, Errc::config, "z_dim must be positive");
    check(context.alpha > 0, Errc::config, "similarity temperature alpha must be positive");
    check(context.bank_momentum >= 0 && context.bank_momentum <= 1, Errc::config,
          "bank_momentum must lie in [0,1]");
    check(wm.horizon >= 1, Errc::config, "horizon must be >= 1");
    check(wm.gamma > 0 && wm.gamma < 1, Errc::config, "world-model gamma must lie in (0,1)");
    check(wm.gumbel_temperature > 0, Errc::config, "gumbel temperature must be positive");
    check(wm.simnorm_group >= 2, Errc::config, "simnorm group must be >= 2");
    check(iql.tau > 0 && iql.tau < 1, Errc::config, "expectile tau must lie in (0,1)");
    check(iql.awr_temperature > 0, Errc::config, "awr temperature must be positive");
    check(iql.gamma > 0 && iql.gamma < 1, Errc::config, "iql gamma must lie in (0,1)");
    check(iql.n_q >= 1, Errc::config, "need at least one Q head");
    check(iql.logstd_min < iql.logstd_max, Errc::config, "log-std bounds are inverted");
    check(train.meta_batch >= 1, Errc::config, "meta_batch must be >= 1");
    check(train.context_size >= 1, Errc::config, "context_size must be >= 1");
    check(data.mix_random >= 0 && data.mix_medium >= 0 && data.mix_expert >= 0, Errc::config,
          "quality mix weights must be non-negative");
    double mix = data.mix_random + data.mix_medium + data.mix_expert;
    check(std::abs(mix - 1.0) < 1e-9, Errc::config, "quality mix must sum to 1");
    if (wm.latent_mode == LatentMode::simnorm_mse || wm.latent_mode == LatentMode::simnorm_cosine)
      check(fsq.latent_dim % wm.simnorm_group == 0, Errc::config,
            "latent_dim must be divisible by simnorm_group");
  }

  static Config load(const std::string& path);
  void save(const std::string& path) const;
  void apply_ini_text(const std::string& text);
  std::string to_ini_text() const;
};

// ---- ini plumbing ----

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<int64_t> parse_dims(const std::string& s) {
  std::vector<int64_t> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    check(!item.empty(), Errc::config, "empty entry in dim list '" + s + "'");
    try {
      out.push_back(std::stoll(item));
    } catch (...) {
      fail(Errc::config, "bad dim list entry '" + item + "'");
    }
  }
  return out;
}

inline std::vector<int> parse_levels(const std::string& s) {
  std::vector<int> out;
  for (int64_t v : parse_dims(s)) out.push_back(int(v));
  return out;
}

inline std::string dims_str(const std::vector<int64_t>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::string levels_str(const std::vector<int>& v) {
  std::vector<int64_t> w(v.begin(), v.end());
  return dims_str(w);
}

inline double parse_num(const std::string& key, const std::string& s) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    check(pos == trim(s).size(), Errc::config, "bad number for '" + key + "': '" + s + "'");
    return v;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(Errc::config, "bad number for '" + key + "': '" + s + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  fail(Errc::config, "bad boolean for '" + key + "': '" + s + "'");
}

}  // namespace detail

inline void Config::apply_ini_text(const std::string& text) {
  using namespace detail;
  std::stringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      check(line.back() == ']', Errc::config,
            "line " + std::to_string(lineno) + ": malformed section '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    check(eq != std::string::npos, Errc::config,
          "line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    std::string path = section + "." + key;

    if (path == "data.family") data.family = val;
    else if (path == "data.train_tasks") data.train_tasks = int(parse_num(path, val));
    else if (path == "data.test_id_tasks") data.test_id_tasks = int(parse_num(path, val));
    else if (path == "data.test_ood_tasks") data.test_ood_tasks = int(parse_num(path, val));
    else if (path == "data.episodes_per_task") data.episodes_per_task = int(parse_num(path, val));
    else if (path == "data.episode_len") data.episode_len = int(parse_num(path, val));
    else if (path == "data.mix_random") data.mix_random = parse_num(path, val);
    else if (path == "data.mix_medium") data.mix_medium = parse_num(path, val);
    else if (path == "data.mix_expert") data.mix_expert = parse_num(path, val);
    else if (path == "data.buffer_cap") data.buffer_cap = int64_t(parse_num(path, val));
    else if (path == "fsq.levels") fsq.levels = parse_levels(val);
    else if (path == "fsq.latent_dim") fsq.latent_dim = int64_t(parse_num(path, val));
    else if (path == "context.z_dim") context.z_dim = int64_t(parse_num(path, val));
    else if (path == "context.hidden") context.hidden = parse_dims(val);
    else if (path == "context.alpha") context.alpha = parse_num(path, val);
    else if (path == "context.bank_momentum") context.bank_momentum = parse_num(path, val);
    else if (path == "context.contrastive") {
      if (val == "infonce") context.contrastive = ContrastiveMode::infonce;
      else if (val == "focal") context.contrastive = ContrastiveMode::focal;
      else fail(Errc::config, "unknown contrastive mode '" + val + "'");
    }
    else if (path == "context.focal_weight") context.focal_weight = parse_num(path, val);
    else if (path == "context.focal_eps") context.focal_eps = parse_num(path, val);
    else if (path == "world_model.obs_hidden") wm.obs_hidden = parse_dims(val);
    else if (path == "world_model.dyn_hidden") wm.dyn_hidden = parse_dims(val);
    else if (path == "world_model.reward_hidden") wm.reward_hidden = parse_dims(val);
    else if (path == "world_model.horizon") wm.horizon = int(parse_num(path, val));
    else if (path == "world_model.gamma") wm.gamma = parse_num(path, val);
    else if (path == "world_model.lr") wm.lr = parse_num(path, val);
    else if (path == "world_model.weight_decay") wm.weight_decay = parse_num(path, val);
    else if (path == "world_model.beta") wm.beta = parse_num(path, val);
    else if (path == "world_model.consistency_coeff") wm.consistency_coeff = parse_num(path, val);
    else if (path == "world_model.reward_coeff") wm.reward_coeff = parse_num(path, val);
    else if (path == "world_model.ema_momentum") wm.ema_momentum = parse_num(path, val);
    else if (path == "world_model.gumbel_temperature") wm.gumbel_temperature = parse_num(path, val);
    else if (path == "world_model.grad_clip") wm.grad_clip = parse_num(path, val);
    else if (path == "world_model.latent_mode") wm.latent_mode = latent_mode_from(val);
    else if (path == "world_model.simnorm_group") wm.simnorm_group = int(parse_num(path, val));
    else if (path == "iql.hidden") iql.hidden = parse_dims(val);
    else if (path == "iql.tau") iql.tau = parse_num(path, val);
    else if (path == "iql.awr_temperature") iql.awr_temperature = parse_num(path, val);
    else if (path == "iql.awr_clip") iql.awr_clip = parse_num(path, val);
    else if (path == "iql.gamma") iql.gamma = parse_num(path, val);
    else if (path == "iql.lr") iql.lr = parse_num(path, val);
    else if (path == "iql.target_momentum") iql.target_momentum = parse_num(path, val);
    else if (path == "iql.batch") iql.batch = int(parse_num(path, val));
    else if (path == "iql.n_q") iql.n_q = int(parse_num(path, val));
    else if (path == "iql.logstd_min") iql.logstd_min = parse_num(path, val);
    else if (path == "iql.logstd_max") iql.logstd_max = parse_num(path, val);
    else if (path == "iql.policy_optimizer") iql.policy_optimizer = val;
    else if (path == "iql.schedule") {
      if (val == "interleaved") iql.schedule = TrainSchedule::interleaved;
      else if (val == "two-phase") iql.schedule = TrainSchedule::two_phase;
      else fail(Errc::config, "unknown schedule '" + val + "'");
    }
    else if (path == "train.iters") train.iters = int64_t(parse_num(path, val));
    else if (path == "train.meta_batch") train.meta_batch = int(parse_num(path, val));
    else if (path == "train.context_size") train.context_size = int(parse_num(path, val));
    else if (path == "train.segments_per_task") train.segments_per_task = int(parse_num(path, val));
    else if (path == "train.metrics_every") train.metrics_every = int64_t(parse_num(path, val));
    else if (path == "train.checkpoint_every") train.checkpoint_every = int64_t(parse_num(path, val));
    else if (path == "train.wm_phase_iters") train.wm_phase_iters = int64_t(parse_num(path, val));
    else if (path == "eval.episodes") eval.episodes = int(parse_num(path, val));
    else if (path == "eval.k") eval.k = int(parse_num(path, val));
    else if (path == "eval.adaptation_stochastic") eval.adaptation_stochastic = parse_bool(path, val);
    else fail(Errc::config, "unknown config key '" + path + "'");
  }
}

inline std::string Config::to_ini_text() const {
  using namespace detail;
  std::stringstream o;
  o << "# ctxwm configuration (format v1)\n";
  o << "[data]\n";
  o << "family = " << data.family << "\n";
  o << "train_tasks = " << data.train_tasks << "\n";
  o << "test_id_tasks = " << data.test_id_tasks << "\n";
  o << "test_ood_tasks = " << data.test_ood_tasks << "\n";
  o << "episodes_per_task = " << data.episodes_per_task << "\n";
  o << "episode_len = " << data.episode_len << "\n";
  o << "mix_random = " << data.mix_random << "\n";
  o << "mix_medium = " << data.mix_medium << "\n";
  o << "mix_expert = " << data.mix_expert << "\n";
  o << "buffer_cap = " << data.buffer_cap << "\n";
  o << "\n[fsq]\n";
  o << "levels = " << levels_str(fsq.levels) << "\n";
  o << "latent_dim = " << fsq.latent_dim << "\n";
  o << "\n[context]\n";
  o << "z_dim = " << context.z_dim << "\n";
  o << "hidden = " << dims_str(context.hidden) << "\n";
  o << "alpha = " << context.alpha << "\n";
  o << "bank_momentum = " << context.bank_momentum << "\n";
  o << "contrastive = " << (context.contrastive == ContrastiveMode::infonce ? "infonce" : "focal") << "\n";
  o << "focal_weight = " << context.focal_weight << "\n";
  o << "focal_eps = " << context.focal_eps << "\n";
  o << "\n[world_model]\n";
  o << "obs_hidden = " << dims_str(wm.obs_hidden) << "\n";
  o << "dyn_hidden = " << dims_str(wm.dyn_hidden) << "\n";
  o << "reward_hidden = " << dims_str(wm.reward_hidden) << "\n";
  o << "horizon = " << wm.horizon << "\n";
  o << "gamma = " << wm.gamma << "\n";
  o << "lr = " << wm.lr << "\n";
  o << "weight_decay = " << wm.weight_decay << "\n";
  o << "beta = " << wm.beta << "\n";
  o << "consistency_coeff = " << wm.consistency_coeff << "\n";
  o << "reward_coeff = " << wm.reward_coeff << "\n";
  o << "ema_momentum = " << wm.ema_momentum << "\n";
  o << "gumbel_temperature = " << wm.gumbel_temperature << "\n";
  o << "grad_clip = " << wm.grad_clip << "\n";
  o << "latent_mode = " << to_string(wm.latent_mode) << "\n";
  o << "simnorm_group = " << wm.simnorm_group << "\n";
  o << "\n[iql]\n";
  o << "hidden = " << dims_str(iql.hidden) << "\n";
  o << "tau = " << iql.tau << "\n";
  o << "awr_temperature = " << iql.awr_temperature << "\n";
  o << "awr_clip = " << iql.awr_clip << "\n";
  o << "gamma = " << iql.gamma << "\n";
  o << "lr = " << iql.lr << "\n";
  o << "target_momentum = " << iql.target_momentum << "\n";
  o << "batch = " << iql.batch << "\n";
  o << "n_q = " << iql.n_q << "\n";
  o << "logstd_min = " << iql.logstd_min << "\n";
  o << "logstd_max = " << iql.logstd_max << "\n";
  o << "policy_optimizer = " << iql.policy_optimizer << "\n";
  o << "schedule = " << (iql.schedule == TrainSchedule::interleaved ? "interleaved" : "two-phase") << "\n";
  o << "\n[train]\n";
  o << "iters = " << train.iters << "\n";
  o << "meta_batch = " << train.meta_batch << "\n";
  o << "context_size = " << train.context_size << "\n";
  o << "segments_per_task = " << train.segments_per_task << "\n";
  o << "metrics_every = " << train.metrics_every << "\n";
  o << "checkpoint_every = " << train.checkpoint_every << "\n";
  o << "wm_phase_iters = " << train.wm_phase_iters << "\n";
  o << "\n[eval]\n";
  o << "episodes = " << eval.episodes << "\n";
  o << "k = " << eval.k << "\n";
  o << "adaptation_stochastic = " << (eval.adaptation_stochastic ? "true" : "false") << "\n";
  return o.str();
}

inline Config Config::load(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), Errc::io, "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  Config c;
  c.apply_ini_text(ss.str());
  c.validate();
  return c;
}

inline void Config::save(const std::string& path) const {
  std::ofstream out(path);
  check(out.good(), Errc::io, "cannot open '" + path + "' for writing");
  out << to_ini_text();
}

}  // namespace ctxwm
