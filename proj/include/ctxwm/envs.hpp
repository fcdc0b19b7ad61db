#pragma once

// Toy meta-task suites with pure, counter-seeded simulation so whole datasets
// replay bit-for-bit from (seed, task, episode, t). Three families:
//   point-mass-direction   reward varies with the goal direction
//   point-mass-goal-speed  reward (target speed) and dynamics (friction) vary
//   chain-gridworld-slip   dynamics vary with the slip probability
// Scripted controllers with an epsilon of uniform noise produce random /
// medium / expert tiers for the offline mixture.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxwm/common.hpp"
#include "ctxwm/config.hpp"
#include "ctxwm/context.hpp"
#include "ctxwm/csv.hpp"
#include "ctxwm/tensor.hpp"
#include "ctxwm/world_model.hpp"

namespace ctxwm {

enum class EnvFamily { point_mass_direction, point_mass_goal_speed, chain_gridworld_slip };

inline std::string to_string(EnvFamily f) {
  switch (f) {
    case EnvFamily::point_mass_direction: return "point-mass-direction";
    case EnvFamily::point_mass_goal_speed: return "point-mass-goal-speed";
    case EnvFamily::chain_gridworld_slip: return "chain-gridworld-slip";
  }
  return "?";
}

inline EnvFamily env_family_from(const std::string& s) {
  for (EnvFamily f : {EnvFamily::point_mass_direction, EnvFamily::point_mass_goal_speed,
                      EnvFamily::chain_gridworld_slip})
    if (to_string(f) == s) return f;
  fail(Errc::config, "unknown env family '" + s +
                         "' (expected point-mass-direction | point-mass-goal-speed | "
                         "chain-gridworld-slip)");
}

struct TaskSpec {
  EnvFamily family = EnvFamily::point_mass_direction;
  int task_id = 0;
  std::string split;  // train | test_id | test_ood
  std::map<std::string, double> factors;

  double factor(const std::string& name) const {
    auto it = factors.find(name);
    check(it != factors.end(), Errc::registry,
          "task " + std::to_string(task_id) + " has no factor '" + name + "'");
    return it->second;
  }
};

struct StepResult {
  std::vector<double> sp;
  double r = 0;
  bool done = false;
};

inline constexpr int kGridCells = 8;

// A pure simulator: every random draw comes from counters, so any transition
// can be reproduced from (seed, task_id, episode, t) alone. Stream 0 drives
// the environment, stream 1 the behavior policy.
class ToyEnv {
 public:
  explicit ToyEnv(TaskSpec spec) : spec_(std::move(spec)) {}

  const TaskSpec& spec() const { return spec_; }

  int64_t s_dim() const {
    switch (spec_.family) {
      case EnvFamily::point_mass_direction: return 2;
      case EnvFamily::point_mass_goal_speed: return 2;  // position, velocity
      case EnvFamily::chain_gridworld_slip: return 1;   // cell / (cells - 1)
    }
    return 0;
  }

  int64_t a_dim() const { return spec_.family == EnvFamily::point_mass_direction ? 2 : 1; }

  int episode_limit(int configured) const { return configured; }

  std::vector<double> reset(uint64_t seed, int episode) const {
    Rng rng = step_rng(seed, uint64_t(spec_.task_id), uint64_t(episode), uint64_t(-1)).fork(0);
    switch (spec_.family) {
      case EnvFamily::point_mass_direction:
        return {0.5 * (2 * rng.uniform() - 1), 0.5 * (2 * rng.uniform() - 1)};
      case EnvFamily::point_mass_goal_speed:
        return {0.5 * (2 * rng.uniform() - 1), 0.0};
      case EnvFamily::chain_gridworld_slip: {
        int cell = int(rng.uniform_int(kGridCells - 1));  // never start on the goal
        return {double(cell) / double(kGridCells - 1)};
      }
    }
    return {};
  }

  StepResult step(const std::vector<double>& s, const std::vector<double>& a, uint64_t seed,
                  int episode, int t) const {
    check(int64_t(s.size()) == s_dim() && int64_t(a.size()) == a_dim(), Errc::dimension,
          "env step shape mismatch");
    Rng rng = step_rng(seed, uint64_t(spec_.task_id), uint64_t(episode), uint64_t(t)).fork(0);
    StepResult out;
    switch (spec_.family) {
      case EnvFamily::point_mass_direction: {
        double gx = 0.5 * std::cos(spec_.factor("theta"));
        double gy = 0.5 * std::sin(spec_.factor("theta"));
        double ax = std::clamp(a[0], -1.0, 1.0), ay = std::clamp(a[1], -1.0, 1.0);
        double x = std::clamp(s[0] + 0.1 * ax + 0.01 * rng.normal(), -1.0, 1.0);
        double y = std::clamp(s[1] + 0.1 * ay + 0.01 * rng.normal(), -1.0, 1.0);
        out.sp = {x, y};
        out.r = -std::sqrt((x - gx) * (x - gx) + (y - gy) * (y - gy));
        break;
      }
      case EnvFamily::point_mass_goal_speed: {
        double friction = spec_.factor("friction");
        double v_target = spec_.factor("v_target");
        double acc = std::clamp(a[0], -1.0, 1.0);
        double vel = (1.0 - friction) * s[1] + 0.1 * acc + 0.01 * rng.normal();
        vel = std::clamp(vel, -1.0, 1.0);
        double pos = std::clamp(s[0] + 0.1 * vel, -1.0, 1.0);
        out.sp = {pos, vel};
        out.r = -std::fabs(vel - v_target);
        break;
      }
      case EnvFamily::chain_gridworld_slip: {
        double slip = spec_.factor("slip");
        int cell = cell_of(s[0]);
        int dir = a[0] >= 0 ? +1 : -1;
        if (rng.uniform() < slip) dir = -dir;
        int next = std::clamp(cell + dir, 0, kGridCells - 1);
        out.sp = {double(next) / double(kGridCells - 1)};
        out.done = next == kGridCells - 1;
        out.r = out.done ? 1.0 : 0.0;
        break;
      }
    }
    return out;
  }

  // proportional controllers that know the task factors; the dataset oracle
  std::vector<double> expert_action(const std::vector<double>& s) const {
    switch (spec_.family) {
      case EnvFamily::point_mass_direction: {
        double gx = 0.5 * std::cos(spec_.factor("theta"));
        double gy = 0.5 * std::sin(spec_.factor("theta"));
        return {std::clamp((gx - s[0]) / 0.1, -1.0, 1.0), std::clamp((gy - s[1]) / 0.1, -1.0, 1.0)};
      }
      case EnvFamily::point_mass_goal_speed: {
        double friction = spec_.factor("friction");
        double v_target = spec_.factor("v_target");
        return {std::clamp((v_target - (1.0 - friction) * s[1]) / 0.1, -1.0, 1.0)};
      }
      case EnvFamily::chain_gridworld_slip:
        return {1.0};  // the goal sits at the right end
    }
    return {};
  }

  // expert with probability (1 - eps), uniform otherwise
  std::vector<double> behavior_action(const std::vector<double>& s, double eps, uint64_t seed,
                                      int episode, int t) const {
    Rng rng = step_rng(seed, uint64_t(spec_.task_id), uint64_t(episode), uint64_t(t)).fork(1);
    if (rng.uniform() < eps) {
      std::vector<double> a(size_t(a_dim()), 0.0);
      for (auto& v : a) v = 2 * rng.uniform() - 1;
      return a;
    }
    return expert_action(s);
  }

  static int cell_of(double s) {
    return std::clamp(int(std::lround(s * double(kGridCells - 1))), 0, kGridCells - 1);
  }

 private:
  TaskSpec spec_;
};

// ---- task sampling ----

struct FactorRange {
  std::string name;
  double id_lo, id_hi;    // training / in-distribution interval
  double ood_lo, ood_hi;  // magnitudes strictly outside it
};

// In-distribution factors never touch the out-of-distribution intervals; the
// direction angle uses a sub-range of the circle so nothing wraps around.
inline std::vector<FactorRange> factor_ranges(EnvFamily family) {
  switch (family) {
    case EnvFamily::point_mass_direction:
      return {{"theta", -0.75 * kPi, 0.75 * kPi, 0.80 * kPi, kPi}};
    case EnvFamily::point_mass_goal_speed:
      return {{"v_target", 0.2, 0.6, 0.65, 0.8}, {"friction", 0.05, 0.2, 0.22, 0.3}};
    case EnvFamily::chain_gridworld_slip:
      return {{"slip", 0.05, 0.3, 0.32, 0.45}};
  }
  return {};
}

struct TaskSet {
  std::vector<TaskSpec> train, test_id, test_ood;

  std::vector<const TaskSpec*> all() const {
    std::vector<const TaskSpec*> out;
    for (const auto& t : train) out.push_back(&t);
    for (const auto& t : test_id) out.push_back(&t);
    for (const auto& t : test_ood) out.push_back(&t);
    return out;
  }
};

inline TaskSet sample_task_set(EnvFamily family, const DataConfig& cfg, uint64_t seed) {
  check(cfg.train_tasks > 0 && cfg.test_id_tasks > 0 && cfg.test_ood_tasks > 0, Errc::config,
        "every split needs at least one task");
  auto ranges = factor_ranges(family);
  for (const auto& r : ranges)
    check(r.id_hi < r.ood_lo || r.ood_hi < r.id_lo, Errc::config,
          "factor '" + r.name + "' has overlapping in/out-of-distribution intervals");

  TaskSet out;
  int next_id = 0;
  auto draw = [&](const std::string& split, bool ood) {
    TaskSpec spec;
    spec.family = family;
    spec.task_id = next_id;
    spec.split = split;
    Rng rng = Rng(mix_seed(seed, 0x7a51)).fork(uint64_t(next_id));
    for (const auto& r : ranges) {
      double lo = ood ? r.ood_lo : r.id_lo, hi = ood ? r.ood_hi : r.id_hi;
      double v = lo + (hi - lo) * rng.uniform();
      if (family == EnvFamily::point_mass_direction && ood && rng.uniform() < 0.5)
        v = -v;  // both unseen arcs of the circle
      spec.factors[r.name] = v;
    }
    ++next_id;
    return spec;
  };
  for (int i = 0; i < cfg.train_tasks; ++i) out.train.push_back(draw("train", false));
  for (int i = 0; i < cfg.test_id_tasks; ++i) out.test_id.push_back(draw("test_id", false));
  for (int i = 0; i < cfg.test_ood_tasks; ++i) out.test_ood.push_back(draw("test_ood", true));
  return out;
}

// ---- offline dataset generation ----

inline double tier_eps(const DataConfig& cfg, int episode) {
  double f = (double(episode) + 0.5) / double(cfg.episodes_per_task);
  if (f < cfg.mix_random) return 1.0;
  if (f < cfg.mix_random + cfg.mix_medium) return 0.3;
  return 0.05;
}

struct DatasetSummary {
  int n_tasks = 0;
  int64_t n_transitions = 0;
  std::string dir;
};

inline DatasetSummary generate_dataset(const TaskSet& tasks, const DataConfig& cfg,
                                       uint64_t seed, const std::string& dir) {
  std::vector<const TaskSpec*> all = tasks.all();
  check(!all.empty(), Errc::config, "task set is empty");
  EnvFamily family = all[0]->family;
  for (const TaskSpec* t : all)
    check(t->family == family, Errc::config, "task set mixes environment families");
  ToyEnv probe(*all[0]);
  int64_t sd = probe.s_dim(), ad = probe.a_dim();

  // one row buffer per task so the parallel fill merges deterministically
  std::vector<std::string> buffers(all.size());
  parallel_for(int64_t(all.size()), [&](int64_t ti) {
    ToyEnv env(*all[size_t(ti)]);
    std::string& buf = buffers[size_t(ti)];
    for (int ep = 0; ep < cfg.episodes_per_task; ++ep) {
      double eps = tier_eps(cfg, ep);
      std::vector<double> s = env.reset(seed, ep);
      for (int t = 0; t < cfg.episode_len; ++t) {
        std::vector<double> a = env.behavior_action(s, eps, seed, ep, t);
        StepResult res = env.step(s, a, seed, ep, t);
        std::string row = std::to_string(all[size_t(ti)]->task_id) + "," + std::to_string(ep) +
                          "," + std::to_string(t);
        for (double v : s) row += "," + fmt_g(v);
        for (double v : a) row += "," + fmt_g(v);
        row += "," + fmt_g(res.r);
        for (double v : res.sp) row += "," + fmt_g(v);
        row += res.done ? ",1\n" : ",0\n";
        buf += row;
        if (res.done) break;
        s = res.sp;
      }
    }
  });

  std::vector<std::string> header = {"task_id", "episode", "t"};
  for (int64_t i = 0; i < sd; ++i) header.push_back("s" + std::to_string(i));
  for (int64_t i = 0; i < ad; ++i) header.push_back("a" + std::to_string(i));
  header.push_back("r");
  for (int64_t i = 0; i < sd; ++i) header.push_back("sp" + std::to_string(i));
  header.push_back("done");

  std::ofstream out(dir + "/transitions.csv");
  check(out.good(), Errc::io, "cannot open '" + dir + "/transitions.csv' for writing");
  out << "# format: ctxwm.transitions.v1\n";
  for (size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\n";
  DatasetSummary summary;
  summary.dir = dir;
  summary.n_tasks = int(all.size());
  for (const std::string& buf : buffers) {
    out << buf;
    summary.n_transitions += int64_t(std::count(buf.begin(), buf.end(), '\n'));
  }
  out.close();

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["family"] = to_string(family);
  manifest["seed"] = seed;
  manifest["s_dim"] = sd;
  manifest["a_dim"] = ad;
  manifest["episodes_per_task"] = cfg.episodes_per_task;
  manifest["episode_len"] = cfg.episode_len;
  manifest["mix"] = {cfg.mix_random, cfg.mix_medium, cfg.mix_expert};
  manifest["tasks"] = nlohmann::json::array();
  for (const TaskSpec* t : all) {
    nlohmann::json jt;
    jt["task_id"] = t->task_id;
    jt["split"] = t->split;
    jt["factors"] = t->factors;
    manifest["tasks"].push_back(jt);
  }
  std::ofstream mf(dir + "/manifest.json");
  check(mf.good(), Errc::io, "cannot open '" + dir + "/manifest.json' for writing");
  mf << manifest.dump(2) << "\n";
  return summary;
}

inline DatasetSummary generate_dataset(EnvFamily family, const DataConfig& cfg, uint64_t seed,
                                       const std::string& dir) {
  return generate_dataset(sample_task_set(family, cfg, seed), cfg, seed, dir);
}

// ---- loading and sampling ----

struct Transition {
  std::vector<double> s, a, sp;
  double r = 0;
  bool done = false;
};

struct EpisodeData {
  std::vector<Transition> steps;
};

struct TaskData {
  TaskSpec spec;
  std::vector<EpisodeData> episodes;
  int64_t n_transitions = 0;
};

template <class T>
struct RawBatch {
  Tensor<T> s, a, r, sp, done;
};

class TaskDataset {
 public:
  EnvFamily family = EnvFamily::point_mass_direction;
  uint64_t seed = 0;
  int64_t s_dim = 0, a_dim = 0;
  int episode_len = 0;

  static TaskDataset load(const std::string& dir, const std::string& split, int64_t buffer_cap) {
    check(split == "train" || split == "test_id" || split == "test_ood", Errc::config,
          "unknown split '" + split + "' (expected train | test_id | test_ood)");
    std::ifstream mf(dir + "/manifest.json");
    check(mf.good(), Errc::io, "cannot open '" + dir + "/manifest.json'");
    nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, /*allow_exceptions=*/false);
    check(!manifest.is_discarded(), Errc::io, "manifest.json is not valid json");
    check(manifest.value("format_version", 0) == 1, Errc::io, "unsupported manifest version");

    TaskDataset ds;
    ds.family = env_family_from(manifest.at("family").get<std::string>());
    ds.seed = manifest.at("seed").get<uint64_t>();
    ds.s_dim = manifest.at("s_dim").get<int64_t>();
    ds.a_dim = manifest.at("a_dim").get<int64_t>();
    ds.episode_len = manifest.at("episode_len").get<int>();

    std::map<int, size_t> slot;  // task_id -> index into tasks_
    for (const auto& jt : manifest.at("tasks")) {
      TaskSpec spec;
      spec.family = ds.family;
      spec.task_id = jt.at("task_id").get<int>();
      spec.split = jt.at("split").get<std::string>();
      for (auto it = jt.at("factors").begin(); it != jt.at("factors").end(); ++it)
        spec.factors[it.key()] = it.value().get<double>();
      if (spec.split != split) continue;
      slot[spec.task_id] = ds.tasks_.size();
      ds.tasks_.push_back(TaskData{spec, {}, 0});
    }
    check(!ds.tasks_.empty(), Errc::empty_dataset, "no tasks in split '" + split + "'");

    CsvTable table = CsvTable::read(dir + "/transitions.csv", "transitions");
    int c_task = table.col("task_id"), c_ep = table.col("episode"), c_done = table.col("done");
    int c_r = table.col("r");
    std::vector<int> c_s, c_a, c_sp;
    for (int64_t i = 0; i < ds.s_dim; ++i) c_s.push_back(table.col("s" + std::to_string(i)));
    for (int64_t i = 0; i < ds.a_dim; ++i) c_a.push_back(table.col("a" + std::to_string(i)));
    for (int64_t i = 0; i < ds.s_dim; ++i) c_sp.push_back(table.col("sp" + std::to_string(i)));

    int64_t total = 0;
    for (const auto& row : table.rows) {
      int task_id = int(CsvTable::num(row[size_t(c_task)]));
      auto it = slot.find(task_id);
      if (it == slot.end()) continue;
      TaskData& td = ds.tasks_[it->second];
      int ep = int(CsvTable::num(row[size_t(c_ep)]));
      if (td.episodes.size() <= size_t(ep)) td.episodes.resize(size_t(ep) + 1);
      Transition tr;
      for (int c : c_s) tr.s.push_back(CsvTable::num(row[size_t(c)]));
      for (int c : c_a) tr.a.push_back(CsvTable::num(row[size_t(c)]));
      for (int c : c_sp) tr.sp.push_back(CsvTable::num(row[size_t(c)]));
      tr.r = CsvTable::num(row[size_t(c_r)]);
      tr.done = CsvTable::num(row[size_t(c_done)]) != 0;
      td.episodes[size_t(ep)].steps.push_back(std::move(tr));
      ++td.n_transitions;
      ++total;
      check(total <= buffer_cap, Errc::config,
            "split '" + split + "' exceeds the transition buffer cap of " +
                std::to_string(buffer_cap));
    }
    for (auto& td : ds.tasks_)
      check(td.n_transitions > 0, Errc::empty_dataset,
            "task " + std::to_string(td.spec.task_id) + " has no transitions");
    return ds;
  }

  const std::vector<TaskData>& tasks() const { return tasks_; }

  const TaskData& task(int index) const {
    check(index >= 0 && index < int(tasks_.size()), Errc::registry,
          "task index " + std::to_string(index) + " out of range");
    return tasks_[size_t(index)];
  }

  // uniform over all transitions of the task
  template <class T>
  ContextBatch<T> sample_context(int index, int64_t n, Rng& rng) const {
    check(n > 0, Errc::config, "context size must be positive");
    const TaskData& td = task(index);
    ContextBatch<T> batch({n, context_input_dim(s_dim, a_dim)});
    for (int64_t i = 0; i < n; ++i) {
      const Transition& tr = pick_transition(td, rng);
      std::vector<T> s(tr.s.begin(), tr.s.end()), a(tr.a.begin(), tr.a.end()),
          sp(tr.sp.begin(), tr.sp.end());
      pack_transition_row<T>(batch, i, s, a, T(tr.r), sp);
    }
    return batch;
  }

  // windows of h consecutive steps from episodes long enough to hold them
  template <class T>
  SegmentBatch<T> sample_segments(int index, int64_t b, int h, Rng& rng) const {
    check(b > 0 && h >= 1, Errc::config, "segment batch needs b > 0, h >= 1");
    const TaskData& td = task(index);
    std::vector<const EpisodeData*> eligible;
    for (const auto& ep : td.episodes)
      if (int(ep.steps.size()) >= h) eligible.push_back(&ep);
    check(!eligible.empty(), Errc::empty_dataset,
          "task " + std::to_string(td.spec.task_id) + " has no episode of length >= " +
              std::to_string(h));

    SegmentBatch<T> seg;
    seg.s.assign(size_t(h) + 1, Tensor<T>({b, s_dim}));
    seg.a.assign(size_t(h), Tensor<T>({b, a_dim}));
    seg.r.assign(size_t(h), Tensor<T>({b, 1}));
    for (int64_t i = 0; i < b; ++i) {
      const EpisodeData& ep = *eligible[size_t(rng.uniform_int(int64_t(eligible.size())))];
      int64_t start = rng.uniform_int(int64_t(ep.steps.size()) - h + 1);
      for (int step = 0; step < h; ++step) {
        const Transition& tr = ep.steps[size_t(start + step)];
        for (int64_t c = 0; c < s_dim; ++c) seg.s[size_t(step)].at(i, c) = T(tr.s[size_t(c)]);
        for (int64_t c = 0; c < a_dim; ++c) seg.a[size_t(step)].at(i, c) = T(tr.a[size_t(c)]);
        seg.r[size_t(step)].data[size_t(i)] = T(tr.r);
        if (step + 1 == h)
          for (int64_t c = 0; c < s_dim; ++c) seg.s[size_t(h)].at(i, c) = T(tr.sp[size_t(c)]);
      }
    }
    return seg;
  }

  template <class T>
  RawBatch<T> sample_transitions(int index, int64_t b, Rng& rng) const {
    check(b > 0, Errc::config, "batch size must be positive");
    const TaskData& td = task(index);
    RawBatch<T> out;
    out.s = Tensor<T>({b, s_dim});
    out.a = Tensor<T>({b, a_dim});
    out.r = Tensor<T>({b, 1});
    out.sp = Tensor<T>({b, s_dim});
    out.done = Tensor<T>({b, 1});
    for (int64_t i = 0; i < b; ++i) {
      const Transition& tr = pick_transition(td, rng);
      for (int64_t c = 0; c < s_dim; ++c) out.s.at(i, c) = T(tr.s[size_t(c)]);
      for (int64_t c = 0; c < a_dim; ++c) out.a.at(i, c) = T(tr.a[size_t(c)]);
      for (int64_t c = 0; c < s_dim; ++c) out.sp.at(i, c) = T(tr.sp[size_t(c)]);
      out.r.data[size_t(i)] = T(tr.r);
      out.done.data[size_t(i)] = T(tr.done ? 1 : 0);
    }
    return out;
  }

 private:
  static const Transition& pick_transition(const TaskData& td, Rng& rng) {
    int64_t flat = rng.uniform_int(td.n_transitions);
    for (const auto& ep : td.episodes) {
      if (flat < int64_t(ep.steps.size())) return ep.steps[size_t(flat)];
      flat -= int64_t(ep.steps.size());
    }
    fail(Errc::contract, "transition index walked off the dataset");
  }

  std::vector<TaskData> tasks_;
};

}  // namespace ctxwm
