// Command-line front end: dataset generation, training, the two evaluation
// protocols, representation diagnostics, tabular bound certification, and a
// small timing harness. Exit codes: 0 ok, 1 runtime error, 2 usage error.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "ctxwm/bound.hpp"
#include "ctxwm/harness.hpp"
#include "ctxwm/metrics.hpp"

using namespace ctxwm;

namespace {

Config load_cfg(const std::string& path) {
  if (path.empty()) {
    Config cfg;
    cfg.validate();
    return cfg;
  }
  return Config::load(path);
}

void print_table(const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows) {
  std::vector<size_t> w(header.size());
  for (size_t j = 0; j < header.size(); ++j) w[j] = header[j].size();
  for (const auto& r : rows)
    for (size_t j = 0; j < r.size(); ++j) w[j] = std::max(w[j], r[j].size());
  auto line = [&](const std::vector<std::string>& r) {
    for (size_t j = 0; j < r.size(); ++j)
      std::cout << (j ? "  " : "") << std::left << std::setw(int(w[j])) << r[j];
    std::cout << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
}

// ---- gen-data ----

int cmd_gen_data(const std::string& cfg_path, const std::string& family,
                 const std::string& out, uint64_t seed) {
  Config cfg = load_cfg(cfg_path);
  if (!family.empty()) cfg.data.family = family;
  EnvFamily f = env_family_from(cfg.data.family);
  std::filesystem::create_directories(out);
  DatasetSummary s = generate_dataset(f, cfg.data, seed, out);
  std::cout << "wrote " << s.n_tasks << " tasks, " << s.n_transitions << " transitions to "
            << s.dir << "\n";
  return 0;
}

// ---- train ----

int cmd_train(const std::string& cfg_path, const std::string& data, const std::string& out,
              uint64_t seed) {
  Config cfg = load_cfg(cfg_path);
  TaskDataset ds = TaskDataset::load(data, "train", cfg.data.buffer_cap);
  auto model = train<float>(cfg, ds, seed, out);
  int64_t params = 0;
  for (Param<float>* p : model->all_param_ptrs()) params += p->value.numel();
  std::cout << "trained " << model->step << " iterations over " << model->task_ids.size()
            << " tasks (" << params << " parameters); model written to " << out
            << "/model.ckpt\n";
  return 0;
}

// ---- eval ----

int cmd_eval(const std::string& model_path, const std::string& data, const std::string& split,
             const std::string& protocol, int k, int episodes, const std::string& out,
             uint64_t seed) {
  auto model = load_model<float>(model_path);
  TaskDataset ds = TaskDataset::load(data, split, model->cfg.data.buffer_cap);
  if (k < 0) k = model->cfg.eval.k;
  if (episodes <= 0) episodes = model->cfg.eval.episodes;
  check(protocol == "zero" || protocol == "few" || protocol == "both", Errc::config,
        "unknown protocol '" + protocol + "' (expected zero | few | both)");

  std::vector<EpisodeResult> all;
  for (size_t i = 0; i < ds.tasks().size(); ++i) {
    const TaskSpec& spec = ds.task(int(i)).spec;
    uint64_t task_seed = mix_seed(seed, uint64_t(spec.task_id));
    if (protocol != "few")
      for (auto& r : zero_shot_eval(*model, spec, episodes, task_seed)) all.push_back(r);
    if (protocol != "zero")
      for (auto& r : few_shot_eval(*model, spec, k, episodes, task_seed)) all.push_back(r);
  }
  write_eval_results(out, all);

  std::map<std::string, std::pair<double, int>> agg;
  for (const auto& r : all) {
    agg[r.protocol].first += r.ret;
    agg[r.protocol].second += 1;
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, acc] : agg)
    rows.push_back({name, std::to_string(acc.second), fmt_g(acc.first / acc.second)});
  print_table({"protocol", "episodes", "mean_return"}, rows);
  std::cout << "episode results written to " << out << "\n";
  return 0;
}

// ---- metrics ----

int cmd_metrics(const std::string& model_path, const std::string& data,
                const std::string& split, const std::string& out, int reps_per_task,
                int probe_batch, uint64_t seed) {
  check(reps_per_task > 0 && probe_batch > 0, Errc::config,
        "reps-per-task and probe-batch must be positive");
  auto model = load_model<float>(model_path);
  TaskDataset ds = TaskDataset::load(data, split, model->cfg.data.buffer_cap);
  const int n_tasks = int(ds.tasks().size());
  Rng rng(mix_seed(seed, 0x3E7));

  // task encodings from disjoint context draws, plus the generating factors
  std::vector<std::string> keys;
  for (const auto& [k, v] : ds.task(0).spec.factors) keys.push_back(k);
  const int64_t zd = model->enc.z_dim();
  Eigen::MatrixXd reps(n_tasks * reps_per_task, zd);
  Eigen::MatrixXd factors(n_tasks * reps_per_task, int64_t(keys.size()));
  int64_t row = 0;
  for (int i = 0; i < n_tasks; ++i) {
    const TaskSpec& spec = ds.task(i).spec;
    for (int r = 0; r < reps_per_task; ++r, ++row) {
      ContextBatch<float> ctx =
          ds.sample_context<float>(i, model->cfg.train.context_size, rng);
      Tensor<float> z = model->enc.encode_plain(ctx);
      for (int64_t j = 0; j < zd; ++j) reps(row, j) = double(z.data[size_t(j)]);
      for (size_t j = 0; j < keys.size(); ++j) factors(row, int64_t(j)) = spec.factor(keys[j]);
    }
  }

  // latent codes and encoder activations over a state probe
  Tensor<float> states({probe_batch, ds.s_dim});
  for (int i = 0; i < probe_batch; ++i) {
    RawBatch<float> one = ds.sample_transitions<float>(i % n_tasks, 1, rng);
    std::copy_n(one.s.data.begin(), ds.s_dim, states.data.begin() + int64_t(i) * ds.s_dim);
  }
  Tensor<float> latents = model->wm.encode_plain(states, /*use_ema=*/false).values;
  Tensor<float> hidden = model->wm.obs.last_hidden_plain(states);
  auto to_mat = [](const Tensor<float>& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (int64_t i = 0; i < t.rows(); ++i)
      for (int64_t j = 0; j < t.cols(); ++j) m(i, j) = double(t.data[size_t(i * t.cols() + j)]);
    return m;
  };
  Eigen::MatrixXd lat_m = to_mat(latents);

  DciResult d = dci(factors, reps);
  std::vector<std::pair<std::string, std::string>> vals = {
      {"feature_rank", std::to_string(feature_rank(lat_m))},
      {"matrix_rank", std::to_string(matrix_rank(lat_m))},
      {"dormant_ratio", fmt_g(dormant_ratio(to_mat(hidden)))},
      {"dci_disentanglement", fmt_g(d.disentanglement)},
      {"dci_completeness", fmt_g(d.completeness)},
      {"dci_informativeness", fmt_g(d.informativeness)},
      {"z_samples", std::to_string(n_tasks * reps_per_task)},
      {"probe_states", std::to_string(probe_batch)},
  };
  CsvWriter csv(out, "repr", {"metric", "value"});
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, v] : vals) {
    csv.row({name, v});
    rows.push_back({name, v});
  }
  print_table({"metric", "value"}, rows);
  std::cout << "diagnostics written to " << out << "\n";
  return 0;
}

// ---- bound-check ----

int cmd_bound_check(const FuzzConfig& fuzz, const std::string& out, uint64_t seed) {
  std::vector<Certificate> certs = fuzz_certificates(fuzz, seed);
  int64_t failed = 0;
  double worst = 0;  // most negative slack across all checks
  for (const Certificate& c : certs)
    for (const BoundCheck* b : {&c.sim, &c.abstraction, &c.task_inference, &c.combined}) {
      if (!b->pass) ++failed;
      worst = std::min(worst, b->rhs - b->lhs);
    }
  if (!out.empty()) {
    write_certificates(out, certs);
    std::cout << "certificates written to " << out << "\n";
  }
  std::cout << certs.size() << " instances, " << 4 * certs.size() << " bound checks, "
            << failed << " failed (worst slack " << fmt_g(worst) << ")\n";
  if (failed > 0) {
    std::cerr << "ctxwm: " << failed << " bound checks failed\n";
    return 1;
  }
  return 0;
}

// ---- timing ----

double bench_ms(int reps, const std::function<void()>& fn) {
  std::vector<double> ts;
  ts.reserve(size_t(reps));
  for (int i = 0; i < reps; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    auto t1 = std::chrono::steady_clock::now();
    ts.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ts.begin(), ts.end());
  return ts[ts.size() / 2];
}

int cmd_timing(uint64_t seed) {
  Rng rng(seed);
  Config cfg;
  cfg.validate();
  std::vector<std::vector<std::string>> rows;

  {
    FsqConfig f = cfg.fsq;
    std::vector<float> x(size_t(f.latent_dim), 0.0f);
    double ms = bench_ms(9, [&] {
      for (int i = 0; i < 10000; ++i) {
        for (auto& v : x) v = float(rng.uniform(-2.0, 2.0));
        fsq_quantize(x, f);
      }
    });
    rows.push_back({"fsq quantize", "10000 x dim " + std::to_string(f.latent_dim), fmt_g(ms)});
  }
  {
    WorldModel<float> wm(2, 2, cfg.context.z_dim, cfg.fsq, cfg.wm, rng.fork(1));
    Tensor<float> s({512, 2});
    for (auto& v : s.data) v = float(rng.uniform(-1.0, 1.0));
    double ms = bench_ms(9, [&] { wm.encode_plain(s, false); });
    rows.push_back({"state encoder", "batch 512", fmt_g(ms)});
  }
  {
    ContextEncoder<float> enc(2, 2, cfg.context, rng.fork(2));
    ContextBatch<float> ctx({512, context_input_dim(2, 2)});
    for (auto& v : ctx.data) v = float(rng.uniform(-1.0, 1.0));
    double ms = bench_ms(9, [&] { enc.encode_plain(ctx); });
    rows.push_back({"context encoder", "batch 512", fmt_g(ms)});
  }
  {
    WorldModel<float> wm(2, 2, cfg.context.z_dim, cfg.fsq, cfg.wm, rng.fork(3));
    IqlAgent<float> agent(cfg.fsq.latent_dim, cfg.context.z_dim, 2, cfg.iql, rng.fork(4));
    const int64_t b = 256;
    Tensor<float> s({b, 2}), sp({b, 2});
    for (auto& v : s.data) v = float(rng.uniform(-1.0, 1.0));
    for (auto& v : sp.data) v = float(rng.uniform(-1.0, 1.0));
    IqlBatch<float> batch;
    batch.latent = wm.encode_plain(s, false).values;
    batch.latent_next = wm.encode_plain(sp, false).values;
    batch.z = Tensor<float>({b, cfg.context.z_dim});
    batch.a = Tensor<float>({b, 2});
    batch.r = Tensor<float>({b, 1});
    batch.done = Tensor<float>({b, 1});
    for (auto& v : batch.z.data) v = float(rng.uniform(-1.0, 1.0));
    for (auto& v : batch.a.data) v = float(rng.uniform(-1.0, 1.0));
    for (auto& v : batch.r.data) v = float(rng.normal());
    for (auto& v : batch.done.data) v = rng.uniform() < 0.05 ? 1.0f : 0.0f;
    double ms = bench_ms(9, [&] { agent.update(batch); });
    rows.push_back({"iql update", "batch " + std::to_string(b), fmt_g(ms)});
  }
  {
    FuzzConfig f;
    f.instances = 8;
    double ms = bench_ms(5, [&] { fuzz_certificates(f, seed); }) / double(f.instances);
    rows.push_back({"bound certificate", "8 states, 3 actions, 5 codes", fmt_g(ms)});
  }

  print_table({"component", "work", "ms"}, rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contextual discrete world models: offline meta-RL toolkit"};
  app.require_subcommand(1);

  std::string cfg_path, family, data, out, model_path;
  std::string split = "test_id", metrics_split = "train";
  std::string protocol = "both", weighting = "uniform";
  uint64_t seed = 1;
  int k = -1, episodes = 0, reps_per_task = 16, probe_batch = 256;
  FuzzConfig fuzz;

  auto* gen = app.add_subcommand("gen-data", "generate an offline task dataset");
  gen->add_option("--config", cfg_path, "configuration file (ini)");
  gen->add_option("--family", family, "environment family override");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seed, "rng seed")->capture_default_str();

  auto* tr = app.add_subcommand("train", "train the world model, encoder and policy");
  tr->add_option("--config", cfg_path, "configuration file (ini)");
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--out", out, "output directory")->required();
  tr->add_option("--seed", seed, "rng seed")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "run the zero-shot and few-shot protocols");
  ev->add_option("--model", model_path, "model checkpoint")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--split", split, "train | test_id | test_ood")->capture_default_str();
  ev->add_option("--protocol", protocol, "zero | few | both")->capture_default_str();
  ev->add_option("--k", k, "adaptation episodes (default: model config)");
  ev->add_option("--episodes", episodes, "evaluation episodes per task (default: model config)");
  ev->add_option("--out", out, "episode results csv")->required();
  ev->add_option("--seed", seed, "rng seed")->capture_default_str();

  auto* me = app.add_subcommand("metrics", "representation diagnostics for a trained model");
  me->add_option("--model", model_path, "model checkpoint")->required();
  me->add_option("--data", data, "dataset directory")->required();
  me->add_option("--split", metrics_split, "train | test_id | test_ood")->capture_default_str();
  me->add_option("--reps-per-task", reps_per_task, "context draws per task")
      ->capture_default_str();
  me->add_option("--probe-batch", probe_batch, "states in the activation probe")
      ->capture_default_str();
  me->add_option("--out", out, "diagnostics csv")->required();
  me->add_option("--seed", seed, "rng seed")->capture_default_str();

  auto* bc = app.add_subcommand("bound-check", "certify the value-error bounds on random MDPs");
  bc->add_option("--instances", fuzz.instances, "fuzzed instances")->capture_default_str();
  bc->add_option("--max-states", fuzz.max_states, "max original states")->capture_default_str();
  bc->add_option("--max-actions", fuzz.max_actions, "max actions")->capture_default_str();
  bc->add_option("--max-codes", fuzz.max_codes, "max latent codes")->capture_default_str();
  bc->add_option("--gamma-lo", fuzz.gamma_lo, "discount lower bound")->capture_default_str();
  bc->add_option("--gamma-hi", fuzz.gamma_hi, "discount upper bound")->capture_default_str();
  bc->add_option("--weighting", fuzz.weighting, "preimage weighting: uniform | random")
      ->capture_default_str();
  bc->add_option("--out", out, "certificates csv (optional)");
  bc->add_option("--seed", seed, "rng seed")->capture_default_str();

  auto* tm = app.add_subcommand("timing", "micro-benchmarks of the core operations");
  tm->add_option("--seed", seed, "rng seed")->capture_default_str();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_data(cfg_path, family, out, seed);
    if (tr->parsed()) return cmd_train(cfg_path, data, out, seed);
    if (ev->parsed()) return cmd_eval(model_path, data, split, protocol, k, episodes, out, seed);
    if (me->parsed())
      return cmd_metrics(model_path, data, metrics_split, out, reps_per_task, probe_batch, seed);
    if (bc->parsed()) return cmd_bound_check(fuzz, out, seed);
    if (tm->parsed()) return cmd_timing(seed);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "ctxwm: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
