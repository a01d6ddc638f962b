// Command-line front end: data generation, training, evaluation, bound
// simulation, engine benchmarks and depth reports.

#include <sys/resource.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "dyndepth/exec_engine.hpp"
#include "dyndepth/theory_lab.hpp"
#include "dyndepth/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dyndepth;

namespace {

void require_finite(const std::string& name, double v) {
  if (!std::isfinite(v)) throw EvaluationError("metric " + name + " is not finite");
}

long peak_rss_kib() {
  rusage u{};
  getrusage(RUSAGE_SELF, &u);
  return u.ru_maxrss;
}

// Reads `key` from `j` into `out` when present.
template <class T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw InputError("config: unknown key '" + k + "' in " + where);
  }
}

TrainConfig parse_train_config(const json& j) {
  TrainConfig c;
  reject_unknown(j,
                 {"epochs", "batch_size", "base_lr", "lr_halving_period", "patience", "min_delta",
                  "stop_early", "kd_temperature", "kd_weight", "init_std", "ridge_lambda",
                  "oracle_slack", "oracle_refresh_fraction", "explore_start", "explore_decay",
                  "explore_floor", "policy_hidden", "seed", "dynamic", "backbone", "predictor", "ppo",
                  "reward"},
                 "top level");
  take(j, "epochs", c.epochs);
  take(j, "batch_size", c.batch_size);
  take(j, "base_lr", c.base_lr);
  take(j, "lr_halving_period", c.lr_halving_period);
  take(j, "patience", c.patience);
  take(j, "min_delta", c.min_delta);
  take(j, "stop_early", c.stop_early);
  take(j, "kd_temperature", c.kd_temperature);
  take(j, "kd_weight", c.kd_weight);
  take(j, "init_std", c.init_std);
  take(j, "ridge_lambda", c.ridge_lambda);
  take(j, "oracle_slack", c.oracle_slack);
  take(j, "oracle_refresh_fraction", c.oracle_refresh_fraction);
  take(j, "explore_start", c.explore_start);
  take(j, "explore_decay", c.explore_decay);
  take(j, "explore_floor", c.explore_floor);
  take(j, "policy_hidden", c.policy_hidden);
  take(j, "seed", c.seed);
  take(j, "dynamic", c.dynamic);
  if (j.contains("backbone")) {
    const auto& b = j["backbone"];
    reject_unknown(b, {"num_layers", "hidden", "heads", "ffn_mult"}, "backbone");
    take(b, "num_layers", c.backbone.num_layers);
    take(b, "hidden", c.backbone.hidden);
    take(b, "heads", c.backbone.heads);
    take(b, "ffn_mult", c.backbone.ffn_mult);
  }
  if (j.contains("predictor")) {
    const auto& p = j["predictor"];
    reject_unknown(p, {"num_trees", "max_depth", "learning_rate", "distill_lambda"}, "predictor");
    take(p, "num_trees", c.predictor.num_trees);
    take(p, "max_depth", c.predictor.max_depth);
    take(p, "learning_rate", c.predictor.learning_rate);
    take(p, "distill_lambda", c.predictor.distill_lambda);
  }
  if (j.contains("ppo")) {
    const auto& p = j["ppo"];
    reject_unknown(p, {"clip", "gamma", "gae_lambda", "epochs", "lr", "entropy_coef"}, "ppo");
    take(p, "clip", c.ppo.clip);
    take(p, "gamma", c.ppo.gamma);
    take(p, "gae_lambda", c.ppo.gae_lambda);
    take(p, "epochs", c.ppo.epochs);
    take(p, "lr", c.ppo.lr);
    take(p, "entropy_coef", c.ppo.entropy_coef);
  }
  if (j.contains("reward")) {
    const auto& r = j["reward"];
    reject_unknown(r, {"accuracy", "compute", "smoothness"}, "reward");
    take(r, "accuracy", c.reward.accuracy);
    take(r, "compute", c.reward.compute);
    take(r, "smoothness", c.reward.smoothness);
  }
  return c;
}

json summary_json(const EvalSummary& s, const DynamicDepthModel& m) {
  const int L = m.backbone.config.num_layers;
  json j;
  j["records"] = s.decisions.size();
  j["accuracy"] = s.accuracy;
  j["full_depth_accuracy"] = s.full_depth_accuracy;
  j["mean_depth"] = s.mean_depth;
  j["num_layers"] = L;
  j["mean_flops"] = s.mean_flops;
  j["full_flops"] = flops_of_depth(m.backbone, L);
  j["flops_ratio"] = s.flops_ratio;
  j["alpha"] = s.alpha;
  j["loss"] = s.loss;
  j["depth_histogram"] = s.depth_histogram;
  return j;
}

void check_summary(const EvalSummary& s) {
  require_finite("accuracy", s.accuracy);
  require_finite("mean_depth", s.mean_depth);
  require_finite("mean_flops", s.mean_flops);
  require_finite("flops_ratio", s.flops_ratio);
  require_finite("loss", s.loss);
}

void print_summary(std::ostream& out, const EvalSummary& s, const DynamicDepthModel& m) {
  const int L = m.backbone.config.num_layers;
  out << std::fixed << std::setprecision(4);
  out << "records:       " << s.decisions.size() << "\n";
  out << "accuracy:      " << s.accuracy << " (full depth " << s.full_depth_accuracy << ")\n";
  out << "mean depth:    " << s.mean_depth << " of " << L << "\n";
  out << std::setprecision(3);
  out << "mean FLOPs:    " << std::setprecision(0) << s.mean_flops << " (" << std::setprecision(3)
      << s.flops_ratio << " of full depth)\n";
  out << "peak memory:   " << peak_rss_kib() / 1024.0 << " MiB\n";
}

int cmd_gen_data(const DataGenConfig& cfg, const std::string& out) {
  const auto data = generate_dataset(cfg);
  save_dataset(out, data);
  std::cout << "wrote " << data.records.size() << " records to " << out << " (easy "
            << data.count(Difficulty::kEasy) << ", medium " << data.count(Difficulty::kMedium)
            << ", hard " << data.count(Difficulty::kHard) << ")\n"
            << "linear probe: easy " << data.probe.easy_accuracy << ", hard " << data.probe.hard_accuracy
            << "\n";
  return 0;
}

int cmd_train(const std::string& data_path, const std::string& config_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed, std::optional<int> epochs, bool baseline) {
  TrainConfig cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw IoError("cannot open config " + config_path);
    try {
      cfg = parse_train_config(json::parse(in));
    } catch (const json::exception& e) {
      throw InputError("config " + config_path + ": " + e.what());
    }
  }
  if (seed) cfg.seed = *seed;
  if (epochs) cfg.epochs = *epochs;
  if (baseline) cfg.dynamic = false;
  const auto data = load_dataset(data_path);
  cfg.backbone.vocab_size = data.config.vocab_size;
  cfg.backbone.num_classes = data.config.num_classes;
  cfg.backbone.max_seq_len = data.config.seq_len;
  const Split split = split_dataset(data);

  fs::create_directories(out_dir);
  TrainHooks hooks;
  hooks.report_path = (fs::path(out_dir) / "report.jsonl").string();
  std::ofstream log((fs::path(out_dir) / "hooks.log").string());
  if (!log) throw IoError("cannot write " + out_dir + "/hooks.log");
  hooks.log = &log;
  hooks.on_stage = [&](const StageEvent& e) {
    log << "stage " << phase_name(e.phase) << " epoch " << e.epoch << " hashes";
    for (int k = 0; k < 3; ++k) log << " " << std::hex << e.before[k] << "->" << e.after[k] << std::dec;
    log << "\n";
  };
  const auto result = train(split, cfg, hooks);
  save_model(fs::path(out_dir) / "model", result.model);

  const auto s = evaluate(result.model, split.val);
  check_summary(s);
  json j = summary_json(s, result.model);
  j["best_epoch"] = result.best_epoch;
  j["stopped_early"] = result.stopped_early;
  j["epochs_run"] = result.reports.size();
  std::ofstream((fs::path(out_dir) / "eval.json").string()) << j.dump(2) << "\n";
  std::cout << "trained " << result.reports.size() << " epochs, best epoch " << result.best_epoch << "\n";
  print_summary(std::cout, s, result.model);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path, bool val_only,
             const std::string& json_out) {
  const auto model = load_model(checkpoint);
  const auto data = load_dataset(data_path);
  std::vector<Record> records = val_only ? split_dataset(data).val : data.records;
  const auto s = evaluate(model, records);
  check_summary(s);
  print_summary(std::cout, s, model);
  if (!json_out.empty()) std::ofstream(json_out) << summary_json(s, model).dump(2) << "\n";
  return 0;
}

int cmd_simulate_bound(const BoundParams& p, long trials, std::uint64_t seed, bool uniform) {
  Rng rng(seed);
  const auto r = simulate_bound(p, trials, rng, uniform ? NonOptimalMode::kUniform : NonOptimalMode::kFullDepth);
  require_finite("mean", r.mean);
  json j = {{"alpha", r.alpha},           {"epsilon", r.epsilon},          {"p_explore", r.p_explore},
            {"trials", trials},           {"mean", r.mean},                {"sem", r.sem},
            {"bound_tight", r.bound_tight}, {"bound_loose", r.bound_loose}, {"satisfied", r.satisfied}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_bench_engine(const std::string& checkpoint, int executions, double capacity_factor, int concurrency,
                     std::uint64_t seed) {
  const auto model = load_model(checkpoint);
  auto params = std::make_shared<const BackboneParams>(model.backbone);
  const auto plans = compile_plans(params);
  const int L = params->config.num_layers;
  Rng rng(seed);
  std::vector<TokenSequence> inputs(64);
  for (auto& t : inputs) {
    t.resize(params->config.max_seq_len);
    for (auto& v : t) v = static_cast<int>(rng() % params->config.vocab_size);
  }

  double max_diff = 0.0;
  for (int l = 1; l <= L; ++l) {
    const auto eager = forward_batch(*params, std::span(inputs).first(8), l, false);
    for (int i = 0; i < 8; ++i) {
      const auto r = execute(plans[l - 1], inputs[i], nullptr);
      max_diff = std::max(max_diff, (r.logits.transpose() - eager.exit_logits[l - 1].row(i)).cwiseAbs().maxCoeff());
    }
  }

  std::vector<std::size_t> bytes;
  for (const auto& p : plans) bytes.push_back(p.total_bytes());
  const auto dist = DepthDistribution::uniform(L);
  const double working = expected_working_set(dist, bytes, concurrency);
  BufferPool pool(static_cast<std::size_t>(capacity_factor * working), bytes);
  pool.rebalance(dist);
  const double hit = simulate_hit_rate(pool, dist, executions, concurrency, rng);

  std::vector<int> depths(executions);
  for (auto& d : depths) d = 1 + static_cast<int>(rng() % L);
  const auto sw = measure_switch_overhead(plans, inputs, depths, 3, rng);
  require_finite("switch_ratio", sw.ratio);

  json j = {{"num_layers", L},
            {"plan_vs_eager_max_abs_diff", max_diff},
            {"working_set_bytes", working},
            {"pool_capacity_bytes", pool.capacity()},
            {"concurrency", concurrency},
            {"hit_rate", hit},
            {"random_order_ns", sw.random_ns},
            {"sorted_order_ns", sw.sorted_ns},
            {"switch_overhead_ratio", sw.ratio}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const fs::path path = fs::path(run_dir) / "eval.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + " is malformed: " + e.what());
  }
  const int L = j.at("num_layers");
  const auto hist = j.at("depth_histogram").get<std::map<std::string, std::vector<long>>>();
  json counts;
  std::cout << std::left << std::setw(8) << "depth";
  for (const auto& [name, h] : hist) std::cout << std::right << std::setw(8) << name;
  std::cout << "\n";
  for (int l = 1; l <= L; ++l) {
    std::cout << std::left << std::setw(8) << l;
    for (const auto& [name, h] : hist) {
      if (static_cast<int>(h.size()) != L) throw InputError("histogram '" + name + "' has the wrong length");
      std::cout << std::right << std::setw(8) << h[l - 1];
    }
    std::cout << "\n";
  }
  for (const auto& [name, h] : hist) {
    long total = 0;
    double sum = 0.0;
    for (int l = 1; l <= L; ++l) {
      total += h[l - 1];
      sum += static_cast<double>(l) * h[l - 1];
    }
    const double mean = total > 0 ? sum / total : 0.0;
    require_finite("mean depth of " + name, mean);
    counts[name] = {{"counts", h}, {"total", total}, {"mean_depth", mean}};
  }
  std::cout << counts.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dyndepth: dynamic-depth sequence classifier"};
  app.require_subcommand(1);

  DataGenConfig gen;
  std::string gen_out;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic easy/hard dataset");
  g->add_option("--out", gen_out, "Output JSONL file")->required();
  g->add_option("--n", gen.n, "Number of records");
  g->add_option("--vocab", gen.vocab_size, "Vocabulary size");
  g->add_option("--classes", gen.num_classes, "Number of classes");
  g->add_option("--seq-len", gen.seq_len, "Sequence length");
  g->add_option("--easy", gen.easy_fraction, "Fraction of easy records");
  g->add_option("--medium", gen.medium_fraction, "Fraction of medium records");
  g->add_option("--seed", gen.seed, "Seed");

  std::string data_path, config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  bool baseline = false;
  auto* t = app.add_subcommand("train", "Train a model and write checkpoint, reports and hooks.log");
  t->add_option("--data", data_path, "Dataset JSONL")->required();
  t->add_option("--config", config_path, "Training config JSON");
  t->add_option("--out", out_dir, "Run directory")->required();
  t->add_option("--seed", seed, "Seed (overrides the config)");
  t->add_option("--epochs", epochs, "Epochs (overrides the config)");
  t->add_flag("--baseline", baseline, "Train the full-depth baseline");

  std::string checkpoint, json_out;
  bool val_only = false;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  e->add_option("--data", data_path, "Dataset JSONL")->required();
  e->add_flag("--val-only", val_only, "Evaluate the validation split only");
  e->add_option("--json", json_out, "Also write the summary as JSON");

  BoundParams bp;
  bp.flops_opt = 6.0;
  bp.flops_full = 12.0;
  long trials = 100000;
  std::uint64_t sim_seed = 1;
  bool uniform = false;
  auto* s = app.add_subcommand("simulate-bound", "Monte Carlo check of the expected-FLOPs bounds");
  s->add_option("--alpha", bp.alpha, "Predictor accuracy")->required();
  s->add_option("--epsilon", bp.epsilon, "Exploration rate")->required();
  s->add_option("--p-explore", bp.p_explore, "P(l_opt | exploring)");
  s->add_option("--flops-opt", bp.flops_opt, "FLOPs at the optimal depth");
  s->add_option("--flops-full", bp.flops_full, "FLOPs at full depth");
  s->add_option("--trials", trials, "Trials");
  s->add_option("--seed", sim_seed, "Seed");
  s->add_flag("--uniform-misses", uniform, "Misses draw a uniform depth instead of full depth");

  int executions = 1000, concurrency = 8;
  double capacity = 1.5;
  std::uint64_t bench_seed = 1;
  auto* b = app.add_subcommand("bench-engine", "Plan equivalence, pool hit rate and switch overhead");
  b->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  b->add_option("--executions", executions, "Executions per measurement");
  b->add_option("--capacity", capacity, "Pool capacity as a multiple of the working set");
  b->add_option("--concurrency", concurrency, "Concurrent leases");
  b->add_option("--seed", bench_seed, "Seed");

  std::string run_dir;
  auto* r = app.add_subcommand("report", "Per-difficulty depth histograms of a run");
  r->add_option("--run-dir", run_dir, "Run directory written by train")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) return cmd_gen_data(gen, gen_out);
    if (*t) return cmd_train(data_path, config_path, out_dir, seed, epochs, baseline);
    if (*e) return cmd_eval(checkpoint, data_path, val_only, json_out);
    if (*s) return cmd_simulate_bound(bp, trials, sim_seed, uniform);
    if (*b) return cmd_bench_engine(checkpoint, executions, capacity, concurrency, bench_seed);
    if (*r) return cmd_report(run_dir);
  } catch (const IoError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 3;
  } catch (const VersionError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 4;
  } catch (const EvaluationError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 5;
  } catch (const std::invalid_argument& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
