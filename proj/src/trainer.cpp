#include "dyndepth/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "dyndepth/model_io.hpp"
#include "dyndepth/optimizer.hpp"
#include "dyndepth/param_utils.hpp"
#include "json.hpp"

namespace dyndepth {

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kPredictor: return "predictor";
    case Phase::kPpo: return "ppo";
    case Phase::kBackbone: return "backbone";
  }
  return "?";
}

EpochPlan schedule(int epoch) {
  if (epoch < 0) throw ParameterError("schedule: negative epoch");
  EpochPlan p;
  p.epoch = epoch;
  p.second = epoch % 3 == 0 ? Phase::kPpo : Phase::kBackbone;
  return p;
}

double lr_at(int epoch, double base, int period) {
  if (epoch < 0 || period < 1) throw ParameterError("lr_at: bad epoch or period");
  return base * std::pow(0.5, epoch / period);
}

namespace {

/// Tracks the patience counter; shared by training and early_stop_epoch.
struct StopRule {
  int patience;
  double min_delta;
  double best = std::numeric_limits<double>::infinity();
  int wait = 0;

  /// Returns true when `loss` counts as an improvement.
  bool observe(double loss) {
    if (loss < best - min_delta) {
      best = loss;
      wait = 0;
      return true;
    }
    ++wait;
    return false;
  }
  bool exhausted() const { return wait >= patience; }
};

}  // namespace

int early_stop_epoch(std::span<const double> losses, int patience, double min_delta) {
  if (losses.empty()) throw InputError("early_stop_epoch: no losses");
  StopRule rule{patience, min_delta};
  for (std::size_t e = 0; e < losses.size(); ++e) {
    rule.observe(losses[e]);
    if (rule.exhausted()) return static_cast<int>(e);
  }
  return static_cast<int>(losses.size()) - 1;
}

void TrainConfig::validate(std::size_t train_size) const {
  if (epochs < 1 || batch_size < 1 || patience < 1 || lr_halving_period < 1) {
    throw ParameterError("train config: epochs, batch size, patience and halving period must be positive");
  }
  if (static_cast<std::size_t>(batch_size) > train_size) {
    throw ParameterError("train config: batch size " + std::to_string(batch_size) +
                         " exceeds the " + std::to_string(train_size) + " training records");
  }
  if (!(base_lr > 0) || !(kd_temperature > 0) || kd_weight < 0 || kd_weight > 1) {
    throw ParameterError("train config: need lr > 0, temperature > 0, kd weight in [0, 1]");
  }
  if (!(oracle_refresh_fraction > 0 && oracle_refresh_fraction <= 1)) {
    throw ParameterError("train config: oracle refresh fraction must be in (0, 1]");
  }
  if (explore_start < 0 || explore_start > 1 || explore_floor < 0 || explore_decay <= 0) {
    throw ParameterError("train config: bad exploration schedule");
  }
  backbone.validate();
}

// ---------------------------------------------------------------------------
// Features, logits and evaluation

SampleFeatures compute_features(const ExtractorParams& extractor, std::span<const Record> records) {
  SampleFeatures f;
  const Index n = static_cast<Index>(records.size());
  const auto& ch = extractor.config.channels;
  f.pooled1.resize(n, 2 * ch[0]);
  f.pooled2.resize(n, 2 * ch[1]);
  f.pooled3.resize(n, 2 * ch[2]);
  for (Index i = 0; i < n; ++i) {
    const auto m = extract(records[i].tokens, extractor);
    f.pooled1.row(i) = m.pooled1.transpose();
    f.pooled2.row(i) = m.pooled2.transpose();
    f.pooled3.row(i) = m.pooled3.transpose();
  }
  return f;
}

std::vector<Matrix> all_exit_logits(const BackboneParams& params, std::span<const Record> records) {
  const int L = params.config.num_layers;
  const Index n = static_cast<Index>(records.size());
  std::vector<Matrix> out(L, Matrix(n, params.config.num_classes));
  constexpr Index kChunk = 256;
  std::vector<TokenSequence> chunk;
  for (Index start = 0; start < n; start += kChunk) {
    const Index end = std::min(n, start + kChunk);
    chunk.clear();
    for (Index i = start; i < end; ++i) chunk.push_back(records[i].tokens);
    const auto fwd = forward_batch(params, chunk, L, false);
    for (int e = 0; e < L; ++e) out[e].middleRows(start, end - start) = fwd.exit_logits[e];
  }
  return out;
}

namespace {

std::span<const double> row_span(const Matrix& m, Index i) {
  return {m.row(i).data(), static_cast<std::size_t>(m.cols())};
}

int argmax_row(const Matrix& m, Index i) {
  Index best;
  m.row(i).maxCoeff(&best);
  return static_cast<int>(best);
}

std::vector<Vector> exits_of(const std::vector<Matrix>& logits, Index i) {
  std::vector<Vector> v;
  v.reserve(logits.size());
  for (const auto& m : logits) v.push_back(m.row(i).transpose());
  return v;
}

EvalSummary evaluate_with(const DynamicDepthModel& model, std::span<const Record> records,
                          const SampleFeatures& feats, const std::vector<Matrix>& logits,
                          const EvalOptions& options) {
  if (records.empty()) throw InputError("evaluate: no records");
  const int L = model.backbone.config.num_layers;
  const double full_flops = static_cast<double>(flops_of_depth(model.backbone, L));
  Rng rng = SeedTree(options.seed).stream("evaluation");
  EvalSummary s;
  double loss = 0.0, flops = 0.0, depth = 0.0;
  long correct = 0, full_correct = 0, alpha_hits = 0;
  for (Index i = 0; i < static_cast<Index>(records.size()); ++i) {
    const Record& r = records[i];
    Decision d;
    if (model.dynamic) {
      d.l_pred = predict_depth(model.predictor, row_span(feats.pooled1, i), L).l_pred;
      const auto traj = select_depth(model.policy, row_span(feats.pooled2, i), d.l_pred,
                                     options.epsilon, rng, options.greedy);
      d.depth = traj.chosen_depth;
      d.explored = traj.any_explored();
    } else {
      d.l_pred = L;
      d.depth = L;
    }
    d.correct = argmax_row(logits[d.depth - 1], i) == r.label;
    full_correct += argmax_row(logits[L - 1], i) == r.label;
    d.flops = flops_of_depth(model.backbone, d.depth);
    if (options.with_oracle) {
      d.l_opt = oracle_l_opt_from_logits(exits_of(logits, i), r.label, options.oracle_slack);
      alpha_hits += d.l_pred == d.l_opt;
    }
    if (model.dynamic) {
      double sample_loss = 0.0;
      for (int e = 0; e < L; ++e) sample_loss += cross_entropy(logits[e].row(i).transpose(), r.label);
      loss += sample_loss / L;
    } else {
      loss += cross_entropy(logits[L - 1].row(i).transpose(), r.label);
    }
    correct += d.correct;
    flops += static_cast<double>(d.flops);
    depth += d.depth;
    auto& hist = s.depth_histogram[difficulty_name(r.difficulty)];
    if (hist.empty()) hist.assign(L, 0);
    ++hist[d.depth - 1];
    s.decisions.push_back(d);
  }
  const double n = static_cast<double>(records.size());
  s.accuracy = correct / n;
  s.full_depth_accuracy = full_correct / n;
  s.mean_depth = depth / n;
  s.mean_flops = flops / n;
  s.flops_ratio = s.mean_flops / full_flops;
  s.alpha = options.with_oracle ? alpha_hits / n : 0.0;
  s.loss = loss / n;
  return s;
}

}  // namespace

EvalSummary evaluate(const DynamicDepthModel& model, std::span<const Record> records,
                     const EvalOptions& options) {
  const auto feats = compute_features(model.extractor, records);
  return evaluate_with(model, records, feats, all_exit_logits(model.backbone, records), options);
}

std::vector<LiveEpisode> live_episodes(const DynamicDepthModel& model, const EvalSummary& summary) {
  std::vector<LiveEpisode> out;
  for (const auto& d : summary.decisions) {
    if (d.l_opt < 1) throw InputError("live_episodes: evaluation ran without oracle depths");
    LiveEpisode e;
    e.l_opt = d.l_opt;
    e.l_pred = d.l_pred;
    e.chosen_depth = d.depth;
    e.explored = d.explored;
    e.flops = static_cast<double>(d.flops);
    e.flops_opt = static_cast<double>(flops_of_depth(model.backbone, d.l_opt));
    out.push_back(e);
  }
  return out;
}

std::string EpochReport::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["phase"] = phase;
  j["lr"] = lr;
  j["explore_epsilon"] = explore_epsilon;
  j["oracle_refreshed"] = oracle_refreshed;
  j["mean_oracle_depth"] = mean_oracle_depth;
  j["predictor_mae"] = predictor_mae;
  j["alpha"] = alpha;
  j["train_loss"] = train_loss;
  j["reward_mean"] = reward_mean;
  j["rollout_mean_depth"] = rollout_mean_depth;
  j["ppo_clip_fraction"] = ppo_clip_fraction;
  j["val_loss"] = val_loss;
  j["val_accuracy"] = val_accuracy;
  j["full_depth_accuracy"] = full_depth_accuracy;
  j["mean_depth"] = mean_depth;
  j["mean_flops"] = mean_flops;
  j["flops_ratio"] = flops_ratio;
  j["improved"] = improved;
  return j.dump();
}

std::uint64_t predictor_hash(const GbtModel& model) {
  struct Tables {
    Matrix nodes, meta;
    std::vector<std::pair<std::string, const Matrix*>> tensors() const {
      return {{"nodes", &nodes}, {"meta", &meta}};
    }
  } t{model.node_table(), model.meta()};
  return parameter_hash(t);
}

void save_model(const std::filesystem::path& dir, const DynamicDepthModel& model) {
  Checkpoint ckpt;
  ckpt.config["model.dynamic"] = model.dynamic ? "1" : "0";
  store(ckpt, model.extractor);
  store(ckpt, model.backbone);
  store(ckpt, model.policy);
  if (model.dynamic) {
    store(ckpt, model.predictor);
    store(ckpt, model.teacher);
  }
  save_checkpoint(dir, ckpt);
}

DynamicDepthModel load_model(const std::filesystem::path& dir) {
  const Checkpoint ckpt = load_checkpoint(dir);
  DynamicDepthModel m;
  const auto& flag = ckpt.setting("model.dynamic");
  if (flag != "0" && flag != "1") throw InputError("checkpoint " + dir.string() + ": bad model.dynamic '" + flag + "'");
  m.dynamic = flag == "1";
  m.extractor = load_extractor(ckpt);
  m.backbone = load_backbone(ckpt);
  m.policy = load_policy(ckpt);
  if (m.dynamic) {
    m.predictor = load_gbt(ckpt);
    m.teacher = load_ridge(ckpt);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::array<std::uint64_t, 3> hashes(const DynamicDepthModel& m) {
  return {parameter_hash(m.backbone), parameter_hash(m.policy), predictor_hash(m.predictor)};
}

void check_frozen(const StageEvent& ev, std::initializer_list<int> frozen) {
  static const char* names[] = {"backbone", "policy", "predictor"};
  for (int k : frozen) {
    if (ev.before[k] != ev.after[k]) {
      throw EvaluationError(std::string("freeze contract violated: ") + phase_name(ev.phase) +
                            " stage of epoch " + std::to_string(ev.epoch) + " changed the " +
                            names[k]);
    }
  }
}

class Trainer {
 public:
  Trainer(const Split& data, const TrainConfig& cfg, const TrainHooks& hooks)
      : data_(data), cfg_(cfg), hooks_(hooks), root_(cfg.seed) {}

  TrainResult run() {
    if (data_.train.empty() || data_.val.empty()) throw InputError("train: empty train or validation split");
    cfg_.validate(data_.train.size());
    init_model();
    const int L = cfg_.backbone.num_layers;
    std::ofstream report_file;
    if (!hooks_.report_path.empty()) {
      report_file.open(hooks_.report_path);
      if (!report_file) throw IoError("cannot write training report " + hooks_.report_path);
    }

    TrainResult result;
    StopRule rule{cfg_.patience, cfg_.min_delta};
    double snapshot_loss = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const auto start = Clock::now();
      const EpochPlan plan = schedule(epoch);
      const SeedTree es = root_.child("epoch" + std::to_string(epoch));
      EpochReport rep;
      rep.epoch = epoch;
      rep.phase = phase_name(plan.second);
      rep.lr = lr_at(epoch, cfg_.base_lr, cfg_.lr_halving_period);
      rep.explore_epsilon = std::max(cfg_.explore_floor, cfg_.explore_start * std::pow(cfg_.explore_decay, epoch));

      if (cfg_.dynamic) predictor_stage(epoch, es, rep);
      if (plan.second == Phase::kPpo) {
        if (cfg_.dynamic) ppo_stage(epoch, es, rep);
      } else {
        backbone_stage(epoch, es, rep);
      }

      EvalOptions eo;
      eo.seed = es.derive("validation");
      eo.oracle_slack = cfg_.oracle_slack;
      const auto val = evaluate_with(model_, data_.val, val_feats_, all_exit_logits(model_.backbone, data_.val), eo);
      if (!std::isfinite(val.loss)) {
        throw EvaluationError("non-finite validation loss after epoch " + std::to_string(epoch) +
                              " (" + rep.phase + " stage)");
      }
      rep.val_loss = val.loss;
      rep.val_accuracy = val.accuracy;
      rep.full_depth_accuracy = val.full_depth_accuracy;
      rep.mean_depth = val.mean_depth;
      rep.mean_flops = val.mean_flops;
      rep.flops_ratio = val.flops_ratio;
      rep.alpha = val.alpha;
      rep.improved = rule.observe(val.loss);
      if (val.loss <= snapshot_loss) {
        snapshot_loss = val.loss;
        result.model = model_;
        result.best_epoch = epoch;
      }
      result.reports.push_back(rep);
      if (report_file) report_file << rep.to_json() << "\n" << std::flush;
      if (hooks_.log) {
        *hooks_.log << "epoch " << epoch << " " << rep.phase << ": val loss " << rep.val_loss
                    << ", acc " << rep.val_accuracy << " (full " << rep.full_depth_accuracy
                    << "), depth " << rep.mean_depth << "/" << L << ", alpha " << rep.alpha << " ["
                    << seconds_since(start) << " s]" << std::endl;
      }
      if (cfg_.stop_early && rule.exhausted()) {
        result.stopped_early = true;
        break;
      }
    }
    return result;
  }

  DynamicDepthModel fine_tune(const DynamicDepthModel& model, int epochs) {
    if (data_.train.empty()) throw InputError("fine_tune_backbone: empty training split");
    if (epochs < 1) throw ParameterError("fine_tune_backbone: epochs must be positive");
    cfg_.validate(data_.train.size());
    model_ = model;
    cfg_.backbone = model.backbone.config;
    cfg_.dynamic = model.dynamic;
    for (const auto& r : data_.train) labels_.push_back(r.label);
    for (int epoch = 0; epoch < epochs; ++epoch) {
      EpochReport rep;
      rep.lr = lr_at(epoch, cfg_.base_lr, cfg_.lr_halving_period);
      backbone_stage(epoch, root_.child("fine-tune" + std::to_string(epoch)), rep);
      if (hooks_.log) *hooks_.log << "fine-tune epoch " << epoch << ": train loss " << rep.train_loss << std::endl;
    }
    return model_;
  }

 private:
  void init_model() {
    Rng init = root_.stream("init");
    ExtractorConfig ec = cfg_.extractor;
    ec.vocab_size = cfg_.backbone.vocab_size;
    model_.dynamic = cfg_.dynamic;
    model_.extractor = ExtractorParams::init(ec, init);
    model_.backbone = BackboneParams::init(cfg_.backbone, init, cfg_.init_std);
    PolicyConfig pc;
    pc.feature_dim = 2 * ec.channels[1];
    pc.hidden = cfg_.policy_hidden;
    pc.num_layers = cfg_.backbone.num_layers;
    model_.policy = PolicyParams::init(pc, init);
    train_feats_ = compute_features(model_.extractor, data_.train);
    val_feats_ = compute_features(model_.extractor, data_.val);
    for (const auto& r : data_.train) labels_.push_back(r.label);
    l_opt_.assign(data_.train.size(), cfg_.backbone.num_layers);
  }

  StageEvent begin(int epoch, Phase phase) const {
    StageEvent ev;
    ev.epoch = epoch;
    ev.phase = phase;
    ev.before = hashes(model_);
    return ev;
  }

  void end(StageEvent& ev, std::initializer_list<int> frozen) const {
    ev.after = hashes(model_);
    if (hooks_.on_stage) hooks_.on_stage(ev);
    check_frozen(ev, frozen);
  }

  void predictor_stage(int epoch, const SeedTree& es, EpochReport& rep) {
    auto ev = begin(epoch, Phase::kPredictor);
    const std::size_t n = data_.train.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::size_t count = n;
    if (epoch > 0) {
      // Labels drift as the backbone trains; refresh a random subset.
      count = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg_.oracle_refresh_fraction * n)));
      Rng rng = es.stream("oracle");
      for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng() % (n - i)]);
      idx.resize(count);
      std::sort(idx.begin(), idx.end());
    }
    std::vector<Record> subset;
    for (auto i : idx) subset.push_back(data_.train[i]);
    const auto logits = all_exit_logits(model_.backbone, subset);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      l_opt_[idx[k]] = oracle_l_opt_from_logits(exits_of(logits, static_cast<Index>(k)), subset[k].label,
                                                cfg_.oracle_slack);
    }
    rep.oracle_refreshed = static_cast<long>(count);

    std::vector<double> y(l_opt_.begin(), l_opt_.end());
    rep.mean_oracle_depth = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    model_.teacher = train_h3_teacher(train_feats_.pooled3, y, cfg_.ridge_lambda);
    std::vector<double> targets(n);
    for (std::size_t i = 0; i < n; ++i) targets[i] = model_.teacher.predict(row_span(train_feats_.pooled3, i));
    GbtReport gr;
    model_.predictor = train_predictor(train_feats_.pooled1, y, targets, cfg_.predictor, &gr);
    if (!std::isfinite(gr.train_mae)) {
      throw EvaluationError("non-finite predictor loss at epoch " + std::to_string(epoch));
    }
    rep.predictor_mae = gr.train_mae;
    end(ev, {0, 1});
  }

  void ppo_stage(int epoch, const SeedTree& es, EpochReport& rep) {
    auto ev = begin(epoch, Phase::kPpo);
    const int L = cfg_.backbone.num_layers;
    const std::size_t n = data_.train.size();
    const auto logits = all_exit_logits(model_.backbone, data_.train);
    std::vector<int> l_pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      l_pred[i] = predict_depth(model_.predictor, row_span(train_feats_.pooled1, i), L).l_pred;
    }
    Rng rng = es.stream("rollout");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    double reward = 0.0, depth = 0.0, clip = 0.0;
    int updates = 0;
    std::vector<Trajectory> batch;
    for (std::size_t start = 0; start < n; start += cfg_.batch_size) {
      batch.clear();
      for (std::size_t k = start; k < std::min(n, start + cfg_.batch_size); ++k) {
        const std::size_t i = order[k];
        auto tr = select_depth(model_.policy, row_span(train_feats_.pooled2, i), l_pred[i],
                               rep.explore_epsilon, rng);
        const bool correct = argmax_row(logits[tr.chosen_depth - 1], i) == labels_[i];
        reward += hierarchical_reward(tr, correct, cfg_.reward).total;
        depth += tr.chosen_depth;
        compute_gae(tr, cfg_.ppo.gamma, cfg_.ppo.gae_lambda);
        batch.push_back(std::move(tr));
      }
      const auto stats = ppo_update(model_.policy, policy_opt_, batch, cfg_.ppo);
      for (const auto& s : stats) {
        if (!std::isfinite(s.total_loss)) {
          throw EvaluationError("non-finite PPO loss at epoch " + std::to_string(epoch) + ", update " +
                                std::to_string(updates));
        }
      }
      clip += stats.back().clip_fraction;
      ++updates;
    }
    rep.reward_mean = reward / static_cast<double>(n);
    rep.rollout_mean_depth = depth / static_cast<double>(n);
    rep.ppo_clip_fraction = clip / updates;
    end(ev, {0, 2});
  }

  void backbone_stage(int epoch, const SeedTree& es, EpochReport& rep) {
    auto ev = begin(epoch, Phase::kBackbone);
    const int L = cfg_.backbone.num_layers;
    const std::size_t n = data_.train.size();
    MultiExitObjective obj;
    obj.temperature = cfg_.kd_temperature;
    Matrix teacher;
    if (cfg_.dynamic) {
      for (int e = 1; e <= L; ++e) obj.exits.push_back(e);
      obj.kd_weight = cfg_.kd_weight;
      // The teacher is the full-depth exit of the model as it enters this stage.
      if (obj.kd_weight > 0) teacher = all_exit_logits(model_.backbone, data_.train)[L - 1];
    } else {
      obj.exits = {L};
      obj.kd_weight = 0.0;
    }
    Rng rng = es.stream("data");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    auto grads = BackboneParams::zeros_like(model_.backbone);
    std::vector<TokenSequence> tokens;
    std::vector<int> labels;
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < n; start += cfg_.batch_size) {
      const std::size_t end_i = std::min(n, start + cfg_.batch_size);
      tokens.clear();
      labels.clear();
      Matrix t(obj.kd_weight > 0 ? end_i - start : 0, cfg_.backbone.num_classes);
      for (std::size_t k = start; k < end_i; ++k) {
        tokens.push_back(data_.train[order[k]].tokens);
        labels.push_back(labels_[order[k]]);
        if (t.rows() > 0) t.row(k - start) = teacher.row(order[k]);
      }
      zero_tensors(grads);
      const double loss = multi_exit_loss(model_.backbone, tokens, labels, t, obj, &grads);
      if (!std::isfinite(loss) || !all_tensors_finite(grads)) {
        throw EvaluationError("non-finite loss in backbone stage at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(steps));
      }
      backbone_opt_.step(model_.backbone, grads, rep.lr);
      loss_sum += loss;
      ++steps;
    }
    rep.train_loss = loss_sum / steps;
    end(ev, {1, 2});
  }

  const Split& data_;
  TrainConfig cfg_;
  const TrainHooks& hooks_;
  SeedTree root_;
  DynamicDepthModel model_;
  SampleFeatures train_feats_, val_feats_;
  std::vector<int> labels_;
  std::vector<int> l_opt_;
  Adam backbone_opt_, policy_opt_;
};

}  // namespace

TrainResult train(const Split& data, const TrainConfig& config, const TrainHooks& hooks) {
  return Trainer(data, config, hooks).run();
}

DynamicDepthModel fine_tune_backbone(const DynamicDepthModel& model, const Split& data,
                                     const TrainConfig& config, int epochs) {
  const TrainHooks hooks;
  return Trainer(data, config, hooks).fine_tune(model, epochs);
}

}  // namespace dyndepth
