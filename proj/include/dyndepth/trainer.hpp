#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dyndepth/backbone.hpp"
#include "dyndepth/controller.hpp"
#include "dyndepth/dataset.hpp"
#include "dyndepth/feature_extractor.hpp"
#include "dyndepth/predictor.hpp"
#include "dyndepth/theory_lab.hpp"

namespace dyndepth {

enum class Phase { kPredictor, kPpo, kBackbone };
const char* phase_name(Phase p);

struct EpochPlan {
  int epoch = 0;
  Phase first = Phase::kPredictor;
  Phase second = Phase::kPpo;
};

/// Predictor every epoch, then PPO when epoch % 3 == 0 and backbone otherwise.
EpochPlan schedule(int epoch);

/// base * 0.5^floor(epoch / period).
double lr_at(int epoch, double base = 1e-4, int period = 10);

/// Index of the epoch training stops after: the first epoch at which
/// `patience` consecutive epochs have passed without improving the best loss
/// by more than min_delta. Returns losses.size() - 1 when that never happens.
int early_stop_epoch(std::span<const double> losses, int patience, double min_delta);

struct TrainConfig {
  int epochs = 16;  // ends on a PPO stage so the controller sees the final backbone
  int batch_size = 32;
  double base_lr = 1e-4;
  int lr_halving_period = 10;
  int patience = 5;
  double min_delta = 1e-4;
  bool stop_early = true;
  double kd_temperature = 2.0;
  double kd_weight = 0.5;
  double init_std = 0.02;
  PpoConfig ppo;
  GbtConfig predictor;
  RewardConfig reward;
  double ridge_lambda = 1e-3;
  double oracle_slack = 0.1;
  double oracle_refresh_fraction = 0.25;
  double explore_start = 0.1;   // per-step epsilon at epoch 0
  double explore_decay = 0.95;  // multiplied in once per epoch
  double explore_floor = 0.01;
  BackboneConfig backbone;
  ExtractorConfig extractor;
  int policy_hidden = 128;
  std::uint64_t seed = 1;
  /// false trains the always-full-depth baseline: the same backbone epochs
  /// and learning rates, cross-entropy on the final exit only, no predictor
  /// or controller.
  bool dynamic = true;

  void validate(std::size_t train_size) const;
};

/// Everything needed to route and classify a sequence.
struct DynamicDepthModel {
  ExtractorParams extractor;
  BackboneParams backbone;
  GbtModel predictor;
  RidgeModel teacher;
  PolicyParams policy;
  bool dynamic = true;
};

struct SampleFeatures {
  Matrix pooled1;  // predictor input
  Matrix pooled2;  // controller input
  Matrix pooled3;  // teacher input
};

SampleFeatures compute_features(const ExtractorParams& extractor, std::span<const Record> records);

/// Exit logits for every record at every depth: result[e] is n x classes.
std::vector<Matrix> all_exit_logits(const BackboneParams& params, std::span<const Record> records);

struct Decision {
  int l_pred = 0;
  int depth = 0;
  bool explored = false;
  bool correct = false;
  int l_opt = 0;  // 0 when not computed
  std::int64_t flops = 0;
};

struct EvalOptions {
  double epsilon = 0.0;  // per-step exploration
  bool greedy = true;
  std::uint64_t seed = 1;
  bool with_oracle = true;
  double oracle_slack = 0.1;
};

struct EvalSummary {
  std::vector<Decision> decisions;
  double accuracy = 0.0;
  double full_depth_accuracy = 0.0;
  double mean_depth = 0.0;
  double mean_flops = 0.0;
  double flops_ratio = 0.0;  // mean FLOPs / FLOPs at depth L
  double alpha = 0.0;        // P(l_pred = l_opt)
  double loss = 0.0;         // mean cross-entropy over all exits (final exit for baselines)
  /// depth_histogram[difficulty][l - 1] = records of that difficulty run to depth l.
  std::map<std::string, std::vector<long>> depth_histogram;
};

EvalSummary evaluate(const DynamicDepthModel& model, std::span<const Record> records,
                     const EvalOptions& options = {});

/// Episodes for measure_live_bound; needs oracle depths in `summary`.
std::vector<LiveEpisode> live_episodes(const DynamicDepthModel& model, const EvalSummary& summary);

struct EpochReport {
  int epoch = 0;
  std::string phase;  // second stage: "ppo" or "backbone"
  double lr = 0.0;
  double explore_epsilon = 0.0;
  long oracle_refreshed = 0;
  double mean_oracle_depth = 0.0;
  double predictor_mae = 0.0;
  double alpha = 0.0;
  double train_loss = 0.0;  // backbone stage only
  double reward_mean = 0.0;  // ppo stage only
  double rollout_mean_depth = 0.0;
  double ppo_clip_fraction = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double full_depth_accuracy = 0.0;
  double mean_depth = 0.0;
  double mean_flops = 0.0;
  double flops_ratio = 0.0;
  bool improved = false;

  std::string to_json() const;
};

struct StageEvent {
  int epoch = 0;
  Phase phase = Phase::kPredictor;
  std::array<std::uint64_t, 3> before{};  // backbone, policy, predictor hashes
  std::array<std::uint64_t, 3> after{};
};

struct TrainHooks {
  std::function<void(const StageEvent&)> on_stage;
  std::ostream* log = nullptr;  // progress lines; reports stay deterministic
  std::string report_path;      // JSONL, one record per epoch, when non-empty
};

struct TrainResult {
  DynamicDepthModel model;  // restored to the best validation epoch
  std::vector<EpochReport> reports;
  int best_epoch = 0;
  bool stopped_early = false;
};

/// Two-stage collaborative loop. Throws InputError on an empty split and
/// EvaluationError on any non-finite loss, naming the phase and step.
TrainResult train(const Split& data, const TrainConfig& config, const TrainHooks& hooks = {});

/// Backbone-only training of an existing model (for example after folding):
/// `epochs` backbone stages with the same objective, batches and learning
/// rates as train(). Predictor and controller are left untouched.
DynamicDepthModel fine_tune_backbone(const DynamicDepthModel& model, const Split& data,
                                     const TrainConfig& config, int epochs);

std::uint64_t predictor_hash(const GbtModel& model);

/// One checkpoint directory holding every component of the model.
void save_model(const std::filesystem::path& dir, const DynamicDepthModel& model);
DynamicDepthModel load_model(const std::filesystem::path& dir);

}  // namespace dyndepth
