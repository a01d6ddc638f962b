#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyndepth/optimizer.hpp"
#include "dyndepth/random.hpp"
#include "dyndepth/tensor_math.hpp"

namespace dyndepth {

struct PolicyConfig {
  int feature_dim = 256;  // pooled h2: mean ++ max over 128 channels
  int hidden = 128;
  int num_layers = 12;

  int input_dim() const { return feature_dim + 2; }
};

/// LSTM cell (gate order i, f, g, o) with a continue/exit head and a value head.
/// Input per step: pooled h2, t / L, l_pred / L.
struct PolicyParams {
  PolicyConfig config;
  Matrix w_x;   // input_dim x 4H
  Matrix w_h;   // H x 4H
  Matrix b;     // 1 x 4H
  Matrix w_pi;  // H x 2
  Matrix b_pi;  // 1 x 2
  Matrix w_v;   // H x 1
  Matrix b_v;   // 1 x 1

  static PolicyParams init(const PolicyConfig& config, Rng& rng);
  static PolicyParams zeros_like(const PolicyParams& other);

  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;
};

enum Action : int { kContinue = 0, kExit = 1 };

struct Step {
  int action = kContinue;
  double logprob = 0.0;  // under the policy that generated the rollout
  double value = 0.0;
  bool explored = false;
  double reward = 0.0;
  double advantage = 0.0;
  double ret = 0.0;
};

/// One decision per layer boundary 1..L-1; running past the last boundary
/// means depth L, so the final layer needs no decision.
struct Trajectory {
  Vector features;
  int l_pred = 1;
  int num_layers = 12;
  std::vector<Step> steps;
  int chosen_depth = 1;

  bool any_explored() const;
  double total_logprob() const;
};

/// Samples (or, with greedy, takes the argmax of) the policy at each step;
/// with probability epsilon the action is instead a fair coin.
Trajectory select_depth(const PolicyParams& policy, std::span<const double> pooled_h2,
                        int l_pred, double epsilon, Rng& rng, bool greedy = false);

/// Action probabilities along a fixed trajectory under `policy`.
std::vector<Vector> step_probabilities(const PolicyParams& policy, const Trajectory& traj);

struct RewardConfig {
  double accuracy = 1.0;    // a
  double compute = 0.5;     // b
  double smoothness = 0.1;  // c
};

struct RewardBreakdown {
  double accuracy_term = 0.0;
  double compute_term = 0.0;
  double smoothness_term = 0.0;
  double total = 0.0;
};

/// Terminal reward +-a - b * l / L + c [|l - l_pred| <= 1], spread over the
/// steps: each continue costs b / L, the last step takes the remainder.
RewardBreakdown hierarchical_reward(Trajectory& traj, bool correct, const RewardConfig& cfg = {});

void compute_gae(Trajectory& traj, double gamma, double lambda);

double clipped_surrogate(double ratio, double advantage, double clip);

struct PpoConfig {
  double clip = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  int epochs = 4;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double lr = 3e-4;
};

struct PpoStats {
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double policy_loss = 0.0;  // -mean clipped surrogate
  double value_loss = 0.0;
  double entropy = 0.0;
  double total_loss = 0.0;
  bool advantages_normalized = false;
};

/// PPO loss over a batch evaluated with `policy`; per-step advantages are
/// taken from `advantages` (flattened in trajectory order). Gradients are
/// accumulated into `grads` when non-null.
PpoStats ppo_loss(const PolicyParams& policy, std::span<const Trajectory> batch,
                  std::span<const double> advantages, const PpoConfig& cfg,
                  PolicyParams* grads);

/// Runs cfg.epochs full-batch Adam steps on the clipped objective. Advantages
/// must already be filled (compute_gae); they are standardised unless their
/// variance is zero. Returns per-epoch statistics, first epoch first.
std::vector<PpoStats> ppo_update(PolicyParams& policy, Adam& optimizer,
                                 std::span<const Trajectory> batch, const PpoConfig& cfg);

}  // namespace dyndepth
