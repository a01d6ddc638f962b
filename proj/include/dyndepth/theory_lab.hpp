#pragma once

#include <span>
#include <vector>

#include "dyndepth/backbone.hpp"
#include "dyndepth/random.hpp"

namespace dyndepth {

struct BoundParams {
  double alpha = 1.0;      // predictor accuracy
  double epsilon = 0.0;    // exploration rate
  double p_explore = 0.0;  // P(choose l_opt | exploring)
  double flops_opt = 0.0;
  double flops_full = 0.0;
  double cost_per_layer = 1.0;  // C
  int l_opt = 1;
  int num_layers = 12;  // L

  /// F_opt = C l_opt and F_full = C L.
  static BoundParams layered(double alpha, double epsilon, double p_explore, double cost_per_layer,
                             int l_opt, int num_layers);
  /// Throws ParameterError when a field is out of range.
  void validate() const;
};

/// alpha (1 - eps) F_opt + (1 - alpha (1 - eps)) F_full.
double bound_tight(const BoundParams& p);

/// (alpha F_opt + (1 - alpha) F_full) / (1 - eps). ParameterError at eps = 1.
double bound_loose(const BoundParams& p);

/// (1 - eps) (loose - tight) / F_full in closed form:
/// eps (1 - alpha (1 - F_opt / F_full) (2 - eps)). Negative exactly when the
/// loose form undercuts the tight one.
double bound_gap_scaled(const BoundParams& p);

enum class NonOptimalMode {
  kFullDepth,  // every miss runs all L layers
  kUniform,    // a miss runs a depth drawn uniformly from [1, L]
};

struct MonteCarloEstimate {
  double mean = 0.0;
  double sem = 0.0;
  long trials = 0;
};

/// Each trial picks l_opt with probability alpha (1 - eps) + eps p_explore and
/// otherwise a non-optimal depth; returns the mean and standard error of the
/// trial FLOPs. Requires trials >= 1000.
MonteCarloEstimate simulate_expected_flops(const BoundParams& p, long trials, Rng& rng,
                                           NonOptimalMode mode = NonOptimalMode::kFullDepth);

struct BoundReport {
  double alpha = 0.0;
  double epsilon = 0.0;
  double p_explore = 0.0;
  double mean = 0.0;
  double sem = 0.0;
  double bound_tight = 0.0;
  double bound_loose = 0.0;
  bool satisfied = false;  // mean <= bound_loose
};

/// Runs simulate_expected_flops and packages it with both bounds.
BoundReport simulate_bound(const BoundParams& p, long trials, Rng& rng,
                           NonOptimalMode mode = NonOptimalMode::kFullDepth);

/// One evaluated sample of a running system.
struct LiveEpisode {
  int l_opt = 0;  // oracle depth; 0 means not labelled
  int l_pred = 0;
  int chosen_depth = 0;
  bool explored = false;
  double flops = 0.0;      // cost of chosen_depth
  double flops_opt = 0.0;  // cost of l_opt
};

struct LiveBoundReport {
  BoundReport report;  // mean is the empirical mean FLOPs
  double flops_opt = 0.0;   // mean oracle FLOPs
  double flops_full = 0.0;
  long episodes = 0;
  long explored = 0;
};

/// alpha = P(l_pred = l_opt); eps = fraction of episodes with an explored
/// step; p_explore = P(chosen = l_opt | explored). Throws InputError when an
/// episode has no oracle label.
LiveBoundReport measure_live_bound(std::span<const LiveEpisode> episodes, double flops_full);

struct PropagationParams {
  double gamma = 1.0;
  int l_delta = 0;
  double h_norm = 0.0;
};

/// gamma^l_delta * h_norm.
double propagation_bound(const PropagationParams& p);

/// Largest ratio ||f_i(h) - f_i(h')|| / ||h - h'|| over layers i and `pairs`
/// input pairs, where h' comes from the same sequence with one token replaced.
double estimate_gamma(const BackboneParams& params, std::span<const TokenSequence> samples,
                      int pairs, Rng& rng);

struct PropagationSweep {
  long samples = 0;
  long within = 0;
  double fraction() const { return samples == 0 ? 0.0 : static_cast<double>(within) / samples; }
};

/// For each sample draws l in [1, L-1] and l_delta in [1, L-l] and tests
/// |CE(exit l + l_delta) - CE(exit l)| <= gamma^l_delta ||pool(h_l)||_2.
PropagationSweep propagation_sweep(const BackboneParams& params,
                                   std::span<const TokenSequence> samples,
                                   std::span<const int> labels, double gamma, Rng& rng);

}  // namespace dyndepth
