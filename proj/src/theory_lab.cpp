#include "dyndepth/theory_lab.hpp"

#include <cmath>

namespace dyndepth {

BoundParams BoundParams::layered(double alpha, double epsilon, double p_explore,
                                 double cost_per_layer, int l_opt, int num_layers) {
  BoundParams p;
  p.alpha = alpha;
  p.epsilon = epsilon;
  p.p_explore = p_explore;
  p.cost_per_layer = cost_per_layer;
  p.l_opt = l_opt;
  p.num_layers = num_layers;
  p.flops_opt = cost_per_layer * l_opt;
  p.flops_full = cost_per_layer * num_layers;
  return p;
}

void BoundParams::validate() const {
  auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!unit(alpha)) throw ParameterError("alpha " + std::to_string(alpha) + " outside [0, 1]");
  if (!unit(epsilon)) throw ParameterError("epsilon " + std::to_string(epsilon) + " outside [0, 1]");
  if (!unit(p_explore)) {
    throw ParameterError("p_explore " + std::to_string(p_explore) + " outside [0, 1]");
  }
  if (!(flops_opt >= 0.0) || !(flops_opt <= flops_full)) {
    throw ParameterError("need 0 <= F_opt <= F_full, got F_opt " + std::to_string(flops_opt) +
                         ", F_full " + std::to_string(flops_full));
  }
  if (!(cost_per_layer >= 0.0)) throw ParameterError("negative per-layer cost");
  if (num_layers < 1 || l_opt < 1 || l_opt > num_layers) {
    throw ParameterError("need 1 <= l_opt <= L, got l_opt " + std::to_string(l_opt) + ", L " +
                         std::to_string(num_layers));
  }
}

double bound_tight(const BoundParams& p) {
  p.validate();
  const double hit = p.alpha * (1.0 - p.epsilon);
  return hit * p.flops_opt + (1.0 - hit) * p.flops_full;
}

double bound_loose(const BoundParams& p) {
  p.validate();
  if (p.epsilon >= 1.0) throw ParameterError("bound_loose: epsilon must be below 1");
  return (p.alpha * p.flops_opt + (1.0 - p.alpha) * p.flops_full) / (1.0 - p.epsilon);
}

double bound_gap_scaled(const BoundParams& p) {
  p.validate();
  if (p.flops_full <= 0.0) return 0.0;
  const double r = p.flops_opt / p.flops_full;
  return p.epsilon * (1.0 - p.alpha * (1.0 - r) * (2.0 - p.epsilon));
}

MonteCarloEstimate simulate_expected_flops(const BoundParams& p, long trials, Rng& rng,
                                           NonOptimalMode mode) {
  p.validate();
  if (trials < 1000) throw ParameterError("simulate_expected_flops: need at least 1000 trials");
  const double hit = p.alpha * (1.0 - p.epsilon) + p.epsilon * p.p_explore;
  std::uniform_int_distribution<int> any_depth(1, p.num_layers);
  // Welford keeps the variance exact for degenerate draws (sem = 0).
  double mean = 0.0, m2 = 0.0;
  for (long t = 1; t <= trials; ++t) {
    double f;
    if (uniform01(rng) < hit) {
      f = p.flops_opt;
    } else if (mode == NonOptimalMode::kFullDepth) {
      f = p.flops_full;
    } else {
      f = p.cost_per_layer * any_depth(rng);
    }
    const double delta = f - mean;
    mean += delta / t;
    m2 += delta * (f - mean);
  }
  MonteCarloEstimate e;
  e.mean = mean;
  e.trials = trials;
  e.sem = std::sqrt(m2 / (trials - 1) / trials);
  return e;
}

BoundReport simulate_bound(const BoundParams& p, long trials, Rng& rng, NonOptimalMode mode) {
  const auto e = simulate_expected_flops(p, trials, rng, mode);
  BoundReport r;
  r.alpha = p.alpha;
  r.epsilon = p.epsilon;
  r.p_explore = p.p_explore;
  r.mean = e.mean;
  r.sem = e.sem;
  r.bound_tight = bound_tight(p);
  r.bound_loose = bound_loose(p);
  r.satisfied = r.mean <= r.bound_loose;
  return r;
}

LiveBoundReport measure_live_bound(std::span<const LiveEpisode> episodes, double flops_full) {
  if (episodes.empty()) throw InputError("measure_live_bound: no episodes");
  long correct = 0, explored = 0, explored_hits = 0;
  double flops_sum = 0.0, flops_sq = 0.0, opt_sum = 0.0;
  for (const auto& e : episodes) {
    if (e.l_opt < 1) throw InputError("measure_live_bound: episode without an oracle depth");
    if (!std::isfinite(e.flops) || !std::isfinite(e.flops_opt)) {
      throw EvaluationError("measure_live_bound: non-finite FLOPs in an episode");
    }
    correct += e.l_pred == e.l_opt;
    if (e.explored) {
      ++explored;
      explored_hits += e.chosen_depth == e.l_opt;
    }
    flops_sum += e.flops;
    flops_sq += e.flops * e.flops;
    opt_sum += e.flops_opt;
  }
  const double n = static_cast<double>(episodes.size());
  LiveBoundReport out;
  out.episodes = static_cast<long>(episodes.size());
  out.explored = explored;
  out.flops_opt = opt_sum / n;
  out.flops_full = flops_full;

  BoundParams p;
  p.alpha = correct / n;
  p.epsilon = explored / n;
  p.p_explore = explored == 0 ? 0.0 : static_cast<double>(explored_hits) / explored;
  p.flops_opt = out.flops_opt;
  p.flops_full = flops_full;
  p.cost_per_layer = 0.0;
  p.l_opt = 1;
  p.num_layers = 1;

  auto& r = out.report;
  r.alpha = p.alpha;
  r.epsilon = p.epsilon;
  r.p_explore = p.p_explore;
  r.mean = flops_sum / n;
  const double var = episodes.size() > 1 ? std::max(0.0, (flops_sq - n * r.mean * r.mean) / (n - 1)) : 0.0;
  r.sem = std::sqrt(var / n);
  r.bound_tight = bound_tight(p);
  r.bound_loose = bound_loose(p);
  r.satisfied = r.mean <= r.bound_loose;
  return out;
}

double propagation_bound(const PropagationParams& p) {
  if (!(p.gamma > 0.0)) throw ParameterError("propagation_bound: gamma must be positive");
  if (p.l_delta < 0) throw ParameterError("propagation_bound: l_delta must be non-negative");
  return std::pow(p.gamma, p.l_delta) * p.h_norm;
}

double estimate_gamma(const BackboneParams& params, std::span<const TokenSequence> samples,
                      int pairs, Rng& rng) {
  if (samples.empty() || pairs < 1) throw InputError("estimate_gamma: need samples and pairs");
  const int L = params.config.num_layers;
  double gamma = 0.0;
  for (int i = 0; i < pairs; ++i) {
    const TokenSequence& a = samples[rng() % samples.size()];
    TokenSequence b = a;
    const std::size_t pos = rng() % b.size();
    b[pos] = (b[pos] + 1 + static_cast<int>(rng() % (params.config.vocab_size - 1))) %
             params.config.vocab_size;
    const TokenSequence pair[] = {a, b};
    const auto fwd = forward_batch(params, pair, L, true);
    const Index n = static_cast<Index>(a.size());
    for (int l = 0; l < L; ++l) {
      const Matrix& in = fwd.layers[l].x_in;
      const Matrix& out = l + 1 < L ? fwd.layers[l + 1].x_in : fwd.output;
      const double din = (in.topRows(n) - in.bottomRows(n)).norm();
      if (din == 0.0) continue;
      gamma = std::max(gamma, (out.topRows(n) - out.bottomRows(n)).norm() / din);
    }
  }
  return gamma;
}

PropagationSweep propagation_sweep(const BackboneParams& params,
                                   std::span<const TokenSequence> samples,
                                   std::span<const int> labels, double gamma, Rng& rng) {
  if (samples.size() != labels.size()) throw DimensionError("propagation_sweep: size mismatch");
  const int L = params.config.num_layers;
  if (L < 2) throw ParameterError("propagation_sweep: need at least two layers");
  PropagationSweep sweep;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int l = 1 + static_cast<int>(rng() % (L - 1));
    const int delta = 1 + static_cast<int>(rng() % (L - l));
    const auto out = forward_to_depth(samples[i], params, l + delta);
    const auto base = forward_to_depth(samples[i], params, l);
    const Vector pooled = base.hidden.colwise().mean().transpose();
    const double change = std::abs(cross_entropy(out.logits_per_exit[l + delta - 1], labels[i]) -
                                   cross_entropy(out.logits_per_exit[l - 1], labels[i]));
    ++sweep.samples;
    sweep.within += change <= propagation_bound({gamma, delta, pooled.norm()});
  }
  return sweep;
}

}  // namespace dyndepth
