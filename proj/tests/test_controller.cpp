#include "doctest.h"

#include <cmath>
#include <numeric>

#include "dyndepth/controller.hpp"

using namespace dyndepth;

namespace {

PolicyConfig small_config() {
  PolicyConfig c;
  c.feature_dim = 5;
  c.hidden = 4;
  c.num_layers = 6;
  return c;
}

/// Saturated hand-wired policy: exits exactly when t reaches l_pred.
/// Unit 0 carries sign(t - l_pred + 0.5); the head turns it into exit/continue.
PolicyParams follow_prediction_policy(const PolicyConfig& cfg) {
  Rng rng(0);
  auto p = PolicyParams::init(cfg, rng);
  for (auto& [name, m] : p.tensors()) m->setZero();
  const Index h = cfg.hidden;
  const double k = 50.0 * cfg.num_layers;
  p.b.leftCols(h).setConstant(30.0);           // input gate open
  p.b.middleCols(h, h).setConstant(-30.0);     // forget gate shut
  p.b.rightCols(h).setConstant(30.0);          // output gate open
  p.w_x(cfg.feature_dim, 2 * h) = k;           // + t / L
  p.w_x(cfg.feature_dim + 1, 2 * h) = -k;      // - l_pred / L
  p.b(0, 2 * h) = k * 0.5 / cfg.num_layers;
  p.w_pi(0, kExit) = 60.0;
  p.w_pi(0, kContinue) = -60.0;
  return p;
}

Vector features(const PolicyConfig& cfg, Rng& rng) { return random_normal(cfg.feature_dim, 1, 1.0, rng); }

}  // namespace

TEST_CASE("select_depth: exit-always policy stops at depth 1") {
  const auto cfg = small_config();
  Rng rng(1);
  auto p = PolicyParams::init(cfg, rng);
  p.w_pi.setZero();
  p.b_pi << -50.0, 50.0;
  const Vector f = features(cfg, rng);
  for (int i = 0; i < 20; ++i) {
    const auto tr = select_depth(p, {f.data(), 5}, 3, 0.0, rng);
    CHECK(tr.chosen_depth == 1);
    REQUIRE(tr.steps.size() == 1);
    CHECK(tr.steps[0].action == kExit);
  }
}

TEST_CASE("select_depth: wired follow-the-prediction policy exits at l_pred") {
  const auto cfg = small_config();
  const auto p = follow_prediction_policy(cfg);
  Rng rng(2);
  const Vector f = features(cfg, rng);
  for (int l = 1; l <= cfg.num_layers; ++l) {
    CHECK(select_depth(p, {f.data(), 5}, l, 0.0, rng).chosen_depth == l);
    CHECK(select_depth(p, {f.data(), 5}, l, 0.0, rng, true).chosen_depth == l);
  }
}

TEST_CASE("select_depth: uniform exploration follows the truncated geometric law") {
  PolicyConfig cfg = small_config();
  cfg.num_layers = 12;
  Rng rng(3);
  const auto p = PolicyParams::init(cfg, rng);
  const Vector f = features(cfg, rng);
  const int draws = 10000;
  std::vector<int> counts(13, 0);
  for (int i = 0; i < draws; ++i) ++counts[select_depth(p, {f.data(), 5}, 6, 1.0, rng).chosen_depth];
  // P(l) = 2^-l for l < 12, P(12) = 2^-11; depths >= 8 pooled so each bin expects >= 39.
  std::vector<double> observed, expected;
  for (int l = 1; l <= 7; ++l) {
    observed.push_back(counts[l]);
    expected.push_back(draws * std::pow(0.5, l));
  }
  observed.push_back(std::accumulate(counts.begin() + 8, counts.end(), 0));
  expected.push_back(draws * std::pow(0.5, 7));
  double chi2 = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    chi2 += (observed[i] - expected[i]) * (observed[i] - expected[i]) / expected[i];
  }
  const double critical_p01_df7 = 18.475;
  CHECK(chi2 < critical_p01_df7);
}

TEST_CASE("select_depth: epsilon 0 rollouts with a fixed seed are bitwise repeatable") {
  const auto cfg = small_config();
  Rng init(4);
  const auto p = PolicyParams::init(cfg, init);
  const Vector f = features(cfg, init);
  Rng a(99), b(99);
  for (int i = 0; i < 50; ++i) {
    const auto ta = select_depth(p, {f.data(), 5}, 2, 0.0, a);
    const auto tb = select_depth(p, {f.data(), 5}, 2, 0.0, b);
    CHECK(ta.chosen_depth == tb.chosen_depth);
    REQUIRE(ta.steps.size() == tb.steps.size());
    for (std::size_t s = 0; s < ta.steps.size(); ++s) {
      CHECK(ta.steps[s].logprob == tb.steps[s].logprob);
      CHECK(ta.steps[s].value == tb.steps[s].value);
    }
  }
}

TEST_CASE("select_depth: rejects epsilon outside [0, 1] and bad feature length") {
  const auto cfg = small_config();
  Rng rng(5);
  const auto p = PolicyParams::init(cfg, rng);
  const Vector f = features(cfg, rng);
  CHECK_THROWS_AS(select_depth(p, {f.data(), 5}, 1, 1.5, rng), ParameterError);
  CHECK_THROWS_AS(select_depth(p, {f.data(), 4}, 1, 0.1, rng), InputError);
}

TEST_CASE("trajectory invariants: shape, log-probabilities and step simplex") {
  const auto cfg = small_config();
  Rng rng(6);
  const auto p = PolicyParams::init(cfg, rng);
  for (int i = 0; i < 200; ++i) {
    const Vector f = features(cfg, rng);
    const auto tr = select_depth(p, {f.data(), 5}, 1 + i % 6, 0.3, rng);
    CHECK(tr.chosen_depth >= 1);
    CHECK(tr.chosen_depth <= cfg.num_layers);
    const bool exited = !tr.steps.empty() && tr.steps.back().action == kExit;
    if (exited) {
      CHECK(static_cast<int>(tr.steps.size()) == tr.chosen_depth);
    } else {
      CHECK(tr.chosen_depth == cfg.num_layers);
      CHECK(static_cast<int>(tr.steps.size()) == cfg.num_layers - 1);
    }
    for (std::size_t s = 0; s + 1 < tr.steps.size(); ++s) CHECK(tr.steps[s].action == kContinue);
    const auto probs = step_probabilities(p, tr);
    double sum = 0;
    for (std::size_t s = 0; s < tr.steps.size(); ++s) {
      CHECK(std::isfinite(tr.steps[s].logprob));
      CHECK(tr.steps[s].logprob <= 0.0);
      CHECK(std::abs(probs[s].sum() - 1.0) < 1e-12);
      CHECK(std::abs(std::log(probs[s][tr.steps[s].action]) - tr.steps[s].logprob) < 1e-12);
      sum += tr.steps[s].logprob;
    }
    CHECK(tr.total_logprob() == doctest::Approx(sum).epsilon(1e-15));
  }
}

TEST_CASE("hierarchical_reward: hand-evaluated totals and step decomposition") {
  Trajectory full;
  full.num_layers = 12;
  full.chosen_depth = 12;
  full.l_pred = 11;
  full.steps.resize(11);
  const auto a = hierarchical_reward(full, true);
  CHECK(a.total == doctest::Approx(0.6));
  CHECK(a.total == a.accuracy_term + a.compute_term + a.smoothness_term);

  Trajectory mid;
  mid.num_layers = 12;
  mid.chosen_depth = 6;
  mid.l_pred = 2;
  mid.steps.resize(6);
  mid.steps.back().action = kExit;
  const auto b = hierarchical_reward(mid, false);
  CHECK(b.total == doctest::Approx(-1.25));
  double sum = 0;
  for (const auto& s : mid.steps) sum += s.reward;
  CHECK(sum == doctest::Approx(b.total).epsilon(1e-14));
  for (std::size_t i = 0; i + 1 < mid.steps.size(); ++i) CHECK(mid.steps[i].reward == doctest::Approx(-0.5 / 12));

  Trajectory bad;
  bad.num_layers = 12;
  bad.chosen_depth = 13;
  CHECK_THROWS_AS(hierarchical_reward(bad, true), ParameterError);
}

TEST_CASE("hierarchical_reward: strictly decreasing in depth at fixed correctness") {
  for (bool correct : {true, false}) {
    double prev = 1e9;
    for (int d = 1; d <= 12; ++d) {
      Trajectory t;
      t.num_layers = 12;
      t.chosen_depth = d;
      t.l_pred = d;  // smooth at every depth
      t.steps.resize(std::min(d, 11));
      const double r = hierarchical_reward(t, correct).total;
      CHECK(r < prev);
      prev = r;
    }
  }
}

TEST_CASE("compute_gae: gamma = lambda = 1 equals Monte Carlo advantage") {
  Trajectory t;
  t.steps.resize(3);
  const double rewards[] = {0.5, -0.2, 1.3};
  const double values[] = {0.1, 0.4, -0.3};
  for (int i = 0; i < 3; ++i) {
    t.steps[i].reward = rewards[i];
    t.steps[i].value = values[i];
  }
  compute_gae(t, 1.0, 1.0);
  CHECK(t.steps[0].advantage == doctest::Approx(0.5 - 0.2 + 1.3 - 0.1));
  CHECK(t.steps[1].advantage == doctest::Approx(-0.2 + 1.3 - 0.4));
  CHECK(t.steps[2].advantage == doctest::Approx(1.3 + 0.3));
  CHECK(t.steps[0].ret == doctest::Approx(1.6));
}

TEST_CASE("clipped_surrogate: clip definition") {
  CHECK(clipped_surrogate(1.5, 1.0, 0.2) == doctest::Approx(1.2));
  CHECK(clipped_surrogate(0.5, 1.0, 0.2) == doctest::Approx(0.5));
  CHECK(clipped_surrogate(0.5, -1.0, 0.2) == doctest::Approx(-0.8));
  CHECK(clipped_surrogate(1.0, 2.0, 0.2) == 2.0);
}

namespace {

std::vector<Trajectory> rollouts(const PolicyParams& p, int n, Rng& rng) {
  std::vector<Trajectory> out;
  for (int i = 0; i < n; ++i) {
    const Vector f = random_normal(p.config.feature_dim, 1, 1.0, rng);
    auto tr = select_depth(p, {f.data(), static_cast<std::size_t>(f.size())}, 1 + i % 4, 0.2, rng);
    hierarchical_reward(tr, i % 3 != 0);
    compute_gae(tr, 0.99, 0.95);
    out.push_back(std::move(tr));
  }
  return out;
}

std::vector<double> flat_advantages(const std::vector<Trajectory>& batch) {
  std::vector<double> a;
  for (const auto& tr : batch) {
    for (const auto& s : tr.steps) a.push_back(s.advantage);
  }
  return a;
}

}  // namespace

TEST_CASE("ppo_loss: synced policy has unit ratios and surrogate equal to mean advantage") {
  const auto cfg = small_config();
  Rng rng(7);
  const auto p = PolicyParams::init(cfg, rng);
  const auto batch = rollouts(p, 16, rng);
  const auto adv = flat_advantages(batch);
  const auto st = ppo_loss(p, batch, adv, PpoConfig{}, nullptr);
  CHECK(std::abs(st.mean_ratio - 1.0) < 1e-12);
  CHECK(st.clip_fraction == 0.0);
  const double mean_adv = std::accumulate(adv.begin(), adv.end(), 0.0) / adv.size();
  CHECK(std::abs(-st.policy_loss - mean_adv) < 1e-12);
}

TEST_CASE("ppo_loss: zero advantages contribute no policy gradient") {
  const auto cfg = small_config();
  Rng rng(8);
  const auto p = PolicyParams::init(cfg, rng);
  const auto batch = rollouts(p, 8, rng);
  const std::vector<double> zero(flat_advantages(batch).size(), 0.0);
  PpoConfig pc;
  pc.value_coef = 0.0;
  pc.entropy_coef = 0.0;
  auto g = PolicyParams::zeros_like(p);
  ppo_loss(p, batch, zero, pc, &g);
  for (const auto& [name, m] : g.tensors()) CHECK(m->isZero());
}

TEST_CASE("ppo_loss: full objective gradient passes grad_check") {
  const auto cfg = small_config();
  Rng rng(9);
  const auto behaviour = PolicyParams::init(cfg, rng);
  for (int n : {1, 5}) {
    const auto batch = rollouts(behaviour, n, rng);
    const auto adv = flat_advantages(batch);
    auto p0 = behaviour;
    for (auto& [name, m] : p0.tensors()) *m += random_normal(m->rows(), m->cols(), 0.02, rng);
    const PpoConfig pc;
    auto flat = [](const PolicyParams& p) {
      std::vector<double> v;
      for (const auto& [name, m] : p.tensors()) v.insert(v.end(), m->data(), m->data() + m->size());
      return Vector(Eigen::Map<Vector>(v.data(), v.size()));
    };
    auto unflat = [&](const Vector& x) {
      auto p = p0;
      Index at = 0;
      for (auto& [name, m] : p.tensors()) {
        std::copy(x.data() + at, x.data() + at + m->size(), m->data());
        at += m->size();
      }
      return p;
    };
    const double err = grad_check(
        [&](const Vector& x) { return ppo_loss(unflat(x), batch, adv, pc, nullptr).total_loss; },
        [&](const Vector& x) {
          auto p = unflat(x);
          auto g = PolicyParams::zeros_like(p);
          ppo_loss(p, batch, adv, pc, &g);
          return flat(g);
        },
        flat(p0), 1e-6);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("ppo_update: constant advantages skip normalisation") {
  const auto cfg = small_config();
  Rng rng(10);
  auto p = PolicyParams::init(cfg, rng);
  auto batch = rollouts(p, 4, rng);
  for (auto& tr : batch) {
    for (auto& s : tr.steps) s.advantage = 0.7;
  }
  Adam opt;
  const auto stats = ppo_update(p, opt, batch, PpoConfig{});
  REQUIRE(stats.size() == 4);
  CHECK_FALSE(stats[0].advantages_normalized);
  CHECK(std::abs(stats[0].mean_ratio - 1.0) < 1e-12);
  CHECK_THROWS_AS(ppo_update(p, opt, std::vector<Trajectory>{}, PpoConfig{}), InputError);
}

TEST_CASE("sampling model: P(chosen = l_opt) matches alpha(1-eps) + eps p_explore") {
  // l_opt = L-1 and every wrong prediction is L; both paths take L-1 steps, so
  // whether a rollout explores is independent of whether the prediction is right.
  PolicyConfig cfg = small_config();
  cfg.num_layers = 12;
  const auto p = follow_prediction_policy(cfg);
  const double alpha = 0.7;
  const double step_eps = 0.01;
  const int l_opt = 11;
  Rng rng(11);
  const Vector f = features(cfg, rng);
  const int draws = 100000;
  int hits = 0, correct_pred = 0, explored = 0, explored_hits = 0;
  for (int i = 0; i < draws; ++i) {
    const bool right = uniform01(rng) < alpha;
    correct_pred += right;
    const auto tr = select_depth(p, {f.data(), 5}, right ? l_opt : 12, step_eps, rng);
    const bool hit = tr.chosen_depth == l_opt;
    hits += hit;
    if (tr.any_explored()) {
      ++explored;
      explored_hits += hit;
    }
  }
  const double a = static_cast<double>(correct_pred) / draws;
  const double eps = static_cast<double>(explored) / draws;
  const double p_explore = static_cast<double>(explored_hits) / explored;
  const double predicted = a * (1 - eps) + eps * p_explore;
  const double empirical = static_cast<double>(hits) / draws;
  const double sem = std::sqrt(empirical * (1 - empirical) / draws);
  CHECK(eps > 0.05);
  CHECK(std::abs(empirical - predicted) <= 3 * sem);
}

TEST_CASE("ppo: depth-1-solvable data drives the mean depth below L/2") {
  const PolicyConfig cfg;  // desk config: 256 features, hidden 128, L = 12
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    auto p = PolicyParams::init(cfg, rng);
    std::vector<Vector> pool;
    for (int i = 0; i < 256; ++i) pool.push_back(random_normal(cfg.feature_dim, 1, 1.0, rng));
    Adam opt;
    PpoConfig pc;
    double last_mean = cfg.num_layers;
    for (int iter = 0; iter < 200; ++iter) {
      std::vector<Trajectory> batch;
      double depth_sum = 0;
      for (int b = 0; b < 32; ++b) {
        const Vector& f = pool[rng() % pool.size()];
        auto tr = select_depth(p, {f.data(), 256}, 1, 0.05, rng);
        hierarchical_reward(tr, true);
        compute_gae(tr, pc.gamma, pc.gae_lambda);
        depth_sum += tr.chosen_depth;
        batch.push_back(std::move(tr));
      }
      ppo_update(p, opt, batch, pc);
      last_mean = depth_sum / 32;
    }
    double greedy_sum = 0;
    for (const auto& f : pool) greedy_sum += select_depth(p, {f.data(), 256}, 1, 0.0, rng, true).chosen_depth;
    MESSAGE("seed " << seed << ": last rollout mean depth " << last_mean
                    << ", greedy mean depth " << greedy_sum / pool.size());
    CHECK(last_mean < 0.5 * cfg.num_layers);
  }
}
