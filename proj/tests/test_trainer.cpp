#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "dyndepth/param_utils.hpp"
#include "dyndepth/trainer.hpp"

using namespace dyndepth;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 4;
  c.batch_size = 16;
  c.base_lr = 3e-3;
  c.backbone.num_layers = 4;
  c.backbone.hidden = 16;
  c.backbone.heads = 2;
  c.backbone.ffn_mult = 2;
  c.extractor.embed_dim = 8;
  c.extractor.channels = {8, 16, 32};
  c.policy_hidden = 16;
  c.predictor.num_trees = 10;
  c.ppo.epochs = 2;
  return c;
}

const Split& small_split() {
  static const Split s = [] {
    DataGenConfig g;
    g.n = 200;
    g.seed = 7;
    return split_dataset(generate_dataset(g));
  }();
  return s;
}

}  // namespace

TEST_CASE("schedule: predictor first, PPO every third epoch") {
  CHECK(schedule(0).second == Phase::kPpo);
  CHECK(schedule(1).second == Phase::kBackbone);
  CHECK(schedule(2).second == Phase::kBackbone);
  std::set<int> ppo;
  for (int e = 0; e < 9; ++e) {
    CHECK(schedule(e).first == Phase::kPredictor);
    if (schedule(e).second == Phase::kPpo) ppo.insert(e);
  }
  CHECK(ppo == std::set<int>{0, 3, 6});
  CHECK_THROWS_AS(schedule(-1), ParameterError);
}

TEST_CASE("lr_at: halves every period") {
  CHECK(lr_at(0) == 1e-4);
  CHECK(lr_at(9) == 1e-4);
  CHECK(lr_at(10) == 5e-5);
  CHECK(lr_at(20) == 2.5e-5);
  CHECK(lr_at(25, 1.0, 5) == 1.0 / 32);
}

TEST_CASE("early_stop_epoch: patience and min_delta") {
  const std::vector<double> flat{1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
  CHECK(early_stop_epoch(flat, 5, 1e-4) == 5);
  const std::vector<double> falling{5, 4, 3, 2, 1, 0.5, 0.25};
  CHECK(early_stop_epoch(falling, 2, 1e-4) == 6);
  // Improvements smaller than min_delta do not reset the counter.
  const std::vector<double> creeping{1.0, 0.99995, 0.99994, 0.99993, 0.99992};
  CHECK(early_stop_epoch(creeping, 3, 1e-4) == 3);
  CHECK_THROWS_AS(early_stop_epoch({}, 3, 1e-4), InputError);
}

TEST_CASE("train: freeze contract, reports and determinism") {
  const auto& split = small_split();
  std::vector<StageEvent> events;
  TrainHooks hooks;
  hooks.on_stage = [&](const StageEvent& e) { events.push_back(e); };
  const auto cfg = small_config();
  const auto a = train(split, cfg, hooks);
  REQUIRE(a.reports.size() == 4);

  // One predictor stage plus one second stage per epoch.
  REQUIRE(events.size() == 8);
  for (const auto& e : events) {
    switch (e.phase) {
      case Phase::kPredictor:
        CHECK(e.before[0] == e.after[0]);
        CHECK(e.before[1] == e.after[1]);
        break;
      case Phase::kPpo:
        CHECK(e.before[0] == e.after[0]);
        CHECK(e.before[2] == e.after[2]);
        CHECK(e.before[1] != e.after[1]);
        break;
      case Phase::kBackbone:
        CHECK(e.before[1] == e.after[1]);
        CHECK(e.before[2] == e.after[2]);
        CHECK(e.before[0] != e.after[0]);
        break;
    }
  }
  CHECK(a.reports[0].phase == "ppo");
  CHECK(a.reports[1].phase == "backbone");
  CHECK(a.reports[0].oracle_refreshed == static_cast<long>(split.train.size()));
  CHECK(a.reports[1].oracle_refreshed == std::lround(0.25 * split.train.size()));
  CHECK(a.reports[2].explore_epsilon == doctest::Approx(0.1 * 0.95 * 0.95));

  const auto b = train(split, cfg);
  REQUIRE(b.reports.size() == a.reports.size());
  for (std::size_t i = 0; i < a.reports.size(); ++i) CHECK(a.reports[i].to_json() == b.reports[i].to_json());
  CHECK(parameter_hash(a.model.backbone) == parameter_hash(b.model.backbone));
}

TEST_CASE("evaluate: FLOPs and histograms are consistent with the chosen depths") {
  const auto& split = small_split();
  auto cfg = small_config();
  cfg.epochs = 2;
  const auto r = train(split, cfg);
  const auto s = evaluate(r.model, split.val);
  REQUIRE(s.decisions.size() == split.val.size());
  double flops = 0, depth = 0;
  long counted = 0;
  for (const auto& d : s.decisions) {
    CHECK(d.flops == flops_of_depth(r.model.backbone, d.depth));
    CHECK(d.l_opt >= 1);
    flops += static_cast<double>(d.flops);
    depth += d.depth;
  }
  CHECK(s.mean_flops == doctest::Approx(flops / split.val.size()).epsilon(1e-15));
  CHECK(s.mean_depth == doctest::Approx(depth / split.val.size()).epsilon(1e-15));
  for (const auto& [name, hist] : s.depth_histogram) {
    CHECK(hist.size() == 4);
    for (long c : hist) counted += c;
  }
  CHECK(counted == static_cast<long>(split.val.size()));

  const auto eps = live_episodes(r.model, s);
  CHECK(eps.size() == s.decisions.size());
  EvalOptions no_oracle;
  no_oracle.with_oracle = false;
  CHECK_THROWS_AS(live_episodes(r.model, evaluate(r.model, split.val, no_oracle)), InputError);
}

TEST_CASE("train: baseline runs at full depth") {
  auto cfg = small_config();
  cfg.epochs = 2;
  cfg.dynamic = false;
  const auto r = train(small_split(), cfg);
  const auto s = evaluate(r.model, small_split().val);
  CHECK(s.mean_depth == 4.0);
  CHECK(s.flops_ratio == 1.0);
  CHECK(s.accuracy == s.full_depth_accuracy);
}

TEST_CASE("train: bad inputs") {
  Split empty;
  CHECK_THROWS_AS(train(empty, small_config()), InputError);
  auto cfg = small_config();
  cfg.init_std = std::numeric_limits<double>::quiet_NaN();
  try {
    train(small_split(), cfg);
    FAIL("expected EvaluationError");
  } catch (const EvaluationError& e) {
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
  }
  cfg = small_config();
  cfg.batch_size = 100000;
  CHECK_THROWS_AS(train(small_split(), cfg), ParameterError);
}

TEST_CASE("train: early stopping matches early_stop_epoch and keeps the best snapshot") {
  auto cfg = small_config();
  cfg.epochs = 8;
  cfg.patience = 2;
  cfg.base_lr = 0.0;  // the backbone never moves, so the loss plateaus
  CHECK_THROWS_AS(train(small_split(), cfg), ParameterError);
  cfg.base_lr = 1e-12;
  const auto r = train(small_split(), cfg);
  std::vector<double> losses;
  for (const auto& rep : r.reports) losses.push_back(rep.val_loss);
  CHECK(r.stopped_early == (static_cast<int>(r.reports.size()) < cfg.epochs));
  CHECK(static_cast<int>(r.reports.size()) - 1 == early_stop_epoch(losses, cfg.patience, cfg.min_delta));
  CHECK(r.reports[r.best_epoch].val_loss == *std::min_element(losses.begin(), losses.end()));
}
