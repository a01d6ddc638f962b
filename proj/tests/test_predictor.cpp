#include "doctest.h"

#include <cmath>

#include "dyndepth/predictor.hpp"
#include "dyndepth/random.hpp"
#include "oracles.hpp"

using namespace dyndepth;

namespace {

std::vector<double> predict_all(const GbtModel& m, const Matrix& x) {
  std::vector<double> out;
  for (Index i = 0; i < x.rows(); ++i) out.push_back(m.predict({&x(i, 0), static_cast<std::size_t>(x.cols())}));
  return out;
}

}  // namespace

TEST_CASE("huber: zero residual and delta = 1 hand values") {
  CHECK(huber(0.0, 1.0) == 0.0);
  CHECK(huber(1.0, 1.0) == doctest::Approx(0.5));
  CHECK(huber(2.0, 1.0) == doctest::Approx(1.5));
  CHECK(huber(-2.0, 1.0) == doctest::Approx(1.5));
  CHECK(huber_grad(3.0, 1.0) == 1.0);
  CHECK(huber_grad(-0.25, 1.0) == -0.25);
}

TEST_CASE("train_predictor: constant labels give a constant model") {
  Rng rng(1);
  const Matrix x = random_normal(50, 4, 1.0, rng);
  const std::vector<double> y(50, 7.0);
  GbtConfig cfg;
  cfg.distill_lambda = 0.0;
  const auto m = train_predictor(x, y, y, cfg);
  for (double p : predict_all(m, x)) CHECK(p == doctest::Approx(7.0).epsilon(1e-12));
  const Vector probe = random_normal(4, 1, 5.0, rng);
  CHECK(m.predict({probe.data(), 4}) == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("train_predictor: degenerate features fall back to the label mean") {
  const Matrix x = Matrix::Constant(20, 3, 1.5);
  std::vector<double> y;
  for (int i = 0; i < 20; ++i) y.push_back(1 + i % 4);
  GbtReport report;
  const auto m = train_predictor(x, y, y, GbtConfig{}, &report);
  CHECK(report.degenerate_features);
  CHECK(m.trees.empty());
  CHECK(m.predict(std::vector<double>{1.5, 1.5, 1.5}) == doctest::Approx(2.5));
}

TEST_CASE("train_predictor: objective never increases as trees are added") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix x = random_normal(200, 6, 1.0, rng);
    std::vector<double> y, t;
    for (Index i = 0; i < 200; ++i) {
      y.push_back(std::round(std::clamp(6 + 3 * x(i, 0) - 2 * x(i, 3), 1.0, 12.0)));
      t.push_back(y.back() + 0.5 * x(i, 1));
    }
    GbtConfig cfg;
    cfg.num_trees = 60;
    cfg.learning_rate = trial == 0 ? 1.0 : 0.1 * (trial + 1);
    GbtReport report;
    const auto m = train_predictor(x, y, t, cfg, &report);
    REQUIRE(report.objective.size() == 61);
    for (std::size_t i = 1; i < report.objective.size(); ++i) {
      CHECK(report.objective[i] <= report.objective[i - 1] + 1e-12);
    }
    for (const auto& tree : m.trees) {
      CHECK(tree.depth() <= cfg.max_depth);
      for (const auto& node : tree.nodes) CHECK(std::isfinite(node.value));
    }
    const auto pred = predict_all(m, x);
    double mae = 0;
    for (Index i = 0; i < 200; ++i) mae += std::abs(pred[i] - y[i]) / 200.0;
    CHECK(mae == doctest::Approx(report.train_mae).epsilon(1e-12));
  }
}

TEST_CASE("train_predictor: lambda 0 and huge delta reproduce least-squares boosting") {
  Rng rng(5);
  const Matrix x = random_normal(30, 3, 1.0, rng);
  std::vector<double> y;
  for (Index i = 0; i < 30; ++i) y.push_back(x(i, 0) * x(i, 1) + std::sin(3 * x(i, 2)));
  GbtConfig cfg;
  cfg.distill_lambda = 0.0;
  cfg.huber_delta = 1e12;
  cfg.num_trees = 25;
  cfg.max_depth = 2;
  cfg.learning_rate = 0.3;
  cfg.min_samples_leaf = 3;
  cfg.num_bins = 64;
  const auto m = train_predictor(x, y, y, cfg);
  const auto ours = predict_all(m, x);
  const auto ref = oracle::least_squares_boosting(x, y, 25, 2, 0.3, 3);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(ours[i] - ref[i]) < 1e-10);
}

TEST_CASE("predict_depth: rounding, clamping and confidence") {
  GbtModel m;
  m.num_features = 1;
  m.base = 5.4;
  auto p = predict_depth(m, std::vector<double>{0.0}, 12);
  CHECK(p.l_pred == 5);
  CHECK(p.confidence == doctest::Approx(1.0 / 1.4));
  m.base = -3.0;
  CHECK(predict_depth(m, std::vector<double>{0.0}, 12).l_pred == 1);
  m.base = 40.0;
  CHECK(predict_depth(m, std::vector<double>{0.0}, 12).l_pred == 12);
  CHECK_THROWS_AS(predict_depth(m, std::vector<double>{0.0, 1.0}, 12), InputError);
}

TEST_CASE("predict_depth: output stays in [1, L] on random models") {
  Rng rng(9);
  const Matrix x = random_normal(100, 5, 1.0, rng);
  std::vector<double> y;
  for (Index i = 0; i < 100; ++i) y.push_back(20.0 * x(i, 0));
  const auto m = train_predictor(x, y, y, GbtConfig{});
  for (int trial = 0; trial < 200; ++trial) {
    const Vector probe = random_normal(5, 1, 4.0, rng);
    const auto p = predict_depth(m, {probe.data(), 5}, 12);
    CHECK(p.l_pred >= 1);
    CHECK(p.l_pred <= 12);
    CHECK(p.confidence > 0.0);
    CHECK(p.confidence <= 1.0);
  }
}

TEST_CASE("predictor: separable easy/hard boxes generalise with MAE <= 0.5") {
  Rng rng(13);
  auto make = [&](int n, Matrix& x, std::vector<double>& y) {
    x.resize(n, 4);
    y.clear();
    for (int i = 0; i < n; ++i) {
      const bool hard = i % 2 == 1;
      for (int f = 0; f < 4; ++f) x(i, f) = uniform01(rng) + (hard ? 2.0 : 0.0);
      y.push_back(hard ? 10.0 : 2.0);
    }
  };
  Matrix xtr, xte;
  std::vector<double> ytr, yte;
  make(400, xtr, ytr);
  make(200, xte, yte);
  const auto teacher = train_h3_teacher(xtr, ytr);
  std::vector<double> targets;
  for (Index i = 0; i < xtr.rows(); ++i) targets.push_back(teacher.predict({&xtr(i, 0), 4}));
  const auto m = train_predictor(xtr, ytr, targets, GbtConfig{});
  double mae = 0;
  for (Index i = 0; i < xte.rows(); ++i) {
    mae += std::abs(predict_depth(m, {&xte(i, 0), 4}, 12).l_pred - yte[i]) / xte.rows();
  }
  CHECK(mae <= 0.5);
}

TEST_CASE("GbtModel: table round trip preserves predictions") {
  Rng rng(17);
  const Matrix x = random_normal(60, 3, 1.0, rng);
  std::vector<double> y;
  for (Index i = 0; i < 60; ++i) y.push_back(x(i, 0) > 0 ? 3.0 : 8.0);
  const auto m = train_predictor(x, y, y, GbtConfig{});
  const auto back = GbtModel::from_tables(m.node_table(), m.meta());
  CHECK(predict_all(m, x) == predict_all(back, x));
}

TEST_CASE("train_h3_teacher: constant, exact linear and zero-feature cases") {
  Rng rng(21);
  const Matrix x = random_normal(40, 3, 1.0, rng);
  const std::vector<double> k(40, 4.0);
  const auto c = train_h3_teacher(x, k);
  for (Index i = 0; i < 40; ++i) CHECK(std::abs(c.predict({&x(i, 0), 3}) - 4.0) < 0.01);

  Matrix f(20, 1);
  std::vector<double> l;
  for (int i = 0; i < 20; ++i) {
    f(i, 0) = i * 0.5;
    l.push_back(2.0 * f(i, 0));
  }
  const auto lin = train_h3_teacher(f, l);
  CHECK(std::abs(lin.weights[0] - 2.0) < 1e-3);
  // Centred closed form: w = Sxy / (Sxx + lambda).
  const double mean = 4.75;
  double sxx = 0, sxy = 0;
  for (int i = 0; i < 20; ++i) {
    sxx += (f(i, 0) - mean) * (f(i, 0) - mean);
    sxy += (f(i, 0) - mean) * (l[i] - 2 * mean);
  }
  CHECK(lin.weights[0] == doctest::Approx(sxy / (sxx + 1e-3)).epsilon(1e-12));

  const Matrix zeros = Matrix::Zero(12, 5);
  std::vector<double> labels;
  for (int i = 0; i < 12; ++i) labels.push_back(i);
  const auto z = train_h3_teacher(zeros, labels);
  CHECK(z.intercept == doctest::Approx(5.5));
  CHECK(z.predict(std::vector<double>(5, 0.0)) == doctest::Approx(5.5));
}

TEST_CASE("train_predictor and teacher reject too few samples") {
  const Matrix x = Matrix::Zero(5, 2);
  const std::vector<double> y(5, 1.0);
  CHECK_THROWS_AS(train_predictor(x, y, y, GbtConfig{}), InputError);
  CHECK_THROWS_AS(train_h3_teacher(x, y), InputError);
}

namespace {

/// Exit heads that ignore the input: bias favours `label` from exit `from` on.
BackboneParams scripted_backbone(int from, int label, double margin) {
  BackboneConfig cfg;
  cfg.num_layers = 12;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.vocab_size = 8;
  cfg.max_seq_len = 4;
  Rng rng(1);
  auto p = BackboneParams::init(cfg, rng);
  for (int l = 0; l < 12; ++l) {
    auto& out = p.exits[l].out;
    out.weight.setZero();
    out.bias.setZero();
    out.bias(0, l + 1 >= from ? label : (label + 1) % cfg.num_classes) = margin;
  }
  return p;
}

}  // namespace

TEST_CASE("oracle_l_opt: minimal correct depth, fallback and sweep agreement") {
  const TokenSequence tokens = {1, 2, 3};
  const auto easy = scripted_backbone(1, 2, 3.0);
  CHECK(oracle_l_opt(tokens, 2, easy, 0.1) == 1);

  const auto never = scripted_backbone(13, 2, 3.0);
  CHECK(oracle_l_opt(tokens, 2, never, 0.1) == 12);

  const auto hard = scripted_backbone(9, 2, 3.0);
  const auto out = forward_to_depth(tokens, hard, 12);
  int first_correct = 0;
  for (int l = 1; l <= 12 && first_correct == 0; ++l) {
    Index arg;
    out.logits_per_exit[l - 1].maxCoeff(&arg);
    if (arg == 2) first_correct = l;
  }
  CHECK(first_correct == 9);
  CHECK(oracle_l_opt(tokens, 2, hard, 0.1) == 9);
}

TEST_CASE("oracle_l_opt: loss slack rejects weakly confident early exits") {
  std::vector<Vector> logits(3, Vector::Zero(3));
  logits[0] << 0.1, 0, 0;  // correct but barely
  logits[1] << 2, 0, 0;
  logits[2] << 2, 0, 0;
  CHECK(oracle_l_opt_from_logits(logits, 0, 0.1) == 2);
  CHECK(oracle_l_opt_from_logits(logits, 0, 10.0) == 1);
}
