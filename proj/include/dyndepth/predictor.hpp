#pragma once

#include <span>
#include <string>
#include <vector>

#include "dyndepth/backbone.hpp"
#include "dyndepth/tensor_math.hpp"

namespace dyndepth {

struct GbtConfig {
  int num_trees = 100;
  int max_depth = 3;
  double learning_rate = 0.1;
  double huber_delta = 1.0;
  double distill_lambda = 0.5;  // weight of the squared pull towards the teacher
  int num_bins = 32;
  int min_samples_leaf = 5;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict(const double* x) const;
  int depth() const;
};

struct GbtModel {
  std::vector<RegressionTree> trees;
  double learning_rate = 0.1;
  double base = 0.0;
  Index num_features = 0;

  /// base + learning_rate * sum of leaf values.
  double predict(std::span<const double> x) const;

  /// Flat tensor form for checkpoints: one row per node
  /// (tree, feature, threshold, left, right, value) plus a meta row.
  Matrix node_table() const;
  Matrix meta() const;
  static GbtModel from_tables(const Matrix& nodes, const Matrix& meta);
};

struct GbtReport {
  std::vector<double> objective;  // after the base and after each tree
  double train_mae = 0.0;
  bool degenerate_features = false;
};

double huber(double residual, double delta);
double huber_grad(double residual, double delta);

/// Mean over samples of Huber(pred - label) + lambda * (pred - teacher)^2.
double predictor_objective(std::span<const double> pred, std::span<const double> labels,
                           std::span<const double> teacher, const GbtConfig& cfg);

/// Rows of `features` are samples. Leaf values take a majorization step
/// -sum(g) / (n (1 + 2 lambda)), which bounds the Huber curvature by one, so
/// every added tree leaves the objective non-increasing.
GbtModel train_predictor(const Matrix& features, std::span<const double> labels,
                         std::span<const double> teacher_targets, const GbtConfig& cfg,
                         GbtReport* report = nullptr);

struct DepthPrediction {
  int l_pred = 1;
  double confidence = 1.0;
  double raw = 0.0;
};

DepthPrediction predict_depth(const GbtModel& model, std::span<const double> pooled_h1,
                              int num_layers);

struct RidgeModel {
  Vector weights;
  double intercept = 0.0;
  double lambda = 1e-3;

  double predict(std::span<const double> x) const;
};

/// Closed-form ridge regression with an unpenalised intercept.
RidgeModel train_h3_teacher(const Matrix& features, std::span<const double> labels,
                            double lambda = 1e-3);

/// Smallest depth whose exit is correct with loss within (1 + slack) of the
/// full-depth loss; L when no exit is correct.
int oracle_l_opt(std::span<const int> tokens, int label, const BackboneParams& params,
                 double slack = 0.1);

/// Same rule applied to precomputed per-exit logits.
int oracle_l_opt_from_logits(const std::vector<Vector>& logits_per_exit, int label,
                             double slack);

}  // namespace dyndepth
