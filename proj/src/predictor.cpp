#include "dyndepth/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

namespace dyndepth {

double RegressionTree::predict(const double* x) const {
  int at = 0;
  while (nodes[at].feature >= 0) {
    const auto& n = nodes[at];
    at = x[n.feature] <= n.threshold ? n.left : n.right;
  }
  return nodes[at].value;
}

int RegressionTree::depth() const {
  std::vector<int> level(nodes.size(), 0);
  int deepest = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    deepest = std::max(deepest, level[i]);
    if (nodes[i].feature >= 0) {
      level[nodes[i].left] = level[i] + 1;
      level[nodes[i].right] = level[i] + 1;
    }
  }
  return deepest;
}

double GbtModel::predict(std::span<const double> x) const {
  if (static_cast<Index>(x.size()) != num_features) {
    throw InputError("GbtModel: expected " + std::to_string(num_features) + " features, got " +
                     std::to_string(x.size()));
  }
  double sum = 0.0;
  for (const auto& t : trees) sum += t.predict(x.data());
  return base + learning_rate * sum;
}

Matrix GbtModel::node_table() const {
  Index total = 0;
  for (const auto& t : trees) total += static_cast<Index>(t.nodes.size());
  Matrix table(total, 6);
  Index row = 0;
  for (std::size_t i = 0; i < trees.size(); ++i) {
    for (const auto& n : trees[i].nodes) {
      table.row(row++) << static_cast<double>(i), n.feature, n.threshold, n.left, n.right, n.value;
    }
  }
  return table;
}

Matrix GbtModel::meta() const {
  Matrix m(1, 4);
  m << learning_rate, base, static_cast<double>(num_features), static_cast<double>(trees.size());
  return m;
}

GbtModel GbtModel::from_tables(const Matrix& nodes, const Matrix& meta) {
  if (meta.size() != 4 || (nodes.size() > 0 && nodes.cols() != 6)) {
    throw DimensionError("GbtModel::from_tables: malformed tables " +
                         shape_string(nodes.rows(), nodes.cols()) + ", " +
                         shape_string(meta.rows(), meta.cols()));
  }
  GbtModel m;
  m.learning_rate = meta(0, 0);
  m.base = meta(0, 1);
  m.num_features = static_cast<Index>(meta(0, 2));
  m.trees.resize(static_cast<std::size_t>(meta(0, 3)));
  for (Index r = 0; r < nodes.rows(); ++r) {
    const auto tree = static_cast<std::size_t>(nodes(r, 0));
    if (tree >= m.trees.size()) throw InputError("GbtModel::from_tables: bad tree index");
    TreeNode n;
    n.feature = static_cast<int>(nodes(r, 1));
    n.threshold = nodes(r, 2);
    n.left = static_cast<int>(nodes(r, 3));
    n.right = static_cast<int>(nodes(r, 4));
    n.value = nodes(r, 5);
    m.trees[tree].nodes.push_back(n);
  }
  return m;
}

double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

double huber_grad(double r, double delta) { return std::clamp(r, -delta, delta); }

double predictor_objective(std::span<const double> pred, std::span<const double> labels,
                           std::span<const double> teacher, const GbtConfig& cfg) {
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dt = pred[i] - teacher[i];
    total += huber(pred[i] - labels[i], cfg.huber_delta) + cfg.distill_lambda * dt * dt;
  }
  return total / static_cast<double>(pred.size());
}

namespace {

/// Split candidates per feature: midpoints between distinct values, thinned
/// to quantile cut points when a feature has more than num_bins values.
struct BinnedFeatures {
  std::vector<std::vector<double>> thresholds;
  std::vector<std::vector<std::uint16_t>> bins;  // [feature][sample]
};

BinnedFeatures bin_features(const Matrix& x, int num_bins) {
  const Index n = x.rows();
  BinnedFeatures b;
  b.thresholds.resize(x.cols());
  b.bins.resize(x.cols());
  std::vector<double> sorted(n);
  for (Index f = 0; f < x.cols(); ++f) {
    for (Index i = 0; i < n; ++i) sorted[i] = x(i, f);
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> uniq;
    std::unique_copy(sorted.begin(), sorted.end(), std::back_inserter(uniq));
    auto& thr = b.thresholds[f];
    if (static_cast<int>(uniq.size()) <= num_bins) {
      for (std::size_t i = 0; i + 1 < uniq.size(); ++i) thr.push_back(0.5 * (uniq[i] + uniq[i + 1]));
    } else {
      for (int q = 1; q < num_bins; ++q) {
        const double cut = sorted[static_cast<std::size_t>(q) * n / num_bins];
        const auto next = std::upper_bound(uniq.begin(), uniq.end(), cut);
        if (next == uniq.end()) continue;
        const double t = 0.5 * (cut + *next);
        if (thr.empty() || t > thr.back()) thr.push_back(t);
      }
    }
    auto& bins = b.bins[f];
    bins.resize(n);
    for (Index i = 0; i < n; ++i) {
      bins[i] = static_cast<std::uint16_t>(
          std::lower_bound(thr.begin(), thr.end(), x(i, f)) - thr.begin());
    }
  }
  return b;
}

struct TreeBuilder {
  const BinnedFeatures& binned;
  const std::vector<double>& grad;
  const GbtConfig& cfg;
  RegressionTree tree;

  int grow(std::vector<Index>& idx, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    double g_sum = 0.0;
    for (Index i : idx) g_sum += grad[i];
    const double n = static_cast<double>(idx.size());

    int best_f = -1;
    int best_k = -1;
    double best_gain = 1e-12;
    if (depth < cfg.max_depth && static_cast<int>(idx.size()) >= 2 * cfg.min_samples_leaf) {
      const double parent = g_sum * g_sum / n;
      std::vector<double> hist_g;
      std::vector<Index> hist_n;
      for (std::size_t f = 0; f < binned.thresholds.size(); ++f) {
        const auto& thr = binned.thresholds[f];
        if (thr.empty()) continue;
        hist_g.assign(thr.size() + 1, 0.0);
        hist_n.assign(thr.size() + 1, 0);
        const auto& bins = binned.bins[f];
        for (Index i : idx) {
          hist_g[bins[i]] += grad[i];
          ++hist_n[bins[i]];
        }
        double gl = 0.0;
        Index nl = 0;
        for (std::size_t k = 0; k < thr.size(); ++k) {
          gl += hist_g[k];
          nl += hist_n[k];
          const Index nr = static_cast<Index>(idx.size()) - nl;
          if (nl < cfg.min_samples_leaf || nr < cfg.min_samples_leaf) continue;
          const double gr = g_sum - gl;
          const double gain = gl * gl / nl + gr * gr / nr - parent;
          if (gain > best_gain) {
            best_gain = gain;
            best_f = static_cast<int>(f);
            best_k = static_cast<int>(k);
          }
        }
      }
    }

    if (best_f < 0) {
      tree.nodes[id].value = -g_sum / (n * (1.0 + 2.0 * cfg.distill_lambda));
      return id;
    }
    std::vector<Index> left, right;
    const auto& bins = binned.bins[best_f];
    for (Index i : idx) (bins[i] <= best_k ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    const int l = grow(left, depth + 1);
    const int r = grow(right, depth + 1);
    auto& node = tree.nodes[id];
    node.feature = best_f;
    node.threshold = binned.thresholds[best_f][best_k];
    node.left = l;
    node.right = r;
    return id;
  }
};

}  // namespace

GbtModel train_predictor(const Matrix& features, std::span<const double> labels,
                         std::span<const double> teacher_targets, const GbtConfig& cfg,
                         GbtReport* report) {
  const Index n = features.rows();
  if (n < 10 || static_cast<Index>(labels.size()) != n ||
      static_cast<Index>(teacher_targets.size()) != n) {
    throw InputError("train_predictor: need >= 10 samples with matching labels and teacher "
                     "targets (got " + std::to_string(n) + ", " + std::to_string(labels.size()) +
                     ", " + std::to_string(teacher_targets.size()) + ")");
  }
  if (cfg.num_trees < 0 || cfg.max_depth < 0 || cfg.learning_rate <= 0.0 ||
      cfg.huber_delta <= 0.0 || cfg.distill_lambda < 0.0 || cfg.num_bins < 2 ||
      cfg.num_bins > 65535 || cfg.min_samples_leaf < 1) {
    throw ParameterError("train_predictor: invalid GbtConfig");
  }
  if (!all_finite(features)) throw InputError("train_predictor: non-finite features");

  GbtModel model;
  model.learning_rate = cfg.learning_rate;
  model.num_features = features.cols();
  model.base = std::accumulate(labels.begin(), labels.end(), 0.0) / static_cast<double>(n);

  const auto binned = bin_features(features, cfg.num_bins);
  bool degenerate = true;
  for (const auto& t : binned.thresholds) degenerate = degenerate && t.empty();

  std::vector<double> pred(n, model.base);
  GbtReport local;
  local.degenerate_features = degenerate;
  local.objective.push_back(predictor_objective(pred, labels, teacher_targets, cfg));

  std::vector<double> grad(n);
  std::vector<Index> all;
  for (int t = 0; t < cfg.num_trees && !degenerate; ++t) {
    for (Index i = 0; i < n; ++i) {
      grad[i] = huber_grad(pred[i] - labels[i], cfg.huber_delta) +
                2.0 * cfg.distill_lambda * (pred[i] - teacher_targets[i]);
    }
    all.resize(n);
    std::iota(all.begin(), all.end(), Index{0});
    TreeBuilder builder{binned, grad, cfg, {}};
    builder.grow(all, 0);
    for (Index i = 0; i < n; ++i) {
      pred[i] += cfg.learning_rate * builder.tree.predict(&features(i, 0));
    }
    model.trees.push_back(std::move(builder.tree));
    local.objective.push_back(predictor_objective(pred, labels, teacher_targets, cfg));
  }

  double mae = 0.0;
  for (Index i = 0; i < n; ++i) mae += std::abs(pred[i] - labels[i]);
  local.train_mae = mae / static_cast<double>(n);
  if (report) *report = std::move(local);
  return model;
}

DepthPrediction predict_depth(const GbtModel& model, std::span<const double> pooled_h1,
                              int num_layers) {
  DepthPrediction p;
  p.raw = model.predict(pooled_h1);
  if (!std::isfinite(p.raw)) throw EvaluationError("predict_depth: non-finite raw prediction");
  p.l_pred = static_cast<int>(std::clamp(std::lround(p.raw), 1L, static_cast<long>(num_layers)));
  p.confidence = 1.0 / (1.0 + std::abs(p.raw - p.l_pred));
  return p;
}

double RidgeModel::predict(std::span<const double> x) const {
  if (static_cast<Index>(x.size()) != weights.size()) {
    throw InputError("RidgeModel: expected " + std::to_string(weights.size()) +
                     " features, got " + std::to_string(x.size()));
  }
  return intercept + Eigen::Map<const Vector>(x.data(), weights.size()).dot(weights);
}

RidgeModel train_h3_teacher(const Matrix& features, std::span<const double> labels,
                            double lambda) {
  const Index n = features.rows();
  if (n < 10 || static_cast<Index>(labels.size()) != n) {
    throw InputError("train_h3_teacher: need >= 10 samples with matching labels");
  }
  if (!(lambda > 0.0)) throw ParameterError("train_h3_teacher: lambda must be positive");
  const Eigen::Map<const Vector> y(labels.data(), n);
  const Eigen::RowVectorXd mean_x = features.colwise().mean();
  const double mean_y = y.mean();
  const Eigen::MatrixXd xc = features.rowwise() - mean_x;
  Eigen::MatrixXd gram = xc.transpose() * xc;
  gram.diagonal().array() += lambda;
  RidgeModel m;
  m.lambda = lambda;
  m.weights = gram.ldlt().solve(xc.transpose() * (y.array() - mean_y).matrix());
  m.intercept = mean_y - mean_x.dot(m.weights);
  return m;
}

int oracle_l_opt_from_logits(const std::vector<Vector>& logits_per_exit, int label,
                             double slack) {
  const int depth = static_cast<int>(logits_per_exit.size());
  if (depth == 0) throw InputError("oracle_l_opt: no exits");
  const double full_loss = cross_entropy(logits_per_exit.back(), label);
  for (int l = 0; l < depth; ++l) {
    Index arg;
    logits_per_exit[l].maxCoeff(&arg);
    if (arg != label) continue;
    if (cross_entropy(logits_per_exit[l], label) <= (1.0 + slack) * full_loss) return l + 1;
  }
  return depth;
}

int oracle_l_opt(std::span<const int> tokens, int label, const BackboneParams& params,
                 double slack) {
  const auto out = forward_to_depth(tokens, params, params.config.num_layers);
  return oracle_l_opt_from_logits(out.logits_per_exit, label, slack);
}

}  // namespace dyndepth
