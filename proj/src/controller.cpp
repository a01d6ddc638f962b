#include "dyndepth/controller.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dyndepth {

PolicyParams PolicyParams::init(const PolicyConfig& config, Rng& rng) {
  if (config.feature_dim <= 0 || config.hidden <= 0 || config.num_layers < 1) {
    throw ParameterError("PolicyConfig: dimensions must be positive");
  }
  const Index in = config.input_dim();
  const Index h = config.hidden;
  const double s = 1.0 / std::sqrt(static_cast<double>(h));
  PolicyParams p;
  p.config = config;
  p.w_x = random_uniform(in, 4 * h, -s, s, rng);
  p.w_h = random_uniform(h, 4 * h, -s, s, rng);
  p.b = Matrix::Zero(1, 4 * h);
  p.b.middleCols(h, h).setOnes();
  p.w_pi = random_uniform(h, 2, -s, s, rng);
  p.b_pi = Matrix::Zero(1, 2);
  p.w_v = random_uniform(h, 1, -s, s, rng);
  p.b_v = Matrix::Zero(1, 1);
  return p;
}

PolicyParams PolicyParams::zeros_like(const PolicyParams& other) {
  PolicyParams z = other;
  for (auto& [name, m] : z.tensors()) m->setZero();
  return z;
}

std::vector<std::pair<std::string, Matrix*>> PolicyParams::tensors() {
  return {{"policy.w_x", &w_x},   {"policy.w_h", &w_h}, {"policy.b", &b},
          {"policy.w_pi", &w_pi}, {"policy.b_pi", &b_pi}, {"policy.w_v", &w_v},
          {"policy.b_v", &b_v}};
}

std::vector<std::pair<std::string, const Matrix*>> PolicyParams::tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, m] : const_cast<PolicyParams*>(this)->tensors()) out.emplace_back(name, m);
  return out;
}

bool Trajectory::any_explored() const {
  return std::any_of(steps.begin(), steps.end(), [](const Step& s) { return s.explored; });
}

double Trajectory::total_logprob() const {
  double total = 0.0;
  for (const auto& s : steps) total += s.logprob;
  return total;
}

namespace {

Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& x) { return 1.0 / (1.0 + (-x).exp()); }

/// Batched unrolled LSTM over trajectories of (possibly) different lengths.
/// Rows of finished trajectories keep computing but never receive gradient.
struct Unroll {
  Index batch = 0;
  int steps = 0;
  Matrix features;    // B x feature_dim
  Matrix depth_col;   // B x T: t / L
  Matrix pred_col;    // B x 1: l_pred / L
  std::vector<Matrix> i, f, g, o, c, tanh_c, h;  // per step, B x H
  std::vector<Matrix> logits, values;            // per step, B x 2 / B x 1

  const Matrix& h_prev(int t, const Matrix& zero) const { return t == 0 ? zero : h[t - 1]; }
  const Matrix& c_prev(int t, const Matrix& zero) const { return t == 0 ? zero : c[t - 1]; }
};

Unroll unroll(const PolicyParams& p, std::span<const Trajectory> batch) {
  const auto& cfg = p.config;
  const Index hdim = cfg.hidden;
  Unroll u;
  u.batch = static_cast<Index>(batch.size());
  for (const auto& tr : batch) u.steps = std::max(u.steps, static_cast<int>(tr.steps.size()));
  u.features.resize(u.batch, cfg.feature_dim);
  u.pred_col.resize(u.batch, 1);
  for (Index b = 0; b < u.batch; ++b) {
    const auto& tr = batch[b];
    if (tr.features.size() != cfg.feature_dim) {
      throw InputError("policy: trajectory features have length " +
                       std::to_string(tr.features.size()) + ", expected " +
                       std::to_string(cfg.feature_dim));
    }
    u.features.row(b) = tr.features.transpose();
    u.pred_col(b, 0) = static_cast<double>(tr.l_pred) / cfg.num_layers;
  }
  u.depth_col.resize(u.batch, u.steps);
  for (int t = 0; t < u.steps; ++t) {
    u.depth_col.col(t).setConstant(static_cast<double>(t + 1) / cfg.num_layers);
  }

  const Matrix base = u.features * p.w_x.topRows(cfg.feature_dim) + u.pred_col * p.w_x.row(cfg.feature_dim + 1);
  const Matrix zero = Matrix::Zero(u.batch, hdim);
  for (int t = 0; t < u.steps; ++t) {
    Matrix gates = base + u.h_prev(t, zero) * p.w_h;
    gates += u.depth_col.col(t) * p.w_x.row(cfg.feature_dim);
    gates.rowwise() += p.b.row(0);
    u.i.push_back(sigmoid(gates.leftCols(hdim).array()).matrix());
    u.f.push_back(sigmoid(gates.middleCols(hdim, hdim).array()).matrix());
    u.g.push_back(gates.middleCols(2 * hdim, hdim).array().tanh().matrix());
    u.o.push_back(sigmoid(gates.rightCols(hdim).array()).matrix());
    u.c.push_back((u.f[t].array() * u.c_prev(t, zero).array() + u.i[t].array() * u.g[t].array()).matrix());
    u.tanh_c.push_back(u.c[t].array().tanh().matrix());
    u.h.push_back((u.o[t].array() * u.tanh_c[t].array()).matrix());
    Matrix lg = u.h[t] * p.w_pi;
    lg.rowwise() += p.b_pi.row(0);
    Matrix v = u.h[t] * p.w_v;
    v.array() += p.b_v(0, 0);
    u.logits.push_back(std::move(lg));
    u.values.push_back(std::move(v));
  }
  return u;
}

void backprop(const PolicyParams& p, const Unroll& u, const std::vector<Matrix>& dlogits,
              const std::vector<Matrix>& dvalues, PolicyParams& g) {
  const auto& cfg = p.config;
  const Index hdim = cfg.hidden;
  const Matrix zero = Matrix::Zero(u.batch, hdim);
  Matrix dh_next = zero;
  Matrix dc_next = zero;
  Matrix dgates_sum = Matrix::Zero(u.batch, 4 * hdim);
  Matrix dgates(u.batch, 4 * hdim);
  for (int t = u.steps - 1; t >= 0; --t) {
    const Matrix& h = u.h[t];
    g.w_pi.noalias() += h.transpose() * dlogits[t];
    g.b_pi.row(0) += dlogits[t].colwise().sum();
    g.w_v.noalias() += h.transpose() * dvalues[t];
    g.b_v(0, 0) += dvalues[t].sum();
    Matrix dh = dh_next;
    dh.noalias() += dlogits[t] * p.w_pi.transpose();
    dh.noalias() += dvalues[t] * p.w_v.transpose();

    const auto o = u.o[t].array();
    const auto tc = u.tanh_c[t].array();
    const auto ig = u.i[t].array();
    const auto fg = u.f[t].array();
    const auto gg = u.g[t].array();
    const Eigen::ArrayXXd dc = dc_next.array() + dh.array() * o * (1.0 - tc.square());
    dgates.leftCols(hdim) = (dc * gg * ig * (1.0 - ig)).matrix();
    dgates.middleCols(hdim, hdim) = (dc * u.c_prev(t, zero).array() * fg * (1.0 - fg)).matrix();
    dgates.middleCols(2 * hdim, hdim) = (dc * ig * (1.0 - gg.square())).matrix();
    dgates.rightCols(hdim) = (dh.array() * tc * o * (1.0 - o)).matrix();
    dc_next = (dc * fg).matrix();

    g.w_h.noalias() += u.h_prev(t, zero).transpose() * dgates;
    g.b.row(0) += dgates.colwise().sum();
    g.w_x.row(cfg.feature_dim).noalias() += u.depth_col.col(t).transpose() * dgates;
    dgates_sum += dgates;
    dh_next.noalias() = dgates * p.w_h.transpose();
  }
  g.w_x.topRows(cfg.feature_dim).noalias() += u.features.transpose() * dgates_sum;
  g.w_x.row(cfg.feature_dim + 1).noalias() += u.pred_col.transpose() * dgates_sum;
}

Vector log_probs(const Matrix& logits, Index row) {
  return log_softmax_t(Vector(logits.row(row).transpose()), 1.0);
}

}  // namespace

Trajectory select_depth(const PolicyParams& policy, std::span<const double> pooled_h2,
                        int l_pred, double epsilon, Rng& rng, bool greedy) {
  const auto& cfg = policy.config;
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
    throw ParameterError("select_depth: epsilon must lie in [0, 1]");
  }
  if (static_cast<int>(pooled_h2.size()) != cfg.feature_dim) {
    throw InputError("select_depth: features have length " + std::to_string(pooled_h2.size()) +
                     ", expected " + std::to_string(cfg.feature_dim));
  }
  const Index hdim = cfg.hidden;
  Trajectory tr;
  tr.features = Eigen::Map<const Vector>(pooled_h2.data(), cfg.feature_dim);
  tr.l_pred = l_pred;
  tr.num_layers = cfg.num_layers;
  tr.chosen_depth = cfg.num_layers;

  const Eigen::RowVectorXd base =
      tr.features.transpose() * policy.w_x.topRows(cfg.feature_dim) +
      (static_cast<double>(l_pred) / cfg.num_layers) * policy.w_x.row(cfg.feature_dim + 1) +
      policy.b.row(0);
  Eigen::RowVectorXd h = Eigen::RowVectorXd::Zero(hdim);
  Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(hdim);
  for (int t = 1; t < cfg.num_layers; ++t) {
    Eigen::RowVectorXd gates = base + h * policy.w_h;
    gates += (static_cast<double>(t) / cfg.num_layers) * policy.w_x.row(cfg.feature_dim);
    const Eigen::ArrayXXd i = sigmoid(gates.head(hdim).array());
    const Eigen::ArrayXXd f = sigmoid(gates.segment(hdim, hdim).array());
    const Eigen::ArrayXXd g = gates.segment(2 * hdim, hdim).array().tanh();
    const Eigen::ArrayXXd o = sigmoid(gates.tail(hdim).array());
    c = (f * c.array() + i * g).matrix();
    h = (o * c.array().tanh()).matrix();
    Vector logits = (h * policy.w_pi + policy.b_pi.row(0)).transpose();
    const Vector logp = log_softmax_t(logits, 1.0);

    Step s;
    s.value = (h * policy.w_v)(0) + policy.b_v(0, 0);
    s.explored = epsilon > 0.0 && uniform01(rng) < epsilon;
    if (s.explored) {
      s.action = uniform01(rng) < 0.5 ? kExit : kContinue;
    } else if (greedy) {
      s.action = logp[kExit] > logp[kContinue] ? kExit : kContinue;
    } else {
      s.action = uniform01(rng) < std::exp(logp[kExit]) ? kExit : kContinue;
    }
    s.logprob = logp[s.action];
    tr.steps.push_back(s);
    if (s.action == kExit) {
      tr.chosen_depth = t;
      break;
    }
  }
  return tr;
}

std::vector<Vector> step_probabilities(const PolicyParams& policy, const Trajectory& traj) {
  const auto u = unroll(policy, std::span<const Trajectory>(&traj, 1));
  std::vector<Vector> out;
  for (int t = 0; t < u.steps; ++t) out.push_back(log_probs(u.logits[t], 0).array().exp());
  return out;
}

RewardBreakdown hierarchical_reward(Trajectory& traj, bool correct, const RewardConfig& cfg) {
  const int depth = traj.chosen_depth;
  const int L = traj.num_layers;
  if (depth < 1 || depth > L) {
    throw ParameterError("hierarchical_reward: chosen depth " + std::to_string(depth) +
                         " outside [1, " + std::to_string(L) + "]");
  }
  RewardBreakdown r;
  r.accuracy_term = correct ? cfg.accuracy : -cfg.accuracy;
  r.compute_term = -cfg.compute * static_cast<double>(depth) / L;
  r.smoothness_term = std::abs(depth - traj.l_pred) <= 1 ? cfg.smoothness : 0.0;
  r.total = r.accuracy_term + r.compute_term + r.smoothness_term;

  const double per_continue = -cfg.compute / L;
  const std::size_t n = traj.steps.size();
  for (std::size_t i = 0; i + 1 < n; ++i) traj.steps[i].reward = per_continue;
  if (n > 0) traj.steps[n - 1].reward = r.total - per_continue * static_cast<double>(n - 1);
  return r;
}

void compute_gae(Trajectory& traj, double gamma, double lambda) {
  double next_value = 0.0;
  double running = 0.0;
  for (std::size_t k = traj.steps.size(); k-- > 0;) {
    auto& s = traj.steps[k];
    const double delta = s.reward + gamma * next_value - s.value;
    running = delta + gamma * lambda * running;
    s.advantage = running;
    s.ret = running + s.value;
    next_value = s.value;
  }
}

double clipped_surrogate(double ratio, double advantage, double clip) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - clip, 1.0 + clip) * advantage);
}

PpoStats ppo_loss(const PolicyParams& policy, std::span<const Trajectory> batch,
                  std::span<const double> advantages, const PpoConfig& cfg,
                  PolicyParams* grads) {
  if (batch.empty()) throw InputError("ppo_loss: empty batch");
  std::size_t total_steps = 0;
  for (const auto& tr : batch) total_steps += tr.steps.size();
  if (advantages.size() != total_steps) {
    throw DimensionError("ppo_loss: " + std::to_string(advantages.size()) +
                         " advantages for " + std::to_string(total_steps) + " steps");
  }
  PpoStats st;
  if (total_steps == 0) return st;

  const auto u = unroll(policy, batch);
  const double inv_n = 1.0 / static_cast<double>(total_steps);
  std::vector<Matrix> dlogits(u.steps, Matrix::Zero(u.batch, 2));
  std::vector<Matrix> dvalues(u.steps, Matrix::Zero(u.batch, 1));

  std::vector<std::size_t> offset(batch.size(), 0);
  for (std::size_t b = 1; b < batch.size(); ++b) offset[b] = offset[b - 1] + batch[b - 1].steps.size();

  for (Index b = 0; b < u.batch; ++b) {
    const auto& tr = batch[b];
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const auto& s = tr.steps[t];
      const double adv = advantages[offset[b] + t];
      const Vector logp = log_probs(u.logits[t], b);
      const Vector p = logp.array().exp();
      const double ratio = std::exp(logp[s.action] - s.logprob);
      const double surr = clipped_surrogate(ratio, adv, cfg.clip);
      const bool unclipped = ratio * adv <= std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
      const double entropy = -(p.array() * logp.array()).sum();
      const double v = u.values[t](b, 0);

      st.mean_ratio += ratio * inv_n;
      if (std::abs(ratio - 1.0) > cfg.clip) st.clip_fraction += inv_n;
      st.policy_loss -= surr * inv_n;
      st.value_loss += (v - s.ret) * (v - s.ret) * inv_n;
      st.entropy += entropy * inv_n;

      if (grads) {
        // d(-surr)/dlogp(a) = -A r on the unclipped branch, 0 otherwise.
        const double dlogp = unclipped ? -adv * ratio * inv_n : 0.0;
        Vector d = -dlogp * p;
        d[s.action] += dlogp;
        // d(-c H)/dz_j = c p_j (log p_j + H)
        d.array() += cfg.entropy_coef * inv_n * p.array() * (logp.array() + entropy);
        dlogits[t].row(b) = d.transpose();
        dvalues[t](b, 0) = 2.0 * cfg.value_coef * (v - s.ret) * inv_n;
      }
    }
  }
  st.total_loss = st.policy_loss + cfg.value_coef * st.value_loss - cfg.entropy_coef * st.entropy;
  if (grads) backprop(policy, u, dlogits, dvalues, *grads);
  return st;
}

std::vector<PpoStats> ppo_update(PolicyParams& policy, Adam& optimizer,
                                 std::span<const Trajectory> batch, const PpoConfig& cfg) {
  if (batch.empty()) throw InputError("ppo_update: empty batch");
  std::vector<double> adv;
  for (const auto& tr : batch) {
    for (const auto& s : tr.steps) adv.push_back(s.advantage);
  }
  bool normalized = false;
  if (adv.size() > 1) {
    const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / adv.size();
    double var = 0.0;
    for (double a : adv) var += (a - mean) * (a - mean);
    var /= static_cast<double>(adv.size());
    if (var > 1e-12) {
      const double inv = 1.0 / std::sqrt(var);
      for (double& a : adv) a = (a - mean) * inv;
      normalized = true;
    }
  }
  std::vector<PpoStats> out;
  for (int e = 0; e < cfg.epochs; ++e) {
    auto grads = PolicyParams::zeros_like(policy);
    auto st = ppo_loss(policy, batch, adv, cfg, &grads);
    st.advantages_normalized = normalized;
    if (!std::isfinite(st.total_loss)) {
      throw EvaluationError("ppo_update: non-finite loss at update epoch " + std::to_string(e));
    }
    optimizer.step(policy, grads, cfg.lr);
    out.push_back(st);
  }
  return out;
}

}  // namespace dyndepth
