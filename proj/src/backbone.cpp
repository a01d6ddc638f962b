#include "dyndepth/backbone.hpp"

#include <cmath>

namespace dyndepth {

void BackboneConfig::validate() const {
  if (num_layers < 1 || num_layers > 64) {
    throw ParameterError("BackboneConfig: num_layers must lie in [1, 64], got " +
                         std::to_string(num_layers));
  }
  if (hidden <= 0 || heads <= 0 || hidden % heads != 0) {
    throw ParameterError("BackboneConfig: hidden " + std::to_string(hidden) +
                         " not divisible by heads " + std::to_string(heads));
  }
  if (ffn_mult <= 0 || num_classes < 2 || vocab_size <= 0 || max_seq_len <= 0) {
    throw ParameterError("BackboneConfig: sizes must be positive (classes >= 2)");
  }
}

namespace {

Linear make_linear(Index in, Index out, double stddev, Rng* rng) {
  Linear lin;
  lin.weight = rng ? random_normal(in, out, stddev, *rng) : Matrix::Zero(in, out);
  lin.bias = Matrix::Zero(1, out);
  return lin;
}

LayerNormParams make_layer_norm(Index d, double gain) {
  return {Matrix::Constant(1, d, gain), Matrix::Zero(1, d)};
}

BackboneParams build(const BackboneConfig& config, Rng* rng, double stddev) {
  config.validate();
  BackboneParams p;
  p.config = config;
  const Index d = config.hidden;
  const Index f = config.ffn_dim();
  const double gain = rng ? 1.0 : 0.0;
  p.token_embedding = rng ? random_normal(config.vocab_size, d, stddev, *rng)
                          : Matrix::Zero(config.vocab_size, d);
  p.position_embedding = rng ? random_normal(config.max_seq_len, d, stddev, *rng)
                             : Matrix::Zero(config.max_seq_len, d);
  for (int i = 0; i < config.num_layers; ++i) {
    EncoderLayer layer;
    layer.ln1 = make_layer_norm(d, gain);
    layer.q = make_linear(d, d, stddev, rng);
    layer.k = make_linear(d, d, stddev, rng);
    layer.v = make_linear(d, d, stddev, rng);
    layer.o = make_linear(d, d, stddev, rng);
    layer.ln2 = make_layer_norm(d, gain);
    layer.ffn_in = make_linear(d, f, stddev, rng);
    layer.ffn_out = make_linear(f, d, stddev, rng);
    p.layers.push_back(std::move(layer));
  }
  for (int i = 0; i < config.num_layers; ++i) {
    ExitHead head;
    head.ln = make_layer_norm(d, gain);
    head.out = make_linear(d, config.num_classes, stddev, rng);
    p.exits.push_back(std::move(head));
  }
  return p;
}

void append_linear(std::vector<std::pair<std::string, Matrix*>>& out,
                   const std::string& prefix, Linear& lin) {
  if (lin.folded) {
    out.emplace_back(prefix + ".left", &lin.left);
    out.emplace_back(prefix + ".right", &lin.right);
  } else {
    out.emplace_back(prefix + ".weight", &lin.weight);
  }
  out.emplace_back(prefix + ".bias", &lin.bias);
}

void append_layer_norm(std::vector<std::pair<std::string, Matrix*>>& out,
                       const std::string& prefix, LayerNormParams& ln) {
  out.emplace_back(prefix + ".gamma", &ln.gamma);
  out.emplace_back(prefix + ".beta", &ln.beta);
}

}  // namespace

BackboneParams BackboneParams::init(const BackboneConfig& config, Rng& rng, double stddev) {
  return build(config, &rng, stddev);
}

BackboneParams BackboneParams::zeros(const BackboneConfig& config) {
  return build(config, nullptr, 0.0);
}

BackboneParams BackboneParams::zeros_like(const BackboneParams& other) {
  BackboneParams z = other;
  for (auto& [name, m] : z.tensors()) m->setZero();
  return z;
}

bool BackboneParams::folded() const {
  for (const auto& layer : layers) {
    if (layer.q.folded) return true;
  }
  return false;
}

Index BackboneParams::parameter_count() const {
  Index n = 0;
  for (const auto& [name, m] : tensors()) n += m->size();
  return n;
}

std::vector<std::pair<std::string, Matrix*>> BackboneParams::tensors() {
  std::vector<std::pair<std::string, Matrix*>> out;
  out.emplace_back("backbone.token_embedding", &token_embedding);
  out.emplace_back("backbone.position_embedding", &position_embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "backbone.layer" + std::to_string(i + 1);
    auto& l = layers[i];
    append_layer_norm(out, p + ".ln1", l.ln1);
    append_linear(out, p + ".q", l.q);
    append_linear(out, p + ".k", l.k);
    append_linear(out, p + ".v", l.v);
    append_linear(out, p + ".o", l.o);
    append_layer_norm(out, p + ".ln2", l.ln2);
    append_linear(out, p + ".ffn_in", l.ffn_in);
    append_linear(out, p + ".ffn_out", l.ffn_out);
  }
  for (std::size_t i = 0; i < exits.size(); ++i) {
    const std::string p = "backbone.exit" + std::to_string(i + 1);
    append_layer_norm(out, p + ".ln", exits[i].ln);
    append_linear(out, p + ".out", exits[i].out);
  }
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> BackboneParams::tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, m] : const_cast<BackboneParams*>(this)->tensors()) out.emplace_back(name, m);
  return out;
}

// ---------------------------------------------------------------------------
// Kernels

void layer_norm_forward(ConstMatrixRef x, const LayerNormParams& p, MatrixRef y,
                        Matrix* xhat, Vector* rstd) {
  const Index rows = x.rows();
  const Index d = x.cols();
  if (xhat) xhat->resize(rows, d);
  if (rstd) rstd->resize(rows);
  for (Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    if (rstd) (*rstd)[r] = inv;
    if (xhat) {
      xhat->row(r) = (x.row(r).array() - mean) * inv;
      y.row(r) = xhat->row(r).array() * p.gamma.row(0).array() + p.beta.row(0).array();
    } else {
      y.row(r) = ((x.row(r).array() - mean) * inv) * p.gamma.row(0).array() +
                 p.beta.row(0).array();
    }
  }
}

void linear_forward(ConstMatrixRef x, const Linear& lin, MatrixRef y, double* scratch) {
  if (x.cols() != lin.in_dim()) {
    throw DimensionError("linear_forward: input " + shape_string(x.rows(), x.cols()) +
                         " vs weight with " + std::to_string(lin.in_dim()) + " rows");
  }
  if (lin.folded) {
    if (scratch) {
      Eigen::Map<Matrix> mid(scratch, x.rows(), lin.left.cols());
      mid.noalias() = x * lin.left;
      y.noalias() = mid * lin.right;
    } else {
      Matrix mid = x * lin.left;
      y.noalias() = mid * lin.right;
    }
  } else {
    y.noalias() = x * lin.weight;
  }
  y.rowwise() += lin.bias.row(0);
}

void attention_forward(ConstMatrixRef q, ConstMatrixRef k, ConstMatrixRef v, int heads,
                       MatrixRef out, std::vector<Matrix>* probs, double* scratch) {
  const Index n = q.rows();
  const Index dh = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix local;
  if (!scratch) {
    local.resize(n, n);
    scratch = local.data();
  }
  Eigen::Map<Matrix> scores(scratch, n, n);
  for (int h = 0; h < heads; ++h) {
    scores.noalias() = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
    scores *= scale;
    softmax_rows_inplace(scores);
    out.middleCols(h * dh, dh).noalias() = scores * v.middleCols(h * dh, dh);
    if (probs) probs->push_back(scores);
  }
}

// ---------------------------------------------------------------------------
// Forward

namespace {

void check_depth(const BackboneConfig& config, int depth) {
  if (depth < 1 || depth > config.num_layers) {
    throw ParameterError("depth " + std::to_string(depth) + " outside [1, " +
                         std::to_string(config.num_layers) + "]");
  }
}

void check_tokens(const BackboneConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("backbone: empty token sequence");
  if (static_cast<int>(tokens.size()) > config.max_seq_len) {
    throw InputError("backbone: sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab_size) {
      throw InputError("backbone: token " + std::to_string(t) + " outside vocabulary");
    }
  }
}

}  // namespace

BatchForward forward_batch(const BackboneParams& params,
                           std::span<const TokenSequence> batch, int depth,
                           bool keep_cache) {
  const auto& cfg = params.config;
  check_depth(cfg, depth);
  if (batch.empty()) throw InputError("forward_batch: empty batch");

  BatchForward fwd;
  fwd.depth = depth;
  Index rows = 0;
  for (const auto& seq : batch) {
    check_tokens(cfg, seq);
    fwd.offsets.push_back(rows);
    fwd.lengths.push_back(static_cast<Index>(seq.size()));
    rows += static_cast<Index>(seq.size());
  }
  const Index d = cfg.hidden;
  const Index nb = static_cast<Index>(batch.size());

  Matrix x(rows, d);
  for (Index b = 0; b < nb; ++b) {
    for (Index t = 0; t < fwd.lengths[b]; ++t) {
      x.row(fwd.offsets[b] + t) = params.token_embedding.row(batch[b][t]) +
                                  params.position_embedding.row(t);
    }
  }
  if (keep_cache) {
    fwd.tokens.assign(batch.begin(), batch.end());
    fwd.layers.resize(depth);
  }

  for (int i = 0; i < depth; ++i) {
    const auto& layer = params.layers[i];
    const auto& head = params.exits[i];
    LayerCache c;
    Matrix* xhat1 = keep_cache ? &c.ln1_xhat : nullptr;
    Vector* rstd1 = keep_cache ? &c.ln1_rstd : nullptr;
    c.a1.resize(rows, d);
    layer_norm_forward(x, layer.ln1, c.a1, xhat1, rstd1);
    c.q.resize(rows, d);
    c.k.resize(rows, d);
    c.v.resize(rows, d);
    linear_forward(c.a1, layer.q, c.q);
    linear_forward(c.a1, layer.k, c.k);
    linear_forward(c.a1, layer.v, c.v);
    c.attn.resize(rows, d);
    for (Index b = 0; b < nb; ++b) {
      const Index off = fwd.offsets[b];
      const Index n = fwd.lengths[b];
      attention_forward(c.q.middleRows(off, n), c.k.middleRows(off, n),
                        c.v.middleRows(off, n), cfg.heads, c.attn.middleRows(off, n),
                        keep_cache ? &c.probs : nullptr);
    }
    c.x_mid.resize(rows, d);
    linear_forward(c.attn, layer.o, c.x_mid);
    c.x_mid += x;

    c.a2.resize(rows, d);
    layer_norm_forward(c.x_mid, layer.ln2, c.a2, keep_cache ? &c.ln2_xhat : nullptr,
                       keep_cache ? &c.ln2_rstd : nullptr);
    c.pre.resize(rows, cfg.ffn_dim());
    linear_forward(c.a2, layer.ffn_in, c.pre);
    c.act = c.pre.cwiseMax(0.0);
    Matrix x_out(rows, d);
    linear_forward(c.act, layer.ffn_out, x_out);
    x_out += c.x_mid;

    c.pooled.resize(nb, d);
    for (Index b = 0; b < nb; ++b) {
      c.pooled.row(b) = x_out.middleRows(fwd.offsets[b], fwd.lengths[b]).colwise().mean();
    }
    c.head_z.resize(nb, d);
    layer_norm_forward(c.pooled, head.ln, c.head_z, keep_cache ? &c.head_xhat : nullptr,
                       keep_cache ? &c.head_rstd : nullptr);
    Matrix logits(nb, cfg.num_classes);
    linear_forward(c.head_z, head.out, logits);
    fwd.exit_logits.push_back(std::move(logits));

    if (keep_cache) {
      c.x_in = std::move(x);
      fwd.layers[i] = std::move(c);
    }
    x = std::move(x_out);
  }
  fwd.output = std::move(x);
  return fwd;
}

ExitOutputs forward_to_depth(std::span<const int> tokens, const BackboneParams& params,
                             int depth) {
  const TokenSequence seq(tokens.begin(), tokens.end());
  auto fwd = forward_batch(params, std::span<const TokenSequence>(&seq, 1), depth, false);
  ExitOutputs out;
  for (const auto& logits : fwd.exit_logits) out.logits_per_exit.push_back(logits.row(0).transpose());
  out.hidden = std::move(fwd.output);
  return out;
}

// ---------------------------------------------------------------------------
// Backward

namespace {

void layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd,
                         const LayerNormParams& p, LayerNormParams& g, Matrix& dx) {
  g.gamma.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  g.beta.row(0) += dy.colwise().sum();
  const Index d = dy.cols();
  dx.resize(dy.rows(), d);
  for (Index r = 0; r < dy.rows(); ++r) {
    const Eigen::ArrayXd dxhat = (dy.row(r).array() * p.gamma.row(0).array()).transpose();
    const Eigen::ArrayXd xh = xhat.row(r).transpose().array();
    const double mean_dxhat = dxhat.mean();
    const double mean_dxhat_xhat = (dxhat * xh).mean();
    dx.row(r) = (rstd[r] * (dxhat - mean_dxhat - xh * mean_dxhat_xhat)).transpose();
  }
}

/// Accumulates weight/bias gradients; writes dL/dx into `dx` when non-null.
void linear_backward(const Matrix& x, const Matrix& dy, const Linear& lin, Linear& g,
                     Matrix* dx) {
  g.bias.row(0) += dy.colwise().sum();
  if (lin.folded) {
    const Matrix mid = x * lin.left;
    g.right.noalias() += mid.transpose() * dy;
    const Matrix dmid = dy * lin.right.transpose();
    g.left.noalias() += x.transpose() * dmid;
    if (dx) dx->noalias() = dmid * lin.left.transpose();
  } else {
    g.weight.noalias() += x.transpose() * dy;
    if (dx) dx->noalias() = dy * lin.weight.transpose();
  }
}

void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                        const Matrix* probs, const Matrix& dout, int heads, Index off,
                        Index n, Matrix& dq, Matrix& dk, Matrix& dv) {
  const Index dh = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const Matrix& p = probs[h];
    const auto qh = q.block(off, h * dh, n, dh);
    const auto kh = k.block(off, h * dh, n, dh);
    const auto vh = v.block(off, h * dh, n, dh);
    const auto doh = dout.block(off, h * dh, n, dh);
    const Matrix dp = doh * vh.transpose();
    dv.block(off, h * dh, n, dh).noalias() = p.transpose() * doh;
    Matrix ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
    ds *= scale;
    dq.block(off, h * dh, n, dh).noalias() = ds * kh;
    dk.block(off, h * dh, n, dh).noalias() = ds.transpose() * qh;
  }
}

}  // namespace

void backward_batch(const BackboneParams& params, const BatchForward& fwd,
                    const std::vector<Matrix>& dlogits, BackboneParams& grads) {
  const auto& cfg = params.config;
  if (fwd.layers.size() != static_cast<std::size_t>(fwd.depth)) {
    throw ParameterError("backward_batch: forward pass was run without caching");
  }
  const Index rows = fwd.output.rows();
  const Index d = cfg.hidden;
  const Index nb = static_cast<Index>(fwd.offsets.size());

  Matrix dx = Matrix::Zero(rows, d);
  for (int i = fwd.depth - 1; i >= 0; --i) {
    const auto& c = fwd.layers[i];
    const auto& layer = params.layers[i];
    auto& gl = grads.layers[i];

    if (static_cast<std::size_t>(i) < dlogits.size() && dlogits[i].size() > 0) {
      const auto& head = params.exits[i];
      auto& gh = grads.exits[i];
      Matrix dz(nb, d);
      linear_backward(c.head_z, dlogits[i], head.out, gh.out, &dz);
      Matrix dpooled;
      layer_norm_backward(dz, c.head_xhat, c.head_rstd, head.ln, gh.ln, dpooled);
      for (Index b = 0; b < nb; ++b) {
        const double inv_n = 1.0 / static_cast<double>(fwd.lengths[b]);
        dx.middleRows(fwd.offsets[b], fwd.lengths[b]).rowwise() += dpooled.row(b) * inv_n;
      }
    }

    // x_out = x_mid + ffn_out(relu(ffn_in(ln2(x_mid))))
    Matrix dact(rows, cfg.ffn_dim());
    linear_backward(c.act, dx, layer.ffn_out, gl.ffn_out, &dact);
    const Matrix dpre = (c.pre.array() > 0.0).select(dact.array(), 0.0).matrix();
    Matrix da2(rows, d);
    linear_backward(c.a2, dpre, layer.ffn_in, gl.ffn_in, &da2);
    Matrix dmid_ln;
    layer_norm_backward(da2, c.ln2_xhat, c.ln2_rstd, layer.ln2, gl.ln2, dmid_ln);
    Matrix dmid = dx + dmid_ln;

    // x_mid = x_in + o(attn(q, k, v)(ln1(x_in)))
    Matrix dattn(rows, d);
    linear_backward(c.attn, dmid, layer.o, gl.o, &dattn);
    Matrix dq(rows, d), dk(rows, d), dv(rows, d);
    for (Index b = 0; b < nb; ++b) {
      attention_backward(c.q, c.k, c.v, &c.probs[b * cfg.heads], dattn, cfg.heads,
                         fwd.offsets[b], fwd.lengths[b], dq, dk, dv);
    }
    Matrix da1(rows, d), tmp(rows, d);
    linear_backward(c.a1, dq, layer.q, gl.q, &da1);
    linear_backward(c.a1, dk, layer.k, gl.k, &tmp);
    da1 += tmp;
    linear_backward(c.a1, dv, layer.v, gl.v, &tmp);
    da1 += tmp;
    Matrix din_ln;
    layer_norm_backward(da1, c.ln1_xhat, c.ln1_rstd, layer.ln1, gl.ln1, din_ln);
    dx = dmid + din_ln;
  }

  for (Index b = 0; b < nb; ++b) {
    for (Index t = 0; t < fwd.lengths[b]; ++t) {
      const auto row = dx.row(fwd.offsets[b] + t);
      grads.token_embedding.row(fwd.tokens[b][t]) += row;
      grads.position_embedding.row(t) += row;
    }
  }
}

// ---------------------------------------------------------------------------
// Losses

double cross_entropy(const Vector& logits, int label) {
  if (label < 0 || label >= logits.size()) {
    throw InputError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(logits.size()) + ")");
  }
  return -log_softmax_t(logits, 1.0)[label];
}

LossResult task_loss(const Vector& logits, int label, const Vector& teacher_logits,
                     double kd_weight, double temperature) {
  if (label < 0 || label >= logits.size()) {
    throw InputError("task_loss: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(logits.size()) + ")");
  }
  if (!(kd_weight >= 0.0 && kd_weight <= 1.0)) {
    throw ParameterError("task_loss: kd_weight must lie in [0, 1]");
  }
  if (!(temperature > 0.0)) throw ParameterError("task_loss: temperature must be positive");

  LossResult r;
  const Vector logp = log_softmax_t(logits, 1.0);
  r.loss = -(1.0 - kd_weight) * logp[label];
  r.grad = (1.0 - kd_weight) * logp.array().exp().matrix();
  r.grad[label] -= (1.0 - kd_weight);
  if (kd_weight > 0.0) {
    if (teacher_logits.size() != logits.size()) {
      throw DimensionError("task_loss: teacher has " + std::to_string(teacher_logits.size()) +
                           " logits, student " + std::to_string(logits.size()));
    }
    const Vector log_ps = log_softmax_t(logits, temperature);
    const Vector log_pt = log_softmax_t(teacher_logits, temperature);
    const Vector pt = log_pt.array().exp();
    const double kl = (pt.array() * (log_pt - log_ps).array()).sum();
    const double t2 = temperature * temperature;
    r.loss += kd_weight * t2 * kl;
    r.grad += kd_weight * temperature * (log_ps.array().exp().matrix() - pt);
  }
  return r;
}

double multi_exit_loss(const BackboneParams& params, std::span<const TokenSequence> batch,
                       std::span<const int> labels, const Matrix& teacher_logits,
                       const MultiExitObjective& objective, BackboneParams* grads) {
  if (labels.size() != batch.size()) {
    throw DimensionError("multi_exit_loss: " + std::to_string(batch.size()) +
                         " sequences but " + std::to_string(labels.size()) + " labels");
  }
  if (objective.exits.empty()) throw ParameterError("multi_exit_loss: no exits selected");
  int depth = 0;
  for (int e : objective.exits) depth = std::max(depth, e);
  const bool use_teacher = objective.kd_weight > 0.0;
  if (use_teacher && (teacher_logits.rows() != static_cast<Index>(batch.size()) ||
                      teacher_logits.cols() != params.config.num_classes)) {
    throw DimensionError("multi_exit_loss: teacher logits " +
                         shape_string(teacher_logits.rows(), teacher_logits.cols()));
  }

  auto fwd = forward_batch(params, batch, depth, grads != nullptr);
  const Index nb = static_cast<Index>(batch.size());
  const double scale = 1.0 / (static_cast<double>(nb) * objective.exits.size());
  std::vector<Matrix> dlogits(depth);
  double total = 0.0;
  const Vector no_teacher;
  for (int e : objective.exits) {
    const bool final_exit = e == params.config.num_layers;
    const double w = (final_exit && !objective.distill_final_exit) ? 0.0 : objective.kd_weight;
    const Matrix& logits = fwd.exit_logits[e - 1];
    Matrix& dl = dlogits[e - 1];
    if (dl.size() == 0) dl = Matrix::Zero(nb, logits.cols());
    for (Index b = 0; b < nb; ++b) {
      const Vector z = logits.row(b).transpose();
      const Vector t = use_teacher ? Vector(teacher_logits.row(b).transpose()) : no_teacher;
      const auto r = task_loss(z, labels[b], t, w, objective.temperature);
      total += r.loss * scale;
      dl.row(b) += (r.grad * scale).transpose();
    }
  }
  if (grads) backward_batch(params, fwd, dlogits, *grads);
  return total;
}

// ---------------------------------------------------------------------------
// Accounting and folding

std::int64_t linear_flops(std::int64_t rows, const Linear& lin) {
  const std::int64_t in = lin.in_dim();
  const std::int64_t out = lin.out_dim();
  if (lin.folded) return 2 * rows * lin.left.cols() * (in + out);
  return 2 * rows * in * out;
}

std::int64_t layer_flops(const BackboneConfig& config) {
  const std::int64_t n = config.max_seq_len;
  const std::int64_t d = config.hidden;
  return 8 * n * d * d + 4 * n * n * d + 16 * n * d * d;
}

std::int64_t exit_head_flops(const BackboneConfig& config) {
  return 2 * static_cast<std::int64_t>(config.hidden) * config.num_classes;
}

std::int64_t flops_of_depth(const BackboneConfig& config, int depth) {
  check_depth(config, depth);
  return layer_flops(config) * depth + exit_head_flops(config);
}

std::int64_t flops_of_depth(const BackboneParams& params, int depth) {
  const auto& cfg = params.config;
  check_depth(cfg, depth);
  const std::int64_t n = cfg.max_seq_len;
  std::int64_t total = 0;
  for (int i = 0; i < depth; ++i) {
    const auto& l = params.layers[i];
    for (const Linear* lin : {&l.q, &l.k, &l.v, &l.o, &l.ffn_in, &l.ffn_out}) {
      total += linear_flops(n, *lin);
    }
    total += 4 * n * n * cfg.hidden;
  }
  return total + linear_flops(1, params.exits[depth - 1].out);
}

BackboneParams fold_layers(const BackboneParams& params, double energy_ratio) {
  if (params.folded()) throw ParameterError("fold_layers: parameters are already folded");
  BackboneParams out = params;
  for (auto& layer : out.layers) {
    for (Linear* lin : {&layer.q, &layer.k, &layer.v, &layer.o, &layer.ffn_in, &layer.ffn_out}) {
      const Index m = lin->weight.rows();
      const Index n = lin->weight.cols();
      auto f = truncated_svd(lin->weight, energy_ratio);
      lin->left = std::move(f.left);
      lin->right = std::move(f.right);
      lin->energy_retained = f.energy_retained;
      lin->compressive = f.rank * (m + n) < m * n;
      lin->folded = true;
      lin->weight.resize(0, 0);
    }
  }
  return out;
}

}  // namespace dyndepth
