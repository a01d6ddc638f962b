#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyndepth/random.hpp"
#include "dyndepth/sequence.hpp"
#include "dyndepth/tensor_math.hpp"

namespace dyndepth {

using MatrixRef = Eigen::Ref<Matrix>;
using ConstMatrixRef = Eigen::Ref<const Matrix>;

struct BackboneConfig {
  int num_layers = 12;
  int hidden = 64;
  int heads = 4;
  int ffn_mult = 4;
  int num_classes = 4;
  int vocab_size = 32;
  int max_seq_len = 16;

  int head_dim() const { return hidden / heads; }
  int ffn_dim() const { return hidden * ffn_mult; }
  void validate() const;
};

/// y = x W + b, with W optionally stored as a rank-r product left * right.
struct Linear {
  Matrix weight;  // in x out; empty when folded
  Matrix left;    // in x r
  Matrix right;   // r x out
  Matrix bias;    // 1 x out
  bool folded = false;
  bool compressive = true;
  double energy_retained = 1.0;

  Index in_dim() const { return folded ? left.rows() : weight.rows(); }
  Index out_dim() const { return bias.cols(); }
  Index rank() const { return folded ? left.cols() : std::min(weight.rows(), weight.cols()); }
  Index parameter_count() const {
    return (folded ? left.size() + right.size() : weight.size()) + bias.size();
  }
  Matrix dense() const { return folded ? Matrix(left * right) : weight; }
};

struct LayerNormParams {
  Matrix gamma;  // 1 x d
  Matrix beta;   // 1 x d
};

struct EncoderLayer {
  LayerNormParams ln1;
  Linear q, k, v, o;
  LayerNormParams ln2;
  Linear ffn_in, ffn_out;
};

struct ExitHead {
  LayerNormParams ln;
  Linear out;
};

struct BackboneParams {
  BackboneConfig config;
  Matrix token_embedding;     // vocab x d
  Matrix position_embedding;  // max_seq_len x d
  std::vector<EncoderLayer> layers;
  std::vector<ExitHead> exits;

  /// Weights ~ N(0, stddev^2), biases zero, layer-norm gains one.
  static BackboneParams init(const BackboneConfig& config, Rng& rng, double stddev = 0.02);
  static BackboneParams zeros(const BackboneConfig& config);
  /// Same structure (including folded factor shapes), all entries zero.
  static BackboneParams zeros_like(const BackboneParams& other);

  bool folded() const;
  Index parameter_count() const;

  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;
};

// ---------------------------------------------------------------------------
// Kernels shared by the eager path and the plan interpreter.

constexpr double kLayerNormEps = 1e-5;

void layer_norm_forward(ConstMatrixRef x, const LayerNormParams& p, MatrixRef y,
                        Matrix* xhat = nullptr, Vector* rstd = nullptr);

/// `scratch`, when given, must hold rows x rank doubles (folded weights only).
void linear_forward(ConstMatrixRef x, const Linear& lin, MatrixRef y,
                    double* scratch = nullptr);

/// Multi-head self-attention over one sequence. `probs`, when given, receives
/// one row-stochastic n x n matrix per head. `scratch` must hold n*n doubles.
void attention_forward(ConstMatrixRef q, ConstMatrixRef k, ConstMatrixRef v, int heads,
                       MatrixRef out, std::vector<Matrix>* probs = nullptr,
                       double* scratch = nullptr);

// ---------------------------------------------------------------------------
// Forward passes.

struct ExitOutputs {
  std::vector<Vector> logits_per_exit;  // exits 1..depth
  Matrix hidden;                        // n x d output of layer `depth`
};

/// Runs exactly `depth` encoder layers on one sequence.
ExitOutputs forward_to_depth(std::span<const int> tokens, const BackboneParams& params,
                             int depth);

struct LayerCache {
  Matrix x_in;
  Matrix ln1_xhat, a1;
  Vector ln1_rstd;
  Matrix q, k, v, attn;
  std::vector<Matrix> probs;  // batch * heads
  Matrix x_mid;
  Matrix ln2_xhat, a2;
  Vector ln2_rstd;
  Matrix pre, act;
  // exit head
  Matrix pooled, head_xhat, head_z;
  Vector head_rstd;
};

struct BatchForward {
  int depth = 0;
  std::vector<Index> offsets, lengths;
  std::vector<Matrix> exit_logits;  // per exit: batch x classes
  std::vector<LayerCache> layers;   // filled when caching
  Matrix output;                    // rows x d after the last layer
  std::vector<TokenSequence> tokens;
};

/// Batched forward: sequences are stacked row-wise so every projection is one
/// GEMM. Attention runs per sequence.
BatchForward forward_batch(const BackboneParams& params,
                           std::span<const TokenSequence> batch, int depth,
                           bool keep_cache);

/// Accumulates parameter gradients into `grads`. `dlogits[e]` is the loss
/// gradient at exit e+1 (batch x classes); empty matrices contribute nothing.
void backward_batch(const BackboneParams& params, const BatchForward& fwd,
                    const std::vector<Matrix>& dlogits, BackboneParams& grads);

// ---------------------------------------------------------------------------
// Losses.

struct LossResult {
  double loss = 0.0;
  Vector grad;  // d loss / d logits
};

double cross_entropy(const Vector& logits, int label);

/// (1 - w) * CE(logits, label) + w * T^2 * KL(softmax(teacher/T) || softmax(logits/T)).
LossResult task_loss(const Vector& logits, int label, const Vector& teacher_logits,
                     double kd_weight, double temperature);

struct MultiExitObjective {
  std::vector<int> exits;  // 1-based exits that carry a loss, averaged
  double kd_weight = 0.5;
  double temperature = 2.0;
  bool distill_final_exit = false;  // teacher is the full-depth model itself
};

/// Mean over the batch and the listed exits of task_loss. `teacher_logits`
/// (batch x classes) may be empty when kd_weight is 0. Gradients are
/// accumulated into `grads` when non-null.
double multi_exit_loss(const BackboneParams& params, std::span<const TokenSequence> batch,
                       std::span<const int> labels, const Matrix& teacher_logits,
                       const MultiExitObjective& objective, BackboneParams* grads);

// ---------------------------------------------------------------------------
// Cost accounting and folding.

std::int64_t linear_flops(std::int64_t rows, const Linear& lin);
/// Attention 8nd^2 + 4n^2d plus FFN 16nd^2 at n = max_seq_len.
std::int64_t layer_flops(const BackboneConfig& config);
std::int64_t exit_head_flops(const BackboneConfig& config);
/// C * l + one exit head, dense weights.
std::int64_t flops_of_depth(const BackboneConfig& config, int depth);
/// Folding-aware variant: sums the actual factor shapes of the first `depth` layers.
std::int64_t flops_of_depth(const BackboneParams& params, int depth);

/// Replaces every attention and FFN weight by truncated-SVD factors.
BackboneParams fold_layers(const BackboneParams& params, double energy_ratio = 0.9);

}  // namespace dyndepth
