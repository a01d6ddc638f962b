#pragma once

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyndepth/random.hpp"
#include "dyndepth/tensor_math.hpp"

namespace dyndepth {

struct ExtractorConfig {
  int vocab_size = 32;
  int max_seq_len = 256;
  int embed_dim = 128;
  std::array<int, 3> channels{64, 128, 256};
  int kernel = 3;
};

/// 1-D convolution, stride 1, same padding. `weight` stacks the kernel taps:
/// rows [k*in, (k+1)*in) hold tap k, so y[t] = b + sum_k x[t+k-pad] * W_k.
struct Conv1d {
  Matrix weight;
  Matrix bias;  // 1 x out

  Index in_channels(int kernel) const { return weight.rows() / kernel; }
  Index out_channels() const { return weight.cols(); }
};

struct ExtractorParams {
  ExtractorConfig config;
  Matrix embedding;  // vocab x embed_dim
  std::array<Conv1d, 3> convs;

  static ExtractorParams init(const ExtractorConfig& config, Rng& rng);
  static ExtractorParams zeros(const ExtractorConfig& config);

  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;
};

struct MultiScaleFeatures {
  Matrix h1;  // len x 64
  Matrix h2;  // ceil(len/2) x 128
  Matrix h3;  // ceil(len/4) x 256
  Vector pooled1, pooled2, pooled3;  // mean ++ max, 2 x channels each
};

Matrix conv1d_same(const Matrix& x, const Conv1d& conv, int kernel);
Matrix mean_pool_stride2(const Matrix& x);
Vector mean_max_pool(const Matrix& h);

MultiScaleFeatures extract(std::span<const int> tokens, const ExtractorParams& params);

/// Same pipeline starting from an already-embedded sequence (len x embed_dim).
MultiScaleFeatures extract_embedded(const Matrix& embedded, const ExtractorParams& params);

/// Upper bounds on the l2 operator norm of each conv stage: sum of the
/// spectral norms of the kernel taps.
std::array<double, 3> conv_operator_norm_bounds(const ExtractorParams& params);

}  // namespace dyndepth
