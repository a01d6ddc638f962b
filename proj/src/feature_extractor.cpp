#include "dyndepth/feature_extractor.hpp"

#include <cmath>

namespace dyndepth {

ExtractorParams ExtractorParams::init(const ExtractorConfig& config, Rng& rng) {
  ExtractorParams p;
  p.config = config;
  p.embedding = random_normal(config.vocab_size, config.embed_dim, 1.0, rng);
  int in = config.embed_dim;
  for (int s = 0; s < 3; ++s) {
    const int out = config.channels[s];
    const double stddev = std::sqrt(2.0 / (config.kernel * in));
    p.convs[s].weight = random_normal(config.kernel * in, out, stddev, rng);
    p.convs[s].bias = Matrix::Zero(1, out);
    in = out;
  }
  return p;
}

ExtractorParams ExtractorParams::zeros(const ExtractorConfig& config) {
  ExtractorParams p;
  p.config = config;
  p.embedding = Matrix::Zero(config.vocab_size, config.embed_dim);
  int in = config.embed_dim;
  for (int s = 0; s < 3; ++s) {
    p.convs[s].weight = Matrix::Zero(config.kernel * in, config.channels[s]);
    p.convs[s].bias = Matrix::Zero(1, config.channels[s]);
    in = config.channels[s];
  }
  return p;
}

std::vector<std::pair<std::string, Matrix*>> ExtractorParams::tensors() {
  std::vector<std::pair<std::string, Matrix*>> out{{"extractor.embedding", &embedding}};
  for (int s = 0; s < 3; ++s) {
    const std::string prefix = "extractor.conv" + std::to_string(s + 1);
    out.emplace_back(prefix + ".weight", &convs[s].weight);
    out.emplace_back(prefix + ".bias", &convs[s].bias);
  }
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> ExtractorParams::tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, m] : const_cast<ExtractorParams*>(this)->tensors()) {
    out.emplace_back(name, m);
  }
  return out;
}

Matrix conv1d_same(const Matrix& x, const Conv1d& conv, int kernel) {
  const Index len = x.rows();
  const Index in = x.cols();
  if (conv.weight.rows() != kernel * in) {
    throw DimensionError("conv1d_same: input " + shape_string(len, in) +
                         " vs weight " +
                         shape_string(conv.weight.rows(), conv.weight.cols()));
  }
  const int pad = kernel / 2;
  Matrix cols = Matrix::Zero(len, kernel * in);
  for (Index t = 0; t < len; ++t) {
    for (int k = 0; k < kernel; ++k) {
      const Index src = t + k - pad;
      if (src >= 0 && src < len) cols.block(t, k * in, 1, in) = x.row(src);
    }
  }
  Matrix y = matmul(cols, conv.weight);
  y.rowwise() += conv.bias.row(0);
  return y;
}

Matrix mean_pool_stride2(const Matrix& x) {
  const Index out_len = (x.rows() + 1) / 2;
  Matrix y(out_len, x.cols());
  for (Index t = 0; t < out_len; ++t) {
    if (2 * t + 1 < x.rows()) {
      y.row(t) = 0.5 * (x.row(2 * t) + x.row(2 * t + 1));
    } else {
      y.row(t) = x.row(2 * t);
    }
  }
  return y;
}

Vector mean_max_pool(const Matrix& h) {
  Vector out(2 * h.cols());
  out.head(h.cols()) = h.colwise().mean().transpose();
  out.tail(h.cols()) = h.colwise().maxCoeff().transpose();
  return out;
}

MultiScaleFeatures extract_embedded(const Matrix& embedded, const ExtractorParams& params) {
  const int kernel = params.config.kernel;
  MultiScaleFeatures f;
  f.h1 = conv1d_same(embedded, params.convs[0], kernel).cwiseMax(0.0);
  f.h2 = conv1d_same(mean_pool_stride2(f.h1), params.convs[1], kernel).cwiseMax(0.0);
  f.h3 = conv1d_same(mean_pool_stride2(f.h2), params.convs[2], kernel).cwiseMax(0.0);
  f.pooled1 = mean_max_pool(f.h1);
  f.pooled2 = mean_max_pool(f.h2);
  f.pooled3 = mean_max_pool(f.h3);
  return f;
}

MultiScaleFeatures extract(std::span<const int> tokens, const ExtractorParams& params) {
  const auto& cfg = params.config;
  if (tokens.empty()) throw InputError("extract: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len) {
    throw InputError("extract: sequence length " + std::to_string(tokens.size()) +
                     " exceeds maximum " + std::to_string(cfg.max_seq_len));
  }
  Matrix embedded(static_cast<Index>(tokens.size()), cfg.embed_dim);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const int tok = tokens[t];
    if (tok < 0 || tok >= cfg.vocab_size) {
      throw InputError("extract: token " + std::to_string(tok) + " at position " +
                       std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(cfg.vocab_size));
    }
    embedded.row(static_cast<Index>(t)) = params.embedding.row(tok);
  }
  return extract_embedded(embedded, params);
}

std::array<double, 3> conv_operator_norm_bounds(const ExtractorParams& params) {
  std::array<double, 3> out{};
  const int kernel = params.config.kernel;
  for (int s = 0; s < 3; ++s) {
    const auto& w = params.convs[s].weight;
    const Index in = w.rows() / kernel;
    double bound = 0.0;
    for (int k = 0; k < kernel; ++k) {
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(w.middleRows(k * in, in));
      bound += svd.singularValues()(0);
    }
    out[s] = bound;
  }
  return out;
}

}  // namespace dyndepth
