#pragma once

#include <cmath>
#include <vector>

#include "dyndepth/tensor_math.hpp"

namespace dyndepth {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimiser over any parameter struct exposing tensors().
/// Moment buffers are created lazily to match the first parameter set seen.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  template <class Params>
  void step(Params& params, const Params& grads, double lr) {
    auto p = params.tensors();
    const auto g = grads.tensors();
    if (g.size() != p.size()) throw DimensionError("Adam: gradient structure mismatch");
    if (m_.empty()) {
      for (const auto& [name, t] : p) {
        m_.push_back(Matrix::Zero(t->rows(), t->cols()));
        v_.push_back(Matrix::Zero(t->rows(), t->cols()));
      }
    }
    if (m_.size() != p.size()) throw DimensionError("Adam: parameter structure changed");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < p.size(); ++i) {
      Matrix& w = *p[i].second;
      const Matrix& gi = *g[i].second;
      if (gi.rows() != w.rows() || gi.cols() != w.cols() || m_[i].size() != w.size()) {
        throw DimensionError("Adam: shape mismatch at " + p[i].first);
      }
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * gi;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * gi.cwiseProduct(gi);
      w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
    }
  }

  void reset() {
    m_.clear();
    v_.clear();
    t_ = 0;
  }
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace dyndepth
