#pragma once

// Independent reference computations used only by tests. Nothing here calls
// into the library's numeric kernels.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "dyndepth/backbone.hpp"
#include "dyndepth/feature_extractor.hpp"
#include "dyndepth/tensor_math.hpp"

namespace oracle {

using dyndepth::Index;
using dyndepth::Matrix;
using dyndepth::Vector;

inline Matrix triple_loop_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.cols(); ++j) {
      long double acc = 0;
      for (Index k = 0; k < a.cols(); ++k) acc += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(acc);
    }
  }
  return out;
}

/// One-sided (Hestenes) Jacobi: orthogonalises column pairs until the
/// off-diagonal mass vanishes; singular values are the final column norms.
inline std::vector<double> jacobi_singular_values(Matrix a, double tol = 1e-12) {
  const Index n = a.cols();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (Index p = 0; p < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (Index i = 0; i < a.rows(); ++i) {
          alpha += a(i, p) * a(i, p);
          beta += a(i, q) * a(i, q);
          gamma += a(i, p) * a(i, q);
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Index i = 0; i < a.rows(); ++i) {
          const double ap = a(i, p);
          const double aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
      }
    }
    if (off < tol) break;
  }
  std::vector<double> sv;
  for (Index j = 0; j < n; ++j) {
    double s = 0;
    for (Index i = 0; i < a.rows(); ++i) s += a(i, j) * a(i, j);
    sv.push_back(std::sqrt(s));
  }
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

inline double relu(double x) { return x > 0 ? x : 0; }


using Rows = std::vector<std::vector<double>>;

inline Rows layer_norm_rows(const Rows& x, const Matrix& gamma, const Matrix& beta) {
  Rows y = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double d = static_cast<double>(x[r].size());
    double mean = 0;
    for (double v : x[r]) mean += v;
    mean /= d;
    double var = 0;
    for (double v : x[r]) var += (v - mean) * (v - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + dyndepth::kLayerNormEps);
    for (std::size_t j = 0; j < x[r].size(); ++j) {
      y[r][j] = (x[r][j] - mean) * inv * gamma(0, j) + beta(0, j);
    }
  }
  return y;
}

inline Rows affine_rows(const Rows& x, const dyndepth::Linear& lin) {
  const Matrix w = lin.dense();
  Rows y(x.size(), std::vector<double>(w.cols()));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (Index j = 0; j < w.cols(); ++j) {
      double acc = lin.bias(0, j);
      for (Index i = 0; i < w.rows(); ++i) acc += x[r][i] * w(i, j);
      y[r][j] = acc;
    }
  }
  return y;
}

/// Straight-line scalar re-implementation of the encoder with per-layer exits.
inline std::vector<std::vector<double>> scalar_exit_logits(const std::vector<int>& tokens,
                                                           const dyndepth::BackboneParams& p,
                                                           int depth) {
  const auto& cfg = p.config;
  const std::size_t n = tokens.size();
  const int d = cfg.hidden;
  const int dh = cfg.head_dim();
  Rows x(n, std::vector<double>(d));
  for (std::size_t t = 0; t < n; ++t) {
    for (int j = 0; j < d; ++j) x[t][j] = p.token_embedding(tokens[t], j) + p.position_embedding(t, j);
  }
  std::vector<std::vector<double>> logits;
  for (int l = 0; l < depth; ++l) {
    const auto& L = p.layers[l];
    const Rows a = layer_norm_rows(x, L.ln1.gamma, L.ln1.beta);
    const Rows q = affine_rows(a, L.q), k = affine_rows(a, L.k), v = affine_rows(a, L.v);
    Rows att(n, std::vector<double>(d, 0.0));
    for (int h = 0; h < cfg.heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0;
          for (int c = 0; c < dh; ++c) acc += q[i][h * dh + c] * k[j][h * dh + c];
          s[j] = acc / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& e : s) {
          e = std::exp(e - mx);
          z += e;
        }
        for (int c = 0; c < dh; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += s[j] / z * v[j][h * dh + c];
          att[i][h * dh + c] = acc;
        }
      }
    }
    const Rows o = affine_rows(att, L.o);
    Rows xm = x;
    for (std::size_t t = 0; t < n; ++t)
      for (int j = 0; j < d; ++j) xm[t][j] += o[t][j];
    Rows f = affine_rows(layer_norm_rows(xm, L.ln2.gamma, L.ln2.beta), L.ffn_in);
    for (auto& row : f)
      for (auto& e : row) e = relu(e);
    const Rows g = affine_rows(f, L.ffn_out);
    for (std::size_t t = 0; t < n; ++t)
      for (int j = 0; j < d; ++j) x[t][j] = xm[t][j] + g[t][j];

    Rows pooled(1, std::vector<double>(d, 0.0));
    for (std::size_t t = 0; t < n; ++t)
      for (int j = 0; j < d; ++j) pooled[0][j] += x[t][j] / static_cast<double>(n);
    const auto& H = p.exits[l];
    logits.push_back(affine_rows(layer_norm_rows(pooled, H.ln.gamma, H.ln.beta), H.out)[0]);
  }
  return logits;
}


/// Scalar-loop text path: conv(same) -> relu, then pool-by-pairs -> conv -> relu twice.
inline std::array<std::vector<double>, 3> scalar_pooled_features(const std::vector<int>& tokens,
                                                                 const dyndepth::ExtractorParams& p) {
  const int kernel = p.config.kernel;
  Rows x(tokens.size(), std::vector<double>(p.config.embed_dim));
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (int j = 0; j < p.config.embed_dim; ++j) x[t][j] = p.embedding(tokens[t], j);

  std::array<std::vector<double>, 3> pooled;
  for (int s = 0; s < 3; ++s) {
    if (s > 0) {
      Rows down((x.size() + 1) / 2, std::vector<double>(x[0].size()));
      for (std::size_t t = 0; t < down.size(); ++t)
        for (std::size_t j = 0; j < x[0].size(); ++j)
          down[t][j] = 2 * t + 1 < x.size() ? (x[2 * t][j] + x[2 * t + 1][j]) / 2 : x[2 * t][j];
      x = down;
    }
    const auto& w = p.convs[s].weight;
    const std::size_t in = x[0].size();
    const Index out = w.cols();
    Rows y(x.size(), std::vector<double>(out));
    for (std::size_t t = 0; t < x.size(); ++t) {
      for (Index c = 0; c < out; ++c) {
        double acc = p.convs[s].bias(0, c);
        for (int k = 0; k < kernel; ++k) {
          const long src = static_cast<long>(t) + k - kernel / 2;
          if (src < 0 || src >= static_cast<long>(x.size())) continue;
          for (std::size_t i = 0; i < in; ++i) acc += x[src][i] * w(k * in + i, c);
        }
        y[t][c] = relu(acc);
      }
    }
    x = y;
    pooled[s].assign(2 * out, 0.0);
    for (Index c = 0; c < out; ++c) {
      double sum = 0, mx = -1e300;
      for (const auto& row : x) {
        sum += row[c];
        mx = std::max(mx, row[c]);
      }
      pooled[s][c] = sum / static_cast<double>(x.size());
      pooled[s][out + c] = mx;
    }
  }
  return pooled;
}

/// Plain least-squares boosting with exhaustive midpoint splits and
/// mean-residual leaves, written without histograms.
inline std::vector<double> least_squares_boosting(const Matrix& x, const std::vector<double>& y,
                                                  int trees, int max_depth, double lr,
                                                  int min_leaf) {
  const std::size_t n = y.size();
  double mean = 0;
  for (double v : y) mean += v / static_cast<double>(n);
  std::vector<double> pred(n, mean);
  for (int t = 0; t < trees; ++t) {
    std::vector<double> resid(n);
    for (std::size_t i = 0; i < n; ++i) resid[i] = y[i] - pred[i];
    std::vector<double> delta(n, 0.0);
    std::vector<std::pair<std::vector<std::size_t>, int>> stack;
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    stack.push_back({all, 0});
    while (!stack.empty()) {
      auto [idx, depth] = stack.back();
      stack.pop_back();
      double sum = 0;
      for (auto i : idx) sum += resid[i];
      const double sse_parent = sum * sum / idx.size();
      int best_f = -1;
      double best_thr = 0, best_gain = 1e-12;
      if (depth < max_depth && static_cast<int>(idx.size()) >= 2 * min_leaf) {
        for (Index f = 0; f < x.cols(); ++f) {
          std::vector<double> col;
          for (Index i = 0; i < x.rows(); ++i) col.push_back(x(i, f));
          std::sort(col.begin(), col.end());
          col.erase(std::unique(col.begin(), col.end()), col.end());
          for (std::size_t k = 0; k + 1 < col.size(); ++k) {
            const double thr = 0.5 * (col[k] + col[k + 1]);
            double sl = 0;
            std::size_t nl = 0;
            for (auto i : idx) {
              if (x(i, f) <= thr) {
                sl += resid[i];
                ++nl;
              }
            }
            const std::size_t nr = idx.size() - nl;
            if (static_cast<int>(nl) < min_leaf || static_cast<int>(nr) < min_leaf) continue;
            const double sr = sum - sl;
            const double gain = sl * sl / nl + sr * sr / nr - sse_parent;
            if (gain > best_gain) {
              best_gain = gain;
              best_f = static_cast<int>(f);
              best_thr = thr;
            }
          }
        }
      }
      if (best_f < 0) {
        for (auto i : idx) delta[i] = sum / idx.size();
        continue;
      }
      std::vector<std::size_t> l, r;
      for (auto i : idx) (x(i, best_f) <= best_thr ? l : r).push_back(i);
      stack.push_back({r, depth + 1});
      stack.push_back({l, depth + 1});
    }
    for (std::size_t i = 0; i < n; ++i) pred[i] += lr * delta[i];
  }
  return pred;
}

}  // namespace oracle
