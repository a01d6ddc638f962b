#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "dyndepth/errors.hpp"

namespace dyndepth {

// Row-major to match the flat checkpoint layout.
template <typename Scalar>
using MatrixX =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using Index = Eigen::Index;

inline std::string shape_string(Index rows, Index cols) {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

/// Dense product a·b. Single-threaded, so the summation order is fixed for
/// a given pair of shapes and repeated calls are bitwise identical.
template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                          const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, lhs " +
                         shape_string(a.rows(), a.cols()) + " rhs " +
                         shape_string(b.rows(), b.cols()));
  }
  MatrixX<typename DerivedA::Scalar> out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

/// Temperature-scaled softmax over a vector of logits.
template <typename Derived>
VectorX<typename Derived::Scalar> softmax_t(
    const Eigen::MatrixBase<Derived>& logits,
    typename Derived::Scalar temperature = 1) {
  using Scalar = typename Derived::Scalar;
  if (!(temperature > Scalar(0))) {
    throw ParameterError("softmax_t: temperature must be positive, got " +
                         std::to_string(static_cast<double>(temperature)));
  }
  VectorX<Scalar> z = logits.derived().reshaped() / temperature;
  z.array() -= z.maxCoeff();
  z = z.array().exp();
  return z / z.sum();
}

template <typename Derived>
VectorX<typename Derived::Scalar> log_softmax_t(
    const Eigen::MatrixBase<Derived>& logits,
    typename Derived::Scalar temperature = 1) {
  using Scalar = typename Derived::Scalar;
  if (!(temperature > Scalar(0))) {
    throw ParameterError("log_softmax_t: temperature must be positive");
  }
  VectorX<Scalar> z = logits.derived().reshaped() / temperature;
  const Scalar m = z.maxCoeff();
  const Scalar lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

/// In-place numerically stable softmax of every row.
template <typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp();
    row /= row.sum();
  }
}

template <typename Scalar>
struct LowRankFactors {
  MatrixX<Scalar> left;   // m x r, singular values folded in
  MatrixX<Scalar> right;  // r x n
  Index rank = 0;
  Scalar energy_retained = 1;
  VectorX<Scalar> singular_values;  // full spectrum, descending

  MatrixX<Scalar> reconstruct() const {
    if (rank == 0) return MatrixX<Scalar>::Zero(left.rows(), right.cols());
    return left * right;
  }
  Index parameter_count() const { return left.size() + right.size(); }
};

/// Smallest-rank factorisation keeping at least `energy_ratio` of the squared
/// singular-value mass. An all-zero matrix yields rank 0 with full energy.
template <typename Derived>
LowRankFactors<typename Derived::Scalar> truncated_svd(
    const Eigen::MatrixBase<Derived>& w, typename Derived::Scalar energy_ratio) {
  using Scalar = typename Derived::Scalar;
  if (!(energy_ratio > Scalar(0) && energy_ratio <= Scalar(1))) {
    throw ParameterError("truncated_svd: energy_ratio must lie in (0, 1]");
  }
  if (!all_finite(w)) throw ParameterError("truncated_svd: non-finite input");

  const Index m = w.rows();
  const Index n = w.cols();
  LowRankFactors<Scalar> out;
  Eigen::JacobiSVD<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> svd(
      w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  out.singular_values = svd.singularValues();

  const VectorX<Scalar> energy = out.singular_values.array().square();
  const Scalar total = energy.sum();
  if (total == Scalar(0)) {
    out.left = MatrixX<Scalar>::Zero(m, 0);
    out.right = MatrixX<Scalar>::Zero(0, n);
    out.rank = 0;
    out.energy_retained = 1;
    return out;
  }
  // Relative slack absorbs round-off in exactly-representable ratios such as
  // 9/(9+1) against 0.9.
  const Scalar target =
      energy_ratio * total * (Scalar(1) - 64 * std::numeric_limits<Scalar>::epsilon());
  Index r = 0;
  Scalar kept = 0;
  while (r < energy.size() && kept < target) kept += energy[r++];

  out.rank = r;
  out.energy_retained = std::min<Scalar>(Scalar(1), kept / total);
  out.left = svd.matrixU().leftCols(r) * out.singular_values.head(r).asDiagonal();
  out.right = svd.matrixV().leftCols(r).transpose();
  return out;
}

using ScalarFunction = std::function<double(const Vector&)>;
using GradientFunction = std::function<Vector(const Vector&)>;

/// Maximum over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const ScalarFunction& f, const GradientFunction& grad,
                         const Vector& x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ParameterError("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  const Vector analytic = grad(x);
  if (analytic.size() != x.size()) {
    throw DimensionError("grad_check: gradient has " +
                         std::to_string(analytic.size()) + " entries, input " +
                         std::to_string(x.size()));
  }
  Vector probe = x;
  double worst = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(probe);
    probe[i] = x[i] - eps;
    const double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw EvaluationError("grad_check: non-finite function value at coordinate " +
                            std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * eps);
    const double err =
        std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace dyndepth
