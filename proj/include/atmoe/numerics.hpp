#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>

#include "atmoe/error.hpp"

namespace atmoe {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = Matrix<double>;
using Vec = Vector<double>;
using Index = Eigen::Index;

template <typename Derived>
std::string shape_of(const Eigen::EigenBase<Derived>& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

/// Dense product with a fixed summation order: every output entry accumulates
/// a(i,0)b(0,j) + a(i,1)b(1,j) + ... left to right, independent of blocking.
template <typename Scalar>
Matrix<Scalar> matmul(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorKind::DimensionMismatch,
         "matmul: inner dimensions disagree (" + shape_of(a) + " x " + shape_of(b) + ")");
  }
  Matrix<Scalar> c = Matrix<Scalar>::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index k = 0; k < a.cols(); ++k) {
      const Scalar aik = a(i, k);
      c.row(i) += aik * b.row(k);
    }
  }
  return c;
}

/// a * b^T with the same ordering guarantees as matmul.
template <typename Scalar>
Matrix<Scalar> matmul_nt(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  if (a.cols() != b.cols()) {
    fail(ErrorKind::DimensionMismatch,
         "matmul_nt: inner dimensions disagree (" + shape_of(a) + " x " + shape_of(b) + "^T)");
  }
  const Matrix<Scalar> bt = b.transpose();
  return matmul(a, bt);
}

/// a^T * b with the same ordering guarantees as matmul.
template <typename Scalar>
Matrix<Scalar> matmul_tn(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  if (a.rows() != b.rows()) {
    fail(ErrorKind::DimensionMismatch,
         "matmul_tn: inner dimensions disagree (" + shape_of(a) + "^T x " + shape_of(b) + ")");
  }
  Matrix<Scalar> c = Matrix<Scalar>::Zero(a.cols(), b.cols());
  for (Index k = 0; k < a.rows(); ++k) {
    for (Index i = 0; i < a.cols(); ++i) {
      const Scalar aki = a(k, i);
      c.row(i) += aki * b.row(k);
    }
  }
  return c;
}

/// Matrix-vector product, row-wise dot products accumulated left to right.
template <typename Scalar>
Vector<Scalar> matvec(const Matrix<Scalar>& a, const Vector<Scalar>& x) {
  if (a.cols() != x.size()) {
    fail(ErrorKind::DimensionMismatch,
         "matvec: " + shape_of(a) + " cannot multiply vector of length " + std::to_string(x.size()));
  }
  Vector<Scalar> y(a.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    Scalar acc = 0;
    for (Index k = 0; k < a.cols(); ++k) acc += a(i, k) * x(k);
    y(i) = acc;
  }
  return y;
}

/// Temperature softmax. Entries equal to -inf are treated as masked and map to
/// exactly zero; the stabilising shift is the largest finite logit / tau.
template <typename Derived>
Vector<typename Derived::Scalar> softmax_temp(const Eigen::MatrixBase<Derived>& logits,
                                              typename Derived::Scalar tau) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > 0)) fail(ErrorKind::InvalidArgument, "softmax_temp: temperature must be positive");
  const Index n = logits.size();
  Scalar shift = -std::numeric_limits<Scalar>::infinity();
  for (Index i = 0; i < n; ++i) {
    const Scalar l = logits(i);
    if (std::isnan(l) || (std::isinf(l) && l > 0)) {
      fail(ErrorKind::InvalidArgument, "softmax_temp: logit " + std::to_string(i) + " is not a finite value or -inf");
    }
    if (std::isfinite(l)) shift = std::max(shift, l / tau);
  }
  if (!std::isfinite(shift)) fail(ErrorKind::InvalidArgument, "softmax_temp: every logit is -inf");
  Vector<Scalar> out(n);
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar l = logits(i);
    out(i) = std::isfinite(l) ? std::exp(l / tau - shift) : Scalar(0);
    total += out(i);
  }
  out /= total;
  return out;
}

/// Vector-Jacobian product of softmax_temp: given p = softmax(l / tau) and
/// dL/dp, returns dL/dl. Masked entries (p == 0) receive exactly zero.
template <typename Scalar>
Vector<Scalar> softmax_temp_backward(const Vector<Scalar>& p, const Vector<Scalar>& dp, Scalar tau) {
  const Scalar inner = p.dot(dp);
  Vector<Scalar> dl(p.size());
  for (Index i = 0; i < p.size(); ++i) dl(i) = p(i) == 0 ? Scalar(0) : p(i) * (dp(i) - inner) / tau;
  return dl;
}

/// Central-difference gradient of f at theta. order 2 is the two-point
/// formula, order 4 the five-point one (truncation O(h^4)).
template <typename F>
Vec finite_diff_grad(F&& f, const Vec& theta, double h, int order = 2) {
  if (!(h > 0)) fail(ErrorKind::InvalidArgument, "finite_diff_grad: step must be positive");
  if (order != 2 && order != 4) fail(ErrorKind::InvalidArgument, "finite_diff_grad: order must be 2 or 4");
  Vec grad(theta.size());
  Vec probe = theta;
  auto at = [&](Index i, double offset) {
    probe(i) = theta(i) + offset;
    const double v = f(static_cast<const Vec&>(probe));
    probe(i) = theta(i);
    if (!std::isfinite(v)) {
      fail(ErrorKind::Verification, "finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
    }
    return v;
  };
  for (Index i = 0; i < theta.size(); ++i) {
    const double d1 = at(i, h) - at(i, -h);
    if (order == 2) {
      grad(i) = d1 / (2.0 * h);
    } else {
      const double d2 = at(i, 2.0 * h) - at(i, -2.0 * h);
      grad(i) = (8.0 * d1 - d2) / (12.0 * h);
    }
  }
  return grad;
}

/// Tanh-approximated GELU and its derivative.
inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_derivative(double x) {
  constexpr double k = 0.7978845608028654;
  const double t = std::tanh(k * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

}  // namespace atmoe
