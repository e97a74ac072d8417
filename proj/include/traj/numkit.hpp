// Dense double-precision vector/matrix kernel shared by every other module.
//
// Matrices are row-major. Products are routed through Eigen maps so the same
// storage can be used by the per-interaction reference path and the batched
// training engine without copies.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace traj {

/// Every recoverable failure in the library is reported with this type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Vec = std::vector<double>;

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

/// Non-owning row-major view; `T` is `double` or `const double`.
template <class T>
class MatrixView {
 public:
  MatrixView() = default;
  MatrixView(T* data, std::size_t rows, std::size_t cols)
      : data_(data), rows_(rows), cols_(cols) {}

  // Mutable views convert to const views.
  template <class U>
    requires(std::is_const_v<T> && std::is_same_v<std::remove_const_t<T>, U>)
  MatrixView(MatrixView<U> other)  // NOLINT(google-explicit-constructor)
      : data_(other.data()), rows_(other.rows()), cols_(other.cols()) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return rows_ * cols_; }
  T* data() const { return data_; }

  T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }
  std::span<T> row(std::size_t r) const {
    return {data_ + r * cols_, cols_};
  }
  std::span<T> values() const { return {data_, size()}; }

  auto eigen() const {
    if constexpr (std::is_const_v<T>) {
      return ConstRowMap(data_, static_cast<Eigen::Index>(rows_),
                         static_cast<Eigen::Index>(cols_));
    } else {
      return RowMap(data_, static_cast<Eigen::Index>(rows_),
                    static_cast<Eigen::Index>(cols_));
    }
  }

 private:
  T* data_ = nullptr;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
};

using MatRef = MatrixView<double>;
using ConstMatRef = MatrixView<const double>;

/// Owning row-major dense matrix.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, Vec values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw Error("Mat: " + std::to_string(values_.size()) +
                  " values do not fill a " + std::to_string(rows_) + "x" +
                  std::to_string(cols_) + " matrix");
    }
  }
  Mat(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    values_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw Error("Mat: ragged initializer");
      values_.insert(values_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }

  double& operator()(std::size_t r, std::size_t c) {
    return values_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return values_[r * cols_ + c];
  }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }

  Vec& values() { return values_; }
  const Vec& values() const { return values_; }

  MatRef view() { return {values_.data(), rows_, cols_}; }
  ConstMatRef view() const { return {values_.data(), rows_, cols_}; }
  operator MatRef() { return view(); }             // NOLINT
  operator ConstMatRef() const { return view(); }  // NOLINT

  bool operator==(const Mat&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec values_;
};

inline std::string shape_string(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

inline ConstVecMap eigen_vec(std::span<const double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}
inline VecMap eigen_vec(std::span<double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

/// out += m * v
inline void matvec_add(ConstMatRef m, std::span<const double> v,
                       std::span<double> out) {
  if (m.cols() != v.size() || m.rows() != out.size()) {
    throw Error("matvec: matrix " + shape_string(m.rows(), m.cols()) +
                " vs vector of length " + std::to_string(v.size()) +
                " into length " + std::to_string(out.size()));
  }
  if (m.size() == 0) return;
  eigen_vec(out).noalias() += m.eigen() * eigen_vec(v);
}

inline Vec matvec(ConstMatRef m, std::span<const double> v) {
  if (m.cols() != v.size()) {
    throw Error("matvec: matrix " + shape_string(m.rows(), m.cols()) +
                " vs vector of length " + std::to_string(v.size()));
  }
  Vec out(m.rows(), 0.0);
  matvec_add(m, v, out);
  return out;
}

/// out += m^T * v
inline void matvec_transposed_add(ConstMatRef m, std::span<const double> v,
                                  std::span<double> out) {
  if (m.rows() != v.size() || m.cols() != out.size()) {
    throw Error("matvec_transposed: matrix " + shape_string(m.rows(), m.cols()) +
                " vs vector of length " + std::to_string(v.size()));
  }
  if (m.size() == 0) return;
  eigen_vec(out).noalias() += m.eigen().transpose() * eigen_vec(v);
}

inline double sigmoid(double x) {
  // Split by sign so exp never overflows.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Vec sigmoid(std::span<const double> v) {
  Vec out(v.size());
  std::transform(v.begin(), v.end(), out.begin(),
                 [](double x) { return sigmoid(x); });
  return out;
}

inline void require_same_length(std::span<const double> a,
                                std::span<const double> b, const char* op) {
  if (a.size() != b.size()) {
    throw Error(std::string(op) + ": length mismatch " +
                std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
}

inline Vec hadamard(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "hadamard");
  Vec out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] * b[k];
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "dot");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline double l2_norm(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "l2_distance");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return std::sqrt(s);
}

inline Vec concat(std::span<const double> a, std::span<const double> b) {
  Vec out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(),
                     [](double x) { return std::isfinite(x); });
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param_index = 0;
  bool passed = false;
};

/// Compares `analytic` against central differences of `loss` around
/// `params`. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator.
inline GradCheckReport finite_diff_check(
    const std::function<double(std::span<const double>)>& loss,
    std::span<const double> params, std::span<const double> analytic,
    double eps, double tolerance = 1e-4) {
  if (!(eps > 0.0)) throw Error("finite_diff_check: eps must be positive");
  require_same_length(params, analytic, "finite_diff_check");
  Vec theta(params.begin(), params.end());
  GradCheckReport report;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double saved = theta[k];
    theta[k] = saved + eps;
    const double up = loss(theta);
    theta[k] = saved - eps;
    const double down = loss(theta);
    theta[k] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw Error("finite_diff_check: non-finite loss at parameter " +
                  std::to_string(k));
    }
    const double numeric = (up - down) / (2.0 * eps);
    const double denom =
        std::max({std::abs(analytic[k]), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic[k] - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_param_index = k;
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace traj
