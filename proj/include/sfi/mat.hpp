#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sfi/rng.hpp"

namespace sfi {

/// Dense row-major matrix of 64-bit floats. All shapes are explicit;
/// there is no broadcasting. Operations are pure functions on immutable
/// inputs, so values can be shared freely across threads.
class Mat {
 public:
  Mat() = default;

  Mat(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw std::invalid_argument("Mat: data length must equal rows*cols");
  }

  static Mat filled(std::size_t rows, std::size_t cols, double v) {
    Mat m(rows, cols);
    std::fill(m.data_.begin(), m.data_.end(), v);
    return m;
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Mat from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Mat m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw std::invalid_argument("Mat: ragged rows");
      std::size_t j = 0;
      for (double v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
}

inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions differ (" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + ")");
  Mat out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

inline Mat transpose(const Mat& a) {
  Mat out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Mat add(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "add");
  Mat out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.raw()[i] += b.raw()[i];
  return out;
}

inline Mat sub(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "sub");
  Mat out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.raw()[i] -= b.raw()[i];
  return out;
}

inline Mat scale(const Mat& a, double c) {
  Mat out = a;
  for (double& v : out.raw()) v *= c;
  return out;
}

inline Mat hadamard(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "hadamard");
  Mat out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.raw()[i] *= b.raw()[i];
  return out;
}

inline Mat exp_elems(const Mat& a) {
  Mat out = a;
  for (double& v : out.raw()) v = std::exp(v);
  return out;
}

inline Mat relu(const Mat& a) {
  Mat out = a;
  for (double& v : out.raw()) v = v > 0.0 ? v : 0.0;
  return out;
}

/// Row-wise softmax of scale*m. Each row of the output sums to 1.
/// Uses per-row max subtraction; this is the only deviation from literal
/// formula evaluation permitted anywhere in the matrix kernel.
inline Mat row_softmax(const Mat& m, double sm_scale) {
  Mat out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double mx = -HUGE_VAL;
    for (std::size_t j = 0; j < m.cols(); ++j) mx = std::max(mx, sm_scale * m(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double e = std::exp(sm_scale * m(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) /= sum;
  }
  return out;
}

/// Elementwise shrinkage sign(y) * max(|y| - tau, 0). Requires tau >= 0.
inline Mat soft_threshold(const Mat& y, const Mat& tau) {
  require_same_shape(y, tau, "soft_threshold");
  Mat out(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double t = tau.raw()[i];
    if (t < 0.0) throw std::domain_error("soft_threshold: negative threshold entry");
    const double v = y.raw()[i];
    const double mag = std::abs(v) - t;
    out.raw()[i] = mag > 0.0 ? (v > 0.0 ? mag : -mag) : 0.0;
  }
  return out;
}

inline double fro_inner(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "fro_inner");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.raw()[i] * b.raw()[i];
  return s;
}

inline double fro_norm(const Mat& a) { return std::sqrt(fro_inner(a, a)); }

/// i.i.d. uniform entries in [lo, hi), reproducible per seed.
inline Mat uniform_mat(SeededRng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
  if (!(lo < hi)) throw std::domain_error("uniform_mat: requires lo < hi");
  Mat out(rows, cols);
  for (double& v : out.raw()) v = rng.uniform(lo, hi);
  return out;
}

inline std::vector<double> row_sums(const Mat& a) {
  std::vector<double> s(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) s[i] += a(i, j);
  return s;
}

/// Rank-1 defect outer product (A*1 - 1)*1^T: every entry of output row i
/// equals (row-sum of A's row i) - 1. Output has A's shape.
inline Mat rowsum_defect_outer(const Mat& a) {
  Mat out(a.rows(), a.cols());
  const std::vector<double> s = row_sums(a);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = s[i] - 1.0;
  return out;
}

inline double max_abs(const Mat& a) {
  double m = 0.0;
  for (double v : a.raw()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.raw()[i] - b.raw()[i]));
  return m;
}

inline bool all_finite(const Mat& a) {
  for (double v : a.raw())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace sfi
