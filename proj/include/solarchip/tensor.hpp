// Dense double-precision tensors (row-major) plus the small GEMM kernel the
// rest of the library is built on. Everything runs single threaded; all
// training and evaluation here is desk scale.
#pragma once

#include <cstring>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "solarchip/rng.hpp"

namespace solarchip {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::size_t>(count(shape_)) != data_.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  // Symmetric uniform U(-bound, bound).
  static Tensor uniform(std::vector<int> shape, double bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = rng.uniform(-bound, bound);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int numel() const { return count(shape_); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  void fill(double v) {
    for (auto& x : data_) x = v;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << ")";
    return os.str();
  }

  static int count(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

// C[M x N] (+)= op(A) * op(B). Row major, no aliasing between C and A/B.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a,
                 const double* b, double* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * static_cast<std::size_t>(m) * n);
  if (!trans_a && !trans_b) {
    // A[m x k] * B[k x n]
    for (int i = 0; i < m; ++i) {
      double* ci = c + static_cast<std::size_t>(i) * n;
      const double* ai = a + static_cast<std::size_t>(i) * k;
      for (int p = 0; p < k; ++p) {
        const double av = ai[p];
        const double* bp = b + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (trans_a && !trans_b) {
    // A[k x m]^T * B[k x n]
    for (int p = 0; p < k; ++p) {
      const double* ap = a + static_cast<std::size_t>(p) * m;
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        const double av = ap[i];
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (!trans_a && trans_b) {
    // A[m x k] * B[n x k]^T
    for (int i = 0; i < m; ++i) {
      const double* ai = a + static_cast<std::size_t>(i) * k;
      double* ci = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* bj = b + static_cast<std::size_t>(j) * k;
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
        ci[j] += s;
      }
    }
  } else {
    // A[k x m]^T * B[n x k]^T
    for (int i = 0; i < m; ++i) {
      double* ci = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* bj = b + static_cast<std::size_t>(j) * k;
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += a[static_cast<std::size_t>(p) * m + i] * bj[p];
        ci[j] += s;
      }
    }
  }
}

}  // namespace solarchip
