#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "slmlab/common.hpp"

namespace slm {

// Dense row-major tensor of 64-bit floats by default; the 32-bit
// instantiation is an opt-in run mode for speed (training only, all
// correctness tests run the 64-bit path).
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int64_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

  TensorT(int64_t rows, int64_t cols) : TensorT(std::vector<int64_t>{rows, cols}) {}

  TensorT(std::initializer_list<std::initializer_list<T>> rows) {
    int64_t r = static_cast<int64_t>(rows.size());
    int64_t c = r > 0 ? static_cast<int64_t>(rows.begin()->size()) : 0;
    shape_ = {r, c};
    data_.reserve(r * c);
    for (const auto& row : rows) {
      if (static_cast<int64_t>(row.size()) != c)
        throw ShapeError("ragged initializer for rank-2 tensor");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static TensorT zeros(std::vector<int64_t> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<int64_t> shape, T value) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static TensorT ones(std::vector<int64_t> shape) { return full(std::move(shape), T(1)); }

  static TensorT randn(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
    TensorT t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(stddev * rng.normal());
    return t;
  }

  static TensorT randu(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                       double hi = 1.0) {
    TensorT t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(int64_t i) const { return shape_.at(i); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  // rank-2 helpers; most of the workbench lives on matrices
  int64_t rows() const { return rank() >= 1 ? shape_[0] : 0; }
  int64_t cols() const { return rank() >= 2 ? shape_[1] : 1; }

  T& at(int64_t r, int64_t c) { return data_[r * cols() + c]; }
  T at(int64_t r, int64_t c) const { return data_[r * cols() + c]; }
  T& operator[](int64_t i) { return data_[i]; }
  T operator[](int64_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* row_ptr(int64_t r) { return data_.data() + r * cols(); }
  const T* row_ptr(int64_t r) const { return data_.data() + r * cols(); }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (T x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  T max_abs() const {
    T m = 0;
    for (T x : data_) m = std::max(m, static_cast<T>(std::fabs(static_cast<double>(x))));
    return m;
  }

  double frobenius_norm() const {
    double s = 0;
    for (T x : data_) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  TensorT reshaped(std::vector<int64_t> new_shape) const {
    if (checked_numel(new_shape) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                       " changes element count");
    TensorT t = *this;
    t.shape_ = std::move(new_shape);
    return t;
  }

  static std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
  }

  std::string shape_str() const { return shape_str(shape_); }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  static int64_t checked_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
      n *= d;
    }
    return n;
  }

  std::vector<int64_t> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<double>;
using Tensor32 = TensorT<float>;

// y = a . b for a[m x k], b[k x n]
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul dimension mismatch: " + a.shape_str() + " x " + b.shape_str());
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  TensorT<T> y(m, n);
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a.row_ptr(i);
    T* yrow = y.row_ptr(i);
    for (int64_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = b.row_ptr(p);
      for (int64_t j = 0; j < n; ++j) yrow[j] += aip * brow[j];
    }
  }
  return y;
}

// y = x . W^T for x[t x in], W[out x in]; both operands stream row-major.
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w) {
  if (x.rank() != 2 || w.rank() != 2 || x.cols() != w.cols())
    throw ShapeError("linear dimension mismatch: x " + x.shape_str() + " vs W " +
                     w.shape_str());
  const int64_t t = x.rows(), in = x.cols(), out = w.rows();
  TensorT<T> y(t, out);
  for (int64_t i = 0; i < t; ++i) {
    const T* xrow = x.row_ptr(i);
    T* yrow = y.row_ptr(i);
    for (int64_t o = 0; o < out; ++o) {
      const T* wrow = w.row_ptr(o);
      T acc = 0;
      for (int64_t p = 0; p < in; ++p) acc += xrow[p] * wrow[p];
      yrow[o] = acc;
    }
  }
  return y;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank-2, got " + a.shape_str());
  TensorT<T> out(a.cols(), a.rows());
  for (int64_t i = 0; i < a.rows(); ++i)
    for (int64_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b))
    throw ShapeError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
  TensorT<T> out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b))
    throw ShapeError("mul shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
  TensorT<T> out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  TensorT<T> out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return out;
}

template <typename T>
void check_nonempty_rows(const TensorT<T>& x, const char* op) {
  if (x.rank() != 2 || x.cols() == 0)
    throw ShapeError(std::string(op) + " rejects zero-length rows: " + x.shape_str());
}

template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
  check_nonempty_rows(x, "softmax_rows");
  TensorT<T> out = x;
  for (int64_t r = 0; r < x.rows(); ++r) {
    T* row = out.row_ptr(r);
    T mx = row[0];
    for (int64_t c = 1; c < x.cols(); ++c) mx = std::max(mx, row[c]);
    T sum = 0;
    for (int64_t c = 0; c < x.cols(); ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (int64_t c = 0; c < x.cols(); ++c) row[c] /= sum;
  }
  return out;
}

template <typename T>
TensorT<T> rms_norm_rows(const TensorT<T>& x, T eps = T(1e-8)) {
  check_nonempty_rows(x, "rms_norm");
  TensorT<T> out = x;
  const int64_t n = x.cols();
  for (int64_t r = 0; r < x.rows(); ++r) {
    T* row = out.row_ptr(r);
    double ms = 0;
    for (int64_t c = 0; c < n; ++c) ms += double(row[c]) * double(row[c]);
    T inv = T(1.0 / std::sqrt(ms / double(n) + double(eps)));
    for (int64_t c = 0; c < n; ++c) row[c] *= inv;
  }
  return out;
}

// Row-wise L2 normalization; with n_segments > 1 each row is split into
// equal segments (per-head keys) normalized independently.
template <typename T>
TensorT<T> l2_normalize_rows(const TensorT<T>& x, int64_t n_segments = 1,
                             T eps = T(1e-8)) {
  check_nonempty_rows(x, "l2_normalize_rows");
  if (n_segments < 1 || x.cols() % n_segments != 0)
    throw ShapeError("l2_normalize_rows: cols " + std::to_string(x.cols()) +
                     " not divisible into " + std::to_string(n_segments) + " segments");
  const int64_t seg = x.cols() / n_segments;
  TensorT<T> out = x;
  for (int64_t r = 0; r < x.rows(); ++r) {
    T* row = out.row_ptr(r);
    for (int64_t s = 0; s < n_segments; ++s) {
      T* p = row + s * seg;
      double ss = 0;
      for (int64_t c = 0; c < seg; ++c) ss += double(p[c]) * double(p[c]);
      T inv = T(1.0 / (std::sqrt(ss) + double(eps)));
      for (int64_t c = 0; c < seg; ++c) p[c] *= inv;
    }
  }
  return out;
}

template <typename T>
TensorT<T> silu(const TensorT<T>& x) {
  TensorT<T> out = x;
  for (int64_t i = 0; i < out.numel(); ++i) {
    double v = out[i];
    out[i] = T(v / (1.0 + std::exp(-v)));
  }
  return out;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  TensorT<T> out = x;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = T(1.0 / (1.0 + std::exp(-double(out[i]))));
  return out;
}

}  // namespace slm
