#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tpsgtr/errors.hpp"

namespace tpsgtr {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << " x ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// Dense 64-bit float tensor, row-major. Values are immutable by convention
// once an operation has produced them; all free functions below return new
// tensors.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(count(shape_), 0.0);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) + " does not match data length " +
                           std::to_string(data_.size()));
    }
  }

  static Tensor vector(std::vector<double> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 0; }
  std::size_t cols() const { return shape_.size() == 2 ? shape_[1] : 0; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // matrix element access
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  static std::size_t count(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_vector(const Tensor& t, const char* what) {
  if (t.rank() != 1 || t.size() == 0) {
    throw DimensionError(std::string(what) + " expects a non-empty vector, got shape " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Standard matrix-vector product.
inline Tensor matvec(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.cols() != v.size()) {
    throw DimensionError("matvec shape mismatch: " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
  }
  Tensor out({m.rows()});
  const auto& md = m.data();
  const auto& vd = v.data();
  const std::size_t rows = m.rows(), cols = m.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* row = md.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * vd[c];
    out[r] = acc;
  }
  return out;
}

// Outer product u v^T.
inline Tensor outer(const Tensor& u, const Tensor& v) {
  require_vector(u, "outer");
  require_vector(v, "outer");
  Tensor out({u.size(), v.size()});
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) out.at(i, j) = u[i] * v[j];
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline Tensor scale(const Tensor& a, double k) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= k;
  return out;
}

inline Tensor tanh(const Tensor& a) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return out;
}

// Joins vectors along their single axis.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero vectors");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 1) throw DimensionError("concat expects vectors, got shape " + shape_str(p.shape()));
    total += p.size();
  }
  Tensor out({total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.size(); ++i) out[off + i] = p[i];
    off += p.size();
  }
  return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b) { return concat(std::vector<Tensor>{a, b}); }

// Max-subtracted softmax; output sums to 1 within 1e-12 on finite input.
inline Tensor softmax(const Tensor& x) {
  require_vector(x, "softmax");
  double mx = x[0];
  for (std::size_t i = 1; i < x.size(); ++i) mx = std::max(mx, x[i]);
  Tensor out = x;
  double sum = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(out[i] - mx);
    sum += out[i];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= sum;
  return out;
}

inline Tensor log_softmax(const Tensor& x) {
  require_vector(x, "log_softmax");
  double mx = x[0];
  for (std::size_t i = 1; i < x.size(); ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += std::exp(x[i] - mx);
  const double lse = mx + std::log(sum);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= lse;
  return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double sum(const Tensor& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  return acc;
}

// 2-norm of a vector, Frobenius norm of a matrix.
inline double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool all_finite(const Tensor& a) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a[i])) return false;
  return true;
}

}  // namespace tpsgtr
