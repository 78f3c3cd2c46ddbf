#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "taskcl/common.hpp"
#include "taskcl/rng.hpp"

namespace taskcl {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/**
 * Dense row-major double tensor, rank 0..4. Value semantics; all math in the
 * artifact runs in float64.
 */
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t(std::vector<int>{});
    t.data_.assign(1, v);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<long>(data.size()) != count(t.shape_))
      throw ConfigError("Tensor::from: data size does not match shape");
    t.data_ = std::move(data);
    return t;
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = stddev * rng.normal();
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  long size() const { return static_cast<long>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double item() const {
    if (data_.size() != 1) throw ConfigError("Tensor::item: tensor is not a scalar");
    return data_[0];
  }

  double& operator[](long i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at(int i, int j) { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
  double at(int i, int j) const { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }

  Eigen::Map<MatrixRM> mat() {
    check_rank2();
    return Eigen::Map<MatrixRM>(data_.data(), dim(0), dim(1));
  }
  Eigen::Map<const MatrixRM> mat() const {
    check_rank2();
    return Eigen::Map<const MatrixRM>(data_.data(), dim(0), dim(1));
  }

  Tensor reshaped(std::vector<int> shape) const {
    if (count(shape) != size()) throw ConfigError("Tensor::reshaped: element count mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

  static long count(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) {
      if (d < 0) throw ConfigError("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  void check_rank2() const {
    if (rank() != 2) throw ConfigError("Tensor: rank-2 view requested on tensor of shape " + shape_str());
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (long i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ConfigError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (long i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace taskcl
