// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tprune {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Rank-2 accessors. A rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  void fill(double value);
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double scale);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Value plus an accumulated gradient of the same shape.
struct DualTensor {
  Tensor value;
  Tensor grad;

  DualTensor() = default;
  explicit DualTensor(Tensor v) : value(std::move(v)), grad(Tensor::zeros_like(value)) {}
  void zero_grad() { grad = Tensor::zeros_like(value); }
};

std::string shape_string(const std::vector<std::size_t>& shape);

// Binary container: u32 rank, u32 dims, then f64 payload, all little-endian.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Plain linear algebra on rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);     // a[m,k] b[k,n]
Tensor matmul_at(const Tensor& a, const Tensor& b);  // a[k,m]^T b[k,n]
Tensor matmul_bt(const Tensor& a, const Tensor& b);  // a[m,k] b[n,k]^T
void add_row_vector(Tensor& m, const Tensor& v);
Tensor column_sums(const Tensor& m);
Tensor transpose(const Tensor& m);
double dot(std::span<const double> a, std::span<const double> b);

}  // namespace tprune
