// SPDX-License-Identifier: Apache-2.0
#include "tprune/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

namespace tprune {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected rank-2 tensor, got " + shape_string(t.shape()));
  }
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw ShapeError("tensor blob truncated in header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ShapeError("tensor blob truncated in payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw ShapeError("axis out of range for " + shape_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw ShapeError("rows() on " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw ShapeError("cols() on " + shape_string(shape_));
  return shape_[1];
}

std::span<double> Tensor::row(std::size_t r) {
  const auto c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

std::span<const double> Tensor::row(std::size_t r) const {
  const auto c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) {
    throw ShapeError("+= shape mismatch " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double scale) {
  for (auto& v : data_) v *= scale;
  return *this;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void write_tensor(std::ostream& out, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) put_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  const auto rank = get_u32(in);
  if (rank > 8) throw ShapeError("tensor blob rank " + std::to_string(rank) + " is implausible");
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = get_u32(in);
  std::vector<double> data(product(shape));
  for (auto& v : data) v = get_f64(in);
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_tensor(in);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_at");
  require_rank2(b, "matmul_at");
  const auto k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul_at " + shape_string(a.shape()) + "^T x " + shape_string(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = pa[p * m + i];
      if (av == 0.0) continue;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_bt");
  require_rank2(b, "matmul_bt");
  if (b.cols() != a.cols()) {
    throw ShapeError("matmul_bt " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  // Transposing first keeps the inner loop contiguous.
  return matmul(a, transpose(b));
}

void add_row_vector(Tensor& m, const Tensor& v) {
  if (v.size() != m.cols()) throw ShapeError("add_row_vector width mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += v[c];
  }
}

Tensor column_sums(const Tensor& m) {
  Tensor out({m.cols()});
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c];
  }
  return out;
}

Tensor transpose(const Tensor& m) {
  require_rank2(m, "transpose");
  Tensor out({m.cols(), m.rows()});
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out.at(c, r) = m.at(r, c);
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace tprune
