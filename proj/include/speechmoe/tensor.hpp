// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace speechmoe {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

// Dense row-major tensor of doubles, rank 1 to 3. A default-constructed
// tensor is "null" (rank 0, no data) and stands for an absent input.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool is_null() const noexcept { return shape_.empty(); }

  // Rank-2 convenience.
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Row i of a rank-2 tensor.
  double* row(std::size_t i) { return data_.data() + i * shape_[1]; }
  const double* row(std::size_t i) const { return data_.data() + i * shape_[1]; }
  std::span<const double> row_span(std::size_t i) const { return {row(i), shape_[1]}; }
  Tensor row_copy(std::size_t i) const;

  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

using Gradient = Tensor;

// ---- matmul ---------------------------------------------------------------
// Rank-1 operands are treated as a single row (left) or column-free row (right
// is never rank-1). a[m x k] * b[k x n] -> [m x n]; a[k] * b[k x n] -> [n].
Tensor matmul(const Tensor& a, const Tensor& b);
struct MatmulGrads {
  Tensor da;
  Tensor db;
};
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& grad_out);
// out += a^T * g  (a[m x k], g[m x n], out[k x n])
void matmul_at_b_acc(const Tensor& a, const Tensor& g, Tensor& out);
// a * b^T  (a[m x n], b[k x n]) -> [m x k]
Tensor matmul_a_bt(const Tensor& a, const Tensor& b);

// ---- softmax family --------------------------------------------------------
Tensor softmax(const Tensor& logits);
Tensor softmax_backward(const Tensor& probs, const Tensor& grad_out);
Tensor log_softmax(const Tensor& x);
Tensor log_softmax_backward(const Tensor& log_probs, const Tensor& grad_out);
// Row-wise over a rank-2 tensor.
Tensor softmax_rows(const Tensor& logits);
Tensor softmax_rows_backward(const Tensor& probs, const Tensor& grad_out);
Tensor log_softmax_rows(const Tensor& x);
Tensor log_softmax_rows_backward(const Tensor& log_probs, const Tensor& grad_out);

// ---- structural -------------------------------------------------------------
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// Inverse of concat: splits `t` along `axis` into pieces of the given sizes.
std::vector<Tensor> split(const Tensor& t, std::size_t axis, std::span<const std::size_t> sizes);
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);

Tensor mean_over_time(const Tensor& seq);
Tensor mean_over_time_backward(const Tensor& grad_out, std::size_t frames);

// ---- elementwise ------------------------------------------------------------
Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& grad_out);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void add_inplace(Tensor& acc, const Tensor& x);
void axpy_inplace(Tensor& acc, double alpha, const Tensor& x);
// rows of m += bias
void add_bias_rows(Tensor& m, const Tensor& bias);
// out[j] += sum_i g[i][j]
void bias_grad_acc(const Tensor& g, Tensor& out);

void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace speechmoe
