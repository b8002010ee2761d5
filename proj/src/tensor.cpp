// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "speechmoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "speechmoe/errors.hpp"
#include "speechmoe/kernels.hpp"

namespace speechmoe {

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

namespace {

std::size_t checked_volume(const Shape& shape) {
  if (shape.empty() || shape.size() > 3) {
    throw DimensionError("tensor rank must be 1..3, got shape " + shape_str(shape));
  }
  std::size_t n = 1;
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

// View a rank-1 tensor as [1 x n]; rank-2 passes through.
std::pair<std::size_t, std::size_t> as_matrix(const Tensor& t, const char* op) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(t.shape()));
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  data_.assign(checked_volume(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (checked_volume(shape_) != data_.size()) {
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape_));
  }
  return shape_[axis];
}

Tensor Tensor::row_copy(std::size_t i) const {
  require_rank(*this, 2, "row_copy");
  return Tensor({shape_[1]}, std::vector<double>(row(i), row(i) + shape_[1]));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto [m, k] = as_matrix(a, "matmul");
  require_rank(b, 2, "matmul");
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t n = b.dim(1);
  Tensor c(a.rank() == 1 ? Shape{n} : Shape{m, n});
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* cd = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      kernels::axpy(ad[i * k + p], bd + p * n, cd + i * n, n);
    }
  }
  return c;
}

void matmul_at_b_acc(const Tensor& a, const Tensor& g, Tensor& out) {
  const auto [m, k] = as_matrix(a, "matmul_at_b");
  const auto [gm, n] = as_matrix(g, "matmul_at_b");
  if (gm != m || out.rank() != 2 || out.dim(0) != k || out.dim(1) != n) {
    throw DimensionError("matmul_at_b: incompatible shapes " + shape_str(a.shape()) + ", " +
                         shape_str(g.shape()) + " -> " + shape_str(out.shape()));
  }
  const double* ad = a.data().data();
  const double* gd = g.data().data();
  double* od = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      kernels::axpy(ad[i * k + p], gd + i * n, od + p * n, n);
    }
  }
}

Tensor matmul_a_bt(const Tensor& a, const Tensor& b) {
  const auto [m, n] = as_matrix(a, "matmul_a_bt");
  require_rank(b, 2, "matmul_a_bt");
  if (b.dim(1) != n) {
    throw DimensionError("matmul_a_bt: column mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t k = b.dim(0);
  Tensor c(a.rank() == 1 ? Shape{k} : Shape{m, k});
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* cd = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) cd[i * k + j] = kernels::dot(ad + i * n, bd + j * n, n);
  }
  return c;
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& grad_out) {
  const auto [m, k] = as_matrix(a, "matmul_backward");
  const auto [gm, n] = as_matrix(grad_out, "matmul_backward");
  if (gm != m || b.rank() != 2 || b.dim(0) != k || b.dim(1) != n) {
    throw DimensionError("matmul_backward: incompatible shapes " + shape_str(a.shape()) + ", " +
                         shape_str(b.shape()) + ", grad " + shape_str(grad_out.shape()));
  }
  MatmulGrads g;
  g.da = matmul_a_bt(grad_out, b);
  g.db = Tensor({k, n});
  matmul_at_b_acc(a, grad_out, g.db);
  return g;
}

// ---- softmax family -------------------------------------------------------------

namespace {

void softmax_span(const double* x, double* y, std::size_t n) {
  const double mx = *std::max_element(x, x + n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  const double inv = 1.0 / sum;
  for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
}

void log_softmax_span(const double* x, double* y, std::size_t n) {
  const double mx = *std::max_element(x, x + n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] - lse;
}

void softmax_backward_span(const double* p, const double* g, double* out, std::size_t n) {
  double inner = 0.0;
  for (std::size_t i = 0; i < n; ++i) inner += g[i] * p[i];
  for (std::size_t i = 0; i < n; ++i) out[i] = p[i] * (g[i] - inner);
}

void log_softmax_backward_span(const double* lp, const double* g, double* out, std::size_t n) {
  double gsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) gsum += g[i];
  for (std::size_t i = 0; i < n; ++i) out[i] = g[i] - std::exp(lp[i]) * gsum;
}

template <typename Fn>
Tensor rowwise(const Tensor& x, std::size_t rank, const char* op, Fn fn) {
  require_rank(x, rank, op);
  Tensor y(x.shape());
  const std::size_t n = x.shape().back();
  const std::size_t m = x.size() / n;
  for (std::size_t i = 0; i < m; ++i) fn(x.data().data() + i * n, y.data().data() + i * n, n);
  return y;
}

template <typename Fn>
Tensor rowwise2(const Tensor& a, const Tensor& g, std::size_t rank, const char* op, Fn fn) {
  require_rank(a, rank, op);
  check_same_shape(a, g, op);
  Tensor y(a.shape());
  const std::size_t n = a.shape().back();
  const std::size_t m = a.size() / n;
  for (std::size_t i = 0; i < m; ++i) {
    fn(a.data().data() + i * n, g.data().data() + i * n, y.data().data() + i * n, n);
  }
  return y;
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  if (logits.is_null()) throw DimensionError("softmax: empty input");
  return rowwise(logits, 1, "softmax", softmax_span);
}

Tensor softmax_backward(const Tensor& probs, const Tensor& grad_out) {
  return rowwise2(probs, grad_out, 1, "softmax_backward", softmax_backward_span);
}

Tensor log_softmax(const Tensor& x) {
  if (x.is_null()) throw DimensionError("log_softmax: empty input");
  return rowwise(x, 1, "log_softmax", log_softmax_span);
}

Tensor log_softmax_backward(const Tensor& log_probs, const Tensor& grad_out) {
  return rowwise2(log_probs, grad_out, 1, "log_softmax_backward", log_softmax_backward_span);
}

Tensor softmax_rows(const Tensor& logits) {
  return rowwise(logits, 2, "softmax_rows", softmax_span);
}

Tensor softmax_rows_backward(const Tensor& probs, const Tensor& grad_out) {
  return rowwise2(probs, grad_out, 2, "softmax_rows_backward", softmax_backward_span);
}

Tensor log_softmax_rows(const Tensor& x) {
  return rowwise(x, 2, "log_softmax_rows", log_softmax_span);
}

Tensor log_softmax_rows_backward(const Tensor& log_probs, const Tensor& grad_out) {
  return rowwise2(log_probs, grad_out, 2, "log_softmax_rows_backward", log_softmax_backward_span);
}

// ---- structural -------------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.shape()[d] != first[d]) {
        throw DimensionError("concat: off-axis mismatch " + shape_str(first) + " vs " +
                             shape_str(p.shape()));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  // outer = product of dims before axis; each part contributes contiguous
  // blocks of (its axis extent * inner) per outer index.
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  Tensor out(out_shape);
  double* dst = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (const auto& p : parts) {
      const std::size_t block = p.shape()[axis] * inner;
      const double* src = p.data().data() + o * block;
      dst = std::copy(src, src + block, dst);
    }
  }
  return out;
}

std::vector<Tensor> split(const Tensor& t, std::size_t axis, std::span<const std::size_t> sizes) {
  if (axis >= t.rank()) throw DimensionError("split: axis out of range for " + shape_str(t.shape()));
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != t.shape()[axis]) {
    throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis has " +
                         std::to_string(t.shape()[axis]));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= t.shape()[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < t.rank(); ++d) inner *= t.shape()[d];

  std::vector<Tensor> out;
  out.reserve(sizes.size());
  for (auto s : sizes) {
    Shape sh = t.shape();
    sh[axis] = s;
    out.emplace_back(sh);
  }
  const double* src = t.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      const std::size_t block = sizes[i] * inner;
      std::copy(src, src + block, out[i].data().data() + o * block);
      src += block;
    }
  }
  return out;
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  require_rank(t, 2, "slice_rows");
  if (begin >= end || end > t.rows()) throw DimensionError("slice_rows: bad range");
  const std::size_t n = t.cols();
  return Tensor({end - begin, n},
                std::vector<double>(t.row(begin), t.row(begin) + (end - begin) * n));
}

Tensor mean_over_time(const Tensor& seq) {
  if (seq.is_null()) throw EmptySequenceError("mean_over_time: empty sequence");
  require_rank(seq, 2, "mean_over_time");
  const std::size_t t_len = seq.rows();
  const std::size_t d = seq.cols();
  Tensor out({d});
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t j = 0; j < d; ++j) out[j] += seq.at(t, j);
  }
  const double inv = 1.0 / static_cast<double>(t_len);
  for (std::size_t j = 0; j < d; ++j) out[j] *= inv;
  return out;
}

Tensor mean_over_time_backward(const Tensor& grad_out, std::size_t frames) {
  if (frames == 0) throw EmptySequenceError("mean_over_time_backward: zero frames");
  require_rank(grad_out, 1, "mean_over_time_backward");
  const std::size_t d = grad_out.dim(0);
  Tensor g({frames, d});
  const double inv = 1.0 / static_cast<double>(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t j = 0; j < d; ++j) g.at(t, j) = grad_out[j] * inv;
  }
  return g;
}

// ---- elementwise ----------------------------------------------------------------------

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  check_same_shape(x, grad_out, "relu_backward");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(x[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

void add_inplace(Tensor& acc, const Tensor& x) {
  check_same_shape(acc, x, "add_inplace");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

void axpy_inplace(Tensor& acc, double alpha, const Tensor& x) {
  check_same_shape(acc, x, "axpy_inplace");
  kernels::axpy(alpha, x.data().data(), acc.data().data(), acc.size());
}

void add_bias_rows(Tensor& m, const Tensor& bias) {
  const auto [rows, cols] = as_matrix(m, "add_bias_rows");
  if (bias.rank() != 1 || bias.dim(0) != cols) {
    throw DimensionError("add_bias_rows: bias " + shape_str(bias.shape()) + " vs " +
                         shape_str(m.shape()));
  }
  for (std::size_t i = 0; i < rows; ++i) {
    double* r = m.data().data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) r[j] += bias[j];
  }
}

void bias_grad_acc(const Tensor& g, Tensor& out) {
  const auto [rows, cols] = as_matrix(g, "bias_grad_acc");
  if (out.rank() != 1 || out.dim(0) != cols) {
    throw DimensionError("bias_grad_acc: " + shape_str(out.shape()) + " vs " + shape_str(g.shape()));
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = g.data().data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) out[j] += r[j];
  }
}

}  // namespace speechmoe
