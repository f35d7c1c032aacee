#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace circuitedit {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Every dimension is >= 1.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  // Builds a 2-D tensor from nested rows; all rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  // 2-D views; a rank-1 tensor is treated as a single row.
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

  double item() const;
  bool all_finite() const;
  void fill(double value);
  bool empty() const { return data_.empty(); }

  // Bitwise equality of shape and payload.
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

// Raw kernels shared by the tape operations and the trace-free forward.
namespace kernels {

// c = a @ b (or a @ b^T when transpose_b). Both operands 2-D.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
// Accumulates a^T @ g into out.
void matmul_at_b_acc(const Tensor& a, const Tensor& g, Tensor& out);
// Accumulates g @ b^T into out.
void matmul_a_bt_acc(const Tensor& g, const Tensor& b, Tensor& out);

// a + b where b has a's shape or is a single row [1, cols] broadcast over rows.
Tensor add(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

constexpr double kLayerNormEps = 1e-5;

struct LayerNormStats {
  std::vector<double> mean;
  std::vector<double> rstd;
};
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  LayerNormStats* stats = nullptr);

Tensor softmax_rows(const Tensor& x);

double gelu(double x);
double gelu_grad(double x);
Tensor gelu(const Tensor& x);

Tensor embedding(const Tensor& table, std::span<const int> ids);

}  // namespace kernels

}  // namespace circuitedit
