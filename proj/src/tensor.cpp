#include "circuitedit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "circuitedit/errors.hpp"

namespace circuitedit {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_str(shape_) + " holds " + std::to_string(shape_numel(shape_)) +
                     " values but " + std::to_string(data_.size()) + " were given");
  }
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  if (rows.size() == 0) throw ShapeError("matrix needs at least one row");
  const std::size_t ncols = rows.begin()->size();
  std::vector<double> data;
  data.reserve(rows.size() * ncols);
  for (const auto& r : rows) {
    if (r.size() != ncols) throw ShapeError("ragged matrix rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), ncols}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw ShapeError("expected a 2-D tensor, got " + shape_str(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw ShapeError("expected a 2-D tensor, got " + shape_str(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::bit_equal(const Tensor& other) const {
  return shape_ == other.shape_ && data_.size() == other.data_.size() &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() > 2 || b.rank() > 2) {
    throw ShapeError("matmul needs operands of rank <= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols();
  const std::size_t bk = transpose_b ? b.cols() : b.rows();
  const std::size_t n = transpose_b ? b.rows() : b.cols();
  if (k != bk) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  if (!transpose_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = pc + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* brow = pb + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = pa + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = pb + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        pc[i * n + j] = s;
      }
    }
  }
  return c;
}

void matmul_at_b_acc(const Tensor& a, const Tensor& g, Tensor& out) {
  // out[k, n] += a[m, k]^T g[m, n]
  const std::size_t m = a.rows(), k = a.cols(), n = g.cols();
  const double* pa = a.data().data();
  const double* pg = g.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = pg + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      double* orow = po + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

void matmul_a_bt_acc(const Tensor& g, const Tensor& b, Tensor& out) {
  // out[m, k] += g[m, n] b[k, n]^T
  const std::size_t m = g.rows(), n = g.cols(), k = b.rows();
  const double* pg = g.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = pg + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = pb + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      po[i * k + p] += s;
    }
  }
}

namespace {

bool row_broadcast(const Tensor& a, const Tensor& b) {
  return a.rank() == 2 && b.rank() == 2 && b.dim(0) == 1 && b.dim(1) == a.dim(1) && a.dim(0) != 1;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  add_inplace(out, b);
  return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < a.numel(); ++i) pa[i] += pb[i];
    return;
  }
  if (row_broadcast(a, b)) {
    const std::size_t r = a.dim(0), c = a.dim(1);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) a.at(i, j) += b[j];
    }
    return;
  }
  throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (auto& v : out.storage()) v *= s;
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, LayerNormStats* stats) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c) {
    throw ShapeError("layer_norm parameter shapes " + shape_str(gain.shape()) + ", " + shape_str(bias.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
  Tensor y(x.shape());
  if (stats) {
    stats->mean.assign(r, 0.0);
    stats->rstd.assign(r, 0.0);
  }
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < c; ++j) y.at(i, j) = (x.at(i, j) - mean) * rstd * gain[j] + bias[j];
    if (stats) {
      stats->mean[i] = mean;
      stats->rstd[i] = rstd;
    }
  }
  return y;
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    double mx = x.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(x.at(i, j) - mx);
      y.at(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < c; ++j) y.at(i, j) /= sum;
  }
  return y;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = gelu(x[i]);
  return y;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be 2-D, got " + shape_str(table.shape()));
  if (ids.empty()) throw ShapeError("embedding lookup of an empty id list");
  const std::size_t v = table.dim(0), d = table.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw ShapeError("embedding id " + std::to_string(ids[i]) + " outside table " + shape_str(table.shape()));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data().data() + i * d);
  }
  return out;
}

}  // namespace kernels

}  // namespace circuitedit
