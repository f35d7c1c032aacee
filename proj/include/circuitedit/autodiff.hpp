#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "circuitedit/tensor.hpp"

namespace circuitedit {

class Tape;

// Handle to a value recorded on a tape. Valid only against the tape that
// produced it; the tape id guards against cross-pass use.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t index = 0;
  std::uint64_t tape_id = 0;

  bool valid() const { return tape != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// A recorded intermediate whose gradient is read after backward.
using TraceHandle = Var;

// Reverse-mode recording for one forward pass. At most one tape may be alive
// per thread; construction fails while another is active.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, std::span<const Tensor* const> inputs,
                                        std::span<Tensor* const> input_grads)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends an op result. input_grads entries are null for inputs that do not
  // require gradients.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  // Propagates d(loss)/d(value) to every recorded value. Allowed once.
  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  // Gradient of the last backward's loss w.r.t. v; zeros when v did not
  // influence the loss.
  Tensor grad(Var v) const;

  static bool active_on_this_thread();

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
  };

  void check(Var v) const;

  std::uint64_t id_;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Differentiable primitives. Each records on the tape its operands belong to.
namespace ops {

Var matmul(Var a, Var b, bool transpose_b = false);
// Same shape, or b a single row broadcast over a's rows.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// Row-wise normalization over the last axis, epsilon fixed at 1e-5.
Var layer_norm(Var x, Var gain, Var bias);
Var softmax(Var x);
Var gelu(Var x);
Var embedding(Var table, std::span<const int> ids);
// 2-D tensors joined along axis 0 or 1.
Var concat(std::span<const Var> parts, std::size_t axis);
// [begin, end) along axis 0 or 1 of a 2-D tensor.
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
// Mean over rows of -log softmax(logits[i])[targets[i]]. Returns shape [1].
Var cross_entropy(Var logits, std::span<const int> targets);

// Sum of all entries, composed from matmul against constant ones.
Var sum(Var x);

}  // namespace ops

using ScalarFn = std::function<Var(Var)>;

// Largest |analytic - central difference| / max(1, |analytic|) over the
// coordinates of point. f must build a scalar on the tape of its argument.
double finite_difference_check(const ScalarFn& f, const Tensor& point, double h = 1e-5);

}  // namespace circuitedit
