#include "circuitedit/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>

#include "circuitedit/errors.hpp"

namespace circuitedit {

namespace {

std::atomic<std::uint64_t> g_next_tape_id{1};
thread_local Tape* t_active_tape = nullptr;

}  // namespace

const Tensor& Var::value() const {
  if (!tape) throw TapeError("use of an unbound Var");
  return tape->value(*this);
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {
  if (t_active_tape) throw TapeError("nested tapes are not allowed; finish the active pass first");
  t_active_tape = this;
  nodes_.reserve(256);
}

Tape::~Tape() {
  if (t_active_tape == this) t_active_tape = nullptr;
}

bool Tape::active_on_this_thread() { return t_active_tape != nullptr; }

void Tape::check(Var v) const {
  if (v.tape != this || v.tape_id != id_ || v.index >= nodes_.size()) {
    throw TapeError("handle does not belong to this forward pass");
  }
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (backward_done_) throw TapeError("cannot record after backward");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1), id_};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (backward_done_) throw TapeError("cannot record after backward");
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    check(in);
    n.inputs.push_back(in.index);
    n.requires_grad = n.requires_grad || nodes_[in.index].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1), id_};
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.index].value;
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.index].requires_grad;
}

void Tape::backward(Var loss) {
  check(loss);
  if (backward_done_) throw TapeError("backward already ran on this tape");
  Node& root = nodes_[loss.index];
  if (root.value.numel() != 1) {
    throw TapeError("backward needs a scalar loss, got shape " + shape_str(root.value.shape()));
  }
  backward_done_ = true;
  root.grad = Tensor::full(root.value.shape(), 1.0);

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (auto idx : n.inputs) {
      Node& in = nodes_[idx];
      in_values.push_back(&in.value);
      if (in.requires_grad) {
        if (in.grad.empty()) in.grad = Tensor::zeros(in.value.shape());
        in_grads.push_back(&in.grad);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    n.backward(n.grad, in_values, in_grads);
  }
}

Tensor Tape::grad(Var v) const {
  check(v);
  if (!backward_done_) throw TapeError("gradient requested before backward");
  const Node& n = nodes_[v.index];
  if (n.grad.empty()) return Tensor::zeros(n.value.shape());
  return n.grad;
}

namespace ops {

namespace {

Tape& same_tape(Var a, Var b) {
  if (!a.tape || a.tape != b.tape || a.tape_id != b.tape_id) {
    throw TapeError("operands recorded on different tapes");
  }
  return *a.tape;
}

Tape& tape_of(Var a) {
  if (!a.tape) throw TapeError("use of an unbound Var");
  return *a.tape;
}

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " needs a 2-D tensor, got " + shape_str(t.shape()));
}

}  // namespace

Var matmul(Var a, Var b, bool transpose_b) {
  Tape& tape = same_tape(a, b);
  Tensor out = kernels::matmul(a.value(), b.value(), transpose_b);
  return tape.record(std::move(out), {a, b},
                     [transpose_b](const Tensor& g, std::span<const Tensor* const> in, std::span<Tensor* const> gin) {
                       const Tensor& av = *in[0];
                       const Tensor& bv = *in[1];
                       if (!transpose_b) {
                         if (gin[0]) kernels::matmul_a_bt_acc(g, bv, *gin[0]);  // dA = G B^T
                         if (gin[1]) kernels::matmul_at_b_acc(av, g, *gin[1]);  // dB = A^T G
                       } else {
                         // C = A B^T: dA = G B, dB = G^T A
                         if (gin[0]) kernels::add_inplace(*gin[0], kernels::matmul(g, bv));
                         if (gin[1]) kernels::matmul_at_b_acc(g, av, *gin[1]);
                       }
                     });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  Tensor out = kernels::add(a.value(), b.value());
  const bool broadcast = a.value().shape() != b.value().shape();
  return tape.record(std::move(out), {a, b},
                     [broadcast](const Tensor& g, std::span<const Tensor* const>, std::span<Tensor* const> gin) {
                       if (gin[0]) kernels::add_inplace(*gin[0], g);
                       if (gin[1]) {
                         if (!broadcast) {
                           kernels::add_inplace(*gin[1], g);
                         } else {
                           Tensor& gb = *gin[1];
                           for (std::size_t i = 0; i < g.dim(0); ++i) {
                             for (std::size_t j = 0; j < g.dim(1); ++j) gb[j] += g.at(i, j);
                           }
                         }
                       }
                     });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw ShapeError("mul shape mismatch: " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b},
                     [](const Tensor& g, std::span<const Tensor* const> in, std::span<Tensor* const> gin) {
                       for (std::size_t i = 0; i < g.numel(); ++i) {
                         if (gin[0]) (*gin[0])[i] += g[i] * (*in[1])[i];
                         if (gin[1]) (*gin[1])[i] += g[i] * (*in[0])[i];
                       }
                     });
}

Var scale(Var a, double s) {
  Tape& tape = tape_of(a);
  return tape.record(kernels::scale(a.value(), s), {a},
                     [s](const Tensor& g, std::span<const Tensor* const>, std::span<Tensor* const> gin) {
                       Tensor& ga = *gin[0];
                       for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
                     });
}

Var layer_norm(Var x, Var gain, Var bias) {
  Tape& tape = same_tape(x, gain);
  same_tape(x, bias);
  auto stats = std::make_shared<kernels::LayerNormStats>();
  Tensor out = kernels::layer_norm(x.value(), gain.value(), bias.value(), stats.get());
  return tape.record(
      std::move(out), {x, gain, bias},
      [stats](const Tensor& g, std::span<const Tensor* const> in, std::span<Tensor* const> gin) {
        const Tensor& xv = *in[0];
        const Tensor& gv = *in[1];
        const std::size_t r = xv.rows(), c = xv.cols();
        const double inv_c = 1.0 / static_cast<double>(c);
        std::vector<double> xhat(c), dxhat(c);
        for (std::size_t i = 0; i < r; ++i) {
          const double mean = stats->mean[i], rstd = stats->rstd[i];
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            xhat[j] = (xv.at(i, j) - mean) * rstd;
            const double gij = g.at(i, j);
            dxhat[j] = gij * gv[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
            if (gin[1]) (*gin[1])[j] += gij * xhat[j];
            if (gin[2]) (*gin[2])[j] += gij;
          }
          if (gin[0]) {
            Tensor& gx = *gin[0];
            for (std::size_t j = 0; j < c; ++j) {
              gx.at(i, j) += rstd * (dxhat[j] - inv_c * sum_dxhat - xhat[j] * inv_c * sum_dxhat_xhat);
            }
          }
        }
      });
}

Var softmax(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = kernels::softmax_rows(x.value());
  auto saved = std::make_shared<Tensor>(out);
  return tape.record(std::move(out), {x},
                     [saved](const Tensor& g, std::span<const Tensor* const>, std::span<Tensor* const> gin) {
                       const Tensor& y = *saved;
                       Tensor& gx = *gin[0];
                       const std::size_t r = y.rows(), c = y.cols();
                       for (std::size_t i = 0; i < r; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
                         for (std::size_t j = 0; j < c; ++j) gx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
                       }
                     });
}

Var gelu(Var x) {
  Tape& tape = tape_of(x);
  return tape.record(kernels::gelu(x.value()), {x},
                     [](const Tensor& g, std::span<const Tensor* const> in, std::span<Tensor* const> gin) {
                       const Tensor& xv = *in[0];
                       Tensor& gx = *gin[0];
                       for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                     });
}

Var embedding(Var table, std::span<const int> ids) {
  Tape& tape = tape_of(table);
  Tensor out = kernels::embedding(table.value(), ids);
  std::vector<int> saved(ids.begin(), ids.end());
  return tape.record(std::move(out), {table},
                     [saved = std::move(saved)](const Tensor& g, std::span<const Tensor* const>,
                                                std::span<Tensor* const> gin) {
                       Tensor& gt = *gin[0];
                       const std::size_t d = g.dim(1);
                       for (std::size_t i = 0; i < saved.size(); ++i) {
                         double* row = gt.data().data() + static_cast<std::size_t>(saved[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) row[j] += g.at(i, j);
                       }
                     });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  if (axis > 1) throw ShapeError("concat axis must be 0 or 1");
  Tape& tape = tape_of(parts[0]);
  const Tensor& first = parts[0].value();
  require_2d(first, "concat");
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    const Tensor& t = p.value();
    require_2d(t, "concat");
    if (t.dim(1 - axis) != first.dim(1 - axis)) {
      throw ShapeError("concat shape mismatch: " + shape_str(first.shape()) + " and " + shape_str(t.shape()));
    }
    extents.push_back(t.dim(axis));
    total += t.dim(axis);
  }
  const std::size_t r = axis == 0 ? total : first.dim(0);
  const std::size_t c = axis == 1 ? total : first.dim(1);
  Tensor out({r, c});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    for (std::size_t i = 0; i < t.dim(0); ++i) {
      for (std::size_t j = 0; j < t.dim(1); ++j) {
        out.at(axis == 0 ? i + offset : i, axis == 1 ? j + offset : j) = t.at(i, j);
      }
    }
    offset += t.dim(axis);
  }
  return tape.record(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                     [axis, extents](const Tensor& g, std::span<const Tensor* const>, std::span<Tensor* const> gin) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < gin.size(); ++k) {
                         if (gin[k]) {
                           Tensor& gk = *gin[k];
                           for (std::size_t i = 0; i < gk.dim(0); ++i) {
                             for (std::size_t j = 0; j < gk.dim(1); ++j) {
                               gk.at(i, j) += g.at(axis == 0 ? i + off : i, axis == 1 ? j + off : j);
                             }
                           }
                         }
                         off += extents[k];
                       }
                     });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_2d(xv, "slice");
  if (axis > 1) throw ShapeError("slice axis must be 0 or 1");
  if (begin >= end || end > xv.dim(axis)) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " out of range for " + shape_str(xv.shape()));
  }
  const std::size_t r = axis == 0 ? end - begin : xv.dim(0);
  const std::size_t c = axis == 1 ? end - begin : xv.dim(1);
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out.at(i, j) = xv.at(axis == 0 ? i + begin : i, axis == 1 ? j + begin : j);
    }
  }
  return tape.record(std::move(out), {x},
                     [axis, begin](const Tensor& g, std::span<const Tensor* const>, std::span<Tensor* const> gin) {
                       Tensor& gx = *gin[0];
                       for (std::size_t i = 0; i < g.dim(0); ++i) {
                         for (std::size_t j = 0; j < g.dim(1); ++j) {
                           gx.at(axis == 0 ? i + begin : i, axis == 1 ? j + begin : j) += g.at(i, j);
                         }
                       }
                     });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  Tape& tape = tape_of(logits);
  const Tensor& lv = logits.value();
  const std::size_t r = lv.rows(), c = lv.cols();
  if (targets.size() != r) {
    throw ShapeError("cross_entropy got " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(lv.shape()));
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      throw ShapeError("cross_entropy target " + std::to_string(t) + " outside vocabulary of " + std::to_string(c));
    }
  }
  auto probs = std::make_shared<Tensor>(kernels::softmax_rows(lv));
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    double mx = lv.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(lv.at(i, j) - mx);
    loss += (std::log(s) + mx) - lv.at(i, static_cast<std::size_t>(targets[i]));
  }
  loss /= static_cast<double>(r);
  std::vector<int> saved(targets.begin(), targets.end());
  return tape.record(Tensor::scalar(loss), {logits},
                     [probs, saved = std::move(saved)](const Tensor& g, std::span<const Tensor* const>,
                                                       std::span<Tensor* const> gin) {
                       Tensor& gl = *gin[0];
                       const std::size_t rows = probs->rows(), cols = probs->cols();
                       const double w = g[0] / static_cast<double>(rows);
                       for (std::size_t i = 0; i < rows; ++i) {
                         for (std::size_t j = 0; j < cols; ++j) {
                           const double onehot = static_cast<std::size_t>(saved[i]) == j ? 1.0 : 0.0;
                           gl.at(i, j) += w * (probs->at(i, j) - onehot);
                         }
                       }
                     });
}

Var sum(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() > 2) throw ShapeError("sum supports rank <= 2, got " + shape_str(xv.shape()));
  Var ones_left = tape.constant(Tensor::full({1, xv.rows()}, 1.0));
  Var ones_right = tape.constant(Tensor::full({xv.cols(), 1}, 1.0));
  return matmul(matmul(ones_left, x), ones_right);
}

}  // namespace ops

double finite_difference_check(const ScalarFn& f, const Tensor& point, double h) {
  if (!(h > 0.0)) throw ConfigError("finite difference step must be positive");
  auto evaluate = [&](const Tensor& x) {
    Tape tape;
    Var v = tape.leaf(x, false);
    Var out = f(v);
    const double y = out.value().item();
    if (!std::isfinite(y)) throw NumericError("finite_difference_check: function returned a non-finite value");
    return y;
  };

  Tensor analytic;
  {
    Tape tape;
    Var x = tape.leaf(point, true);
    Var out = f(x);
    if (!std::isfinite(out.value().item())) {
      throw NumericError("finite_difference_check: function returned a non-finite value");
    }
    tape.backward(out);
    analytic = tape.grad(x);
  }

  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = evaluate(probe);
    probe[i] = orig - h;
    const double fm = evaluate(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace circuitedit
