#pragma once

// Random differentiable cases, one per autodiff primitive. Shared by the unit
// tests and the acceptance run.

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "circuitedit/autodiff.hpp"
#include "circuitedit/tensor.hpp"

namespace gradcases {

using namespace circuitedit;

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = nd(rng);
  return t;
}

// Contracts an op output with fixed random weights so the check sees the full Jacobian.
inline Var contract(Var y, const Tensor& w) { return ops::sum(ops::mul(y, y.tape->constant(w))); }

constexpr int kPrimitiveCount = 14;

struct Case {
  ScalarFn f;
  Tensor point;
};

inline Case primitive_case(int which, std::mt19937_64& rng) {
  const std::size_t r = 1 + rng() % 3, c = 2 + rng() % 3;
  const Tensor other = random_tensor(rng, {c, r + 1});
  const Tensor same = random_tensor(rng, {r, c});
  ScalarFn f;
  Tensor point = random_tensor(rng, {r, c});
  switch (which) {
    case 0: {
      const Tensor w = random_tensor(rng, {r, r + 1});
      f = [=](Var x) { return contract(ops::matmul(x, x.tape->constant(other)), w); };
      break;
    }
    case 1: {
      const Tensor bt = random_tensor(rng, {r + 2, c});
      const Tensor w = random_tensor(rng, {r, r + 2});
      f = [=](Var x) { return contract(ops::matmul(x, x.tape->constant(bt), true), w); };
      break;
    }
    case 2: {
      const Tensor w = random_tensor(rng, {r, c});
      f = [=](Var x) { return contract(ops::add(x.tape->constant(same), x), w); };
      break;
    }
    case 3: {
      // broadcast row operand
      point = random_tensor(rng, {1, c});
      const Tensor w = random_tensor(rng, {r, c});
      f = [=](Var x) { return contract(ops::add(x.tape->constant(same), x), w); };
      break;
    }
    case 4: {
      const Tensor w = random_tensor(rng, {r, c});
      f = [=](Var x) { return contract(ops::mul(x, x.tape->constant(same)), w); };
      break;
    }
    case 5: {
      const Tensor w = random_tensor(rng, {r, c});
      f = [w](Var x) { return contract(ops::scale(x, -1.7), w); };
      break;
    }
    case 6: {
      const Tensor w = random_tensor(rng, {r, c});
      const Tensor gain = random_tensor(rng, {c}), bias = random_tensor(rng, {c});
      f = [w, gain, bias](Var x) {
        return contract(ops::layer_norm(x, x.tape->constant(gain), x.tape->constant(bias)), w);
      };
      break;
    }
    case 7: {
      // gain and bias as the differentiated operand
      point = random_tensor(rng, {c});
      const Tensor w = random_tensor(rng, {r, c});
      f = [=](Var g) { return contract(ops::layer_norm(g.tape->constant(same), g, g), w); };
      break;
    }
    case 8: {
      const Tensor w = random_tensor(rng, {r, c});
      f = [w](Var x) { return contract(ops::softmax(x), w); };
      break;
    }
    case 9: {
      const Tensor w = random_tensor(rng, {r, c});
      f = [w](Var x) { return contract(ops::gelu(x), w); };
      break;
    }
    case 10: {
      point = random_tensor(rng, {5, c});
      const std::vector<int> ids{static_cast<int>(rng() % 5), static_cast<int>(rng() % 5), 2};
      const Tensor w = random_tensor(rng, {3, c});
      f = [ids, w](Var t) { return contract(ops::embedding(t, ids), w); };
      break;
    }
    case 11: {
      const Tensor w0 = random_tensor(rng, {2 * r, c}), w1 = random_tensor(rng, {r, 2 * c});
      f = [=](Var x) {
        std::vector<Var> rows{x, ops::scale(x.tape->constant(same), 1.0)};
        std::vector<Var> cols{x.tape->constant(same), x};
        return ops::add(contract(ops::concat(rows, 0), w0), contract(ops::concat(cols, 1), w1));
      };
      break;
    }
    case 12: {
      const Tensor w = random_tensor(rng, {r, c - 1});
      const Tensor w_rows = random_tensor(rng, {1, c});
      f = [w, w_rows, r](Var x) {
        return ops::add(contract(ops::slice(x, 1, 1, x.shape()[1]), w), contract(ops::slice(x, 0, r - 1, r), w_rows));
      };
      break;
    }
    case 13: {
      std::vector<int> targets;
      for (std::size_t i = 0; i < r; ++i) targets.push_back(static_cast<int>(rng() % c));
      f = [targets](Var x) { return ops::cross_entropy(x, targets); };
      break;
    }
    default: throw std::out_of_range("no primitive case " + std::to_string(which));
  }
  return {f, point};
}

}  // namespace gradcases
