#pragma once

#include <functional>
#include <string>
#include <vector>

#include "jemha/tensor.hpp"

namespace jemha {

class Rng;

using TensorProgram = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of the scalar program f against central
// finite differences with step eps. Returns the max over all coordinates of
// requires_grad inputs of |analytic − numeric| / max(|analytic|, |numeric|,
// 1e-8). Coordinates are perturbed in place through the tensors' shared
// storage, so f may equally read the passed vector or captured aliases of
// the same tensors. A non-finite value anywhere in the forward pass is an
// error.
double grad_check(const TensorProgram& f, std::vector<Tensor> inputs, double eps = 1e-5);

// Same check restricted to at most max_coords randomly chosen coordinates
// per input — for composed graphs whose full coordinate sweep would be
// quadratic in parameter count.
double grad_check_sampled(const TensorProgram& f, std::vector<Tensor> inputs, std::size_t max_coords, Rng& rng,
                          double eps = 1e-5);

struct RegisteredOp {
  std::string name;
  // Draws one random instance (shapes + values) and returns its grad_check error.
  std::function<double(Rng&)> check;
};

// One entry per differentiable primitive and composite.
const std::vector<RegisteredOp>& op_registry();

}  // namespace jemha
