#pragma once

#include <cstddef>
#include <vector>

#include "rgflow/autodiff.hpp"
#include "rgflow/rng.hpp"
#include "rgflow/tensor.hpp"

namespace rgflow {

// f_CS(x, t) = W0 x * sigmoid(W1 t) + W2 t, with the product taken element-wise.
struct ConcatSquashLayer {
  Tensor w0;  // out x in
  Tensor w1;  // out x 1
  Tensor w2;  // out x 1

  static ConcatSquashLayer zeros(std::size_t in_dim, std::size_t out_dim);
  std::size_t in_dim() const { return w0.cols(); }
  std::size_t out_dim() const { return w0.rows(); }
};

// Chain of concatsquash layers with tanh after every layer but the last.
struct OdeFunc {
  std::vector<ConcatSquashLayer> layers;

  // dim -> hidden -> ... -> dim with `num_layers` layers (>= 1), zero weights.
  static OdeFunc zeros(std::size_t dim, std::size_t hidden,
                       std::size_t num_layers);
  std::size_t dim() const;
  void validate() const;
};

struct FlowBlock {
  OdeFunc func;
  int steps = 20;  // uniform RK4 steps on [0, 1]

  std::size_t dim() const { return func.dim(); }
  void validate() const;
};

struct TransformResult {
  Tensor state;
  double logdet = 0.0;    // log|det d(out)/d(in)|
  double kinetic = 0.0;   // integral of |f|^2 dt
  double jac_frob = 0.0;  // integral of |df/dx|_F^2 dt
};

// W0 ~ N(0, 1/in_dim); W1 = W2 = 0.
void init_weights(OdeFunc& func, Rng& rng);
// Every weight ~ N(0, scale^2). Used by tests to get non-trivial fields.
void randomize_weights(OdeFunc& func, Rng& rng, double scale);

std::vector<Tensor*> parameters(OdeFunc& func);
std::vector<const Tensor*> parameters(const OdeFunc& func);

Tensor cs_apply(const ConcatSquashLayer& layer, const Tensor& x, double t);
Tensor odefunc_eval(const OdeFunc& func, const Tensor& x, double t);

TransformResult block_forward(const FlowBlock& block, const Tensor& x0);
// Exact inverse of the discretized forward map on the same step grid.
TransformResult block_inverse(const FlowBlock& block, const Tensor& x1);
// log|det| of a central-difference Jacobian of block_forward. Test oracle.
double block_logdet_bruteforce(const FlowBlock& block, const Tensor& x0,
                               double h = 1e-5);

// ---------------------------------------------------------------------------
// Batched evaluation. Rows of every matrix are independent samples.

struct LayerVars {
  ad::Var w0, w1, w2;
};

// OdeFunc weights as Vars: constants, or leaves on a tape.
struct BoundFunc {
  std::vector<LayerVars> layers;
  std::size_t dim() const;
};

BoundFunc bind_constant(const OdeFunc& func);
// Appends the new leaves to `leaves` in parameters() order.
BoundFunc bind_variables(const OdeFunc& func, ad::Tape& tape,
                         std::vector<ad::Var>& leaves);

struct FieldEval {
  ad::Var value;     // batch x d
  ad::Var tangents;  // (d*batch) x d; block j holds df/dx e_j. Optional.
};

FieldEval eval_field(const BoundFunc& fn, const ad::Var& x, double t,
                     bool with_jacobian);

struct BatchTransform {
  ad::Var state;     // batch x d
  ad::Var logdet;    // batch x 1
  ad::Var kinetic;   // batch x 1
  ad::Var jac_frob;  // batch x 1
};

// Differentiable forward integration; records on the tape when `fn` is bound
// to one.
BatchTransform flow_forward(const BoundFunc& fn, const ad::Var& x0, int steps);

struct BatchInverse {
  Tensor state;     // batch x d
  Tensor logdet;    // batch x 1, equals minus the forward logdet
  Tensor kinetic;   // batch x 1
  Tensor jac_frob;  // batch x 1
};

BatchInverse flow_inverse(const BoundFunc& fn, const Tensor& x1, int steps);

}  // namespace rgflow
