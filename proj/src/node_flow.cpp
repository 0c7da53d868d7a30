#include "rgflow/node_flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "rgflow/errors.hpp"

namespace rgflow {

namespace ops = ad;

ConcatSquashLayer ConcatSquashLayer::zeros(std::size_t in_dim,
                                           std::size_t out_dim) {
  return {Tensor({out_dim, in_dim}), Tensor({out_dim, 1}),
          Tensor({out_dim, 1})};
}

OdeFunc OdeFunc::zeros(std::size_t dim, std::size_t hidden,
                       std::size_t num_layers) {
  if (dim == 0 || num_layers == 0 || (num_layers > 1 && hidden == 0)) {
    throw ShapeError("OdeFunc::zeros: dimensions must be positive");
  }
  OdeFunc f;
  for (std::size_t j = 0; j < num_layers; ++j) {
    const std::size_t in = j == 0 ? dim : hidden;
    const std::size_t out = j + 1 == num_layers ? dim : hidden;
    f.layers.push_back(ConcatSquashLayer::zeros(in, out));
  }
  return f;
}

std::size_t OdeFunc::dim() const {
  if (layers.empty()) throw ShapeError("OdeFunc has no layers");
  return layers.front().in_dim();
}

void OdeFunc::validate() const {
  if (layers.empty()) throw ShapeError("OdeFunc has no layers");
  for (std::size_t j = 0; j < layers.size(); ++j) {
    const auto& l = layers[j];
    if (l.w0.rank() != 2 || l.w1.shape() != Shape{l.out_dim(), 1} ||
        l.w2.shape() != Shape{l.out_dim(), 1}) {
      throw ShapeError("concatsquash layer " + std::to_string(j) +
                       " has inconsistent weight shapes");
    }
    if (j + 1 < layers.size() && l.out_dim() != layers[j + 1].in_dim()) {
      throw ShapeError("concatsquash layers " + std::to_string(j) + " and " +
                       std::to_string(j + 1) + " do not chain");
    }
  }
  if (layers.back().out_dim() != dim()) {
    throw ShapeError("OdeFunc output dimension differs from input dimension");
  }
}

void FlowBlock::validate() const {
  func.validate();
  if (steps < 1) throw ShapeError("FlowBlock needs at least one RK4 step");
}

void init_weights(OdeFunc& func, Rng& rng) {
  for (auto& l : func.layers) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(l.in_dim()));
    for (auto& v : l.w0.data()) v = sd * rng.normal();
    for (auto& v : l.w1.data()) v = 0.0;
    for (auto& v : l.w2.data()) v = 0.0;
  }
}

void randomize_weights(OdeFunc& func, Rng& rng, double scale) {
  for (Tensor* p : parameters(func))
    for (auto& v : p->data()) v = scale * rng.normal();
}

std::vector<Tensor*> parameters(OdeFunc& func) {
  std::vector<Tensor*> out;
  for (auto& l : func.layers) {
    out.push_back(&l.w0);
    out.push_back(&l.w1);
    out.push_back(&l.w2);
  }
  return out;
}

std::vector<const Tensor*> parameters(const OdeFunc& func) {
  std::vector<const Tensor*> out;
  for (const auto& l : func.layers) {
    out.push_back(&l.w0);
    out.push_back(&l.w1);
    out.push_back(&l.w2);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Field evaluation

std::size_t BoundFunc::dim() const {
  if (layers.empty()) throw ShapeError("BoundFunc has no layers");
  return layers.front().w0.cols();
}

BoundFunc bind_constant(const OdeFunc& func) {
  func.validate();
  BoundFunc b;
  for (const auto& l : func.layers) {
    b.layers.push_back({ad::Var::constant(l.w0), ad::Var::constant(l.w1),
                        ad::Var::constant(l.w2)});
  }
  return b;
}

BoundFunc bind_variables(const OdeFunc& func, ad::Tape& tape,
                         std::vector<ad::Var>& leaves) {
  func.validate();
  BoundFunc b;
  for (const auto& l : func.layers) {
    LayerVars v{tape.variable(l.w0), tape.variable(l.w1), tape.variable(l.w2)};
    leaves.push_back(v.w0);
    leaves.push_back(v.w1);
    leaves.push_back(v.w2);
    b.layers.push_back(std::move(v));
  }
  return b;
}

namespace {

ad::Var cs_layer(const LayerVars& l, const ad::Var& x, const ad::Var& gate,
                 const ad::Var& bias) {
  return ops::add_row(ops::mul_row(ops::matmul_nt(x, l.w0), gate), bias);
}

}  // namespace

FieldEval eval_field(const BoundFunc& fn, const ad::Var& x, double t,
                     bool with_jacobian) {
  const std::size_t batch = x.rows();
  const std::size_t d = fn.dim();
  if (x.cols() != d) {
    throw ShapeError("field input has " + std::to_string(x.cols()) +
                     " columns, expected " + std::to_string(d));
  }
  ad::Var h = x;
  ad::Var tan;
  const std::size_t n_layers = fn.layers.size();
  for (std::size_t j = 0; j < n_layers; ++j) {
    const LayerVars& l = fn.layers[j];
    const ad::Var gate = ops::sigmoid(ops::scale(ops::transpose(l.w1), t));
    const ad::Var bias = ops::scale(ops::transpose(l.w2), t);
    const ad::Var pre = cs_layer(l, h, gate, bias);
    if (with_jacobian) {
      if (j == 0) {
        // d(pre)/dx e_i is column i of W0, scaled by the gate, for every sample.
        tan = ops::repeat_rows(ops::mul_row(ops::transpose(l.w0), gate), batch);
      } else {
        tan = ops::mul_row(ops::matmul_nt(tan, l.w0), gate);
      }
    }
    if (j + 1 < n_layers) {
      h = ops::tanh(pre);
      if (with_jacobian) {
        const ad::Var slope = ops::add_scalar(ops::neg(ops::square(h)), 1.0);
        tan = ops::mul(tan, ops::tile_rows(slope, d));
      }
    } else {
      h = pre;
    }
  }
  return {h, tan};
}

Tensor cs_apply(const ConcatSquashLayer& layer, const Tensor& x, double t) {
  if (x.size() != layer.in_dim()) {
    throw ShapeError("cs_apply: input of size " + std::to_string(x.size()) +
                     " for layer with input dimension " +
                     std::to_string(layer.in_dim()));
  }
  const LayerVars l{ad::Var::constant(layer.w0), ad::Var::constant(layer.w1),
                    ad::Var::constant(layer.w2)};
  const ad::Var gate = ops::sigmoid(ops::scale(ops::transpose(l.w1), t));
  const ad::Var bias = ops::scale(ops::transpose(l.w2), t);
  const ad::Var xv = ad::Var::constant(x.reshaped({1, x.size()}));
  return cs_layer(l, xv, gate, bias).value().reshaped({layer.out_dim()});
}

Tensor odefunc_eval(const OdeFunc& func, const Tensor& x, double t) {
  const BoundFunc fn = bind_constant(func);
  if (x.size() != fn.dim()) {
    throw ShapeError("odefunc_eval: input of size " + std::to_string(x.size()) +
                     ", expected " + std::to_string(fn.dim()));
  }
  const ad::Var xv = ad::Var::constant(x.reshaped({1, x.size()}));
  return eval_field(fn, xv, t, false).value.value().reshaped({x.size()});
}

// ---------------------------------------------------------------------------
// RK4 integration

namespace {

struct StepIncrement {
  ad::Var dx;       // state increment over the step
  ad::Var logdet;   // batch x 1
  ad::Var kinetic;  // batch x 1
  ad::Var jac;      // batch x 1
};

// One classical RK4 step from (x, t) with step h. Quadrature of the trace,
// kinetic and Jacobian integrands uses the same stage weights.
StepIncrement rk4_increment(const BoundFunc& fn, const ad::Var& x, double t,
                            double h, bool with_jacobian) {
  const std::size_t batch = x.rows();
  const double c[4] = {0.0, 0.5, 0.5, 1.0};
  const double w[4] = {1.0, 2.0, 2.0, 1.0};
  StepIncrement inc;
  ad::Var k_prev;
  for (int s = 0; s < 4; ++s) {
    const ad::Var xs = s == 0 ? x : ops::add(x, ops::scale(k_prev, c[s] * h));
    const FieldEval ev = eval_field(fn, xs, t + c[s] * h, with_jacobian);
    const double ws = w[s] * h / 6.0;
    const ad::Var dx = ops::scale(ev.value, ws);
    inc.dx = s == 0 ? dx : ops::add(inc.dx, dx);
    if (with_jacobian) {
      const ad::Var tr = ops::scale(ops::stacked_trace(ev.tangents, batch), ws);
      const ad::Var kin = ops::scale(ops::row_sum(ops::square(ev.value)), ws);
      const ad::Var jf =
          ops::scale(ops::stacked_sqnorm(ev.tangents, batch), ws);
      inc.logdet = s == 0 ? tr : ops::add(inc.logdet, tr);
      inc.kinetic = s == 0 ? kin : ops::add(inc.kinetic, kin);
      inc.jac = s == 0 ? jf : ops::add(inc.jac, jf);
    }
    k_prev = ev.value;
  }
  return inc;
}

void check_state(const Tensor& x, const char* where) {
  if (!x.all_finite()) {
    throw NumericError(std::string("non-finite intermediate state in ") + where);
  }
}

}  // namespace

BatchTransform flow_forward(const BoundFunc& fn, const ad::Var& x0,
                            int steps) {
  if (steps < 1) throw ShapeError("flow_forward: steps must be >= 1");
  const double h = 1.0 / steps;
  ad::Var x = x0;
  BatchTransform out;
  for (int i = 0; i < steps; ++i) {
    const StepIncrement inc = rk4_increment(fn, x, i * h, h, true);
    x = ops::add(x, inc.dx);
    check_state(x.value(), "flow_forward");
    out.logdet = i == 0 ? inc.logdet : ops::add(out.logdet, inc.logdet);
    out.kinetic = i == 0 ? inc.kinetic : ops::add(out.kinetic, inc.kinetic);
    out.jac_frob = i == 0 ? inc.jac : ops::add(out.jac_frob, inc.jac);
  }
  out.state = x;
  return out;
}

BatchInverse flow_inverse(const BoundFunc& fn, const Tensor& x1, int steps) {
  if (steps < 1) throw ShapeError("flow_inverse: steps must be >= 1");
  const double h = 1.0 / steps;
  const std::size_t batch = x1.rows();
  Tensor x = x1.as_matrix();
  BatchInverse out{Tensor(), Tensor({batch, 1}), Tensor({batch, 1}),
                   Tensor({batch, 1})};
  constexpr int kMaxIter = 200;

  for (int i = steps - 1; i >= 0; --i) {
    const double t = i * h;
    const Tensor target = x;
    const ad::Var target_v = ad::Var::constant(target);
    // Predictor: the time-reversed RK4 step from t + h.
    Tensor guess =
        ops::add(target_v, rk4_increment(fn, target_v, t + h, -h, false).dx)
            .value();
    // Corrector: solve guess + h*Phi(guess, t) = target by fixed-point
    // iteration so the step is the exact inverse of the forward step.
    double prev_change = std::numeric_limits<double>::infinity();
    bool converged = false;
    for (int it = 0; it < kMaxIter; ++it) {
      const ad::Var g = ad::Var::constant(guess);
      Tensor next =
          ops::sub(target_v, rk4_increment(fn, g, t, h, false).dx).value();
      check_state(next, "flow_inverse");
      const double change = max_abs_diff(next, guess);
      const double scale = 1.0 + next.max_abs();
      guess = std::move(next);
      if (change <= 1e-14 * scale) {
        converged = true;
        break;
      }
      // Stalled at round-off.
      if (change <= 1e-11 * scale && change >= prev_change) {
        converged = true;
        break;
      }
      prev_change = change;
    }
    if (!converged) {
      throw NumericError(
          "flow_inverse: RK4 step inversion did not converge; the field is "
          "too stiff for the step count");
    }
    const StepIncrement inc =
        rk4_increment(fn, ad::Var::constant(guess), t, h, true);
    for (std::size_t b = 0; b < batch; ++b) {
      out.logdet[b] -= inc.logdet.value()[b];
      out.kinetic[b] += inc.kinetic.value()[b];
      out.jac_frob[b] += inc.jac.value()[b];
    }
    x = std::move(guess);
  }
  out.state = std::move(x);
  return out;
}

// ---------------------------------------------------------------------------
// Single-sample API

namespace {

TransformResult to_result(const Tensor& state, double logdet, double kinetic,
                          double jac, std::size_t d) {
  return {state.reshaped({d}), logdet, kinetic, jac};
}

}  // namespace

TransformResult block_forward(const FlowBlock& block, const Tensor& x0) {
  block.validate();
  const std::size_t d = block.dim();
  if (x0.size() != d) {
    throw ShapeError("block_forward: state of size " + std::to_string(x0.size()) +
                     ", block dimension " + std::to_string(d));
  }
  const BoundFunc fn = bind_constant(block.func);
  const BatchTransform r =
      flow_forward(fn, ad::Var::constant(x0.reshaped({1, d})), block.steps);
  return to_result(r.state.value(), r.logdet.value()[0], r.kinetic.value()[0],
                   r.jac_frob.value()[0], d);
}

TransformResult block_inverse(const FlowBlock& block, const Tensor& x1) {
  block.validate();
  const std::size_t d = block.dim();
  if (x1.size() != d) {
    throw ShapeError("block_inverse: state of size " + std::to_string(x1.size()) +
                     ", block dimension " + std::to_string(d));
  }
  const BoundFunc fn = bind_constant(block.func);
  const BatchInverse r = flow_inverse(fn, x1.reshaped({1, d}), block.steps);
  return to_result(r.state, r.logdet[0], r.kinetic[0], r.jac_frob[0], d);
}

double block_logdet_bruteforce(const FlowBlock& block, const Tensor& x0,
                               double h) {
  const std::size_t d = block.dim();
  if (d > 6) throw ShapeError("block_logdet_bruteforce: dimension must be <= 6");
  if (x0.size() != d) throw ShapeError("block_logdet_bruteforce: bad state size");
  std::vector<double> jac(d * d);
  for (std::size_t j = 0; j < d; ++j) {
    Tensor xp = x0.reshaped({d});
    Tensor xm = x0.reshaped({d});
    xp[j] += h;
    xm[j] -= h;
    const Tensor fp = block_forward(block, xp).state;
    const Tensor fm = block_forward(block, xm).state;
    for (std::size_t i = 0; i < d; ++i) jac[i * d + j] = (fp[i] - fm[i]) / (2 * h);
  }
  // LU with partial pivoting; log|det| is the sum of log|pivots|.
  double logdet = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < d; ++r)
      if (std::abs(jac[r * d + c]) > std::abs(jac[piv * d + c])) piv = r;
    const double p = jac[piv * d + c];
    if (p == 0.0 || !std::isfinite(p)) {
      throw NumericError("block_logdet_bruteforce: singular Jacobian");
    }
    if (piv != c)
      for (std::size_t k = 0; k < d; ++k) std::swap(jac[c * d + k], jac[piv * d + k]);
    logdet += std::log(std::abs(p));
    for (std::size_t r = c + 1; r < d; ++r) {
      const double f = jac[r * d + c] / p;
      for (std::size_t k = c; k < d; ++k) jac[r * d + k] -= f * jac[c * d + k];
    }
  }
  return logdet;
}

}  // namespace rgflow
