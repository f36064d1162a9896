#include "baseq/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "baseq/error.hpp"

namespace baseq {

double OptimSchedule::decay(int step) const {
  if (steps <= 0) return 1.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(steps)));
}

namespace {

struct Evaluation {
  double loss;
  std::vector<Tensor> grads;
};

Evaluation run(const Objective& objective, const ParameterSet& params, bool want_grad) {
  ad::Graph graph;
  std::vector<ad::Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(want_grad ? graph.parameter(p.value) : graph.constant(p.value));
  ad::Var loss = objective(graph, leaves);
  if (loss.value().size() != 1) throw ValidationError("optimize: objective must be a scalar");
  Evaluation ev{loss.value()[0], {}};
  if (want_grad && std::isfinite(ev.loss)) {
    graph.backward(loss);
    ev.grads.reserve(leaves.size());
    for (const auto& v : leaves) ev.grads.push_back(graph.grad(v));
  }
  return ev;
}

}  // namespace

double evaluate(const Objective& objective, const ParameterSet& params) {
  return run(objective, params, false).loss;
}

OptimResult optimize(const Objective& objective, ParameterSet params, const OptimSchedule& sched) {
  OptimResult res;
  std::vector<Tensor> m1, m2;
  for (const auto& p : params) {
    m1.emplace_back(p.value.shape(), 0.0);
    m2.emplace_back(p.value.shape(), 0.0);
  }
  res.params = params;
  const int steps = std::max(sched.steps, 0);
  for (int t = 0; t <= steps; ++t) {
    const bool last = t == steps;
    Evaluation ev = run(objective, params, !last);
    if (!std::isfinite(ev.loss)) throw NumericalError("NaN loss at step " + std::to_string(t));
    res.losses.push_back(ev.loss);
    if (t == 0) {
      res.initial_loss = res.best_loss = ev.loss;
      res.best_step = 0;
    } else if (ev.loss < res.best_loss) {
      res.best_loss = ev.loss;
      res.best_step = t;
      res.params = params;
    }
    if (last) break;

    const double k = sched.decay(t);
    const double bc1 = 1.0 - std::pow(sched.beta1, t + 1);
    const double bc2 = 1.0 - std::pow(sched.beta2, t + 1);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = params[i];
      const Tensor& g = ev.grads[i];
      const double lr = p.lr * k;
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        m1[i][j] = sched.beta1 * m1[i][j] + (1.0 - sched.beta1) * g[j];
        m2[i][j] = sched.beta2 * m2[i][j] + (1.0 - sched.beta2) * g[j] * g[j];
        const double mhat = m1[i][j] / bc1;
        const double vhat = m2[i][j] / bc2;
        p.value[j] = std::clamp(p.value[j] - lr * mhat / (std::sqrt(vhat) + sched.eps), p.lower, p.upper);
      }
    }
  }
  return res;
}

}  // namespace baseq
