#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "baseq/autodiff.hpp"
#include "baseq/tensor.hpp"

namespace baseq {

/// One named trainable tensor. `lower`/`upper` are enforced by projection
/// after every update.
struct Parameter {
  std::string name;
  Tensor value;
  double lr = 1e-2;
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
};

using ParameterSet = std::vector<Parameter>;

/// Adam with cosine learning-rate decay from each parameter's `lr` to 0.
struct OptimSchedule {
  int steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  /// Multiplier applied to the initial learning rate at `step` (0-based).
  double decay(int step) const;
};

/// Builds the scalar objective on `graph` from the bound parameter leaves.
using Objective = std::function<ad::Var(ad::Graph& graph, const std::vector<ad::Var>& params)>;

struct OptimResult {
  ParameterSet params;         ///< best-seen parameters (arg-min of the loss trajectory)
  std::vector<double> losses;  ///< loss before each update, then the final loss
  double initial_loss = 0.0;
  double best_loss = 0.0;
  int best_step = 0;
};

/// Runs `sched.steps` Adam updates. The loss trajectory includes the loss of
/// the parameters produced by the last update, and the returned parameters
/// are the best seen, so `best_loss <= initial_loss` always holds.
///
/// Throws ValidationError for a non-scalar objective and NumericalError
/// ("NaN loss at step k") when the loss stops being finite.
OptimResult optimize(const Objective& objective, ParameterSet params, const OptimSchedule& sched);

/// Evaluates the objective once without updating.
double evaluate(const Objective& objective, const ParameterSet& params);

}  // namespace baseq
