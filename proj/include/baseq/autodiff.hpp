#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "baseq/tensor.hpp"

namespace baseq::ad {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// Tape-based reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward() walks the tape once from the loss towards the leaves. A graph
/// is single-writer; independent graphs may live on different threads.
class Graph {
 public:
  /// Called during backward with the node's forward value and its gradient.
  /// Implementations push gradients into parents with accumulate().
  using BackwardFn = std::function<void(Graph&, const Tensor& value, const Tensor& grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  ~Graph();

  Var constant(Tensor value);
  /// Leaf whose gradient is kept after backward().
  Var parameter(Tensor value);

  /// Appends an op node. `fn` may be empty for non-differentiable ops.
  Var record(Tensor value, std::vector<Var> parents, BackwardFn fn);

  void backward(Var loss);
  void accumulate(Var target, const Tensor& grad);
  void accumulate(Var target, Tensor&& grad);
  bool requires_grad(Var v) const;

  /// Gradient of a parameter after backward(); zeros if it was unreachable.
  Tensor grad(Var v) const;

  const Tensor& value(Var v) const { return nodes_[std::size_t(v.id())].value; }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn fn;
    bool requires_grad = false;
    bool is_param = false;
  };
  Var push(Node node);

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

/// Process-wide counters of live parameter-gradient and node-value elements.
/// Used to check that block-wise training never holds gradients for more
/// than one block at a time.
struct Footprint {
  static void reset();
  static std::size_t live_param_grads();
  static std::size_t peak_param_grads();
  static std::size_t peak_values();
};

// ---------------------------------------------------------------------------
// Elementwise and broadcasting ops. Binary ops accept operands of equal shape,
// a row vector (length = cols), a column vector ([rows × 1]) or a scalar.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double k);
Var add_scalar(Var a, double k);
Var square(Var a);
Var abs(Var a);
Var silu(Var a);
Var exp(Var a);
/// max(a, floor) elementwise; gradient passes where a > floor.
Var maximum(Var a, double floor);

// Reductions.
Var sum(Var a);
Var mean(Var a);
Var mse(Var a, const Tensor& target);
/// Per-row minimum / maximum, shape [rows × 1]. Gradient goes to the first arg-extremum.
Var row_min(Var a);
Var row_max(Var a);

// Linear algebra.
Var matmul(Var a, Var b);
/// a · bᵀ
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
/// X = A⁻¹ B via LU with partial pivoting.
Var solve(Var a, Var b);

// Straight-through estimators.
/// Round half away from zero; gradient is the identity.
Var round_ste(Var a);
/// Clamp to [lo, hi]; gradient 1 inside the closed interval, 0 outside.
Var clamp_ste(Var a, double lo, double hi);

// Transformer pieces with hand-written backward passes.
/// Row-wise x / sqrt(mean(x²) + eps).
Var rmsnorm(Var a, double eps);
/// Multi-head softmax attention over rows grouped into sequences of
/// `seq_len` tokens. Q, K, V are [tokens × heads·head_dim] with contiguous heads.
Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t seq_len, bool causal);

// Plain-tensor counterparts used by the non-differentiable paths.
Tensor rmsnorm(const Tensor& x, double eps);
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::size_t seq_len, bool causal);
Tensor silu(const Tensor& x);
double round_half_away(double x);

}  // namespace baseq::ad
