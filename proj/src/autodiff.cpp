#include "baseq/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "baseq/error.hpp"
#include "baseq/linalg.hpp"

namespace baseq::ad {

namespace {

std::atomic<std::size_t> g_live_param_grads{0};
std::atomic<std::size_t> g_peak_param_grads{0};
std::atomic<std::size_t> g_live_values{0};
std::atomic<std::size_t> g_peak_values{0};

void bump_peak(std::atomic<std::size_t>& peak, std::size_t now) {
  std::size_t prev = peak.load();
  while (now > prev && !peak.compare_exchange_weak(prev, now)) {
  }
}

}  // namespace

void Footprint::reset() {
  g_peak_param_grads = g_live_param_grads.load();
  g_peak_values = g_live_values.load();
}
std::size_t Footprint::live_param_grads() { return g_live_param_grads; }
std::size_t Footprint::peak_param_grads() { return g_peak_param_grads; }
std::size_t Footprint::peak_values() { return g_peak_values; }

const Tensor& Var::value() const { return graph_->value(*this); }

Graph::~Graph() {
  std::size_t grads = 0;
  std::size_t values = 0;
  for (const auto& n : nodes_) {
    if (n.is_param) grads += n.grad.size();
    values += n.value.size();
  }
  g_live_param_grads -= grads;
  g_live_values -= values;
}

Var Graph::push(Node node) {
  bump_peak(g_peak_values, g_live_values += node.value.size());
  nodes_.push_back(std::move(node));
  return Var(this, int(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) { return push(Node{std::move(value), {}, {}, false, false}); }

Var Graph::parameter(Tensor value) { return push(Node{std::move(value), {}, {}, true, true}); }

Var Graph::record(Tensor value, std::vector<Var> parents, BackwardFn fn) {
  bool rg = false;
  for (const Var& p : parents) {
    if (p.graph_ != this) throw ValidationError("autodiff: operands belong to different graphs");
    rg = rg || nodes_[std::size_t(p.id_)].requires_grad;
  }
  Node n{std::move(value), {}, {}, rg && fn != nullptr, false};
  if (n.requires_grad) n.fn = std::move(fn);
  return push(std::move(n));
}

bool Graph::requires_grad(Var v) const { return nodes_[std::size_t(v.id())].requires_grad; }

void Graph::accumulate(Var target, const Tensor& grad) { accumulate(target, Tensor(grad)); }

void Graph::accumulate(Var target, Tensor&& grad) {
  Node& n = nodes_[std::size_t(target.id())];
  if (!n.requires_grad) return;
  if (grad.size() != n.value.size()) throw ValidationError("autodiff: gradient shape mismatch");
  if (n.grad.empty()) {
    n.grad = std::move(grad).reshaped_to(n.value.shape());
    if (n.is_param) bump_peak(g_peak_param_grads, g_live_param_grads += n.grad.size());
  } else {
    auto dst = n.grad.data();
    auto src = grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

void Graph::backward(Var loss) {
  if (loss.graph_ != this) throw ValidationError("backward: loss belongs to another graph");
  Node& root = nodes_[std::size_t(loss.id())];
  if (root.value.size() != 1) throw ValidationError("backward: loss must be a scalar");
  visits_ = 0;
  if (!root.requires_grad) return;
  accumulate(loss, Tensor(root.value.shape(), 1.0));
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[std::size_t(id)];
    if (n.grad.empty()) continue;
    ++visits_;
    if (n.fn) n.fn(*this, n.value, n.grad);
    if (!n.is_param) n.grad = Tensor();  // intermediate gradients are not kept
  }
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[std::size_t(v.id())];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

// ---------------------------------------------------------------------------
// Broadcasting

namespace {

enum class Bcast { Full, Row, Col, Scalar };

Bcast kind_of(const Tensor& t, std::size_t r, std::size_t c) {
  if (t.size() == r * c && t.cols() == c) return Bcast::Full;
  if (t.size() == 1) return Bcast::Scalar;
  if (t.rows() == 1 && t.cols() == c) return Bcast::Row;
  if (t.cols() == 1 && t.rows() == r) return Bcast::Col;
  throw ValidationError("broadcast: cannot match " + shape_str(t.shape()) + " to [" + std::to_string(r) +
                        "x" + std::to_string(c) + "]");
}

inline std::size_t bindex(Bcast k, std::size_t i, std::size_t j, std::size_t c) {
  switch (k) {
    case Bcast::Full: return i * c + j;
    case Bcast::Row: return j;
    case Bcast::Col: return i;
    case Bcast::Scalar: return 0;
  }
  return 0;
}

/// f(x, y) -> out; dx(x, y, out) and dy(x, y, out) give local partials.
template <typename F, typename DX, typename DY>
Var binary(Var a, Var b, F f, DX dx, DY dy) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Shape& out_shape = bv.size() > av.size() ? bv.shape() : av.shape();
  const std::size_t c = out_shape.empty() ? 0 : out_shape.back();
  const std::size_t r = c == 0 ? 0 : shape_numel(out_shape) / c;
  const Bcast ka = kind_of(av, r, c);
  const Bcast kb = kind_of(bv, r, c);
  Tensor out(out_shape);
  if (ka == Bcast::Full && kb == Bcast::Full) {
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = f(av[o], bv[o]);
  } else {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        out[i * c + j] = f(av[bindex(ka, i, j, c)], bv[bindex(kb, i, j, c)]);
  }
  Graph& g = a.graph();
  return g.record(std::move(out), {a, b},
                  [a, b, ka, kb, r, c, dx, dy](Graph& g, const Tensor& value, const Tensor& grad) {
                    const Tensor& av = a.value();
                    const Tensor& bv = b.value();
                    const bool need_a = g.requires_grad(a);
                    const bool need_b = g.requires_grad(b);
                    if (ka == Bcast::Full && kb == Bcast::Full) {
                      const std::size_t n = value.size();
                      if (need_a) {
                        Tensor ga(av.shape());
                        for (std::size_t o = 0; o < n; ++o) ga[o] = grad[o] * dx(av[o], bv[o], value[o]);
                        g.accumulate(a, std::move(ga));
                      }
                      if (need_b) {
                        Tensor gb(bv.shape());
                        for (std::size_t o = 0; o < n; ++o) gb[o] = grad[o] * dy(av[o], bv[o], value[o]);
                        g.accumulate(b, std::move(gb));
                      }
                      return;
                    }
                    Tensor ga(need_a ? av.shape() : Shape{});
                    Tensor gb(need_b ? bv.shape() : Shape{});
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) {
                        const std::size_t o = i * c + j;
                        const std::size_t ia = bindex(ka, i, j, c);
                        const std::size_t ib = bindex(kb, i, j, c);
                        if (need_a) ga[ia] += grad[o] * dx(av[ia], bv[ib], value[o]);
                        if (need_b) gb[ib] += grad[o] * dy(av[ia], bv[ib], value[o]);
                      }
                    if (need_a) g.accumulate(a, std::move(ga));
                    if (need_b) g.accumulate(b, std::move(gb));
                  });
}

/// Elementwise unary op with derivative d(x, out).
template <typename F, typename D>
Var unary(Var a, F f, D d) {
  Tensor out = a.value();
  for (double& v : out.data()) v = f(v);
  return a.graph().record(std::move(out), {a}, [a, d](Graph& g, const Tensor& value, const Tensor& grad) {
    const Tensor& x = a.value();
    Tensor ga(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] = grad[i] * d(x[i], value[i]);
    g.accumulate(a, std::move(ga));
  });
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Var neg(Var a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(Var a, double k) {
  return unary(a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

Var add_scalar(Var a, double k) {
  return unary(a, [k](double x) { return x + k; }, [](double, double) { return 1.0; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(Var a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var silu(Var a) {
  return unary(a, [](double x) { return x * sigmoid(x); },
               [](double x, double) {
                 const double s = sigmoid(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double out) { return out; });
}

Var maximum(Var a, double floor) {
  return unary(a, [floor](double x) { return std::max(x, floor); },
               [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

double round_half_away(double x) { return std::round(x); }

Var round_ste(Var a) {
  return unary(a, [](double x) { return round_half_away(x); }, [](double, double) { return 1.0; });
}

Var clamp_ste(Var a, double lo, double hi) {
  if (lo > hi) throw ValidationError("clamp_ste: lo > hi");
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph().record(Tensor::scalar(s), {a}, [a](Graph& g, const Tensor&, const Tensor& grad) {
    g.accumulate(a, Tensor(a.shape(), grad[0]));
  });
}

Var mean(Var a) {
  const double n = double(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var mse(Var a, const Tensor& target) {
  const Tensor& x = a.value();
  if (x.size() != target.size()) throw ValidationError("mse: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - target[i]) * (x[i] - target[i]);
  const double n = double(x.size());
  return a.graph().record(Tensor::scalar(s / n), {a},
                          [a, target, n](Graph& g, const Tensor&, const Tensor& grad) {
                            const Tensor& x = a.value();
                            Tensor ga(x.shape());
                            for (std::size_t i = 0; i < x.size(); ++i)
                              ga[i] = grad[0] * 2.0 * (x[i] - target[i]) / n;
                            g.accumulate(a, ga);
                          });
}

namespace {
template <typename Better>
Var row_extreme(Var a, Better better) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  if (c == 0) throw ValidationError("empty input");
  Tensor out({r, 1});
  std::vector<std::size_t> arg(r);
  for (std::size_t i = 0; i < r; ++i) {
    auto row = x.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (better(row[j], row[best])) best = j;
    arg[i] = best;
    out[i] = row[best];
  }
  return a.graph().record(std::move(out), {a}, [a, arg, c](Graph& g, const Tensor&, const Tensor& grad) {
    Tensor ga(a.shape(), 0.0);
    for (std::size_t i = 0; i < arg.size(); ++i) ga[i * c + arg[i]] = grad[i];
    g.accumulate(a, ga);
  });
}
}  // namespace

Var row_min(Var a) { return row_extreme(a, [](double x, double y) { return x < y; }); }
Var row_max(Var a) { return row_extreme(a, [](double x, double y) { return x > y; }); }

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  return a.graph().record(baseq::matmul(a.value(), b.value()), {a, b},
                          [a, b](Graph& g, const Tensor&, const Tensor& grad) {
                            if (g.requires_grad(a)) g.accumulate(a, baseq::matmul_nt(grad, b.value()));
                            if (g.requires_grad(b))
                              g.accumulate(b, baseq::matmul(baseq::transpose(a.value()), grad));
                          });
}

Var matmul_nt(Var a, Var b) {
  return a.graph().record(baseq::matmul_nt(a.value(), b.value()), {a, b},
                          [a, b](Graph& g, const Tensor&, const Tensor& grad) {
                            if (g.requires_grad(a)) g.accumulate(a, baseq::matmul(grad, b.value()));
                            if (g.requires_grad(b))
                              g.accumulate(b, baseq::matmul(baseq::transpose(grad), a.value()));
                          });
}

Var transpose(Var a) {
  return a.graph().record(baseq::transpose(a.value()), {a}, [a](Graph& g, const Tensor&, const Tensor& grad) {
    g.accumulate(a, baseq::transpose(grad));
  });
}

Var reshape(Var a, Shape shape) {
  return a.graph().record(a.value().reshaped(std::move(shape)), {a},
                          [a](Graph& g, const Tensor&, const Tensor& grad) { g.accumulate(a, grad); });
}

Var solve(Var a, Var b) {
  LuFactors f = lu_factor(a.value());
  Tensor x = lu_solve(f, b.value());
  return a.graph().record(std::move(x), {a, b},
                          [a, b, f = std::move(f)](Graph& g, const Tensor& value, const Tensor& grad) {
                            // gB = A⁻ᵀ gX, gA = −gB Xᵀ
                            Tensor gb = lu_solve_transposed(f, grad);
                            if (g.requires_grad(a)) g.accumulate(a, baseq::scale(baseq::matmul_nt(gb, value), -1.0));
                            if (g.requires_grad(b)) g.accumulate(b, gb);
                          });
}

// ---------------------------------------------------------------------------
// RMSNorm

Tensor rmsnorm(const Tensor& x, double eps) {
  Tensor out = x;
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = out.row(i);
    double ms = 0.0;
    for (double v : row) ms += v * v;
    const double inv = 1.0 / std::sqrt(ms / double(c) + eps);
    for (double& v : row) v *= inv;
  }
  return out;
}

Var rmsnorm(Var a, double eps) {
  return a.graph().record(rmsnorm(a.value(), eps), {a}, [a, eps](Graph& g, const Tensor& y, const Tensor& grad) {
    const Tensor& x = a.value();
    const std::size_t c = x.cols();
    Tensor ga(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto xr = x.row(i);
      auto yr = y.row(i);
      auto gr = grad.row(i);
      double ms = 0.0;
      for (double v : xr) ms += v * v;
      const double inv = 1.0 / std::sqrt(ms / double(c) + eps);
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
      dot /= double(c);
      auto out = ga.row(i);
      for (std::size_t j = 0; j < c; ++j) out[j] = inv * (gr[j] - yr[j] * dot);
    }
    g.accumulate(a, ga);
  });
}

Tensor silu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = v * sigmoid(v);
  return out;
}

// ---------------------------------------------------------------------------
// Attention

namespace {

struct AttentionDims {
  std::size_t tokens, width, heads, head_dim, seq_len;
};

AttentionDims check_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                              std::size_t seq_len) {
  if (q.shape() != k.shape() || q.shape() != v.shape())
    throw ValidationError("attention: q/k/v shapes differ");
  const std::size_t t = q.rows();
  const std::size_t w = q.cols();
  if (heads == 0 || w % heads != 0) throw ValidationError("attention: width not divisible by heads");
  if (seq_len == 0 || t % seq_len != 0) throw ValidationError("attention: tokens not divisible by seq_len");
  return {t, w, heads, w / heads, seq_len};
}

/// Softmax probabilities for one (sequence, head): P[i][j], j ≤ i when causal.
void attention_probs(const Tensor& q, const Tensor& k, const AttentionDims& d, std::size_t base,
                     std::size_t h, bool causal, std::vector<double>& p) {
  const std::size_t L = d.seq_len;
  const double inv = 1.0 / std::sqrt(double(d.head_dim));
  p.assign(L * L, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    const double* qi = q.storage().data() + ((base + i) * d.width + h * d.head_dim);
    const std::size_t jmax = causal ? i + 1 : L;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < jmax; ++j) {
      const double* kj = k.storage().data() + ((base + j) * d.width + h * d.head_dim);
      double s = 0.0;
      for (std::size_t e = 0; e < d.head_dim; ++e) s += qi[e] * kj[e];
      s *= inv;
      p[i * L + j] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < jmax; ++j) {
      p[i * L + j] = std::exp(p[i * L + j] - mx);
      z += p[i * L + j];
    }
    for (std::size_t j = 0; j < jmax; ++j) p[i * L + j] /= z;
  }
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, std::size_t seq_len,
                 bool causal) {
  const AttentionDims d = check_attention(q, k, v, heads, seq_len);
  Tensor out(q.shape(), 0.0);
  std::vector<double> p;
  const std::size_t L = d.seq_len;
  for (std::size_t base = 0; base < d.tokens; base += L)
    for (std::size_t h = 0; h < d.heads; ++h) {
      attention_probs(q, k, d, base, h, causal, p);
      for (std::size_t i = 0; i < L; ++i) {
        double* oi = &out[(base + i) * d.width + h * d.head_dim];
        for (std::size_t j = 0; j < L; ++j) {
          const double pij = p[i * L + j];
          if (pij == 0.0) continue;
          const double* vj = v.storage().data() + ((base + j) * d.width + h * d.head_dim);
          for (std::size_t e = 0; e < d.head_dim; ++e) oi[e] += pij * vj[e];
        }
      }
    }
  return out;
}

Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t seq_len, bool causal) {
  const AttentionDims d = check_attention(q.value(), k.value(), v.value(), heads, seq_len);
  Tensor out = attention(q.value(), k.value(), v.value(), heads, seq_len, causal);
  return q.graph().record(
      std::move(out), {q, k, v}, [q, k, v, d, causal](Graph& g, const Tensor&, const Tensor& grad) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        const Tensor& vv = v.value();
        Tensor gq(qv.shape(), 0.0);
        Tensor gk(kv.shape(), 0.0);
        Tensor gv(vv.shape(), 0.0);
        const std::size_t L = d.seq_len;
        const std::size_t hd = d.head_dim;
        const double inv = 1.0 / std::sqrt(double(hd));
        std::vector<double> p;
        std::vector<double> dp(L * L);
        for (std::size_t base = 0; base < d.tokens; base += L)
          for (std::size_t h = 0; h < d.heads; ++h) {
            attention_probs(qv, kv, d, base, h, causal, p);
            auto at = [&](std::size_t row, std::size_t e) { return (base + row) * d.width + h * hd + e; };
            // dV = Pᵀ dO ; dP = dO Vᵀ
            for (std::size_t i = 0; i < L; ++i)
              for (std::size_t j = 0; j < L; ++j) {
                const double pij = p[i * L + j];
                double s = 0.0;
                for (std::size_t e = 0; e < hd; ++e) {
                  const double go = grad[at(i, e)];
                  gv[at(j, e)] += pij * go;
                  s += go * vv[at(j, e)];
                }
                dp[i * L + j] = s;
              }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (std::size_t i = 0; i < L; ++i) {
              double rs = 0.0;
              for (std::size_t j = 0; j < L; ++j) rs += dp[i * L + j] * p[i * L + j];
              for (std::size_t j = 0; j < L; ++j) {
                const double ds = p[i * L + j] * (dp[i * L + j] - rs) * inv;
                if (ds == 0.0) continue;
                for (std::size_t e = 0; e < hd; ++e) {
                  gq[at(i, e)] += ds * kv[at(j, e)];
                  gk[at(j, e)] += ds * qv[at(i, e)];
                }
              }
            }
          }
        g.accumulate(q, gq);
        g.accumulate(k, gk);
        g.accumulate(v, gv);
      });
}

}  // namespace baseq::ad
