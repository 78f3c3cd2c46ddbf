#pragma once

#include <array>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "taskcl/tensor.hpp"

namespace taskcl {

struct VarNode;

/**
 * Handle to a node of an eagerly evaluated reverse-mode tape. Ops compute
 * their value immediately and remember how to push gradients to their
 * parents. Backward passes build gradients out of the same op vocabulary,
 * so gradients can themselves be differentiated (needed for the exact
 * second-order meta-learning option); ops whose vjp falls back to raw
 * kernels are flagged and rejected when a double backward reaches them.
 */
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor value, bool requires_grad = true);
  static Var constant(Tensor value);
  static Var scalar(double v) { return constant(Tensor::scalar(v)); }

  bool defined() const { return n_ != nullptr; }
  const Tensor& value() const;
  Tensor& value_mut();  // optimizer updates on leaves only
  bool requires_grad() const;
  const std::vector<int>& shape() const;

  VarNode* node() const { return n_.get(); }

 private:
  std::shared_ptr<VarNode> n_;
  friend Var make_op(const char* name, Tensor value, std::vector<Var> parents,
                     std::function<std::vector<Var>(const Var&)> vjp, bool higher_order_ok);
};

struct VarNode {
  Tensor value;
  bool requires_grad = false;
  bool higher_order_ok = true;
  const char* op = "leaf";
  std::vector<Var> parents;
  std::function<std::vector<Var>(const Var&)> vjp;  // grad_out -> grads per parent
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// RAII scope that stops ops from recording the tape (evaluation paths).
class NoGradScope {
 public:
  NoGradScope() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradScope() { grad_mode_flag() = prev_; }

 private:
  bool prev_;
};

class GradScope {
 public:
  explicit GradScope(bool enable) : prev_(grad_mode_flag()) { grad_mode_flag() = enable; }
  ~GradScope() { grad_mode_flag() = prev_; }

 private:
  bool prev_;
};

inline Var Var::leaf(Tensor value, bool requires_grad) {
  Var v;
  v.n_ = std::make_shared<VarNode>();
  v.n_->value = std::move(value);
  v.n_->requires_grad = requires_grad;
  return v;
}

inline Var Var::constant(Tensor value) { return leaf(std::move(value), false); }

inline bool Var::requires_grad() const { return n_ && n_->requires_grad; }

inline const Tensor& Var::value() const { return n_->value; }

inline Tensor& Var::value_mut() { return n_->value; }

inline const std::vector<int>& Var::shape() const { return n_->value.shape(); }

inline Var make_op(const char* name, Tensor value, std::vector<Var> parents,
                   std::function<std::vector<Var>(const Var&)> vjp, bool higher_order_ok = true) {
  bool rg = false;
  if (grad_mode_flag())
    for (const Var& p : parents)
      if (p.requires_grad()) rg = true;
  if (!rg) return Var::constant(std::move(value));  // prune dead graph
  Var v;
  v.n_ = std::make_shared<VarNode>();
  v.n_->value = std::move(value);
  v.n_->requires_grad = true;
  v.n_->higher_order_ok = higher_order_ok;
  v.n_->op = name;
  v.n_->parents = std::move(parents);
  v.n_->vjp = std::move(vjp);
  return v;
}

// Forward declarations for ops whose vjps reference each other.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var exp_(const Var& a);
Var sqrt_(const Var& a);
Var transpose(const Var& a);
Var matmul(const Var& a, const Var& b);
Var slice_rows(const Var& a, int r0, int r1);
Var scatter_rows(const Var& v, int r0, int total_rows);
Var sum_all(const Var& a);
Var bc_full(const Var& g, std::vector<int> shape);
Var row_sum(const Var& a);
Var col_sum(const Var& a);
Var bc_over_cols(const Var& v, int cols);
Var bc_over_rows(const Var& v, int rows);
Var sum_axis1(const Var& a);
Var bc_axis1(const Var& v, int n);
Var gather2(const Var& a, std::vector<std::array<int, 2>> idx);
Var scatter2(const Var& v, std::vector<std::array<int, 2>> idx, std::vector<int> shape);

// ---------------------------------------------------------------------------
// elementwise / scalar ops

namespace detail {
inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw ConfigError(std::string(op) + ": shape mismatch " + a.value().shape_str() + " vs " +
                      b.value().shape_str());
}
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = a.value();
  for (long i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op("add", std::move(out), {a, b}, [](const Var& g) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (long i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op("sub", std::move(out), {a, b},
                 [](const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (long i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op("mul", std::move(out), {a, b},
                 [a, b](const Var& g) { return std::vector<Var>{mul(g, b), mul(g, a)}; });
}

inline Var divide(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "divide");
  Tensor out = a.value();
  for (long i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return make_op("divide", std::move(out), {a, b}, [a, b](const Var& g) {
    Var ga = divide(g, b);
    Var gb = neg(mul(ga, divide(a, b)));
    return std::vector<Var>{ga, gb};
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (long i = 0; i < out.size(); ++i) out[i] *= s;
  return make_op("scale", std::move(out), {a},
                 [s](const Var& g) { return std::vector<Var>{scale(g, s)}; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (long i = 0; i < out.size(); ++i) out[i] += s;
  return make_op("add_scalar", std::move(out), {a},
                 [](const Var& g) { return std::vector<Var>{g}; });
}

inline Var detach(const Var& a) { return Var::constant(a.value()); }

// ---------------------------------------------------------------------------
// unary ops

inline Var relu(const Var& a) {
  Tensor out = a.value();
  Tensor mask(out.shape());
  for (long i = 0; i < out.size(); ++i) {
    mask[i] = out[i] > 0.0 ? 1.0 : 0.0;
    out[i] = out[i] > 0.0 ? out[i] : 0.0;
  }
  Var mask_c = Var::constant(std::move(mask));
  return make_op("relu", std::move(out), {a},
                 [mask_c](const Var& g) { return std::vector<Var>{mul(g, mask_c)}; });
}

inline Var exp_(const Var& a) {
  Tensor out = a.value();
  for (long i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  // recomputed in the vjp to keep the tape acyclic and double backward exact
  return make_op("exp", std::move(out), {a},
                 [a](const Var& g) { return std::vector<Var>{mul(g, exp_(a))}; });
}

inline Var log_(const Var& a) {
  Tensor out = a.value();
  for (long i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  return make_op("log", std::move(out), {a},
                 [a](const Var& g) { return std::vector<Var>{divide(g, a)}; });
}

inline Var square(const Var& a) { return mul(a, a); }

inline Var sqrt_(const Var& a) {
  Tensor out = a.value();
  for (long i = 0; i < out.size(); ++i) out[i] = std::sqrt(out[i]);
  return make_op("sqrt", std::move(out), {a}, [a](const Var& g) {
    return std::vector<Var>{divide(scale(g, 0.5), sqrt_(a))};
  });
}

// ---------------------------------------------------------------------------
// shape ops

inline Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = a.value().reshaped(shape);
  std::vector<int> back = a.value().shape();
  return make_op("reshape", std::move(out), {a},
                 [back](const Var& g) { return std::vector<Var>{reshape(g, back)}; });
}

inline Var transpose(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ConfigError("transpose: rank-2 required");
  Tensor out({x.dim(1), x.dim(0)});
  out.mat() = x.mat().transpose();
  return make_op("transpose", std::move(out), {a},
                 [](const Var& g) { return std::vector<Var>{transpose(g)}; });
}

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0))
    throw ConfigError("matmul: incompatible shapes " + x.shape_str() + " x " + y.shape_str());
  Tensor out({x.dim(0), y.dim(1)});
  out.mat().noalias() = x.mat() * y.mat();
  return make_op("matmul", std::move(out), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: empty input");
  int cols = parts[0].value().dim(1);
  int rows = 0;
  for (const Var& p : parts) {
    if (p.value().rank() != 2 || p.value().dim(1) != cols)
      throw ConfigError("concat_rows: inconsistent column counts");
    rows += p.value().dim(0);
  }
  Tensor out({rows, cols});
  long off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
    off += p.value().size();
  }
  std::vector<int> row_counts;
  for (const Var& p : parts) row_counts.push_back(p.value().dim(0));
  return make_op("concat_rows", std::move(out), parts, [row_counts](const Var& g) {
    std::vector<Var> grads;
    int r0 = 0;
    for (int rc : row_counts) {
      grads.push_back(slice_rows(g, r0, r0 + rc));
      r0 += rc;
    }
    return grads;
  });
}

inline Var slice_rows(const Var& a, int r0, int r1) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1)
    throw ConfigError("slice_rows: bad range");
  int cols = x.dim(1);
  Tensor out({r1 - r0, cols});
  std::copy(x.data() + static_cast<long>(r0) * cols, x.data() + static_cast<long>(r1) * cols,
            out.data());
  int total = x.dim(0);
  return make_op("slice_rows", std::move(out), {a}, [r0, total](const Var& g) {
    return std::vector<Var>{scatter_rows(g, r0, total)};
  });
}

inline Var scatter_rows(const Var& v, int r0, int total_rows) {
  const Tensor& x = v.value();
  if (x.rank() != 2) throw ConfigError("scatter_rows: rank-2 required");
  int cols = x.dim(1);
  Tensor out({total_rows, cols});
  std::copy(x.data(), x.data() + x.size(), out.data() + static_cast<long>(r0) * cols);
  int r1 = r0 + x.dim(0);
  return make_op("scatter_rows", std::move(out), {v}, [r0, r1](const Var& g) {
    return std::vector<Var>{slice_rows(g, r0, r1)};
  });
}

// ---------------------------------------------------------------------------
// reductions and broadcasts

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (long i = 0; i < a.value().size(); ++i) s += a.value()[i];
  std::vector<int> shape = a.value().shape();
  return make_op("sum_all", Tensor::scalar(s), {a},
                 [shape](const Var& g) { return std::vector<Var>{bc_full(g, shape)}; });
}

inline Var bc_full(const Var& g, std::vector<int> shape) {
  if (g.value().size() != 1) throw ConfigError("bc_full: scalar required");
  Tensor out = Tensor::full(shape, g.value()[0]);
  return make_op("bc_full", std::move(out), {g},
                 [](const Var& gg) { return std::vector<Var>{sum_all(gg)}; });
}

inline Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

// [R,C] -> [R], sums each row.
inline Var row_sum(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ConfigError("row_sum: rank-2 required");
  int rows = x.dim(0), cols = x.dim(1);
  Tensor out({rows});
  for (int i = 0; i < rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += x.at(i, j);
    out[i] = s;
  }
  return make_op("row_sum", std::move(out), {a},
                 [cols](const Var& g) { return std::vector<Var>{bc_over_cols(g, cols)}; });
}

// [R,C] -> [C]
inline Var col_sum(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ConfigError("col_sum: rank-2 required");
  int rows = x.dim(0), cols = x.dim(1);
  Tensor out({cols});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[j] += x.at(i, j);
  return make_op("col_sum", std::move(out), {a},
                 [rows](const Var& g) { return std::vector<Var>{bc_over_rows(g, rows)}; });
}

// v[R] -> [R,C], row i filled with v[i].
inline Var bc_over_cols(const Var& v, int cols) {
  const Tensor& x = v.value();
  if (x.rank() != 1) throw ConfigError("bc_over_cols: rank-1 required");
  int rows = x.dim(0);
  Tensor out({rows, cols});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out.at(i, j) = x[i];
  return make_op("bc_over_cols", std::move(out), {v},
                 [](const Var& g) { return std::vector<Var>{row_sum(g)}; });
}

// v[C] -> [R,C], every row a copy of v.
inline Var bc_over_rows(const Var& v, int rows) {
  const Tensor& x = v.value();
  if (x.rank() != 1) throw ConfigError("bc_over_rows: rank-1 required");
  int cols = x.dim(0);
  Tensor out({rows, cols});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out.at(i, j) = x[j];
  return make_op("bc_over_rows", std::move(out), {v},
                 [](const Var& g) { return std::vector<Var>{col_sum(g)}; });
}

// [A,n,C] -> [A,C]
inline Var sum_axis1(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 3) throw ConfigError("sum_axis1: rank-3 required");
  int A = x.dim(0), n = x.dim(1), C = x.dim(2);
  Tensor out({A, C});
  for (int i = 0; i < A; ++i)
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < C; ++j)
        out[static_cast<long>(i) * C + j] += x[(static_cast<long>(i) * n + k) * C + j];
  return make_op("sum_axis1", std::move(out), {a},
                 [n](const Var& g) { return std::vector<Var>{bc_axis1(g, n)}; });
}

// [A,C] -> [A,n,C]
inline Var bc_axis1(const Var& v, int n) {
  const Tensor& x = v.value();
  if (x.rank() != 2) throw ConfigError("bc_axis1: rank-2 required");
  int A = x.dim(0), C = x.dim(1);
  Tensor out({A, n, C});
  for (int i = 0; i < A; ++i)
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < C; ++j)
        out[(static_cast<long>(i) * n + k) * C + j] = x[static_cast<long>(i) * C + j];
  return make_op("bc_axis1", std::move(out), {v},
                 [](const Var& g) { return std::vector<Var>{sum_axis1(g)}; });
}

inline Var mean_axis1(const Var& a) { return scale(sum_axis1(a), 1.0 / a.value().dim(1)); }

// ---------------------------------------------------------------------------
// indexed access

// Pick matrix entries; out[k] = a[idx[k][0], idx[k][1]].
inline Var gather2(const Var& a, std::vector<std::array<int, 2>> idx) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ConfigError("gather2: rank-2 required");
  Tensor out({static_cast<int>(idx.size())});
  for (std::size_t k = 0; k < idx.size(); ++k)
    out[static_cast<long>(k)] = x.at(idx[k][0], idx[k][1]);
  std::vector<int> shape = x.shape();
  return make_op("gather2", std::move(out), {a}, [idx, shape](const Var& g) {
    return std::vector<Var>{scatter2(g, idx, shape)};
  });
}

inline Var scatter2(const Var& v, std::vector<std::array<int, 2>> idx, std::vector<int> shape) {
  const Tensor& x = v.value();
  if (x.rank() != 1 || x.dim(0) != static_cast<int>(idx.size()))
    throw ConfigError("scatter2: index/value size mismatch");
  Tensor out(shape);
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.at(idx[k][0], idx[k][1]) += x[static_cast<long>(k)];
  return make_op("scatter2", std::move(out), {v},
                 [idx](const Var& g) { return std::vector<Var>{gather2(g, idx)}; });
}

// Detached row-wise max: constant w.r.t. the tape (log-sum-exp shift).
inline Var row_max_detached(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ConfigError("row_max_detached: rank-2 required");
  int rows = x.dim(0), cols = x.dim(1);
  Tensor out({rows});
  for (int i = 0; i < rows; ++i) {
    double m = x.at(i, 0);
    for (int j = 1; j < cols; ++j) m = std::max(m, x.at(i, j));
    out[i] = m;
  }
  return Var::constant(std::move(out));
}

// Columnwise max/min over rows: [n,D] -> [D]. The argmax mask is treated as
// locally constant, like relu.
inline Var col_reduce_extreme(const Var& a, bool take_max) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ConfigError("col_reduce_extreme: rank-2 required");
  int rows = x.dim(0), cols = x.dim(1);
  Tensor out({cols});
  std::vector<std::array<int, 2>> arg(static_cast<std::size_t>(cols));
  for (int j = 0; j < cols; ++j) {
    int best = 0;
    for (int i = 1; i < rows; ++i) {
      double v = x.at(i, j), b = x.at(best, j);
      if (take_max ? v > b : v < b) best = i;
    }
    out[j] = x.at(best, j);
    arg[static_cast<std::size_t>(j)] = {best, j};
  }
  std::vector<int> shape = x.shape();
  return make_op(take_max ? "col_max" : "col_min", std::move(out), {a},
                 [arg, shape](const Var& g) { return std::vector<Var>{scatter2(g, arg, shape)}; });
}

// ---------------------------------------------------------------------------
// composites

inline Var logsumexp_rows(const Var& a) {
  int cols = a.value().dim(1);
  Var m = row_max_detached(a);
  Var shifted = sub(a, bc_over_cols(m, cols));
  return add(log_(row_sum(exp_(shifted))), m);
}

inline Var softmax_rows(const Var& a) {
  int cols = a.value().dim(1);
  return exp_(sub(a, bc_over_cols(logsumexp_rows(a), cols)));
}

// Mean cross-entropy of logits [N,C] against integer labels.
inline Var cross_entropy_mean(const Var& logits, const std::vector<int>& labels) {
  const Tensor& x = logits.value();
  if (x.rank() != 2 || x.dim(0) != static_cast<int>(labels.size()))
    throw ConfigError("cross_entropy_mean: logits/labels mismatch");
  std::vector<std::array<int, 2>> idx;
  idx.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= x.dim(1))
      throw ConfigError("cross_entropy_mean: label out of range");
    idx.push_back({static_cast<int>(i), labels[i]});
  }
  Var lse = logsumexp_rows(logits);
  Var picked = gather2(logits, idx);
  return mean_all(sub(lse, picked));
}

// Rows scaled to unit L2 norm; rejects zero rows (cosine undefined).
inline Var normalize_rows(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ConfigError("normalize_rows: rank-2 required");
  int cols = x.dim(1);
  Var norms = sqrt_(row_sum(square(a)));
  for (long i = 0; i < norms.value().size(); ++i)
    if (!(norms.value()[i] > 0.0))
      throw NumericalError("normalize_rows: zero-norm row " + std::to_string(i));
  return divide(a, bc_over_cols(norms, cols));
}

// ---------------------------------------------------------------------------
// backward

/**
 * Gradients of a scalar root w.r.t. the given leaves, as Vars. With
 * create_graph=false (the default) the returned Vars are plain constants;
 * with create_graph=true they stay connected to the tape and can be
 * differentiated again.
 */
inline std::vector<Var> grad_all(const Var& root, const std::vector<Var>& leaves,
                                 bool create_graph = false) {
  if (!root.defined() || root.value().size() != 1)
    throw ConfigError("grad_all: root must be a defined scalar");

  // Topological order over grad-requiring nodes.
  std::vector<VarNode*> order;
  std::unordered_set<VarNode*> seen;
  if (root.requires_grad()) {
    std::vector<std::pair<VarNode*, std::size_t>> stack;
    stack.push_back({root.node(), 0});
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        VarNode* p = node->parents[next++].node();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<VarNode*, Var> grads;
  grads[root.node()] = Var::constant(Tensor::full(root.value().shape(), 1.0));

  GradScope gs(create_graph);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    VarNode* node = *it;
    auto found = grads.find(node);
    if (found == grads.end() || !node->vjp) continue;
    if (create_graph && !node->higher_order_ok)
      throw ConfigError(std::string("grad_all: op '") + node->op +
                        "' does not support second-order gradients");
    std::vector<Var> pgrads = node->vjp(found->second);
    if (pgrads.size() != node->parents.size())
      throw ConfigError(std::string("grad_all: vjp arity mismatch in op '") + node->op + "'");
    for (std::size_t i = 0; i < pgrads.size(); ++i) {
      VarNode* p = node->parents[i].node();
      if (!p->requires_grad || !pgrads[i].defined()) continue;
      auto g = grads.find(p);
      if (g == grads.end())
        grads.emplace(p, pgrads[i]);
      else
        g->second = add(g->second, pgrads[i]);
    }
  }

  std::vector<Var> result;
  result.reserve(leaves.size());
  for (const Var& leaf : leaves) {
    auto g = grads.find(leaf.node());
    if (g == grads.end())
      result.push_back(Var::constant(Tensor::zeros(leaf.value().shape())));
    else
      result.push_back(g->second);
  }
  return result;
}

inline Tensor grad_of(const Var& root, const Var& leaf) {
  return grad_all(root, {leaf})[0].value();
}

}  // namespace taskcl
