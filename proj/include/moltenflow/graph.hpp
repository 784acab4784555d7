// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph is rebuilt for every forward pass. Nodes are appended in
// evaluation order, so parents always carry smaller ids than children and
// the backward sweep simply walks the tape from the end.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "moltenflow/error.hpp"
#include "moltenflow/tensor.hpp"

namespace moltenflow {

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  AddBias,
  Scale,
  AddScalar,
  MatMul,
  Tanh,
  Sigmoid,
  Silu,
  Exp,
  Log,
  Square,
  Clamp,
  Sum,
  Reshape,
  ConcatCols,
  SliceCols,
  Gather,
  RepeatRows,
  GroupMean,
  SeqShift,
  AttentionPool,
  CrossEntropy,
  GruGate,
  StackRows,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::AddBias: return "add_bias";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::MatMul: return "matmul";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Silu: return "silu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Square: return "square";
    case Op::Clamp: return "clamp";
    case Op::Sum: return "sum";
    case Op::Reshape: return "reshape";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceCols: return "slice_cols";
    case Op::Gather: return "gather";
    case Op::RepeatRows: return "repeat_rows";
    case Op::GroupMean: return "group_mean";
    case Op::SeqShift: return "seq_shift";
    case Op::AttentionPool: return "attention_pool";
    case Op::CrossEntropy: return "cross_entropy";
    case Op::GruGate: return "gru_gate";
    case Op::StackRows: return "stack_rows";
  }
  return "?";
}

class Graph;

/// Lightweight handle to a node on a Graph.
struct Var {
  Graph* g = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline MapC mat(const Tensor& t) {
  return MapC(t.data().data(), static_cast<Eigen::Index>(t.rows()),
              static_cast<Eigen::Index>(t.cols()));
}
inline Map mat(Tensor& t) {
  return Map(t.data().data(), static_cast<Eigen::Index>(t.rows()),
             static_cast<Eigen::Index>(t.cols()));
}
inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
}  // namespace detail

/// Per-node gradient accumulators produced by Graph::backward.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::size_t n) : grads_(n), present_(n, false) {}

  bool has(Var v) const { return v.id >= 0 && present_.at(static_cast<std::size_t>(v.id)); }
  // Gradient w.r.t. `v`; zeros if the loss does not depend on it.
  Tensor of(Var v) const {
    if (has(v)) return grads_[static_cast<std::size_t>(v.id)];
    return Tensor::zeros_like(v.value());
  }

 private:
  friend class Graph;
  Tensor& slot(int id, const Shape& shape) {
    auto i = static_cast<std::size_t>(id);
    if (!present_[i]) {
      grads_[i] = Tensor(shape, 0.0);
      present_[i] = true;
    }
    return grads_[i];
  }
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

class Graph {
 public:
  struct Node {
    Op op = Op::Leaf;
    int a = -1;
    int b = -1;
    int c = -1;  // third operand (gru_gate)
    bool needs_grad = false;
    double c0 = 0.0;
    double c1 = 0.0;
    std::size_t n0 = 0;
    std::size_t n1 = 0;
    std::vector<std::size_t> index;
    std::vector<double> weights;
    Tensor value;
    Tensor aux;
  };

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  const Tensor& value(int id) const { return node(id).value; }

  // Leaves. `param` and `input(.., true)` are differentiable; `constant` is not.
  Var param(const Tensor& t) { return leaf(t, true); }
  Var input(const Tensor& t, bool requires_grad = false) { return leaf(t, requires_grad); }
  Var constant(const Tensor& t) { return leaf(t, false); }

  // ---- elementwise -------------------------------------------------------
  Var add(Var a, Var b) {
    same_size(a, b, "add");
    Tensor out = val(a);
    out += val(b);
    return push(Op::Add, a, b, std::move(out));
  }
  Var sub(Var a, Var b) {
    same_size(a, b, "sub");
    Tensor out = val(a);
    out.axpy(-1.0, val(b));
    return push(Op::Sub, a, b, std::move(out));
  }
  Var mul(Var a, Var b) {
    same_size(a, b, "mul");
    Tensor out = val(a);
    const auto& bv = val(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return push(Op::Mul, a, b, std::move(out));
  }
  // a: [m, n], bias: [n] broadcast over rows.
  Var add_bias(Var a, Var bias) {
    const auto& av = val(a);
    const auto& bv = val(bias);
    require(bv.size() == av.cols(), "add_bias: bias size " + std::to_string(bv.size()) +
                                        " != cols " + std::to_string(av.cols()));
    Tensor out = av;
    const std::size_t n = av.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
    return push(Op::AddBias, a, bias, std::move(out));
  }
  Var scale(Var a, double c) {
    Tensor out = val(a);
    out *= c;
    Node& n = push_node(Op::Scale, a, {}, std::move(out));
    n.c0 = c;
    return last();
  }
  Var add_scalar(Var a, double c) {
    Tensor out = val(a);
    for (auto& v : out.vec()) v += c;
    Node& n = push_node(Op::AddScalar, a, {}, std::move(out));
    n.c0 = c;
    return last();
  }
  Var tanh(Var a) { return unary(Op::Tanh, a, [](double x) { return std::tanh(x); }); }
  Var sigmoid(Var a) { return unary(Op::Sigmoid, a, detail::sigmoid); }
  Var silu(Var a) { return unary(Op::Silu, a, [](double x) { return x * detail::sigmoid(x); }); }
  Var exp(Var a) { return unary(Op::Exp, a, [](double x) { return std::exp(x); }); }
  Var log(Var a) { return unary(Op::Log, a, [](double x) { return std::log(x); }); }
  Var square(Var a) { return unary(Op::Square, a, [](double x) { return x * x; }); }
  // Gradient is passed through only strictly inside (lo, hi).
  Var clamp(Var a, double lo, double hi) {
    require(lo <= hi, "clamp: lo > hi");
    Tensor out = val(a);
    for (auto& v : out.vec()) v = std::clamp(v, lo, hi);
    Node& n = push_node(Op::Clamp, a, {}, std::move(out));
    n.c0 = lo;
    n.c1 = hi;
    return last();
  }

  // ---- linear algebra and reductions --------------------------------------
  // [m, k] x [k, n] -> [m, n]
  Var matmul(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    require(av.rank() == 2 && bv.rank() == 2, "matmul: operands must be rank 2");
    require(av.cols() == bv.rows(), "matmul: inner dims " + shape_str(av.shape()) + " x " +
                                        shape_str(bv.shape()));
    Tensor out(Shape{av.rows(), bv.cols()});
    detail::mat(out).noalias() = detail::mat(av) * detail::mat(bv);
    return push(Op::MatMul, a, b, std::move(out));
  }
  Var sum(Var a) { return push(Op::Sum, a, {}, Tensor::scalar(val(a).sum())); }
  Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).size())); }
  Var reshape(Var a, Shape s) {
    Tensor out = val(a).reshaped(std::move(s));
    return push(Op::Reshape, a, {}, std::move(out));
  }
  // [m, n1] ++ [m, n2] -> [m, n1 + n2]
  Var concat_cols(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    require(av.rows() == bv.rows(), "concat_cols: row mismatch");
    const std::size_t m = av.rows(), n1 = av.cols(), n2 = bv.cols();
    Tensor out(Shape{m, n1 + n2});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n1; ++j) out(i, j) = av(i, j);
      for (std::size_t j = 0; j < n2; ++j) out(i, n1 + j) = bv(i, j);
    }
    return push(Op::ConcatCols, a, b, std::move(out));
  }
  // Columns [start, start + len) of a matrix.
  Var slice_cols(Var a, std::size_t start, std::size_t len) {
    const auto& av = val(a);
    require(start + len <= av.cols(), "slice_cols: out of range");
    const std::size_t m = av.rows();
    Tensor out(Shape{m, len});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j) out(i, j) = av(i, start + j);
    Node& n = push_node(Op::SliceCols, a, {}, std::move(out));
    n.n0 = start;
    return last();
  }
  // Rows table[idx[i]] -> [idx.size(), cols].
  Var gather(Var table, std::vector<std::size_t> idx) {
    const auto& tv = val(table);
    const std::size_t h = tv.cols();
    Tensor out(Shape{idx.size(), h});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] < tv.rows(), "gather: index out of range");
      for (std::size_t j = 0; j < h; ++j) out(i, j) = tv(idx[i], j);
    }
    Node& n = push_node(Op::Gather, table, {}, std::move(out));
    n.index = std::move(idx);
    return last();
  }
  // Each row of [m, n] repeated r times consecutively -> [m * r, n].
  Var repeat_rows(Var a, std::size_t r) {
    const auto& av = val(a);
    const std::size_t m = av.rows(), n = av.cols();
    Tensor out(Shape{m * r, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < r; ++k)
        for (std::size_t j = 0; j < n; ++j) out(i * r + k, j) = av(i, j);
    Node& nd = push_node(Op::RepeatRows, a, {}, std::move(out));
    nd.n0 = r;
    return last();
  }
  // Mean over consecutive groups of `group` rows: [m * group, n] -> [m, n].
  Var group_mean(Var a, std::size_t group) {
    const auto& av = val(a);
    require(group > 0 && av.rows() % group == 0, "group_mean: rows not divisible by group");
    const std::size_t m = av.rows() / group, n = av.cols();
    Tensor out(Shape{m, n});
    const double inv = 1.0 / static_cast<double>(group);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < group; ++k)
        for (std::size_t j = 0; j < n; ++j) out(i, j) += av(i * group + k, j) * inv;
    Node& nd = push_node(Op::GroupMean, a, {}, std::move(out));
    nd.n0 = group;
    return last();
  }
  // Sequence shift inside blocks of `len` rows: out(b, i) = a(b, i + offset),
  // zero where i + offset falls outside the block.
  Var seq_shift(Var a, std::size_t len, int offset) {
    const auto& av = val(a);
    require(len > 0 && av.rows() % len == 0, "seq_shift: rows not divisible by len");
    Tensor out(Shape{av.rows(), av.cols()});
    const std::size_t nb = av.rows() / len, n = av.cols();
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t i = 0; i < len; ++i) {
        const long src = static_cast<long>(i) + offset;
        if (src < 0 || src >= static_cast<long>(len)) continue;
        for (std::size_t j = 0; j < n; ++j)
          out(b * len + i, j) = av(b * len + static_cast<std::size_t>(src), j);
      }
    Node& nd = push_node(Op::SeqShift, a, {}, std::move(out));
    nd.n0 = len;
    nd.c0 = offset;
    return last();
  }
  // Masked softmax attention pooling.
  //   values: [B * L, H], logits: [B * L, K], lengths[b] = number of
  //   attendable positions in sequence b (>= 1).
  //   out[b * K + k] = sum_i softmax_i(logits[b, i, k]) * values[b, i].
  Var attention_pool(Var values, Var logits, std::size_t seq_len,
                     const std::vector<std::size_t>& lengths) {
    const auto& hv = val(values);
    const auto& lv = val(logits);
    require(hv.rows() == lv.rows(), "attention_pool: row mismatch");
    require(seq_len > 0 && hv.rows() % seq_len == 0, "attention_pool: rows not divisible");
    const std::size_t nb = hv.rows() / seq_len, k_slots = lv.cols(), h = hv.cols();
    require(lengths.size() == nb, "attention_pool: lengths size mismatch");
    Tensor alpha(Shape{nb * k_slots, seq_len}, 0.0);
    Tensor out(Shape{nb * k_slots, h}, 0.0);
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t n = lengths[b];
      require(n >= 1 && n <= seq_len, "attention_pool: invalid length");
      for (std::size_t k = 0; k < k_slots; ++k) {
        double mx = -INFINITY;
        for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, lv(b * seq_len + i, k));
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double e = std::exp(lv(b * seq_len + i, k) - mx);
          alpha(b * k_slots + k, i) = e;
          z += e;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double w = alpha(b * k_slots + k, i) / z;
          alpha(b * k_slots + k, i) = w;
          for (std::size_t j = 0; j < h; ++j) out(b * k_slots + k, j) += w * hv(b * seq_len + i, j);
        }
      }
    }
    Node& nd = push_node(Op::AttentionPool, values, logits, std::move(out));
    nd.n0 = seq_len;
    nd.index = lengths;
    nd.aux = std::move(alpha);
    return last();
  }
  // Weighted softmax cross-entropy: sum_r weights[r] * (logsumexp(logits[r]) - logits[r, target[r]]).
  // Rows with weight 0 are skipped.
  Var cross_entropy(Var logits, std::vector<std::size_t> targets, std::vector<double> weights) {
    const auto& lv = val(logits);
    require(lv.rank() == 2, "cross_entropy: logits must be rank 2");
    require(targets.size() == lv.rows() && weights.size() == lv.rows(),
            "cross_entropy: target/weight count mismatch");
    const std::size_t m = lv.rows(), v = lv.cols();
    Tensor prob(Shape{m, v}, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
      if (weights[r] == 0.0) continue;
      require(targets[r] < v, "cross_entropy: target out of range");
      double mx = -INFINITY;
      for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, lv(r, j));
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        prob(r, j) = std::exp(lv(r, j) - mx);
        z += prob(r, j);
      }
      for (std::size_t j = 0; j < v; ++j) prob(r, j) /= z;
      total += weights[r] * (mx + std::log(z) - lv(r, targets[r]));
    }
    Node& nd = push_node(Op::CrossEntropy, logits, {}, Tensor::scalar(total));
    nd.index = std::move(targets);
    nd.weights = std::move(weights);
    nd.aux = std::move(prob);
    return last();
  }

  // GRU update from precomputed projections. xp = x W + b_x and hp = h U + b_h,
  // both [B, 3H] laid out as (reset, update, candidate); h is [B, H].
  //   r = σ(xp_r + hp_r), u = σ(xp_u + hp_u), n = tanh(xp_n + r ⊙ hp_n)
  //   h' = (1 − u) ⊙ n + u ⊙ h
  Var gru_gate(Var xp, Var hp, Var h) {
    const auto& xv = val(xp);
    const auto& pv = val(hp);
    const auto& hv = val(h);
    const std::size_t m = hv.rows(), hd = hv.cols();
    require(hv.rank() == 2 && xv.rows() == m && pv.rows() == m && xv.cols() == 3 * hd &&
                pv.cols() == 3 * hd,
            "gru_gate: expected xp, hp [B, 3H] and h [B, H]");
    Tensor out(Shape{m, hd});
    Tensor gates(Shape{m, 3 * hd});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < hd; ++j) {
        const double r = detail::sigmoid(xv(i, j) + pv(i, j));
        const double u = detail::sigmoid(xv(i, hd + j) + pv(i, hd + j));
        const double n = std::tanh(xv(i, 2 * hd + j) + r * pv(i, 2 * hd + j));
        gates(i, j) = r;
        gates(i, hd + j) = u;
        gates(i, 2 * hd + j) = n;
        out(i, j) = n + u * (hv(i, j) - n);
      }
    Node& nd = push_node(Op::GruGate, xp, hp, std::move(out));
    nd.c = h.id;
    nd.needs_grad = nd.needs_grad || ng(h.id);
    nd.aux = std::move(gates);
    return last();
  }
  // Row-wise concatenation of [r_i, n] blocks -> [sum r_i, n].
  Var stack_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "stack_rows: no inputs");
    const std::size_t n = val(parts[0]).cols();
    std::size_t rows = 0;
    for (Var p : parts) {
      require(val(p).rank() == 2 && val(p).cols() == n, "stack_rows: column mismatch");
      rows += val(p).rows();
    }
    Tensor out(Shape{rows, n});
    std::size_t off = 0;
    for (Var p : parts) {
      const auto& pv = val(p);
      std::copy(pv.data().begin(), pv.data().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(off));
      off += pv.size();
    }
    Node& nd = push_node(Op::StackRows, parts[0], {}, std::move(out));
    for (Var p : parts) {
      require(p.g == this, "stack_rows: variable belongs to another graph");
      nd.index.push_back(static_cast<std::size_t>(p.id));
      nd.needs_grad = nd.needs_grad || ng(p.id);
    }
    return last();
  }

  // ---- backward -----------------------------------------------------------
  /// Exact reverse-mode gradients of scalar `loss` w.r.t. every node that
  /// depends on a differentiable leaf. Throws NumericFailure naming the first
  /// node (in backward order) whose accumulated gradient is non-finite.
  Gradients backward(Var loss) {
    require(loss.g == this, "backward: loss belongs to another graph");
    require(val(loss).size() == 1, "backward: loss must be scalar, got shape " +
                                       shape_str(val(loss).shape()));
    Gradients gr(nodes_.size());
    if (!nodes_[static_cast<std::size_t>(loss.id)].needs_grad) return gr;
    gr.slot(loss.id, val(loss).shape())[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      const Node& nd = nodes_[static_cast<std::size_t>(i)];
      if (!nd.needs_grad || !gr.present_[static_cast<std::size_t>(i)]) continue;
      const Tensor& g = gr.grads_[static_cast<std::size_t>(i)];
      if (!g.all_finite())
        throw NumericFailure(std::string("non-finite gradient at node ") + std::to_string(i) +
                                 " (" + op_name(nd.op) + ")",
                             i);
      if (nd.op != Op::Leaf) propagate(nd, g, gr);
    }
    return gr;
  }

 private:
  const Tensor& val(Var v) const {
    require(v.g == this, "graph: variable belongs to another graph");
    return nodes_.at(static_cast<std::size_t>(v.id)).value;
  }
  bool ng(int id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad; }
  void same_size(Var a, Var b, const char* what) const {
    require(val(a).size() == val(b).size(), std::string(what) + ": shape " +
                                                shape_str(val(a).shape()) + " vs " +
                                                shape_str(val(b).shape()));
  }
  Var last() { return Var{this, static_cast<int>(nodes_.size()) - 1}; }

  Var leaf(const Tensor& t, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.needs_grad = requires_grad;
    n.value = t;
    nodes_.push_back(std::move(n));
    return last();
  }
  Node& push_node(Op op, Var a, Var b, Tensor out) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.g ? b.id : -1;
    n.needs_grad = ng(n.a) || ng(n.b);
    n.value = std::move(out);
    nodes_.push_back(std::move(n));
    return nodes_.back();
  }
  Var push(Op op, Var a, Var b, Tensor out) {
    push_node(op, a, b, std::move(out));
    return last();
  }
  template <class F>
  Var unary(Op op, Var a, F f) {
    Tensor out = val(a);
    for (auto& v : out.vec()) v = f(v);
    return push(op, a, {}, std::move(out));
  }

  void propagate(const Node& nd, const Tensor& g, Gradients& gr) {
    const Tensor& av = nodes_[static_cast<std::size_t>(nd.a)].value;
    auto ga = [&]() -> Tensor& { return gr.slot(nd.a, av.shape()); };
    auto gb = [&]() -> Tensor& {
      return gr.slot(nd.b, nodes_[static_cast<std::size_t>(nd.b)].value.shape());
    };
    const bool da = ng(nd.a);
    const bool db = ng(nd.b);
    const Tensor& y = nd.value;
    switch (nd.op) {
      case Op::Leaf: break;
      case Op::Add:
        if (da) ga() += g;
        if (db) gb() += g;
        break;
      case Op::Sub:
        if (da) ga() += g;
        if (db) gb().axpy(-1.0, g);
        break;
      case Op::Mul: {
        const Tensor& bv = nodes_[static_cast<std::size_t>(nd.b)].value;
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] * bv[i];
        }
        if (db) {
          Tensor& t = gb();
          for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] * av[i];
        }
        break;
      }
      case Op::AddBias: {
        if (da) ga() += g;
        if (db) {
          Tensor& t = gb();
          const std::size_t n = t.size();
          for (std::size_t i = 0; i < g.size(); ++i) t[i % n] += g[i];
        }
        break;
      }
      case Op::Scale:
        if (da) ga().axpy(nd.c0, g);
        break;
      case Op::AddScalar:
      case Op::Reshape:
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i];
        }
        break;
      case Op::MatMul: {
        const Tensor& bv = nodes_[static_cast<std::size_t>(nd.b)].value;
        if (da) detail::mat(ga()).noalias() += detail::mat(g) * detail::mat(bv).transpose();
        if (db) detail::mat(gb()).noalias() += detail::mat(av).transpose() * detail::mat(g);
        break;
      }
      case Op::Tanh:
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] * (1.0 - y[i] * y[i]);
        }
        break;
      case Op::Sigmoid:
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] * y[i] * (1.0 - y[i]);
        }
        break;
      case Op::Silu:
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = detail::sigmoid(av[i]);
            t[i] += g[i] * (s + av[i] * s * (1.0 - s));
          }
        }
        break;
      case Op::Exp:
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] * y[i];
        }
        break;
      case Op::Log:
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] / av[i];
        }
        break;
      case Op::Square:
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < g.size(); ++i) t[i] += 2.0 * g[i] * av[i];
        }
        break;
      case Op::Clamp:
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < g.size(); ++i)
            if (av[i] > nd.c0 && av[i] < nd.c1) t[i] += g[i];
        }
        break;
      case Op::Sum:
        if (da) {
          Tensor& t = ga();
          for (auto& v : t.vec()) v += g[0];
        }
        break;
      case Op::ConcatCols: {
        const std::size_t m = g.rows(), n1 = av.cols();
        const std::size_t n2 = g.cols() - n1;
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n1; ++j) t(i, j) += g(i, j);
        }
        if (db) {
          Tensor& t = gb();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n2; ++j) t(i, j) += g(i, n1 + j);
        }
        break;
      }
      case Op::SliceCols:
        if (da) {
          Tensor& t = ga();
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) t(i, nd.n0 + j) += g(i, j);
        }
        break;
      case Op::Gather:
        if (da) {
          Tensor& t = ga();
          const std::size_t h = g.cols();
          for (std::size_t i = 0; i < nd.index.size(); ++i)
            for (std::size_t j = 0; j < h; ++j) t(nd.index[i], j) += g(i, j);
        }
        break;
      case Op::RepeatRows:
        if (da) {
          Tensor& t = ga();
          const std::size_t r = nd.n0, n = g.cols();
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < n; ++j) t(i / r, j) += g(i, j);
        }
        break;
      case Op::GroupMean:
        if (da) {
          Tensor& t = ga();
          const std::size_t grp = nd.n0, n = g.cols();
          const double inv = 1.0 / static_cast<double>(grp);
          for (std::size_t i = 0; i < t.rows(); ++i)
            for (std::size_t j = 0; j < n; ++j) t(i, j) += g(i / grp, j) * inv;
        }
        break;
      case Op::SeqShift:
        if (da) {
          Tensor& t = ga();
          const std::size_t len = nd.n0, n = g.cols(), nb = g.rows() / len;
          const long offset = static_cast<long>(nd.c0);
          for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t i = 0; i < len; ++i) {
              const long src = static_cast<long>(i) + offset;
              if (src < 0 || src >= static_cast<long>(len)) continue;
              for (std::size_t j = 0; j < n; ++j)
                t(b * len + static_cast<std::size_t>(src), j) += g(b * len + i, j);
            }
        }
        break;
      case Op::AttentionPool: {
        const Tensor& lv = nodes_[static_cast<std::size_t>(nd.b)].value;
        const Tensor& alpha = nd.aux;
        const std::size_t seq_len = nd.n0, k_slots = lv.cols(), h = av.cols();
        const std::size_t nb = av.rows() / seq_len;
        for (std::size_t b = 0; b < nb; ++b) {
          const std::size_t n = nd.index[b];
          for (std::size_t k = 0; k < k_slots; ++k) {
            const std::size_t o = b * k_slots + k;
            if (da) {
              Tensor& t = ga();
              for (std::size_t i = 0; i < n; ++i) {
                const double w = alpha(o, i);
                for (std::size_t j = 0; j < h; ++j) t(b * seq_len + i, j) += w * g(o, j);
              }
            }
            if (db) {
              Tensor& t = gb();
              std::vector<double> dalpha(n);
              double dot = 0.0;
              for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < h; ++j) s += g(o, j) * av(b * seq_len + i, j);
                dalpha[i] = s;
                dot += alpha(o, i) * s;
              }
              for (std::size_t i = 0; i < n; ++i)
                t(b * seq_len + i, k) += alpha(o, i) * (dalpha[i] - dot);
            }
          }
        }
        break;
      }
      case Op::GruGate: {
        const Tensor& pv = nodes_[static_cast<std::size_t>(nd.b)].value;
        const Tensor& hv = nodes_[static_cast<std::size_t>(nd.c)].value;
        const Tensor& gates = nd.aux;
        const std::size_t m = hv.rows(), hd = hv.cols();
        const bool dc = ng(nd.c);
        Tensor dpre(Shape{m, 3 * hd});  // gradient w.r.t. xp; hp differs only in the candidate block
        Tensor dhp_n(Shape{m, hd});
        Tensor* th = dc ? &gr.slot(nd.c, hv.shape()) : nullptr;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < hd; ++j) {
            const double r = gates(i, j), u = gates(i, hd + j), n = gates(i, 2 * hd + j);
            const double gy = g(i, j);
            if (th) (*th)(i, j) += gy * u;
            const double dn = gy * (1.0 - u) * (1.0 - n * n);
            const double du = gy * (hv(i, j) - n) * u * (1.0 - u);
            const double dr = dn * pv(i, 2 * hd + j) * r * (1.0 - r);
            dpre(i, j) = dr;
            dpre(i, hd + j) = du;
            dpre(i, 2 * hd + j) = dn;
            dhp_n(i, j) = dn * r;
          }
        if (da) ga() += dpre;
        if (db) {
          Tensor& t = gb();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < hd; ++j) {
              t(i, j) += dpre(i, j);
              t(i, hd + j) += dpre(i, hd + j);
              t(i, 2 * hd + j) += dhp_n(i, j);
            }
        }
        break;
      }
      case Op::StackRows: {
        std::size_t off = 0;
        for (std::size_t id : nd.index) {
          const Tensor& pv = nodes_[id].value;
          if (ng(static_cast<int>(id))) {
            Tensor& t = gr.slot(static_cast<int>(id), pv.shape());
            for (std::size_t i = 0; i < pv.size(); ++i) t[i] += g[off + i];
          }
          off += pv.size();
        }
        break;
      }
      case Op::CrossEntropy:
        if (da) {
          Tensor& t = ga();
          const Tensor& prob = nd.aux;
          const std::size_t v = prob.cols();
          for (std::size_t r = 0; r < prob.rows(); ++r) {
            const double w = nd.weights[r];
            if (w == 0.0) continue;
            for (std::size_t j = 0; j < v; ++j) t(r, j) += g[0] * w * prob(r, j);
            t(r, nd.index[r]) -= g[0] * w;
          }
        }
        break;
    }
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return g->value(id); }

inline Var operator+(Var a, Var b) { return a.g->add(a, b); }
inline Var operator-(Var a, Var b) { return a.g->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.g->mul(a, b); }
inline Var operator*(double c, Var a) { return a.g->scale(a, c); }
inline Var operator-(Var a) { return a.g->scale(a, -1.0); }

/// Reverse-mode pass over `graph` from `loss`.
inline Gradients forward_backward(Graph& graph, Var loss) { return graph.backward(loss); }

}  // namespace moltenflow
