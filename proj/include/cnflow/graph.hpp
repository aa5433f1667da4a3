#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cnflow/errors.hpp"
#include "cnflow/tensor.hpp"

namespace cnflow {

class Graph;

namespace detail {

inline thread_local Graph* g_active_graph = nullptr;
inline thread_local int g_no_trace_depth = 0;

inline Graph* active_graph() {
  return g_no_trace_depth == 0 ? g_active_graph : nullptr;
}

}  // namespace detail

/// Makes a graph the recording target for all primitives on this thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& g)
      : prev_graph_(detail::g_active_graph), prev_no_trace_(detail::g_no_trace_depth) {
    detail::g_active_graph = &g;
    detail::g_no_trace_depth = 0;
  }
  ~GraphScope() {
    detail::g_active_graph = prev_graph_;
    detail::g_no_trace_depth = prev_no_trace_;
  }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* prev_graph_;
  int prev_no_trace_;
};

/// Suspends recording while alive; primitives compute eagerly.
class NoTrace {
 public:
  NoTrace() { ++detail::g_no_trace_depth; }
  ~NoTrace() { --detail::g_no_trace_depth; }
  NoTrace(const NoTrace&) = delete;
  NoTrace& operator=(const NoTrace&) = delete;
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kMatMul,
  kMatMulNT,  // a @ b^T without materializing the transpose
  kMatMulTN,  // a^T @ b without materializing the transpose
  kTranspose,
  kTanh,
  kSoftplus,
  kSigmoid,
  kExp,
  kConcatCols,
  kSliceCols,
  kPadCols,
  kConcat,
  kSlice,
  kPad,
  kSum,
  kSumRows,
  kSumBatch,
  kBcastRows,
  kBcastCols,
  kBcastScalar,
  kReshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMatMul: return "matmul";
    case Op::kMatMulNT: return "matmul_nt";
    case Op::kMatMulTN: return "matmul_tn";
    case Op::kTranspose: return "transpose";
    case Op::kTanh: return "tanh";
    case Op::kSoftplus: return "softplus";
    case Op::kSigmoid: return "sigmoid";
    case Op::kExp: return "exp";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceCols: return "slice_cols";
    case Op::kPadCols: return "pad_cols";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kPad: return "pad";
    case Op::kSum: return "sum";
    case Op::kSumRows: return "sum_rows";
    case Op::kSumBatch: return "sum_batch";
    case Op::kBcastRows: return "bcast_rows";
    case Op::kBcastCols: return "bcast_cols";
    case Op::kBcastScalar: return "bcast_scalar";
    case Op::kReshape: return "reshape";
  }
  return "?";
}

/// One recorded operation: kind, input node ids, and the saved tensors the
/// backward/forward derivative rules need. Saved tensors share buffers with
/// the originals, so a node costs two pointers plus the result it produced.
struct Node {
  Op op = Op::kLeaf;
  int in0 = -1;
  int in1 = -1;
  Tensor a;
  Tensor b;
  Tensor out;
  double c = 0.0;
  std::size_t i0 = 0;
  std::size_t i1 = 0;
  std::uint8_t level = 0;
};

/// Append-only computation tape. Nodes are stored in topological order by
/// construction; replaying backward over an unchanged graph is
/// deterministic. One level of derivative nesting is supported: a VJP
/// recorded with create_graph can itself be differentiated once.
class Graph {
 public:
  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const std::vector<int>& roots() const { return roots_; }

  /// Attaches a detached tensor as a differentiation root.
  Tensor leaf(const Tensor& t) {
    if (t.on_graph()) {
      throw TapeError("leaf: tensor is already attached to a graph");
    }
    Tensor out = t;
    Node n;
    n.op = Op::kLeaf;
    int id = static_cast<int>(nodes_.size());
    detail_tensor_access::set_node(out, id, this);
    n.out = out;
    nodes_.push_back(std::move(n));
    roots_.push_back(id);
    return out;
  }

  int record(Op op, const Tensor* a, const Tensor* b, double c, std::size_t i0,
             std::size_t i1, Tensor& out) {
    Node n;
    n.op = op;
    n.c = c;
    n.i0 = i0;
    n.i1 = i1;
    if (a) {
      check_owner(*a);
      n.a = *a;
      n.in0 = a->node();
    }
    if (b) {
      check_owner(*b);
      n.b = *b;
      n.in1 = b->node();
    }
    // level marks nodes emitted inside a recorded backward pass
    n.level = static_cast<std::uint8_t>(backward_depth_);
    int id = static_cast<int>(nodes_.size());
    detail_tensor_access::set_node(out, id, this);
    n.out = out;
    nodes_.push_back(std::move(n));
    return id;
  }

  /// cotangent^T * d(output)/d(each wrt). With create_graph the returned
  /// tensors are recorded and can be differentiated one more time.
  std::vector<Tensor> vjp(const Tensor& output, std::span<const Tensor> wrt,
                          const Tensor& cotangent, bool create_graph = false);

  Tensor vjp1(const Tensor& output, const Tensor& wrt, const Tensor& cotangent,
              bool create_graph = false) {
    return vjp(output, std::span<const Tensor>(&wrt, 1), cotangent, create_graph)[0];
  }

  /// Gradient of a single-element output.
  std::vector<Tensor> gradient(const Tensor& scalar_output, std::span<const Tensor> wrt,
                               bool create_graph = false) {
    if (scalar_output.size() != 1) {
      throw TapeError("gradient: output must have a single element, got size " +
                      std::to_string(scalar_output.size()));
    }
    return vjp(scalar_output, wrt, Tensor::ones(scalar_output.shape()), create_graph);
  }

  /// d(output)/d(input) * tangent, forward mode over the recorded graph.
  /// The result is recorded like any other forward computation.
  Tensor jvp(const Tensor& output, const Tensor& input, const Tensor& tangent);

 private:
  void check_owner(const Tensor& t) const {
    if (t.on_graph() && t.owner() != this) {
      throw TapeError("tensor belongs to a different graph");
    }
  }

  struct BackwardDepth {
    explicit BackwardDepth(Graph& g) : g_(g) { ++g_.backward_depth_; }
    ~BackwardDepth() { --g_.backward_depth_; }
    Graph& g_;
  };

  Tensor backward_input0(const Node& n, const Tensor& ct) const;
  Tensor backward_input1(const Node& n, const Tensor& ct) const;
  Tensor forward_tangent(const Node& n, const Tensor* ta, const Tensor* tb) const;

  std::vector<Node> nodes_;
  std::vector<int> roots_;
  std::vector<const Graph*> owners_;  // parallel to nodes_, for cross-graph checks
  int backward_depth_ = 0;
};

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor emit(Op op, const Tensor* a, const Tensor* b, double c, std::size_t i0,
                   std::size_t i1, std::vector<std::size_t> shape,
                   std::vector<double> data) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op_name(op));
    }
  }
  Tensor out = detail_tensor_access::make(std::move(shape), std::move(data));
  if (Graph* g = active_graph()) {
    g->record(op, a, b, c, i0, i1, out);
  }
  return out;
}

inline void require_rank2(const Tensor& t, const char* who) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(who) + ": rank-2 tensor required, got " + shape_str(t));
  }
}

inline void require_rank1(const Tensor& t, const char* who) {
  if (t.rank() != 1) {
    throw ShapeError(std::string(who) + ": rank-1 tensor required, got " + shape_str(t));
  }
}

}  // namespace detail

inline Tensor add(const Tensor& x, const Tensor& y) {
  if (!x.same_shape(y)) {
    throw ShapeError("add: shape mismatch " + shape_str(x) + " vs " + shape_str(y));
  }
  auto xd = x.data();
  auto yd = y.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + yd[i];
  return detail::emit(Op::kAdd, &x, &y, 0, 0, 0, x.shape(), std::move(out));
}

inline Tensor sub(const Tensor& x, const Tensor& y) {
  if (!x.same_shape(y)) {
    throw ShapeError("sub: shape mismatch " + shape_str(x) + " vs " + shape_str(y));
  }
  auto xd = x.data();
  auto yd = y.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] - yd[i];
  return detail::emit(Op::kSub, &x, &y, 0, 0, 0, x.shape(), std::move(out));
}

inline Tensor mul(const Tensor& x, const Tensor& y) {
  if (!x.same_shape(y)) {
    throw ShapeError("mul: shape mismatch " + shape_str(x) + " vs " + shape_str(y));
  }
  auto xd = x.data();
  auto yd = y.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * yd[i];
  return detail::emit(Op::kMul, &x, &y, 0, 0, 0, x.shape(), std::move(out));
}

inline Tensor scale(const Tensor& x, double c) {
  auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * c;
  return detail::emit(Op::kScale, &x, nullptr, c, 0, 0, x.shape(), std::move(out));
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor add_scalar(const Tensor& x, double c) {
  auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + c;
  return detail::emit(Op::kAddScalar, &x, nullptr, c, 0, 0, x.shape(), std::move(out));
}

inline Tensor matmul(const Tensor& x, const Tensor& y) {
  detail::require_rank2(x, "matmul");
  detail::require_rank2(y, "matmul");
  const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
  if (y.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(x) + " x " +
                     shape_str(y));
  }
  auto xd = x.data();
  auto yd = y.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xrow = xd.data() + i * k;
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = xrow[p];
      if (xv == 0.0) continue;
      const double* yrow = yd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
    }
  }
  return detail::emit(Op::kMatMul, &x, &y, 0, 0, 0, {m, n}, std::move(out));
}

/// a @ b^T for a (m,k), b (n,k): row-dot form, no transposed copy.
inline Tensor matmul_nt(const Tensor& x, const Tensor& y) {
  detail::require_rank2(x, "matmul_nt");
  detail::require_rank2(y, "matmul_nt");
  const std::size_t m = x.rows(), k = x.cols(), n = y.rows();
  if (y.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_str(x) + " x " +
                     shape_str(y) + "^T");
  }
  auto xd = x.data();
  auto yd = y.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xrow = xd.data() + i * k;
    double* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* yrow = yd.data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += xrow[p] * yrow[p];
      orow[j] = acc;
    }
  }
  return detail::emit(Op::kMatMulNT, &x, &y, 0, 0, 0, {m, n}, std::move(out));
}

/// a^T @ b for a (k,m), b (k,n): rank-one accumulation, no transposed copy.
inline Tensor matmul_tn(const Tensor& x, const Tensor& y) {
  detail::require_rank2(x, "matmul_tn");
  detail::require_rank2(y, "matmul_tn");
  const std::size_t k = x.rows(), m = x.cols(), n = y.cols();
  if (y.rows() != k) {
    throw ShapeError("matmul_tn: inner dimensions differ, " + shape_str(x) + "^T x " +
                     shape_str(y));
  }
  auto xd = x.data();
  auto yd = y.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* xrow = xd.data() + p * m;
    const double* yrow = yd.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double v = xrow[i];
      if (v == 0.0) continue;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += v * yrow[j];
    }
  }
  return detail::emit(Op::kMatMulTN, &x, &y, 0, 0, 0, {m, n}, std::move(out));
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank2(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  auto xd = x.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xd[i * n + j];
  return detail::emit(Op::kTranspose, &x, nullptr, 0, 0, 0, {n, m}, std::move(out));
}

inline Tensor tanh(const Tensor& x) {
  auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xd[i]);
  return detail::emit(Op::kTanh, &x, nullptr, 0, 0, 0, x.shape(), std::move(out));
}

/// Numerically stable softplus: x + log1p(exp(-x)) for positive x.
inline Tensor softplus(const Tensor& x) {
  auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xd[i];
    out[i] = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  }
  return detail::emit(Op::kSoftplus, &x, nullptr, 0, 0, 0, x.shape(), std::move(out));
}

inline Tensor sigmoid(const Tensor& x) {
  auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xd[i];
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  return detail::emit(Op::kSigmoid, &x, nullptr, 0, 0, 0, x.shape(), std::move(out));
}

inline Tensor exp(const Tensor& x) {
  auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xd[i]);
  return detail::emit(Op::kExp, &x, nullptr, 0, 0, 0, x.shape(), std::move(out));
}

inline Tensor concat_cols(const Tensor& x, const Tensor& y) {
  detail::require_rank2(x, "concat_cols");
  detail::require_rank2(y, "concat_cols");
  if (x.rows() != y.rows()) {
    throw ShapeError("concat_cols: row counts differ, " + shape_str(x) + " vs " +
                     shape_str(y));
  }
  const std::size_t m = x.rows(), p = x.cols(), q = y.cols();
  auto xd = x.data();
  auto yd = y.data();
  std::vector<double> out(m * (p + q));
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(xd.data() + i * p, p, out.data() + i * (p + q));
    std::copy_n(yd.data() + i * q, q, out.data() + i * (p + q) + p);
  }
  return detail::emit(Op::kConcatCols, &x, &y, 0, 0, 0, {m, p + q}, std::move(out));
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  detail::require_rank2(x, "slice_cols");
  if (c0 > c1 || c1 > x.cols()) {
    throw ShapeError("slice_cols: bad column range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") for " + shape_str(x));
  }
  const std::size_t m = x.rows(), n = x.cols(), w = c1 - c0;
  auto xd = x.data();
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(xd.data() + i * n + c0, w, out.data() + i * w);
  return detail::emit(Op::kSliceCols, &x, nullptr, 0, c0, c1, {m, w}, std::move(out));
}

/// Zero columns added on the left and right.
inline Tensor pad_cols(const Tensor& x, std::size_t left, std::size_t right) {
  detail::require_rank2(x, "pad_cols");
  const std::size_t m = x.rows(), n = x.cols(), w = left + n + right;
  auto xd = x.data();
  std::vector<double> out(m * w, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(xd.data() + i * n, n, out.data() + i * w + left);
  return detail::emit(Op::kPadCols, &x, nullptr, 0, left, right, {m, w}, std::move(out));
}

inline Tensor concat(const Tensor& x, const Tensor& y) {
  detail::require_rank1(x, "concat");
  detail::require_rank1(y, "concat");
  auto xd = x.data();
  auto yd = y.data();
  std::vector<double> out(x.size() + y.size());
  std::copy(xd.begin(), xd.end(), out.begin());
  std::copy(yd.begin(), yd.end(), out.begin() + static_cast<std::ptrdiff_t>(x.size()));
  return detail::emit(Op::kConcat, &x, &y, 0, 0, 0, {x.size() + y.size()},
                      std::move(out));
}

inline Tensor slice(const Tensor& x, std::size_t i0, std::size_t i1) {
  detail::require_rank1(x, "slice");
  if (i0 > i1 || i1 > x.size()) {
    throw ShapeError("slice: bad range [" + std::to_string(i0) + "," +
                     std::to_string(i1) + ") for " + shape_str(x));
  }
  auto xd = x.data();
  std::vector<double> out(xd.begin() + static_cast<std::ptrdiff_t>(i0),
                          xd.begin() + static_cast<std::ptrdiff_t>(i1));
  return detail::emit(Op::kSlice, &x, nullptr, 0, i0, i1, {i1 - i0}, std::move(out));
}

inline Tensor pad(const Tensor& x, std::size_t left, std::size_t right) {
  detail::require_rank1(x, "pad");
  std::vector<double> out(left + x.size() + right, 0.0);
  auto xd = x.data();
  std::copy(xd.begin(), xd.end(), out.begin() + static_cast<std::ptrdiff_t>(left));
  return detail::emit(Op::kPad, &x, nullptr, 0, left, right,
                      {left + x.size() + right}, std::move(out));
}

inline Tensor sum(const Tensor& x) {
  auto xd = x.data();
  double s = 0.0;
  for (double v : xd) s += v;
  return detail::emit(Op::kSum, &x, nullptr, 0, 0, 0, {1}, {s});
}

/// (B, D) -> (B,): sum over each row.
inline Tensor sum_rows(const Tensor& x) {
  detail::require_rank2(x, "sum_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto xd = x.data();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xd[i * n + j];
    out[i] = s;
  }
  return detail::emit(Op::kSumRows, &x, nullptr, 0, 0, 0, {m}, std::move(out));
}

/// (B, D) -> (D,): sum over the batch axis.
inline Tensor sum_batch(const Tensor& x) {
  detail::require_rank2(x, "sum_batch");
  const std::size_t m = x.rows(), n = x.cols();
  auto xd = x.data();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += xd[i * n + j];
  return detail::emit(Op::kSumBatch, &x, nullptr, 0, 0, 0, {n}, std::move(out));
}

/// (D,) -> (B, D): replicate the row B times.
inline Tensor bcast_rows(const Tensor& v, std::size_t b) {
  detail::require_rank1(v, "bcast_rows");
  const std::size_t n = v.size();
  auto vd = v.data();
  std::vector<double> out(b * n);
  for (std::size_t i = 0; i < b; ++i) std::copy_n(vd.data(), n, out.data() + i * n);
  return detail::emit(Op::kBcastRows, &v, nullptr, 0, b, 0, {b, n}, std::move(out));
}

/// (B,) -> (B, D): replicate each entry across D columns.
inline Tensor bcast_cols(const Tensor& v, std::size_t d) {
  detail::require_rank1(v, "bcast_cols");
  const std::size_t b = v.size();
  auto vd = v.data();
  std::vector<double> out(b * d);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = vd[i];
  return detail::emit(Op::kBcastCols, &v, nullptr, 0, d, 0, {b, d}, std::move(out));
}

/// (1,) -> arbitrary shape.
inline Tensor bcast_scalar(const Tensor& s, std::vector<std::size_t> shape) {
  if (s.size() != 1) {
    throw ShapeError("bcast_scalar: source must have one element, got " + shape_str(s));
  }
  std::size_t rows = shape[0];
  std::size_t cols = shape.size() == 2 ? shape[1] : 0;
  std::size_t n = cols ? rows * cols : rows;
  std::vector<double> out(n, s.at(0));
  return detail::emit(Op::kBcastScalar, &s, nullptr, 0, rows, cols, std::move(shape),
                      std::move(out));
}

inline Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  if (n != x.size() || shape.empty() || shape.size() > 2) {
    throw ShapeError("reshape: cannot view " + shape_str(x) + " with the requested shape");
  }
  std::size_t rows = shape[0];
  std::size_t cols = shape.size() == 2 ? shape[1] : 0;
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::emit(Op::kReshape, &x, nullptr, 0, rows, cols, std::move(shape),
                      std::move(out));
}

inline Tensor zeros_like(const Tensor& t) { return Tensor::zeros(t.shape()); }
inline Tensor ones_like(const Tensor& t) { return Tensor::ones(t.shape()); }

inline Tensor dot(const Tensor& x, const Tensor& y) { return sum(mul(x, y)); }

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// Derivative rules. Each rule is written with primitives so the result can
// be recorded and differentiated again.
// ---------------------------------------------------------------------------

inline Tensor Graph::backward_input0(const Node& n, const Tensor& ct) const {
  switch (n.op) {
    case Op::kAdd: return ct;
    case Op::kSub: return ct;
    case Op::kMul: return mul(ct, n.b);
    case Op::kScale: return scale(ct, n.c);
    case Op::kAddScalar: return ct;
    case Op::kMatMul: return matmul_nt(ct, n.b);
    case Op::kMatMulNT: return matmul(ct, n.b);
    case Op::kMatMulTN: return matmul_nt(n.b, ct);
    case Op::kTranspose: return transpose(ct);
    case Op::kTanh:
      return mul(ct, add_scalar(scale(mul(n.out, n.out), -1.0), 1.0));
    case Op::kSoftplus: return mul(ct, sigmoid(n.a));
    case Op::kSigmoid:
      return mul(ct, mul(n.out, add_scalar(scale(n.out, -1.0), 1.0)));
    case Op::kExp: return mul(ct, n.out);
    case Op::kConcatCols: return slice_cols(ct, 0, n.a.cols());
    case Op::kSliceCols: return pad_cols(ct, n.i0, n.a.cols() - n.i1);
    case Op::kPadCols: return slice_cols(ct, n.i0, n.i0 + n.a.cols());
    case Op::kConcat: return slice(ct, 0, n.a.size());
    case Op::kSlice: return pad(ct, n.i0, n.a.size() - n.i1);
    case Op::kPad: return slice(ct, n.i0, n.i0 + n.a.size());
    case Op::kSum: return bcast_scalar(ct, n.a.shape());
    case Op::kSumRows: return bcast_cols(ct, n.a.cols());
    case Op::kSumBatch: return bcast_rows(ct, n.a.rows());
    case Op::kBcastRows: return sum_batch(ct);
    case Op::kBcastCols: return sum_rows(ct);
    case Op::kBcastScalar: return sum(ct);
    case Op::kReshape: return reshape(ct, n.a.shape());
    case Op::kLeaf: break;
  }
  throw TapeError(std::string("no backward rule for ") + op_name(n.op));
}

inline Tensor Graph::backward_input1(const Node& n, const Tensor& ct) const {
  switch (n.op) {
    case Op::kAdd: return ct;
    case Op::kSub: return neg(ct);
    case Op::kMul: return mul(ct, n.a);
    case Op::kMatMul: return matmul_tn(n.a, ct);
    case Op::kMatMulNT: return matmul_tn(ct, n.a);
    case Op::kMatMulTN: return matmul(n.a, ct);
    case Op::kConcatCols:
      return slice_cols(ct, n.a.cols(), n.a.cols() + n.b.cols());
    case Op::kConcat: return slice(ct, n.a.size(), n.a.size() + n.b.size());
    default: break;
  }
  throw TapeError(std::string("no second-input backward rule for ") + op_name(n.op));
}

inline Tensor Graph::forward_tangent(const Node& n, const Tensor* ta,
                                     const Tensor* tb) const {
  switch (n.op) {
    case Op::kAdd:
      if (ta && tb) return add(*ta, *tb);
      return ta ? *ta : *tb;
    case Op::kSub:
      if (ta && tb) return sub(*ta, *tb);
      return ta ? *ta : neg(*tb);
    case Op::kMul: {
      std::optional<Tensor> acc;
      if (ta) acc = mul(*ta, n.b);
      if (tb) acc = acc ? add(*acc, mul(n.a, *tb)) : mul(n.a, *tb);
      return *acc;
    }
    case Op::kScale: return scale(*ta, n.c);
    case Op::kAddScalar: return *ta;
    case Op::kMatMul: {
      std::optional<Tensor> acc;
      if (ta) acc = matmul(*ta, n.b);
      if (tb) acc = acc ? add(*acc, matmul(n.a, *tb)) : matmul(n.a, *tb);
      return *acc;
    }
    case Op::kMatMulNT: {
      std::optional<Tensor> acc;
      if (ta) acc = matmul_nt(*ta, n.b);
      if (tb) acc = acc ? add(*acc, matmul_nt(n.a, *tb)) : matmul_nt(n.a, *tb);
      return *acc;
    }
    case Op::kMatMulTN: {
      std::optional<Tensor> acc;
      if (ta) acc = matmul_tn(*ta, n.b);
      if (tb) acc = acc ? add(*acc, matmul_tn(n.a, *tb)) : matmul_tn(n.a, *tb);
      return *acc;
    }
    case Op::kTranspose: return transpose(*ta);
    case Op::kTanh:
      return mul(*ta, add_scalar(scale(mul(n.out, n.out), -1.0), 1.0));
    case Op::kSoftplus: return mul(*ta, sigmoid(n.a));
    case Op::kSigmoid:
      return mul(*ta, mul(n.out, add_scalar(scale(n.out, -1.0), 1.0)));
    case Op::kExp: return mul(*ta, n.out);
    case Op::kConcatCols: {
      Tensor left = ta ? *ta : zeros_like(n.a);
      Tensor right = tb ? *tb : zeros_like(n.b);
      return concat_cols(left, right);
    }
    case Op::kSliceCols: return slice_cols(*ta, n.i0, n.i1);
    case Op::kPadCols: return pad_cols(*ta, n.i0, n.i1);
    case Op::kConcat: {
      Tensor left = ta ? *ta : zeros_like(n.a);
      Tensor right = tb ? *tb : zeros_like(n.b);
      return concat(left, right);
    }
    case Op::kSlice: return slice(*ta, n.i0, n.i1);
    case Op::kPad: return pad(*ta, n.i0, n.i1);
    case Op::kSum: return sum(*ta);
    case Op::kSumRows: return sum_rows(*ta);
    case Op::kSumBatch: return sum_batch(*ta);
    case Op::kBcastRows: return bcast_rows(*ta, n.i0);
    case Op::kBcastCols: return bcast_cols(*ta, n.i0);
    case Op::kBcastScalar: return bcast_scalar(*ta, n.out.shape());
    case Op::kReshape: return reshape(*ta, n.out.shape());
    case Op::kLeaf: break;
  }
  throw TapeError(std::string("no tangent rule for ") + op_name(n.op));
}

inline std::vector<Tensor> Graph::vjp(const Tensor& output, std::span<const Tensor> wrt,
                                      const Tensor& cotangent, bool create_graph) {
  if (!output.on_graph() || output.owner() != this) {
    throw TapeError("vjp: output tensor is not on this graph");
  }
  if (!cotangent.same_shape(output)) {
    throw ShapeError("vjp: cotangent shape " + shape_str(cotangent) +
                     " does not match output shape " + shape_str(output));
  }
  for (const Tensor& w : wrt) {
    if (!w.on_graph() || w.owner() != this) {
      throw TapeError("vjp: differentiation target is not on this graph");
    }
  }
  const int out_id = output.node();

  // Active set: nodes on a path from the output down to some wrt target.
  // Cotangents propagate only through it, so a VJP w.r.t. z never touches
  // parameter paths and derivative nodes from unrelated passes stay cold.
  std::vector<char> descends(static_cast<std::size_t>(out_id) + 1, 0);
  for (const Tensor& w : wrt) {
    if (w.node() <= out_id) descends[static_cast<std::size_t>(w.node())] = 1;
  }
  for (int i = 0; i <= out_id; ++i) {
    if (descends[static_cast<std::size_t>(i)]) continue;
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if ((n.in0 >= 0 && descends[static_cast<std::size_t>(n.in0)]) ||
        (n.in1 >= 0 && descends[static_cast<std::size_t>(n.in1)])) {
      descends[static_cast<std::size_t>(i)] = 1;
    }
  }
  std::vector<char> active(static_cast<std::size_t>(out_id) + 1, 0);
  active[static_cast<std::size_t>(out_id)] = descends[static_cast<std::size_t>(out_id)];
  for (int i = out_id; i >= 0; --i) {
    if (!active[static_cast<std::size_t>(i)]) continue;
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.in0 >= 0 && descends[static_cast<std::size_t>(n.in0)]) {
      active[static_cast<std::size_t>(n.in0)] = 1;
    }
    if (n.in1 >= 0 && descends[static_cast<std::size_t>(n.in1)]) {
      active[static_cast<std::size_t>(n.in1)] = 1;
    }
  }

  if (create_graph) {
    if (backward_depth_ >= 1) {
      throw TapeError(
          "vjp: create_graph requested inside a recorded backward pass; only one "
          "level of derivative nesting is supported");
    }
    for (int i = 0; i <= out_id; ++i) {
      if (active[static_cast<std::size_t>(i)] &&
          nodes_[static_cast<std::size_t>(i)].level >= 1) {
        throw TapeError(
            "vjp: create_graph through nodes recorded by an earlier create_graph "
            "backward; only one level of derivative nesting is supported");
      }
    }
  }

  std::vector<Tensor> bar(static_cast<std::size_t>(out_id) + 1);
  if (active[static_cast<std::size_t>(out_id)]) {
    bar[static_cast<std::size_t>(out_id)] =
        (cotangent.on_graph() && cotangent.owner() != this) ? cotangent.detached()
                                                            : cotangent;
  }

  {
    std::optional<BackwardDepth> depth;
    std::optional<NoTrace> silent;
    if (create_graph) {
      depth.emplace(*this);
    } else {
      silent.emplace();
    }
    for (int i = out_id; i >= 0; --i) {
      if (!active[static_cast<std::size_t>(i)] ||
          bar[static_cast<std::size_t>(i)].empty()) {
        continue;
      }
      const Node n = nodes_[static_cast<std::size_t>(i)];  // copy: rules may append
      if (n.op == Op::kLeaf) continue;
      const Tensor ct = bar[static_cast<std::size_t>(i)];
      if (n.in0 >= 0 && active[static_cast<std::size_t>(n.in0)]) {
        Tensor d = backward_input0(n, ct);
        Tensor& slot = bar[static_cast<std::size_t>(n.in0)];
        slot = slot.empty() ? d : add(slot, d);
      }
      if (n.in1 >= 0 && active[static_cast<std::size_t>(n.in1)]) {
        Tensor d = backward_input1(n, ct);
        Tensor& slot = bar[static_cast<std::size_t>(n.in1)];
        slot = slot.empty() ? d : add(slot, d);
      }
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    const std::size_t id = static_cast<std::size_t>(w.node());
    if (w.node() > out_id || bar[id].empty()) {
      result.push_back(zeros_like(w));
    } else {
      result.push_back(bar[id]);
    }
  }
  return result;
}

inline Tensor Graph::jvp(const Tensor& output, const Tensor& input,
                         const Tensor& tangent) {
  if (!output.on_graph() || output.owner() != this) {
    throw TapeError("jvp: output tensor is not on this graph");
  }
  if (!input.on_graph() || input.owner() != this) {
    throw TapeError("jvp: input tensor is not on this graph");
  }
  if (!tangent.same_shape(input)) {
    throw ShapeError("jvp: tangent shape " + shape_str(tangent) +
                     " does not match input shape " + shape_str(input));
  }
  const int out_id = output.node();
  const int in_id = input.node();
  if (in_id > out_id) return zeros_like(output);

  std::vector<Tensor> tang(static_cast<std::size_t>(out_id) + 1);
  tang[static_cast<std::size_t>(in_id)] = tangent;
  for (int i = in_id + 1; i <= out_id; ++i) {
    const Node n = nodes_[static_cast<std::size_t>(i)];  // copy: rules may append
    if (n.op == Op::kLeaf) continue;
    const Tensor* ta =
        (n.in0 >= 0 && !tang[static_cast<std::size_t>(n.in0)].empty())
            ? &tang[static_cast<std::size_t>(n.in0)]
            : nullptr;
    const Tensor* tb =
        (n.in1 >= 0 && !tang[static_cast<std::size_t>(n.in1)].empty())
            ? &tang[static_cast<std::size_t>(n.in1)]
            : nullptr;
    if (!ta && !tb) continue;
    tang[static_cast<std::size_t>(i)] = forward_tangent(n, ta, tb);
  }
  Tensor& t = tang[static_cast<std::size_t>(out_id)];
  return t.empty() ? zeros_like(output) : t;
}

// ---------------------------------------------------------------------------
// Named parameter collection
// ---------------------------------------------------------------------------

/// Ordered, uniquely named parameter tensors. Flattening concatenates values
/// in insertion order; unflatten restores them bit-exactly.
class ParamStore {
 public:
  void add(std::string name, Tensor value) {
    for (const auto& [n, v] : items_) {
      if (n == name) throw ConfigError("ParamStore: duplicate parameter name " + name);
    }
    items_.emplace_back(std::move(name), std::move(value));
  }

  bool has(const std::string& name) const {
    for (const auto& [n, v] : items_) {
      if (n == name) return true;
    }
    return false;
  }

  const Tensor& at(const std::string& name) const {
    for (const auto& [n, v] : items_) {
      if (n == name) return v;
    }
    throw ConfigError("ParamStore: unknown parameter " + name);
  }

  void set(std::size_t index, Tensor value) {
    if (!items_[index].second.same_shape(value)) {
      throw ShapeError("ParamStore: shape change for " + items_[index].first);
    }
    items_[index].second = std::move(value);
  }

  void set(const std::string& name, Tensor value) {
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (items_[i].first == name) {
        set(i, std::move(value));
        return;
      }
    }
    throw ConfigError("ParamStore: unknown parameter " + name);
  }

  std::size_t count() const { return items_.size(); }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, v] : items_) n += v.size();
    return n;
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(total_size());
    for (const auto& [name, v] : items_) {
      auto d = v.data();
      flat.insert(flat.end(), d.begin(), d.end());
    }
    return flat;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != total_size()) {
      throw ShapeError("ParamStore: flat vector length " + std::to_string(flat.size()) +
                       " does not match parameter count " +
                       std::to_string(total_size()));
    }
    std::size_t off = 0;
    for (auto& [name, v] : items_) {
      std::vector<double> chunk(flat.begin() + static_cast<std::ptrdiff_t>(off),
                                flat.begin() + static_cast<std::ptrdiff_t>(off + v.size()));
      v = Tensor::from(v.shape(), std::move(chunk));
      off += v.size();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

}  // namespace cnflow
