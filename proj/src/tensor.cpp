// SPDX-License-Identifier: Apache-2.0
#include "matml/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace matml {

namespace {

std::size_t numel_of(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::vector<std::size_t> strides_of(const std::vector<std::size_t>& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

[[noreturn]] void shape_error(Op kind, const std::string& detail) {
  fail(std::string(op_name(kind)) + ": " + detail);
}

void check_rank2(Op kind, const Tensor& t, const char* which) {
  if (t.rank() != 2) shape_error(kind, std::string(which) + " must be rank 2, got " + shape_str(t.shape));
}

int normalize_axis(Op kind, int axis, std::size_t rank) {
  if (axis < 0 || static_cast<std::size_t>(axis) >= rank)
    shape_error(kind, "unknown axis " + std::to_string(axis) + " for shape of rank " + std::to_string(rank));
  return axis;
}

// numpy-style broadcast of two shapes: align right, each dim equal or 1.
std::vector<std::size_t> broadcast_shapes(Op kind, const std::vector<std::size_t>& a,
                                          const std::vector<std::size_t>& b) {
  std::size_t rank = std::max(a.size(), b.size());
  std::vector<std::size_t> out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      shape_error(kind, "shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

bool broadcastable_to(const std::vector<std::size_t>& from, const std::vector<std::size_t>& to) {
  if (from.size() > to.size()) return false;
  std::size_t off = to.size() - from.size();
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i] != to[off + i] && from[i] != 1) return false;
  }
  return true;
}

// Materializes `t` at shape `dims` (already validated as broadcastable).
Tensor broadcast_kernel(const Tensor& t, const std::vector<std::size_t>& dims) {
  if (t.shape == dims) return Tensor(dims, t.data);
  Tensor out(dims, std::vector<double>(numel_of(dims)));
  const std::size_t rank = dims.size();
  const std::size_t off = rank - t.shape.size();
  std::vector<std::size_t> in_strides(rank, 0);
  {
    auto ts = strides_of(t.shape);
    for (std::size_t i = 0; i < t.shape.size(); ++i)
      in_strides[off + i] = (t.shape[i] == 1) ? 0 : ts[i];
  }
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t n = out.data.size();
  std::size_t in_pos = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    out.data[lin] = t.data[in_pos];
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      in_pos += in_strides[d];
      if (idx[d] < dims[d]) break;
      in_pos -= in_strides[d] * dims[d];
      idx[d] = 0;
    }
  }
  return out;
}

template <typename F>
Tensor binary_elementwise(Op kind, const Tensor& a, const Tensor& b, F f) {
  if (a.shape == b.shape) {
    Tensor out(a.shape, a.data);
    const double* rhs = b.data.data();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(out.data[i], rhs[i]);
    return out;
  }
  auto out_shape = broadcast_shapes(kind, a.shape, b.shape);
  Tensor lhs = broadcast_kernel(a, out_shape);
  Tensor rhs = broadcast_kernel(b, out_shape);
  for (std::size_t i = 0; i < lhs.data.size(); ++i) lhs.data[i] = f(lhs.data[i], rhs.data[i]);
  return lhs;
}

template <typename F>
Tensor unary_elementwise(const Tensor& a, F f) {
  Tensor out(a.shape, a.data);
  for (double& v : out.data) v = f(v);
  return out;
}

Tensor matmul_kernel(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  check_rank2(Op::matmul, a, "lhs");
  check_rank2(Op::matmul, b, "rhs");
  const std::size_t m = ta ? a.shape[1] : a.shape[0];
  const std::size_t k = ta ? a.shape[0] : a.shape[1];
  const std::size_t k2 = tb ? b.shape[1] : b.shape[0];
  const std::size_t n = tb ? b.shape[0] : b.shape[1];
  if (k != k2)
    shape_error(Op::matmul, "inner dimensions disagree: " + shape_str(a.shape) +
                                (ta ? "^T" : "") + " x " + shape_str(b.shape) + (tb ? "^T" : ""));
  Tensor out({m, n}, std::vector<double>(m * n, 0.0));
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* C = out.data.data();
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        if (av == 0.0) continue;
        const double* Bp = B + p * n;
        double* Ci = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Ci[j] += av * Bp[j];
      }
  } else {
    auto at = [&](std::size_t i, std::size_t p) { return ta ? A[p * m + i] : A[i * k + p]; };
    auto bt = [&](std::size_t p, std::size_t j) { return tb ? B[j * k + p] : B[p * n + j]; };
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = at(i, p);
        if (av == 0.0) continue;
        double* Ci = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Ci[j] += av * bt(p, j);
      }
  }
  return out;
}

std::size_t row_width(const std::vector<std::size_t>& shape) {
  std::size_t w = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) w *= shape[i];
  return w;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (numel_of(shape) != data.size())
    fail("tensor: shape " + shape_str(shape) + " implies " + std::to_string(numel_of(shape)) +
         " elements, got " + std::to_string(data.size()));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::vec(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::vec(const std::vector<double>& values) { return Tensor({values.size()}, values); }

Tensor Tensor::zeros(std::vector<std::size_t> s) {
  std::size_t n = numel_of(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> s, double v) {
  std::size_t n = numel_of(s);
  return Tensor(std::move(s), std::vector<double>(n, v));
}

double Tensor::item() const {
  if (data.size() != 1) fail("item: tensor of shape " + shape_str(shape) + " is not scalar");
  return data[0];
}

double Tensor::at(std::size_t i) const { return data.at(i); }

double Tensor::at(std::size_t i, std::size_t j) const {
  return data.at(i * shape.at(1) + j);
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return data.at((i * shape.at(1) + j) * shape.at(2) + k);
}

Tensor Tensor::detached() const { return Tensor(shape, data); }

const char* op_name(Op kind) {
  switch (kind) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::subtract: return "subtract";
    case Op::multiply: return "multiply";
    case Op::divide: return "divide";
    case Op::negate: return "negate";
    case Op::matmul: return "matmul";
    case Op::sum: return "sum";
    case Op::sum_axis: return "sum_axis";
    case Op::mean: return "mean";
    case Op::mean_axis: return "mean_axis";
    case Op::reshape: return "reshape";
    case Op::abs: return "abs";
    case Op::square: return "square";
    case Op::sqrt: return "sqrt";
    case Op::exp: return "exp";
    case Op::relu: return "relu";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::broadcast: return "broadcast";
    case Op::gather_rows: return "gather_rows";
    case Op::scatter_add_rows: return "scatter_add_rows";
    case Op::masked_fill: return "masked_fill";
  }
  return "?";
}

Tensor eval_op(Op kind, const OpAttrs& attrs, std::span<const Tensor> in) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n)
      shape_error(kind, "expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
  };
  switch (kind) {
    case Op::leaf:
      arity(1);
      return in[0].detached();
    case Op::add:
      arity(2);
      return binary_elementwise(kind, in[0], in[1], [](double a, double b) { return a + b; });
    case Op::subtract:
      arity(2);
      return binary_elementwise(kind, in[0], in[1], [](double a, double b) { return a - b; });
    case Op::multiply:
      arity(2);
      return binary_elementwise(kind, in[0], in[1], [](double a, double b) { return a * b; });
    case Op::divide:
      arity(2);
      return binary_elementwise(kind, in[0], in[1], [](double a, double b) { return a / b; });
    case Op::negate:
      arity(1);
      return unary_elementwise(in[0], [](double v) { return -v; });
    case Op::matmul:
      arity(2);
      return matmul_kernel(in[0], in[1], attrs.trans_a, attrs.trans_b);
    case Op::sum: {
      arity(1);
      double acc = 0.0;
      for (double v : in[0].data) acc += v;
      return Tensor::scalar(acc);
    }
    case Op::mean: {
      arity(1);
      if (in[0].numel() == 0) shape_error(kind, "mean of an empty tensor");
      double acc = 0.0;
      for (double v : in[0].data) acc += v;
      return Tensor::scalar(acc / static_cast<double>(in[0].numel()));
    }
    case Op::sum_axis:
    case Op::mean_axis: {
      arity(1);
      const Tensor& x = in[0];
      int axis = normalize_axis(kind, attrs.axis, x.rank());
      const std::size_t extent = x.shape[static_cast<std::size_t>(axis)];
      if (kind == Op::mean_axis && extent == 0) shape_error(kind, "mean over an empty axis");
      std::vector<std::size_t> out_shape = x.shape;
      out_shape[static_cast<std::size_t>(axis)] = 1;
      Tensor out = Tensor::zeros(out_shape);
      std::size_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<std::size_t>(i)];
      for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < x.rank(); ++i) inner *= x.shape[i];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < extent; ++e) {
          const double* src = x.data.data() + (o * extent + e) * inner;
          double* dst = out.data.data() + o * inner;
          for (std::size_t q = 0; q < inner; ++q) dst[q] += src[q];
        }
      if (kind == Op::mean_axis)
        for (double& v : out.data) v /= static_cast<double>(extent);
      return out;
    }
    case Op::reshape: {
      arity(1);
      if (numel_of(attrs.dims) != in[0].numel())
        shape_error(kind, "cannot reshape " + shape_str(in[0].shape) + " to " + shape_str(attrs.dims));
      return Tensor(attrs.dims, in[0].data);
    }
    case Op::abs:
      arity(1);
      return unary_elementwise(in[0], [](double v) { return std::fabs(v); });
    case Op::square:
      arity(1);
      return unary_elementwise(in[0], [](double v) { return v * v; });
    case Op::sqrt:
      arity(1);
      return unary_elementwise(in[0], [](double v) { return std::sqrt(v); });
    case Op::exp:
      arity(1);
      return unary_elementwise(in[0], [](double v) { return std::exp(v); });
    case Op::relu:
      arity(1);
      return unary_elementwise(in[0], [](double v) { return v > 0.0 ? v : 0.0; });
    case Op::concat: {
      if (in.empty()) shape_error(kind, "needs at least one input");
      const std::size_t rank = in[0].rank();
      int axis = normalize_axis(kind, attrs.axis, rank);
      std::vector<std::size_t> out_shape = in[0].shape;
      std::size_t total = in[0].shape[static_cast<std::size_t>(axis)];
      for (std::size_t t = 1; t < in.size(); ++t) {
        if (in[t].rank() != rank)
          shape_error(kind, "rank mismatch: " + shape_str(in[0].shape) + " vs " + shape_str(in[t].shape));
        for (std::size_t d = 0; d < rank; ++d) {
          if (d == static_cast<std::size_t>(axis)) continue;
          if (in[t].shape[d] != out_shape[d])
            shape_error(kind, "shape mismatch off axis: " + shape_str(in[0].shape) + " vs " +
                                  shape_str(in[t].shape));
        }
        total += in[t].shape[static_cast<std::size_t>(axis)];
      }
      out_shape[static_cast<std::size_t>(axis)] = total;
      Tensor out = Tensor::zeros(out_shape);
      std::size_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
      for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < rank; ++i) inner *= out_shape[i];
      std::size_t offset = 0;
      for (const Tensor& t : in) {
        const std::size_t ext = t.shape[static_cast<std::size_t>(axis)];
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = t.data.data() + o * ext * inner;
          double* dst = out.data.data() + (o * total + offset) * inner;
          std::copy(src, src + ext * inner, dst);
        }
        offset += ext;
      }
      return out;
    }
    case Op::slice: {
      arity(1);
      const Tensor& x = in[0];
      int axis = normalize_axis(kind, attrs.axis, x.rank());
      const std::int64_t ext = static_cast<std::int64_t>(x.shape[static_cast<std::size_t>(axis)]);
      if (attrs.start < 0 || attrs.stop > ext || attrs.start > attrs.stop)
        shape_error(kind, "range [" + std::to_string(attrs.start) + "," + std::to_string(attrs.stop) +
                              ") out of bounds for axis extent " + std::to_string(ext));
      std::vector<std::size_t> out_shape = x.shape;
      out_shape[static_cast<std::size_t>(axis)] = static_cast<std::size_t>(attrs.stop - attrs.start);
      Tensor out = Tensor::zeros(out_shape);
      std::size_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<std::size_t>(i)];
      for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < x.rank(); ++i) inner *= x.shape[i];
      const std::size_t keep = out_shape[static_cast<std::size_t>(axis)];
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = x.data.data() + (o * static_cast<std::size_t>(ext) +
                                             static_cast<std::size_t>(attrs.start)) * inner;
        double* dst = out.data.data() + o * keep * inner;
        std::copy(src, src + keep * inner, dst);
      }
      return out;
    }
    case Op::broadcast: {
      arity(1);
      if (!broadcastable_to(in[0].shape, attrs.dims))
        shape_error(kind, "cannot broadcast " + shape_str(in[0].shape) + " to " + shape_str(attrs.dims));
      return broadcast_kernel(in[0], attrs.dims);
    }
    case Op::gather_rows: {
      arity(1);
      const Tensor& x = in[0];
      if (x.rank() < 1) shape_error(kind, "input must have rank >= 1");
      const std::size_t w = row_width(x.shape);
      const std::int64_t nrows = static_cast<std::int64_t>(x.shape[0]);
      std::vector<std::size_t> out_shape = x.shape;
      out_shape[0] = attrs.rows.size();
      Tensor out = Tensor::zeros(out_shape);
      for (std::size_t r = 0; r < attrs.rows.size(); ++r) {
        const std::int64_t src = attrs.rows[r];
        if (src < 0 || src >= nrows)
          shape_error(kind, "row index " + std::to_string(src) + " out of range [0," +
                                std::to_string(nrows) + ")");
        std::copy(x.data.data() + static_cast<std::size_t>(src) * w,
                  x.data.data() + (static_cast<std::size_t>(src) + 1) * w,
                  out.data.data() + r * w);
      }
      return out;
    }
    case Op::scatter_add_rows: {
      arity(1);
      const Tensor& x = in[0];
      if (x.rank() < 1) shape_error(kind, "input must have rank >= 1");
      if (attrs.rows.size() != x.shape[0])
        shape_error(kind, "index count " + std::to_string(attrs.rows.size()) +
                              " does not match input rows " + std::to_string(x.shape[0]));
      if (attrs.out_rows < 0) shape_error(kind, "negative output row count");
      const std::size_t w = row_width(x.shape);
      std::vector<std::size_t> out_shape = x.shape;
      out_shape[0] = static_cast<std::size_t>(attrs.out_rows);
      Tensor out = Tensor::zeros(out_shape);
      for (std::size_t r = 0; r < attrs.rows.size(); ++r) {
        const std::int64_t dst = attrs.rows[r];
        if (dst < 0 || dst >= attrs.out_rows)
          shape_error(kind, "row index " + std::to_string(dst) + " out of range [0," +
                                std::to_string(attrs.out_rows) + ")");
        const double* src = x.data.data() + r * w;
        double* d = out.data.data() + static_cast<std::size_t>(dst) * w;
        for (std::size_t q = 0; q < w; ++q) d[q] += src[q];
      }
      return out;
    }
    case Op::masked_fill: {
      arity(1);
      const Tensor& x = in[0];
      if (attrs.mask.size() != x.numel())
        shape_error(kind, "mask has " + std::to_string(attrs.mask.size()) + " entries for " +
                              std::to_string(x.numel()) + " elements");
      Tensor out = x.detached();
      for (std::size_t i = 0; i < out.data.size(); ++i)
        if (attrs.mask[i]) out.data[i] = attrs.fill;
      return out;
    }
  }
  fail("eval_op: unhandled kind");
}

int Tape::record(Op kind, OpAttrs attrs, std::vector<int> parents,
                 std::vector<Tensor> inputs, const Tensor& output) {
  TapeNode n;
  n.kind = kind;
  n.attrs = std::move(attrs);
  n.parents = std::move(parents);
  n.inputs = std::move(inputs);
  n.output = output;
  const int id = static_cast<int>(nodes_.size());
  n.output.tape = this;
  n.output.node = id;
  nodes_.push_back(std::move(n));
  return id;
}

Tensor Tape::leaf(const Tensor& value) {
  Tensor v = value.detached();
  const int id = record(Op::leaf, {}, {}, {v}, v);
  Tensor out = v;
  out.tape = this;
  out.node = id;
  return out;
}

bool Tape::replay_matches() const {
  std::vector<Tensor> replayed(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const TapeNode& n = nodes_[i];
    std::vector<Tensor> ins;
    ins.reserve(n.inputs.size());
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const int p = k < n.parents.size() ? n.parents[k] : -1;
      if (p >= 0)
        ins.push_back(replayed[static_cast<std::size_t>(p)]);
      else
        ins.push_back(n.inputs[k].detached());
    }
    Tensor out = eval_op(n.kind, n.attrs, ins);
    if (out.shape != n.output.shape) return false;
    if (std::memcmp(out.data.data(), n.output.data.data(), out.data.size() * sizeof(double)) != 0)
      return false;
    replayed[i] = std::move(out);
  }
  return true;
}

Tensor apply_primitive(Op kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  Tape* tape = nullptr;
  for (const Tensor& t : inputs) {
    if (!t.tape) continue;
    if (tape && tape != t.tape) fail(std::string(op_name(kind)) + ": inputs live on different tapes");
    tape = t.tape;
  }
  Tensor out = eval_op(kind, attrs, inputs);
  if (tape) {
    std::vector<int> parents;
    std::vector<Tensor> saved;
    parents.reserve(inputs.size());
    saved.reserve(inputs.size());
    for (const Tensor& t : inputs) {
      parents.push_back(t.tape ? t.node : -1);
      saved.push_back(t.tape ? Tensor{} : t);  // parent values live in their nodes
    }
    const int id = tape->record(kind, attrs, std::move(parents), std::move(saved), out);
    out.tape = tape;
    out.node = id;
  }
  return out;
}

namespace {

// Sums `g` back down to `target` after a broadcast: collapse the extra
// leading axes, then the axes the input held at extent 1.
Tensor reduce_to(const Tensor& g, const std::vector<std::size_t>& target) {
  Tensor cur = g;
  while (cur.rank() > target.size()) {
    cur = sum_axis(cur, 0);
    std::vector<std::size_t> dropped(cur.shape.begin() + 1, cur.shape.end());
    cur = reshape(cur, dropped);
  }
  for (std::size_t d = 0; d < target.size(); ++d) {
    if (target[d] == 1 && cur.shape[d] != 1) cur = sum_axis(cur, static_cast<int>(d));
  }
  if (cur.shape != target) cur = reshape(cur, target);
  return cur;
}

// Adjoints of each input, given the output adjoint `g`. `in` and `out` are
// the resolved forward values: tape-attached when create_graph is set (so
// differentiating the gradient itself stays valid), detached otherwise.
// Expressed in the same primitive vocabulary, which is what makes
// grad-of-grad work.
std::vector<Tensor> vjp(Op kind, const OpAttrs& attrs, std::span<const Tensor> in,
                        const Tensor& out, const Tensor& g) {
  switch (kind) {
    case Op::leaf:
      return {};
    case Op::add:
      return {reduce_to(g, in[0].shape), reduce_to(g, in[1].shape)};
    case Op::subtract:
      return {reduce_to(g, in[0].shape), negate(reduce_to(g, in[1].shape))};
    case Op::multiply:
      return {reduce_to(multiply(g, in[1]), in[0].shape),
              reduce_to(multiply(g, in[0]), in[1].shape)};
    case Op::divide:
      return {reduce_to(divide(g, in[1]), in[0].shape),
              reduce_to(negate(divide(multiply(g, out), in[1])), in[1].shape)};
    case Op::negate:
      return {negate(g)};
    case Op::matmul: {
      const bool ta = attrs.trans_a, tb = attrs.trans_b;
      Tensor ga = ta ? matmul(in[1], g, tb, true) : matmul(g, in[1], false, !tb);
      Tensor gb = tb ? matmul(g, in[0], true, ta) : matmul(in[0], g, !ta, false);
      return {ga, gb};
    }
    case Op::sum:
      return {broadcast(g, in[0].shape)};
    case Op::mean:
      return {scale(broadcast(g, in[0].shape), 1.0 / static_cast<double>(in[0].numel()))};
    case Op::sum_axis:
      return {broadcast(g, in[0].shape)};
    case Op::mean_axis: {
      const std::size_t extent = in[0].shape[static_cast<std::size_t>(attrs.axis)];
      return {scale(broadcast(g, in[0].shape), 1.0 / static_cast<double>(extent))};
    }
    case Op::reshape:
      return {reshape(g, in[0].shape)};
    case Op::abs: {
      // d|x|/dx as a constant sign field; 0 at x == 0 by convention.
      Tensor sign = in[0].detached();
      for (double& v : sign.data) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      return {multiply(g, sign)};
    }
    case Op::square:
      return {multiply(g, scale(in[0], 2.0))};
    case Op::sqrt:
      return {divide(g, scale(out, 2.0))};
    case Op::exp:
      return {multiply(g, out)};
    case Op::relu: {
      std::vector<std::uint8_t> mask(in[0].numel());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = in[0].data[i] <= 0.0;
      return {masked_fill(g, std::move(mask), 0.0)};
    }
    case Op::concat: {
      std::vector<Tensor> grads;
      grads.reserve(in.size());
      std::int64_t offset = 0;
      for (const Tensor& t : in) {
        const std::int64_t ext = static_cast<std::int64_t>(t.shape[static_cast<std::size_t>(attrs.axis)]);
        grads.push_back(slice(g, attrs.axis, offset, offset + ext));
        offset += ext;
      }
      return grads;
    }
    case Op::slice: {
      // Pad g back to the input extent with zero blocks on either side.
      const std::vector<std::size_t>& xs = in[0].shape;
      const std::size_t axis = static_cast<std::size_t>(attrs.axis);
      std::vector<Tensor> parts;
      if (attrs.start > 0) {
        auto s = xs;
        s[axis] = static_cast<std::size_t>(attrs.start);
        parts.push_back(Tensor::zeros(s));
      }
      parts.push_back(g);
      if (static_cast<std::size_t>(attrs.stop) < xs[axis]) {
        auto s = xs;
        s[axis] = xs[axis] - static_cast<std::size_t>(attrs.stop);
        parts.push_back(Tensor::zeros(s));
      }
      if (parts.size() == 1) return {g};
      return {concat(std::span<const Tensor>(parts), attrs.axis)};
    }
    case Op::broadcast:
      return {reduce_to(g, in[0].shape)};
    case Op::gather_rows:
      return {scatter_add_rows(g, attrs.rows, static_cast<std::int64_t>(in[0].shape[0]))};
    case Op::scatter_add_rows:
      return {gather_rows(g, attrs.rows)};
    case Op::masked_fill:
      return {masked_fill(g, attrs.mask, 0.0)};
  }
  fail("vjp: unhandled kind");
}

bool differentiable(Op kind) {
  switch (kind) {
    case Op::leaf:
      return false;
    default:
      return true;
  }
}

}  // namespace

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, bool create_graph) {
  if (!output.on_tape()) fail("grad: output is not on a tape");
  if (!output.is_scalar())
    fail("grad: output must be scalar, got shape " + shape_str(output.shape));
  Tape* tape = output.tape;
  for (const Tensor& w : wrt) {
    if (!w.on_tape() || w.tape != tape) fail("grad: wrt tensor not on the output's tape");
  }

  const int top = output.node;
  std::vector<Tensor> adjoint(static_cast<std::size_t>(top) + 1);
  std::vector<char> has(static_cast<std::size_t>(top) + 1, 0);

  Tensor seed = Tensor::full(output.shape, 1.0);
  if (create_graph) seed = tape->leaf(seed);
  adjoint[static_cast<std::size_t>(top)] = seed;
  has[static_cast<std::size_t>(top)] = 1;

  for (int id = top; id >= 0; --id) {
    if (!has[static_cast<std::size_t>(id)]) continue;
    if (!differentiable(tape->node(id).kind)) continue;

    // Copies: create_graph appends nodes during vjp, which may reallocate
    // the tape. Resolved values carry their tape handle only when the
    // adjoint expressions themselves should be recorded.
    const Op kind = tape->node(id).kind;
    const OpAttrs attrs = tape->node(id).attrs;
    const std::vector<int> parents = tape->node(id).parents;
    std::vector<Tensor> resolved(parents.size());
    for (std::size_t k = 0; k < parents.size(); ++k) {
      const Tensor& v =
          parents[k] >= 0 ? tape->node(parents[k]).output : tape->node(id).inputs[k];
      resolved[k] = create_graph ? v : v.detached();
    }
    Tensor out_value = create_graph ? tape->node(id).output : tape->node(id).output.detached();
    const Tensor g = adjoint[static_cast<std::size_t>(id)];

    std::vector<Tensor> grads = vjp(kind, attrs, resolved, out_value, g);
    for (std::size_t k = 0; k < grads.size(); ++k) {
      const int p = parents[k];
      if (p < 0) continue;
      auto& slot = adjoint[static_cast<std::size_t>(p)];
      if (has[static_cast<std::size_t>(p)])
        slot = add(slot, grads[k]);
      else {
        slot = grads[k];
        has[static_cast<std::size_t>(p)] = 1;
      }
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    const std::size_t id = static_cast<std::size_t>(w.node);
    if (id < has.size() && has[id]) {
      result.push_back(adjoint[id]);
    } else {
      Tensor z = Tensor::zeros(w.shape);
      result.push_back(create_graph ? tape->leaf(z) : z);
    }
  }
  return result;
}

std::vector<Tensor> grad(const Tensor& output, std::initializer_list<Tensor> wrt, bool create_graph) {
  std::vector<Tensor> v(wrt);
  return grad(output, std::span<const Tensor>(v), create_graph);
}

Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) fail("finite_difference: step must be positive");
  Tensor probe = x.detached();
  Tensor out = Tensor::zeros(x.shape);
  for (std::size_t i = 0; i < probe.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double up = f(probe);
    probe.data[i] = orig - h;
    const double down = f(probe);
    probe.data[i] = orig;
    out.data[i] = (up - down) / (2.0 * h);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply_primitive(Op::add, in);
}
Tensor subtract(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply_primitive(Op::subtract, in);
}
Tensor multiply(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply_primitive(Op::multiply, in);
}
Tensor divide(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply_primitive(Op::divide, in);
}
Tensor negate(const Tensor& a) {
  const Tensor in[] = {a};
  return apply_primitive(Op::negate, in);
}
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  const Tensor in[] = {a, b};
  OpAttrs attrs;
  attrs.trans_a = trans_a;
  attrs.trans_b = trans_b;
  return apply_primitive(Op::matmul, in, attrs);
}
Tensor sum(const Tensor& a) {
  const Tensor in[] = {a};
  return apply_primitive(Op::sum, in);
}
Tensor sum_axis(const Tensor& a, int axis) {
  const Tensor in[] = {a};
  OpAttrs attrs;
  attrs.axis = axis;
  return apply_primitive(Op::sum_axis, in, attrs);
}
Tensor mean(const Tensor& a) {
  const Tensor in[] = {a};
  return apply_primitive(Op::mean, in);
}
Tensor mean_axis(const Tensor& a, int axis) {
  const Tensor in[] = {a};
  OpAttrs attrs;
  attrs.axis = axis;
  return apply_primitive(Op::mean_axis, in, attrs);
}
Tensor reshape(const Tensor& a, std::vector<std::size_t> dims) {
  const Tensor in[] = {a};
  OpAttrs attrs;
  attrs.dims = std::move(dims);
  return apply_primitive(Op::reshape, in, attrs);
}
Tensor abs(const Tensor& a) {
  const Tensor in[] = {a};
  return apply_primitive(Op::abs, in);
}
Tensor square(const Tensor& a) {
  const Tensor in[] = {a};
  return apply_primitive(Op::square, in);
}
Tensor sqrt(const Tensor& a) {
  const Tensor in[] = {a};
  return apply_primitive(Op::sqrt, in);
}
Tensor exp(const Tensor& a) {
  const Tensor in[] = {a};
  return apply_primitive(Op::exp, in);
}
Tensor relu(const Tensor& a) {
  const Tensor in[] = {a};
  return apply_primitive(Op::relu, in);
}
Tensor concat(std::span<const Tensor> parts, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return apply_primitive(Op::concat, parts, attrs);
}
Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  std::vector<Tensor> v(parts);
  return concat(std::span<const Tensor>(v), axis);
}
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t stop) {
  const Tensor in[] = {a};
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.start = start;
  attrs.stop = stop;
  return apply_primitive(Op::slice, in, attrs);
}
Tensor broadcast(const Tensor& a, std::vector<std::size_t> dims) {
  const Tensor in[] = {a};
  OpAttrs attrs;
  attrs.dims = std::move(dims);
  return apply_primitive(Op::broadcast, in, attrs);
}
Tensor gather_rows(const Tensor& a, std::vector<std::int64_t> rows) {
  const Tensor in[] = {a};
  OpAttrs attrs;
  attrs.rows = std::move(rows);
  return apply_primitive(Op::gather_rows, in, attrs);
}
Tensor scatter_add_rows(const Tensor& a, std::vector<std::int64_t> rows, std::int64_t out_rows) {
  const Tensor in[] = {a};
  OpAttrs attrs;
  attrs.rows = std::move(rows);
  attrs.out_rows = out_rows;
  return apply_primitive(Op::scatter_add_rows, in, attrs);
}
Tensor masked_fill(const Tensor& a, std::vector<std::uint8_t> mask, double fill) {
  const Tensor in[] = {a};
  OpAttrs attrs;
  attrs.mask = std::move(mask);
  attrs.fill = fill;
  return apply_primitive(Op::masked_fill, in, attrs);
}
Tensor scale(const Tensor& a, double factor) { return multiply(a, Tensor::scalar(factor)); }

}  // namespace matml
