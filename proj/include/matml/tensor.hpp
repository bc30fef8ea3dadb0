// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "matml/common.hpp"

namespace matml {

class Tape;

// Dense row-major float64 tensor. When `tape` is set the tensor is the output
// of node `node` on that tape and participates in reverse-mode
// differentiation; tape-free tensors act as constants.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d);

  static Tensor scalar(double v);
  static Tensor vec(std::initializer_list<double> values);
  static Tensor vec(const std::vector<double>& values);
  static Tensor zeros(std::vector<std::size_t> s);
  static Tensor full(std::vector<std::size_t> s, double v);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return data.size() == 1; }
  bool on_tape() const { return tape != nullptr; }

  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  // Tape-free copy of the value.
  Tensor detached() const;
};

enum class Op {
  leaf,
  add,
  subtract,
  multiply,
  divide,
  negate,
  matmul,
  sum,          // full reduction to a scalar
  sum_axis,     // per-axis, keeps the reduced axis with extent 1
  mean,
  mean_axis,
  reshape,
  abs,
  square,
  sqrt,
  exp,
  relu,
  concat,
  slice,
  broadcast,
  gather_rows,
  scatter_add_rows,
  masked_fill,
};

const char* op_name(Op kind);

// Per-op attributes; each kind reads only the fields it needs.
struct OpAttrs {
  int axis = 0;                         // sum_axis/mean_axis/concat/slice
  std::int64_t start = 0;               // slice
  std::int64_t stop = 0;                // slice
  bool trans_a = false;                 // matmul
  bool trans_b = false;                 // matmul
  std::vector<std::size_t> dims;        // reshape/broadcast target shape
  std::vector<std::int64_t> rows;       // gather_rows/scatter_add_rows indices
  std::int64_t out_rows = 0;            // scatter_add_rows output row count
  double fill = 0.0;                    // masked_fill value
  std::vector<std::uint8_t> mask;       // masked_fill element mask
};

// One recorded operation. Parent ids are -1 for tape-free (constant) inputs.
// Parent-backed input values are not duplicated here; they are resolved from
// the parent node's stored output. Only constants are saved in `inputs`.
struct TapeNode {
  Op kind;
  OpAttrs attrs;
  std::vector<int> parents;
  std::vector<Tensor> inputs;   // saved values for constant inputs; empty otherwise
  Tensor output;                // saved forward output
};

// Append-only operation record for one differentiation scope. Tensors hold a
// raw pointer into the owning tape, so tapes are pinned in memory.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  // Records `value` as a differentiable leaf (input or parameter).
  Tensor leaf(const Tensor& value);

  int size() const { return static_cast<int>(nodes_.size()); }
  const TapeNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  // Recomputes every node from its recorded parents and compares with the
  // stored outputs bit for bit.
  bool replay_matches() const;

  int record(Op kind, OpAttrs attrs, std::vector<int> parents,
             std::vector<Tensor> inputs, const Tensor& output);

 private:
  std::vector<TapeNode> nodes_;
};

// Validates shapes, evaluates the kernel, and records the result when any
// input lives on a tape. Mixing inputs from two different tapes is an error;
// tape-free inputs are treated as constants.
Tensor apply_primitive(Op kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

// Pure forward evaluation (no recording). apply_primitive and tape replay
// share this path, which is what makes replay bit-exact.
Tensor eval_op(Op kind, const OpAttrs& attrs, std::span<const Tensor> inputs);

// Reverse-mode gradients of a scalar `output` with respect to each tensor in
// `wrt`. With create_graph the adjoint computation is itself recorded on the
// same tape, so a second grad() call through the result is valid.
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt,
                         bool create_graph = false);
std::vector<Tensor> grad(const Tensor& output, std::initializer_list<Tensor> wrt,
                         bool create_graph = false);

// Central-difference gradient estimate of a scalar-valued function; the
// independent oracle used against grad() throughout the tests.
Tensor finite_difference(const std::function<double(const Tensor&)>& f,
                         const Tensor& x, double h);

// Convenience wrappers over apply_primitive. Binary elementwise ops broadcast
// numpy-style.
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor negate(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor sum(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean(const Tensor& a);
Tensor mean_axis(const Tensor& a, int axis);
Tensor reshape(const Tensor& a, std::vector<std::size_t> dims);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t stop);
Tensor broadcast(const Tensor& a, std::vector<std::size_t> dims);
Tensor gather_rows(const Tensor& a, std::vector<std::int64_t> rows);
Tensor scatter_add_rows(const Tensor& a, std::vector<std::int64_t> rows, std::int64_t out_rows);
Tensor masked_fill(const Tensor& a, std::vector<std::uint8_t> mask, double fill);
Tensor scale(const Tensor& a, double factor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return subtract(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return multiply(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator-(const Tensor& a) { return negate(a); }

}  // namespace matml
