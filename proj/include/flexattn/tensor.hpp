// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flexattn/common.hpp"

namespace flexattn {

/// Dense row-major array of rank 1 or 2.  Persistent tensors (parameters,
/// moments, frozen constants) live outside any tape; `g` is the gradient
/// accumulator, allocated on demand and accumulated additively.
struct Tensor {
  std::vector<int> dims;
  std::vector<real> v;
  std::vector<real> g;

  Tensor() = default;
  Tensor(std::vector<int> d, std::vector<real> values);

  static Tensor zeros(std::vector<int> d);
  static Tensor scalar(real x) { return Tensor({1}, {x}); }

  int64_t size() const { return static_cast<int64_t>(v.size()); }
  int rank() const { return static_cast<int>(dims.size()); }
  int rows() const { return dims.empty() ? 0 : dims[0]; }
  int cols() const { return rank() == 2 ? dims[1] : 1; }

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), 0);
  }
  void zero_grad() {
    if (!g.empty()) std::fill(g.begin(), g.end(), real(0));
  }
};

int64_t shape_size(std::span<const int> dims);
std::string shape_str(std::span<const int> dims);

/// Handle to a node on a Tape.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Recorded computation graph for reverse-mode differentiation.  One tape
/// is one logical execution stream: record forward operations, then call
/// backward() on a scalar node to accumulate d(out)/d(leaf) into every
/// registered leaf tensor's grad, in exact reverse recording order.
///
/// Every operation validates its result for NaN/Inf and throws
/// NumericError naming the operation; non-finite values never propagate
/// silently.  reset() keeps node storage so per-sample graphs can reuse
/// allocations.
class Tape {
 public:
  // When false, leaves are treated as constants: nothing requires grad
  // and backward() is unavailable.  Used by decoding.
  bool grad_enabled = true;

  // Leaf bound to external storage; gradients accumulate into t.g.
  Var leaf(Tensor& t);
  // Constant node (no gradient), values copied in.
  Var constant(std::vector<int> dims, std::vector<real> values);
  Var constant(const Tensor& t) { return constant(t.dims, t.v); }
  Var zeros(std::vector<int> dims);
  Var scalar(real x) { return constant({1}, {x}); }

  // [m,k]x[k,n] -> [m,n]; also [m,k]x[k] -> [m] and [k]x[k,n] -> [n].
  Var matmul(Var a, Var b);
  // [m,k] x ([n,k])^T -> [m,n].
  Var matmul_bt(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  // [r,c] + [c], the row vector added to every row.
  Var add_row(Var m, Var row);
  // vec - s / vec * s with scalar node s broadcast over vec.
  Var sub_bcast(Var vec, Var s);
  Var mul_bcast(Var vec, Var s);
  Var scale(Var a, real k);
  Var neg(Var a) { return scale(a, -1); }
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var exp(Var a);
  Var log(Var a);

  // Masked entries are exactly 0; kept entries exp(x - max_kept) / sum.
  // Throws DomainError when the mask keeps nothing (empty window).
  Var softmax_masked(Var logits, const std::vector<uint8_t>& mask);
  Var softmax(Var logits);

  Var concat(std::span<const Var> parts, int axis);
  Var concat(Var a, Var b, int axis);
  // Half-open range along `axis` (0 = rows / 1-D range, 1 = columns).
  Var slice(Var a, int axis, int begin, int end);
  Var reshape(Var a, std::vector<int> dims);
  // Gather rows of a [V,e] table -> [n,e].
  Var embed_rows(Var table, std::span<const int> ids);
  Var sum(Var a);
  Var dot(Var a, Var b);
  // -log softmax(logits)[gold], computed stably as one primitive.
  Var cross_entropy_logits(Var logits, int gold);

  void backward(Var out, real seed = 1);

  std::span<const real> val(Var x) const;
  std::span<const real> grad_of(Var x) const;
  real scalar_val(Var x) const { return val(x)[0]; }
  const std::vector<int>& dims_of(Var x) const;
  size_t node_count() const { return used_; }
  void reset() { used_ = 0; }

 private:
  enum class Op : uint8_t {
    kLeaf,
    kConst,
    kMatMul,
    kMatMulBT,
    kAdd,
    kSub,
    kMul,
    kAddRow,
    kSubBcast,
    kMulBcast,
    kScale,
    kTanh,
    kSigmoid,
    kExp,
    kLog,
    kSoftmaxMasked,
    kConcat,
    kSlice,
    kReshape,
    kEmbedRows,
    kSum,
    kDot,
    kCeLogits,
  };
  static const char* op_name(Op op);

  struct Node {
    Op op{};
    bool needs_grad = false;
    int a = -1, b = -1;   // operand ids
    int i0 = 0, i1 = 0, i2 = 0;  // payload: effective dims / axis / range / id
    real c = 0;                  // scalar payload
    std::vector<int> dims;
    std::vector<real> val;   // unused for kLeaf (external storage)
    std::vector<real> grad;
    std::vector<int> aux;    // concat operands, gather ids, softmax mask
    Tensor* external = nullptr;
  };

  int push(Op op, std::vector<int> dims, int a, int b);
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  std::span<const real> val_of(int id) const;
  real* grad_ptr(int id);
  bool wants_grad(int id) const { return node(id).needs_grad; }
  void check_result(int id) const;
  void backward_node(int id);

  std::vector<Node> nodes_;
  size_t used_ = 0;
};

/// Max over leaves and entries of |analytic - numeric| / max(1, |analytic|,
/// |numeric|), where numeric is the central difference (f(x+h)-f(x-h))/2h.
/// `build` must construct the same scalar-valued graph on every call.
/// Leaf gradients are clobbered.
real grad_check(const std::function<Var(Tape&)>& build,
                std::span<Tensor* const> leaves, real h = 1e-5);

}  // namespace flexattn
