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

#include "flexattn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace flexattn {

int64_t shape_size(std::span<const int> dims) {
  int64_t n = 1;
  for (int d : dims) {
    if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(dims));
    n *= d;
  }
  return n;
}

std::string shape_str(std::span<const int> dims) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> d, std::vector<real> values)
    : dims(std::move(d)), v(std::move(values)) {
  if (shape_size(dims) != static_cast<int64_t>(v.size()))
    throw ShapeError("tensor: " + shape_str(dims) + " does not hold " +
                     std::to_string(v.size()) + " values");
  for (real x : v)
    if (!std::isfinite(x)) throw NumericError("tensor: non-finite value");
}

Tensor Tensor::zeros(std::vector<int> d) {
  int64_t n = shape_size(d);
  Tensor t;
  t.dims = std::move(d);
  t.v.assign(static_cast<size_t>(n), 0);
  return t;
}

const char* Tape::op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConst: return "constant";
    case Op::kMatMul: return "matmul";
    case Op::kMatMulBT: return "matmul_bt";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAddRow: return "add_row";
    case Op::kSubBcast: return "sub_bcast";
    case Op::kMulBcast: return "mul_bcast";
    case Op::kScale: return "scale";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSoftmaxMasked: return "softmax_masked";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kReshape: return "reshape";
    case Op::kEmbedRows: return "embed_rows";
    case Op::kSum: return "sum";
    case Op::kDot: return "dot";
    case Op::kCeLogits: return "cross_entropy_logits";
  }
  return "?";
}

int Tape::push(Op op, std::vector<int> dims, int a, int b) {
  if (used_ == nodes_.size()) nodes_.emplace_back();
  Node& n = nodes_[used_];
  n.op = op;
  n.a = a;
  n.b = b;
  n.i0 = n.i1 = n.i2 = 0;
  n.c = 0;
  n.dims = std::move(dims);
  n.val.clear();
  n.val.resize(static_cast<size_t>(shape_size(n.dims)));
  n.grad.clear();
  n.aux.clear();
  n.external = nullptr;
  n.needs_grad = (a >= 0 && node(a).needs_grad) || (b >= 0 && node(b).needs_grad);
  return static_cast<int>(used_++);
}

std::span<const real> Tape::val_of(int id) const {
  const Node& n = node(id);
  if (n.op == Op::kLeaf) return n.external->v;
  return n.val;
}

real* Tape::grad_ptr(int id) {
  Node& n = node(id);
  if (n.op == Op::kLeaf) return n.external->g.data();
  if (n.grad.size() != val_of(id).size()) n.grad.assign(val_of(id).size(), 0);
  return n.grad.data();
}

void Tape::check_result(int id) const {
  const Node& n = node(id);
  for (real x : n.val)
    if (!std::isfinite(x))
      throw NumericError(std::string(op_name(n.op)) + ": produced non-finite value");
}

std::span<const real> Tape::val(Var x) const { return val_of(x.id); }

std::span<const real> Tape::grad_of(Var x) const {
  const Node& n = node(x.id);
  if (n.op == Op::kLeaf) return n.external->g;
  return n.grad;
}

const std::vector<int>& Tape::dims_of(Var x) const { return node(x.id).dims; }

Var Tape::leaf(Tensor& t) {
  if (t.rank() < 1 || t.rank() > 2)
    throw ShapeError("leaf: rank must be 1 or 2, got " + shape_str(t.dims));
  int id = push(Op::kLeaf, t.dims, -1, -1);
  Node& n = node(id);
  n.val.clear();  // values live in the external tensor
  n.external = &t;
  n.needs_grad = grad_enabled;
  if (grad_enabled) t.ensure_grad();
  return {id};
}

Var Tape::constant(std::vector<int> dims, std::vector<real> values) {
  if (shape_size(dims) != static_cast<int64_t>(values.size()))
    throw ShapeError("constant: " + shape_str(dims) + " does not hold " +
                     std::to_string(values.size()) + " values");
  int id = push(Op::kConst, std::move(dims), -1, -1);
  Node& n = node(id);
  n.val.assign(values.begin(), values.end());
  check_result(id);
  return {id};
}

Var Tape::zeros(std::vector<int> dims) {
  int id = push(Op::kConst, std::move(dims), -1, -1);
  return {id};  // freshly resized val is zero-filled
}

Var Tape::matmul(Var av, Var bv) {
  const std::vector<int>& da = dims_of(av);
  const std::vector<int>& db = dims_of(bv);
  int m, k, n;
  std::vector<int> out;
  if (da.size() == 2 && db.size() == 2) {
    m = da[0]; k = da[1]; n = db[1];
    if (db[0] != k)
      throw ShapeError("matmul: inner dims disagree: " + shape_str(da) + " vs " + shape_str(db));
    out = {m, n};
  } else if (da.size() == 2 && db.size() == 1) {
    m = da[0]; k = da[1]; n = 1;
    if (db[0] != k)
      throw ShapeError("matmul: inner dims disagree: " + shape_str(da) + " vs " + shape_str(db));
    out = {m};
  } else if (da.size() == 1 && db.size() == 2) {
    m = 1; k = da[0]; n = db[1];
    if (db[0] != k)
      throw ShapeError("matmul: inner dims disagree: " + shape_str(da) + " vs " + shape_str(db));
    out = {n};
  } else {
    throw ShapeError("matmul: unsupported ranks " + shape_str(da) + " x " + shape_str(db));
  }
  int id = push(Op::kMatMul, std::move(out), av.id, bv.id);
  Node& nd = node(id);
  nd.i0 = m; nd.i1 = k; nd.i2 = n;
  const real* A = val_of(av.id).data();
  const real* B = val_of(bv.id).data();
  real* C = nd.val.data();
  for (int i = 0; i < m; ++i) {
    real* crow = C + static_cast<int64_t>(i) * n;
    const real* arow = A + static_cast<int64_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      real a = arow[kk];
      const real* brow = B + static_cast<int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
  check_result(id);
  return {id};
}

Var Tape::matmul_bt(Var av, Var bv) {
  const std::vector<int>& da = dims_of(av);
  const std::vector<int>& db = dims_of(bv);
  if (da.size() != 2 || db.size() != 2 || da[1] != db[1])
    throw ShapeError("matmul_bt: incompatible " + shape_str(da) + " x " + shape_str(db) + "^T");
  int m = da[0], k = da[1], n = db[0];
  int id = push(Op::kMatMulBT, {m, n}, av.id, bv.id);
  Node& nd = node(id);
  nd.i0 = m; nd.i1 = k; nd.i2 = n;
  const real* A = val_of(av.id).data();
  const real* B = val_of(bv.id).data();
  real* C = nd.val.data();
  for (int i = 0; i < m; ++i) {
    const real* arow = A + static_cast<int64_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const real* brow = B + static_cast<int64_t>(j) * k;
      real s = 0;
      for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      C[static_cast<int64_t>(i) * n + j] = s;
    }
  }
  check_result(id);
  return {id};
}

Var Tape::add(Var a, Var b) {
  if (dims_of(a) != dims_of(b))
    throw ShapeError("add: shapes disagree: " + shape_str(dims_of(a)) + " vs " +
                     shape_str(dims_of(b)));
  int id = push(Op::kAdd, dims_of(a), a.id, b.id);
  Node& n = node(id);
  auto x = val_of(a.id); auto y = val_of(b.id);
  for (size_t i = 0; i < x.size(); ++i) n.val[i] = x[i] + y[i];
  check_result(id);
  return {id};
}

Var Tape::sub(Var a, Var b) {
  if (dims_of(a) != dims_of(b))
    throw ShapeError("sub: shapes disagree: " + shape_str(dims_of(a)) + " vs " +
                     shape_str(dims_of(b)));
  int id = push(Op::kSub, dims_of(a), a.id, b.id);
  Node& n = node(id);
  auto x = val_of(a.id); auto y = val_of(b.id);
  for (size_t i = 0; i < x.size(); ++i) n.val[i] = x[i] - y[i];
  check_result(id);
  return {id};
}

Var Tape::mul(Var a, Var b) {
  if (dims_of(a) != dims_of(b))
    throw ShapeError("mul: shapes disagree: " + shape_str(dims_of(a)) + " vs " +
                     shape_str(dims_of(b)));
  int id = push(Op::kMul, dims_of(a), a.id, b.id);
  Node& n = node(id);
  auto x = val_of(a.id); auto y = val_of(b.id);
  for (size_t i = 0; i < x.size(); ++i) n.val[i] = x[i] * y[i];
  check_result(id);
  return {id};
}

Var Tape::add_row(Var m, Var row) {
  const std::vector<int>& dm = dims_of(m);
  const std::vector<int>& dr = dims_of(row);
  if (dm.size() != 2 || dr.size() != 1 || dr[0] != dm[1])
    throw ShapeError("add_row: " + shape_str(dm) + " + " + shape_str(dr));
  int rows = dm[0], cols = dm[1];  // push() may invalidate dm/dr
  int id = push(Op::kAddRow, {rows, cols}, m.id, row.id);
  Node& n = node(id);
  auto x = val_of(m.id); auto r = val_of(row.id);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      n.val[static_cast<size_t>(i) * cols + j] = x[static_cast<size_t>(i) * cols + j] + r[j];
  check_result(id);
  return {id};
}

Var Tape::sub_bcast(Var vec, Var s) {
  if (dims_of(s) != std::vector<int>{1})
    throw ShapeError("sub_bcast: second operand must be scalar, got " + shape_str(dims_of(s)));
  int id = push(Op::kSubBcast, dims_of(vec), vec.id, s.id);
  Node& n = node(id);
  auto x = val_of(vec.id);
  real sv = val_of(s.id)[0];
  for (size_t i = 0; i < x.size(); ++i) n.val[i] = x[i] - sv;
  check_result(id);
  return {id};
}

Var Tape::mul_bcast(Var vec, Var s) {
  if (dims_of(s) != std::vector<int>{1})
    throw ShapeError("mul_bcast: second operand must be scalar, got " + shape_str(dims_of(s)));
  int id = push(Op::kMulBcast, dims_of(vec), vec.id, s.id);
  Node& n = node(id);
  auto x = val_of(vec.id);
  real sv = val_of(s.id)[0];
  for (size_t i = 0; i < x.size(); ++i) n.val[i] = x[i] * sv;
  check_result(id);
  return {id};
}

Var Tape::scale(Var a, real k) {
  int id = push(Op::kScale, dims_of(a), a.id, -1);
  Node& n = node(id);
  n.c = k;
  auto x = val_of(a.id);
  for (size_t i = 0; i < x.size(); ++i) n.val[i] = x[i] * k;
  check_result(id);
  return {id};
}

Var Tape::tanh(Var a) {
  int id = push(Op::kTanh, dims_of(a), a.id, -1);
  Node& n = node(id);
  auto x = val_of(a.id);
  for (size_t i = 0; i < x.size(); ++i) n.val[i] = std::tanh(x[i]);
  check_result(id);
  return {id};
}

Var Tape::sigmoid(Var a) {
  int id = push(Op::kSigmoid, dims_of(a), a.id, -1);
  Node& n = node(id);
  auto x = val_of(a.id);
  for (size_t i = 0; i < x.size(); ++i) {
    real xi = x[i];
    // Evaluate from the non-overflowing side.
    n.val[i] = xi >= 0 ? 1 / (1 + std::exp(-xi))
                       : std::exp(xi) / (1 + std::exp(xi));
  }
  check_result(id);
  return {id};
}

Var Tape::exp(Var a) {
  int id = push(Op::kExp, dims_of(a), a.id, -1);
  Node& n = node(id);
  auto x = val_of(a.id);
  for (size_t i = 0; i < x.size(); ++i) n.val[i] = std::exp(x[i]);
  check_result(id);
  return {id};
}

Var Tape::log(Var a) {
  int id = push(Op::kLog, dims_of(a), a.id, -1);
  Node& n = node(id);
  auto x = val_of(a.id);
  for (size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0)) throw DomainError("log: non-positive operand");
    n.val[i] = std::log(x[i]);
  }
  check_result(id);
  return {id};
}

Var Tape::softmax_masked(Var logits, const std::vector<uint8_t>& mask) {
  const std::vector<int>& d = dims_of(logits);
  if (d.size() != 1) throw ShapeError("softmax_masked: expects 1-D, got " + shape_str(d));
  if (mask.size() != static_cast<size_t>(d[0]))
    throw ShapeError("softmax_masked: mask length " + std::to_string(mask.size()) +
                     " vs logits " + shape_str(d));
  bool any = false;
  for (uint8_t m : mask) any = any || (m != 0);
  if (!any) throw DomainError("softmax_masked: empty window (all-false mask)");
  int id = push(Op::kSoftmaxMasked, d, logits.id, -1);
  Node& n = node(id);
  n.aux.assign(mask.begin(), mask.end());
  auto x = val_of(logits.id);
  real mx = -kInf;
  for (size_t i = 0; i < x.size(); ++i)
    if (mask[i] && x[i] > mx) mx = x[i];
  real z = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    if (mask[i]) {
      n.val[i] = std::exp(x[i] - mx);
      z += n.val[i];
    } else {
      n.val[i] = 0;
    }
  }
  for (size_t i = 0; i < x.size(); ++i)
    if (mask[i]) n.val[i] /= z;
  check_result(id);
  return {id};
}

Var Tape::softmax(Var logits) {
  const std::vector<int>& d = dims_of(logits);
  if (d.size() != 1) throw ShapeError("softmax: expects 1-D, got " + shape_str(d));
  return softmax_masked(logits, std::vector<uint8_t>(static_cast<size_t>(d[0]), 1));
}

Var Tape::concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const std::vector<int>& d0 = dims_of(parts[0]);
  int rank = static_cast<int>(d0.size());
  if (axis < 0 || axis >= rank || rank > 2)
    throw ShapeError("concat: bad axis " + std::to_string(axis) + " for " + shape_str(d0));
  std::vector<int> out = d0;
  out[axis] = 0;
  for (Var p : parts) {
    const std::vector<int>& dp = dims_of(p);
    if (static_cast<int>(dp.size()) != rank)
      throw ShapeError("concat: rank mismatch " + shape_str(d0) + " vs " + shape_str(dp));
    for (int ax = 0; ax < rank; ++ax)
      if (ax != axis && dp[ax] != d0[ax])
        throw ShapeError("concat: shapes disagree off axis: " + shape_str(d0) + " vs " +
                         shape_str(dp));
    out[axis] += dp[axis];
  }
  int id = push(Op::kConcat, out, -1, -1);
  Node& n = node(id);
  n.i0 = axis;
  n.aux.reserve(parts.size());
  bool ng = false;
  for (Var p : parts) {
    n.aux.push_back(p.id);
    ng = ng || wants_grad(p.id);
  }
  n.needs_grad = ng;
  if (axis == 0 || rank == 1) {
    size_t off = 0;
    for (Var p : parts) {
      auto x = val_of(p.id);
      std::copy(x.begin(), x.end(), n.val.begin() + static_cast<long>(off));
      off += x.size();
    }
  } else {  // axis == 1, rank 2
    int rows = out[0], cols = out[1];
    int coff = 0;
    for (Var p : parts) {
      auto x = val_of(p.id);
      int pc = dims_of(p)[1];
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < pc; ++j)
          n.val[static_cast<size_t>(i) * cols + coff + j] = x[static_cast<size_t>(i) * pc + j];
      coff += pc;
    }
  }
  check_result(id);
  return {id};
}

Var Tape::concat(Var a, Var b, int axis) {
  Var parts[2] = {a, b};
  return concat(std::span<const Var>(parts, 2), axis);
}

Var Tape::slice(Var a, int axis, int begin, int end) {
  const std::vector<int>& d = dims_of(a);
  int rank = static_cast<int>(d.size());
  if (axis < 0 || axis >= rank)
    throw ShapeError("slice: bad axis " + std::to_string(axis) + " for " + shape_str(d));
  if (begin < 0 || end > d[axis] || begin >= end)
    throw ShapeError("slice: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") for " + shape_str(d));
  std::vector<int> out = d;
  out[axis] = end - begin;
  int rows0 = d[0];
  int cols0 = rank == 2 ? d[1] : 1;  // push() may invalidate d
  int id = push(Op::kSlice, std::move(out), a.id, -1);
  Node& n = node(id);
  n.i0 = axis; n.i1 = begin; n.i2 = end;
  auto x = val_of(a.id);
  if (axis == 0 && rank == 1) {
    std::copy(x.begin() + begin, x.begin() + end, n.val.begin());
  } else if (axis == 0) {
    int cols = cols0;
    std::copy(x.begin() + static_cast<long>(begin) * cols,
              x.begin() + static_cast<long>(end) * cols, n.val.begin());
  } else {
    int cols = cols0, w = end - begin;
    for (int i = 0; i < rows0; ++i)
      std::copy(x.begin() + static_cast<long>(i) * cols + begin,
                x.begin() + static_cast<long>(i) * cols + end,
                n.val.begin() + static_cast<long>(i) * w);
  }
  check_result(id);
  return {id};
}

Var Tape::reshape(Var a, std::vector<int> dims) {
  if (shape_size(dims) != static_cast<int64_t>(val_of(a.id).size()))
    throw ShapeError("reshape: " + shape_str(dims_of(a)) + " -> " + shape_str(dims));
  int id = push(Op::kReshape, std::move(dims), a.id, -1);
  Node& n = node(id);
  auto x = val_of(a.id);
  std::copy(x.begin(), x.end(), n.val.begin());
  return {id};
}

Var Tape::embed_rows(Var table, std::span<const int> ids) {
  const std::vector<int>& d = dims_of(table);
  if (d.size() != 2) throw ShapeError("embed_rows: table must be 2-D, got " + shape_str(d));
  if (ids.empty()) throw ShapeError("embed_rows: no ids");
  for (int v : ids)
    if (v < 0 || v >= d[0])
      throw DomainError("embed_rows: id " + std::to_string(v) + " outside [0," +
                        std::to_string(d[0]) + ")");
  int cols = d[1];  // push() may invalidate d
  int id = push(Op::kEmbedRows, {static_cast<int>(ids.size()), cols}, table.id, -1);
  Node& n = node(id);
  n.aux.assign(ids.begin(), ids.end());
  auto x = val_of(table.id);
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(x.begin() + static_cast<long>(ids[i]) * cols,
              x.begin() + static_cast<long>(ids[i] + 1) * cols,
              n.val.begin() + static_cast<long>(i) * cols);
  check_result(id);
  return {id};
}

Var Tape::sum(Var a) {
  int id = push(Op::kSum, {1}, a.id, -1);
  Node& n = node(id);
  real s = 0;
  for (real x : val_of(a.id)) s += x;
  n.val[0] = s;
  check_result(id);
  return {id};
}

Var Tape::dot(Var a, Var b) {
  const std::vector<int>& da = dims_of(a);
  if (da.size() != 1 || dims_of(b) != da)
    throw ShapeError("dot: expects equal 1-D shapes, got " + shape_str(da) + " vs " +
                     shape_str(dims_of(b)));
  int id = push(Op::kDot, {1}, a.id, b.id);
  Node& n = node(id);
  auto x = val_of(a.id); auto y = val_of(b.id);
  real s = 0;
  for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  n.val[0] = s;
  check_result(id);
  return {id};
}

Var Tape::cross_entropy_logits(Var logits, int gold) {
  const std::vector<int>& d = dims_of(logits);
  if (d.size() != 1) throw ShapeError("cross_entropy_logits: expects 1-D, got " + shape_str(d));
  if (gold < 0 || gold >= d[0])
    throw DomainError("cross_entropy_logits: gold id " + std::to_string(gold) +
                      " outside [0," + std::to_string(d[0]) + ")");
  int id = push(Op::kCeLogits, {1}, logits.id, -1);
  Node& n = node(id);
  n.i0 = gold;
  auto x = val_of(logits.id);
  real mx = x[0];
  for (real xi : x) mx = std::max(mx, xi);
  real z = 0;
  for (real xi : x) z += std::exp(xi - mx);
  n.val[0] = (mx + std::log(z)) - x[static_cast<size_t>(gold)];
  check_result(id);
  return {id};
}

void Tape::backward(Var out, real seed) {
  if (!grad_enabled)
    throw DomainError("backward: tape recorded with grad_enabled = false");
  const Node& o = node(out.id);
  if (shape_size(o.dims) != 1)
    throw ShapeError("backward: output must be scalar, got " + shape_str(o.dims));
  if (!o.needs_grad) return;
  real* g = grad_ptr(out.id);
  g[0] += seed;
  for (int id = out.id; id >= 0; --id) {
    Node& n = node(id);
    if (!n.needs_grad || n.op == Op::kLeaf || n.op == Op::kConst) continue;
    if (n.grad.empty()) continue;  // never received a contribution
    backward_node(id);
  }
}

void Tape::backward_node(int id) {
  Node& n = node(id);
  const real* g = n.grad.data();
  size_t sz = n.grad.size();
  auto acc = [&](int op) -> real* { return wants_grad(op) ? grad_ptr(op) : nullptr; };
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConst:
      break;
    case Op::kMatMul: {
      int m = n.i0, k = n.i1, nn = n.i2;
      const real* A = val_of(n.a).data();
      const real* B = val_of(n.b).data();
      if (real* dA = acc(n.a)) {
        // dA[i,l] += sum_j g[i,j] * B[l,j]
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            const real* grow = g + static_cast<int64_t>(i) * nn;
            const real* brow = B + static_cast<int64_t>(l) * nn;
            real s = 0;
            for (int j = 0; j < nn; ++j) s += grow[j] * brow[j];
            dA[static_cast<int64_t>(i) * k + l] += s;
          }
      }
      if (real* dB = acc(n.b)) {
        // dB[l,j] += sum_i A[i,l] * g[i,j]
        for (int i = 0; i < m; ++i) {
          const real* arow = val_of(n.a).data() + static_cast<int64_t>(i) * k;
          const real* grow = g + static_cast<int64_t>(i) * nn;
          for (int l = 0; l < k; ++l) {
            real a = arow[l];
            real* drow = dB + static_cast<int64_t>(l) * nn;
            for (int j = 0; j < nn; ++j) drow[j] += a * grow[j];
          }
        }
      }
      (void)A;
      break;
    }
    case Op::kMatMulBT: {
      // C = A B^T with A [m,k], B [n,k]: dA += G B, dB += G^T A.
      int m = n.i0, k = n.i1, nn = n.i2;
      const real* B = val_of(n.b).data();
      if (real* dA = acc(n.a)) {
        for (int i = 0; i < m; ++i) {
          const real* grow = g + static_cast<int64_t>(i) * nn;
          real* drow = dA + static_cast<int64_t>(i) * k;
          for (int j = 0; j < nn; ++j) {
            real gv = grow[j];
            const real* brow = B + static_cast<int64_t>(j) * k;
            for (int kk = 0; kk < k; ++kk) drow[kk] += gv * brow[kk];
          }
        }
      }
      if (real* dB = acc(n.b)) {
        const real* A = val_of(n.a).data();
        for (int i = 0; i < m; ++i) {
          const real* grow = g + static_cast<int64_t>(i) * nn;
          const real* arow = A + static_cast<int64_t>(i) * k;
          for (int j = 0; j < nn; ++j) {
            real gv = grow[j];
            real* drow = dB + static_cast<int64_t>(j) * k;
            for (int kk = 0; kk < k; ++kk) drow[kk] += gv * arow[kk];
          }
        }
      }
      break;
    }
    case Op::kAdd: {
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i];
      if (real* db = acc(n.b))
        for (size_t i = 0; i < sz; ++i) db[i] += g[i];
      break;
    }
    case Op::kSub: {
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i];
      if (real* db = acc(n.b))
        for (size_t i = 0; i < sz; ++i) db[i] -= g[i];
      break;
    }
    case Op::kMul: {
      auto x = val_of(n.a); auto y = val_of(n.b);
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i] * y[i];
      if (real* db = acc(n.b))
        for (size_t i = 0; i < sz; ++i) db[i] += g[i] * x[i];
      break;
    }
    case Op::kAddRow: {
      int rows = n.dims[0], cols = n.dims[1];
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i];
      if (real* dr = acc(n.b))
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) dr[j] += g[static_cast<size_t>(i) * cols + j];
      break;
    }
    case Op::kSubBcast: {
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i];
      if (real* ds = acc(n.b)) {
        real s = 0;
        for (size_t i = 0; i < sz; ++i) s += g[i];
        ds[0] -= s;
      }
      break;
    }
    case Op::kMulBcast: {
      auto x = val_of(n.a);
      real sv = val_of(n.b)[0];
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i] * sv;
      if (real* ds = acc(n.b)) {
        real s = 0;
        for (size_t i = 0; i < sz; ++i) s += g[i] * x[i];
        ds[0] += s;
      }
      break;
    }
    case Op::kScale: {
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i] * n.c;
      break;
    }
    case Op::kTanh: {
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i] * (1 - n.val[i] * n.val[i]);
      break;
    }
    case Op::kSigmoid: {
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i] * n.val[i] * (1 - n.val[i]);
      break;
    }
    case Op::kExp: {
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i] * n.val[i];
      break;
    }
    case Op::kLog: {
      auto x = val_of(n.a);
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i] / x[i];
      break;
    }
    case Op::kSoftmaxMasked: {
      if (real* da = acc(n.a)) {
        real dotgy = 0;
        for (size_t i = 0; i < sz; ++i)
          if (n.aux[i]) dotgy += g[i] * n.val[i];
        for (size_t i = 0; i < sz; ++i)
          if (n.aux[i]) da[i] += n.val[i] * (g[i] - dotgy);
      }
      break;
    }
    case Op::kConcat: {
      int axis = n.i0;
      int rank = static_cast<int>(n.dims.size());
      if (axis == 0 || rank == 1) {
        size_t off = 0;
        for (int pid : n.aux) {
          size_t psz = val_of(pid).size();
          if (real* dp = acc(pid))
            for (size_t i = 0; i < psz; ++i) dp[i] += g[off + i];
          off += psz;
        }
      } else {
        int rows = n.dims[0], cols = n.dims[1];
        int coff = 0;
        for (int pid : n.aux) {
          int pc = node(pid).op == Op::kLeaf ? node(pid).external->cols()
                                             : node(pid).dims[1];
          if (real* dp = acc(pid))
            for (int i = 0; i < rows; ++i)
              for (int j = 0; j < pc; ++j)
                dp[static_cast<size_t>(i) * pc + j] +=
                    g[static_cast<size_t>(i) * cols + coff + j];
          coff += pc;
        }
      }
      break;
    }
    case Op::kSlice: {
      real* da = acc(n.a);
      if (!da) break;
      const std::vector<int>& d = node(n.a).op == Op::kLeaf ? node(n.a).external->dims
                                                            : node(n.a).dims;
      int axis = n.i0, begin = n.i1, end = n.i2;
      if (axis == 0 && d.size() == 1) {
        for (int i = begin; i < end; ++i) da[i] += g[i - begin];
      } else if (axis == 0) {
        int cols = d[1];
        for (size_t i = 0; i < sz; ++i) da[static_cast<size_t>(begin) * cols + i] += g[i];
      } else {
        int cols = d[1], w = end - begin;
        for (int i = 0; i < d[0]; ++i)
          for (int j = 0; j < w; ++j)
            da[static_cast<size_t>(i) * cols + begin + j] += g[static_cast<size_t>(i) * w + j];
      }
      break;
    }
    case Op::kReshape: {
      if (real* da = acc(n.a))
        for (size_t i = 0; i < sz; ++i) da[i] += g[i];
      break;
    }
    case Op::kEmbedRows: {
      real* dt = acc(n.a);
      if (!dt) break;
      int cols = n.dims[1];
      for (size_t i = 0; i < n.aux.size(); ++i) {
        real* drow = dt + static_cast<int64_t>(n.aux[i]) * cols;
        const real* grow = g + static_cast<int64_t>(i) * cols;
        for (int j = 0; j < cols; ++j) drow[j] += grow[j];
      }
      break;
    }
    case Op::kSum: {
      if (real* da = acc(n.a)) {
        size_t asz = val_of(n.a).size();
        for (size_t i = 0; i < asz; ++i) da[i] += g[0];
      }
      break;
    }
    case Op::kDot: {
      auto x = val_of(n.a); auto y = val_of(n.b);
      if (real* da = acc(n.a))
        for (size_t i = 0; i < x.size(); ++i) da[i] += g[0] * y[i];
      if (real* db = acc(n.b))
        for (size_t i = 0; i < x.size(); ++i) db[i] += g[0] * x[i];
      break;
    }
    case Op::kCeLogits: {
      real* da = acc(n.a);
      if (!da) break;
      auto x = val_of(n.a);
      real mx = x[0];
      for (real xi : x) mx = std::max(mx, xi);
      real z = 0;
      for (real xi : x) z += std::exp(xi - mx);
      for (size_t i = 0; i < x.size(); ++i) {
        real p = std::exp(x[i] - mx) / z;
        da[i] += g[0] * (p - (static_cast<int>(i) == n.i0 ? 1 : 0));
      }
      break;
    }
  }
}

real grad_check(const std::function<Var(Tape&)>& build,
                std::span<Tensor* const> leaves, real h) {
  Tape tape;
  Var out = build(tape);
  for (Tensor* t : leaves) {
    t->ensure_grad();
    t->zero_grad();
  }
  tape.backward(out);
  std::vector<std::vector<real>> analytic;
  analytic.reserve(leaves.size());
  for (Tensor* t : leaves) analytic.push_back(t->g);

  Tape scratch;
  auto eval = [&]() {
    scratch.reset();
    scratch.grad_enabled = false;
    return scratch.scalar_val(build(scratch));
  };
  real worst = 0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor* t = leaves[li];
    for (size_t i = 0; i < t->v.size(); ++i) {
      real orig = t->v[i];
      t->v[i] = orig + h;
      real fp = eval();
      t->v[i] = orig - h;
      real fm = eval();
      t->v[i] = orig;
      real numeric = (fp - fm) / (2 * h);
      real a = analytic[li][i];
      real denom = std::max(real(1), std::max(std::abs(a), std::abs(numeric)));
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace flexattn
