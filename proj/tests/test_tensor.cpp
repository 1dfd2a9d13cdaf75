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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "flexattn/tensor.hpp"

using namespace flexattn;

namespace {

// Reference softmax used as the independent oracle in several tests.
std::vector<double> brute_softmax(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double z = 0;
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) z += std::exp(x[i] - mx);
  for (size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i] - mx) / z;
  return out;
}

Tensor random_tensor(std::vector<int> dims, Rng& rng, real lo = -1, real hi = 1) {
  Tensor t = Tensor::zeros(std::move(dims));
  for (real& x : t.v) x = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul forward") {
  Tape tape;
  Var eye = tape.constant({2, 2}, {1, 0, 0, 1});
  Var m = tape.constant({2, 2}, {1, 2, 3, 4});
  Var r = tape.matmul(eye, m);
  auto v = tape.val(r);
  CHECK(v[0] == 1);
  CHECK(v[1] == 2);
  CHECK(v[2] == 3);
  CHECK(v[3] == 4);

  Var a = tape.constant({1, 2}, {1, 2});
  Var b = tape.constant({2, 1}, {3, 4});
  CHECK(tape.val(tape.matmul(a, b))[0] == doctest::Approx(11).epsilon(1e-15));
}

TEST_CASE("matmul shape errors name both dims") {
  Tape tape;
  Var a = tape.constant({2, 3}, std::vector<real>(6, 0));
  Var b = tape.constant({4, 5}, std::vector<real>(20, 0));
  try {
    tape.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
}

TEST_CASE("matmul backward matches hand result and finite differences") {
  Tensor a({1, 2}, {1, 2});
  Tensor b({2, 1}, {3, 4});
  {
    Tape tape;
    Var out = tape.sum(tape.matmul(tape.leaf(a), tape.leaf(b)));
    a.ensure_grad();
    b.ensure_grad();
    tape.backward(out);
    CHECK(a.g[0] == doctest::Approx(3).epsilon(1e-12));
    CHECK(a.g[1] == doctest::Approx(4).epsilon(1e-12));
  }
  Tensor* leaves[] = {&a, &b};
  real err = grad_check(
      [&](Tape& t) { return t.sum(t.matmul(t.leaf(a), t.leaf(b))); }, leaves);
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise basics") {
  Tape tape;
  CHECK(tape.val(tape.tanh(tape.scalar(0)))[0] == 0);
  CHECK(tape.val(tape.sigmoid(tape.scalar(0)))[0] == doctest::Approx(0.5).epsilon(1e-15));
  Var e = tape.exp(tape.constant({2}, {0, std::log(real(2))}));
  CHECK(tape.val(e)[0] == doctest::Approx(1).epsilon(1e-12));
  CHECK(tape.val(e)[1] == doctest::Approx(2).epsilon(1e-12));
}

TEST_CASE("log of non-positive value is a domain error") {
  Tape tape;
  CHECK_THROWS_AS(tape.log(tape.scalar(0)), DomainError);
  CHECK_THROWS_AS(tape.log(tape.scalar(-1)), DomainError);
}

TEST_CASE("non-finite results are rejected, never propagated") {
  Tape tape;
  CHECK_THROWS_AS(tape.exp(tape.scalar(1e9)), NumericError);
  CHECK_THROWS_AS(Tensor({1}, {std::numeric_limits<real>::quiet_NaN()}), NumericError);
}

TEST_CASE("softmax_masked") {
  Tape tape;
  SUBCASE("uniform") {
    Var y = tape.softmax(tape.constant({3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i)
      CHECK(tape.val(y)[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  }
  SUBCASE("masked symmetry") {
    Var y = tape.softmax_masked(tape.constant({3}, {0, 0, 0}), {1, 0, 1});
    CHECK(tape.val(y)[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(tape.val(y)[1] == 0);
    CHECK(tape.val(y)[2] == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("values against brute force") {
    auto expect = brute_softmax({1, 2, 3});
    Var y = tape.softmax(tape.constant({3}, {1, 2, 3}));
    for (int i = 0; i < 3; ++i)
      CHECK(tape.val(y)[i] == doctest::Approx(expect[i]).epsilon(1e-14));
    // Frozen from the brute-force oracle.
    CHECK(tape.val(y)[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
    CHECK(tape.val(y)[1] == doctest::Approx(0.24472847105479767).epsilon(1e-12));
    CHECK(tape.val(y)[2] == doctest::Approx(0.66524095577482178).epsilon(1e-12));
  }
  SUBCASE("all-false mask is an empty-window error") {
    CHECK_THROWS_AS(tape.softmax_masked(tape.constant({2}, {0, 0}), {0, 0}), DomainError);
  }
}

TEST_CASE("softmax sums to one for extreme logits") {
  Rng rng(11);
  for (int it = 0; it < 200; ++it) {
    Tape tape;
    int n = 1 + rng.uniform_int(8);
    std::vector<real> logits(n);
    std::vector<uint8_t> mask(n, 0);
    for (int i = 0; i < n; ++i) {
      logits[i] = rng.uniform(-50, 50);
      mask[i] = rng.bernoulli(0.7) ? 1 : 0;
    }
    mask[rng.uniform_int(n)] = 1;
    Var y = tape.softmax_masked(tape.constant({n}, logits), mask);
    real s = 0;
    bool shifted = false;
    for (int i = 0; i < n; ++i) {
      s += tape.val(y)[i];
      if (!mask[i]) CHECK(tape.val(y)[i] == 0);
      shifted = shifted || tape.val(y)[i] > 0;
    }
    CHECK(shifted);
    CHECK(std::abs(s - 1) < 1e-12);
  }
}

TEST_CASE("softmax shift invariance") {
  Rng rng(5);
  for (int it = 0; it < 50; ++it) {
    Tape tape;
    int n = 2 + rng.uniform_int(6);
    std::vector<real> logits(n);
    for (real& x : logits) x = rng.uniform(-5, 5);
    std::vector<real> shifted = logits;
    real c = rng.uniform(-10, 10);
    for (real& x : shifted) x += c;
    Var y0 = tape.softmax(tape.constant({n}, logits));
    Var y1 = tape.softmax(tape.constant({n}, shifted));
    for (int i = 0; i < n; ++i)
      CHECK(std::abs(tape.val(y0)[i] - tape.val(y1)[i]) < 1e-12);
  }
}

TEST_CASE("concat") {
  Tape tape;
  Var a = tape.constant({2}, {1, 2});
  Var b = tape.constant({1}, {3});
  Var c = tape.concat(a, b, 0);
  CHECK(tape.val(c)[0] == 1);
  CHECK(tape.val(c)[1] == 2);
  CHECK(tape.val(c)[2] == 3);

  Var m1 = tape.constant({2, 1}, {1, 2});
  Var m2 = tape.constant({2, 1}, {3, 4});
  Var m = tape.concat(m1, m2, 1);
  CHECK(tape.dims_of(m) == std::vector<int>{2, 2});
  CHECK(tape.val(m)[0] == 1);
  CHECK(tape.val(m)[1] == 3);
  CHECK(tape.val(m)[2] == 2);
  CHECK(tape.val(m)[3] == 4);

  Var bad = tape.constant({3, 1}, {1, 2, 3});
  CHECK_THROWS_AS(tape.concat(m1, bad, 1), ShapeError);
}

TEST_CASE("concat backward splits the gradient") {
  Tensor a({2}, {1, 2});
  Tensor b({3}, {3, 4, 5});
  Tape tape;
  Var out = tape.sum(tape.concat(tape.leaf(a), tape.leaf(b), 0));
  tape.backward(out);
  for (real g : a.g) CHECK(g == 1);
  for (real g : b.g) CHECK(g == 1);
}

TEST_CASE("slice and embed_rows round gradients back") {
  Rng rng(3);
  Tensor table = random_tensor({5, 3}, rng);
  std::vector<int> ids = {4, 0, 4};
  Tensor* leaves[] = {&table};
  real err = grad_check(
      [&](Tape& t) {
        Var rows = t.embed_rows(t.leaf(table), ids);
        Var mid = t.slice(rows, 1, 1, 3);
        return t.sum(t.tanh(mid));
      },
      leaves);
  CHECK(err < 1e-6);
  Tape tape;
  CHECK_THROWS_AS(tape.embed_rows(tape.leaf(table), std::vector<int>{5}), DomainError);
}

TEST_CASE("grad_check: sum has exact gradient") {
  Tensor x = Tensor::zeros({4});
  Tensor* leaves[] = {&x};
  real err = grad_check([&](Tape& t) { return t.sum(t.leaf(x)); }, leaves);
  CHECK(err == 0);  // x +- h is exact at x = 0, so the quotient is exactly 1

  Rng rng(7);
  Tensor y = random_tensor({4}, rng);
  Tensor* leaves2[] = {&y};
  real err2 = grad_check([&](Tape& t) { return t.sum(t.leaf(y)); }, leaves2);
  CHECK(err2 < 1e-9);
}

TEST_CASE("grad_check: tanh of a linear map") {
  Rng rng(17);
  Tensor w = random_tensor({4, 4}, rng);
  Tensor x = random_tensor({4}, rng);
  Tensor* leaves[] = {&w, &x};
  real err = grad_check(
      [&](Tape& t) { return t.sum(t.tanh(t.matmul(t.leaf(w), t.leaf(x)))); }, leaves);
  CHECK(err < 1e-6);
}

TEST_CASE("every primitive passes a finite-difference check") {
  Rng rng(23);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor v = random_tensor({2}, rng);
  Tensor s = random_tensor({1}, rng, 0.5, 1.5);
  Tensor pos = random_tensor({5}, rng, 0.1, 2.0);
  Tensor* leaves[] = {&a, &b, &v, &s, &pos};
  real err = grad_check(
      [&](Tape& t) {
        Var m = t.matmul(t.leaf(a), t.leaf(b));        // [3,2]
        Var r = t.add_row(m, t.leaf(v));               // [3,2]
        Var flat = t.reshape(t.tanh(r), {6});
        Var sm = t.softmax_masked(flat, {1, 1, 0, 1, 1, 1});
        Var p = t.leaf(pos);
        Var q = t.mul_bcast(t.sub_bcast(p, t.leaf(s)), t.leaf(s));
        Var lg = t.log(t.exp(t.scale(q, 0.3)));
        Var joined = t.concat(sm, lg, 0);              // [11]
        Var ce = t.cross_entropy_logits(joined, 2);
        Var d = t.dot(t.slice(joined, 0, 0, 3), t.slice(joined, 0, 3, 6));
        Var sg = t.sigmoid(t.sub(t.sum(t.mul(sm, sm)), d));
        return t.add(ce, sg);
      },
      leaves);
  CHECK(err < 1e-6);
}

TEST_CASE("backward accumulation is additive when a tensor is reused") {
  Rng rng(31);
  Tensor x = random_tensor({4}, rng);
  Tensor x1 = x;
  Tensor x2 = x;

  Tape tape;
  Var shared = tape.leaf(x);
  tape.backward(tape.sum(tape.mul(shared, shared)));

  Tape tape2;
  tape2.backward(tape2.sum(tape2.mul(tape2.leaf(x1), tape2.leaf(x2))));
  for (size_t i = 0; i < x.v.size(); ++i)
    CHECK(x.g[i] == doctest::Approx(x1.g[i] + x2.g[i]).epsilon(1e-14));
}

TEST_CASE("cross_entropy_logits matches log-softmax composition") {
  Rng rng(41);
  for (int it = 0; it < 20; ++it) {
    std::vector<real> logits(6);
    for (real& x : logits) x = rng.uniform(-8, 8);
    int gold = rng.uniform_int(6);
    Tape tape;
    Var ce = tape.cross_entropy_logits(tape.constant({6}, logits), gold);
    Var sm = tape.softmax(tape.constant({6}, logits));
    real expected = -std::log(tape.val(sm)[static_cast<size_t>(gold)]);
    CHECK(tape.scalar_val(ce) == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("tape reuse across resets keeps results correct") {
  Tensor x({2}, {1, 2});
  Tape tape;
  for (int it = 0; it < 3; ++it) {
    tape.reset();
    x.zero_grad();
    Var out = tape.sum(tape.mul(tape.leaf(x), tape.leaf(x)));
    tape.backward(out);
    CHECK(tape.scalar_val(out) == doctest::Approx(5).epsilon(1e-15));
    CHECK(x.g[0] == doctest::Approx(2).epsilon(1e-15));
    CHECK(x.g[1] == doctest::Approx(4).epsilon(1e-15));
  }
}
