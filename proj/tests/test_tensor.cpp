#include "doctest.h"

#include <cmath>

#include "kpreid/autodiff.hpp"
#include "kpreid/rng.hpp"
#include "kpreid/tensor.hpp"

using namespace kpr;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, bool requires_grad = false) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from_data(std::move(shape), std::move(v), DType::f64, requires_grad);
}

}  // namespace

TEST_CASE("matmul basics") {
  Tape t(false);
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4}, DType::f64);
  Tensor c = t.matmul(Tensor::identity(2), a);
  CHECK(c.data() == std::vector<double>{1, 2, 3, 4});

  Tensor sel = t.matmul(Tensor::from_data({1, 2}, {1, 0}, DType::f64),
                        Tensor::from_data({2, 1}, {5, 7}, DType::f64));
  CHECK(sel.value() == 5.0);

  CHECK_THROWS_AS(t.matmul(Tensor::zeros({2, 3}, DType::f64), Tensor::zeros({2, 3}, DType::f64)),
                  DimensionError);
  CHECK_THROWS_WITH_AS(
      t.matmul(Tensor::zeros({2, 3}, DType::f64), Tensor::zeros({2, 3}, DType::f64)),
      doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(11);
  Tape t(false);
  Tensor a = random_tensor(rng, {4, 3});
  Tensor b = random_tensor(rng, {3, 5});
  Tensor c = t.matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 3; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(std::abs(c.at(i, j) - acc) < 1e-12);
    }
}

TEST_CASE("matmul associativity on random triples") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tape t(false);
    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {4, 5});
    Tensor c = random_tensor(rng, {5, 2});
    Tensor lhs = t.matmul(t.matmul(a, b), c);
    Tensor rhs = t.matmul(a, t.matmul(b, c));
    for (std::size_t i = 0; i < lhs.size(); ++i)
      CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) < 1e-9);
  }
}

TEST_CASE("softmax") {
  Tape t(false);
  Tensor s = t.softmax(Tensor::from_data({2}, {0, 0}, DType::f64));
  CHECK(s.at(0) == doctest::Approx(0.5));
  CHECK(s.at(1) == doctest::Approx(0.5));

  Tensor big = t.softmax(Tensor::from_data({2}, {1000, 0}, DType::f64));
  CHECK(std::abs(big.at(0) - 1.0) < 1e-12);
  CHECK(std::abs(big.at(1)) < 1e-12);

  Rng rng(3);
  Tensor r = t.softmax(random_tensor(rng, {7}));
  double sum = 0.0;
  for (double v : r.data()) {
    CHECK(v > 0.0);
    sum += v;
  }
  CHECK(std::abs(sum - 1.0) < 1e-12);
}

TEST_CASE("softmax invariant to constant shifts") {
  Rng rng(17);
  Tape t(false);
  Tensor x = random_tensor(rng, {4, 6});
  Tensor shifted = t.add_const(x, 3.75);
  Tensor a = t.softmax(x);
  Tensor b = t.softmax(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-12);
}

TEST_CASE("layer_norm") {
  Tape t(false);
  Tensor gain = Tensor::full({3}, 1.0, DType::f64);
  Tensor bias = Tensor::zeros({3}, DType::f64);

  Tensor constant = t.layer_norm(Tensor::full({3}, 5.0, DType::f64), gain, bias, 1e-5);
  for (double v : constant.data()) CHECK(std::abs(v) < 1e-9);

  Tensor g2 = Tensor::full({2}, 1.0, DType::f64);
  Tensor b2 = Tensor::zeros({2}, DType::f64);
  Tensor pm = t.layer_norm(Tensor::from_data({2}, {1, -1}, DType::f64), g2, b2, 0.0);
  CHECK(pm.at(0) == doctest::Approx(1.0));
  CHECK(pm.at(1) == doctest::Approx(-1.0));

  Rng rng(9);
  Tensor gd = Tensor::full({16}, 1.0, DType::f64);
  Tensor bd = Tensor::zeros({16}, DType::f64);
  Tensor y = t.layer_norm(random_tensor(rng, {16}), gd, bd, 0.0);
  double mu = 0.0, var = 0.0;
  for (double v : y.data()) mu += v;
  mu /= 16.0;
  for (double v : y.data()) var += (v - mu) * (v - mu);
  var /= 16.0;
  CHECK(std::abs(mu) < 1e-9);
  CHECK(std::abs(var - 1.0) < 1e-9);
}

TEST_CASE("backward basics") {
  Tensor w = Tensor::from_data({3}, {2, -1, 4}, DType::f64, true);
  {
    Tape t;
    Tensor loss = t.sum(w);
    t.backward(loss);
    CHECK(t.grad(w).data() == std::vector<double>{1, 1, 1});
  }
  {
    Tape t;
    Tensor loss = t.scale(t.sum(t.mul(w, w)), 0.5);
    t.backward(loss);
    CHECK(t.grad(w).data() == std::vector<double>{2, -1, 4});
  }
}

TEST_CASE("backward is deterministic across fresh tapes") {
  Rng rng(23);
  Tensor a = random_tensor(rng, {4, 4}, true);
  Tensor b = random_tensor(rng, {4, 4}, true);
  auto run = [&]() {
    Tape t;
    Tensor loss = t.sum(t.gelu(t.matmul(a, t.softmax(b))));
    t.backward(loss);
    return std::make_pair(t.grad(a).data(), t.grad(b).data());
  };
  auto first = run();
  auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}

TEST_CASE("backward contract") {
  Tensor w = Tensor::from_data({2}, {1, 2}, DType::f64, true);
  Tape t;
  Tensor y = t.mul(w, w);
  CHECK_THROWS_AS(t.backward(y), ContractError);

  // non-participating leaves receive zero
  Tensor unused = Tensor::from_data({2}, {3, 4}, DType::f64, true);
  Tape t2;
  Tensor loss = t2.sum(w);
  t2.backward(loss);
  CHECK(t2.grad(unused).data() == std::vector<double>{0, 0});
}

TEST_CASE("gradients accumulate when a value feeds multiple consumers") {
  Tensor w = Tensor::from_data({1}, {3.0}, DType::f64, true);
  Tape t;
  Tensor loss = t.sum(t.add(t.mul(w, w), w));  // w^2 + w -> 2w + 1 = 7
  t.backward(loss);
  CHECK(t.grad(w).value() == doctest::Approx(7.0));
}

TEST_CASE("finite_diff_check examples") {
  Tensor w = Tensor::from_data({1}, {3.0}, DType::f64, true);
  double err = finite_diff_check(
      [&](Tape& t) { return t.sum(t.mul(w, w)); }, {w}, 1e-5);
  CHECK(err < 1e-9);

  Rng rng(7);
  Tensor v = random_tensor(rng, {6}, true);
  double err2 = finite_diff_check([&](Tape& t) { return t.sum(t.sin_op(v)); }, {v}, 1e-5);
  CHECK(err2 < 1e-6);
  // closed-form oracle: d/dx sum(sin(x)) = cos(x)
  {
    Tape t;
    Tensor loss = t.sum(t.sin_op(v));
    t.backward(loss);
    Tensor g = t.grad(v);
    for (std::size_t i = 0; i < v.size(); ++i)
      CHECK(g.at(i) == doctest::Approx(std::cos(v.at(i))).epsilon(1e-12));
  }

  Tensor c = Tensor::from_data({2}, {1, 2}, DType::f64, true);
  double err3 = finite_diff_check(
      [&](Tape& t) { return t.scale(t.sum(c), 0.0); }, {c}, 1e-5);
  CHECK(err3 == 0.0);
}

TEST_CASE("every differentiable op passes a finite-difference check in isolation") {
  Rng rng(41);
  const double h = 1e-5;
  const double tol = 1e-5;

  Tensor a = random_tensor(rng, {3, 4}, true);
  Tensor b = random_tensor(rng, {4, 5}, true);
  CHECK(finite_diff_check([&](Tape& t) { return t.sum(t.matmul(a, b)); }, {a, b}, h) < tol);

  Tensor c = random_tensor(rng, {3, 4}, true);
  CHECK(finite_diff_check([&](Tape& t) { return t.sum(t.mul(t.add(a, c), t.sub(a, c))); }, {a, c},
                          h) < tol);

  Tensor bias = random_tensor(rng, {4}, true);
  CHECK(finite_diff_check([&](Tape& t) { return t.sum(t.gelu(t.add_bias(a, bias))); }, {a, bias},
                          h) < tol);

  Tensor probe = random_tensor(rng, {3, 4}, false);
  CHECK(finite_diff_check(
            [&](Tape& t) { return t.sum(t.mul(t.softmax(t.scale(a, 2.0)), probe)); }, {a}, h) <
        tol);

  Tensor gain = random_tensor(rng, {4}, true);
  Tensor lnb = random_tensor(rng, {4}, true);
  CHECK(finite_diff_check(
            [&](Tape& t) { return t.sum(t.mul(t.layer_norm(a, gain, lnb, 1e-5), a)); },
            {a, gain, lnb}, h) < tol);

  CHECK(finite_diff_check(
            [&](Tape& t) { return t.sum(t.mul(t.l2_normalize_rows(a, 1e-8), c)); }, {a}, h) < tol);

  CHECK(finite_diff_check(
            [&](Tape& t) { return t.sum(t.slice_cols(t.transpose(t.slice_rows(a, 1, 3)), 0, 2)); },
            {a}, h) < tol);

  Tensor flat = random_tensor(rng, {30}, true);
  CHECK(finite_diff_check(
            [&](Tape& t) {
              return t.sum(t.concat_cols({t.concat_rows({a, c}), t.reshape(flat, {6, 5})}));
            },
            {a, flat, c}, h) < tol);

  CHECK(finite_diff_check(
            [&](Tape& t) { return t.sum(t.scale_rows(a, {0.0, 1.0, 0.5})); }, {a}, h) < tol);

  Tensor sq = random_tensor(rng, {5}, true);
  CHECK(finite_diff_check(
            [&](Tape& t) { return t.sum(t.sqrt_op(t.add_const(t.mul(sq, sq), 0.1))); }, {sq}, h) <
        tol);

  Tensor logits = random_tensor(rng, {4, 6}, true);
  std::vector<std::size_t> labels{0, 3, 5, 2};
  CHECK(finite_diff_check([&](Tape& t) { return t.cross_entropy(logits, labels); }, {logits}, h) <
        tol);

  Tensor cosines = Tensor::from_data(
      {2, 3}, {0.4, -0.2, 0.1, 0.7, 0.3, -0.5}, DType::f64, true);
  std::vector<std::size_t> arc_labels{1, 0};
  CHECK(finite_diff_check(
            [&](Tape& t) {
              return t.cross_entropy(t.scale(t.arcface_adjust(cosines, arc_labels, 0.3), 8.0),
                                     arc_labels);
            },
            {cosines}, h) < tol);

  Tensor rl = random_tensor(rng, {8}, true);
  CHECK(finite_diff_check(
            [&](Tape& t) { return t.sum(t.relu(t.add_const(rl, 0.05))); }, {rl}, h) < tol);
}

TEST_CASE("f32 tensors round through float precision") {
  double v = 0.1;  // not representable in f32
  Tensor t32 = Tensor::from_data({1}, {v}, DType::f32);
  CHECK(t32.value() == static_cast<double>(static_cast<float>(v)));
  Tensor t64 = Tensor::from_data({1}, {v}, DType::f64);
  CHECK(t64.value() == v);
}
