// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "matml/tensor.hpp"

using namespace matml;
using namespace matml::testing;

TEST_CASE("elementwise add") {
  Tensor r = add(Tensor::vec({1, 2}), Tensor::vec({3, 4}));
  CHECK(r.data == std::vector<double>{4, 6});
}

TEST_CASE("matmul identity") {
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(7);
  Tensor a = random_tensor(rng, {3, 5});
  Tensor r = matmul(eye, a);
  CHECK(r.shape == a.shape);
  CHECK(max_abs_diff(r, a) == 0.0);
}

TEST_CASE("matmul transpose flags against explicit transpose") {
  Rng rng(11);
  Tensor a = random_tensor(rng, {4, 3});
  Tensor b = random_tensor(rng, {4, 5});
  // a^T b computed via flags vs. via materialized transpose
  Tensor at = Tensor::zeros({3, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) at.data[j * 4 + i] = a.at(i, j);
  CHECK(max_abs_diff(matmul(a, b, true, false), matmul(at, b)) < 1e-14);
}

TEST_CASE("scatter-add-rows equals dense adjacency product") {
  // Messages scattered into 5 node slots must match M^T @ msg where M is the
  // one-hot edge->node membership matrix.
  Rng rng(3);
  const std::size_t nodes = 5, edges = 12, width = 4;
  std::vector<std::int64_t> dst(edges);
  for (auto& d : dst) d = static_cast<std::int64_t>(rng.index(nodes));
  Tensor msg = random_tensor(rng, {edges, width});

  Tensor membership = Tensor::zeros({edges, nodes});
  for (std::size_t e = 0; e < edges; ++e)
    membership.data[e * nodes + static_cast<std::size_t>(dst[e])] = 1.0;
  Tensor dense = matmul(membership, msg, true, false);

  Tensor scattered = scatter_add_rows(msg, dst, static_cast<std::int64_t>(nodes));
  CHECK(all_close(scattered, dense, 0.0, 1e-12));
}

TEST_CASE("shape errors name the op and shapes") {
  CHECK_THROWS_WITH_AS(add(Tensor::vec({1, 2}), Tensor::vec({1, 2, 3})),
                       doctest::Contains("add"), Error);
  CHECK_THROWS_WITH_AS(add(Tensor::vec({1, 2}), Tensor::vec({1, 2, 3})),
                       doctest::Contains("(3)"), Error);
  CHECK_THROWS_WITH_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                       doctest::Contains("matmul"), Error);
  CHECK_THROWS_WITH_AS(sum_axis(Tensor::zeros({2, 3}), 2), doctest::Contains("unknown axis"),
                       Error);
}

TEST_CASE("grad of x*x") {
  Tape tape;
  Tensor x = tape.leaf(Tensor::scalar(3.0));
  Tensor y = multiply(x, x);
  auto g = grad(y, {x});
  CHECK(g[0].item() == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("second derivative of x^3") {
  Tape tape;
  Tensor x = tape.leaf(Tensor::scalar(2.0));
  Tensor y = multiply(multiply(x, x), x);
  auto g1 = grad(y, {x}, true);
  auto g2 = grad(g1[0], {x});
  CHECK(g2[0].item() == doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("grad errors") {
  Tape tape;
  Tensor x = tape.leaf(Tensor::vec({1, 2}));
  Tensor y = multiply(x, x);
  CHECK_THROWS_WITH_AS((void)grad(y, {x}), doctest::Contains("scalar"), Error);

  Tape other;
  Tensor z = other.leaf(Tensor::scalar(1.0));
  Tensor s = sum(y);
  CHECK_THROWS_WITH_AS((void)grad(s, {z}), doctest::Contains("tape"), Error);
  CHECK_THROWS_AS((void)multiply(x, z), Error);
}

TEST_CASE("unreachable wrt yields zeros") {
  Tape tape;
  Tensor x = tape.leaf(Tensor::scalar(3.0));
  Tensor unused = tape.leaf(Tensor::vec({1, 2, 3}));
  auto g = grad(multiply(x, x), {unused});
  CHECK(g[0].shape == unused.shape);
  for (double v : g[0].data) CHECK(v == 0.0);
}

TEST_CASE("two-layer relu network MAE gradient matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor x = random_tensor(rng, {6, 4});
    Tensor w1 = random_tensor(rng, {4, 8});
    Tensor b1 = random_tensor(rng, {8});
    Tensor w2 = random_tensor(rng, {8, 1});
    Tensor b2 = random_tensor(rng, {1});
    Tensor target = random_tensor(rng, {6, 1});

    auto net = [&](std::span<const Tensor> p) {
      Tensor h = relu(add(matmul(x, p[0]), p[1]));
      Tensor out = add(matmul(h, p[2]), p[3]);
      return mean(abs(subtract(out, target)));
    };
    CHECK(gradients_match_fd(net, {w1, b1, w2, b2}, 1e-5, 1e-7, 1e-5));
  }
}

TEST_CASE("finite difference basics") {
  auto sum_sq = [](const Tensor& t) {
    double s = 0;
    for (double v : t.data) s += v * v;
    return s;
  };
  Tensor fd = finite_difference(sum_sq, Tensor::vec({1, 2}), 1e-5);
  CHECK(fd.at(0) == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(fd.at(1) == doctest::Approx(4.0).epsilon(1e-8));

  Tensor zero = finite_difference([](const Tensor&) { return 42.0; }, Tensor::vec({1, 2, 3}), 1e-4);
  for (double v : zero.data) CHECK(v == 0.0);

  CHECK_THROWS_AS(finite_difference(sum_sq, Tensor::vec({1}), 0.0), Error);
}

TEST_CASE("finite difference agrees with grad on random polynomials") {
  // cross-check of the two derivative implementations
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x0 = random_tensor(rng, {5});
    Tensor c1 = random_tensor(rng, {5});
    Tensor c2 = random_tensor(rng, {5});
    auto poly = [&](const Tensor& x) {
      Tensor v = add(multiply(c2, multiply(x, x)), multiply(c1, x));
      return sum(v);
    };
    Tape tape;
    Tensor x = tape.leaf(x0);
    auto g = grad(poly(x), {x});
    Tensor fd = finite_difference([&](const Tensor& t) { return poly(t).item(); }, x0, 1e-5);
    CHECK(max_abs_diff(g[0], fd) < 1e-6);
  }
}

TEST_CASE("every differentiable primitive matches finite differences") {
  Rng rng(23);
  const double rtol = 1e-5, atol = 1e-7;

  auto weighted = [&](Tensor t, Tensor w) { return sum(multiply(t, w)); };

  SUBCASE("binary elementwise with broadcasting") {
    for (int trial = 0; trial < 5; ++trial) {
      Tensor a = random_tensor_away_from_zero(rng, {3, 4});
      Tensor b = random_tensor_away_from_zero(rng, {4});
      Tensor w = random_tensor(rng, {3, 4});
      auto mk = [&](Op kind) {
        return [&, kind](std::span<const Tensor> in) {
          const Tensor args[] = {in[0], in[1]};
          return weighted(apply_primitive(kind, args), w);
        };
      };
      for (Op kind : {Op::add, Op::subtract, Op::multiply, Op::divide})
        CHECK(gradients_match_fd(mk(kind), {a, b}, rtol, atol));
    }
  }

  SUBCASE("unary elementwise") {
    for (int trial = 0; trial < 5; ++trial) {
      Tensor a = random_tensor_away_from_zero(rng, {2, 6});
      Tensor pos = random_tensor(rng, {2, 6}, 0.3, 1.5);
      Tensor w = random_tensor(rng, {2, 6});
      auto mk = [&](Op kind) {
        return [&, kind](std::span<const Tensor> in) {
          const Tensor args[] = {in[0]};
          return weighted(apply_primitive(kind, args), w);
        };
      };
      for (Op kind : {Op::negate, Op::abs, Op::square, Op::exp, Op::relu})
        CHECK(gradients_match_fd(mk(kind), {a}, rtol, atol));
      CHECK(gradients_match_fd(mk(Op::sqrt), {pos}, rtol, atol));
    }
  }

  SUBCASE("matmul including transposes") {
    for (bool ta : {false, true})
      for (bool tb : {false, true}) {
        Tensor a = random_tensor(rng, ta ? std::vector<std::size_t>{4, 3} : std::vector<std::size_t>{3, 4});
        Tensor b = random_tensor(rng, tb ? std::vector<std::size_t>{5, 4} : std::vector<std::size_t>{4, 5});
        Tensor w = random_tensor(rng, {3, 5});
        auto f = [&](std::span<const Tensor> in) {
          return weighted(matmul(in[0], in[1], ta, tb), w);
        };
        CHECK(gradients_match_fd(f, {a, b}, rtol, atol));
      }
  }

  SUBCASE("reductions and reshape") {
    Tensor a = random_tensor(rng, {3, 4});
    CHECK(gradients_match_fd([](std::span<const Tensor> in) { return sum(in[0]); }, {a}, rtol, atol));
    CHECK(gradients_match_fd([](std::span<const Tensor> in) { return mean(in[0]); }, {a}, rtol, atol));
    for (int axis : {0, 1}) {
      Tensor w = axis == 0 ? random_tensor(rng, {1, 4}) : random_tensor(rng, {3, 1});
      CHECK(gradients_match_fd(
          [&, axis](std::span<const Tensor> in) { return weighted(sum_axis(in[0], axis), w); }, {a},
          rtol, atol));
      CHECK(gradients_match_fd(
          [&, axis](std::span<const Tensor> in) { return weighted(mean_axis(in[0], axis), w); }, {a},
          rtol, atol));
    }
    Tensor w = random_tensor(rng, {12});
    CHECK(gradients_match_fd(
        [&](std::span<const Tensor> in) { return weighted(reshape(in[0], {12}), w); }, {a}, rtol,
        atol));
  }

  SUBCASE("concat slice broadcast gather scatter maskfill") {
    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {2, 4});
    Tensor w5 = random_tensor(rng, {5, 4});
    CHECK(gradients_match_fd(
        [&](std::span<const Tensor> in) { return weighted(concat({in[0], in[1]}, 0), w5); }, {a, b},
        rtol, atol));

    Tensor w2 = random_tensor(rng, {2, 2});
    CHECK(gradients_match_fd(
        [&](std::span<const Tensor> in) {
          return weighted(slice(slice(in[0], 0, 1, 3), 1, 2, 4), w2);
        },
        {a}, rtol, atol));

    Tensor v = random_tensor(rng, {4});
    Tensor w34 = random_tensor(rng, {3, 4});
    CHECK(gradients_match_fd(
        [&](std::span<const Tensor> in) { return weighted(broadcast(in[0], {3, 4}), w34); }, {v},
        rtol, atol));

    std::vector<std::int64_t> rows = {2, 0, 2, 1};
    Tensor w4 = random_tensor(rng, {4, 4});
    CHECK(gradients_match_fd(
        [&](std::span<const Tensor> in) { return weighted(gather_rows(in[0], rows), w4); }, {a},
        rtol, atol));

    Tensor msgs = random_tensor(rng, {4, 3});
    Tensor w6 = random_tensor(rng, {6, 3});
    CHECK(gradients_match_fd(
        [&](std::span<const Tensor> in) { return weighted(scatter_add_rows(in[0], rows, 6), w6); },
        {msgs}, rtol, atol));

    std::vector<std::uint8_t> mask = {1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0};
    CHECK(gradients_match_fd(
        [&](std::span<const Tensor> in) { return weighted(masked_fill(in[0], mask, 2.5), w34); },
        {a}, rtol, atol));
  }
}

TEST_CASE("grad is linear in the objective") {
  Rng rng(31);
  Tensor x0 = random_tensor(rng, {6});
  const double a = 1.7, b = -2.3;

  auto run = [&](double ca, double cb) {
    Tape tape;
    Tensor x = tape.leaf(x0);
    Tensor f = sum(multiply(x, x));
    Tensor g = sum(exp(scale(x, 0.5)));
    Tensor combined = add(scale(f, ca), scale(g, cb));
    return grad(combined, {x})[0];
  };
  Tensor gf = run(1.0, 0.0);
  Tensor gg = run(0.0, 1.0);
  Tensor gc = run(a, b);
  for (std::size_t i = 0; i < gc.data.size(); ++i)
    CHECK(close(gc.data[i], a * gf.data[i] + b * gg.data[i], 1e-12, 1e-12));
}

TEST_CASE("second order sum of cubes is 6x") {
  Rng rng(37);
  Tensor x0 = random_tensor(rng, {5});
  Tape tape;
  Tensor x = tape.leaf(x0);
  Tensor f = sum(multiply(multiply(x, x), x));
  auto g1 = grad(f, {x}, true);
  auto g2 = grad(sum(g1[0]), {x});
  for (std::size_t i = 0; i < x0.data.size(); ++i)
    CHECK(std::fabs(g2[0].data[i] - 6.0 * x0.data[i]) < 1e-10);
}

TEST_CASE("tape replay is bit exact") {
  Rng rng(41);
  Tensor x0 = random_tensor(rng, {4, 4});
  Tensor w0 = random_tensor(rng, {4, 4});

  auto forward = [&]() {
    Tape tape;
    Tensor x = tape.leaf(x0);
    Tensor w = tape.leaf(w0);
    Tensor y = relu(matmul(x, w));
    return sum(multiply(y, y)).item();
  };
  CHECK(forward() == forward());

  Tape tape;
  Tensor x = tape.leaf(x0);
  Tensor w = tape.leaf(w0);
  Tensor loss = mean(abs(matmul(relu(matmul(x, w)), w)));
  auto gs = grad(loss, {x, w}, true);
  (void)grad(sum(multiply(gs[0], gs[0])), {w});
  CHECK(tape.replay_matches());
}

TEST_CASE("tape-free constants mix with taped tensors") {
  Tape tape;
  Tensor x = tape.leaf(Tensor::vec({1, 2, 3}));
  Tensor c = Tensor::vec({2, 2, 2});
  Tensor y = sum(multiply(x, c));
  auto g = grad(y, {x});
  CHECK(g[0].data == std::vector<double>{2, 2, 2});
}
