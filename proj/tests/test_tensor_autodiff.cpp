#include <cmath>
#include <functional>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "magd/autodiff.hpp"
#include "magd/errors.hpp"
#include "magd/ops.hpp"
#include "magd/rng.hpp"

using namespace magd;
using namespace magd::ad;

namespace {

template <class T>
BasicTensor<T> random_tensor(Rng& rng, const Shape& s, double stddev = 1.0) {
  BasicTensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

// Builds op(inputs...) on a tape and reduces it with fixed random weights to a scalar.
template <class T>
using OpBuilder = std::function<BasicVar<T>(BasicTape<T>&, const std::vector<BasicVar<T>>&)>;

template <class T>
struct OpCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

template <class T>
OpCheck<T> gradient_check(const std::vector<BasicTensor<T>>& inputs, const OpBuilder<T>& op, std::uint64_t seed,
                          double floor = 1e-6) {
  Rng rng(seed);
  BasicTensor<T> weights;
  {
    BasicTape<T> tape;
    std::vector<BasicVar<T>> vs;
    for (const auto& x : inputs) vs.push_back(tape.constant(x));
    weights = random_tensor<T>(rng, op(tape, vs).shape());
  }
  auto loss_of = [&](const std::vector<BasicTensor<T>>& xs) {
    BasicTape<T> tape;
    std::vector<BasicVar<T>> vs;
    for (const auto& x : xs) vs.push_back(tape.constant(x));
    return static_cast<double>(weighted_sum(op(tape, vs), weights).value()[0]);
  };

  BasicTape<T> tape;
  std::vector<BasicVar<T>> vs;
  for (const auto& x : inputs) vs.push_back(tape.leaf(x));
  tape.backward(weighted_sum(op(tape, vs), weights));

  OpCheck<T> res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::function<double(const BasicTensor<T>&)> f = [&](const BasicTensor<T>& xk) {
      auto xs = inputs;
      xs[k] = xk;
      return loss_of(xs);
    };
    auto fd = testing::finite_difference<T>(f, inputs[k], 1e-3);
    auto cmp = testing::compare_gradients(tape.grad(vs[k]), fd, floor);
    res.max_rel = std::max(res.max_rel, cmp.max_rel);
    res.checked += cmp.checked;
  }
  return res;
}

struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  OpBuilder<double> op64;
  OpBuilder<float> op32;
};

#define BOTH(expr)                                                                      \
  [](BasicTape<double>& t, const std::vector<BasicVar<double>>& v) { (void)t; return expr; }, \
  [](BasicTape<float>& t, const std::vector<BasicVar<float>>& v) { (void)t; return expr; }

std::vector<OpCase> op_cases() {
  return {
      {"add", {{3, 4}, {3, 4}}, BOTH(add(v[0], v[1]))},
      {"sub", {{3, 4}, {3, 4}}, BOTH(sub(v[0], v[1]))},
      {"mul", {{3, 4}, {3, 4}}, BOTH(mul(v[0], v[1]))},
      {"scale", {{5}}, BOTH(scale(v[0], decltype(v[0].value()[0])(-1.7)))},
      {"silu", {{2, 3, 3}}, BOTH(silu(v[0]))},
      {"add_row_vector", {{4, 3}, {3}}, BOTH(add_row_vector(v[0], v[1]))},
      {"add_channel", {{2, 3, 3}, {2}}, BOTH(add_channel(v[0], v[1]))},
      {"matmul", {{3, 4}, {4, 2}}, BOTH(matmul(v[0], v[1]))},
      {"transpose", {{3, 4}}, BOTH(transpose(v[0]))},
      {"softmax", {{4, 5}}, BOTH(softmax_last_dim(v[0]))},
      {"conv2d_3x3", {{2, 4, 4}, {2, 2, 3, 3}, {2}}, BOTH(conv2d(v[0], v[1], v[2]))},
      {"conv2d_1x1", {{3, 4, 4}, {2, 3, 1, 1}, {2}}, BOTH(conv2d(v[0], v[1], v[2]))},
      {"group_norm", {{4, 3, 3}, {4}, {4}}, BOTH(group_norm(v[0], 2, v[1], v[2]))},
      {"upsample2x", {{2, 2, 3}}, BOTH(upsample2x(v[0]))},
      {"downsample2x", {{2, 4, 4}}, BOTH(downsample2x(v[0]))},
      {"concat_channels", {{2, 2, 2}, {1, 2, 2}}, BOTH(concat_channels(v[0], v[1]))},
      {"slice_cols", {{3, 5}}, BOTH(slice_cols(v[0], 1, 4))},
      {"concat_cols", {{3, 2}, {3, 3}}, BOTH(concat_cols(std::vector{v[0], v[1]}))},
      {"reshape", {{2, 6}}, BOTH(reshape(v[0], {3, 4}))},
      {"mean", {{7}}, BOTH(mean(v[0]))},
      {"mse", {{6}, {6}}, BOTH(mse(v[0], v[1]))},
      {"attention_block", {{6, 4}, {3, 4}}, BOTH(matmul(softmax_last_dim(matmul(v[0], transpose(v[1]))), v[1]))},
  };
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("shape invariants") {
    Tensor t({2, 3}, 1.5f);
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
    CHECK_THROWS_AS(Tensor({0, 3}), DimensionError);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
  }
}

TEST_SUITE("ops") {
  TEST_CASE("matmul") {
    Tape tape;
    auto eye = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
    auto m = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    CHECK(matmul(eye, m).value() == m.value());
    auto r = matmul(tape.constant(Tensor({1, 2}, {1, 2})), tape.constant(Tensor({2, 1}, {3, 4})));
    CHECK(r.value().shape() == Shape{1, 1});
    CHECK(r.value()[0] == 11.0f);
    auto a = tape.constant(Tensor({2, 3}));
    try {
      matmul(a, a);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2,3] x [2,3]") != std::string::npos);
    }
  }

  TEST_CASE("softmax_last_dim") {
    Tape tape;
    auto a = softmax_last_dim(tape.constant(Tensor({2}, {0, 0})));
    CHECK(a.value()[0] == 0.5f);
    CHECK(a.value()[1] == 0.5f);
    auto b = softmax_last_dim(tape.constant(Tensor({3}, {1, 2, 3})));
    CHECK(b.value()[0] == doctest::Approx(0.09003).epsilon(1e-4));
    CHECK(b.value()[1] == doctest::Approx(0.24473).epsilon(1e-4));
    CHECK(b.value()[2] == doctest::Approx(0.66524).epsilon(1e-4));
    // Large logits must not overflow.
    auto c = softmax_last_dim(tape.constant(Tensor({2}, {1000, 1000})));
    CHECK(c.value()[0] == 0.5f);

    Rng rng(3);
    auto x = tape.constant(random_tensor<float>(rng, {16, 9}, 5.0));
    auto y = softmax_last_dim(x);
    for (int r = 0; r < 16; ++r) {
      double s = 0;
      for (int j = 0; j < 9; ++j) s += y.value().at({r, j});
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }

  TEST_CASE("conv2d") {
    Tape tape;
    Rng rng(5);
    Tensor x = random_tensor<float>(rng, {2, 5, 4});
    // Centered delta kernel mixing channels: out0 = in1, out1 = 2*in0.
    Tensor k({2, 2, 3, 3}, 0.0f);
    k.at({0, 1, 1, 1}) = 1.0f;
    k.at({1, 0, 1, 1}) = 2.0f;
    auto y = conv2d(tape.constant(x), tape.constant(k), tape.constant(Tensor({2}, 0.0f)));
    for (int yy = 0; yy < 5; ++yy)
      for (int xx = 0; xx < 4; ++xx) {
        CHECK(y.value().at({0, yy, xx}) == x.at({1, yy, xx}));
        CHECK(y.value().at({1, yy, xx}) == 2.0f * x.at({0, yy, xx}));
      }

    auto z = conv2d(tape.constant(x), tape.constant(Tensor({3, 2, 3, 3}, 0.0f)), tape.constant(Tensor({3}, {1, -2, 4})));
    for (int yy = 0; yy < 5; ++yy) {
      CHECK(z.value().at({0, yy, 1}) == 1.0f);
      CHECK(z.value().at({1, yy, 2}) == -2.0f);
      CHECK(z.value().at({2, yy, 3}) == 4.0f);
    }

    // Box filter on a constant image: interior keeps the value, corners see 4 of 9 taps.
    const float c = 0.8f;
    auto box = conv2d(tape.constant(Tensor({1, 6, 6}, c)), tape.constant(Tensor({1, 1, 3, 3}, 1.0f / 9.0f)),
                      tape.constant(Tensor({1}, 0.0f)));
    CHECK(box.value().at({0, 2, 3}) == doctest::Approx(c).epsilon(1e-6));
    CHECK(box.value().at({0, 0, 0}) == doctest::Approx(c * 4.0f / 9.0f).epsilon(1e-6));
    CHECK(box.value().at({0, 0, 3}) == doctest::Approx(c * 6.0f / 9.0f).epsilon(1e-6));

    CHECK_THROWS_AS(conv2d(tape.constant(x), tape.constant(Tensor({2, 3, 3, 3})), tape.constant(Tensor({2}))),
                    DimensionError);
  }

  TEST_CASE("group_norm") {
    Tape tape;
    auto ones = tape.constant(Tensor({4}, 1.0f));
    auto zeros = tape.constant(Tensor({4}, 0.0f));
    auto k = group_norm(tape.constant(Tensor({4, 3, 3}, 7.0f)), 2, ones, zeros);
    for (float v : k.value().data()) CHECK(v == 0.0f);

    Rng rng(11);
    auto x = group_norm(tape.constant(random_tensor<float>(rng, {4, 5, 5}, 3.0)), 2, ones, zeros);
    for (int g = 0; g < 2; ++g) {
      double m = 0, v = 0;
      const std::size_t n = 50;
      for (std::size_t i = 0; i < n; ++i) m += x.value()[g * n + i];
      m /= n;
      for (std::size_t i = 0; i < n; ++i) v += std::pow(x.value()[g * n + i] - m, 2);
      v /= n;
      CHECK(std::abs(m) < 1e-5);
      CHECK(std::abs(v - 1.0) < 1e-3);
    }

    auto five = group_norm(tape.constant(random_tensor<float>(rng, {4, 2, 2})), 4, zeros,
                           tape.constant(Tensor({4}, 5.0f)));
    for (float v : five.value().data()) CHECK(v == 5.0f);

    CHECK_THROWS_AS(group_norm(tape.constant(Tensor({6, 2, 2})), 4, tape.constant(Tensor({6})),
                               tape.constant(Tensor({6}))),
                    ConfigError);
  }

  TEST_CASE("silu and resampling") {
    Tape tape;
    auto s = silu(tape.constant(Tensor({2}, {0.0f, 10.0f})));
    CHECK(s.value()[0] == 0.0f);
    CHECK(s.value()[1] == doctest::Approx(9.99955).epsilon(1e-6));

    auto img = tape.constant(Tensor({3, 8, 8}, 0.25f));
    CHECK(upsample2x(downsample2x(img)).value() == img.value());
    CHECK_THROWS_AS(add(img, tape.constant(Tensor({3, 8, 4}))), DimensionError);
  }
}

TEST_SUITE("backward") {
  TEST_CASE("sum of softmax has zero gradient") {
    Tape tape;
    Rng rng(2);
    auto x = tape.leaf(random_tensor<float>(rng, {1, 6}));
    tape.backward(sum(softmax_last_dim(x)));
    const Tensor g = tape.grad(x);
    for (float v : g.data()) CHECK(std::abs(v) < 1e-7);
  }

  TEST_CASE("dot product gradient is the other factor") {
    Tape tape;
    Rng rng(4);
    auto x = tape.leaf(random_tensor<float>(rng, {10}));
    auto y = tape.constant(random_tensor<float>(rng, {10}));
    tape.backward(sum(mul(x, y)));
    CHECK(tape.grad(x) == y.value());
  }

  TEST_CASE("non-scalar loss is rejected") {
    Tape tape;
    auto x = tape.leaf(Tensor({3}, 1.0f));
    CHECK_THROWS_AS(tape.backward(scale(x, 2.0f)), UsageError);
  }

  TEST_CASE("unreachable leaves get zero gradient; each node visited once") {
    Tape tape;
    auto x = tape.leaf(Tensor({3}, 1.0f));
    auto unused = tape.leaf(Tensor({2}, 4.0f));
    auto y = silu(scale(x, 3.0f));
    auto loss = sum(add(y, y));
    tape.backward(loss);
    CHECK(tape.grad(unused) == Tensor({2}, 0.0f));
    CHECK(tape.last_backward_visits() == 4);  // scale, silu, add, sum
    // Re-running backward replaces, not accumulates.
    const Tensor g1 = tape.grad(x);
    tape.backward(loss);
    CHECK(tape.grad(x) == g1);
  }

  TEST_CASE("every op matches finite differences (float64, rel 1e-3)") {
    for (const auto& c : op_cases()) {
      for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        Rng rng(seed * 101);
        std::vector<Tensor64> in;
        for (const auto& s : c.shapes) in.push_back(random_tensor<double>(rng, s));
        auto r = gradient_check<double>(in, c.op64, seed);
        INFO(std::string(c.name) << " seed " << seed << " rel " << r.max_rel);
        CHECK(r.checked > 0);
        CHECK(r.max_rel < 1e-3);
      }
    }
  }

  TEST_CASE("every op matches finite differences (float32, single-precision tolerance)") {
    // float32 central differences with h = 1e-3 carry ~1e-4 absolute noise, so only
    // entries well above that are compared.
    for (const auto& c : op_cases()) {
      Rng rng(77);
      std::vector<Tensor> in;
      for (const auto& s : c.shapes) in.push_back(random_tensor<float>(rng, s));
      auto r = gradient_check<float>(in, c.op32, 9, 5e-2);
      INFO(std::string(c.name) << " rel " << r.max_rel);
      CHECK(r.max_rel < 5e-2);
    }
  }

  TEST_CASE("backward is linear in the loss") {
    Rng rng(8);
    const Tensor xv = random_tensor<float>(rng, {3, 4});
    const Tensor w = random_tensor<float>(rng, {3, 4});
    auto grad_of = [&](float a, float b) {
      Tape tape;
      auto x = tape.leaf(xv);
      auto l1 = sum(softmax_last_dim(mul(x, x)));
      auto l2 = weighted_sum(silu(x), w);
      tape.backward(add(scale(l1, a), scale(l2, b)));
      return tape.grad(x);
    };
    const Tensor g1 = grad_of(1, 0), g2 = grad_of(0, 1), g = grad_of(2.5f, -0.75f);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - (2.5f * g1[i] - 0.75f * g2[i])) < 1e-6);
  }

  TEST_CASE("tape replay is deterministic") {
    Rng rng(12);
    const Tensor xv = random_tensor<float>(rng, {2, 6, 6});
    const Tensor kv = random_tensor<float>(rng, {4, 2, 3, 3});
    auto run = [&] {
      Tape tape;
      auto x = tape.leaf(xv);
      auto k = tape.leaf(kv);
      auto y = group_norm(conv2d(x, k, tape.constant(Tensor({4}, 0.1f))), 2, tape.constant(Tensor({4}, 1.0f)),
                          tape.constant(Tensor({4}, 0.0f)));
      auto loss = mean(silu(y));
      tape.backward(loss);
      return std::make_tuple(loss.value(), tape.grad(x), tape.grad(k));
    };
    auto [l1, gx1, gk1] = run();
    auto [l2, gx2, gk2] = run();
    CHECK(bitwise_equal(l1, l2));
    CHECK(bitwise_equal(gx1, gx2));
    CHECK(bitwise_equal(gk1, gk2));
    CHECK(gx1.all_finite());
  }
}
