#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gazedetr/tensor.hpp"

using namespace gazedetr;

namespace {

// Independent sliding-window convolution used as the oracle for conv2d.
std::vector<double> conv_oracle(const std::vector<double>& x, int cin, int h, int w,
                                const std::vector<double>& k, int cout, int kh, int kw,
                                int stride, int pad) {
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(cout) * ho * wo, 0.0);
  for (int oc = 0; oc < cout; ++oc)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (int ic = 0; ic < cin; ++ic)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              int iy = oy * stride + ky - pad;
              int ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x[(ic * h + iy) * w + ix] * k[((oc * cin + ic) * kh + ky) * kw + kx];
            }
        out[(oc * ho + oy) * wo + ox] = acc;
      }
  return out;
}

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor col = Tensor::from_values({2, 1}, {3, 7});
  Tensor r = matmul(eye, col);
  CHECK(r.shape() == Shape{2, 1});
  CHECK(r.values()[0] == 3.0);
  CHECK(r.values()[1] == 7.0);

  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor ones = Tensor::from_values({2, 1}, {1, 1});
  Tensor p = matmul(a, ones);
  CHECK(p.values()[0] == 3.0);
  CHECK(p.values()[1] == 7.0);
}

TEST_CASE("matmul rejects mismatched inner extents with both shapes named") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  bool threw = false;
  try {
    matmul(a, b);
  } catch (const std::invalid_argument& e) {
    threw = true;
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("softmax uniform, oracle, and shift invariance") {
  Tensor z = Tensor::from_values({3}, {0, 0, 0});
  Tensor s = softmax_lastdim(z);
  for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Tensor x = Tensor::from_values({3}, {1, 2, 3});
  Tensor y = softmax_lastdim(x);
  long double e1 = expl(1.0L), e2 = expl(2.0L), e3 = expl(3.0L);
  long double den = e1 + e2 + e3;
  CHECK(y.values()[0] == doctest::Approx(static_cast<double>(e1 / den)).epsilon(1e-14));
  CHECK(y.values()[1] == doctest::Approx(static_cast<double>(e2 / den)).epsilon(1e-14));
  CHECK(y.values()[2] == doctest::Approx(static_cast<double>(e3 / den)).epsilon(1e-14));
  double row_sum = y.values()[0] + y.values()[1] + y.values()[2];
  CHECK(std::fabs(row_sum - 1.0) < 1e-9);

  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    Tensor a = random_tensor({4}, rng);
    double c = rng.uniform(-5.0, 5.0);
    Tensor shifted = add_const(a, c);
    Tensor ya = softmax_lastdim(a);
    Tensor yb = softmax_lastdim(shifted);
    for (std::size_t i = 0; i < ya.size(); ++i)
      CHECK(ya.values()[i] == doctest::Approx(yb.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("empty tensors are rejected at construction") {
  CHECK_THROWS_AS(Tensor::zeros({0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({3, 0}), std::invalid_argument);
}

TEST_CASE("conv2d identity kernel passes input through") {
  Rng rng(5);
  Tensor x = random_tensor({2, 5, 5}, rng);
  // 1x1 kernels wired as the identity map across channels.
  Tensor k = Tensor::from_values({2, 2, 1, 1}, {1, 0, 0, 1});
  Tensor y = conv2d(x, k, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d shape arithmetic") {
  Tensor x = Tensor::zeros({3, 64, 64});
  Tensor k = Tensor::zeros({16, 3, 3, 3});
  Tensor y = conv2d(x, k, 2, 1);
  CHECK(y.shape() == Shape{16, 32, 32});
  CHECK_THROWS(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), 1, 0));
}

TEST_CASE("conv2d matches sliding-window oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor({1, 4, 4}, rng);
    Tensor k = random_tensor({1, 1, 2, 2}, rng);
    int stride = 1 + (trial % 2);
    int pad = trial % 2;
    Tensor y = conv2d(x, k, stride, pad);
    auto want = conv_oracle(x.values(), 1, 4, 4, k.values(), 1, 2, 2, stride, pad);
    REQUIRE(y.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i)
      CHECK(y.values()[i] == doctest::Approx(want[i]).epsilon(1e-14));
  }
}

TEST_CASE("backward: analytic cases") {
  Tensor x = Tensor::from_values({2}, {1, 2}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));

  Tensor y = Tensor::from_values({3}, {1, 2, 3}, true);
  Tensor c = Tensor::scalar(5.0);
  backward(sum(mul(c, c)));  // constant loss w.r.t. y
  CHECK_FALSE(y.has_grad());
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::from_values({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(mul(x, x)), std::invalid_argument);
}

TEST_CASE("gradients accumulate across fan-out") {
  Tensor x = Tensor::from_values({2}, {3, 4}, true);
  Tensor y = add(x, x);  // both operands alias x
  backward(sum(y));
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("grad_check on linear and composite functions") {
  Rng rng(23);
  Tensor x = random_tensor({6}, rng);
  double err = grad_check([](const Tensor& t) { return sum(t); }, x);
  CHECK(err < 1e-10);

  Tensor w = random_tensor({3, 3}, rng);
  Tensor x2 = random_tensor({2, 3}, rng);
  double err2 = grad_check(
      [&](const Tensor& t) { return sum(softmax_lastdim(matmul(t, w))); }, x2);
  CHECK(err2 < 1e-6);
}

TEST_CASE("grad_check across every differentiable op on random inputs") {
  Rng rng(31);
  int checked = 0;
  for (int t = 0; t < 100; ++t) {
    Tensor x = random_tensor({2, 4}, rng);
    Tensor other = random_tensor({2, 4}, rng);
    Tensor vec = random_tensor({4}, rng);
    Tensor w = random_tensor({4, 3}, rng);
    std::vector<std::function<Tensor(const Tensor&)>> fns = {
        [&](const Tensor& a) { return sum(add(a, other)); },
        [&](const Tensor& a) { return sum(sub(a, other)); },
        [&](const Tensor& a) { return sum(mul(a, other)); },
        [&](const Tensor& a) { return sum(add(a, vec)); },
        [&](const Tensor& a) { return mean(relu(add_const(a, 0.05))); },
        [&](const Tensor& a) { return sum(sigmoid(a)); },
        [&](const Tensor& a) { return sum(exp(scale(a, 0.5))); },
        [&](const Tensor& a) { return sum(softplus(a)); },
        [&](const Tensor& a) { return sum(abs(add_const(a, 2.0))); },
        [&](const Tensor& a) { return sum(sqrt(add_const(a, 3.0))); },
        [&](const Tensor& a) { return sum(log(add_const(a, 3.0))); },
        [&](const Tensor& a) { return sum(minimum(a, other)); },
        [&](const Tensor& a) { return sum(maximum(a, other)); },
        [&](const Tensor& a) { return sum(matmul(a, w)); },
        [&](const Tensor& a) { return sum(mul(transpose(a), transpose(other))); },
        [&](const Tensor& a) { return sum(softmax_lastdim(a)); },
        [&](const Tensor& a) { return sum(mul(reshape(a, {4, 2}), reshape(other, {4, 2}))); },
        [&](const Tensor& a) { return sum(slice_cols(a, 1, 2)); },
        [&](const Tensor& a) { return sum(gather_rows(a, {0, 1, 0})); },
        [&](const Tensor& a) { return sum(concat_cols({a, other})); },
        [&](const Tensor& a) { return sum(div(a, add_const(other, 3.0))); },
    };
    const auto& f = fns[t % fns.size()];
    CHECK(grad_check(f, x) < 1e-4);
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("grad_check through conv2d and layer_norm") {
  Rng rng(37);
  Tensor x = random_tensor({1, 4, 4}, rng);
  Tensor k = random_tensor({2, 1, 3, 3}, rng);
  Tensor b = random_tensor({2}, rng);
  CHECK(grad_check([&](const Tensor& t) { return sum(conv2d(t, k, b, 2, 1)); }, x) < 1e-4);
  CHECK(grad_check([&](const Tensor& t) { return sum(conv2d(x, t, b, 2, 1)); }, k) < 1e-4);
  CHECK(grad_check([&](const Tensor& t) { return sum(conv2d(x, k, t, 2, 1)); }, b) < 1e-4);

  Tensor g = random_tensor({4}, rng);
  Tensor beta = random_tensor({4}, rng);
  Tensor x2 = random_tensor({3, 4}, rng);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(layer_norm(t, g, beta), x2)); }, x2.detached_copy()) < 1e-4);
  CHECK(grad_check([&](const Tensor& t) { return sum(layer_norm(x2, t, beta)); }, g) < 1e-4);
  CHECK(grad_check([&](const Tensor& t) { return sum(layer_norm(x2, g, t)); }, beta) < 1e-4);
}

TEST_CASE("layer_norm gradient w.r.t. its input") {
  Rng rng(41);
  Tensor g = random_tensor({4}, rng);
  Tensor beta = random_tensor({4}, rng);
  Tensor weight = random_tensor({3, 4}, rng);
  Tensor x = random_tensor({3, 4}, rng);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(layer_norm(t, g, beta), weight)); }, x) <
        1e-4);
}

TEST_CASE("reshape round-trips row-major flattening") {
  Rng rng(43);
  Tensor x = random_tensor({3, 4, 2}, rng);
  Tensor rt = reshape(reshape(x, {6, 4}), {3, 4, 2});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(rt.values()[i] == x.values()[i]);
}

TEST_CASE("dropout: eval identity, train mask scaling, gradient") {
  Rng rng(47);
  Tensor x = random_tensor({8, 8}, rng);
  Tensor ev = dropout(x, 0.5, nullptr, false);
  CHECK(ev.same_node(x));

  Rng drng(7);
  Tensor tr = dropout(x, 0.5, &drng, true);
  int zeros = 0;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    if (tr.values()[i] == 0.0)
      ++zeros;
    else
      CHECK(tr.values()[i] == doctest::Approx(2.0 * x.values()[i]));
  }
  CHECK(zeros > 8);
  CHECK(zeros < 56);
}

TEST_CASE("determinism: identical seeds produce bit-identical op outputs") {
  auto run = [] {
    Rng rng(99);
    Tensor a = random_tensor({4, 4}, rng);
    Tensor b = random_tensor({4, 4}, rng);
    return softmax_lastdim(matmul(a, b)).values();
  };
  auto v1 = run();
  auto v2 = run();
  CHECK(v1 == v2);
}

TEST_CASE("gather_rows accumulates gradients for duplicate indices") {
  Tensor x = Tensor::from_values({2, 2}, {1, 2, 3, 4}, true);
  backward(sum(gather_rows(x, {0, 0, 1})));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
  CHECK(x.grad()[2] == 1.0);
  CHECK(x.grad()[3] == 1.0);
}
