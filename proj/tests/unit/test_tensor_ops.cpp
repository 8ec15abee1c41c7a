#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "cscunet/errors.hpp"
#include "cscunet/gradcheck.hpp"
#include "cscunet/ops.hpp"
#include "cscunet/optim.hpp"
#include "cscunet/tensor.hpp"

using namespace cscunet;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> v(s.numel());
  for (auto& e : v) e = static_cast<T>(u(rng));
  return Tensor<T>(s, std::move(v), requires_grad);
}

Tensor<float> delta_kernel(int channels) {
  Tensor<float> w = Tensor<float>::zeros({channels, channels, 3, 3});
  for (int c = 0; c < channels; ++c) w.at(c, c, 1, 1) = 1.0f;
  return w;
}

// Direct six-loop convolution with zero padding.
std::vector<double> naive_conv(const Tensor<float>& x, const Tensor<float>& w, int stride,
                               int pad) {
  const Shape xs = x.shape(), ws = w.shape();
  const int oh = (xs.h + 2 * pad - ws.h) / stride + 1;
  const int ow = (xs.w + 2 * pad - ws.w) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(xs.n) * ws.n * oh * ow, 0.0);
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (int c = 0; c < xs.c; ++c)
            for (int ki = 0; ki < ws.h; ++ki)
              for (int kj = 0; kj < ws.w; ++kj) {
                const int r = i * stride - pad + ki, q = j * stride - pad + kj;
                if (r < 0 || q < 0 || r >= xs.h || q >= xs.w) continue;
                acc += static_cast<double>(x.at(n, c, r, q)) * w.at(o, c, ki, kj);
              }
          out[((static_cast<std::size_t>(n) * ws.n + o) * oh + i) * ow + j] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d counts kernel overlap on an all-ones input") {
  const Tensor<float> x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  const Tensor<float> w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  const Tensor<float> y = conv2d(x, w, Tensor<float>{}, 1, 1);
  CHECK(y.at(0, 0, 0, 0) == 4.0f);
  CHECK(y.at(0, 0, 2, 2) == 4.0f);
  CHECK(y.at(0, 0, 0, 1) == 6.0f);
  CHECK(y.at(0, 0, 1, 0) == 6.0f);
  CHECK(y.at(0, 0, 1, 1) == 9.0f);
}

TEST_CASE("centered delta kernel is the identity for conv2d and conv_transpose2d") {
  const Tensor<float> x = random_tensor<float>({2, 3, 5, 7}, 1);
  const Tensor<float> w = delta_kernel(3);
  const Tensor<float> a = conv2d(x, w, Tensor<float>{}, 1, 1);
  const Tensor<float> b = conv_transpose2d(x, w, Tensor<float>{}, 1, 1, 0);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(a.data()[i] == x.data()[i]);
    CHECK(b.data()[i] == x.data()[i]);
  }
}

TEST_CASE("conv2d matches the naive loop oracle") {
  const Tensor<float> x = random_tensor<float>({2, 3, 8, 8}, 2);
  const Tensor<float> w = random_tensor<float>({4, 3, 3, 3}, 3);
  for (int stride : {1, 2}) {
    const Tensor<float> y = conv2d(x, w, Tensor<float>{}, stride, 1);
    const auto ref = naive_conv(x, w, stride, 1);
    REQUIRE(y.numel() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-5));
  }
}

TEST_CASE("conv2d rejects mismatched channels") {
  const Tensor<float> x = random_tensor<float>({1, 2, 4, 4}, 4);
  const Tensor<float> w = random_tensor<float>({4, 3, 3, 3}, 5);
  CHECK_THROWS_AS(conv2d(x, w, Tensor<float>{}, 1, 1), ShapeError);
}

TEST_CASE("transposed conv upsampling equals the input gradient of a strided conv") {
  // Oracle: conv_transpose2d(y; W) is d<conv2d(x; W), y>/dx.
  const Tensor<float> y = Tensor<float>::full({1, 1, 2, 2}, 1.0f);
  const Tensor<float> w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  const Tensor<float> up = conv_transpose2d(y, w, Tensor<float>{}, 2, 1, 1);
  REQUIRE(up.shape() == Shape{1, 1, 4, 4});

  Tensor<float> x = Tensor<float>::zeros({1, 1, 4, 4}, true);
  const Tensor<float> fwd = conv2d(x, w, Tensor<float>{}, 2, 1);
  REQUIRE(fwd.shape() == Shape{1, 1, 2, 2});
  dot(fwd, y).backward();
  for (std::size_t i = 0; i < 16; ++i) CHECK(up.data()[i] == x.grad()[i]);
  // Output row r is covered by 1, 2, 1, 1 input rows.
  const float cover[4] = {1, 2, 1, 1};
  for (int r = 0; r < 4; ++r)
    for (int q = 0; q < 4; ++q) CHECK(up.at(0, 0, r, q) == cover[r] * cover[q]);
}

TEST_CASE("conv/transposed-conv inner-product identity in double precision") {
  for (int t = 0; t < 10; ++t) {
    const auto x = random_tensor<double>({2, 3, 6, 6}, 100 + t);
    const auto y = random_tensor<double>({2, 4, 6, 6}, 200 + t);
    const auto w = random_tensor<double>({4, 3, 3, 3}, 300 + t);
    const double lhs = dot(conv2d(x, w, Tensor<double>{}, 1, 1), y).item();
    const double rhs = dot(x, conv_transpose2d(y, w, Tensor<double>{}, 1, 1, 0)).item();
    CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(std::abs(lhs), 1.0));
  }
}

TEST_CASE("maxpool2d") {
  SUBCASE("2x2 window picks the max") {
    const Tensor<float> x({1, 1, 2, 2}, {1, 2, 3, 4});
    const Tensor<float> y = maxpool2d(x);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 4.0f);
  }
  SUBCASE("constant input gives constant output; ties route to the first index") {
    Tensor<float> x = Tensor<float>::full({1, 2, 4, 4}, 0.5f, true);
    const Tensor<float> y = maxpool2d(x);
    for (float v : y.data()) CHECK(v == 0.5f);
    sum(y).backward();
    CHECK(x.grad()[0] == 1.0f);
    CHECK(x.grad()[1] == 0.0f);
    CHECK(x.grad()[4] == 0.0f);
    CHECK(x.grad()[5] == 0.0f);
  }
  SUBCASE("odd spatial size is rejected") {
    CHECK_THROWS_AS(maxpool2d(Tensor<float>::zeros({1, 1, 3, 4})), ShapeError);
  }
}

TEST_CASE("batchnorm2d") {
  SUBCASE("constant channels normalize to zero") {
    std::vector<float> v(2 * 3 * 4 * 4);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((i / 16) % 3) * 2.0f - 1.0f;
    const Tensor<float> x({2, 3, 4, 4}, v);
    auto stats = BatchNormStats<float>::fresh(3);
    const Tensor<float> y = batchnorm2d(x, Tensor<float>::full({1, 3, 1, 1}, 1.0f),
                                        Tensor<float>::zeros({1, 3, 1, 1}), stats, Mode::train);
    for (float e : y.data()) CHECK(e == 0.0f);
  }
  SUBCASE("gamma zero gives beta broadcast") {
    const Tensor<float> x = random_tensor<float>({2, 3, 4, 4}, 7);
    const Tensor<float> beta({1, 3, 1, 1}, {0.5f, -1.0f, 2.0f});
    auto stats = BatchNormStats<float>::fresh(3);
    const Tensor<float> y =
        batchnorm2d(x, Tensor<float>::zeros({1, 3, 1, 1}), beta, stats, Mode::train);
    for (int c = 0; c < 3; ++c) CHECK(y.at(1, c, 2, 3) == beta.data()[c]);
  }
  SUBCASE("train mode output has zero mean and unit biased variance; running stats move") {
    const Tensor<double> x = random_tensor<double>({3, 2, 5, 5}, 8);
    auto stats = BatchNormStats<double>::fresh(2);
    const Tensor<double> y = batchnorm2d(x, Tensor<double>::full({1, 2, 1, 1}, 1.0),
                                         Tensor<double>::zeros({1, 2, 1, 1}), stats, Mode::train,
                                         0.0);
    for (int c = 0; c < 2; ++c) {
      double m = 0.0, q = 0.0, xm = 0.0, xq = 0.0;
      for (int n = 0; n < 3; ++n)
        for (int i = 0; i < 5; ++i)
          for (int j = 0; j < 5; ++j) {
            m += y.at(n, c, i, j);
            q += y.at(n, c, i, j) * y.at(n, c, i, j);
            xm += x.at(n, c, i, j);
          }
      xm /= 75.0;
      for (int n = 0; n < 3; ++n)
        for (int i = 0; i < 5; ++i)
          for (int j = 0; j < 5; ++j) xq += (x.at(n, c, i, j) - xm) * (x.at(n, c, i, j) - xm);
      CHECK(std::abs(m / 75.0) < 1e-12);
      CHECK(q / 75.0 == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(stats.mean[c] == doctest::Approx(0.1 * xm).epsilon(1e-12));
      CHECK(stats.var[c] == doctest::Approx(0.9 + 0.1 * xq / 74.0).epsilon(1e-12));
    }
  }
  SUBCASE("eval mode uses running statistics and leaves them untouched") {
    const Tensor<float> x = random_tensor<float>({1, 1, 2, 2}, 9);
    BatchNormStats<float> stats{{0.5f}, {4.0f}, 0.1f};
    const Tensor<float> y = batchnorm2d(x, Tensor<float>::full({1, 1, 1, 1}, 2.0f),
                                        Tensor<float>::full({1, 1, 1, 1}, 1.0f), stats, Mode::eval,
                                        0.0f);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(2.0f * (x.data()[i] - 0.5f) / 2.0f + 1.0f));
    CHECK(stats.mean[0] == 0.5f);
    CHECK(stats.var[0] == 4.0f);
  }
}

TEST_CASE("relu") {
  const Tensor<float> y = relu(Tensor<float>({1, 1, 1, 3}, {-1.0f, 0.0f, 2.0f}));
  CHECK(y.data()[0] == 0.0f);
  CHECK(y.data()[1] == 0.0f);
  CHECK(y.data()[2] == 2.0f);
}

TEST_CASE("log_softmax and nll") {
  SUBCASE("equal logits give ln C") {
    const Tensor<double> z = Tensor<double>::zeros({2, 5, 3, 3});
    LabelMap t{2, 3, 3, std::vector<std::int32_t>(18, 3)};
    CHECK(log_softmax_nll(z, t).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }
  SUBCASE("confident correct logit gives near-zero loss") {
    Tensor<double> z = Tensor<double>::zeros({1, 2, 1, 1});
    z.at(0, 1, 0, 0) = 50.0;
    const LabelMap t{1, 1, 1, {1}};
    CHECK(log_softmax_nll(z, t).item() < 1e-8);
  }
  SUBCASE("random logits match the direct formula") {
    const Tensor<double> z = random_tensor<double>({2, 4, 3, 5}, 10);
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> label(0, 3);
    LabelMap t{2, 3, 5, {}};
    for (int i = 0; i < 30; ++i) t.labels.push_back(label(rng));
    double ref = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j) {
          double s = 0.0;
          for (int c = 0; c < 4; ++c) s += std::exp(z.at(n, c, i, j));
          ref += -z.at(n, t.labels[(n * 3 + i) * 5 + j], i, j) + std::log(s);
        }
    CHECK(log_softmax_nll(z, t).item() == doctest::Approx(ref / 30.0).epsilon(1e-6));
  }
  SUBCASE("ignored pixels are excluded") {
    Tensor<double> z = random_tensor<double>({1, 2, 1, 2}, 12);
    const LabelMap both{1, 1, 2, {0, 255}};
    const LabelMap first{1, 1, 1, {0}};
    Tensor<double> z1({1, 2, 1, 1}, {z.at(0, 0, 0, 0), z.at(0, 1, 0, 0)});
    CHECK(log_softmax_nll(z, both, 255).item() == doctest::Approx(log_softmax_nll(z1, first).item()));
  }
  SUBCASE("out-of-range label is an error") {
    const LabelMap t{1, 1, 1, {2}};
    CHECK_THROWS(log_softmax_nll(Tensor<double>::zeros({1, 2, 1, 1}), t));
  }
  SUBCASE("softmax of log_softmax sums to one per pixel") {
    const Tensor<float> ls = log_softmax(random_tensor<float>({2, 3, 4, 4}, 13));
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 4; ++i) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) s += std::exp(ls.at(n, c, i, 1));
        CHECK(std::abs(s - 1.0) < 1e-5);
      }
  }
}

TEST_CASE("backward accumulates into leaves across calls") {
  Tensor<double> x({1, 1, 1, 3}, {1.0, -2.0, 3.0}, true);
  sum(relu(x)).backward();
  sum(relu(x)).backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[2] == 2.0);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("a shared subexpression receives gradient from both uses") {
  Tensor<double> x({1, 1, 1, 2}, {0.5, 2.0}, true);
  const Tensor<double> r = relu(x);
  sum(add(r, r)).backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("no-grad guard records nothing") {
  Tensor<double> x({1, 1, 1, 1}, {1.0}, true);
  {
    NoGradGuard guard;
    const Tensor<double> y = relu(x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(relu(x).requires_grad());
}

TEST_CASE("non-finite results are errors") {
  const Tensor<float> x({1, 1, 1, 1}, std::vector<float>{std::numeric_limits<float>::max()});
  CHECK_THROWS_AS(add(x, x), NonFiniteError);
  CHECK_THROWS_AS(Tensor<float>({1, 1, 1, 1}, std::vector<float>{std::nanf("")}), NonFiniteError);
}

TEST_CASE("gradient checks") {
  SUBCASE("linear map is exact") {
    const Tensor<double> w = random_tensor<double>({4, 3, 3, 3}, 14);
    const GradFn f = [w](std::span<const Tensor<double>> in) {
      return conv2d(in[0], w, Tensor<double>{}, 1, 1);
    };
    const InputSpec spec{{2, 3, 6, 6}, InputKind::uniform, true};
    const auto report = grad_check("linear", f, std::span<const InputSpec>(&spec, 1), 1);
    CHECK(report.worst() < 1e-8);
  }
  SUBCASE("every registered op passes on 2x3x6x6 inputs") {
    for (const auto& op : registered_ops()) {
      CAPTURE(op.name);
      const auto report = grad_check(op.name, op.fn, op.inputs, 5);
      CHECK(report.passed);
      CHECK(report.worst() < 1e-4);
    }
  }
  SUBCASE("composite conv -> batch norm -> relu -> loss") {
    const LabelMap t{2, 6, 6, std::vector<std::int32_t>(72, 1)};
    const GradFn f = [t](std::span<const Tensor<double>> in) {
      auto stats = BatchNormStats<double>::fresh(2);
      const Tensor<double> h =
          relu(batchnorm2d(conv2d(in[0], in[1], in[2], 1, 1), in[3], in[4], stats, Mode::train));
      return log_softmax_nll(h, t);
    };
    const std::vector<InputSpec> specs{{{2, 3, 6, 6}, InputKind::uniform, true},
                                       {{2, 3, 3, 3}, InputKind::uniform, true},
                                       {{1, 2, 1, 1}, InputKind::uniform, false},
                                       {{1, 2, 1, 1}, InputKind::positive, true},
                                       {{1, 2, 1, 1}, InputKind::uniform, true}};
    const auto report = grad_check("composite", f, specs, 6);
    CHECK(report.passed);
  }
  SUBCASE("a wrong gradient is reported") {
    // x * stop_gradient(x): forward x^2, but the analytic gradient is x instead of 2x.
    const GradFn sq = [](std::span<const Tensor<double>> in) {
      return scale(in[0], in[0].detach());
    };
    const auto report = grad_check("square", sq, {Tensor<double>::scalar(0.7, true)}, 1);
    CHECK_FALSE(report.passed);
  }
}

TEST_CASE("adam") {
  SUBCASE("first step with unit gradient moves by -lr") {
    std::vector<Tensor<double>> p{Tensor<double>::scalar(0.0, true)};
    p[0].grad_mut()[0] = 1.0;
    AdamState state;
    adam_step(p, state, 0.01);
    CHECK(p[0].item() == doctest::Approx(-0.01).epsilon(1e-7));
  }
  SUBCASE("zero gradients leave parameters unchanged") {
    std::vector<Tensor<double>> p{Tensor<double>({1, 1, 1, 2}, {0.5, -0.25}, true)};
    p[0].grad_mut()[0] = 1.0;
    AdamState state;
    adam_step(p, state, 0.01);
    const double before0 = p[0].data()[0];
    p[0].zero_grad();
    p[0].grad_mut();
    adam_step(p, state, 0.01);
    CHECK(p[0].data()[1] == -0.25);
    CHECK(p[0].data()[0] != before0);  // momentum still moves the first entry
  }
  SUBCASE("matches a reference implementation over several steps") {
    std::vector<Tensor<double>> p{Tensor<double>({1, 1, 1, 1}, {1.0}, true)};
    AdamState state;
    double x = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 5; ++t) {
      const double g = 2.0 * x;
      p[0].zero_grad();
      p[0].grad_mut()[0] = 2.0 * p[0].item();
      adam_step(p, state, 0.1);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(p[0].item() == doctest::Approx(x).epsilon(1e-12));
    }
  }
}

TEST_CASE("step decay learning rate") {
  CHECK(step_decay_lr(1e-5, 0, 50) == 1e-5);
  CHECK(step_decay_lr(1e-5, 49, 50) == 1e-5);
  CHECK(step_decay_lr(1e-5, 50, 50) == 5e-6);
  CHECK(step_decay_lr(1e-5, 199, 50) == 1e-5 / 8);
}
