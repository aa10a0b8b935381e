#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "cil/ops.hpp"
#include "cil/optim.hpp"
#include "gradcheck.hpp"

using namespace cil;
using cil::testing::random_tensor;

namespace {

// Straight six-loop convolution in double.
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int s, int p) {
  const int n = static_cast<int>(x.dim(0)), c = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2)), wd = static_cast<int>(x.dim(3));
  const int o = static_cast<int>(w.dim(0)), k = static_cast<int>(w.dim(2));
  const int oh = (h + 2 * p - k) / s + 1, ow = (wd + 2 * p - k) / s + 1;
  std::vector<double> out(static_cast<std::size_t>(n * o * oh * ow));
  for (int i = 0; i < n; ++i)
    for (int oc = 0; oc < o; ++oc)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = b.data()[oc];
          for (int ic = 0; ic < c; ++ic)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * s + ky - p, ix = xx * s + kx - p;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += static_cast<double>(x.data()[((i * c + ic) * h + iy) * wd + ix]) *
                       w.data()[((oc * c + ic) * k + ky) * k + kx];
              }
          out[static_cast<std::size_t>(((i * o + oc) * oh + y) * ow + xx)] = acc;
        }
  return out;
}

double lse_ce_oracle(const std::vector<double>& z, int target) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v);
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s) - z[static_cast<std::size_t>(target)];
}

}  // namespace

TEST(Conv2d, OnesTimesScalarKernel) {
  Tape tape = Tape::inference();
  Tensor x({1, 1, 3, 3}, 1.0f), w({1, 1, 1, 1}, 2.0f), b({1}, 0.0f);
  const Tensor y = conv2d(tape, x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (float v : y.data()) EXPECT_EQ(v, 2.0f);
}

TEST(Conv2d, CenteredDeltaKernelIsIdentity) {
  Rng rng(3);
  Tensor x = random_tensor(rng, {2, 1, 5, 4}, 1.0, false);
  Tensor w({1, 1, 3, 3}, 0.0f), b({1}, 0.0f);
  w.data()[4] = 1.0f;
  Tape tape = Tape::inference();
  const Tensor y = conv2d(tape, x, w, b, 1, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(11);
  Tensor x = random_tensor(rng, {1, 2, 4, 4}), w = random_tensor(rng, {3, 2, 3, 3}), b = random_tensor(rng, {3});
  Tape tape = Tape::inference();
  const Tensor y = conv2d(tape, x, w, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 2, 2}));
  const auto ref = conv_oracle(x, w, b, 1, 0);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-5);
}

TEST(Conv2d, RandomGeometriesMatchOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.uniform_int(3), c = 1 + rng.uniform_int(4), o = 1 + rng.uniform_int(5);
    const int k = 1 + static_cast<int>(rng.uniform_int(4)), s = 1 + static_cast<int>(rng.uniform_int(3));
    const int p = static_cast<int>(rng.uniform_int(3));
    const std::size_t h = static_cast<std::size_t>(k) + rng.uniform_int(6), w = static_cast<std::size_t>(k) + rng.uniform_int(6);
    Tensor x = random_tensor(rng, {n, c, h, w}), wt = random_tensor(rng, {o, c, (std::size_t)k, (std::size_t)k});
    Tensor b = random_tensor(rng, {o});
    Tape tape = Tape::inference();
    const Tensor y = conv2d(tape, x, wt, b, s, p);
    const auto ref = conv_oracle(x, wt, b, s, p);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.data()[i], ref[i], 1e-4) << "trial " << trial;
  }
}

TEST(Conv2d, ChannelMismatchNamesDimension) {
  Tape tape = Tape::inference();
  Tensor x({1, 2, 4, 4}), w({1, 3, 3, 3}), b({1});
  try {
    conv2d(tape, x, w, b, 1, 0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("dim 1"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputFails) {
  Tape tape = Tape::inference();
  Tensor x({1, 1, 2, 2}), w({1, 1, 5, 5}), b({1});
  EXPECT_THROW(conv2d(tape, x, w, b, 1, 1), ShapeError);
}

TEST(Relu, Values) {
  Tape tape = Tape::inference();
  const Tensor y = relu(tape, Tensor({3}, {-1.0f, 0.0f, 2.0f}));
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{0, 0, 2}));
  const Tensor pos({4}, {0.5f, 1.0f, 3.0f, 7.0f});
  const Tensor same = relu(tape, pos);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(same.data()[i], pos.data()[i]);
}

TEST(Relu, SubgradientOfSum) {
  Tensor x({2}, {-1.0f, 2.0f}, true);
  Tape tape;
  Tensor loss = sum(tape, relu(tape, x));
  tape.backward(loss);
  EXPECT_EQ(x.grad()[0], 0.0f);
  EXPECT_EQ(x.grad()[1], 1.0f);
}

TEST(MaxPool, SingleWindow) {
  Tape tape = Tape::inference();
  const Tensor y = max_pool2d(tape, Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2);
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_EQ(y.item(), 4.0f);
}

TEST(MaxPool, TiesRouteToFirstElement) {
  Tensor x({1, 1, 4, 4}, 3.0f, true);
  Tape tape;
  Tensor y = max_pool2d(tape, x, 2, 2);
  for (float v : y.data()) EXPECT_EQ(v, 3.0f);
  Tensor loss = sum(tape, y);
  tape.backward(loss);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_EQ(x.grad()[r * 4 + c], (r % 2 == 0 && c % 2 == 0) ? 1.0f : 0.0f) << r << "," << c;
}

TEST(MaxPool, MatchesWindowScan) {
  Rng rng(5);
  Tensor x = random_tensor(rng, {1, 1, 6, 6}, 1.0, false);
  Tape tape = Tape::inference();
  const Tensor y = max_pool2d(tape, x, 2, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (std::size_t oy = 0; oy < 3; ++oy)
    for (std::size_t ox = 0; ox < 3; ++ox) {
      float m = -std::numeric_limits<float>::infinity();
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, x.data()[(oy * 2 + dy) * 6 + ox * 2 + dx]);
      EXPECT_EQ(y.data()[oy * 3 + ox], m);
    }
}

TEST(MaxPool, WindowLargerThanInputFails) {
  Tape tape = Tape::inference();
  EXPECT_THROW(max_pool2d(tape, Tensor({1, 1, 2, 2}), 3, 1), ShapeError);
}

TEST(Linear, IdentityAndBiasOnly) {
  Tape tape = Tape::inference();
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), zero_b({3}, 0.0f);
  const Tensor y = linear(tape, x, eye, zero_b);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
  Tensor zero_w({2, 3}, 0.0f), b({2}, {0.5f, -1.5f});
  const Tensor z = linear(tape, x, zero_w, b);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(z.data()[r * 2], 0.5f);
    EXPECT_EQ(z.data()[r * 2 + 1], -1.5f);
  }
}

TEST(Linear, MatchesTripleLoop) {
  Rng rng(9);
  Tensor x = random_tensor(rng, {2, 3}), w = random_tensor(rng, {4, 3}), b = random_tensor(rng, {4});
  Tape tape = Tape::inference();
  const Tensor y = linear(tape, x, w, b);
  ASSERT_EQ(y.shape(), (Shape{2, 4}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c) {
      double acc = b.data()[c];
      for (std::size_t f = 0; f < 3; ++f) acc += static_cast<double>(x.data()[n * 3 + f]) * w.data()[c * 3 + f];
      EXPECT_NEAR(y.data()[n * 4 + c], acc, 1e-5);
    }
}

TEST(Linear, FeatureMismatch) {
  Tape tape = Tape::inference();
  EXPECT_THROW(linear(tape, Tensor({2, 3}), Tensor({4, 5}), Tensor({4})), ShapeError);
}

TEST(CrossEntropy, TwoEqualUnmaskedLogits) {
  Tape tape = Tape::inference();
  const std::vector<int> y = {0};
  const std::vector<bool> mask = {true, true, false, false};
  for (float junk : {-50.0f, 0.0f, 3.0f, 80.0f}) {
    const Tensor z({1, 4}, {1.25f, 1.25f, junk, -junk});
    EXPECT_NEAR(masked_softmax_cross_entropy(tape, z, y, mask).item(), std::log(2.0), 1e-6);
  }
}

TEST(CrossEntropy, DominantTargetGivesZero) {
  Tape tape = Tape::inference();
  const std::vector<int> y = {2};
  const Tensor z({1, 3}, {0.0f, 0.0f, 200.0f});
  EXPECT_NEAR(cross_entropy(tape, z, y).item(), 0.0, 1e-6);
}

TEST(CrossEntropy, MatchesLogSumExp) {
  Rng rng(21);
  Tape tape = Tape::inference();
  for (int trial = 0; trial < 20; ++trial) {
    Tensor z = random_tensor(rng, {4, 3}, 3.0, false);
    std::vector<int> y(4);
    for (auto& t : y) t = static_cast<int>(rng.uniform_int(3));
    double ref = 0;
    for (std::size_t n = 0; n < 4; ++n)
      ref += lse_ce_oracle({z.data()[n * 3], z.data()[n * 3 + 1], z.data()[n * 3 + 2]}, y[n]);
    EXPECT_NEAR(cross_entropy(tape, z, y).item(), ref / 4.0, 1e-6);
  }
}

TEST(CrossEntropy, MaskedLogitsDoNotMatter) {
  Rng rng(22);
  const std::vector<int> y = {0, 3, 3};
  const std::vector<bool> mask = {true, false, false, true, true};
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z = random_tensor(rng, {3, 5}, 2.0, true);
    Tensor z2(z.shape(), std::vector<float>(z.data().begin(), z.data().end()), true);
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t c : {1u, 2u}) z2.data()[n * 5 + c] = static_cast<float>(rng.normal() * 100.0);
    Tape t1, t2;
    Tensor l1 = masked_softmax_cross_entropy(t1, z, y, mask);
    Tensor l2 = masked_softmax_cross_entropy(t2, z2, y, mask);
    EXPECT_EQ(l1.item(), l2.item());
    t1.backward(l1);
    t2.backward(l2);
    for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_EQ(z.grad()[i], z2.grad()[i]);
  }
}

TEST(CrossEntropy, TargetOutsideMaskIsContractViolation) {
  Tape tape = Tape::inference();
  const std::vector<int> y = {1};
  EXPECT_THROW(masked_softmax_cross_entropy(tape, Tensor({1, 3}), y, {true, false, true}), ContractError);
  const std::vector<int> y0 = {0};
  EXPECT_THROW(masked_softmax_cross_entropy(tape, Tensor({1, 3}), y0, {false, false, false}), ContractError);
}

TEST(Mse, Values) {
  Tape tape = Tape::inference();
  EXPECT_EQ(mse(tape, Tensor({2}, {0, 0}), Tensor({2}, {2, 0})).item(), 2.0f);
  Tensor a({3}, {1, 2, 3});
  EXPECT_EQ(mse(tape, a, a).item(), 0.0f);
  Rng rng(4);
  Tensor p = random_tensor(rng, {7}), q = random_tensor(rng, {7});
  double ref = 0;
  for (std::size_t i = 0; i < 7; ++i) ref += std::pow(static_cast<double>(p.data()[i]) - q.data()[i], 2);
  EXPECT_NEAR(mse(tape, p, q).item(), ref / 7.0, 1e-6);
  EXPECT_THROW(mse(tape, Tensor({2}), Tensor({3})), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(1);
  Tensor theta = random_tensor(rng, {3, 4});
  Tape tape;
  Tensor loss = sum(tape, theta);
  tape.backward(loss);
  for (float g : theta.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, IndependentLossLeavesZeroGradient) {
  Rng rng(1);
  Tensor theta = random_tensor(rng, {3});
  Tensor other = random_tensor(rng, {3});
  Tape tape;
  Tensor loss = sum(tape, other);
  tape.backward(loss);
  if (theta.has_grad()) {
    for (float g : theta.grad()) EXPECT_EQ(g, 0.0f);
  }
}

TEST(Backward, AccumulatesAcrossTapes) {
  Tensor theta({2}, {1.0f, -2.0f}, true);
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    Tensor loss = sum(tape, theta);
    tape.backward(loss);
  }
  EXPECT_EQ(theta.grad()[0], 2.0f);
}

TEST(Backward, TapeErrors) {
  Tensor theta({2}, 1.0f, true);
  Tape tape;
  Tensor doubled = scale(tape, theta, 2.0f);
  EXPECT_THROW(tape.backward(doubled), TapeError);
  Tensor loss = sum(tape, doubled);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), TapeError);
  Tape other;
  Tensor stray({1}, 1.0f, true);
  EXPECT_THROW(other.backward(stray), TapeError);
}

TEST(Backward, ScalingTheLossScalesGradients) {
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    auto cases = cil::testing::gradient_cases(static_cast<std::uint64_t>(trial));
    for (auto& c : cases) {
      for (auto& p : c.params) p.drop_grad();
      {
        Tape tape;
        Tensor l = c.loss(tape);
        tape.backward(l);
      }
      std::vector<std::vector<float>> base;
      for (auto& p : c.params) base.emplace_back(p.grad().begin(), p.grad().end());
      for (auto& p : c.params) p.drop_grad();
      {
        Tape tape;
        Tensor l = scale(tape, c.loss(tape), 4.0f);
        tape.backward(l);
      }
      for (std::size_t k = 0; k < c.params.size(); ++k)
        for (std::size_t i = 0; i < base[k].size(); ++i)
          EXPECT_EQ(c.params[k].grad()[i], 4.0f * base[k][i]) << c.name;
    }
  }
}

TEST(Backward, Deterministic) {
  auto run = [] {
    auto cases = cil::testing::gradient_cases(77);
    auto& c = cases.back();
    Tape tape;
    Tensor l = c.loss(tape);
    tape.backward(l);
    std::vector<float> out{l.item()};
    for (auto& p : c.params) out.insert(out.end(), p.grad().begin(), p.grad().end());
    return out;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(GradientCheck, AllOpsTenSeeds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto cases = cil::testing::gradient_cases(seed);
    for (auto& c : cases) {
      const auto r = cil::testing::check_gradients(c);
      EXPECT_LE(r.worst_error, 1e-2) << c.name << " seed " << seed << " " << r.worst_param;
    }
  }
}

TEST(Sgd, PlainStep) {
  Parameter p{"w", Tensor({2}, {1.0f, 2.0f}, true), {}};
  p.value.ensure_grad()[0] = 0.5f;
  p.value.grad()[1] = -1.0f;
  Sgd opt({0.1f, 0.0f, 0.0f});
  opt.step(std::span<Parameter>(&p, 1));
  EXPECT_FLOAT_EQ(p.value.data()[0], 1.0f - 0.1f * 0.5f);
  EXPECT_FLOAT_EQ(p.value.data()[1], 2.0f + 0.1f);
  EXPECT_EQ(p.value.grad()[0], 0.0f);
  opt.step(std::span<Parameter>(&p, 1));
  EXPECT_FLOAT_EQ(p.value.data()[0], 1.0f - 0.1f * 0.5f);
}

TEST(Sgd, TwoStepMomentumRecurrence) {
  Parameter p{"w", Tensor({1}, {1.0f}, true), {}};
  const float lr = 0.1f, mu = 0.9f, wd = 0.01f;
  Sgd opt({lr, mu, wd});
  float theta = 1.0f, v = 0.0f;
  for (float g : {0.5f, -0.25f}) {
    p.value.ensure_grad()[0] = g;
    opt.step(std::span<Parameter>(&p, 1));
    v = mu * v + g + wd * theta;
    theta = theta - lr * v;
    EXPECT_EQ(p.value.data()[0], theta);
  }
}

TEST(Sgd, LockedElementsStay) {
  Parameter p{"w", Tensor({3}, {1.0f, 2.0f, 3.0f}, true), {0, 1, 0}};
  auto g = p.value.ensure_grad();
  std::fill(g.begin(), g.end(), 1.0f);
  Sgd opt({0.5f, 0.0f, 0.0f});
  opt.step(std::span<Parameter>(&p, 1));
  EXPECT_EQ(p.value.data()[1], 2.0f);
  EXPECT_EQ(p.value.data()[0], 0.5f);
}

TEST(Sgd, MissingGradientNamesParameter) {
  Parameter p{"stage3.weight", Tensor({2}, 1.0f, true), {}};
  Sgd opt;
  try {
    opt.step(std::span<Parameter>(&p, 1));
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("stage3.weight"), std::string::npos);
  }
}

TEST(Sgd, ConfigValidation) {
  EXPECT_THROW((SgdConfig{0.0f, 0.9f, 0.0f}.validate()), ConfigError);
  EXPECT_THROW((SgdConfig{0.1f, 1.0f, 0.0f}.validate()), ConfigError);
  EXPECT_THROW((SgdConfig{0.1f, 0.5f, -1.0f}.validate()), ConfigError);
  EXPECT_NO_THROW((SgdConfig{0.1f, 0.0f, 0.0f}.validate()));
}
