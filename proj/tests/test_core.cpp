#include <gtest/gtest.h>

#include <sstream>

#include "dda/log.hpp"
#include "dda/nn.hpp"
#include "dda/optim.hpp"
#include "test_util.hpp"

using namespace dda;
using oracle::Vec;

TEST(Tensor, RejectsDataThatDoesNotMatchShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r[5], 6);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
}

TEST(Tensor, FiniteCheck) {
  Tensor t({2}, {1.0, 2.0});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
  Var x(Tensor({1}, {3.0}), true);
  // f = x*x + x  ->  f' = 2x + 1 = 7
  Var f = ops::add(ops::mul(x, x), x);
  f.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  Var x(Tensor({1}, {2.0}), true);
  Var y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    y = ops::mul(x, x);
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, DetachCutsTheGraph) {
  Var x(Tensor({1}, {2.0}), true);
  Var y = ops::mul(x, x).detach();
  EXPECT_FALSE(y.requires_grad());
}

TEST(Ops, ShapeMismatchThrows) {
  Var a(Tensor({2, 2})), b(Tensor({2, 3}));
  EXPECT_THROW(ops::add(a, b), ShapeError);
}

TEST(Ops, LogSoftmaxRowsNormalize) {
  std::mt19937_64 rng(1);
  Var a(oracle::tensor({4, 5}, oracle::random_vec(20, rng)));
  auto ls = ops::log_softmax(a).value();
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += std::exp(ls[i * 5 + c]);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, LogSoftmaxIsStableForLargeLogits) {
  Var a(Tensor({1, 3}, {1000.0, 0.0, -1000.0}));
  auto ls = ops::log_softmax(a).value();
  EXPECT_TRUE(ls.all_finite());
  EXPECT_NEAR(ls[0], 0.0, 1e-12);
}

TEST(Ops, ChannelMomentsMatchScalarLoops) {
  std::mt19937_64 rng(2);
  const Vec x = oracle::random_vec(3 * 4 * 5, rng);
  Var v(oracle::tensor({3, 4, 5, 1}, x));
  Vec mean, var;
  oracle::channel_moments(x, 3, 4, 5, mean, var);
  auto m = ops::channel_mean(v).value(), s = ops::channel_var(v).value();
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(m[c], mean[c], 1e-12);
    EXPECT_NEAR(s[c], var[c], 1e-12);
  }
}

// Finite-difference checks for the differentiable primitives the losses and
// models are built from.
class OpGradients : public ::testing::Test {
 protected:
  std::mt19937_64 rng{7};
  void expect_ok(const Shape& shape, const testutil::ScalarFn& f, double tol = 1e-6) {
    const auto r = testutil::grad_check(shape, oracle::random_vec(numel(shape), rng), f);
    EXPECT_LT(r.relative_error, tol);
  }
  // Fixed random weights so the scalar depends on every output element.
  Var weights(const Shape& shape) { return Var(oracle::tensor(shape, oracle::random_vec(numel(shape), rng))); }
};

TEST_F(OpGradients, Elementwise) {
  auto w = weights({3, 4});
  expect_ok({3, 4}, [&](const Var& x) { return ops::sum(ops::mul(ops::sigmoid(x), w)); });
  expect_ok({3, 4}, [&](const Var& x) { return ops::sum(ops::mul(ops::leaky_relu(x, 0.2), w)); });
  expect_ok({3, 4}, [&](const Var& x) { return ops::norm2(ops::add_scalar(x, 0.3)); });
}

TEST_F(OpGradients, LinearAndSoftmax) {
  auto w = weights({5, 4}), b = weights({5}), u = weights({3, 5});
  expect_ok({3, 4}, [&](const Var& x) { return ops::sum(ops::mul(ops::log_softmax(ops::linear(x, w, b)), u)); });
  expect_ok({3, 4}, [&](const Var& x) { return ops::sum(ops::mul(ops::softmax(ops::linear(x, w, b)), u)); });
  auto x0 = weights({3, 4});
  expect_ok({5, 4}, [&](const Var& wv) { return ops::sum(ops::mul(ops::linear(x0, wv, b), u)); });
}

TEST_F(OpGradients, ConvolutionPoolingUpsampling) {
  auto w = weights({3, 2, 3, 3}), b = weights({3});
  auto u = weights({2, 3, 2, 2}), g = weights({2, 3, 4, 4}), t = weights({2, 3, 8, 8});
  auto x0 = weights({2, 2, 4, 4}), p = weights({2, 3});
  expect_ok({2, 2, 4, 4}, [&](const Var& x) { return ops::sum(ops::mul(ops::conv2d(x, w, b, 1), g)); });
  expect_ok({3, 2, 3, 3}, [&](const Var& wv) {
    return ops::sum(ops::mul(ops::conv2d(x0, wv, b, 1), g));
  });
  expect_ok({2, 3, 4, 4}, [&](const Var& x) { return ops::sum(ops::mul(ops::avg_pool2(x), u)); });
  expect_ok({2, 3, 4, 4}, [&](const Var& x) { return ops::sum(ops::mul(ops::upsample2(x), t)); });
  expect_ok({2, 3, 4, 4}, [&](const Var& x) { return ops::sum(ops::mul(ops::global_avg_pool(x), p)); });
}

TEST_F(OpGradients, BatchNormTraining) {
  auto gamma = weights({3}), beta = weights({3}), g = weights({4, 3, 2, 2}), c = weights({3});
  expect_ok({4, 3, 2, 2}, [&](const Var& x) { return ops::sum(ops::mul(ops::batch_norm_train(x, gamma, beta, 1e-5), g)); }, 1e-5);
  expect_ok({4, 3, 2, 2}, [&](const Var& x) { return ops::sum(ops::mul(ops::channel_var(x), c)); });
}

TEST_F(OpGradients, Cosines) {
  auto other = weights({3, 4}), u = weights({3, 5}), r = weights({3}), neg = weights({5, 4});
  expect_ok({3, 4}, [&](const Var& x) { return ops::sum(ops::mul(ops::cosine_rows(x, other, 1e-8), r)); });
  expect_ok({3, 4}, [&](const Var& x) { return ops::sum(ops::mul(ops::cosine_matrix(x, neg, 1e-8), u)); });
}

TEST(Optim, SgdMatchesHandComputedStep) {
  Var p(Tensor({1}, {1.0}), true);
  optim::Sgd opt({p}, 0.1, 0.9, 0.0);
  for (int i = 0; i < 2; ++i) {
    opt.zero_grad();
    ops::mul(p, p).backward();  // grad 2p
    opt.step();
  }
  // v1 = 2, p1 = 0.8; v2 = 0.9*2 + 1.6 = 3.4, p2 = 0.8 - 0.34
  EXPECT_NEAR(p.value()[0], 0.46, 1e-12);
}

TEST(Optim, AdamFirstStepHasLearningRateMagnitude) {
  Var p(Tensor({2}, {1.0, -3.0}), true);
  optim::Adam opt({p}, 0.01);
  opt.zero_grad();
  ops::sum(ops::mul(p, p)).backward();
  opt.step();
  EXPECT_NEAR(p.value()[0], 0.99, 1e-6);
  EXPECT_NEAR(p.value()[1], -2.99, 1e-6);
}

TEST(Optim, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(optim::cosine_lr(0.1, 0, 10), 0.1);
  EXPECT_NEAR(optim::cosine_lr(0.1, 5, 10), 0.05, 1e-12);
  EXPECT_NEAR(optim::cosine_lr(0.1, 10, 10), 0.0, 1e-12);
}

TEST(Log, LevelsFilterAndSinkReceives) {
  std::vector<std::string> got;
  auto prev = log::set_sink([&](log::Level, std::string_view m) { got.emplace_back(m); });
  log::set_level(log::Level::warn);
  log::info("hidden");
  log::warn("shown");
  log::set_level(log::Level::info);
  log::set_sink(prev);
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0], "shown");
}

TEST(Errors, PipelineFaultCarriesStage) {
  PipelineFault f("synthesis", "loss became NaN");
  EXPECT_EQ(f.stage(), "synthesis");
  EXPECT_NE(std::string(f.what()).find("synthesis"), std::string::npos);
}
