#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cseg/nn.hpp"
#include "test_util.hpp"

using namespace cseg;
using cseg::testing::check_layer_gradients;
using cseg::testing::random_tensor;

TEST_CASE("kernel_param_count formulas") {
  CHECK(kernel_param_count({KernelKind::Projection, 4, 8}) == 32);
  CHECK(kernel_param_count({KernelKind::Conv2D, 4, 8}) == 4 * 8 * 9);
  CHECK(kernel_param_count({KernelKind::PseudoP3D, 4, 8}) == 4 * 8 * 9 + 8 * 8 * 3);
  CHECK(kernel_param_count({KernelKind::Conv3D, 4, 8}) == 4 * 8 * 27);
}

TEST_CASE("kernel ratios exact for square channel counts") {
  for (int c = 1; c <= 64; ++c) {
    const auto c2d = kernel_param_count({KernelKind::Conv2D, c, c});
    const auto p3d = kernel_param_count({KernelKind::PseudoP3D, c, c});
    const auto c3d = kernel_param_count({KernelKind::Conv3D, c, c});
    CHECK(3 * c2d == c3d);
    CHECK(9 * p3d == 4 * c3d);
  }
}

TEST_CASE("conv weight tensor matches analytic count") {
  Rng rng(1);
  for (KernelKind k : kAllKernelKinds) {
    Conv<float> conv(KernelSpec{k, 3, 5}, rng.fork(static_cast<int>(k)));
    std::int64_t weights = 0;
    for (auto* p : conv.params())
      if (p->value.rank() == 5) weights += p->value.numel();
    CHECK(weights == kernel_param_count({k, 3, 5}));
  }
}

TEST_CASE("leaky relu example") {
  LeakyReLU<float> lr(0.01);
  Tensor x({1, 1, 1, 1, 2});
  x[0] = -1.0f;
  x[1] = 2.0f;
  Layer<float> l = lr;
  Tensor y = forward(l, x, Mode::Eval);
  CHECK(y[0] == doctest::Approx(-0.01));
  CHECK(y[1] == doctest::Approx(2.0));
}

TEST_CASE("zero-weight conv gives pure bias output") {
  Rng rng(5);
  Conv<float> conv(KernelSpec{KernelKind::Conv3D, 2, 3}, rng);
  for (auto* p : conv.params()) p->value.zero();
  conv.params()[1]->value[1] = 0.25f;  // bias of channel 1
  Tensor x = testing::random_tensor_f({1, 2, 4, 4, 4}, rng);
  Layer<float> l = conv;
  Tensor y = forward(l, x, Mode::Eval);
  for (int j = 0; j < 64; ++j) {
    CHECK(y[j] == 0.0f);
    CHECK(y[64 + j] == 0.25f);
    CHECK(y[128 + j] == 0.0f);
  }
}

TEST_CASE("identity projection conv passes gradient through") {
  Rng rng(6);
  Conv<float> conv(KernelSpec{KernelKind::Projection, 2, 2}, rng);
  auto ps = conv.params();
  ps[0]->value.zero();
  ps[0]->value.at5(0, 0, 0, 0, 0) = 1.0f;
  ps[0]->value.at5(1, 1, 0, 0, 0) = 1.0f;
  ps[1]->value.zero();
  Tensor x = testing::random_tensor_f({1, 2, 2, 2, 2}, rng);
  Layer<float> l = conv;
  forward(l, x, Mode::Train);
  Tensor g = testing::random_tensor_f({1, 2, 2, 2, 2}, rng);
  Tensor gin = backward(l, g);
  CHECK(checksum(gin) == checksum(g));
}

TEST_CASE("relu backward zero at negative inputs") {
  ReLU<float> relu;
  Tensor x({1, 1, 1, 1, 3});
  x[0] = -2.0f;
  x[1] = 0.5f;
  x[2] = -0.1f;
  Layer<float> l = relu;
  forward(l, x, Mode::Train);
  Tensor g = Tensor::full({1, 1, 1, 1, 3}, 1.0f);
  Tensor gin = backward(l, g);
  CHECK(gin[0] == 0.0f);
  CHECK(gin[1] == 1.0f);
  CHECK(gin[2] == 0.0f);
}

TEST_CASE("softmax uniform at equal logits") {
  SoftmaxOverChannels<float> sm;
  Tensor x({1, 2, 1, 1, 1});
  Layer<float> l = sm;
  Tensor y = forward(l, x, Mode::Eval);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == doctest::Approx(0.5));
}

TEST_CASE("softmax active mask restricts the distribution") {
  SoftmaxOverChannels<float> sm;
  sm.set_active({1, 0, 1});
  Tensor x({1, 3, 1, 1, 1});
  x[1] = 50.0f;  // masked channel must not matter
  Layer<float> l = sm;
  Tensor y = forward(l, x, Mode::Eval);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == 0.0f);
  CHECK(y[2] == doctest::Approx(0.5));
}

TEST_CASE("backward without cached forward is an error") {
  Rng rng(2);
  Layer<float> conv = Conv<float>(KernelSpec{KernelKind::Conv2D, 1, 1}, rng);
  Tensor g({1, 1, 2, 2, 2});
  CHECK_THROWS_AS(backward(conv, g), Error);
  Layer<float> mp = MaxPool<float>(2, 2);
  CHECK_THROWS_AS(backward(mp, g), Error);
}

TEST_CASE("deterministic init per seed") {
  Conv<float> a(KernelSpec{KernelKind::Conv3D, 3, 4}, Rng(99));
  Conv<float> b(KernelSpec{KernelKind::Conv3D, 3, 4}, Rng(99));
  CHECK(params_checksum<float>(a.params()) == params_checksum<float>(b.params()));
  Conv<float> c(KernelSpec{KernelKind::Conv3D, 3, 4}, Rng(100));
  CHECK(params_checksum<float>(c.params()) != params_checksum<float>(a.params()));
}

TEST_CASE("gradient check: every layer kind") {
  Rng rng(2024);
  auto input = [&](int c) { return random_tensor({2, c, 3, 4, 4}, rng); };

  SUBCASE("projection conv") {
    Layer<double> l = Conv<double>(KernelSpec{KernelKind::Projection, 2, 3}, rng.fork(1));
    CHECK(check_layer_gradients(l, input(2), rng) < 1e-3);
  }
  SUBCASE("conv2d") {
    Layer<double> l = Conv<double>(KernelSpec{KernelKind::Conv2D, 2, 3}, rng.fork(2));
    CHECK(check_layer_gradients(l, input(2), rng) < 1e-3);
  }
  SUBCASE("p3d conv") {
    Layer<double> l = Conv<double>(KernelSpec{KernelKind::PseudoP3D, 2, 3}, rng.fork(3));
    CHECK(check_layer_gradients(l, input(2), rng) < 1e-3);
  }
  SUBCASE("conv3d 2x3x4x4x4") {
    Layer<double> l = Conv<double>(KernelSpec{KernelKind::Conv3D, 3, 2}, rng.fork(4));
    CHECK(check_layer_gradients(l, random_tensor({2, 3, 4, 4, 4}, rng), rng) < 1e-3);
  }
  SUBCASE("instance norm") {
    Layer<double> l = InstanceNorm<double>(3);
    CHECK(check_layer_gradients(l, input(3), rng) < 1e-3);
  }
  SUBCASE("batch norm") {
    Layer<double> l = BatchNorm<double>(3);
    CHECK(check_layer_gradients(l, input(3), rng) < 1e-3);
  }
  SUBCASE("batch norm with frozen stats") {
    BatchNorm<double> bn(3);
    bn.running_mean()[1] = 0.3;
    bn.running_var()[2] = 2.0;
    bn.set_frozen_stats(true);
    Layer<double> l = bn;
    CHECK(check_layer_gradients(l, input(3), rng) < 1e-3);
  }
  SUBCASE("leaky relu") {
    Layer<double> l = LeakyReLU<double>(0.01);
    CHECK(check_layer_gradients(l, input(2), rng) < 1e-3);
  }
  SUBCASE("relu") {
    Layer<double> l = ReLU<double>();
    CHECK(check_layer_gradients(l, input(2), rng) < 1e-3);
  }
  SUBCASE("max pool") {
    Layer<double> l = MaxPool<double>(2, 2);
    CHECK(check_layer_gradients(l, random_tensor({2, 2, 4, 4, 4}, rng), rng) < 1e-3);
  }
  SUBCASE("nearest upsample") {
    Layer<double> l = NearestUpsample<double>(2);
    CHECK(check_layer_gradients(l, random_tensor({1, 2, 2, 2, 2}, rng), rng) < 1e-3);
  }
  SUBCASE("softmax over channels") {
    Layer<double> l = SoftmaxOverChannels<double>();
    CHECK(check_layer_gradients(l, input(3), rng) < 1e-3);
  }
}

TEST_CASE("shape algebra: grad_in has the input shape") {
  Rng rng(11);
  std::vector<Layer<float>> layers;
  layers.emplace_back(Conv<float>(KernelSpec{KernelKind::PseudoP3D, 3, 5}, rng.fork(1)));
  layers.emplace_back(InstanceNorm<float>(3));
  layers.emplace_back(BatchNorm<float>(3));
  layers.emplace_back(LeakyReLU<float>(0.1));
  layers.emplace_back(MaxPool<float>(2, 2));
  layers.emplace_back(NearestUpsample<float>(2));
  layers.emplace_back(SoftmaxOverChannels<float>());
  for (auto& l : layers) {
    Tensor x = testing::random_tensor_f({2, 3, 4, 4, 4}, rng);
    Tensor y = forward(l, x, Mode::Train);
    Tensor g(y.shape());
    Tensor gin = backward(l, g);
    CHECK(gin.shape() == x.shape());
  }
}

TEST_CASE("forward determinism: identical seeds and inputs, identical bytes") {
  auto run = [] {
    Rng rng(31);
    Conv<float> conv(KernelSpec{KernelKind::Conv3D, 2, 4}, rng.fork(0));
    Tensor x = testing::random_tensor_f({2, 2, 4, 4, 4}, rng);
    Layer<float> l = conv;
    return checksum(forward(l, x, Mode::Eval));
  };
  CHECK(run() == run());
}

TEST_CASE("sgd examples") {
  Param<float> p;
  p.value = Tensor::full({1}, 1.0f);
  p.init_buffers();
  p.grad[0] = 0.5f;
  sgd_step(p, 0.1f, 0.0f, false);
  CHECK(p.value[0] == doctest::Approx(0.95));

  // zero grad leaves params unchanged at zero momentum
  p.grad[0] = 0.0f;
  sgd_step(p, 0.1f, 0.0f, false);
  CHECK(p.value[0] == doctest::Approx(0.95));

  CHECK_THROWS_AS(sgd_step(p, 0.0f, 0.0f, false), ConfigError);
  CHECK_THROWS_AS(sgd_step(p, -1.0f, 0.0f, false), ConfigError);
}

TEST_CASE("nesterov momentum update") {
  Param<float> p;
  p.value = Tensor::full({1}, 1.0f);
  p.init_buffers();
  p.grad[0] = 1.0f;
  sgd_step(p, 0.1f, 0.9f, true);
  // v = 1, step = lr*(g + mu*v) = 0.1*1.9
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.19));
  p.grad[0] = 1.0f;
  sgd_step(p, 0.1f, 0.9f, true);
  // v = 0.9 + 1 = 1.9, step = 0.1*(1 + 0.9*1.9)
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.19 - 0.1 * (1.0 + 0.9 * 1.9)));
}

TEST_CASE("polynomial lr decay") {
  CHECK(poly_lr(0.01, 0, 100) == doctest::Approx(0.01));
  CHECK(poly_lr(0.01, 50, 100) == doctest::Approx(0.005359).epsilon(1e-3));
  CHECK(poly_lr(0.01, 100, 100) == doctest::Approx(0.0));
}

TEST_CASE("frozen parameter store rejects writes") {
  Param<float> p;
  p.value = Tensor::full({2}, 1.0f);
  p.init_buffers();
  p.frozen = true;
  Tensor g = Tensor::full({2}, 1.0f);
  CHECK_THROWS_AS(p.add_grad(g), FrozenError);
  CHECK_THROWS_AS(sgd_step(p, 0.1f, 0.0f, false), FrozenError);
}
