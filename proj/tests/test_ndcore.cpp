#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "droppatch/error.hpp"
#include "droppatch/grad_check.hpp"
#include "droppatch/ops.hpp"
#include "droppatch/tensor.hpp"
#include "grad_cases.hpp"
#include "test_util.hpp"

using namespace droppatch;
using nd::Tensor;

namespace {

// Standard normal CDF by composite Simpson integration of the density.
double phi_by_quadrature(double x) {
  const int n = 20000;
  const double lo = -12.0, h = (x - lo) / n;
  auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi); };
  double s = pdf(lo) + pdf(x);
  for (int i = 1; i < n; ++i) s += pdf(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(Matmul, HandArithmetic) {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(vec(nd::matmul(a, b).data()), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, IdentityIsBitExact) {
  Rng rng(3);
  Tensor a = testutil::random_tensor({3, 4}, rng, false);
  Tensor b = testutil::random_tensor({4, 5}, rng, false);
  std::vector<double> id(16, 0.0);
  for (int i = 0; i < 4; ++i) id[i * 5] = 1.0;
  Tensor eye = Tensor::from({4, 4}, id);
  EXPECT_EQ(vec(nd::matmul(a, eye).data()), vec(a.data()));
  EXPECT_EQ(vec(nd::matmul(nd::matmul(a, eye), b).data()), vec(nd::matmul(a, b).data()));
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  nd::backward(nd::sum(nd::matmul(a, b)));
  EXPECT_EQ(vec(a.grad()), (std::vector<double>{11, 15, 11, 15}));
  // independent check by central differences
  auto f = [&](const Tensor& x) { return nd::sum(nd::matmul(x, b)); };
  auto rep = nd::grad_check(f, Tensor::from({2, 2}, {1, 2, 3, 4}, true));
  EXPECT_TRUE(rep.passed);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    nd::matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(nd::shape_str({2, 3})), std::string::npos) << msg;
  }
}

TEST(Softmax, ClosedForms) {
  auto s = nd::softmax_lastdim(Tensor::from({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s.at(0), 0.5);
  EXPECT_DOUBLE_EQ(s.at(1), 0.5);
  s = nd::softmax_lastdim(Tensor::from({2}, {std::log(1.0), std::log(3.0)}));
  EXPECT_NEAR(s.at(0), 0.25, 1e-15);
  EXPECT_NEAR(s.at(1), 0.75, 1e-15);
  s = nd::softmax_lastdim(Tensor::from({2}, {1000, 1000}));
  EXPECT_DOUBLE_EQ(s.at(0), 0.5);
  EXPECT_TRUE(std::isfinite(s.at(1)));
}

TEST(Softmax, NonFiniteInputIsNumericError) {
  EXPECT_THROW(nd::softmax_lastdim(Tensor::from({2}, {NAN, 0})), NumericError);
}

TEST(Softmax, RowsAreStochasticProperty) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    Tensor x = testutil::random_tensor({3, 7}, rng, false, -30, 30);
    Tensor s = nd::softmax_lastdim(x);
    for (int r = 0; r < 3; ++r) {
      double sum = 0.0;
      for (int c = 0; c < 7; ++c) {
        const double v = s.at(r * 7 + c);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, Examples) {
  Tensor ones = Tensor::full({2}, 1.0), zeros = Tensor::zeros({2});
  auto y = nd::layer_norm(Tensor::from({2}, {1, 3}), ones, zeros, 1e-12);
  EXPECT_NEAR(y.at(0), -1.0, 1e-6);
  EXPECT_NEAR(y.at(1), 1.0, 1e-6);
  Tensor g3 = Tensor::full({3}, 1.0), b3 = Tensor::zeros({3});
  y = nd::layer_norm(Tensor::from({3}, {5, 5, 5}), g3, b3);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(y.at(i), 0.0);
  Tensor bias = Tensor::from({3}, {0.5, -1, 2});
  y = nd::layer_norm(Tensor::from({3}, {1, 7, -2}), Tensor::zeros({3}), bias);
  EXPECT_EQ(vec(y.data()), vec(bias.data()));
}

TEST(LayerNorm, ZeroExtentIsDimensionError) {
  EXPECT_THROW(nd::layer_norm(Tensor::zeros({2, 0}), Tensor::zeros({0}), Tensor::zeros({0})),
               DimensionError);
}

TEST(Gelu, Values) {
  auto y = nd::gelu(Tensor::from({3}, {0.0, 1.0, -10.0}));
  EXPECT_EQ(y.at(0), 0.0);
  EXPECT_NEAR(y.at(1), phi_by_quadrature(1.0), 1e-10);
  EXPECT_NEAR(y.at(1), 0.8413447460685429, 1e-12);
  EXPECT_LT(std::abs(y.at(2)), 1e-8);
}

TEST(Mse, SelectorExamples) {
  Tensor p = Tensor::zeros({5}), t = Tensor::full({5}, 1.0);
  const std::size_t three[] = {0, 2, 4};
  EXPECT_DOUBLE_EQ(nd::mse(p, t, three).item(), 1.0);
  EXPECT_DOUBLE_EQ(nd::mse(t, t).item(), 0.0);
  const std::size_t sel[] = {0, 1};
  EXPECT_DOUBLE_EQ(nd::mse(Tensor::from({3}, {1, 2, 9}), Tensor::from({3}, {1, 4, 0}), sel).item(), 2.0);
  EXPECT_DOUBLE_EQ(nd::mse(Tensor::from({3}, {1, 2, -500}), Tensor::from({3}, {1, 4, 0}), sel).item(), 2.0);
}

TEST(Mse, EmptySelectorIsError) {
  std::vector<std::size_t> none;
  EXPECT_THROW(nd::mse(Tensor::zeros({3}), Tensor::zeros({3}), none), Error);
}

TEST(Mse, GradientIsExactlyZeroOutsideSelector) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Tensor p = testutil::random_tensor({4, 6}, rng);
    Tensor t = testutil::random_tensor({4, 6}, rng, false);
    std::vector<std::size_t> sel;
    for (std::size_t i = 0; i < 24; ++i) {
      if (uniform01(rng) < 0.4) sel.push_back(i);
    }
    if (sel.empty()) sel.push_back(5);
    nd::backward(nd::mse(p, t, sel));
    for (std::size_t i = 0; i < 24; ++i) {
      if (std::find(sel.begin(), sel.end(), i) == sel.end()) EXPECT_EQ(p.grad()[i], 0.0);
    }
  }
}

TEST(Backward, Basics) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor loss = nd::sum(nd::mul(x, x));
  nd::backward(loss);
  EXPECT_EQ(vec(x.grad()), (std::vector<double>{2, 4}));
  EXPECT_THROW(nd::backward(loss), ContractError);
  EXPECT_THROW(nd::backward(nd::mul(x, x)), ContractError);
}

TEST(Backward, LeafWithoutRequiresGradHasNoGrad) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor c = Tensor::from({2}, {3, 4});
  nd::backward(nd::sum(nd::mul(x, c)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Backward, NoGradGuardStopsRecording) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  nd::NoGradGuard guard;
  Tensor y = nd::sum(nd::mul(x, x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, IntermediatesReleasedWhileSweeping) {
  // chains whose intermediates are only owned by the tape
  Tensor x = Tensor::from({1, 3}, {0.1, -0.2, 0.3}, true);
  Tensor w = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor loss = [&] {
    Tensor h = x;
    for (int i = 0; i < 20; ++i) h = nd::gelu(nd::matmul(h, w));
    return nd::sum(h);
  }();
  nd::backward(loss);
  EXPECT_TRUE(x.has_grad());
}

// Every op against central differences on inputs in [-2, 2], 20 seeds each.
TEST(GradCheck, AllOpsTwentySeeds) {
  using F = testutil::GradFn;
  const auto cases = testutil::grad_cases();
  for (const auto& c : cases) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(derive_seed(seed, 77));
      F f = c.make(rng);
      Tensor x = testutil::random_tensor(c.shape, rng);
      auto rep = nd::grad_check(f, x, 1e-6, 1e-4);
      EXPECT_TRUE(rep.passed) << c.name << " seed " << seed << " err " << rep.max_error;
    }
  }
}

TEST(GradCheck, SumOfSoftmaxHasZeroGradient) {
  Rng rng(1);
  auto f = [](const Tensor& x) { return nd::sum(nd::softmax_lastdim(x)); };
  auto rep = nd::grad_check(f, testutil::random_tensor({3, 4}, rng), 1e-6, 1e-5);
  EXPECT_TRUE(rep.passed);
  EXPECT_LE(rep.max_error, 1e-5);
}

TEST(GradCheck, DetectsWrongGradient) {
  // a function whose tape disagrees with its value: value uses x^2, tape sees 3x
  Tensor three = Tensor::full({3}, 3.0);
  auto f = [&](const Tensor& x) {
    Tensor honest = nd::sum(nd::mul(x, three));
    Tensor value_only;
    {
      nd::NoGradGuard g;
      value_only = nd::sub(nd::sum(nd::mul(x, x)), honest);
    }
    return nd::add(honest, value_only);
  };
  auto rep = nd::grad_check(f, Tensor::from({3}, {0.5, 1.0, 1.5}, true));
  EXPECT_FALSE(rep.passed);
}

TEST(FlopCounter, MatmulCountsTwoMkn) {
  nd::FlopCounter::reset();
  {
    nd::FlopScope scope("probe");
    nd::matmul(Tensor::zeros({3, 4}), Tensor::zeros({4, 5}));
  }
  EXPECT_EQ(nd::FlopCounter::get("probe"), 2u * 3 * 4 * 5);
}
