#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "dove/autodiff.hpp"
#include "dove/rng.hpp"

using namespace dove;
using namespace dove::ad;

namespace {

using D = double;
using VarD = Var<D>;
using TapeD = Tape<D>;
using BuildFn = std::function<VarD(TapeD&, std::vector<VarD>&)>;

// Compares analytic gradients against central differences. The graph builder
// must produce a scalar from the given leaves.
void grad_check(const std::vector<Tensor<D>>& inputs, const BuildFn& build, double tol = 1e-6,
                double eps = 1e-5) {
  TapeD tape;
  std::vector<VarD> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  VarD loss = build(tape, vars);
  ASSERT_EQ(loss.val().numel(), 1);
  tape.backward(loss);
  std::vector<Tensor<D>> analytic;
  for (auto v : vars) analytic.push_back(tape.grad(v));

  auto eval = [&](size_t k, int64_t i, double delta) {
    TapeD t2;
    std::vector<VarD> vs;
    for (size_t j = 0; j < inputs.size(); ++j) {
      Tensor<D> x = inputs[j];
      if (j == k) x[i] += delta;
      vs.push_back(t2.leaf(x));
    }
    VarD out = build(t2, vs);
    return t2.value(out)[0];
  };

  for (size_t k = 0; k < inputs.size(); ++k) {
    for (int64_t i = 0; i < inputs[k].numel(); ++i) {
      double num = (eval(k, i, eps) - eval(k, i, -eps)) / (2.0 * eps);
      double got = analytic[k][i];
      ASSERT_NEAR(got, num, tol * std::max(1.0, std::abs(num)))
          << "input " << k << " element " << i;
    }
  }
}

Tensor<D> rand_t(const Shape& s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng r(seed);
  return Tensor<D>::random_uniform(s, r, lo, hi);
}

// Weighted sum against a fixed random tensor so every output element has a
// distinct gradient.
VarD probe(TapeD& t, VarD y, uint64_t seed = 1234) {
  Tensor<D> w = rand_t(y.val().shape(), seed);
  return sum_all(mul(y, t.constant(std::move(w))));
}

}  // namespace

TEST(Autodiff, ForwardValues) {
  TapeD t;
  auto a = t.leaf(Tensor<D>({2, 2}, {1, 2, 3, 4}));
  auto b = t.leaf(Tensor<D>({2, 2}, {5, 6, 7, 8}));
  EXPECT_DOUBLE_EQ(add(a, b).val()[3], 12.0);
  EXPECT_DOUBLE_EQ(sub(a, b).val()[0], -4.0);
  EXPECT_DOUBLE_EQ(mul(a, b).val()[1], 12.0);
  EXPECT_DOUBLE_EQ(divide(b, a).val()[2], 7.0 / 3.0);
  auto mm = matmul(a, b);
  EXPECT_DOUBLE_EQ(mm.val().at(0, 0), 19.0);
  EXPECT_DOUBLE_EQ(mm.val().at(1, 1), 50.0);
  EXPECT_DOUBLE_EQ(transpose2d(a).val().at(0, 1), 3.0);
  EXPECT_DOUBLE_EQ(sum_all(a).val()[0], 10.0);
  EXPECT_DOUBLE_EQ(mean_all(a).val()[0], 2.5);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  TapeD t;
  auto x = t.leaf(rand_t({4, 7}, 3, -3.0, 3.0));
  auto y = softmax_rows(x);
  for (int64_t i = 0; i < 4; ++i) {
    double s = 0;
    for (int64_t j = 0; j < 7; ++j) s += y.val().at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autodiff, ElementwiseGrads) {
  auto a = rand_t({3, 4}, 10);
  auto b = rand_t({3, 4}, 11, 0.5, 2.0);
  grad_check({a, b}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, add(v[0], v[1])); });
  grad_check({a, b}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, sub(v[0], v[1])); });
  grad_check({a, b}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, mul(v[0], v[1])); });
  grad_check({a, b},
             [](TapeD& t, std::vector<VarD>& v) { return probe(t, divide(v[0], v[1])); });
  grad_check({a}, [](TapeD& t, std::vector<VarD>& v) {
    return probe(t, scalar_mul(scalar_add(v[0], 0.3), -1.7));
  });
}

TEST(Autodiff, ActivationGrads) {
  auto x = rand_t({2, 5}, 20, -2.0, 2.0);
  // Keep relu/abs inputs away from the kink.
  for (int64_t i = 0; i < x.numel(); ++i)
    if (std::abs(x[i]) < 0.1) x[i] += 0.2;
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, sigmoid(v[0])); });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, silu(v[0])); });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, gelu(v[0])); });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, relu(v[0])); });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, abs_val(v[0])); });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, square(v[0])); });
}

TEST(Autodiff, MatmulAndLinearGrads) {
  auto x = rand_t({3, 4}, 30);
  auto w = rand_t({4, 5}, 31);
  auto b = rand_t({1, 5}, 32);
  grad_check({x, w},
             [](TapeD& t, std::vector<VarD>& v) { return probe(t, matmul(v[0], v[1])); });
  grad_check({x, w, b}, [](TapeD& t, std::vector<VarD>& v) {
    return probe(t, linear(v[0], v[1], v[2]));
  });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, transpose2d(v[0])); });
  grad_check({x, rand_t({1, 4}, 33)}, [](TapeD& t, std::vector<VarD>& v) {
    return probe(t, add_row_vector(v[0], v[1]));
  });
}

TEST(Autodiff, SoftmaxLayerNormGrads) {
  auto x = rand_t({3, 6}, 40, -2.0, 2.0);
  grad_check(
      {x}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, softmax_rows(v[0])); }, 1e-5);
  auto g = rand_t({1, 6}, 41, 0.5, 1.5);
  auto b = rand_t({1, 6}, 42);
  grad_check(
      {x, g, b},
      [](TapeD& t, std::vector<VarD>& v) {
        return probe(t, layer_norm(v[0], v[1], v[2]));
      },
      1e-5);
}

TEST(Autodiff, ShapeOpsGrads) {
  auto x = rand_t({4, 6}, 50);
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) {
    return probe(t, reshape(v[0], {2, 12}));
  });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) {
    return probe(t, slice_rows(v[0], 1, 2));
  });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) {
    return probe(t, slice_cols(v[0], 2, 3));
  });
  auto y = rand_t({2, 6}, 51);
  grad_check({x, y}, [](TapeD& t, std::vector<VarD>& v) {
    return probe(t, concat_rows<D>({v[0], v[1]}));
  });
  auto z = rand_t({4, 3}, 52);
  grad_check({x, z}, [](TapeD& t, std::vector<VarD>& v) {
    return probe(t, concat_cols<D>({v[0], v[1]}));
  });
  grad_check({x, z}, [](TapeD& t, std::vector<VarD>& v) {
    return probe(t, concat_flat<D>({v[0], v[1]}, {36}));
  });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, gather_row(v[0], 2)); });

  // Permutation gather: reverse the flat order.
  auto idx = std::make_shared<std::vector<int64_t>>();
  for (int64_t i = 23; i >= 0; --i) idx->push_back(i);
  grad_check({x}, [idx](TapeD& t, std::vector<VarD>& v) {
    return probe(t, gather_elems(v[0], idx, {24}));
  });
  // Gather with repeats accumulates.
  auto idx2 = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 0, 5, 7});
  grad_check({x}, [idx2](TapeD& t, std::vector<VarD>& v) {
    return probe(t, gather_elems(v[0], idx2, {4}));
  });
}

TEST(Autodiff, ReductionGrads) {
  auto x = rand_t({2, 3, 4}, 60);
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return sum_all(v[0]); });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return mean_all(v[0]); });
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) { return probe(t, mean_hw(v[0])); });
  auto y = rand_t({2, 3, 4}, 61);
  grad_check({x, y}, [](TapeD& t, std::vector<VarD>& v) { return mse(v[0], v[1]); });
}

TEST(Autodiff, ConvGrads) {
  auto x = rand_t({2, 5, 6}, 70);
  auto w = rand_t({3, 2, 3, 3}, 71);
  auto b = rand_t({3}, 72);
  grad_check(
      {x, w, b},
      [](TapeD& t, std::vector<VarD>& v) {
        return probe(t, conv2d(v[0], v[1], v[2], 1, 1));
      },
      1e-5);
  grad_check(
      {x, w, b},
      [](TapeD& t, std::vector<VarD>& v) {
        return probe(t, conv2d(v[0], v[1], v[2], 2, 1));
      },
      1e-5);
}

TEST(Autodiff, ConvForwardHandCase) {
  // 1x1 kernel acts per pixel: y = w*x + b.
  TapeD t;
  auto x = t.leaf(Tensor<D>({1, 2, 2}, {1, 2, 3, 4}));
  auto w = t.leaf(Tensor<D>({1, 1, 1, 1}, {2.0}));
  auto b = t.leaf(Tensor<D>({1}, {0.5}));
  auto y = conv2d(x, w, b);
  EXPECT_DOUBLE_EQ(y.val()[0], 2.5);
  EXPECT_DOUBLE_EQ(y.val()[3], 8.5);
  EXPECT_EQ(y.val().shape(), (Shape{1, 2, 2}));
}

TEST(Autodiff, ConvStrideShapes) {
  TapeD t;
  auto x = t.leaf(rand_t({3, 8, 10}, 73));
  auto w = t.leaf(rand_t({4, 3, 3, 3}, 74));
  auto b = t.leaf(rand_t({4}, 75));
  EXPECT_EQ(conv2d(x, w, b, 1, 1).val().shape(), (Shape{4, 8, 10}));
  EXPECT_EQ(conv2d(x, w, b, 2, 1).val().shape(), (Shape{4, 4, 5}));
}

TEST(Autodiff, UpsampleGradsAndValues) {
  TapeD t;
  auto x = t.leaf(Tensor<D>({1, 1, 2}, {3.0, 7.0}));
  auto y = upsample_nearest2(x);
  EXPECT_EQ(y.val().shape(), (Shape{1, 2, 4}));
  EXPECT_DOUBLE_EQ(y.val()[0], 3.0);
  EXPECT_DOUBLE_EQ(y.val()[1], 3.0);
  EXPECT_DOUBLE_EQ(y.val()[2], 7.0);
  EXPECT_DOUBLE_EQ(y.val()[7], 7.0);
  grad_check({rand_t({2, 3, 4}, 76)}, [](TapeD& tp, std::vector<VarD>& v) {
    return probe(tp, upsample_nearest2(v[0]));
  });
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  auto x = rand_t({3, 3}, 80);
  grad_check({x}, [](TapeD& t, std::vector<VarD>& v) {
    auto y = add(mul(v[0], v[0]), v[0]);
    return mean_all(add(y, mul(y, v[0])));
  });
}

TEST(Autodiff, ConstantsGetNoGradient) {
  TapeD t;
  auto c = t.constant(rand_t({2, 2}, 90));
  auto x = t.leaf(rand_t({2, 2}, 91));
  auto loss = mean_all(mul(c, x));
  t.backward(loss);
  EXPECT_FALSE(t.needs_grad(c));
  // Gradient buffers for constants stay empty and read back as zeros.
  EXPECT_EQ(t.grad(c).max_abs_diff(Tensor<D>::zeros({2, 2})), 0.0);
  EXPECT_GT(t.grad(x).max_abs_diff(Tensor<D>::zeros({2, 2})), 0.0);
}

TEST(Autodiff, BackwardRequiresScalarRoot) {
  TapeD t;
  auto x = t.leaf(rand_t({2, 2}, 92));
  auto y = add(x, x);
  EXPECT_THROW(t.backward(y), ArgumentError);
}

TEST(Autodiff, MixedTapeRejected) {
  TapeD t1, t2;
  auto a = t1.leaf(rand_t({2}, 93));
  auto b = t2.leaf(rand_t({2}, 94));
  EXPECT_THROW(add(a, b), ArgumentError);
}
