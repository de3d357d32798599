#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <functional>
#include <random>

#include "mirror/autograd.hpp"

using namespace mirror;
using Mat = ad::Matrix<double>;
using V = ad::Var<double>;

namespace {

Mat random_mat(int r, int c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Builds a scalar from the given inputs on a fresh tape; compares every input
// gradient with central differences.
double max_rel_error(std::vector<Mat> inputs, const std::function<V(ad::Tape<double>&, std::vector<V>&)>& f) {
  auto eval = [&](const std::vector<Mat>& xs) {
    ad::Tape<double> tape;
    std::vector<V> vars;
    for (std::size_t i = 0; i < xs.size(); ++i) vars.push_back(tape.param(static_cast<int>(i), xs[i]));
    return f(tape, vars).value()(0, 0);
  };
  ad::Tape<double> tape;
  std::vector<V> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.param(static_cast<int>(i), inputs[i]));
  V out = f(tape, vars);
  tape.backward(out);
  std::vector<Mat> analytic;
  for (const auto& v : vars) analytic.push_back(tape.grad(v.id));

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
      const double x0 = inputs[i].data()[k];
      const double h = 1e-5 * std::max(1.0, std::abs(x0));
      inputs[i].data()[k] = x0 + h;
      const double fp = eval(inputs);
      inputs[i].data()[k] = x0 - h;
      const double fm = eval(inputs);
      inputs[i].data()[k] = x0;
      const double num = (fp - fm) / (2 * h);
      const double a = analytic[i].data()[k];
      const double denom = std::max({std::abs(a), std::abs(num), 1e-6});
      worst = std::max(worst, std::abs(a - num) / denom);
    }
  }
  return worst;
}

// Random projection so the scalar depends on every output entry differently.
V project(ad::Tape<double>& t, const V& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Mat w = random_mat(static_cast<int>(x.rows()), static_cast<int>(x.cols()), rng);
  return ad::sum(ad::mul(x, t.constant(w)));
}

}  // namespace

TEST(Autograd, ElementwiseOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(1);
  const std::vector<Mat> in{random_mat(3, 4, rng), random_mat(3, 4, rng)};
  EXPECT_LT(max_rel_error(in, [](auto& t, auto& v) { return project(t, ad::add(v[0], v[1]), 1); }), 1e-6);
  EXPECT_LT(max_rel_error(in, [](auto& t, auto& v) { return project(t, ad::sub(v[0], v[1]), 2); }), 1e-6);
  EXPECT_LT(max_rel_error(in, [](auto& t, auto& v) { return project(t, ad::mul(v[0], v[1]), 3); }), 1e-6);
  EXPECT_LT(max_rel_error(in, [](auto& t, auto& v) { return project(t, ad::scale(v[0], 2.5), 4); }), 1e-6);
  EXPECT_LT(max_rel_error(in, [](auto& t, auto& v) { return project(t, ad::exp(v[0]), 5); }), 1e-6);
  EXPECT_LT(max_rel_error(in, [](auto& t, auto& v) { return project(t, ad::gelu(v[0]), 6); }), 1e-6);
  EXPECT_LT(max_rel_error(in, [](auto& t, auto& v) { return project(t, ad::clamp(v[0], -0.5, 0.5), 7); }), 1e-6);
}

TEST(Autograd, LinearAlgebraOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(2);
  EXPECT_LT(max_rel_error({random_mat(3, 4, rng), random_mat(4, 5, rng)},
                          [](auto& t, auto& v) { return project(t, ad::matmul(v[0], v[1]), 8); }),
            1e-6);
  EXPECT_LT(max_rel_error({random_mat(3, 4, rng), random_mat(4, 5, rng), random_mat(1, 5, rng)},
                          [](auto& t, auto& v) { return project(t, ad::linear(v[0], v[1], v[2]), 9); }),
            1e-6);
  EXPECT_LT(max_rel_error({random_mat(3, 6, rng), random_mat(1, 6, rng), random_mat(1, 6, rng)},
                          [](auto& t, auto& v) { return project(t, ad::layer_norm(v[0], v[1], v[2]), 10); }),
            1e-5);
  EXPECT_LT(max_rel_error({random_mat(4, 3, rng)},
                          [](auto& t, auto& v) { return project(t, ad::l2_normalize_rows(v[0]), 11); }),
            1e-6);
}

TEST(Autograd, ShapeOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  EXPECT_LT(max_rel_error({random_mat(4, 3, rng)},
                          [](auto& t, auto& v) { return project(t, ad::gather_rows(v[0], {2, 0, 2, 3}), 12); }),
            1e-6);
  EXPECT_LT(max_rel_error({random_mat(2, 3, rng), random_mat(3, 3, rng)},
                          [](auto& t, auto& v) {
                            const std::array<V, 2> parts{v[0], v[1]};
                            return project(t, ad::concat_rows<double>(parts), 13);
                          }),
            1e-6);
  EXPECT_LT(max_rel_error({random_mat(3, 6, rng)},
                          [](auto& t, auto& v) { return project(t, ad::slice_cols(v[0], 2, 3), 14); }),
            1e-6);
  EXPECT_LT(max_rel_error({random_mat(4, 3, rng), random_mat(4, 3, rng)},
                          [](auto& t, auto& v) {
                            return project(t, ad::select_rows<double>({1, 0, 0, 1}, v[0], v[1]), 15);
                          }),
            1e-6);
  EXPECT_LT(max_rel_error({random_mat(2, 7, rng), random_mat(7, 4, rng), random_mat(3, 4, rng)},
                          [](auto& t, auto& v) {
                            return project(t, ad::grouped_linear(v[0], v[1], v[2], {0, 2, 5, 7}), 16);
                          }),
            1e-6);
}

TEST(Autograd, SequenceOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  EXPECT_LT(max_rel_error({random_mat(10, 12, rng)},
                          [](auto& t, auto& v) { return project(t, ad::multi_head_attention(v[0], 5, 2), 17); }),
            1e-6);
  EXPECT_LT(max_rel_error({random_mat(20, 3, rng), random_mat(9, 3, rng), random_mat(25, 3, rng),
                           random_mat(49, 3, rng)},
                          [](auto& t, auto& v) { return project(t, ad::ppeg(v[0], 10, v[1], v[2], v[3]), 18); }),
            1e-6);
}

TEST(Autograd, FusedLossesMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  EXPECT_LT(max_rel_error({random_mat(4, 3, rng), random_mat(4, 3, rng)},
                          [](auto&, auto& v) { return ad::symmetric_info_nce(v[0], v[1], 2.0); }),
            1e-6);
  EXPECT_LT(max_rel_error({random_mat(4, 3, rng), random_mat(4, 3, rng)},
                          [](auto&, auto& v) { return ad::kl_standard_normal(v[0], v[1]); }),
            1e-6);
  EXPECT_LT(max_rel_error({random_mat(4, 3, rng), random_mat(5, 3, rng)},
                          [](auto& t, auto& v) { return project(t, ad::cosine_softmax(v[0], v[1], 3.0), 19); }),
            1e-6);
  EXPECT_LT(max_rel_error({random_mat(3, 4, rng), random_mat(3, 4, rng)},
                          [](auto&, auto& v) {
                            return ad::symmetric_kl(ad::cosine_softmax(v[0], v[0], 1.0),
                                                    ad::cosine_softmax(v[1], v[0], 2.0), 1e-8);
                          }),
            1e-6);
  std::mt19937_64 trng(6);
  const Mat target = random_mat(6, 2, trng);
  EXPECT_LT(max_rel_error({random_mat(6, 2, rng)},
                          [&](auto&, auto& v) { return ad::masked_mse<double>(v[0], target, {1, 0, 1, 0, 0, 1}, 3); }),
            1e-6);
}

TEST(Autograd, WeightedSumAndReuse) {
  std::mt19937_64 rng(7);
  EXPECT_LT(max_rel_error({random_mat(2, 2, rng)},
                          [](auto& t, auto& v) {
                            const std::array<V, 2> terms{project(t, v[0], 20), ad::sum(ad::mul(v[0], v[0]))};
                            const std::array<double, 2> w{0.5, 2.0};
                            return ad::weighted_sum<double>(terms, w);
                          }),
            1e-6);
}

TEST(Autograd, ParamSlotIsSharedWithinTape) {
  ad::Tape<double> tape;
  const Mat x = Mat::Constant(1, 1, 3.0);
  V a = tape.param(0, x);
  V b = tape.param(0, x);
  EXPECT_EQ(a.id, b.id);
  V y = ad::mul(a, b);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(a.id)(0, 0), 6.0);
  ASSERT_EQ(tape.param_grads().size(), 1u);
}

TEST(Autograd, ShapeMismatchThrows) {
  ad::Tape<double> tape;
  V a = tape.leaf(Mat::Zero(2, 3));
  V b = tape.leaf(Mat::Zero(3, 2));
  EXPECT_THROW(ad::add(a, b), std::invalid_argument);
  EXPECT_THROW(tape.backward(a), std::invalid_argument);
}

TEST(Autograd, FloatTapeAgreesWithDouble) {
  std::mt19937_64 rng(8);
  const Mat x = random_mat(6, 6, rng);
  ad::Tape<double> td;
  ad::Tape<float> tf;
  const double d = ad::sum(ad::multi_head_attention(td.constant(x), 3, 2)).value()(0, 0);
  const float f = ad::sum(ad::multi_head_attention(tf.constant(x.cast<float>()), 3, 2)).value()(0, 0);
  EXPECT_NEAR(d, f, 1e-4);
}
