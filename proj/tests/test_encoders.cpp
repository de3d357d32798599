#include <fstream>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "mirror/encoders.hpp"
#include "mirror/errors.hpp"
#include "mirror/trainer.hpp"

using namespace mirror;

namespace {

Tensor random_tensor(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0, 1);
  Tensor t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = z(rng);
  return t;
}

ModelState default_state(bool ppeg = true, std::uint64_t seed = 1) {
  ModelConfig mc;
  mc.use_ppeg = ppeg;
  return init_state(mc, seed);
}

// Independent PPEG: pad with copies of the last token, zero-padded depthwise
// convolution with each kernel separately, identity added.
Tensor ppeg_oracle(const ParamStore& store, const Tensor& x) {
  const int n = static_cast<int>(x.rows());
  const int m = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  std::vector<Eigen::RowVectorXd> grid(static_cast<std::size_t>(m * m));
  for (int c = 0; c < m * m; ++c) grid[static_cast<std::size_t>(c)] = x.row(std::min(c, n - 1));
  Tensor out = x;
  for (int k : {3, 5, 7}) {
    const Tensor& w = store.value(store.at("slide.ppeg.kernel" + std::to_string(k)));
    const int h = k / 2;
    for (int p = 0; p < n; ++p) {
      const int r = p / m, c = p % m;
      for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) {
          const int rr = r + a - h, cc = c + b - h;
          if (rr < 0 || rr >= m || cc < 0 || cc >= m) continue;
          out.row(p) += w.row(a * k + b).cwiseProduct(grid[static_cast<std::size_t>(rr * m + cc)]);
        }
    }
  }
  return out;
}

}  // namespace

TEST(ModelConfig, HeadDivisibility) {
  ModelConfig mc;
  EXPECT_NO_THROW(mc.validate());
  EXPECT_EQ(mc.dim / mc.heads, 16);
  mc.dim = 65;
  EXPECT_THROW(mc.validate(), ValidationError);
  mc = {};
  mc.rna_groups = 1;
  EXPECT_THROW(mc.validate(), ValidationError);
  mc = {};
  mc.n_fixed = 1;
  EXPECT_THROW(mc.validate(), ValidationError);
}

TEST(ModelInit, SameSeedSameParameters) {
  const ModelState a = default_state(true, 5);
  const ModelState b = default_state(true, 5);
  EXPECT_TRUE(a.params == b.params);
  const ModelState c = default_state(true, 6);
  EXPECT_FALSE(a.params == c.params);
  const Tensor& centers = a.params.value(a.params.at("style.centers"));
  for (Eigen::Index r = 0; r < centers.rows(); ++r) EXPECT_NEAR(centers.row(r).norm(), 1.0, 1e-12);
}

TEST(GroupBounds, ContiguousNearEqual) {
  const std::vector<int> b = group_bounds(256, 16);
  ASSERT_EQ(b.size(), 17u);
  for (std::size_t g = 0; g < 16; ++g) EXPECT_EQ(b[g + 1] - b[g], 16);
  const std::vector<int> c = group_bounds(10, 3);
  EXPECT_EQ(c.front(), 0);
  EXPECT_EQ(c.back(), 10);
  for (std::size_t g = 0; g + 1 < c.size(); ++g) EXPECT_GE(c[g + 1] - c[g], 3);
}

TEST(SlideEncoder, ShapesAndAttentionRows) {
  const ModelState s = default_state();
  const Tensor bag = random_tensor(64, 64, 3);
  const SlideEncoding e = encode_slide(s.model, s.params, bag);
  EXPECT_EQ(e.s_tokens.rows(), 64);
  EXPECT_EQ(e.s_tokens.cols(), 64);
  EXPECT_EQ(e.s_cls.size(), 64);
  ASSERT_EQ(e.attention.rows(), 4);
  ASSERT_EQ(e.attention.cols(), 64);
  for (Eigen::Index h = 0; h < 4; ++h) {
    EXPECT_NEAR(e.attention.row(h).sum(), 1.0, 1e-6);
    EXPECT_GE(e.attention.row(h).minCoeff(), 0.0);
  }
  // output widths do not depend on the bag size
  const SlideEncoding small = encode_slide(s.model, s.params, random_tensor(5, 64, 4));
  EXPECT_EQ(small.s_cls.size(), 64);
  EXPECT_EQ(small.s_tokens.cols(), 64);
  EXPECT_EQ(small.attention.cols(), 5);
}

TEST(SlideEncoder, EveryAttentionMatrixIsStochastic) {
  const ModelState s = default_state();
  ad::Tape<double> tape;
  const Tensor bags = random_tensor(2 * 20, 64, 8);
  const SlideForward<double> f = slide_forward(tape, s.model, s.params, bags, 20, true);
  ASSERT_EQ(f.attention.size(), 2u * 4u);
  for (const auto& a : f.attention) {
    EXPECT_EQ(a.rows(), 21);
    EXPECT_GE(a.minCoeff(), 0.0);
    EXPECT_LT((a.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
  }
}

TEST(SlideEncoder, RejectsBadInput) {
  const ModelState s = default_state();
  EXPECT_THROW(encode_slide(s.model, s.params, random_tensor(10, 32, 1)), DimensionError);
  Tensor bag = random_tensor(10, 64, 1);
  bag(3, 3) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(encode_slide(s.model, s.params, bag), ValidationError);
  EXPECT_THROW(encode_rna(s.model, s.params, Eigen::RowVectorXd::Zero(100)), DimensionError);
}

TEST(SlideEncoder, PermutationWithoutPpeg) {
  const ModelState s = default_state(false);
  const Tensor bag = random_tensor(30, 64, 9);
  std::vector<int> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(2));
  Tensor shuffled(30, 64);
  for (int i = 0; i < 30; ++i) shuffled.row(i) = bag.row(perm[static_cast<std::size_t>(i)]);
  const SlideEncoding a = encode_slide(s.model, s.params, bag);
  const SlideEncoding b = encode_slide(s.model, s.params, shuffled);
  EXPECT_LT((a.s_cls - b.s_cls).cwiseAbs().maxCoeff(), 1e-5);
  for (int i = 0; i < 30; ++i)
    EXPECT_LT((b.s_tokens.row(i) - a.s_tokens.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(SlideEncoder, PermutationEffectComesFromPpegOnly) {
  ModelState s = default_state(true);
  const Tensor bag = random_tensor(30, 64, 9);
  std::vector<int> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  Tensor shuffled(30, 64);
  for (int i = 0; i < 30; ++i) shuffled.row(i) = bag.row(perm[static_cast<std::size_t>(i)]);
  const double with_grid =
      (encode_slide(s.model, s.params, bag).s_cls - encode_slide(s.model, s.params, shuffled).s_cls).norm();
  EXPECT_GT(with_grid, 1e-9);
  for (const char* k : {"slide.ppeg.kernel3", "slide.ppeg.kernel5", "slide.ppeg.kernel7"})
    s.params.value(s.params.at(k)).setZero();
  const double without =
      (encode_slide(s.model, s.params, bag).s_cls - encode_slide(s.model, s.params, shuffled).s_cls).norm();
  EXPECT_LT(without, 1e-5);
}

TEST(SlideEncoder, ConstantBagGivesEqualTokens) {
  // with the positional convolution off; grid borders otherwise see fewer neighbours
  const ModelState s = default_state(false);
  Tensor bag(16, 64);
  bag.rowwise() = random_tensor(1, 64, 3).row(0);
  const SlideEncoding e = encode_slide(s.model, s.params, bag);
  for (Eigen::Index i = 1; i < 16; ++i) EXPECT_LT((e.s_tokens.row(i) - e.s_tokens.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ppeg, MatchesIndependentConvolution) {
  const ModelState s = default_state();
  for (int n : {1, 2, 10, 17, 64}) {
    const Tensor x = random_tensor(n, 64, static_cast<std::uint64_t>(n));
    const Tensor got = ppeg_apply(s.model, s.params, x);
    ASSERT_EQ(got.rows(), n);
    EXPECT_LT((got - ppeg_oracle(s.params, x)).cwiseAbs().maxCoeff(), 1e-12) << "n=" << n;
  }
}

TEST(Ppeg, ZeroTokensAndSingleToken) {
  const ModelState s = default_state();
  EXPECT_EQ(ppeg_apply(s.model, s.params, Tensor::Zero(10, 64)), Tensor::Zero(10, 64));
  const Tensor x = random_tensor(1, 64, 4);
  Eigen::RowVectorXd center = s.params.value(s.params.at("slide.ppeg.kernel3")).row(4) +
                              s.params.value(s.params.at("slide.ppeg.kernel5")).row(12) +
                              s.params.value(s.params.at("slide.ppeg.kernel7")).row(24);
  const Tensor expect = x + Tensor(x.cwiseProduct(center));
  EXPECT_LT((ppeg_apply(s.model, s.params, x) - expect).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(RnaEncoder, Shapes) {
  const ModelState s = default_state();
  const RnaEncoding e = encode_rna(s.model, s.params, random_tensor(1, 256, 2).row(0));
  EXPECT_EQ(e.t_tokens.rows(), 16);
  EXPECT_EQ(e.t_tokens.cols(), 64);
  EXPECT_EQ(e.t_vec.size(), 64);
  EXPECT_EQ(e.embedded.rows(), 16);
}

TEST(RnaEncoder, GroupLocalEmbedding) {
  const ModelState s = default_state();
  const Eigen::RowVectorXd a = random_tensor(1, 256, 2).row(0);
  Eigen::RowVectorXd b = a;
  const std::vector<int> bounds = group_bounds(256, 16);
  for (int g = bounds[5]; g < bounds[6]; ++g) b(g) += 0.7;
  const RnaEncoding ea = encode_rna(s.model, s.params, a);
  const RnaEncoding eb = encode_rna(s.model, s.params, b);
  for (Eigen::Index r = 0; r < 16; ++r) {
    const double d = (ea.embedded.row(r) - eb.embedded.row(r)).cwiseAbs().maxCoeff();
    if (r == 5) EXPECT_GT(d, 1e-6);
    else EXPECT_EQ(d, 0.0) << "row " << r;
    EXPECT_GT((ea.t_tokens.row(r) - eb.t_tokens.row(r)).cwiseAbs().maxCoeff(), 1e-9) << "row " << r;
  }
}

TEST(RnaEncoder, ZeroExpressionIsDeterministic) {
  const ModelState s = default_state();
  const RnaEncoding a = encode_rna(s.model, s.params, Eigen::RowVectorXd::Zero(256));
  const RnaEncoding b = encode_rna(s.model, s.params, Eigen::RowVectorXd::Zero(256));
  EXPECT_EQ(a.t_vec, b.t_vec);
  EXPECT_EQ(a.t_tokens, b.t_tokens);
}

TEST(Encoders, GradientsMatchFiniteDifferences) {
  // scalar loss = sum of every encoder output
  ModelConfig mc;
  mc.dim = 16;
  mc.rna_dim = 8;
  mc.heads = 2;
  mc.n_fixed = 9;
  mc.rna_groups = 4;
  mc.k_genes = 32;
  mc.d_p = 6;
  ModelState s = init_state(mc, 3);
  const Tensor bags = random_tensor(2 * 9, 6, 1);
  const Tensor expr = random_tensor(2, 32, 2);
  auto forward = [&](ad::Tape<double>& tape, const ParamStore& store) {
    const SlideForward<double> sf = slide_forward(tape, s.model, store, bags, 9);
    const RnaForward<double> rf = rna_forward(tape, s.model, store, expr);
    // fixed random projections so that no gradient vanishes by symmetry
    auto project = [&](const ad::Var<double>& v, std::uint64_t seed) {
      return ad::sum(ad::mul(v, tape.constant(random_tensor(v.value().rows(), v.value().cols(), seed))));
    };
    const std::vector<ad::Var<double>> parts = {project(sf.tokens, 11), project(sf.cls, 12), project(rf.tokens, 13),
                                                project(rf.t_vec, 14)};
    const std::vector<double> w(4, 1.0);
    return ad::weighted_sum<double>(parts, w);
  };
  ad::Tape<double> tape;
  const ad::Var<double> loss = forward(tape, s.params);
  tape.backward(loss);
  std::vector<Tensor> analytic(static_cast<std::size_t>(s.params.size()));
  int encoder_tensors = 0;
  for (const auto& pg : tape.param_grads()) {
    const std::string& name = s.params.name(pg.slot);
    if (name.rfind("slide.", 0) == 0 || name.rfind("rna.", 0) == 0) {
      analytic[static_cast<std::size_t>(pg.slot)] = *pg.grad;
      ++encoder_tensors;
    }
  }
  int declared = 0;
  for (const auto& n : s.params.names()) declared += n.rfind("slide.", 0) == 0 || n.rfind("rna.", 0) == 0;
  EXPECT_EQ(encoder_tensors, declared);
  GradCheckOptions opts;
  opts.coords_per_tensor = 12;
  const GradCheckReport rep = check_gradients(
      s.params,
      [&](const ParamStore& p) {
        ad::Tape<double> t;
        return forward(t, p).value()(0, 0);
      },
      analytic, opts);
  EXPECT_EQ(static_cast<int>(rep.entries.size()), declared);
  for (const auto& e : rep.entries) EXPECT_LE(e.max_rel_error, opts.tolerance) << e.name;
}

TEST(AttentionCsv, WritesOneRowPerPatch) {
  const ModelState s = default_state();
  const Dataset ds = test::small_cohort(1).first;
  const SampledBag bag = sample_bag(ds.samples[0].bag, 64, 1);
  const SlideEncoding e = encode_slide(s.model, s.params, bag.features.cast<double>());
  test::TempDir dir("attn");
  write_attention_csv(dir / "a.csv", bag, e.attention);
  std::ifstream in(dir / "a.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "patch_index,grid_row,grid_col,weight");
  int rows = 0;
  double total = 0;
  while (std::getline(in, line)) {
    ++rows;
    total += std::stod(line.substr(line.rfind(',') + 1));
  }
  EXPECT_EQ(rows, 64);
  EXPECT_NEAR(total, 1.0, 1e-6);
}
