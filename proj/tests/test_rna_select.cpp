#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "mirror/errors.hpp"
#include "mirror/rna_select.hpp"

using namespace mirror;

namespace {

struct Planted {
  Eigen::MatrixXd x;
  std::vector<int> y;
  std::vector<std::string> genes;
  std::set<std::string> informative;
};

Planted planted(int n, int d, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0, 1);
  Planted p;
  p.x.resize(n, d);
  for (Eigen::Index i = 0; i < p.x.size(); ++i) p.x.data()[i] = z(rng);
  std::vector<int> cols(static_cast<std::size_t>(d));
  std::iota(cols.begin(), cols.end(), 0);
  std::shuffle(cols.begin(), cols.end(), rng);
  cols.resize(static_cast<std::size_t>(k));
  for (int j = 0; j < d; ++j) p.genes.push_back("g" + std::to_string(j));
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  for (int c : cols) {
    w(c) = (rng() & 1) ? 1.0 : -1.0;
    p.informative.insert(p.genes[static_cast<std::size_t>(c)]);
  }
  const Eigen::VectorXd score = p.x * w;
  for (int i = 0; i < n; ++i) p.y.push_back(score(i) + 0.5 * z(rng) > 0 ? 1 : 0);
  return p;
}

std::vector<std::string> names(int d) {
  std::vector<std::string> g;
  for (int j = 0; j < d; ++j) g.push_back("g" + std::to_string(j));
  return g;
}

}  // namespace

TEST(Importance, PredictiveColumnDominates) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> z(0, 1);
  Eigen::MatrixXd x(200, 10);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng);
  std::vector<int> y;
  for (int i = 0; i < 200; ++i) y.push_back(x(i, 6) > 0 ? 1 : 0);
  const ImportanceModel m = fit_importance(x, y, 1e-2);
  Eigen::Index top = 0;
  m.importance.maxCoeff(&top);
  EXPECT_EQ(top, 6);

  // rescaling an untouched noise column does not change the winner
  Eigen::MatrixXd x2 = x;
  x2.col(2) *= 2.0;
  const ImportanceModel m2 = fit_importance(x2, y, 1e-2);
  Eigen::Index top2 = 0;
  m2.importance.maxCoeff(&top2);
  EXPECT_EQ(top2, 6);
}

TEST(Importance, SingleClassIsRejected) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(20, 3);
  EXPECT_THROW(fit_importance(x, std::vector<int>(20, 0), 1e-2), ValidationError);
}

TEST(Importance, PermutationEquivariant) {
  const Planted p = planted(120, 8, 3, 4);
  const std::vector<int> perm = {5, 2, 7, 0, 1, 6, 3, 4};
  Eigen::MatrixXd xp(p.x.rows(), p.x.cols());
  for (int j = 0; j < 8; ++j) xp.col(j) = p.x.col(perm[static_cast<std::size_t>(j)]);
  const Eigen::VectorXd a = fit_importance(p.x, p.y, 1e-2).importance;
  const Eigen::VectorXd b = fit_importance(xp, p.y, 1e-2).importance;
  for (int j = 0; j < 8; ++j) EXPECT_NEAR(b(j), a(perm[static_cast<std::size_t>(j)]), 1e-8 * (1 + a.maxCoeff()));
}

TEST(Rfe, WeakestGeneGoesFirst) {
  // column 0 strong, column 2 moderate, column 1 noise
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z(0, 1);
  Eigen::MatrixXd x(300, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng);
  std::vector<int> y;
  for (int i = 0; i < 300; ++i) y.push_back(2.0 * x(i, 0) + 0.8 * x(i, 2) + 0.3 * z(rng) > 0 ? 1 : 0);
  const Eigen::VectorXd imp = fit_importance(x, y, 1e-2).importance;
  ASSERT_LT(imp(1), imp(2));
  ASSERT_LT(imp(2), imp(0));
  RfeOptions o;
  o.k_target = 2;
  const RfeTrace t = rfe(x, y, names(3), o);
  ASSERT_EQ(t.eliminated.size(), 1u);
  EXPECT_EQ(t.eliminated[0].gene, "g1");
  EXPECT_EQ(t.eliminated[0].round, 0);
  EXPECT_EQ(t.survivors, (std::vector<std::string>{"g0", "g2"}));
}

TEST(Rfe, SurvivorCountIsExact) {
  const Planted p = planted(150, 23, 4, 9);
  for (int step : {0, 1, 2, 3, 5, 7, 18, 40}) {
    RfeOptions o;
    o.k_target = 5;
    o.step = step;
    const RfeTrace t = rfe(p.x, p.y, p.genes, o);
    EXPECT_EQ(t.survivors.size(), 5u) << "step " << step;
    std::set<std::string> all(t.survivors.begin(), t.survivors.end());
    for (const auto& g : t.elimination_order()) EXPECT_TRUE(all.insert(g).second) << g;
    EXPECT_EQ(all, std::set<std::string>(p.genes.begin(), p.genes.end()));
  }
}

TEST(Rfe, OneRoundWhenOneGeneIsDropped) {
  const Planted p = planted(100, 12, 3, 1);
  RfeOptions o;
  o.k_target = 11;
  const RfeTrace t = rfe(p.x, p.y, p.genes, o);
  EXPECT_EQ(t.eliminated.size(), 1u);
  EXPECT_EQ(t.eliminated.back().round, 0);
}

TEST(Rfe, InvalidTargets) {
  const Planted p = planted(50, 6, 2, 1);
  RfeOptions o;
  o.k_target = 6;
  EXPECT_THROW(rfe(p.x, p.y, p.genes, o), ValidationError);
  o.k_target = 0;
  EXPECT_THROW(rfe(p.x, p.y, p.genes, o), ValidationError);
}

TEST(Rfe, RecoversPlantedGenes) {
  int hits = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Planted p = planted(200, 50, 5, 1000 + static_cast<std::uint64_t>(trial));
    RfeOptions o;
    o.k_target = 5;
    const RfeTrace t = rfe(p.x, p.y, p.genes, o);
    hits += std::set<std::string>(t.survivors.begin(), t.survivors.end()) == p.informative;
  }
  EXPECT_GE(hits, 19);
}

TEST(RfeCv, RecordsOneScorePerFold) {
  const Planted p = planted(200, 30, 5, 77);
  RfeOptions o;
  o.k_target = 5;
  o.step = 0;
  const RfeCvResult r = rfe_cv(p.x, p.y, p.genes, o, 5, 3);
  ASSERT_EQ(r.trace.cv_scores.size(), 5u);
  for (const auto& [k, acc] : r.trace.cv_scores) {
    EXPECT_EQ(k, 5);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
  }
  EXPECT_EQ(r.panel.gene_ids.size(), 5u);
  const RfeCvResult again = rfe_cv(p.x, p.y, p.genes, o, 5, 3);
  EXPECT_EQ(again.panel.gene_ids, r.panel.gene_ids);
  EXPECT_EQ(again.trace.cv_scores, r.trace.cv_scores);
}

TEST(RfeCv, SeparableDataScoresPerfectly) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z(0, 1);
  Eigen::MatrixXd x(100, 10);
  std::vector<int> y;
  for (int i = 0; i < 100; ++i) {
    y.push_back(i % 2);
    for (int j = 0; j < 10; ++j) x(i, j) = z(rng);
    x(i, 3) = (i % 2 ? 3.0 : -3.0) + 0.1 * z(rng);
  }
  RfeOptions o;
  o.k_target = 2;
  const RfeCvResult r = rfe_cv(x, y, names(10), o, 5, 0);
  const double best = r.trace.cv_scores[static_cast<std::size_t>(r.best_fold)].second;
  EXPECT_EQ(best, 1.0);
}

TEST(MergePanel, UnionWithProvenance) {
  GenePanel rfe_panel{{"A", "B"}, {GeneSource::rfe, GeneSource::rfe}};
  const GenePanel m = merge_panel(rfe_panel, {"B", "C"}, {"A", "B", "C", "D"});
  EXPECT_EQ(m.gene_ids, (std::vector<std::string>{"A", "B", "C"}));
  EXPECT_EQ(m.provenance, (std::vector<GeneSource>{GeneSource::rfe, GeneSource::both, GeneSource::curated}));
  const GenePanel same = merge_panel(rfe_panel, {}, {"A", "B"});
  EXPECT_EQ(same.gene_ids, rfe_panel.gene_ids);
  EXPECT_EQ(same.provenance, rfe_panel.provenance);
  try {
    merge_panel(rfe_panel, {"ZZZ"}, {"A", "B"});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("ZZZ"), std::string::npos);
  }
}

TEST(RnaSelectIo, CsvAndPanelRoundTrip) {
  test::TempDir dir("rs");
  ExpressionTable t;
  t.sample_ids = {"s1", "s2"};
  t.gene_ids = {"GA", "GB", "GC"};
  t.values.resize(2, 3);
  t.values << 0.1, -2.5, 3.0, 1e-7, 4.25, -0.125;
  write_expression_csv(t, dir / "expr.csv");
  const ExpressionTable back = read_expression_csv(dir / "expr.csv");
  EXPECT_EQ(back.sample_ids, t.sample_ids);
  EXPECT_EQ(back.gene_ids, t.gene_ids);
  EXPECT_EQ(back.values, t.values);

  std::ofstream(dir / "labels.csv") << "sample_id,label\ns2,1\ns1,0\n";
  EXPECT_EQ(read_labels_csv(dir / "labels.csv", t.sample_ids), (std::vector<int>{0, 1}));
  std::ofstream(dir / "genes.txt") << "# curated\nGA\n\nGC\n";
  EXPECT_EQ(read_gene_list(dir / "genes.txt"), (std::vector<std::string>{"GA", "GC"}));

  const GenePanel panel{{"GA", "GC"}, {GeneSource::both, GeneSource::curated}};
  write_panel_json(panel, dir / "panel.json");
  const GenePanel pb = read_panel_json(dir / "panel.json");
  EXPECT_EQ(pb.gene_ids, panel.gene_ids);
  EXPECT_EQ(pb.provenance, panel.provenance);

  std::ofstream(dir / "bad.csv") << "sample_id,GA\ns1,abc\n";
  EXPECT_THROW(read_expression_csv(dir / "bad.csv"), FormatError);
}
