#include "mirror/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <limits>
#include <sstream>
#include <tuple>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "mirror/encoders.hpp"
#include "mirror/errors.hpp"
#include "mirror/linear_model.hpp"
#include "mirror/objectives.hpp"
#include "mirror/rng.hpp"

namespace mirror {

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Population standard deviation.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::vector<int> pick(const std::vector<int>& values, const std::vector<int>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(values[static_cast<std::size_t>(r)]);
  return out;
}

}  // namespace

// ---- folds ------------------------------------------------------------------------------

std::vector<int> FoldPlan::train_indices(int f) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < fold.size(); ++i)
    if (fold[i] != f) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> FoldPlan::test_indices(int f) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < fold.size(); ++i)
    if (fold[i] == f) out.push_back(static_cast<int>(i));
  return out;
}

FoldPlan make_folds(const std::vector<int>& labels, int folds, std::uint64_t seed) {
  return FoldPlan{folds, stratified_folds(labels, folds, seed)};
}

FoldPlan make_folds(const Dataset& ds, int folds, std::uint64_t seed) { return make_folds(ds.labels(), folds, seed); }

// ---- embeddings -----------------------------------------------------------------------------

Eigen::MatrixXd Embeddings::combined() const {
  Eigen::MatrixXd out(s_cls.rows(), s_cls.cols() + t_vec.cols());
  out << s_cls, t_vec;
  return out;
}

Embeddings compute_embeddings(const ModelState& state, const Dataset& ds, std::uint64_t bag_seed) {
  const MirrorModel& model = state.model;
  const ModelConfig& mc = model.cfg;
  if (ds.d_p != mc.d_p || ds.k_genes != mc.k_genes)
    throw DimensionError("dataset dimensions (d_p " + std::to_string(ds.d_p) + ", k " + std::to_string(ds.k_genes) +
                         ") do not match the model");
  const auto n = static_cast<Eigen::Index>(ds.size());
  Embeddings e;
  e.s_cls.resize(n, mc.dim);
  e.t_vec.resize(n, mc.dim);
  e.s_align.resize(n, mc.dim);
  e.t_align.resize(n, mc.dim);
  e.slide_tokens.resize(n, mc.dim);
  e.rna_tokens.resize(n, static_cast<Eigen::Index>(mc.rna_groups) * mc.rna_dim);
  constexpr int kChunk = 32;
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index len = std::min<Eigen::Index>(kChunk, n - start);
    std::vector<int> idx(static_cast<std::size_t>(len));
    std::iota(idx.begin(), idx.end(), static_cast<int>(start));
    const Batch batch = make_batch(ds, idx, mc.n_fixed, bag_seed);
    ad::Tape<double> tape;
    const SlideForward<double> sf = slide_forward(tape, model, state.params, batch.bags, batch.n);
    const RnaForward<double> rf = rna_forward(tape, model, state.params, batch.expr);
    const Tensor sa = alignment_head(tape, state.params, model.align_slide, sf.cls).value();
    const Tensor ta = alignment_head(tape, state.params, model.align_rna, rf.t_vec).value();
    e.s_cls.middleRows(start, len) = sf.cls.value();
    e.t_vec.middleRows(start, len) = rf.t_vec.value();
    e.s_align.middleRows(start, len) = sa;
    e.t_align.middleRows(start, len) = ta;
    const Tensor& tok = sf.tokens.value();
    const Tensor& rtok = rf.tokens.value();
    for (Eigen::Index i = 0; i < len; ++i) {
      e.slide_tokens.row(start + i) = tok.middleRows(i * batch.n, batch.n).colwise().mean();
      for (int g = 0; g < mc.rna_groups; ++g)
        e.rna_tokens.block(start + i, static_cast<Eigen::Index>(g) * mc.rna_dim, 1, mc.rna_dim) =
            rtok.row(i * mc.rna_groups + g);
    }
  }
  return e;
}

Eigen::MatrixXd embed_dataset(const ModelState& state, const Dataset& ds) {
  return compute_embeddings(state, ds).combined();
}

Dataset shuffled_pairing(const Dataset& ds, std::uint64_t seed) {
  std::vector<int> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_rng(seed, 0x5a1f);
  std::shuffle(perm.begin(), perm.end(), rng);
  Dataset out = ds;
  for (std::size_t i = 0; i < ds.size(); ++i)
    out.samples[i].rna.values = ds.samples[static_cast<std::size_t>(perm[i])].rna.values;
  out.manifest["pairing"] = "shuffled";
  return out;
}

// ---- classification probes ---------------------------------------------------------------

double ProbeResult::mean_accuracy() const { return mean_of(accuracy); }
double ProbeResult::std_accuracy() const { return std_of(accuracy); }
double ProbeResult::mean_f1() const { return mean_of(macro_f1); }
double ProbeResult::std_f1() const { return std_of(macro_f1); }

namespace {

void evaluate_fold(const Eigen::MatrixXd& emb, const std::vector<int>& labels, int n_classes,
                   const std::vector<int>& train, const std::vector<int>& test, double reg, ProbeResult& out) {
  if (test.empty()) throw ValidationError("probe: empty held-out fold");
  const Eigen::MatrixXd xtr = select_rows(emb, train);
  const Standardizer sc = Standardizer::fit(xtr);
  const LinearClassifier clf = fit_linear_classifier(sc.apply(xtr), pick(labels, train), n_classes, reg);
  const std::vector<int> pred = clf.predict(sc.apply(select_rows(emb, test)));
  const std::vector<int> truth = pick(labels, test);
  out.accuracy.push_back(accuracy(truth, pred));
  out.macro_f1.push_back(macro_f1(truth, pred, n_classes));
  out.train_rows.push_back(static_cast<int>(train.size()));
}

void check_probe_inputs(const Eigen::MatrixXd& emb, const std::vector<int>& labels, const FoldPlan& plan) {
  if (static_cast<std::size_t>(emb.rows()) != labels.size() || plan.fold.size() != labels.size())
    throw ValidationError("probe: embedding, label and fold counts differ");
}

}  // namespace

ProbeResult linear_probe(const Eigen::MatrixXd& emb, const std::vector<int>& labels, int n_classes,
                         const FoldPlan& plan, double reg) {
  check_probe_inputs(emb, labels, plan);
  ProbeResult r;
  for (int f = 0; f < plan.folds; ++f)
    evaluate_fold(emb, labels, n_classes, plan.train_indices(f), plan.test_indices(f), reg, r);
  return r;
}

ProbeResult few_shot_probe(const Eigen::MatrixXd& emb, const std::vector<int>& labels, int n_classes,
                           const FoldPlan& plan, int shots, std::uint64_t seed, double reg) {
  check_probe_inputs(emb, labels, plan);
  if (shots < 1) throw ValidationError("few-shot probe: shots must be >= 1");
  ProbeResult r;
  for (int f = 0; f < plan.folds; ++f) {
    const std::vector<int> train = plan.train_indices(f);
    std::vector<int> chosen;
    for (int c = 0; c < n_classes; ++c) {
      std::vector<int> members;
      for (int i : train)
        if (labels[static_cast<std::size_t>(i)] == c) members.push_back(i);
      if (members.empty()) continue;
      if (static_cast<int>(members.size()) < shots)
        throw ValidationError("few-shot probe: class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                              " training samples in fold " + std::to_string(f) + ", fewer than " +
                              std::to_string(shots) + " shots");
      Rng rng = make_rng(seed, (static_cast<std::uint64_t>(f) << 20) + static_cast<std::uint64_t>(c));
      std::shuffle(members.begin(), members.end(), rng);
      chosen.insert(chosen.end(), members.begin(), members.begin() + shots);
    }
    std::sort(chosen.begin(), chosen.end());
    evaluate_fold(emb, labels, n_classes, chosen, plan.test_indices(f), reg, r);
  }
  return r;
}

// ---- survival ----------------------------------------------------------------------------

std::vector<double> quartile_edges(std::vector<double> times) {
  if (times.empty()) throw ValidationError("quartile edges: no uncensored times");
  std::sort(times.begin(), times.end());
  std::vector<double> edges;
  const double last = static_cast<double>(times.size() - 1);
  for (int q = 1; q < kSurvivalBins; ++q) {
    const double pos = last * q / kSurvivalBins;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, times.size() - 1);
    edges.push_back(times[lo] + (pos - static_cast<double>(lo)) * (times[hi] - times[lo]));
  }
  return edges;
}

int time_bin(double t, const std::vector<double>& edges) {
  int b = 0;
  for (double e : edges) b += e < t ? 1 : 0;
  return b;
}

namespace {

double sigmoid(double s) {
  if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

}  // namespace

Eigen::MatrixXd HazardModel::hazards(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd z = scaler.apply(x) * weights;
  z.rowwise() += bias;
  return z.unaryExpr([](double s) { return sigmoid(s); });
}

Eigen::VectorXd HazardModel::risk(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd h = hazards(x);
  Eigen::VectorXd r(h.rows());
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    double surv = 1.0, total = 0.0;
    for (Eigen::Index k = 0; k < h.cols(); ++k) {
      surv *= 1.0 - h(i, k);
      total += surv;
    }
    r(i) = -total;
  }
  return r;
}

double hazard_nll(const Eigen::MatrixXd& hazards, const std::vector<int>& bins, const std::vector<char>& events) {
  constexpr double kFloor = 1e-12;
  double nll = 0.0;
  for (Eigen::Index i = 0; i < hazards.rows(); ++i) {
    const int k = bins[static_cast<std::size_t>(i)];
    for (int j = 0; j < k; ++j) nll -= std::log(std::max(kFloor, 1.0 - hazards(i, j)));
    if (events[static_cast<std::size_t>(i)])
      nll -= std::log(std::max(kFloor, hazards(i, k)));
    else
      nll -= std::log(std::max(kFloor, 1.0 - hazards(i, k)));
  }
  return nll / static_cast<double>(hazards.rows());
}

HazardModel fit_hazard_model(const Eigen::MatrixXd& x, const std::vector<SurvivalLabel>& y, double reg,
                             const SolverOptions& opts) {
  if (x.rows() < 2 || static_cast<std::size_t>(x.rows()) != y.size())
    throw ValidationError("hazard model: need >= 2 samples with matching labels");
  if (!(reg > 0)) throw ValidationError("hazard model: regularization must be > 0");
  std::vector<double> uncensored;
  for (const auto& s : y)
    if (s.event) uncensored.push_back(s.time);
  if (uncensored.size() < 2) throw ValidationError("hazard model: fewer than 2 uncensored samples");

  HazardModel m;
  m.edges = quartile_edges(uncensored);
  m.scaler = Standardizer::fit(x);
  const Eigen::MatrixXd xs = m.scaler.apply(x);
  const Eigen::Index n = xs.rows(), d = xs.cols();
  std::vector<int> bins;
  for (const auto& s : y) bins.push_back(time_bin(s.time, m.edges));

  // Person-period logistic regression with one weight column per bin.
  const double lipschitz = 1.1 * 0.25 * augmented_gram_norm(xs) + reg;
  const double step = 1.0 / lipschitz;
  const double momentum = (std::sqrt(lipschitz) - std::sqrt(reg)) / (std::sqrt(lipschitz) + std::sqrt(reg));
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(d, kSurvivalBins), w_prev = w;
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(kSurvivalBins), b_prev = b;
  Eigen::MatrixXd resid(n, kSurvivalBins);
  for (int it = 0; it < opts.max_iterations; ++it) {
    const Eigen::MatrixXd lw = w + momentum * (w - w_prev);
    const Eigen::RowVectorXd lb = b + momentum * (b - b_prev);
    Eigen::MatrixXd z = xs * lw;
    z.rowwise() += lb;
    resid.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      const int k = bins[static_cast<std::size_t>(i)];
      for (int j = 0; j <= k; ++j) {
        const double target = (j == k && y[static_cast<std::size_t>(i)].event) ? 1.0 : 0.0;
        resid(i, j) = sigmoid(z(i, j)) - target;
      }
    }
    const Eigen::MatrixXd gw = xs.transpose() * resid / static_cast<double>(n) + reg * lw;
    const Eigen::RowVectorXd gb = resid.colwise().sum() / static_cast<double>(n);
    m.iterations = it + 1;
    if (std::sqrt(gw.squaredNorm() + gb.squaredNorm()) <= opts.gradient_tolerance) {
      w = lw;
      b = lb;
      break;
    }
    w_prev = w;
    b_prev = b;
    w = lw - step * gw;
    b = lb - step * gb;
  }
  m.weights = std::move(w);
  m.bias = std::move(b);
  return m;
}

double SurvivalResult::mean() const { return mean_of(c_index); }
double SurvivalResult::std() const { return std_of(c_index); }

SurvivalResult survival_fit_eval(const Eigen::MatrixXd& emb, const std::vector<SurvivalLabel>& y,
                                 const FoldPlan& plan, double reg) {
  if (static_cast<std::size_t>(emb.rows()) != y.size() || plan.fold.size() != y.size())
    throw ValidationError("survival: embedding, label and fold counts differ");
  SurvivalResult r;
  for (int f = 0; f < plan.folds; ++f) {
    const auto train = plan.train_indices(f);
    const auto test = plan.test_indices(f);
    std::vector<SurvivalLabel> ytr;
    for (int i : train) ytr.push_back(y[static_cast<std::size_t>(i)]);
    const HazardModel m = fit_hazard_model(select_rows(emb, train), ytr, reg);
    const Eigen::VectorXd risk = m.risk(select_rows(emb, test));
    std::vector<double> times, risks;
    std::vector<char> events;
    for (std::size_t k = 0; k < test.size(); ++k) {
      const auto& s = y[static_cast<std::size_t>(test[k])];
      times.push_back(s.time);
      events.push_back(s.event ? 1 : 0);
      risks.push_back(risk(static_cast<Eigen::Index>(k)));
    }
    if (std::none_of(events.begin(), events.end(), [](char e) { return e != 0; }))
      throw ValidationError("survival: fold " + std::to_string(f) + " has no uncensored samples");
    r.c_index.push_back(c_index(times, events, risks));
    r.edges.push_back(m.edges);
  }
  return r;
}

double c_index(const std::vector<double>& times, const std::vector<char>& events, const std::vector<double>& risks) {
  const std::size_t n = times.size();
  if (events.size() != n || risks.size() != n) throw ValidationError("c_index: length mismatch");
  // Ranks of distinct risk values for a Fenwick tree over "risk < r" counts.
  std::vector<double> sorted = risks;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  const std::size_t m = sorted.size();
  std::vector<long long> tree(m + 1, 0);
  auto rank = [&](double r) {
    return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), r) - sorted.begin()) + 1;
  };
  auto add = [&](std::size_t i) {
    for (; i <= m; i += i & (~i + 1)) ++tree[i];
  };
  auto prefix = [&](std::size_t i) {
    long long s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree[i];
    return s;
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });

  long long inserted = 0, pairs = 0, twice_score = 0;
  std::size_t g = 0;
  while (g < n) {
    std::size_t end = g;
    while (end < n && times[order[end]] == times[order[g]]) ++end;
    for (std::size_t k = g; k < end; ++k) {
      const std::size_t i = order[k];
      if (!events[i]) continue;
      const std::size_t r = rank(risks[i]);
      const long long below = prefix(r - 1);
      const long long equal = prefix(r) - below;
      pairs += inserted;
      twice_score += 2 * below + equal;
    }
    for (std::size_t k = g; k < end; ++k) {
      add(rank(risks[order[k]]));
      ++inserted;
    }
    g = end;
  }
  if (pairs == 0) throw ValidationError("c_index: no comparable pairs");
  return static_cast<double>(twice_score) / (2.0 * static_cast<double>(pairs));
}

// ---- alignment geometry ---------------------------------------------------------------------

double retrieval_recall(const Eigen::MatrixXd& s_align, const Eigen::MatrixXd& t_align, int batch,
                        std::uint64_t seed) {
  if (s_align.rows() != t_align.rows() || s_align.cols() != t_align.cols())
    throw ValidationError("retrieval: embedding shapes differ");
  if (batch <= 1) return 1.0;
  const auto n = static_cast<int>(s_align.rows());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, 0x7e7);
  std::shuffle(order.begin(), order.end(), rng);
  const int full = n / batch;
  const int n_batches = full == 0 ? 1 : full;
  const int size = full == 0 ? n : batch;
  long long hits = 0, total = 0;
  for (int bi = 0; bi < n_batches; ++bi) {
    const std::vector<int> idx(order.begin() + bi * size, order.begin() + (bi + 1) * size);
    const Eigen::MatrixXd s = select_rows(s_align, idx).rowwise().normalized();
    const Eigen::MatrixXd t = select_rows(t_align, idx).rowwise().normalized();
    const Eigen::MatrixXd sim = s * t.transpose();
    for (int i = 0; i < size; ++i) {
      Eigen::Index best = 0;
      sim.row(i).maxCoeff(&best);
      hits += best == i ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

double retrieval_recall(const ModelState& state, const Dataset& ds, int batch, std::uint64_t seed) {
  const Embeddings e = compute_embeddings(state, ds);
  return retrieval_recall(e.s_align, e.t_align, batch, seed);
}

PairCosines pair_cosines(const Eigen::MatrixXd& s_align, const Eigen::MatrixXd& t_align) {
  if (s_align.rows() < 2 || s_align.rows() != t_align.rows()) throw ValidationError("pair cosines: need >= 2 pairs");
  const Eigen::MatrixXd sim = s_align.rowwise().normalized() * t_align.rowwise().normalized().transpose();
  const auto n = static_cast<double>(sim.rows());
  PairCosines pc;
  pc.positive = sim.diagonal().mean();
  pc.negative = (sim.sum() - sim.diagonal().sum()) / (n * (n - 1));
  pc.negative_abs = (sim.cwiseAbs().sum() - sim.diagonal().cwiseAbs().sum()) / (n * (n - 1));
  return pc;
}

// ---- subspace probes ------------------------------------------------------------------------

double ridge_heldout_r2(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const FoldPlan& plan) {
  if (x.rows() != y.rows() || static_cast<std::size_t>(x.rows()) != plan.fold.size())
    throw ValidationError("ridge probe: row counts differ");
  Eigen::MatrixXd pred = Eigen::MatrixXd::Zero(y.rows(), y.cols());
  std::vector<double> grid;
  for (int e = -6; e <= 10; ++e) grid.push_back(std::pow(10.0, 0.5 * e));
  for (int f = 0; f < plan.folds; ++f) {
    const auto train = plan.train_indices(f);
    const auto test = plan.test_indices(f);
    const Eigen::MatrixXd xtr_raw = select_rows(x, train);
    const Standardizer sc = Standardizer::fit(xtr_raw);
    const Eigen::MatrixXd xtr = sc.apply(xtr_raw);
    const Eigen::MatrixXd ytr_raw = select_rows(y, train);
    const Eigen::RowVectorXd ymean = ytr_raw.colwise().mean();
    const Eigen::MatrixXd ytr = ytr_raw.rowwise() - ymean;
    const Eigen::MatrixXd gram = xtr * xtr.transpose();
    // penalties are relative to the mean kernel diagonal
    const double scale = std::max(1e-12, gram.trace() / static_cast<double>(gram.rows()));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    const Eigen::MatrixXd& u = eig.eigenvectors();
    const Eigen::VectorXd s = eig.eigenvalues().cwiseMax(0.0);
    const Eigen::MatrixXd uty = u.transpose() * ytr;
    const Eigen::MatrixXd u2 = u.array().square();
    double best_lambda = grid.front() * scale, best_loo = std::numeric_limits<double>::infinity();
    for (double rel : grid) {
      const double lambda = rel * scale;
      const Eigen::VectorXd shrink = s.array() / (s.array() + lambda);
      const Eigen::MatrixXd fitted = u * (shrink.asDiagonal() * uty);
      const Eigen::VectorXd hdiag = u2 * shrink;
      double loo = 0.0;
      for (Eigen::Index i = 0; i < ytr.rows(); ++i)
        loo += ((ytr.row(i) - fitted.row(i)) / std::max(1e-12, 1.0 - hdiag(i))).squaredNorm();
      if (loo < best_loo) {
        best_loo = loo;
        best_lambda = lambda;
      }
    }
    const Eigen::VectorXd inv = (s.array() + best_lambda).inverse();
    const Eigen::MatrixXd alpha = u * (inv.asDiagonal() * uty);
    const Eigen::MatrixXd xte = sc.apply(select_rows(x, test));
    const Eigen::MatrixXd yhat = (xte * xtr.transpose() * alpha).rowwise() + ymean;
    for (std::size_t k = 0; k < test.size(); ++k) pred.row(test[k]) = yhat.row(static_cast<Eigen::Index>(k));
  }
  double total = 0.0;
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double sst = (y.col(c).array() - y.col(c).mean()).square().sum();
    const double sse = (y.col(c) - pred.col(c)).squaredNorm();
    total += sst > 0 ? 1.0 - sse / sst : 0.0;
  }
  return total / static_cast<double>(y.cols());
}

double SubspaceReport::r2(const std::string& block, const std::string& representation) const {
  for (const auto& e : entries)
    if (e.block == block && e.representation == representation) return e.r2;
  throw ValidationError("subspace report has no entry " + block + "/" + representation);
}

SubspaceReport subspace_probe(const Embeddings& emb, const SyntheticGroundTruth& gt, const FoldPlan& plan) {
  auto hcat = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
  };
  struct Block {
    const char* name;
    FactorBlock which;
  };
  const Block blocks[] = {{"shared_relevant", FactorBlock::shared_relevant},
                          {"slide_specific", FactorBlock::slide_specific},
                          {"rna_specific", FactorBlock::rna_specific},
                          {"irrelevant", FactorBlock::irrelevant}};
  SubspaceReport report;
  for (const auto& b : blocks) {
    const Eigen::MatrixXd target = probe_targets(gt, b.which);
    for (const char* rep : {"aligned", "encoder"}) {
      const bool aligned = std::string(rep) == "aligned";
      const Eigen::MatrixXd& slide = aligned ? emb.s_align : emb.slide_tokens;
      const Eigen::MatrixXd& rna = aligned ? emb.t_align : emb.rna_tokens;
      Eigen::MatrixXd x;
      if (b.which == FactorBlock::slide_specific)
        x = slide;
      else if (b.which == FactorBlock::rna_specific)
        x = rna;
      else
        x = hcat(slide, rna);
      report.entries.push_back({b.name, rep, ridge_heldout_r2(x, target, plan)});
    }
  }
  return report;
}

SubspaceReport subspace_probe(const ModelState& state, const Dataset& ds, const SyntheticGroundTruth& gt, int folds,
                              std::uint64_t seed) {
  if (gt.factors.size() != ds.size()) throw ValidationError("ground truth does not match the dataset size");
  return subspace_probe(compute_embeddings(state, ds), gt, make_folds(ds, folds, seed));
}

// ---- metrics files -------------------------------------------------------------------------

void write_metrics(const std::vector<MetricRow>& rows, const std::filesystem::path& json_path,
                   const std::filesystem::path& csv_path) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["task"] = r.task;
    o["setting"] = r.setting;
    o["fold"] = r.fold;
    o["metric"] = r.metric;
    o["value"] = r.value;
    j.push_back(std::move(o));
  }
  {
    std::ofstream out(json_path);
    if (!out) throw IoError("cannot write " + json_path.string());
    out << nlohmann::ordered_json{{"metrics", j}}.dump(2) << '\n';
  }
  std::ofstream out(csv_path);
  if (!out) throw IoError("cannot write " + csv_path.string());
  out << "task,setting,fold,metric,value\n" << std::setprecision(17);
  for (const auto& r : rows)
    out << r.task << ',' << r.setting << ',' << (r.fold < 0 ? std::string("all") : std::to_string(r.fold)) << ','
        << r.metric << ',' << r.value << '\n';
  if (!out) throw IoError("write failed for " + csv_path.string());
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("task,setting,fold,metric,value", 0) != 0)
    throw FormatError(path.string() + ": missing metrics header");
  std::vector<MetricRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
    MetricRow r;
    r.task = f[0];
    r.setting = f[1];
    try {
      r.fold = f[2] == "all" ? -1 : std::stoi(f[2]);
      r.metric = f[3];
      r.value = std::stod(f[4]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricRow> probe_rows(const std::string& task, const std::string& setting, const ProbeResult& r) {
  std::vector<MetricRow> rows;
  for (std::size_t f = 0; f < r.accuracy.size(); ++f) {
    rows.push_back({task, setting, static_cast<int>(f), "accuracy", r.accuracy[f]});
    rows.push_back({task, setting, static_cast<int>(f), "macro_f1", r.macro_f1[f]});
  }
  return rows;
}

std::vector<MetricRow> survival_rows(const std::string& setting, const SurvivalResult& r) {
  std::vector<MetricRow> rows;
  for (std::size_t f = 0; f < r.c_index.size(); ++f)
    rows.push_back({"survival", setting, static_cast<int>(f), "c_index", r.c_index[f]});
  return rows;
}

std::string summarize_metrics(const std::vector<MetricRow>& rows) {
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
  std::vector<std::tuple<std::string, std::string, std::string>> order;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.task, r.setting, r.metric);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(r.value);
  }
  std::ostringstream out;
  out << std::left << std::setw(12) << "task" << std::setw(10) << "setting" << std::setw(14) << "metric"
      << std::setw(6) << "n" << "mean +- std\n";
  out << std::fixed << std::setprecision(4);
  for (const auto& key : order) {
    const auto& v = groups[key];
    out << std::setw(12) << std::get<0>(key) << std::setw(10) << std::get<1>(key) << std::setw(14)
        << std::get<2>(key) << std::setw(6) << v.size() << mean_of(v) << " +- " << std_of(v) << '\n';
  }
  return out.str();
}

}  // namespace mirror
