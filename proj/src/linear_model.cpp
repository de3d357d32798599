#include "mirror/linear_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "mirror/errors.hpp"
#include "mirror/rng.hpp"

namespace mirror {

namespace {

double sigmoid(double s) {
  if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

}  // namespace

double augmented_gram_norm(const Eigen::MatrixXd& x) {
  const Eigen::Index d = x.cols();
  const double n = static_cast<double>(x.rows());
  Eigen::VectorXd v = Eigen::VectorXd::Ones(d + 1) / std::sqrt(static_cast<double>(d + 1));
  double lambda = 0.0;
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd xv = x * v.head(d) + Eigen::VectorXd::Constant(x.rows(), v(d));
    Eigen::VectorXd w(d + 1);
    w.head(d) = x.transpose() * xv / n;
    w(d) = xv.sum() / n;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    const double next = v.dot(w);
    v = w / norm;
    if (std::abs(next - lambda) <= 1e-10 * std::max(1.0, next)) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return lambda;
}

namespace {

struct BinaryFit {
  Eigen::VectorXd beta;
  double intercept = 0.0;
  int iterations = 0;
  bool converged = false;
};

BinaryFit fit_binary(const Eigen::MatrixXd& x, const Eigen::VectorXd& target, double reg, double lipschitz,
                     const SolverOptions& opts) {
  const Eigen::Index d = x.cols();
  const double n = static_cast<double>(x.rows());
  const double step = 1.0 / lipschitz;
  const double momentum = (std::sqrt(lipschitz) - std::sqrt(reg)) / (std::sqrt(lipschitz) + std::sqrt(reg));

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d), beta_prev = beta;
  double b = 0.0, b_prev = 0.0;
  BinaryFit fit;
  Eigen::VectorXd residual(x.rows());
  for (int it = 0; it < opts.max_iterations; ++it) {
    const Eigen::VectorXd look_beta = beta + momentum * (beta - beta_prev);
    const double look_b = b + momentum * (b - b_prev);
    const Eigen::VectorXd scores = x * look_beta;
    for (Eigen::Index i = 0; i < x.rows(); ++i) residual(i) = sigmoid(scores(i) + look_b) - target(i);
    const Eigen::VectorXd g_beta = x.transpose() * residual / n + reg * look_beta;
    const double g_b = residual.sum() / n;
    fit.iterations = it + 1;
    if (std::sqrt(g_beta.squaredNorm() + g_b * g_b) <= opts.gradient_tolerance) {
      beta = look_beta;
      b = look_b;
      fit.converged = true;
      break;
    }
    beta_prev = beta;
    b_prev = b;
    beta = look_beta - step * g_beta;
    b = look_b - step * g_b;
  }
  fit.beta = std::move(beta);
  fit.intercept = b;
  return fit;
}

}  // namespace

Eigen::MatrixXd LinearClassifier::decision(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd s = x * weights;
  s.rowwise() += intercepts.transpose();
  return s;
}

std::vector<int> LinearClassifier::predict(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd s = decision(x);
  std::vector<int> out(static_cast<std::size_t>(s.rows()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    Eigen::Index best = 0;
    s.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

Eigen::VectorXd LinearClassifier::importance() const { return weights.array().square().rowwise().sum(); }

LinearClassifier fit_linear_classifier(const Eigen::MatrixXd& x, const std::vector<int>& y, int n_classes,
                                       double reg, const SolverOptions& opts) {
  if (x.rows() < 2) throw ValidationError("linear classifier: need at least 2 samples");
  if (static_cast<Eigen::Index>(y.size()) != x.rows()) throw ValidationError("linear classifier: label count mismatch");
  if (!(reg > 0.0)) throw ValidationError("linear classifier: regularization must be > 0");
  if (!x.allFinite()) throw ValidationError("linear classifier: non-finite feature value");
  if (n_classes < 2) throw ValidationError("linear classifier: need at least 2 classes");
  std::set<int> present;
  for (int v : y) {
    if (v < 0 || v >= n_classes) throw ValidationError("linear classifier: label outside [0, n_classes)");
    present.insert(v);
  }
  if (present.size() < 2) throw ValidationError("linear classifier: degenerate labels (single class)");

  const double lipschitz = 1.1 * 0.25 * augmented_gram_norm(x) + reg;
  LinearClassifier model;
  model.regularization = reg;
  model.weights = Eigen::MatrixXd::Zero(x.cols(), n_classes);
  model.intercepts = Eigen::VectorXd::Zero(n_classes);
  model.converged = true;
  for (int c = 0; c < n_classes; ++c) {
    Eigen::VectorXd target(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) target(i) = y[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0;
    const BinaryFit fit = fit_binary(x, target, reg, lipschitz, opts);
    model.weights.col(c) = fit.beta;
    model.intercepts(c) = fit.intercept;
    model.iterations += fit.iterations;
    model.converged = model.converged && fit.converged;
  }
  return model;
}

double accuracy(const std::vector<int>& truth, const std::vector<int>& pred) {
  if (truth.size() != pred.size() || truth.empty()) throw ValidationError("accuracy: size mismatch or empty");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == pred[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double macro_f1(const std::vector<int>& truth, const std::vector<int>& pred, int n_classes) {
  if (truth.size() != pred.size() || truth.empty()) throw ValidationError("macro_f1: size mismatch or empty");
  double total = 0.0;
  int counted = 0;
  for (int c = 0; c < n_classes; ++c) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      tp += (pred[i] == c && truth[i] == c) ? 1 : 0;
      fp += (pred[i] == c && truth[i] != c) ? 1 : 0;
      fn += (pred[i] != c && truth[i] == c) ? 1 : 0;
    }
    if (tp + fp + fn == 0) continue;  // class absent from both truth and predictions
    total += 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    ++counted;
  }
  return counted == 0 ? 0.0 : total / counted;
}

std::vector<int> stratified_folds(const std::vector<int>& labels, int folds, std::uint64_t seed) {
  if (folds < 2) throw ValidationError("folds must be >= 2");
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::vector<int> assignment(labels.size(), -1);
  Rng rng(derive_seed(seed, 0xf01d));
  int offset = 0;
  for (int c : classes) {
    std::vector<int> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) members.push_back(static_cast<int>(i));
    if (static_cast<int>(members.size()) < folds)
      throw ValidationError("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                            " samples, fewer than " + std::to_string(folds) + " folds");
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t k = 0; k < members.size(); ++k)
      assignment[static_cast<std::size_t>(members[k])] = static_cast<int>((offset + static_cast<int>(k)) % folds);
    offset = (offset + static_cast<int>(members.size())) % folds;
  }
  return assignment;
}

Standardizer Standardizer::fit(const Eigen::MatrixXd& x) {
  Standardizer s;
  s.mean = x.colwise().mean();
  s.inv_sd.resize(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double sd = std::sqrt((x.col(c).array() - s.mean(c)).square().mean());
    s.inv_sd(c) = sd > 1e-12 ? 1.0 / sd : 0.0;
  }
  return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& x) const {
  return (x.rowwise() - mean).array().rowwise() * inv_sd.array();
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& x, const std::vector<int>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

Eigen::MatrixXd select_cols(const Eigen::MatrixXd& x, const std::vector<int>& cols) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = x.col(cols[j]);
  return out;
}

}  // namespace mirror
