#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace mirror {

struct SolverOptions {
  int max_iterations = 3000;
  double gradient_tolerance = 1e-6;
};

// L2-regularized one-vs-rest logistic regression fitted by deterministic
// full-batch accelerated gradient descent. Column c of `weights` scores class c.
struct LinearClassifier {
  Eigen::MatrixXd weights;     // D x C
  Eigen::VectorXd intercepts;  // C
  double regularization = 0.0;
  int iterations = 0;          // total over the per-class fits
  bool converged = false;

  Eigen::MatrixXd decision(const Eigen::MatrixXd& x) const;
  std::vector<int> predict(const Eigen::MatrixXd& x) const;
  // I_g = sum over classes of beta_g^2.
  Eigen::VectorXd importance() const;
};

// Throws ValidationError for fewer than two samples or classes, non-finite x,
// or reg <= 0.
LinearClassifier fit_linear_classifier(const Eigen::MatrixXd& x, const std::vector<int>& y, int n_classes,
                                       double reg, const SolverOptions& opts = {});

// Largest eigenvalue of [X 1]^T [X 1] / n, by power iteration.
double augmented_gram_norm(const Eigen::MatrixXd& x);

double accuracy(const std::vector<int>& truth, const std::vector<int>& pred);
double macro_f1(const std::vector<int>& truth, const std::vector<int>& pred, int n_classes);

// Stratified fold assignment: per class, a seeded shuffle dealt round-robin
// with a rotating start so per-fold totals stay balanced. Throws
// ValidationError if some class has fewer than `folds` members.
std::vector<int> stratified_folds(const std::vector<int>& labels, int folds, std::uint64_t seed);

// Column standardization fitted on one matrix and applied to others.
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd inv_sd;
  static Standardizer fit(const Eigen::MatrixXd& x);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
};

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& x, const std::vector<int>& rows);
Eigen::MatrixXd select_cols(const Eigen::MatrixXd& x, const std::vector<int>& cols);

}  // namespace mirror
