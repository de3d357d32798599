#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mirror/linear_model.hpp"

namespace mirror {

// Recursive feature elimination over expression columns, scored by the
// squared coefficients of the linear classifier.

struct ImportanceModel {
  Eigen::VectorXd importance;  // I_g, one per surviving column
  LinearClassifier classifier;
};

struct RfeTrace {
  struct Elimination {
    int round = 0;
    std::string gene;
    double importance = 0.0;
  };
  std::vector<Elimination> eliminated;  // first eliminated first
  std::vector<std::string> survivors;   // in original column order
  // (n_features, accuracy). For rfe_cv: one entry per fold, in fold order.
  std::vector<std::pair<int, double>> cv_scores;

  std::vector<std::string> elimination_order() const;
};

enum class GeneSource { rfe, curated, both };

struct GenePanel {
  std::vector<std::string> gene_ids;
  std::vector<GeneSource> provenance;
};

struct RfeOptions {
  int k_target = 1;
  int step = 1;  // 0 = chunked: max(1, floor(current / 10))
  double reg = 1e-2;
  SolverOptions solver{};
};

ImportanceModel fit_importance(const Eigen::MatrixXd& x, const std::vector<int>& y, double reg,
                               const SolverOptions& opts = {});

// `gene_ids` names the columns of x. Survivors are returned in column order.
RfeTrace rfe(const Eigen::MatrixXd& x, const std::vector<int>& y, const std::vector<std::string>& gene_ids,
             const RfeOptions& opts);

struct RfeCvResult {
  GenePanel panel;
  RfeTrace trace;  // elimination history of the best fold, cv_scores for all folds
  int best_fold = 0;
};

RfeCvResult rfe_cv(const Eigen::MatrixXd& x, const std::vector<int>& y, const std::vector<std::string>& gene_ids,
                   const RfeOptions& opts, int folds, std::uint64_t seed);

// RFE genes first, then curated genes not already present. `universe` is the
// full gene panel the curated ids must come from.
GenePanel merge_panel(const GenePanel& rfe_panel, const std::vector<std::string>& curated,
                      const std::vector<std::string>& universe);

const char* to_string(GeneSource s);

// ---- file formats -------------------------------------------------------------------

struct ExpressionTable {
  std::vector<std::string> sample_ids;
  std::vector<std::string> gene_ids;
  Eigen::MatrixXd values;  // samples x genes
};

// CSV: header "sample_id,<gene>,<gene>...", one row per sample.
ExpressionTable read_expression_csv(const std::filesystem::path& path);
void write_expression_csv(const ExpressionTable& table, const std::filesystem::path& path);
// CSV "sample_id,label" (header optional); returned in the order of `sample_ids`.
std::vector<int> read_labels_csv(const std::filesystem::path& path, const std::vector<std::string>& sample_ids);
// One gene id per line; blank lines and '#' comments ignored.
std::vector<std::string> read_gene_list(const std::filesystem::path& path);

void write_panel_json(const GenePanel& panel, const std::filesystem::path& path);
GenePanel read_panel_json(const std::filesystem::path& path);
// CSV "round,eliminated_gene,importance".
void write_trace_csv(const RfeTrace& trace, const std::filesystem::path& path);

}  // namespace mirror
