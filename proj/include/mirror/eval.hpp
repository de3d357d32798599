#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mirror/data_model.hpp"
#include "mirror/linear_model.hpp"
#include "mirror/synth_cohort.hpp"
#include "mirror/trainer.hpp"

namespace mirror {

struct FoldPlan {
  int folds = 0;
  std::vector<int> fold;  // per sample

  std::vector<int> train_indices(int f) const;
  std::vector<int> test_indices(int f) const;
};

FoldPlan make_folds(const std::vector<int>& labels, int folds, std::uint64_t seed);
FoldPlan make_folds(const Dataset& ds, int folds, std::uint64_t seed);

// Every representation the downstream tasks use, one row per sample in dataset order.
struct Embeddings {
  Eigen::MatrixXd s_cls;        // n x D
  Eigen::MatrixXd t_vec;        // n x D
  Eigen::MatrixXd s_align;      // n x D, unit rows
  Eigen::MatrixXd t_align;      // n x D, unit rows
  Eigen::MatrixXd slide_tokens; // n x D, mean over patch tokens
  Eigen::MatrixXd rna_tokens;   // n x (G_t * D_t), group tokens flattened

  Eigen::MatrixXd combined() const;  // [s_cls, t_vec]
};

inline constexpr std::uint64_t kEvalBagSeed = 0x5eed;

// Evaluation mode (no masking, no sampling noise), fixed bag seed.
Embeddings compute_embeddings(const ModelState& state, const Dataset& ds, std::uint64_t bag_seed = kEvalBagSeed);
Eigen::MatrixXd embed_dataset(const ModelState& state, const Dataset& ds);

// Same samples with RNA profiles permuted across them (negative control).
Dataset shuffled_pairing(const Dataset& ds, std::uint64_t seed);

struct ProbeResult {
  std::vector<double> accuracy;  // per fold
  std::vector<double> macro_f1;
  std::vector<int> train_rows;   // training rows used per fold

  double mean_accuracy() const;
  double std_accuracy() const;
  double mean_f1() const;
  double std_f1() const;
};

inline constexpr double kProbeRegularization = 1e-3;

ProbeResult linear_probe(const Eigen::MatrixXd& emb, const std::vector<int>& labels, int n_classes,
                         const FoldPlan& plan, double reg = kProbeRegularization);
ProbeResult few_shot_probe(const Eigen::MatrixXd& emb, const std::vector<int>& labels, int n_classes,
                           const FoldPlan& plan, int shots, std::uint64_t seed, double reg = kProbeRegularization);

// ---- survival ---------------------------------------------------------------------------

inline constexpr int kSurvivalBins = 4;

// Linear-interpolation quantiles at 1/4, 2/4, 3/4.
std::vector<double> quartile_edges(std::vector<double> times);
// Number of edges strictly below t.
int time_bin(double t, const std::vector<double>& edges);

// Discrete-time logistic hazard model: per-bin logits x W + b.
struct HazardModel {
  Standardizer scaler;
  Eigen::MatrixXd weights;  // D x bins
  Eigen::RowVectorXd bias;  // bins
  std::vector<double> edges;
  int iterations = 0;

  Eigen::MatrixXd hazards(const Eigen::MatrixXd& x) const;
  // Negative expected survival: -sum over bins of S(k).
  Eigen::VectorXd risk(const Eigen::MatrixXd& x) const;
};

HazardModel fit_hazard_model(const Eigen::MatrixXd& x, const std::vector<SurvivalLabel>& y, double reg,
                             const SolverOptions& opts = {});
// Censoring-aware negative log-likelihood (mean over samples, without the penalty).
double hazard_nll(const Eigen::MatrixXd& hazards, const std::vector<int>& bins, const std::vector<char>& events);

struct SurvivalResult {
  std::vector<double> c_index;  // per fold
  std::vector<std::vector<double>> edges;

  double mean() const;
  double std() const;
};

SurvivalResult survival_fit_eval(const Eigen::MatrixXd& emb, const std::vector<SurvivalLabel>& y,
                                 const FoldPlan& plan, double reg = kProbeRegularization);

// Harrell's concordance over pairs with t_i < t_j and event_i; ties in risk get half credit.
double c_index(const std::vector<double>& times, const std::vector<char>& events, const std::vector<double>& risks);

// ---- alignment geometry ------------------------------------------------------------------

// Recall@1 within seeded batches of `batch` rows; the trailing partial batch
// is dropped unless it is the only one. batch <= 1 returns 1.
double retrieval_recall(const Eigen::MatrixXd& s_align, const Eigen::MatrixXd& t_align, int batch,
                        std::uint64_t seed);
double retrieval_recall(const ModelState& state, const Dataset& ds, int batch, std::uint64_t seed);

struct PairCosines {
  double positive = 0.0;      // mean cos(s_i, t_i)
  double negative = 0.0;      // mean cos(s_i, t_j), i != j
  double negative_abs = 0.0;  // mean |cos(s_i, t_j)|
};
PairCosines pair_cosines(const Eigen::MatrixXd& s_align, const Eigen::MatrixXd& t_align);

// ---- ground-truth subspace probes ----------------------------------------------------------

// Held-out R^2 (pooled over folds, averaged over target columns) of ridge
// regression; the penalty is chosen per fold by leave-one-out on the training part.
double ridge_heldout_r2(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const FoldPlan& plan);

struct SubspaceEntry {
  std::string block;           // shared_relevant | slide_specific | rna_specific | irrelevant
  std::string representation;  // aligned | encoder
  double r2 = 0.0;
};

struct SubspaceReport {
  std::vector<SubspaceEntry> entries;
  double r2(const std::string& block, const std::string& representation) const;
};

// Slide-specific factors are probed from the slide side only, RNA-specific
// from the RNA side only, the other blocks from both modalities.
SubspaceReport subspace_probe(const Embeddings& emb, const SyntheticGroundTruth& gt, const FoldPlan& plan);
SubspaceReport subspace_probe(const ModelState& state, const Dataset& ds, const SyntheticGroundTruth& gt,
                              int folds = 5, std::uint64_t seed = 0);

// ---- metrics files ---------------------------------------------------------------------------

struct MetricRow {
  std::string task;     // subtype | survival | retrieval | ...
  std::string setting;  // 10-shot | all-data
  int fold = -1;        // -1 = aggregate
  std::string metric;
  double value = 0.0;
};

void write_metrics(const std::vector<MetricRow>& rows, const std::filesystem::path& json_path,
                   const std::filesystem::path& csv_path);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

std::vector<MetricRow> probe_rows(const std::string& task, const std::string& setting, const ProbeResult& r);
std::vector<MetricRow> survival_rows(const std::string& setting, const SurvivalResult& r);

// Mean and std per (task, setting, metric) over folds, as an aligned text table.
std::string summarize_metrics(const std::vector<MetricRow>& rows);

}  // namespace mirror
