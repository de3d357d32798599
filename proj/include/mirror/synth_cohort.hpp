#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mirror/data_model.hpp"

namespace mirror {

// Planted latent factors for one sample. Relevant factors drive subtype and
// survival; shared factors appear in both modalities, specific ones in one.
struct LatentFactors {
  Eigen::VectorXd shared_relevant;       // u_rs, class-conditional mean
  Eigen::VectorXd slide_relevant;        // u_ru_s
  Eigen::VectorXd rna_relevant;          // u_ru_t
  Eigen::VectorXd shared_irrelevant;     // e_is
  Eigen::VectorXd slide_irrelevant;      // e_iu_s
  Eigen::VectorXd rna_irrelevant;        // e_iu_t
};

struct CohortConfig {
  int n_samples = 512;
  int n_classes = 2;
  int d_p = 64;
  int k_genes = 256;
  int d_rs = 8;
  int d_ru = 4;
  int d_is = 4;
  int d_iu = 4;
  int n_informative_genes = 32;
  double tumor_patch_fraction = 0.3;
  int patches_min = 64;
  int patches_max = 196;
  double censor_fraction = 0.3;
  std::uint64_t seed = 0;

  // Generator scales. Class means of u_rs sit on orthogonal directions with
  // pairwise distance `class_separation` (in units of the unit within-class sd).
  double class_separation = 12.0;
  double slide_noise = 22.0;
  double rna_noise = 0.5;
  double survival_noise = 0.15;

  void validate() const;
};

struct SyntheticGroundTruth {
  std::vector<LatentFactors> factors;
  std::vector<std::vector<char>> tumor_mask;  // per sample, per patch
  std::vector<int> informative_gene_indices;  // sorted
  Eigen::VectorXd survival_weights;           // w over [u_rs; u_ru_s; u_ru_t]
};

enum class FactorBlock { shared_relevant, slide_specific, rna_specific, irrelevant };

std::pair<Dataset, SyntheticGroundTruth> generate_cohort(const CohortConfig& cfg);

// Rows = samples. irrelevant = [e_is, e_iu_s, e_iu_t].
Eigen::MatrixXd probe_targets(const SyntheticGroundTruth& gt, FactorBlock which);

// Linear predictor w . [u_rs; u_ru_s; u_ru_t] per sample.
Eigen::VectorXd survival_linear_predictor(const SyntheticGroundTruth& gt);

// ground_truth.json with factor blocks and masks embedded as base64 float32 / bytes.
void write_ground_truth(const SyntheticGroundTruth& gt, const std::filesystem::path& path);
SyntheticGroundTruth read_ground_truth(const std::filesystem::path& path);

}  // namespace mirror
