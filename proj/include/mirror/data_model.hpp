#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace mirror {

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using FloatVector = Eigen::VectorXf;

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

struct GridCoord {
  std::int32_t row = 0;
  std::int32_t col = 0;
  friend auto operator<=>(const GridCoord&, const GridCoord&) = default;
};

// One slide as a bag of patch feature vectors (N_raw x D_p) with grid positions.
struct PatchFeatureBag {
  std::string slide_id;
  FloatMatrix features;
  std::vector<GridCoord> coords;
};

using GenePanelIds = std::shared_ptr<const std::vector<std::string>>;

// Log-normalized expression over a gene panel shared by the whole dataset.
struct TranscriptomicsProfile {
  std::string sample_id;
  GenePanelIds gene_ids;
  FloatVector values;
};

struct SurvivalLabel {
  double time = 1.0;
  bool event = true;  // false = censored
};

struct PairedSample {
  PatchFeatureBag bag;
  TranscriptomicsProfile rna;
  int subtype = 0;
  SurvivalLabel survival;
};

struct Dataset {
  std::vector<PairedSample> samples;
  int n_classes = 0;
  int d_p = 0;
  int k_genes = 0;
  GenePanelIds gene_ids;
  std::map<std::string, std::string> manifest;  // free-form metadata

  std::size_t size() const { return samples.size(); }
  std::vector<int> labels() const;
};

// Field-for-field equality; float payloads compared bitwise.
bool equal(const Dataset& a, const Dataset& b);

// Throws ValidationError naming the offending sample on any invariant violation.
void validate(const Dataset& ds);

void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

// Single sample file codec, exposed for tests and tooling.
void write_sample_file(const PairedSample& s, const std::filesystem::path& path);
PairedSample read_sample_file(const std::filesystem::path& path, const std::string& sample_id, GenePanelIds genes);

struct SampledBag {
  FloatMatrix features;            // n_fixed x D_p
  std::vector<GridCoord> coords;   // n_fixed
  std::vector<int> rows;           // source row per output row
};

// Uniform row sampling: without replacement when the bag is large enough,
// with replacement otherwise. Pure function of (bag, n_fixed, seed).
SampledBag sample_bag(const PatchFeatureBag& bag, int n_fixed, std::uint64_t seed);

// Reorders samples; used for shuffled-pairing controls and tests.
Dataset subset(const Dataset& ds, const std::vector<int>& order);

}  // namespace mirror
