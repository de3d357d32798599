#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "mirror/synth_cohort.hpp"
#include "mirror/trainer.hpp"

namespace mirror::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mirror_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

// Small cohort at the default feature widths.
inline std::pair<Dataset, SyntheticGroundTruth> small_cohort(int n, std::uint64_t seed = 3) {
  CohortConfig cc;
  cc.n_samples = n;
  cc.patches_min = 20;
  cc.patches_max = 40;
  cc.seed = seed;
  return generate_cohort(cc);
}

// Reduced model for fast training tests.
inline ModelConfig tiny_model(const Dataset& ds) {
  ModelConfig mc;
  mc.d_p = ds.d_p;
  mc.k_genes = ds.k_genes;
  mc.dim = 16;
  mc.rna_dim = 8;
  mc.heads = 2;
  mc.depth = 1;
  mc.retention_depth = 1;
  mc.n_fixed = 16;
  mc.rna_groups = 8;
  mc.style_dim = 8;
  mc.clusters = 4;
  return mc;
}

}  // namespace mirror::test
