#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mirror/autograd.hpp"

namespace mirror {

using Tensor = ad::Matrix<double>;

// Named parameter tensors in declaration order. Ids are stable indices.
class ParamStore {
 public:
  // Returns the id of `name`, creating a zero tensor if absent. Throws
  // ValidationError if it exists with a different shape.
  int declare(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  int find(const std::string& name) const;  // -1 when absent
  int at(const std::string& name) const;    // throws when absent

  Tensor& value(int id) { return values_[static_cast<std::size_t>(id)]; }
  const Tensor& value(int id) const { return values_[static_cast<std::size_t>(id)]; }
  const std::string& name(int id) const { return names_[static_cast<std::size_t>(id)]; }
  int size() const { return static_cast<int>(values_.size()); }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t scalar_count() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, int> index_;
};

struct ModelConfig {
  int d_p = 64;
  int k_genes = 256;
  int dim = 64;        // D, shared latent width
  int rna_dim = 64;    // D_t, RNA token width
  int heads = 4;
  int depth = 2;       // attention blocks per encoder
  int retention_depth = 2;
  int mlp_ratio = 2;
  int n_fixed = 64;    // patches per sampled bag
  int rna_groups = 16; // G_t
  bool use_ppeg = true;
  int style_dim = 32;  // d_z
  int clusters = 8;    // C

  void validate() const;
};

struct BlockParams {
  int ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

struct SlideEncoderParams {
  int proj_w, proj_b, cls;
  std::vector<BlockParams> blocks;
  int ppeg3, ppeg5, ppeg7;
  int norm_g, norm_b;
};

struct RnaEncoderParams {
  int embed_w, embed_b, gene_token;
  std::vector<BlockParams> blocks;
  int norm_g, norm_b, out_w, out_b;
  std::vector<int> group_bounds;  // G_t + 1 offsets into the gene axis
};

struct AlignmentHeadParams {
  int fc1_w, fc1_b, fc2_w, fc2_b;
};

struct RetentionHeadParams {
  int mask_token;
  std::vector<BlockParams> blocks;
  int norm_g, norm_b, out_w, out_b;
};

struct StyleHeadParams {
  int slide_w, slide_b, rna_w, rna_b, centers;
};

// Parameter ids for every module; built against a ParamStore.
struct MirrorModel {
  ModelConfig cfg;
  SlideEncoderParams slide;
  RnaEncoderParams rna;
  AlignmentHeadParams align_slide, align_rna;
  RetentionHeadParams retention_slide, retention_rna;
  StyleHeadParams style;

  // Declares (or binds to existing) parameters with canonical names.
  static MirrorModel declare(const ModelConfig& cfg, ParamStore& store);
};

// Contiguous split of [0, k) into `groups` near-equal ranges.
std::vector<int> group_bounds(int k, int groups);

// Deterministic init: linear maps U(-1/sqrt(fan_in), 1/sqrt(fan_in)); tokens,
// PPEG kernels and cluster centers N(0, 0.02^2) (centers then unit-normalized);
// layer norms at identity.
void init_params(const MirrorModel& model, ParamStore& store, std::uint64_t seed);

// Re-normalizes cluster center rows to unit length.
void normalize_centers(const MirrorModel& model, ParamStore& store);

}  // namespace mirror
