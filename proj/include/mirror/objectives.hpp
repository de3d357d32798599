#pragma once

#include <cstdint>
#include <vector>

#include "mirror/autograd.hpp"
#include "mirror/data_model.hpp"
#include "mirror/encoders.hpp"
#include "mirror/model.hpp"

namespace mirror {

struct ObjectiveConfig {
  double tau = 10.0;   // multiplies the dot-product logits
  double kappa = 5.0;  // cluster assignment sharpness
  double slide_mask_ratio = 0.25;
  double rna_mask_ratio = 0.25;
  double prob_floor = 1e-8;
  bool use_retention = true;
  bool use_style = true;
  double w_align = 1.0;
  double w_retention = 1.0;
  double w_style = 1.0;

  void validate() const;
};

struct LossBreakdown {
  double l_align = 0.0;
  double l_retention = 0.0;
  double l_style = 0.0;
  double l_cluster = 0.0;
  double l_total = 0.0;
  double w_align = 1.0, w_retention = 1.0, w_style = 1.0;
};

// Weighted total of the four terms.
LossBreakdown combine(double l_align, double l_retention, double l_style, double l_cluster, double w_align,
                      double w_retention, double w_style);

// A minibatch of B paired samples with bags already sampled to n patches.
struct Batch {
  Tensor bags;  // (B * n) x D_p
  Tensor expr;  // B x K
  int n = 0;
  std::vector<int> sample_index;  // rows of the source dataset

  int size() const { return static_cast<int>(expr.rows()); }
};

// Each bag is drawn with a seed derived from bag_seed and the slide id.
Batch make_batch(const Dataset& ds, const std::vector<int>& indices, int n_fixed, std::uint64_t bag_seed);

// Exactly max(1, round(ratio * n)) positions set, chosen uniformly.
std::vector<char> mask_select(int n_tokens, double ratio, std::uint64_t seed);

enum class Mode { train, eval };

struct StepSeeds {
  std::uint64_t mask = 0;
  std::uint64_t noise = 0;
};

template <typename T>
struct RetentionTargets {
  ad::Matrix<T> slide;  // (B * n) x D
  ad::Matrix<T> rna;    // (B * G) x D_t
};

template <typename T>
struct LossGraph {
  ad::Var<T> total;
  ad::Var<T> align, retention, style, cluster;  // invalid when a branch is disabled
  LossBreakdown breakdown;
  SlideForward<T> slide;
  RnaForward<T> rna;
  ad::Var<T> s_align, t_align;  // B x D, unit rows
  RetentionTargets<T> targets;
};

// Runs both encoders once and every enabled objective branch. When `frozen` is
// given those retention targets are used instead of the current encoder outputs.
template <typename T>
LossGraph<T> build_loss(ad::Tape<T>& tape, const MirrorModel& model, const ParamStore& store, const Batch& batch,
                        const ObjectiveConfig& cfg, Mode mode, const StepSeeds& seeds,
                        const RetentionTargets<T>* frozen = nullptr);

// Alignment head: Linear -> GELU -> Linear -> row L2 normalization.
template <typename T>
ad::Var<T> alignment_head(ad::Tape<T>& tape, const ParamStore& store, const AlignmentHeadParams& p,
                          const ad::Var<T>& x);

// ---- plain evaluation of individual terms ---------------------------------------------

// Symmetric InfoNCE on already aligned (unit) embeddings.
double info_nce(const Tensor& s_align, const Tensor& t_align, double tau);
// Applies the alignment heads first.
double alignment_loss(const MirrorModel& model, const ParamStore& store, const Tensor& s_cls, const Tensor& t_vec,
                      double tau);
double style_kl(const Tensor& mu, const Tensor& logvar);
Tensor cluster_assign(const Tensor& z, const Tensor& centers, double kappa);
double cluster_consistency_loss(const Tensor& p, const Tensor& q, double floor = 1e-8);
// Masked-position MSE, per-sequence mean then batch mean.
double retention_mse(const Tensor& pred, const Tensor& target, const std::vector<char>& mask, int seq_len);

// Aligned embeddings (eval mode) for stacked encoder outputs.
Tensor align_slide(const MirrorModel& model, const ParamStore& store, const Tensor& s_cls);
Tensor align_rna(const MirrorModel& model, const ParamStore& store, const Tensor& t_vec);

}  // namespace mirror
