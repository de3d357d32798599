#pragma once

#include <filesystem>
#include <vector>

#include "mirror/autograd.hpp"
#include "mirror/data_model.hpp"
#include "mirror/model.hpp"

namespace mirror {

// ---- tape-level building blocks ---------------------------------------------------

template <typename T>
ad::Var<T> bind(ad::Tape<T>& tape, const ParamStore& store, int id) {
  return tape.param(id, store.value(id));
}

// Pre-norm transformer block over stacked sequences of length `seq_len`.
template <typename T>
ad::Var<T> transformer_block(ad::Tape<T>& tape, const ParamStore& store, const BlockParams& p, const ad::Var<T>& x,
                             int seq_len, int heads, std::vector<ad::Matrix<T>>* probs = nullptr);

template <typename T>
struct SlideForward {
  ad::Var<T> tokens;  // (B * n) x D, patch tokens after the final norm
  ad::Var<T> cls;     // B x D
  std::vector<ad::Matrix<T>> attention;  // last block, indexed seq * heads + head, (n+1) x (n+1)
};

// bags: (B * n) x D_p, B bags of n patches stacked.
template <typename T>
SlideForward<T> slide_forward(ad::Tape<T>& tape, const MirrorModel& model, const ParamStore& store,
                              const ad::Matrix<T>& bags, int n, bool keep_attention = false);

template <typename T>
struct RnaForward {
  ad::Var<T> embedded;  // (B * G) x D_t, group embeddings before attention
  ad::Var<T> tokens;    // (B * G) x D_t, group tokens after the final norm
  ad::Var<T> t_vec;     // B x D
};

// expr: B x K.
template <typename T>
RnaForward<T> rna_forward(ad::Tape<T>& tape, const MirrorModel& model, const ParamStore& store,
                          const ad::Matrix<T>& expr);

// ---- plain evaluation API -----------------------------------------------------------

struct SlideEncoding {
  Tensor s_tokens;   // n x D
  Eigen::RowVectorXd s_cls;
  Tensor attention;  // heads x n, class-token weights over patches, rows sum to 1
};

struct RnaEncoding {
  Eigen::RowVectorXd t_vec;
  Tensor t_tokens;  // G_t x D_t
  Tensor embedded;  // G_t x D_t
};

SlideEncoding encode_slide(const MirrorModel& model, const ParamStore& store, const Tensor& bag);
RnaEncoding encode_rna(const MirrorModel& model, const ParamStore& store, const Eigen::RowVectorXd& expr);
// Applies the model's PPEG mixing to a single n x D token sequence.
Tensor ppeg_apply(const MirrorModel& model, const ParamStore& store, const Tensor& tokens);

// Mean class-token attention over heads, one row per sampled patch.
void write_attention_csv(const std::filesystem::path& path, const SampledBag& bag, const Tensor& attention);

}  // namespace mirror
