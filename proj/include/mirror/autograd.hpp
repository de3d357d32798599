#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation of one forward pass. Calling backward() on
// a 1x1 node walks the tape in reverse and accumulates gradients into every
// node that requires them. Parameters enter the tape through param(), which
// caches one leaf per parameter id so that repeated use accumulates into a
// single gradient.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace mirror::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Matrix<T>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;
  using BackwardFn = std::function<void(Tape&, const Mat& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Mat value);
  Var<T> leaf(Mat value);
  // Leaf bound to an external parameter slot; one node per slot per tape.
  Var<T> param(int slot, const Matrix<double>& value);

  // Records an op result. `backward` runs only if some input requires grad.
  Var<T> record(Mat value, bool requires_grad, BackwardFn backward);

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(const Var<T>& v) const { return requires_grad(v.id); }

  // Gradient accumulator for node `id`; zero-initialized on first access.
  Mat& grad(int id);
  const Mat* grad_if_any(int id) const;

  void backward(const Var<T>& root);

  // (slot, gradient) for every bound parameter that received a gradient.
  struct ParamGrad {
    int slot;
    const Mat* grad;
  };
  std::vector<ParamGrad> param_grads() const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<int> slot_to_node_;
  std::vector<std::pair<int, int>> bound_;  // (slot, node)
};

// ---- elementwise / linear algebra -------------------------------------------------

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);
template <typename T> Var<T> gelu(const Var<T>& a);
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// x * w + b, with b a 1 x out row broadcast over rows.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias);
template <typename T> Var<T> l2_normalize_rows(const Var<T>& x);
template <typename T> Var<T> sum(const Var<T>& a);
// Weighted sum of 1x1 scalars.
template <typename T> Var<T> weighted_sum(std::span<const Var<T>> terms, std::span<const T> weights);

// ---- shape ------------------------------------------------------------------------

template <typename T> Var<T> gather_rows(const Var<T>& x, std::vector<int> index);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_cols(const Var<T>& x, Eigen::Index begin, Eigen::Index count);
// Row i from `when_true` if mask[i] else from `when_false`.
template <typename T> Var<T> select_rows(const std::vector<char>& mask, const Var<T>& when_true,
                                         const Var<T>& when_false);

// x: B x K split into contiguous column groups [bounds[g], bounds[g+1]); group g
// is embedded with rows bounds[g].. of w (K x E) plus row g of bias (G x E).
// Output row b * G + g.
template <typename T>
Var<T> grouped_linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const std::vector<int>& bounds);

// ---- sequence ops on stacked sequences of equal length ----------------------------

// qkv: (n_seq * seq_len) x 3D, columns [Q | K | V]. Returns (n_seq * seq_len) x D.
// When `probs` is non-null it receives n_seq * heads attention matrices,
// indexed seq * heads + head, each seq_len x seq_len with rows summing to one.
template <typename T>
Var<T> multi_head_attention(const Var<T>& qkv, int seq_len, int heads,
                            std::vector<Matrix<T>>* probs = nullptr);

// Pyramid positional mixing: each sequence is laid on a square grid and the
// sum of depthwise 3x3, 5x5 and 7x7 zero-padded mixings is added to it.
// Kernels are (k*k) x D, row-major over (dr, dc).
template <typename T>
Var<T> ppeg(const Var<T>& x, int seq_len, const Var<T>& k3, const Var<T>& k5, const Var<T>& k7);

// ---- fused losses -----------------------------------------------------------------

// Symmetric InfoNCE with logits scale * <s_i, t_j>; returns the mean of both directions.
template <typename T> Var<T> symmetric_info_nce(const Var<T>& s, const Var<T>& t, T scale);
// KL(N(mu, exp(logvar)) || N(0, I)) summed over columns, averaged over rows.
template <typename T> Var<T> kl_standard_normal(const Var<T>& mu, const Var<T>& logvar);
// Row-wise softmax of kappa * cosine(z_i, c_k). Zero rows of z give a uniform row.
template <typename T> Var<T> cosine_softmax(const Var<T>& z, const Var<T>& centers, T kappa);
// Mean over rows of KL(p||q) + KL(q||p); probabilities floored before logs.
template <typename T> Var<T> symmetric_kl(const Var<T>& p, const Var<T>& q, T floor);
// Per-sequence mean squared error over masked rows (all columns), averaged over
// sequences. `target` is treated as a constant.
template <typename T>
Var<T> masked_mse(const Var<T>& pred, const Matrix<T>& target, const std::vector<char>& mask,
                  int seq_len);

}  // namespace mirror::ad
